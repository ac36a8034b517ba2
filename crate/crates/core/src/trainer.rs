//! Training: parameter partition, Adam updates, batching of prompt pairs and
//! the fixed-prototype ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    class_embedding, dice_from_logits, pcl, target_tensor, GroundTruthMask, LossBreakdown,
};
use crate::metrics::evaluate;
use crate::model::{forward, ModelConfig, ModelParams};
use crate::params::ParamGroup;
use crate::prompt::{ImageEmbedding, PrototypeBank};
use crate::tensor::{Graph, Scalar, Tensor, Var};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Everything needed to run a training job.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub temperature: f64,
    pub pcl: bool,
    /// Keep the prototype bank at the per-class mean embedding of the training set.
    pub fixed_prototypes: bool,
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps; 0 disables.
    pub eval_every: usize,
    pub threshold: f64,
    pub train_manifest: std::path::PathBuf,
    pub eval_manifest: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            batch_size: 32,
            max_steps: 500,
            temperature: 0.07,
            pcl: true,
            fixed_prototypes: false,
            seed: 7,
            eval_every: 0,
            threshold: 0.5,
            train_manifest: "data/train.tsv".into(),
            eval_manifest: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// First and second Adam moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Parameters plus optimizer state. `slots[i]` belongs to the `i`-th entry of
/// [`ModelParams::entries`] and is `None` for frozen tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<f32>>,
    pub slots: Vec<Option<Moments>>,
    pub step: u64,
}

impl ModelState {
    pub fn new(
        config: ModelConfig,
        params: ModelParams<Tensor<f32>>,
        fixed_prototypes: bool,
    ) -> Self {
        let slots = params
            .entries()
            .iter()
            .map(|e| {
                let frozen =
                    e.group.is_frozen() || (fixed_prototypes && e.group == ParamGroup::Prototypes);
                (!frozen).then(|| Moments {
                    m: vec![0.0; e.value.len()],
                    v: vec![0.0; e.value.len()],
                })
            })
            .collect();
        Self {
            config,
            params,
            slots,
            step: 0,
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.params
            .entries()
            .iter()
            .zip(&self.slots)
            .any(|(e, s)| e.group == group && s.is_some())
    }

    /// Binds parameters onto `g`, marking exactly the tensors with optimizer slots.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Result<ModelParams<Var>> {
        let mut slots = self.slots.iter();
        self.params.try_map(&mut |_, t| {
            let trainable = slots.next().is_some_and(Option::is_some);
            g.leaf(t.cast(), trainable)
        })
    }
}

pub fn init_model(cfg: &TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    Ok(ModelState::new(
        cfg.model.clone(),
        params,
        cfg.fixed_prototypes,
    ))
}

/// One prompt: an image, the prompted class and that class's mask.
#[derive(Clone, Copy, Debug)]
pub struct TrainPair<'a> {
    pub image: &'a ImageEmbedding,
    pub class: usize,
    pub mask: &'a GroundTruthMask,
}

/// Graph nodes of the batch objective.
pub struct Objective {
    pub total: Var,
    pub dice: Var,
    pub pcl: Option<Var>,
}

/// Mean per-sample dice plus, when enabled, one contrastive term over the
/// batch's present classes (class embeddings averaged across samples).
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelParams<Var>,
    batch: &[TrainPair<'_>],
    temperature: f64,
    use_pcl: bool,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let mut dice_sum: Option<Var> = None;
    let mut per_class: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for pair in batch {
        if pair.mask.foreground() == 0 || pair.mask.class() != pair.class {
            return Err(Error::EmptyMask(pair.class));
        }
        let (_, logits) = forward(g, vars, pair.image, pair.class)?;
        let (uh, uw) = (g.shape(logits)[0], g.shape(logits)[1]);
        let target = g.constant(target_tensor(&pair.mask.at_resolution(uh, uw)))?;
        let d = dice_from_logits(g, logits, target)?;
        dice_sum = Some(match dice_sum {
            Some(acc) => g.add(acc, d)?,
            None => d,
        });
        if use_pcl {
            let v = class_embedding(pair.image, pair.mask)?;
            let slot = per_class
                .entry(pair.class)
                .or_insert_with(|| (vec![0.0; v.vector.len()], 0));
            for (a, &x) in slot.0.iter_mut().zip(&v.vector) {
                *a += x as f64;
            }
            slot.1 += 1;
        }
    }
    let dice_sum = dice_sum.expect("non-empty batch");
    let dice = g.scale(dice_sum, T::one() / T::from_usize(batch.len()))?;
    if !use_pcl {
        return Ok(Objective {
            total: dice,
            dice,
            pcl: None,
        });
    }
    let d = g.shape(vars.prototypes)[1];
    let k = per_class.len();
    let mut rows = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k * d);
    for (&class, (sum, count)) in &per_class {
        rows.push(g.slice_rows(vars.prototypes, class - 1, 1)?);
        means.extend(sum.iter().map(|&s| T::from_f64(s / *count as f64)));
    }
    let bank = g.concat_rows(&rows)?;
    let embeddings = g.constant(Tensor::new(&[k, d], means)?)?;
    let contrast = pcl(g, bank, embeddings, temperature)?;
    let total = g.add(dice, contrast)?;
    Ok(Objective {
        total,
        dice,
        pcl: Some(contrast),
    })
}

/// Forward, backward and one Adam update over `batch`.
pub fn train_step(
    state: &mut ModelState,
    batch: &[TrainPair<'_>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::<f32>::new();
    let vars = state.bind(&mut g)?;
    let obj = objective(&mut g, &vars, batch, cfg.temperature, cfg.pcl)?;
    let value = |v: Var| g.value(v).item().map(|x| x.as_f64());
    let loss = LossBreakdown {
        dice: value(obj.dice)?,
        pcl: obj.pcl.map(value).transpose()?.unwrap_or(0.0),
        total: value(obj.total)?,
        temperature: cfg.temperature,
    };
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!("loss became {}", loss.total)));
    }
    let grads = g.backward(obj.total)?;

    state.step += 1;
    let t = state.step as i32;
    let bc1 = (1.0 - BETA1.powi(t)) as f32;
    let bc2 = (1.0 - BETA2.powi(t)) as f32;
    let (b1, b2, lr, eps) = (BETA1 as f32, BETA2 as f32, cfg.lr as f32, ADAM_EPS as f32);
    let handles: Vec<Var> = vars.entries().iter().map(|e| *e.value).collect();
    for ((param, slot), var) in state
        .params
        .leaves_mut()
        .into_iter()
        .zip(&mut state.slots)
        .zip(handles)
    {
        let Some(mo) = slot else { continue };
        let grad = grads.get(var);
        for (((p, m), v), &gr) in param
            .data_mut()
            .iter_mut()
            .zip(&mut mo.m)
            .zip(&mut mo.v)
            .zip(grad.data())
        {
            *m = b1 * *m + (1.0 - b1) * gr;
            *v = b2 * *v + (1.0 - b2) * gr * gr;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
    Ok(loss)
}

/// `B^(k)` = mean class embedding of class `k` over every training sample containing it.
pub fn compute_fixed_prototypes(dataset: &Dataset, classes: usize) -> Result<PrototypeBank> {
    let d = dataset
        .samples
        .first()
        .map(|s| s.embedding.channels())
        .ok_or(Error::MissingClass(1))?;
    let mut sums = vec![vec![0.0f64; d]; classes];
    let mut counts = vec![0usize; classes];
    for s in &dataset.samples {
        for m in &s.masks {
            crate::prompt::check_class(m.class(), classes)?;
            let v = class_embedding(&s.embedding, m)?;
            for (a, &x) in sums[m.class() - 1].iter_mut().zip(&v.vector) {
                *a += x as f64;
            }
            counts[m.class() - 1] += 1;
        }
    }
    let mut table = Vec::with_capacity(classes * d);
    for (k, (sum, &n)) in sums.iter().zip(&counts).enumerate() {
        if n == 0 {
            return Err(Error::MissingClass(k + 1));
        }
        table.extend(sum.iter().map(|&a| (a / n as f64) as f32));
    }
    PrototypeBank::new(Tensor::new(&[classes, d], table)?)
}

/// Seeded, epoch-wise shuffled stream of (sample, mask) index pairs.
pub struct PairSampler {
    pairs: Vec<(usize, usize)>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(dataset: &Dataset, seed: u64) -> Result<Self> {
        let pairs = dataset.pairs();
        if pairs.is_empty() {
            return Err(Error::Config("training set has no prompt pairs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut s = Self {
            pairs,
            cursor: 0,
            rng,
        };
        s.pairs.shuffle(&mut s.rng);
        Ok(s)
    }

    /// The next `n` pairs; crosses into a freshly shuffled epoch when needed.
    pub fn next_batch(&mut self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.pairs.len() {
                self.pairs.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.pairs[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub fn batch_pairs<'a>(dataset: &'a Dataset, idx: &[(usize, usize)]) -> Vec<TrainPair<'a>> {
    idx.iter()
        .map(|&(i, k)| {
            let s = &dataset.samples[i];
            TrainPair {
                image: &s.embedding,
                class: s.masks[k].class(),
                mask: &s.masks[k],
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub challenge_iou: f64,
    pub mc_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,dice,pcl,total,wall_ms\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.3}",
                r.step, r.loss.dice, r.loss.pcl, r.loss.total, r.wall_ms
            );
        }
        s
    }
}

/// Trains on in-memory data. `on_step` sees every record and any snapshot taken after it.
pub fn fit_dataset(
    cfg: &TrainConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    on_step: &mut dyn FnMut(&StepRecord, Option<&Snapshot>),
) -> Result<(ModelState, TrainHistory)> {
    let mut state = init_model(cfg)?;
    if cfg.fixed_prototypes {
        state.params.prototypes = compute_fixed_prototypes(train, cfg.model.classes)?.into_table();
    }
    let mut sampler = PairSampler::new(train, cfg.seed)?;
    let mut history = TrainHistory::default();
    for _ in 0..cfg.max_steps {
        let started = std::time::Instant::now();
        let idx = sampler.next_batch(cfg.batch_size);
        let loss = train_step(&mut state, &batch_pairs(train, &idx), cfg)?;
        let record = StepRecord {
            step: state.step,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        let snapshot = match eval {
            Some(ds) if cfg.eval_every > 0 && state.step % cfg.eval_every as u64 == 0 => {
                let r = evaluate(&state.params, ds, cfg.threshold)?;
                Some(Snapshot {
                    step: state.step,
                    challenge_iou: r.challenge_iou,
                    mc_iou: r.mc_iou,
                })
            }
            _ => None,
        };
        on_step(&record, snapshot.as_ref());
        history.steps.push(record);
        history.snapshots.extend(snapshot);
    }
    Ok((state, history))
}

/// Loads the manifests named in `cfg` and trains.
pub fn fit(cfg: &TrainConfig) -> Result<(ModelState, TrainHistory)> {
    let train = load_dataset(&cfg.train_manifest)?;
    let eval = cfg.eval_manifest.as_ref().map(load_dataset).transpose()?;
    fit_dataset(cfg, &train, eval.as_ref(), &mut |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};

    fn small() -> (TrainConfig, Dataset) {
        let set = synthesize(&SynthConfig {
            classes: 2,
            height: 4,
            width: 4,
            channels: 8,
            samples: 6,
            eval_samples: 0,
            shapes_min: 1,
            shapes_max: 2,
            mask_scale: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            model: ModelConfig {
                classes: 2,
                channels: 8,
                dense_hidden: 8,
                sparse_hidden: 8,
                decoder_layers: 1,
                upscale: 2,
                ..ModelConfig::default()
            },
            batch_size: 4,
            max_steps: 5,
            ..TrainConfig::default()
        };
        (cfg, set.train)
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (cfg, ds) = small();
        let cfg = TrainConfig { lr: 0.0, ..cfg };
        let mut state = ModelState::new(
            cfg.model.clone(),
            ModelParams::init(&cfg.model, 1).unwrap(),
            false,
        );
        let before = state.params.clone();
        let pairs = batch_pairs(&ds, &ds.pairs()[..3]);
        let loss = train_step(&mut state, &pairs, &cfg).unwrap();
        assert!(loss.total.is_finite());
        assert_eq!(state.params, before);
    }

    #[test]
    fn polarity_and_fixed_bank_never_move() {
        let (cfg, ds) = small();
        let cfg = TrainConfig {
            fixed_prototypes: true,
            pcl: false,
            ..cfg
        };
        let init = init_model(&cfg).unwrap();
        let fixed = compute_fixed_prototypes(&ds, 2).unwrap();
        let (state, history) = fit_dataset(&cfg, &ds, None, &mut |_, _| {}).unwrap();
        assert_eq!(history.steps.len(), 5);
        assert_eq!(state.params.polarity, init.params.polarity);
        assert_eq!(&state.params.prototypes, fixed.table());
        assert_ne!(state.params.output_tokens, init.params.output_tokens);
    }

    #[test]
    fn sampler_covers_each_pair_once_per_epoch() {
        let (_, ds) = small();
        let n = ds.pairs().len();
        let mut s = PairSampler::new(&ds, 3).unwrap();
        let mut epoch = s.next_batch(n);
        epoch.sort();
        assert_eq!(epoch, ds.pairs());
    }

    #[test]
    fn fixed_prototypes_of_single_samples() {
        let (_, ds) = small();
        let bank = compute_fixed_prototypes(&ds, 2).unwrap();
        assert_eq!(bank.classes(), 2);
        assert_eq!(
            compute_fixed_prototypes(&ds, 3).unwrap_err().kind(),
            "missing-class-error"
        );
    }

    #[test]
    fn invalid_train_config() {
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                temperature: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert_eq!(init_model(&cfg).unwrap_err().kind(), "config-error");
        }
    }
}
