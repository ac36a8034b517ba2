use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::grid::{encode_grid, encode_mask, MaskFile};
use super::manifest::{Dataset, Sample};
use super::write_bytes;
use crate::error::{Error, Result};
use crate::prompt::ImageEmbedding;
use crate::tensor::Tensor;

/// Attempts per rectangle before giving up on a non-overlapping placement.
const PLACEMENT_RETRIES: usize = 100;

/// Parameters of the synthetic segmentation task.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: usize,
    pub eval_samples: usize,
    /// Inclusive range of rectangles per image.
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Signal-to-noise ratio; noise is `N(0, 1) / snr` per channel.
    pub snr: f64,
    pub seed: u64,
    /// Masks are stored at `mask_scale` times the embedding resolution.
    pub mask_scale: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            height: 8,
            width: 8,
            channels: 16,
            samples: 64,
            eval_samples: 16,
            shapes_min: 1,
            shapes_max: 3,
            snr: 4.0,
            seed: 7,
            mask_scale: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > 255 {
            return fail(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if self.height < 4 || self.width < 4 {
            return fail(format!(
                "grid must be at least 4x4, got {}x{}",
                self.height, self.width
            ));
        }
        if self.channels == 0 || self.mask_scale == 0 {
            return fail("channels and mask_scale must be >= 1".into());
        }
        if !(self.snr > 0.0) {
            return fail(format!("snr must be > 0, got {}", self.snr));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return fail(format!(
                "bad shapes range {}..={}",
                self.shapes_min, self.shapes_max
            ));
        }
        Ok(())
    }
}

/// Class signatures `mu_0..mu_C` as a `[C+1, d]` table, row 0 for
/// background. Rows are orthogonalised when `C+1 <= d` and scaled to norm
/// `sqrt(d)`.
pub fn signatures(classes: usize, channels: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let d = channels;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(classes + 1);
    for _ in 0..=classes {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if classes < d {
            for u in &rows {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                let uu: f64 = u.iter().map(|a| a * a).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot / uu * b;
                }
            }
        }
        rows.push(v);
    }
    let scale = (d as f64).sqrt();
    let data = rows
        .iter()
        .flat_map(|v| {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter()
                .map(move |a| (a / norm * scale) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(&[classes + 1, d], data).expect("signature table shape")
}

/// Generated task held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub signatures: Tensor<f32>,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Builds the whole task in memory; byte-identical for a fixed config.
pub fn synthesize(cfg: &SynthConfig) -> Result<SyntheticSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sig = signatures(cfg.classes, cfg.channels, &mut rng);
    let mut make = |prefix: &str, count: usize| -> Result<Dataset> {
        let samples = (0..count)
            .map(|i| sample(cfg, &sig, &mut rng, format!("{prefix}_{i:04}")))
            .collect::<Result<_>>()?;
        Ok(Dataset::new(samples))
    };
    let train = make("train", cfg.samples)?;
    let eval = make("eval", cfg.eval_samples)?;
    Ok(SyntheticSet {
        signatures: sig,
        train,
        eval,
    })
}

fn sample(cfg: &SynthConfig, sig: &Tensor<f32>, rng: &mut impl Rng, id: String) -> Result<Sample> {
    let (h, w, d) = (cfg.height, cfg.width, cfg.channels);
    let mut labels = vec![0u8; h * w];
    let shapes = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    for _ in 0..shapes {
        let class = rng.random_range(1..=cfg.classes) as u8;
        place(&mut labels, h, w, class, rng).ok_or_else(|| {
            Error::Placement(format!(
                "{id}: no free {h}x{w} area for another rectangle after {PLACEMENT_RETRIES} tries"
            ))
        })?;
    }
    let noise_scale = 1.0 / cfg.snr;
    let mut data = Vec::with_capacity(h * w * d);
    for &k in &labels {
        for &mu in sig.row(k as usize) {
            let e: f64 = StandardNormal.sample(rng);
            data.push((mu as f64 + e * noise_scale) as f32);
        }
    }
    let embedding = ImageEmbedding::new(Tensor::new(&[h, w, d], data)?)?;
    let s = cfg.mask_scale;
    let (mh, mw) = (h * s, w * s);
    let ids = (0..mh * mw)
        .map(|p| labels[(p / mw / s) * w + (p % mw) / s])
        .collect();
    Sample::new(id, embedding, MaskFile::new(mh, mw, ids)?)
}

fn place(labels: &mut [u8], h: usize, w: usize, class: u8, rng: &mut impl Rng) -> Option<()> {
    let side = |n: usize| ((n / 4).max(1), (n / 2).max(1));
    let (hmin, hmax) = side(h);
    let (wmin, wmax) = side(w);
    for _ in 0..PLACEMENT_RETRIES {
        let rh = rng.random_range(hmin..=hmax);
        let rw = rng.random_range(wmin..=wmax);
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        let cells = || (top..top + rh).flat_map(move |i| (left..left + rw).map(move |j| i * w + j));
        if cells().all(|p| labels[p] == 0) {
            cells().for_each(|p| labels[p] = class);
            return Some(());
        }
    }
    None
}

/// What [`gen_synthetic`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub samples: usize,
    pub classes: usize,
    pub bytes: u64,
}

/// Writes embeddings, masks, `train.tsv` and `eval.tsv` under `out`.
pub fn gen_synthetic(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<SynthSummary> {
    let out = out.as_ref();
    let set = synthesize(cfg)?;
    let mut bytes = 0u64;
    let mut write = |path: &Path, data: &[u8]| -> Result<()> {
        bytes += data.len() as u64;
        write_bytes(path, data)
    };
    let mut manifests = Vec::new();
    for (name, ds) in [("train.tsv", &set.train), ("eval.tsv", &set.eval)] {
        let mut text = String::from("# id\tembedding\tmask\n");
        for s in &ds.samples {
            let emb = format!("samples/{}.grid", s.id);
            let mask = format!("samples/{}.mask", s.id);
            write(&out.join(&emb), &encode_grid(s.embedding.tensor()))?;
            write(&out.join(&mask), &encode_mask(&s.labels))?;
            text.push_str(&format!("{}\t{emb}\t{mask}\n", s.id));
        }
        let path = out.join(name);
        write(&path, text.as_bytes())?;
        manifests.push(path);
    }
    let eval_manifest = manifests.pop().expect("two manifests");
    let train_manifest = manifests.pop().expect("two manifests");
    Ok(SynthSummary {
        train_manifest,
        eval_manifest,
        samples: set.train.len() + set.eval.len(),
        classes: cfg.classes,
        bytes,
    })
}
