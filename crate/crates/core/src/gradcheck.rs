//! Finite-difference check of the whole training objective at toy scale.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::data::{synthesize, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamGroup;
use crate::tensor::{grad_check, Graph, Tensor};
use crate::trainer::{batch_pairs, objective, ModelState};

/// Toy problem dimensions, written `h,w,d,C,n,rD,rS,L` on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradScale {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub tokens: usize,
    pub dense_hidden: usize,
    pub sparse_hidden: usize,
    pub layers: usize,
}

impl Default for GradScale {
    fn default() -> Self {
        Self {
            height: 4,
            width: 4,
            channels: 8,
            classes: 2,
            tokens: 2,
            dense_hidden: 8,
            sparse_hidden: 8,
            layers: 1,
        }
    }
}

impl FromStr for GradScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad scale {s:?}")))?;
        let [height, width, channels, classes, tokens, dense_hidden, sparse_hidden, layers] = v[..]
        else {
            return Err(Error::Config(format!(
                "scale needs 8 values h,w,d,C,n,rD,rS,L, got {s:?}"
            )));
        };
        Ok(Self {
            height,
            width,
            channels,
            classes,
            tokens,
            dense_hidden,
            sparse_hidden,
            layers,
        })
    }
}

/// Worst relative error per trainable group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: ParamGroup,
    pub max_rel_err: f64,
    pub checked: usize,
    pub refined: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradReport {
    pub groups: Vec<GroupError>,
    /// The frozen polarity pair received an all-zero gradient.
    pub polarity_zero: bool,
    pub tolerance: f64,
}

impl ModelGradReport {
    pub fn failing(&self) -> Vec<ParamGroup> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_err < self.tolerance))
            .map(|g| g.group)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.polarity_zero && self.failing().is_empty()
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-3;
const TEMPERATURE: f64 = 0.07;

/// Model config, data and one `(sample, mask)` index per class.
type ToyProblem = (ModelConfig, Dataset, Vec<(usize, usize)>);

/// Toy model plus a batch holding one prompt for every class.
fn toy_problem(scale: &GradScale, seed: u64) -> Result<ToyProblem> {
    let synth = SynthConfig {
        classes: scale.classes,
        height: scale.height,
        width: scale.width,
        channels: scale.channels,
        samples: 4 * scale.classes,
        eval_samples: 0,
        shapes_min: 1,
        shapes_max: scale.classes.min(3),
        mask_scale: 1,
        seed,
        ..SynthConfig::default()
    };
    let data = synthesize(&synth)?.train;
    let mut first = BTreeMap::new();
    for (i, k) in data.pairs() {
        first
            .entry(data.samples[i].masks[k].class())
            .or_insert((i, k));
    }
    if first.len() != scale.classes {
        return Err(Error::Config(format!(
            "toy data covers {} of {} classes",
            first.len(),
            scale.classes
        )));
    }
    let model = ModelConfig {
        classes: scale.classes,
        channels: scale.channels,
        tokens: scale.tokens,
        dense_hidden: scale.dense_hidden,
        sparse_hidden: scale.sparse_hidden,
        decoder_layers: scale.layers,
        heads: 1,
        upscale: 2,
        pixel_dim: 0,
        output_tokens: 1,
    };
    Ok((model, data, first.into_values().collect()))
}

/// Compares analytic gradients of dice + contrastive loss against central
/// differences for every trainable tensor, and confirms the frozen pair gets
/// no gradient. `faulty` corrupts one backward rule, for negative tests.
pub fn check_model(scale: &GradScale, seed: u64, faulty: bool) -> Result<ModelGradReport> {
    let (cfg, data, picks) = toy_problem(scale, seed)?;
    let params = ModelParams::init(&cfg, seed)?;
    let batch = batch_pairs(&data, &picks);

    let trainable: Vec<(String, Tensor<f64>)> = params
        .entries()
        .into_iter()
        .filter(|e| !e.group.is_frozen())
        .map(|e| (e.name.clone(), e.value.cast()))
        .collect();
    let report = grad_check(
        |g, vars| {
            g.set_faulty_backward(faulty);
            let mut next = vars.iter();
            let bound = params.try_map(&mut |group, t| {
                if group.is_frozen() {
                    g.constant(t.cast())
                } else {
                    Ok(*next.next().expect("one var per trainable tensor"))
                }
            })?;
            Ok(objective(g, &bound, &batch, TEMPERATURE, true)?.total)
        },
        &trainable,
        GRAD_EPS,
        GRAD_TOLERANCE,
        usize::MAX,
        seed,
    )?;

    let entries = params.entries();
    let group_of: BTreeMap<&str, ParamGroup> =
        entries.iter().map(|e| (e.name.as_str(), e.group)).collect();
    let mut groups: BTreeMap<ParamGroup, GroupError> = BTreeMap::new();
    for r in &report.groups {
        let group = group_of[r.name.as_str()];
        let e = groups.entry(group).or_insert(GroupError {
            group,
            max_rel_err: 0.0,
            checked: 0,
            refined: 0,
            skipped: 0,
        });
        e.max_rel_err = e.max_rel_err.max(r.max_rel_err);
        e.checked += r.checked;
        e.refined += r.refined;
        e.skipped += r.skipped;
    }

    let state = ModelState::new(cfg, params.clone(), false);
    let mut g = Graph::<f64>::new();
    let vars = state.bind(&mut g)?;
    let loss = objective(&mut g, &vars, &batch, TEMPERATURE, true)?.total;
    let grads = g.backward(loss)?;
    let polarity_zero = [vars.polarity.positive, vars.polarity.negative]
        .iter()
        .all(|&v| !g.requires_grad(v) && grads.get(v).data().iter().all(|&x| x == 0.0));

    Ok(ModelGradReport {
        groups: groups.into_values().collect(),
        polarity_zero,
        tolerance: GRAD_TOLERANCE,
    })
}
