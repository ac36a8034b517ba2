use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Per-parameter summary of an analytic-vs-numeric gradient comparison.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements whose default step crossed a ReLU kink and were re-measured
    /// with a smaller step.
    pub refined: usize,
    /// Elements sitting on a kink at every step tried; not compared.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err >= self.tolerance)
            .map(|g| g.name.as_str())
            .collect()
    }
}

/// Step-size ladder used when a perturbation changes the ReLU activation pattern.
const REFINE_FACTORS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Relative error as `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` with fourth-order central
/// differences (taps at ±eps and ±2·eps).
///
/// `f` builds a scalar on the graph it is given from the leaves in `vars`
/// (one per entry of `params`, in order). All arithmetic is `f64`. When more
/// than `max_elements` parameter elements exist, a seeded subsample is checked.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    tolerance: f64,
    max_elements: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {eps}"
        )));
    }
    let evaluate = |values: &[&Tensor<f64>], want_grads: bool| -> Result<Evaluation> {
        let mut g = Graph::<f64>::new();
        let vars = values
            .iter()
            .map(|v| g.leaf((*v).clone(), want_grads))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item()?;
        let grads = if want_grads {
            let gr = g.backward(loss)?;
            Some(vars.iter().map(|&v| gr.get(v)).collect())
        } else {
            None
        };
        Ok(Evaluation {
            value,
            signature: g.relu_signature(),
            grads,
        })
    };

    let base: Vec<&Tensor<f64>> = params.iter().map(|(_, t)| t).collect();
    let first = evaluate(&base, true)?;
    let second = evaluate(&base, false)?;
    if first.value.to_bits() != second.value.to_bits() {
        return Err(Error::Nondeterminism {
            first: first.value,
            second: second.value,
        });
    }
    let analytic = first.grads.expect("requested gradients");

    let total: usize = params.iter().map(|(_, t)| t.len()).sum();
    let selected: Vec<usize> = if total > max_elements {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, total, max_elements).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..total).collect()
    };

    let mut groups: Vec<GroupReport> = params
        .iter()
        .map(|(name, _)| GroupReport {
            name: name.clone(),
            max_rel_err: 0.0,
            checked: 0,
            refined: 0,
            skipped: 0,
        })
        .collect();

    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for (_, t) in params {
        offsets.push(acc);
        acc += t.len();
    }

    for flat in selected {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[p];
        let x0 = params[p].1.data()[i];

        let mut perturbed = params[p].1.clone();
        let mut at = |delta: f64| -> Result<(f64, u64)> {
            perturbed.data_mut()[i] = x0 + delta;
            let mut values = base.clone();
            values[p] = &perturbed;
            let e = evaluate(&values, false)?;
            Ok((e.value, e.signature))
        };

        let mut numeric = None;
        let mut step = eps;
        for attempt in 0..=REFINE_FACTORS.len() {
            let (fp, sp) = at(step)?;
            let (fm, sm) = at(-step)?;
            let (fp2, sp2) = at(2.0 * step)?;
            let (fm2, sm2) = at(-2.0 * step)?;
            if [sp, sm, sp2, sm2].iter().all(|&s| s == first.signature) {
                numeric = Some((8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * step));
                if attempt > 0 {
                    groups[p].refined += 1;
                }
                break;
            }
            if let Some(&factor) = REFINE_FACTORS.get(attempt) {
                step = eps * factor;
            }
        }
        let group = &mut groups[p];
        match numeric {
            Some(n) => {
                let err = relative_error(analytic[p].data()[i], n);
                group.max_rel_err = group.max_rel_err.max(err);
                group.checked += 1;
            }
            None => group.skipped += 1,
        }
    }

    let passed = groups.iter().all(|g| g.max_rel_err < tolerance);
    Ok(GradReport {
        groups,
        tolerance,
        passed,
    })
}

struct Evaluation {
    value: f64,
    signature: u64,
    grads: Option<Vec<Tensor<f64>>>,
}
