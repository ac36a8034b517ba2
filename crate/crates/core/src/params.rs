//! Parameter containers shared by the prompt encoder and the decoder.
//!
//! Every container is generic over its leaf type: `Tensor<f32>` when stored
//! in a model, [`Var`] once bound onto a graph.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Prototypes,
    DenseMlp,
    SparseMlp,
    Decoder,
    OutputTokens,
    Polarity,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Prototypes,
        ParamGroup::DenseMlp,
        ParamGroup::SparseMlp,
        ParamGroup::Decoder,
        ParamGroup::OutputTokens,
        ParamGroup::Polarity,
    ];

    /// The positive/negative embeddings are the only frozen group.
    pub fn is_frozen(self) -> bool {
        matches!(self, ParamGroup::Polarity)
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Prototypes => "prototypes",
            ParamGroup::DenseMlp => "dense_mlp",
            ParamGroup::SparseMlp => "sparse_mlp",
            ParamGroup::Decoder => "decoder",
            ParamGroup::OutputTokens => "output_tokens",
            ParamGroup::Polarity => "polarity",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.label() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A named leaf reference handed out by [`ParamTree::visit`].
pub struct Entry<'a, P> {
    pub name: String,
    pub group: ParamGroup,
    pub value: &'a P,
}

/// Uniform traversal over nested parameter structs. Traversal order is fixed
/// and identical across `visit`, `visit_mut` and `try_map`.
pub trait ParamTree<P> {
    type Mapped<Q>;

    fn visit<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<Entry<'a, P>>);

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>);

    fn try_map<Q>(
        &self,
        group: ParamGroup,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<Self::Mapped<Q>>;
}

/// `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<P> {
    pub weight: P,
    pub bias: P,
}

impl Affine<Tensor<f32>> {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Self {
            weight: Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(rng)),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Affine<Var> {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        g.add_row(xw, self.bias)
    }
}

impl<P> ParamTree<P> for Affine<P> {
    type Mapped<Q> = Affine<Q>;

    fn visit<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<Entry<'a, P>>) {
        out.push(Entry {
            name: format!("{prefix}.weight"),
            group,
            value: &self.weight,
        });
        out.push(Entry {
            name: format!("{prefix}.bias"),
            group,
            value: &self.bias,
        });
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    fn try_map<Q>(
        &self,
        group: ParamGroup,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<Affine<Q>> {
        Ok(Affine {
            weight: f(group, &self.weight)?,
            bias: f(group, &self.bias)?,
        })
    }
}

/// Row-wise layer normalisation with a learned gain and bias over `d` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<P> {
    pub gain: P,
    pub bias: P,
}

/// Variance floor inside the normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm<Tensor<f32>> {
    /// Unit gain, zero bias.
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl LayerNorm<Var> {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.normalize_rows(x, LAYER_NORM_EPS)?;
        let y = g.mul_row(y, self.gain)?;
        g.add_row(y, self.bias)
    }
}

impl<P> ParamTree<P> for LayerNorm<P> {
    type Mapped<Q> = LayerNorm<Q>;

    fn visit<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<Entry<'a, P>>) {
        out.push(Entry {
            name: format!("{prefix}.gain"),
            group,
            value: &self.gain,
        });
        out.push(Entry {
            name: format!("{prefix}.bias"),
            group,
            value: &self.bias,
        });
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }

    fn try_map<Q>(
        &self,
        group: ParamGroup,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<LayerNorm<Q>> {
        Ok(LayerNorm {
            gain: f(group, &self.gain)?,
            bias: f(group, &self.bias)?,
        })
    }
}

/// Table of standard-normal draws.
pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}
