//! Prototype-based class prompt encoder.
//!
//! A prototype bank `B: [C, d]` is matched against every location of the
//! image embedding to produce per-class similarity maps. Those maps gate the
//! embedding (with a residual) into class-activated features, from which a
//! dense prompt (prompted class only) and polarity-tagged sparse tokens (all
//! classes) are derived.

use crate::error::{shape_err, Error, Result};
use crate::params::{Affine, Entry, ParamGroup, ParamTree};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Frozen-encoder output, `[h, w, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    tensor: Tensor<f32>,
}

impl ImageEmbedding {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.rank() != 3 || tensor.shape().contains(&0) {
            return shape_err(format!(
                "image embedding must be a non-empty [h, w, d] grid, got {:?}",
                tensor.shape()
            ));
        }
        if !tensor.is_finite() {
            return Err(Error::Numeric(
                "image embedding has non-finite values".into(),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    /// Feature vector at one location.
    pub fn at(&self, i: usize, j: usize) -> &[f32] {
        self.tensor.row(i * self.width() + j)
    }

    /// `[h*w, d]` leaf on `g`; never differentiated.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.constant(
            self.tensor
                .cast::<T>()
                .reshape(&[self.cells(), self.channels()])?,
        )
    }
}

/// One prototype per class, `[C, d]`. Row `k - 1` belongs to class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    table: Tensor<f32>,
}

impl PrototypeBank {
    pub fn new(table: Tensor<f32>) -> Result<Self> {
        if table.rank() != 2 || table.shape()[0] == 0 || table.shape()[1] == 0 {
            return shape_err(format!(
                "prototype bank must be [C, d], got {:?}",
                table.shape()
            ));
        }
        if !table.is_finite() {
            return Err(Error::Numeric("prototype bank has non-finite rows".into()));
        }
        Ok(Self { table })
    }

    pub fn classes(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn prototype(&self, class: usize) -> &[f32] {
        self.table.row(class - 1)
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    pub fn into_table(self) -> Tensor<f32> {
        self.table
    }
}

/// `S: [C, h, w]`, the raw dot product of every location with every prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMaps {
    tensor: Tensor<f32>,
}

impl SimilarityMaps {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn classes(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Row-major `h*w` map for class `class` (1-based).
    pub fn map(&self, class: usize) -> Result<&[f32]> {
        check_class(class, self.classes())?;
        let hw = self.height() * self.width();
        Ok(&self.tensor.data()[(class - 1) * hw..class * hw])
    }
}

/// `F_I^C: [C, h, w, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivatedFeatures {
    tensor: Tensor<f32>,
}

impl ClassActivatedFeatures {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    /// The `[h, w, d]` slice activated by class `class` (1-based).
    pub fn class(&self, class: usize) -> Result<Tensor<f32>> {
        let s = self.tensor.shape();
        check_class(class, s[0])?;
        let len = s[1] * s[2] * s[3];
        Tensor::new(
            &s[1..],
            self.tensor.data()[(class - 1) * len..class * len].to_vec(),
        )
    }
}

/// `T_D: [h, w, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePromptEmbedding {
    pub tensor: Tensor<f32>,
}

/// `T_S: [C, n, d]` for prompted class `class`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePromptEmbedding {
    pub tokens: Tensor<f32>,
    pub class: usize,
}

impl SparsePromptEmbedding {
    /// `[C*n, d]`, class-major then token.
    pub fn flattened(&self) -> Tensor<f32> {
        let s = self.tokens.shape();
        self.tokens
            .clone()
            .reshape(&[s[0] * s[1], s[2]])
            .expect("same element count")
    }
}

/// Positive and negative embeddings, `[d]` each. Frozen during training.
#[derive(Clone, Debug, PartialEq)]
pub struct Polarity<P> {
    pub positive: P,
    pub negative: P,
}

pub type PolarityEmbeddings = Polarity<Tensor<f32>>;

impl<P> ParamTree<P> for Polarity<P> {
    type Mapped<Q> = Polarity<Q>;

    fn visit<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<Entry<'a, P>>) {
        out.push(Entry {
            name: format!("{prefix}.positive"),
            group,
            value: &self.positive,
        });
        out.push(Entry {
            name: format!("{prefix}.negative"),
            group,
            value: &self.negative,
        });
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.positive);
        out.push(&mut self.negative);
    }

    fn try_map<Q>(
        &self,
        group: ParamGroup,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<Polarity<Q>> {
        Ok(Polarity {
            positive: f(group, &self.positive)?,
            negative: f(group, &self.negative)?,
        })
    }
}

/// The two two-layer MLPs of the encoder.
///
/// Dense: `d -> r_D -> d` per location. Sparse: `d -> r_S` per location,
/// ReLU, spatial mean, then `r_S -> n*d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMlp<P> {
    pub dense_in: Affine<P>,
    pub dense_out: Affine<P>,
    pub sparse_in: Affine<P>,
    pub sparse_out: Affine<P>,
    pub tokens: usize,
}

pub type PromptMlpParams = PromptMlp<Tensor<f32>>;

impl PromptMlpParams {
    pub fn channels(&self) -> usize {
        self.dense_in.fan_in()
    }

    pub fn dense_hidden(&self) -> usize {
        self.dense_in.fan_out()
    }

    pub fn sparse_hidden(&self) -> usize {
        self.sparse_in.fan_out()
    }
}

impl<P> PromptMlp<P> {
    /// Only the dense or only the sparse half, for grouping.
    pub(crate) fn visit_part<'a>(
        &'a self,
        prefix: &str,
        dense: bool,
        group: ParamGroup,
        out: &mut Vec<Entry<'a, P>>,
    ) {
        if dense {
            self.dense_in
                .visit(&format!("{prefix}.dense_in"), group, out);
            self.dense_out
                .visit(&format!("{prefix}.dense_out"), group, out);
        } else {
            self.sparse_in
                .visit(&format!("{prefix}.sparse_in"), group, out);
            self.sparse_out
                .visit(&format!("{prefix}.sparse_out"), group, out);
        }
    }

    /// Dense leaves first, then sparse, matching two `visit_part` calls.
    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.dense_in.visit_mut(out);
        self.dense_out.visit_mut(out);
        self.sparse_in.visit_mut(out);
        self.sparse_out.visit_mut(out);
    }

    pub(crate) fn try_map_groups<Q>(
        &self,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<PromptMlp<Q>> {
        Ok(PromptMlp {
            dense_in: self.dense_in.try_map(ParamGroup::DenseMlp, f)?,
            dense_out: self.dense_out.try_map(ParamGroup::DenseMlp, f)?,
            sparse_in: self.sparse_in.try_map(ParamGroup::SparseMlp, f)?,
            sparse_out: self.sparse_out.try_map(ParamGroup::SparseMlp, f)?,
            tokens: self.tokens,
        })
    }
}

pub(crate) fn check_class(class: usize, classes: usize) -> Result<()> {
    if class == 0 || class > classes {
        return Err(Error::Class { class, classes });
    }
    Ok(())
}

/// Graph-level encoder output for one prompted class.
pub struct Encoded {
    /// `[C, h*w]`
    pub similarity: Var,
    /// `[C*h*w, d]`
    pub activated: Var,
    /// `[h*w, d]`
    pub dense: Var,
    /// `[C*n, d]`
    pub sparse: Var,
}

/// `S = B F^T`: `[C, d] x [h*w, d]^T -> [C, h*w]`.
pub fn similarity<T: Scalar>(g: &mut Graph<T>, image: Var, bank: Var) -> Result<Var> {
    let (img_d, bank_d) = (g.shape(image)[1], g.shape(bank)[1]);
    if img_d != bank_d {
        return shape_err(format!(
            "prototype width {bank_d} does not match embedding channels {img_d}"
        ));
    }
    g.matmul_bt(bank, image)
}

/// `F^(k) = F * S^(k) + F` for every class, stacked to `[C*h*w, d]`.
pub fn activate<T: Scalar>(g: &mut Graph<T>, image: Var, sim: Var) -> Result<Var> {
    let (classes, hw) = (g.shape(sim)[0], g.shape(sim)[1]);
    if g.shape(image)[0] != hw {
        return shape_err(format!(
            "similarity covers {hw} cells, embedding has {}",
            g.shape(image)[0]
        ));
    }
    let repeated = g.concat_rows(&vec![image; classes])?;
    let gate = g.reshape(sim, &[classes * hw])?;
    let gated = g.mul_col(repeated, gate)?;
    g.add(gated, repeated)
}

/// Per-location `g_D(ReLU(f_D(x)))` on `[h*w, d]` features.
pub fn dense_prompt<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    mlp: &PromptMlp<Var>,
) -> Result<Var> {
    let hidden = mlp.dense_in.apply(g, features)?;
    let hidden = g.relu(hidden)?;
    mlp.dense_out.apply(g, hidden)
}

/// Polarity-aware sparse tokens `[C*n, d]` for prompted class `class` (1-based).
pub fn sparse_prompt<T: Scalar>(
    g: &mut Graph<T>,
    activated: Var,
    classes: usize,
    class: usize,
    mlp: &PromptMlp<Var>,
    polarity: &Polarity<Var>,
) -> Result<Var> {
    check_class(class, classes)?;
    let d = g.shape(activated)[1];
    let n = mlp.tokens;
    let hidden = mlp.sparse_in.apply(g, activated)?;
    let hidden = g.relu(hidden)?;
    let pooled = g.mean_groups(hidden, classes)?;
    let agnostic = mlp.sparse_out.apply(g, pooled)?;
    let agnostic = g.reshape(agnostic, &[classes * n, d])?;

    // Row indicator of the prompted class, expanded into the two offsets.
    let is_pos: Vec<T> = (0..classes * n)
        .map(|r| {
            if r / n == class - 1 {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let is_neg: Vec<T> = is_pos.iter().map(|&p| T::one() - p).collect();
    let is_pos = g.constant(Tensor::new(&[classes * n, 1], is_pos)?)?;
    let is_neg = g.constant(Tensor::new(&[classes * n, 1], is_neg)?)?;
    let pos = g.reshape(polarity.positive, &[1, d])?;
    let neg = g.reshape(polarity.negative, &[1, d])?;
    let pos = g.matmul(is_pos, pos)?;
    let neg = g.matmul(is_neg, neg)?;
    let offsets = g.add(pos, neg)?;
    g.add(agnostic, offsets)
}

/// Runs the whole encoder for prompted class `class` (1-based).
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    bank: Var,
    class: usize,
    mlp: &PromptMlp<Var>,
    polarity: &Polarity<Var>,
) -> Result<Encoded> {
    let classes = g.shape(bank)[0];
    check_class(class, classes)?;
    let hw = g.shape(image)[0];
    let similarity = similarity(g, image, bank)?;
    let activated = activate(g, image, similarity)?;
    let positive = g.slice_rows(activated, (class - 1) * hw, hw)?;
    let dense = dense_prompt(g, positive, mlp)?;
    let sparse = sparse_prompt(g, activated, classes, class, mlp, polarity)?;
    Ok(Encoded {
        similarity,
        activated,
        dense,
        sparse,
    })
}

fn constant_mlp<T: Scalar>(g: &mut Graph<T>, mlp: &PromptMlpParams) -> Result<PromptMlp<Var>> {
    mlp.try_map_groups(&mut |_, t| g.constant(t.cast()))
}

fn check_mlp(mlp: &PromptMlpParams, d: usize) -> Result<()> {
    if mlp.channels() != d || mlp.dense_out.fan_out() != d || mlp.sparse_in.fan_in() != d {
        return shape_err(format!("prompt MLP width does not match {d} channels"));
    }
    if mlp.sparse_out.fan_out() != mlp.tokens * d {
        return shape_err(format!(
            "sparse MLP emits {} values, expected {} tokens x {d}",
            mlp.sparse_out.fan_out(),
            mlp.tokens
        ));
    }
    Ok(())
}

pub fn compute_similarity(image: &ImageEmbedding, bank: &PrototypeBank) -> Result<SimilarityMaps> {
    let mut g = Graph::<f32>::new();
    let img = image.bind(&mut g)?;
    let b = g.constant(bank.table().clone())?;
    let s = similarity(&mut g, img, b)?;
    let tensor = g
        .value(s)
        .clone()
        .reshape(&[bank.classes(), image.height(), image.width()])?;
    Ok(SimilarityMaps { tensor })
}

pub fn activate_features(
    image: &ImageEmbedding,
    sim: &SimilarityMaps,
) -> Result<ClassActivatedFeatures> {
    if sim.height() != image.height() || sim.width() != image.width() {
        return shape_err(format!(
            "similarity maps are {}x{}, embedding is {}x{}",
            sim.height(),
            sim.width(),
            image.height(),
            image.width()
        ));
    }
    let mut g = Graph::<f32>::new();
    let img = image.bind(&mut g)?;
    let s = g.constant(
        sim.tensor()
            .clone()
            .reshape(&[sim.classes(), image.cells()])?,
    )?;
    let act = activate(&mut g, img, s)?;
    let tensor = g.value(act).clone().reshape(&[
        sim.classes(),
        image.height(),
        image.width(),
        image.channels(),
    ])?;
    Ok(ClassActivatedFeatures { tensor })
}

/// Dense prompt from the `[h, w, d]` features activated by the prompted class.
pub fn encode_dense(features: &Tensor<f32>, mlp: &PromptMlpParams) -> Result<DensePromptEmbedding> {
    if features.rank() != 3 {
        return shape_err(format!(
            "expected [h, w, d] features, got {:?}",
            features.shape()
        ));
    }
    let s = features.shape().to_vec();
    check_mlp(mlp, s[2])?;
    let mut g = Graph::<f32>::new();
    let x = g.constant(features.clone().reshape(&[s[0] * s[1], s[2]])?)?;
    let p = constant_mlp(&mut g, mlp)?;
    let y = dense_prompt(&mut g, x, &p)?;
    Ok(DensePromptEmbedding {
        tensor: g.value(y).clone().reshape(&s)?,
    })
}

pub fn encode_sparse(
    features: &ClassActivatedFeatures,
    class: usize,
    mlp: &PromptMlpParams,
    polarity: &PolarityEmbeddings,
) -> Result<SparsePromptEmbedding> {
    let s = features.tensor().shape().to_vec();
    check_class(class, s[0])?;
    check_mlp(mlp, s[3])?;
    if polarity.positive.len() != s[3] || polarity.negative.len() != s[3] {
        return shape_err("polarity embeddings must have d entries");
    }
    let mut g = Graph::<f32>::new();
    let act = g.constant(
        features
            .tensor()
            .clone()
            .reshape(&[s[0] * s[1] * s[2], s[3]])?,
    )?;
    let p = constant_mlp(&mut g, mlp)?;
    let pol = Polarity {
        positive: g.constant(polarity.positive.clone())?,
        negative: g.constant(polarity.negative.clone())?,
    };
    let y = sparse_prompt(&mut g, act, s[0], class, &p, &pol)?;
    Ok(SparsePromptEmbedding {
        tokens: g.value(y).clone().reshape(&[s[0], mlp.tokens, s[3]])?,
        class,
    })
}

/// Min-max normalised `[h, w]` map of class `class`; a constant map becomes all zeros.
pub fn export_similarity_map(sim: &SimilarityMaps, class: usize) -> Result<Tensor<f32>> {
    let map = sim.map(class)?;
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi as f64 - lo as f64;
    let data = map
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v as f64 - lo as f64) / range) as f32
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[sim.height(), sim.width()], data)
}
