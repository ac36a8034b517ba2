//! Training objective: soft dice on the decoded mask plus an infoNCE-style
//! contrastive term that pulls each prototype toward the masked-average
//! embedding of its own class and away from the others.

use crate::decoder::MaskLogits;
use crate::error::{shape_err, Error, Result};
use crate::prompt::{ImageEmbedding, PrototypeBank};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Additive smoothing in the dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

/// Nearest-neighbour resampling of a row-major label grid (centre sampling).
pub fn resample_nearest(src: &[u8], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<u8> {
    let pick = |o: usize, s: usize, d: usize| (((2 * o + 1) * s) / (2 * d)).min(s - 1);
    let mut out = Vec::with_capacity(dh * dw);
    for i in 0..dh {
        let si = pick(i, sh, dh);
        for j in 0..dw {
            out.push(src[si * sw + pick(j, sw, dw)]);
        }
    }
    out
}

/// Binary mask of one class at native resolution plus its embedding-grid companion.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMask {
    class: usize,
    height: usize,
    width: usize,
    native: Vec<u8>,
    grid_height: usize,
    grid_width: usize,
    grid: Vec<u8>,
}

impl GroundTruthMask {
    /// `native` must hold only 0/1 values.
    pub fn new(
        class: usize,
        height: usize,
        width: usize,
        native: Vec<u8>,
        grid_height: usize,
        grid_width: usize,
    ) -> Result<Self> {
        if native.len() != height * width || height == 0 || width == 0 {
            return shape_err(format!(
                "mask of {height}x{width} needs {} cells, got {}",
                height * width,
                native.len()
            ));
        }
        if grid_height == 0 || grid_width == 0 {
            return shape_err("mask grid must be non-empty");
        }
        if native.iter().any(|&v| v > 1) {
            return Err(Error::Format(
                "binary mask holds values other than 0/1".into(),
            ));
        }
        let grid = resample_nearest(&native, height, width, grid_height, grid_width);
        Ok(Self {
            class,
            height,
            width,
            native,
            grid_height,
            grid_width,
            grid,
        })
    }

    /// Extracts `ids == class` from a label map.
    pub fn from_ids(
        ids: &[u8],
        height: usize,
        width: usize,
        class: usize,
        grid_height: usize,
        grid_width: usize,
    ) -> Result<Self> {
        let native = ids.iter().map(|&v| u8::from(v as usize == class)).collect();
        Self::new(class, height, width, native, grid_height, grid_width)
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn native(&self) -> &[u8] {
        &self.native
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_height, self.grid_width)
    }

    pub fn foreground(&self) -> usize {
        self.native.iter().filter(|&&v| v == 1).count()
    }

    /// The mask at an arbitrary resolution, by the same nearest rule.
    pub fn at_resolution(&self, height: usize, width: usize) -> Vec<u8> {
        if (height, width) == (self.height, self.width) {
            return self.native.clone();
        }
        resample_nearest(&self.native, self.height, self.width, height, width)
    }
}

/// Masked mean of the embedding over a class's foreground cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedding {
    pub class: usize,
    pub vector: Vec<f32>,
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub pcl: f64,
    pub total: f64,
    pub temperature: f64,
}

/// `v[t] = sum_ij F[i,j,t] G[i,j] / sum_ij G[i,j]` over the `h x w` mask grid.
pub fn class_embedding(image: &ImageEmbedding, mask: &GroundTruthMask) -> Result<ClassEmbedding> {
    if mask.grid_dims() != (image.height(), image.width()) {
        return shape_err(format!(
            "mask grid {:?} vs embedding {}x{}",
            mask.grid_dims(),
            image.height(),
            image.width()
        ));
    }
    let d = image.channels();
    let mut acc = vec![0.0f64; d];
    let mut count = 0usize;
    for (cell, &g) in mask.grid().iter().enumerate() {
        if g == 0 {
            continue;
        }
        count += 1;
        for (a, &v) in acc.iter_mut().zip(image.tensor().row(cell)) {
            *a += v as f64;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask(mask.class()));
    }
    Ok(ClassEmbedding {
        class: mask.class(),
        vector: acc.iter().map(|&a| (a / count as f64) as f32).collect(),
    })
}

/// Graph-level contrastive loss over `K` matched rows of prototypes and class
/// embeddings: `-(1/K) sum_k log softmax_q(B_k . v_q / tau)[k]`.
pub fn pcl<T: Scalar>(g: &mut Graph<T>, bank: Var, embeddings: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let (kb, ke) = (g.shape(bank).to_vec(), g.shape(embeddings).to_vec());
    if kb != ke || kb.len() != 2 {
        return shape_err(format!("prototypes {kb:?} vs class embeddings {ke:?}"));
    }
    let k = kb[0];
    let logits = g.matmul_bt(bank, embeddings)?;
    let logits = g.scale(logits, T::from_f64(1.0 / tau))?;
    let logp = g.log_softmax_rows(logits)?;
    let eye = g.constant(Tensor::from_fn(&[k, k], |i| {
        if i / k == i % k {
            T::one()
        } else {
            T::zero()
        }
    }))?;
    let diag = g.mul(logp, eye)?;
    let s = g.sum(diag)?;
    g.scale(s, -T::one() / T::from_usize(k))
}

/// Value-level contrastive loss; `embeddings` row `k` is class `k + 1`.
pub fn prototype_contrastive_loss<T: Scalar>(
    bank: &Tensor<T>,
    embeddings: &Tensor<T>,
    tau: f64,
) -> Result<T> {
    let mut g = Graph::<T>::new();
    let b = g.constant(bank.clone())?;
    let v = g.constant(embeddings.clone())?;
    let l = pcl(&mut g, b, v, tau)?;
    g.value(l).item()
}

/// Same as [`prototype_contrastive_loss`] taking a stored bank.
pub fn bank_contrastive_loss(
    bank: &PrototypeBank,
    embeddings: &[ClassEmbedding],
    tau: f64,
) -> Result<f64> {
    if embeddings.len() != bank.classes() {
        return shape_err(format!(
            "{} class embeddings for {} prototypes",
            embeddings.len(),
            bank.classes()
        ));
    }
    let d = bank.channels();
    let mut rows = vec![0.0f64; bank.classes() * d];
    for e in embeddings {
        if e.class == 0 || e.class > bank.classes() || e.vector.len() != d {
            return shape_err(format!(
                "class embedding for class {} does not fit",
                e.class
            ));
        }
        for (r, &v) in rows[(e.class - 1) * d..e.class * d]
            .iter_mut()
            .zip(&e.vector)
        {
            *r = v as f64;
        }
    }
    prototype_contrastive_loss(
        &bank.table().cast::<f64>(),
        &Tensor::new(&[bank.classes(), d], rows)?,
        tau,
    )
}

/// Graph-level `1 - (2 sum m g + eps) / (sum m^2 + sum g^2 + eps)` on probabilities.
pub fn dice_from_probs<T: Scalar>(g: &mut Graph<T>, probs: Var, target: Var) -> Result<Var> {
    if g.value(probs).len() != g.value(target).len() {
        return shape_err(format!(
            "dice: prediction {:?} vs target {:?}",
            g.shape(probs),
            g.shape(target)
        ));
    }
    let n = g.value(probs).len();
    let probs = g.reshape(probs, &[n])?;
    let target = g.reshape(target, &[n])?;
    let eps = T::from_f64(DICE_SMOOTH);
    let overlap = g.mul(probs, target)?;
    let overlap = g.sum(overlap)?;
    let num = g.scale(overlap, T::from_f64(2.0))?;
    let num = g.add_scalar(num, eps)?;
    let sq = g.mul(probs, probs)?;
    let pred_sq = g.sum(sq)?;
    let tsq = g.mul(target, target)?;
    let target_sq = g.sum(tsq)?;
    let den = g.add(pred_sq, target_sq)?;
    let den = g.add_scalar(den, eps)?;
    let coeff = g.div(num, den)?;
    let neg = g.scale(coeff, -T::one())?;
    g.add_scalar(neg, T::one())
}

pub fn dice_from_logits<T: Scalar>(g: &mut Graph<T>, logits: Var, target: Var) -> Result<Var> {
    let probs = g.sigmoid(logits)?;
    dice_from_probs(g, probs, target)
}

pub(crate) fn target_tensor<T: Scalar>(bits: &[u8]) -> Tensor<T> {
    Tensor::from_fn(&[bits.len()], |i| T::from_f64(bits[i] as f64))
}

/// Dice loss of decoded logits against the mask taken at logits resolution.
pub fn dice_loss(logits: &MaskLogits, mask: &GroundTruthMask) -> Result<f64> {
    let target = mask.at_resolution(logits.height(), logits.width());
    let mut g = Graph::<f64>::new();
    let l = g.constant(logits.tensor.cast())?;
    let t = g.constant(target_tensor(&target))?;
    let d = dice_from_logits(&mut g, l, t)?;
    g.value(d).item()
}

/// Dice loss on probabilities supplied directly, bypassing the sigmoid.
pub fn dice_loss_from_probabilities<T: Scalar>(probs: &[T], target: &[u8]) -> Result<T> {
    if probs.len() != target.len() {
        return shape_err(format!(
            "{} probabilities vs {} targets",
            probs.len(),
            target.len()
        ));
    }
    let mut g = Graph::<T>::new();
    let p = g.constant(Tensor::new(&[probs.len()], probs.to_vec())?)?;
    let t = g.constant(target_tensor(target))?;
    let d = dice_from_probs(&mut g, p, t)?;
    g.value(d).item()
}

pub fn total_loss(dice: f64, pcl: f64) -> f64 {
    dice + pcl
}
