//! Minimal two-way transformer mask decoder.
//!
//! The image stream starts as `F_I + T_D`; the token stream as `[T_O ; T_S]`.
//! Each layer runs token self-attention, token-to-image cross-attention, a
//! token MLP, and image-to-token cross-attention, all residual. The image
//! stream is then upscaled bilinearly, projected per pixel, and dotted with
//! the projected mask token (the first output token).

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{Affine, Entry, LayerNorm, ParamGroup, ParamTree};
use crate::prompt::{DensePromptEmbedding, ImageEmbedding, SparsePromptEmbedding};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<P> {
    pub query: Affine<P>,
    pub key: Affine<P>,
    pub value: Affine<P>,
    pub output: Affine<P>,
}

impl Attention<Tensor<f32>> {
    fn init(rng: &mut impl Rng, d: usize) -> Self {
        Self {
            query: Affine::xavier(rng, d, d),
            key: Affine::xavier(rng, d, d),
            value: Affine::xavier(rng, d, d),
            output: Affine::xavier(rng, d, d),
        }
    }
}

impl Attention<Var> {
    /// Multi-head scaled dot-product attention of `queries` over `context`.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        queries: Var,
        context: Var,
        heads: usize,
    ) -> Result<Var> {
        let q = self.query.apply(g, queries)?;
        let k = self.key.apply(g, context)?;
        let v = self.value.apply(g, context)?;
        let d = g.shape(q)[1];
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_rows(scores)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let joined = if heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.output.apply(g, joined)
    }
}

impl<P> ParamTree<P> for Attention<P> {
    type Mapped<Q> = Attention<Q>;

    fn visit<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<Entry<'a, P>>) {
        self.query.visit(&format!("{prefix}.query"), group, out);
        self.key.visit(&format!("{prefix}.key"), group, out);
        self.value.visit(&format!("{prefix}.value"), group, out);
        self.output.visit(&format!("{prefix}.output"), group, out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.query.visit_mut(out);
        self.key.visit_mut(out);
        self.value.visit_mut(out);
        self.output.visit_mut(out);
    }

    fn try_map<Q>(
        &self,
        group: ParamGroup,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<Attention<Q>> {
        Ok(Attention {
            query: self.query.try_map(group, f)?,
            key: self.key.try_map(group, f)?,
            value: self.value.try_map(group, f)?,
            output: self.output.try_map(group, f)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<P> {
    pub self_attn: Attention<P>,
    pub norm_self: LayerNorm<P>,
    pub token_to_image: Attention<P>,
    pub norm_cross: LayerNorm<P>,
    pub mlp_in: Affine<P>,
    pub mlp_out: Affine<P>,
    pub norm_mlp: LayerNorm<P>,
    pub image_to_token: Attention<P>,
    pub norm_image: LayerNorm<P>,
}

impl<P> ParamTree<P> for DecoderLayer<P> {
    type Mapped<Q> = DecoderLayer<Q>;

    fn visit<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<Entry<'a, P>>) {
        self.self_attn
            .visit(&format!("{prefix}.self_attn"), group, out);
        self.norm_self
            .visit(&format!("{prefix}.norm_self"), group, out);
        self.token_to_image
            .visit(&format!("{prefix}.token_to_image"), group, out);
        self.norm_cross
            .visit(&format!("{prefix}.norm_cross"), group, out);
        self.mlp_in.visit(&format!("{prefix}.mlp_in"), group, out);
        self.mlp_out.visit(&format!("{prefix}.mlp_out"), group, out);
        self.norm_mlp
            .visit(&format!("{prefix}.norm_mlp"), group, out);
        self.image_to_token
            .visit(&format!("{prefix}.image_to_token"), group, out);
        self.norm_image
            .visit(&format!("{prefix}.norm_image"), group, out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.self_attn.visit_mut(out);
        self.norm_self.visit_mut(out);
        self.token_to_image.visit_mut(out);
        self.norm_cross.visit_mut(out);
        self.mlp_in.visit_mut(out);
        self.mlp_out.visit_mut(out);
        self.norm_mlp.visit_mut(out);
        self.image_to_token.visit_mut(out);
        self.norm_image.visit_mut(out);
    }

    fn try_map<Q>(
        &self,
        group: ParamGroup,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<DecoderLayer<Q>> {
        Ok(DecoderLayer {
            self_attn: self.self_attn.try_map(group, f)?,
            norm_self: self.norm_self.try_map(group, f)?,
            token_to_image: self.token_to_image.try_map(group, f)?,
            norm_cross: self.norm_cross.try_map(group, f)?,
            mlp_in: self.mlp_in.try_map(group, f)?,
            mlp_out: self.mlp_out.try_map(group, f)?,
            norm_mlp: self.norm_mlp.try_map(group, f)?,
            image_to_token: self.image_to_token.try_map(group, f)?,
            norm_image: self.norm_image.try_map(group, f)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<P> {
    pub layers: Vec<DecoderLayer<P>>,
    /// Per-pixel projection `d -> d'` after upscaling.
    pub pixel: Affine<P>,
    /// Mask-token head `d -> d'`.
    pub head: Affine<P>,
    pub heads: usize,
    pub upscale: usize,
}

impl DecoderParams<Tensor<f32>> {
    pub fn init(
        rng: &mut impl Rng,
        d: usize,
        layers: usize,
        heads: usize,
        pixel_dim: usize,
        upscale: usize,
    ) -> Self {
        let layers = (0..layers)
            .map(|_| DecoderLayer {
                self_attn: Attention::init(rng, d),
                norm_self: LayerNorm::identity(d),
                token_to_image: Attention::init(rng, d),
                norm_cross: LayerNorm::identity(d),
                mlp_in: Affine::xavier(rng, d, 4 * d),
                mlp_out: Affine::xavier(rng, 4 * d, d),
                norm_mlp: LayerNorm::identity(d),
                image_to_token: Attention::init(rng, d),
                norm_image: LayerNorm::identity(d),
            })
            .collect();
        Self {
            layers,
            pixel: Affine::xavier(rng, d, pixel_dim),
            head: Affine::xavier(rng, d, pixel_dim),
            heads,
            upscale,
        }
    }

    pub fn channels(&self) -> usize {
        self.pixel.fan_in()
    }
}

impl<P> ParamTree<P> for DecoderParams<P> {
    type Mapped<Q> = DecoderParams<Q>;

    fn visit<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<Entry<'a, P>>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{i}"), group, out);
        }
        self.pixel.visit(&format!("{prefix}.pixel"), group, out);
        self.head.visit(&format!("{prefix}.head"), group, out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        for layer in &mut self.layers {
            layer.visit_mut(out);
        }
        self.pixel.visit_mut(out);
        self.head.visit_mut(out);
    }

    fn try_map<Q>(
        &self,
        group: ParamGroup,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<DecoderParams<Q>> {
        Ok(DecoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(group, f))
                .collect::<Result<_>>()?,
            pixel: self.pixel.try_map(group, f)?,
            head: self.head.try_map(group, f)?,
            heads: self.heads,
            upscale: self.upscale,
        })
    }
}

/// Logits of the prompted class at `(u*h) x (u*w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub tensor: Tensor<f32>,
}

impl MaskLogits {
    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Graph-level decoder. `image` and `dense` are `[h*w, d]`, `sparse` is
/// `[C*n, d]`, `output_tokens` is `[n_out, d]`. Returns `[u*h, u*w]` logits.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    height: usize,
    width: usize,
    dense: Var,
    sparse: Var,
    output_tokens: Var,
    params: &DecoderParams<Var>,
) -> Result<Var> {
    let d = g.shape(image)[1];
    for (what, v) in [
        ("dense", dense),
        ("sparse", sparse),
        ("output", output_tokens),
    ] {
        if g.shape(v).len() != 2 || g.shape(v)[1] != d {
            return shape_err(format!(
                "{what} prompt shape {:?} does not carry {d} channels",
                g.shape(v)
            ));
        }
    }
    if g.shape(image)[0] != height * width || g.shape(dense)[0] != height * width {
        return shape_err("dense prompt and image embedding disagree on grid size");
    }
    if params.heads == 0 || !d.is_multiple_of(params.heads) {
        return shape_err(format!(
            "{d} channels not divisible by {} heads",
            params.heads
        ));
    }

    let mut img = g.add(image, dense)?;
    let mut tokens = g.concat_rows(&[output_tokens, sparse])?;
    for layer in &params.layers {
        let a = layer.self_attn.apply(g, tokens, tokens, params.heads)?;
        let sum = g.add(tokens, a)?;
        tokens = layer.norm_self.apply(g, sum)?;
        let a = layer.token_to_image.apply(g, tokens, img, params.heads)?;
        let sum = g.add(tokens, a)?;
        tokens = layer.norm_cross.apply(g, sum)?;
        let hidden = layer.mlp_in.apply(g, tokens)?;
        let hidden = g.relu(hidden)?;
        let m = layer.mlp_out.apply(g, hidden)?;
        let sum = g.add(tokens, m)?;
        tokens = layer.norm_mlp.apply(g, sum)?;
        let a = layer.image_to_token.apply(g, img, tokens, params.heads)?;
        let sum = g.add(img, a)?;
        img = layer.norm_image.apply(g, sum)?;
    }

    // Bilinear taps sum to one, so projecting before upscaling gives the same
    // logits as projecting every upscaled pixel, at 1/u^2 of the cost.
    let pixels = params.pixel.apply(g, img)?;
    let mask_token = g.slice_rows(tokens, 0, 1)?;
    let head = params.head.apply(g, mask_token)?;
    let logits = g.matmul_bt(pixels, head)?;
    let up = g.upsample_bilinear(logits, height, width, params.upscale)?;
    g.reshape(up, &[height * params.upscale, width * params.upscale])
}

pub fn decode_mask(
    image: &ImageEmbedding,
    dense: &DensePromptEmbedding,
    sparse: &SparsePromptEmbedding,
    output_tokens: &Tensor<f32>,
    params: &DecoderParams<Tensor<f32>>,
) -> Result<MaskLogits> {
    if dense.tensor.shape() != image.tensor().shape() {
        return shape_err(format!(
            "dense prompt {:?} vs embedding {:?}",
            dense.tensor.shape(),
            image.tensor().shape()
        ));
    }
    let mut g = Graph::<f32>::new();
    let img = image.bind(&mut g)?;
    let dn = g.constant(
        dense
            .tensor
            .clone()
            .reshape(&[image.cells(), image.channels()])?,
    )?;
    let sp = g.constant(sparse.flattened())?;
    let to = g.constant(output_tokens.clone())?;
    let p = params.try_map(ParamGroup::Decoder, &mut |_, t| g.constant(t.clone()))?;
    let y = decode(&mut g, img, image.height(), image.width(), dn, sp, to, &p)?;
    Ok(MaskLogits {
        tensor: g.value(y).clone(),
    })
}
