//! The tunable model: prototype bank, prompt MLPs, decoder, output tokens
//! and the frozen polarity pair.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decode, DecoderParams, MaskLogits};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Affine, Entry, ParamGroup, ParamTree};
use crate::prompt::{
    check_class, encode, Encoded, ImageEmbedding, Polarity, PromptMlp, PrototypeBank,
    SimilarityMaps,
};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub classes: usize,
    pub channels: usize,
    /// Sparse tokens per class (`n`).
    pub tokens: usize,
    pub dense_hidden: usize,
    pub sparse_hidden: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub upscale: usize,
    /// Pixel / mask-token head width; 0 means `channels / 2` (at least 1).
    pub pixel_dim: usize,
    pub output_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            channels: 16,
            tokens: 2,
            dense_hidden: 32,
            sparse_hidden: 32,
            decoder_layers: 2,
            heads: 1,
            upscale: 4,
            pixel_dim: 0,
            output_tokens: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("channels", self.channels),
            ("tokens", self.tokens),
            ("dense_hidden", self.dense_hidden),
            ("sparse_hidden", self.sparse_hidden),
            ("heads", self.heads),
            ("upscale", self.upscale),
            ("output_tokens", self.output_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn effective_pixel_dim(&self) -> usize {
        if self.pixel_dim > 0 {
            self.pixel_dim
        } else {
            (self.channels / 2).max(1)
        }
    }

    /// Total scalar parameters, or `None` on overflow.
    pub fn param_count(&self) -> Option<usize> {
        let (c, d, n) = (self.classes, self.channels, self.tokens);
        let p = self.effective_pixel_dim();
        let affine = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
        let attention = affine(d, d)?.checked_mul(4)?;
        let norm = d.checked_mul(2)?;
        let layer = attention
            .checked_mul(3)?
            .checked_add(norm.checked_mul(4)?)?
            .checked_add(affine(d, d.checked_mul(4)?)?)?
            .checked_add(affine(d.checked_mul(4)?, d)?)?;
        [
            c.checked_mul(d)?,
            affine(d, self.dense_hidden)?,
            affine(self.dense_hidden, d)?,
            affine(d, self.sparse_hidden)?,
            affine(self.sparse_hidden, n.checked_mul(d)?)?,
            layer.checked_mul(self.decoder_layers)?,
            affine(d, p)?.checked_mul(2)?,
            self.output_tokens.checked_mul(d)?,
            d.checked_mul(2)?,
        ]
        .into_iter()
        .try_fold(0usize, |a, b| a.checked_add(b))
    }

    /// Key-value lines; round-trips through [`ModelConfig::from_meta`].
    pub fn to_meta(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad model metadata line {line:?}")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad value in {line:?}")))?;
            map.insert(k.trim().to_string(), v);
        }
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| Error::Format(format!("model metadata lacks {k}")))
        };
        let cfg = Self {
            classes: take("classes")?,
            channels: take("channels")?,
            tokens: take("tokens")?,
            dense_hidden: take("dense_hidden")?,
            sparse_hidden: take("sparse_hidden")?,
            decoder_layers: take("decoder_layers")?,
            heads: take("heads")?,
            upscale: take("upscale")?,
            pixel_dim: take("pixel_dim")?,
            output_tokens: take("output_tokens")?,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Format(format!("unknown model metadata key {k}")));
        }
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }

    fn fields(&self) -> [(&'static str, usize); 10] {
        [
            ("classes", self.classes),
            ("channels", self.channels),
            ("tokens", self.tokens),
            ("dense_hidden", self.dense_hidden),
            ("sparse_hidden", self.sparse_hidden),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("upscale", self.upscale),
            ("pixel_dim", self.pixel_dim),
            ("output_tokens", self.output_tokens),
        ]
    }
}

/// All model parameters, generic over the leaf type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    /// `[C, d]`
    pub prototypes: P,
    pub mlp: PromptMlp<P>,
    pub decoder: DecoderParams<P>,
    /// `[n_out, d]`; row 0 is the mask token.
    pub output_tokens: P,
    pub polarity: Polarity<P>,
}

impl<P> ModelParams<P> {
    /// Flat, named view in canonical order.
    pub fn entries(&self) -> Vec<Entry<'_, P>> {
        let mut out = Vec::new();
        out.push(Entry {
            name: "prototypes".into(),
            group: ParamGroup::Prototypes,
            value: &self.prototypes,
        });
        self.mlp
            .visit_part("mlp", true, ParamGroup::DenseMlp, &mut out);
        self.mlp
            .visit_part("mlp", false, ParamGroup::SparseMlp, &mut out);
        self.decoder.visit("decoder", ParamGroup::Decoder, &mut out);
        out.push(Entry {
            name: "output_tokens".into(),
            group: ParamGroup::OutputTokens,
            value: &self.output_tokens,
        });
        self.polarity
            .visit("polarity", ParamGroup::Polarity, &mut out);
        out
    }

    /// Mutable leaves in the same order as [`ModelParams::entries`].
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.prototypes];
        self.mlp.visit_mut(&mut out);
        self.decoder.visit_mut(&mut out);
        out.push(&mut self.output_tokens);
        self.polarity.visit_mut(&mut out);
        out
    }

    pub fn try_map<Q>(
        &self,
        f: &mut dyn FnMut(ParamGroup, &P) -> Result<Q>,
    ) -> Result<ModelParams<Q>> {
        Ok(ModelParams {
            prototypes: f(ParamGroup::Prototypes, &self.prototypes)?,
            mlp: self.mlp.try_map_groups(f)?,
            decoder: self.decoder.try_map(ParamGroup::Decoder, f)?,
            output_tokens: f(ParamGroup::OutputTokens, &self.output_tokens)?,
            polarity: self.polarity.try_map(ParamGroup::Polarity, f)?,
        })
    }
}

impl ModelParams<Tensor<f32>> {
    /// Seeded initialisation: standard-normal prototypes, polarity pair and
    /// output tokens; Xavier-uniform weights with zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.channels;
        let prototypes = normal_tensor(&mut rng, &[cfg.classes, d]);
        let polarity = Polarity {
            positive: normal_tensor(&mut rng, &[d]),
            negative: normal_tensor(&mut rng, &[d]),
        };
        let mlp = PromptMlp {
            dense_in: Affine::xavier(&mut rng, d, cfg.dense_hidden),
            dense_out: Affine::xavier(&mut rng, cfg.dense_hidden, d),
            sparse_in: Affine::xavier(&mut rng, d, cfg.sparse_hidden),
            sparse_out: Affine::xavier(&mut rng, cfg.sparse_hidden, cfg.tokens * d),
            tokens: cfg.tokens,
        };
        let decoder = DecoderParams::init(
            &mut rng,
            d,
            cfg.decoder_layers,
            cfg.heads,
            cfg.effective_pixel_dim(),
            cfg.upscale,
        );
        let output_tokens = normal_tensor(&mut rng, &[cfg.output_tokens, d]);
        Ok(Self {
            prototypes,
            mlp,
            decoder,
            output_tokens,
            polarity,
        })
    }

    /// Places every parameter on `g`. Groups for which `trainable` is false
    /// become constants and therefore never receive gradient.
    pub fn bind<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        trainable: &dyn Fn(ParamGroup) -> bool,
    ) -> Result<ModelParams<Var>> {
        self.try_map(&mut |group, t| g.leaf(t.cast(), trainable(group)))
    }

    pub fn bank(&self) -> Result<PrototypeBank> {
        PrototypeBank::new(self.prototypes.clone())
    }
}

/// Parameter count per group, in [`ParamGroup::ALL`] order.
pub fn census<P>(params: &ModelParams<P>, len: impl Fn(&P) -> usize) -> Vec<(ParamGroup, usize)> {
    let mut counts: BTreeMap<ParamGroup, usize> = BTreeMap::new();
    for e in params.entries() {
        *counts.entry(e.group).or_default() += len(e.value);
    }
    ParamGroup::ALL
        .iter()
        .map(|g| (*g, counts.get(g).copied().unwrap_or(0)))
        .collect()
}

/// Graph-level forward pass for one image and prompted class.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelParams<Var>,
    image: &ImageEmbedding,
    class: usize,
) -> Result<(Encoded, Var)> {
    let img = image.bind(g)?;
    let enc = encode(g, img, vars.prototypes, class, &vars.mlp, &vars.polarity)?;
    let logits = decode(
        g,
        img,
        image.height(),
        image.width(),
        enc.dense,
        enc.sparse,
        vars.output_tokens,
        &vars.decoder,
    )?;
    Ok((enc, logits))
}

/// Inference-only helpers on stored parameters.
impl ModelParams<Tensor<f32>> {
    pub fn classes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn predict(&self, image: &ImageEmbedding, class: usize) -> Result<MaskLogits> {
        check_class(class, self.classes())?;
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g, &|_| false)?;
        let (_, logits) = forward(&mut g, &vars, image, class)?;
        Ok(MaskLogits {
            tensor: g.value(logits).clone(),
        })
    }

    pub fn similarity(&self, image: &ImageEmbedding) -> Result<SimilarityMaps> {
        crate::prompt::compute_similarity(image, &self.bank()?)
    }
}
