//! Browser demo: generate a synthetic task, train a few steps at a time and
//! inspect similarity maps and predicted masks for any sample and class.

use protoseg::config::CliConfig;
use protoseg::data::{synthesize, SyntheticSet};
use protoseg::metrics::{binarize, iou, BinaryMask};
use protoseg::prompt::export_similarity_map;
use protoseg::trainer::{
    batch_pairs, init_model, train_step, ModelState, PairSampler, TrainConfig,
};
use wasm_bindgen::prelude::*;

fn js(e: protoseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    set: SyntheticSet,
    cfg: TrainConfig,
    state: ModelState,
    sampler: PairSampler,
    last_loss: f64,
}

#[wasm_bindgen]
impl Demo {
    /// Fresh task and untrained model. `snr` sets how clean the class signal is.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, snr: f64, pcl: bool) -> Result<Demo, JsError> {
        let mut cli = CliConfig::default();
        cli.synth.seed = seed.into();
        cli.synth.snr = snr;
        cli.synth.samples = 32;
        cli.synth.eval_samples = 8;
        cli.train.seed = seed.into();
        cli.train.pcl = pcl;
        cli.train.batch_size = 8;
        cli.train.lr = 3e-3;
        let set = synthesize(&cli.synth).map_err(js)?;
        let state = init_model(&cli.train).map_err(js)?;
        let sampler = PairSampler::new(&set.train, cli.train.seed).map_err(js)?;
        Ok(Demo {
            set,
            cfg: cli.train,
            state,
            sampler,
            last_loss: f64::NAN,
        })
    }

    pub fn classes(&self) -> usize {
        self.cfg.model.classes
    }

    pub fn samples(&self) -> usize {
        self.set.eval.len()
    }

    pub fn step(&self) -> u32 {
        u32::try_from(self.state.step).unwrap_or(u32::MAX)
    }

    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    /// Runs `steps` optimiser steps and returns the final total loss.
    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        for _ in 0..steps {
            let idx = self.sampler.next_batch(self.cfg.batch_size);
            let loss = train_step(
                &mut self.state,
                &batch_pairs(&self.set.train, &idx),
                &self.cfg,
            )
            .map_err(js)?;
            self.last_loss = loss.total;
        }
        Ok(self.last_loss)
    }

    /// Side length of the square embedding grid.
    pub fn grid_size(&self) -> usize {
        self.set.eval.samples[0].embedding.height()
    }

    /// Side length of the square predicted mask.
    pub fn mask_size(&self) -> usize {
        self.grid_size() * self.cfg.model.upscale
    }

    /// Row-major similarity of eval sample `sample` to class `class`, scaled to [0, 1].
    pub fn similarity(&self, sample: usize, class: usize) -> Result<Vec<f32>, JsError> {
        let s = self.sample(sample)?;
        let sim = self.state.params.similarity(&s.embedding).map_err(js)?;
        Ok(export_similarity_map(&sim, class).map_err(js)?.into_data())
    }

    /// Row-major predicted mask: 1 where the model segments `class`.
    pub fn predict(&self, sample: usize, class: usize) -> Result<Vec<u8>, JsError> {
        Ok(self
            .predicted(sample, class)?
            .cells
            .iter()
            .map(|&b| u8::from(b))
            .collect())
    }

    /// Row-major ground truth for `class` at the predicted mask's resolution.
    pub fn truth(&self, sample: usize, class: usize) -> Result<Vec<u8>, JsError> {
        let n = self.mask_size();
        let s = self.sample(sample)?;
        Ok(match s.mask(class) {
            Some(m) => m.at_resolution(n, n),
            None => vec![0; n * n],
        })
    }

    /// IoU of the prediction against the ground truth.
    pub fn iou(&self, sample: usize, class: usize) -> Result<f64, JsError> {
        let n = self.mask_size();
        let gt = BinaryMask::from_u8(n, n, &self.truth(sample, class)?).map_err(js)?;
        iou(&self.predicted(sample, class)?, &gt).map_err(js)
    }
}

impl Demo {
    fn sample(&self, i: usize) -> Result<&protoseg::data::Sample, JsError> {
        self.set
            .eval
            .samples
            .get(i)
            .ok_or_else(|| JsError::new(&format!("no sample {i}")))
    }

    fn predicted(&self, sample: usize, class: usize) -> Result<BinaryMask, JsError> {
        let s = self.sample(sample)?;
        let logits = self.state.params.predict(&s.embedding, class).map_err(js)?;
        Ok(binarize(&logits, self.cfg.threshold))
    }
}
