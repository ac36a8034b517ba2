//! Segmentation metrics over (image, present class) pairs.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::decoder::MaskLogits;
use crate::error::{shape_err, Error, Result};
use crate::model::ModelParams;
use crate::prompt::ImageEmbedding;
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return shape_err(format!(
                "binary mask {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            ));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn from_u8(height: usize, width: usize, cells: &[u8]) -> Result<Self> {
        Self::new(height, width, cells.iter().map(|&v| v != 0).collect())
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

/// `sigmoid(logit) > threshold`, strictly.
pub fn binarize(logits: &MaskLogits, threshold: f64) -> BinaryMask {
    let t = &logits.tensor;
    BinaryMask {
        height: t.shape()[0],
        width: t.shape()[1],
        cells: t
            .data()
            .iter()
            .map(|&v| sigmoid(v as f64) > threshold)
            .collect(),
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return shape_err(format!(
            "iou of {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.cells.iter().zip(&gt.cells) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Anything that maps an image and a class prompt to mask logits.
pub trait Predictor {
    fn classes(&self) -> usize;
    fn predict(&self, image: &ImageEmbedding, class: usize) -> Result<MaskLogits>;
}

impl Predictor for ModelParams<Tensor<f32>> {
    fn classes(&self) -> usize {
        ModelParams::classes(self)
    }

    fn predict(&self, image: &ImageEmbedding, class: usize) -> Result<MaskLogits> {
        ModelParams::predict(self, image, class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub sample: String,
    pub class: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    pub pairs: usize,
    /// `None` when the class never occurs.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScore>,
    pub challenge_iou: f64,
    pub iou: f64,
    pub mc_iou: f64,
    pub pairs: Vec<PairScore>,
}

impl MetricsReport {
    /// Aggregates per-pair scores for classes `1..=classes`.
    pub fn from_pairs(pairs: Vec<PairScore>, classes: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("evaluation set has no prompt pairs".into()));
        }
        let mut sums = vec![(0.0f64, 0usize); classes + 1];
        let mut total = 0.0f64;
        for p in &pairs {
            if p.class == 0 || p.class > classes {
                return Err(Error::Class {
                    class: p.class,
                    classes,
                });
            }
            sums[p.class].0 += p.iou;
            sums[p.class].1 += 1;
            total += p.iou;
        }
        let challenge_iou = total / pairs.len() as f64;
        let per_class: Vec<ClassScore> = (1..=classes)
            .map(|c| ClassScore {
                class: c,
                pairs: sums[c].1,
                iou: (sums[c].1 > 0).then(|| sums[c].0 / sums[c].1 as f64),
            })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        let mc_iou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self {
            per_class,
            challenge_iou,
            // Prompts come only from present classes, so both averages run
            // over the same pair set.
            iou: challenge_iou,
            mc_iou,
            pairs,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,iou,pairs\n");
        for c in &self.per_class {
            let v = c.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "class_{},{v},{}", c.class, c.pairs);
        }
        let classes = self.per_class.iter().filter(|c| c.iou.is_some()).count();
        let _ = writeln!(
            s,
            "challenge_iou,{:.6},{}",
            self.challenge_iou,
            self.pairs.len()
        );
        let _ = writeln!(s, "iou,{:.6},{}", self.iou, self.pairs.len());
        let _ = writeln!(s, "mc_iou,{:.6},{classes}", self.mc_iou);
        s
    }
}

/// Scores every (image, present class) pair at the logits' resolution.
pub fn evaluate(model: &dyn Predictor, dataset: &Dataset, threshold: f64) -> Result<MetricsReport> {
    let mut pairs = Vec::new();
    for s in &dataset.samples {
        for m in &s.masks {
            let logits = model.predict(&s.embedding, m.class())?;
            let pred = binarize(&logits, threshold);
            let gt = BinaryMask::from_u8(
                pred.height,
                pred.width,
                &m.at_resolution(pred.height, pred.width),
            )?;
            pairs.push(PairScore {
                sample: s.id.clone(),
                class: m.class(),
                iou: iou(&pred, &gt)?,
            });
        }
    }
    MetricsReport::from_pairs(pairs, model.classes())
}
