use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::grid::{read_grid, read_mask, MaskFile};
use super::read_bytes;
use crate::error::{Error, Result};
use crate::losses::GroundTruthMask;
use crate::prompt::ImageEmbedding;

/// One manifest line. Paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub embedding: PathBuf,
    pub mask: PathBuf,
}

/// Parses `id<TAB>embedding<TAB>mask` lines; `#` starts a comment line.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, emb, mask] = fields[..] else {
            return Err(Error::Format(format!(
                "manifest line {}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::Format(format!("duplicate sample id {id:?}")));
        }
        out.push(ManifestRecord {
            id: id.to_string(),
            embedding: base.join(emb),
            mask: base.join(mask),
        });
    }
    Ok(out)
}

/// An image embedding with the binary masks of every class it contains.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub embedding: ImageEmbedding,
    pub labels: MaskFile,
    /// Ascending by class; only classes with at least one pixel.
    pub masks: Vec<GroundTruthMask>,
}

impl Sample {
    pub fn new(id: impl Into<String>, embedding: ImageEmbedding, labels: MaskFile) -> Result<Self> {
        let (gh, gw) = (embedding.height(), embedding.width());
        let masks = labels
            .present_classes()
            .into_iter()
            .map(|c| GroundTruthMask::from_ids(&labels.ids, labels.height, labels.width, c, gh, gw))
            .collect::<Result<_>>()?;
        Ok(Self {
            id: id.into(),
            embedding,
            labels,
            masks,
        })
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.masks.iter().map(|m| m.class())
    }

    pub fn mask(&self, class: usize) -> Option<&GroundTruthMask> {
        self.masks.iter().find(|m| m.class() == class)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every (sample index, mask index) prompt pair in file order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.masks.len()).map(move |k| (i, k)))
            .collect()
    }

    pub fn max_class(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| s.classes())
            .max()
            .unwrap_or(0)
    }
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let path = manifest.as_ref();
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let records = parse_manifest(&text, base)?;
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let embedding = ImageEmbedding::new(read_grid(&rec.embedding)?)
            .map_err(|e| Error::Format(format!("{}: {e}", rec.embedding.display())))?;
        let labels = read_mask(&rec.mask)?;
        samples.push(Sample::new(rec.id, embedding, labels)?);
    }
    Ok(Dataset { samples })
}
