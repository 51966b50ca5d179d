use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::scene::{write_file, LabelMap};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Train/test partition of the labeled pixels, keyed by class. Pixel indices
/// are flat (`r * width + c`) and sorted ascending within each class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_per_class: usize,
    pub train: BTreeMap<u16, Vec<usize>>,
    pub test: BTreeMap<u16, Vec<usize>>,
}

impl SplitSpec {
    /// All training pixels, ascending by class then pixel index.
    pub fn train_pixels(&self) -> Vec<(usize, u16)> {
        flatten(&self.train)
    }

    pub fn test_pixels(&self) -> Vec<(usize, u16)> {
        flatten(&self.test)
    }

    pub fn train_len(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }

    pub fn test_len(&self) -> usize {
        self.test.values().map(Vec::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn flatten(m: &BTreeMap<u16, Vec<usize>>) -> Vec<(usize, u16)> {
    m.iter()
        .flat_map(|(&c, px)| px.iter().map(move |&p| (p, c)))
        .collect()
}

/// Samples `train_per_class` pixels per class without replacement. Classes
/// with no more than `train_per_class` pixels contribute `⌈size / 2⌉`.
pub fn make_split(labels: &LabelMap, train_per_class: usize, seed: u64) -> Result<SplitSpec> {
    if train_per_class == 0 {
        return Err(Error::Split("train_per_class must be at least 1".into()));
    }
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for p in labels.labeled_pixels() {
        by_class.entry(labels.labels()[p]).or_default().push(p);
    }
    if by_class.is_empty() {
        return Err(Error::Split("label map has no labeled pixels".into()));
    }

    let mut rng = rng::stream(seed, tag::SPLIT, 0);
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (class, mut pixels) in by_class {
        let size = pixels.len();
        if size < 2 {
            return Err(Error::Split(format!(
                "class {class} has {size} labeled pixel(s); at least 2 are needed"
            )));
        }
        let take = if train_per_class >= size {
            size.div_ceil(2)
        } else {
            train_per_class
        };
        pixels.shuffle(&mut rng);
        let mut tr = pixels[..take].to_vec();
        let mut te = pixels[take..].to_vec();
        tr.sort_unstable();
        te.sort_unstable();
        train.insert(class, tr);
        test.insert(class, te);
    }
    Ok(SplitSpec {
        seed,
        train_per_class,
        train,
        test,
    })
}
