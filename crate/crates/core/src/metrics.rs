//! Confusion-matrix accounting, OA / AA / Kappa, and classification maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_file;
use crate::error::{Error, Result};

/// Class colours; index 0 (unlabeled) is black, 1..=16 are the classes.
pub const PALETTE: [[u8; 3]; 17] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub const PALETTE_CLASSES: usize = PALETTE.len() - 1;

/// `K × K` counts; rows are true classes, columns predictions (both 1-based
/// in the API, 0-based in storage).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds from explicit rows of counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn accumulate(&mut self, truth: u16, predicted: u16) -> Result<()> {
        let k = self.classes;
        for (what, c) in [("true", truth), ("predicted", predicted)] {
            if c == 0 || usize::from(c) > k {
                return Err(Error::Data(format!("{what} class {c} outside 1..={k}")));
            }
        }
        self.counts[(usize::from(truth) - 1) * k + usize::from(predicted) - 1] += 1;
        Ok(())
    }

    /// Count for 1-based `(truth, predicted)`.
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[(truth - 1) * self.classes + predicted - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    /// Cellwise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..][..self.classes].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes)
            .map(|r| self.counts[r * self.classes + c])
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: String,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        write_file(path, (text + "\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn compute_metrics(m: &ConfusionMatrix, config: &str) -> Result<MetricsReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let k = m.classes;
    let n = total as f64;
    let trace: u64 = (0..k).map(|c| m.counts[c * k + c]).sum();
    let oa = trace as f64 / n;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let row = m.row_sum(c);
            (row > 0).then(|| m.counts[c * k + c] as f64 / row as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let pe = (0..k)
        .map(|c| m.row_sum(c) as f64 * m.col_sum(c) as f64)
        .sum::<f64>()
        / (n * n);
    let kappa = if pe == 1.0 {
        0.0
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(MetricsReport {
        config: config.to_string(),
        oa,
        aa,
        kappa,
        per_class,
        confusion: m.rows(),
    })
}

/// Binary PPM (P6) with one palette colour per class, black for 0.
pub fn render_map(
    predictions: &[u16],
    height: usize,
    width: usize,
    classes: usize,
) -> Result<Vec<u8>> {
    if classes > PALETTE_CLASSES {
        return Err(Error::Config(format!(
            "{classes} classes exceed the {PALETTE_CLASSES}-colour palette"
        )));
    }
    if predictions.len() != height * width {
        return Err(Error::Shape(format!(
            "{} predictions for a {height}x{width} map",
            predictions.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(predictions.len() * 3);
    for &p in predictions {
        if usize::from(p) > classes {
            return Err(Error::Data(format!(
                "prediction {p} exceeds class count {classes}"
            )));
        }
        out.extend_from_slice(&PALETTE[usize::from(p)]);
    }
    Ok(out)
}

pub fn write_map(
    path: &Path,
    predictions: &[u16],
    height: usize,
    width: usize,
    classes: usize,
) -> Result<()> {
    let bytes = render_map(predictions, height, width, classes)?;
    write_file(path, &bytes)
}
