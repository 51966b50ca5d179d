//! Spectral band orderings (original, reversed, importance-descending,
//! importance-ascending), optional LiDAR pseudo-bands at both sequence ends,
//! and the band-importance rankings that drive the importance orders.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{write_file, HsiCube, LabelMap};
use crate::error::{Error, Result};

const FISHER_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OrderId {
    /// Native wavelength sequence.
    Db1,
    /// Reversed native sequence.
    Db2,
    /// Most to least important.
    Db3,
    /// Least to most important.
    Db4,
}

impl OrderId {
    pub const ALL: [OrderId; 4] = [OrderId::Db1, OrderId::Db2, OrderId::Db3, OrderId::Db4];

    pub fn needs_ranking(self) -> bool {
        matches!(self, OrderId::Db3 | OrderId::Db4)
    }

    pub fn code(self) -> u8 {
        match self {
            OrderId::Db1 => 1,
            OrderId::Db2 => 2,
            OrderId::Db3 => 3,
            OrderId::Db4 => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(OrderId::Db1),
            2 => Ok(OrderId::Db2),
            3 => Ok(OrderId::Db3),
            4 => Ok(OrderId::Db4),
            _ => Err(Error::Format(format!("unknown band order code {code}"))),
        }
    }
}

impl fmt::Display for OrderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DB{}", self.code())
    }
}

/// One stream's ordering: which band goes where, and whether the LiDAR
/// value is placed at both ends of the sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandOrderSpec {
    pub id: OrderId,
    /// Number of bands in the source cube.
    pub bands: usize,
    /// Source band index for each output position.
    pub permutation: Vec<usize>,
    pub lidar_injection: bool,
}

impl BandOrderSpec {
    pub fn with_lidar(mut self, on: bool) -> Self {
        self.lidar_injection = on;
        self
    }

    /// Length of the sequence fed to the network.
    pub fn sequence_len(&self) -> usize {
        self.permutation.len() + if self.lidar_injection { 2 } else { 0 }
    }

    pub fn label(&self) -> String {
        if self.lidar_injection {
            format!("{}Li", self.id)
        } else {
            self.id.to_string()
        }
    }

    /// Writes the ordered sequence for one pixel into `out`.
    pub fn apply_into(&self, spectrum: &[f64], lidar: f64, out: &mut Vec<f64>) -> Result<()> {
        if spectrum.len() != self.bands {
            return Err(Error::Shape(format!(
                "spectrum has {} bands, order expects {}",
                spectrum.len(),
                self.bands
            )));
        }
        if self.lidar_injection {
            out.push(lidar);
        }
        out.extend(self.permutation.iter().map(|&b| spectrum[b]));
        if self.lidar_injection {
            out.push(lidar);
        }
        Ok(())
    }

    /// Position of each source band in the output, for full-length orders.
    pub fn inverse(&self) -> Option<Vec<usize>> {
        if self.permutation.len() != self.bands {
            return None;
        }
        let mut inv = vec![0; self.bands];
        for (pos, &b) in self.permutation.iter().enumerate() {
            inv[b] = pos;
        }
        Some(inv)
    }
}

pub fn apply_order(spectrum: &[f64], spec: &BandOrderSpec, lidar: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spec.sequence_len());
    spec.apply_into(spectrum, lidar, &mut out)?;
    Ok(out)
}

/// Band importance scores and the derived most-to-least order.
#[derive(Clone, Debug, PartialEq)]
pub struct BandRanking {
    scores: Vec<f64>,
    descending_order: Vec<usize>,
}

impl BandRanking {
    /// Sorts by descending score; ties go to the lower band index.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Format("ranking has no bands".into()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Format(format!("score for band {i} is not finite")));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(BandRanking {
            scores,
            descending_order: order,
        })
    }

    /// Takes an explicit most-to-least permutation; synthesizes scores
    /// `C - position` so the two fields stay consistent.
    pub fn from_permutation(order: Vec<usize>) -> Result<Self> {
        let c = order.len();
        if c == 0 {
            return Err(Error::Format("ranking has no bands".into()));
        }
        let mut seen = vec![false; c];
        for &b in &order {
            if b >= c {
                return Err(Error::Format(format!(
                    "band index {b} out of range for {c} bands"
                )));
            }
            if std::mem::replace(&mut seen[b], true) {
                return Err(Error::Format(format!("band index {b} repeated")));
            }
        }
        let mut scores = vec![0.0; c];
        for (pos, &b) in order.iter().enumerate() {
            scores[b] = (c - pos) as f64;
        }
        Ok(BandRanking {
            scores,
            descending_order: order,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn descending_order(&self) -> &[usize] {
        &self.descending_order
    }

    pub fn bands(&self) -> usize {
        self.scores.len()
    }

    pub fn to_file(&self) -> RankingFile {
        RankingFile {
            bands: self.bands(),
            kind: RankingKind::Scores,
            values: self.scores.clone(),
        }
    }
}

pub fn build_order(
    id: OrderId,
    bands: usize,
    ranking: Option<&BandRanking>,
) -> Result<BandOrderSpec> {
    build_order_top_k(id, bands, ranking, bands)
}

/// Like [`build_order`], but importance orders keep only the `top_k` most
/// important bands (DB4 is then the reverse of the truncated DB3).
pub fn build_order_top_k(
    id: OrderId,
    bands: usize,
    ranking: Option<&BandRanking>,
    top_k: usize,
) -> Result<BandOrderSpec> {
    if bands == 0 {
        return Err(Error::Config("band count must be positive".into()));
    }
    if top_k == 0 || top_k > bands {
        return Err(Error::Config(format!(
            "top-k must be in 1..={bands}, got {top_k}"
        )));
    }
    let permutation = match id {
        OrderId::Db1 => (0..bands).collect(),
        OrderId::Db2 => (0..bands).rev().collect(),
        OrderId::Db3 | OrderId::Db4 => {
            let r = ranking.ok_or_else(|| {
                Error::Config(format!(
                    "{id} needs a band ranking (run `rank` or pass --ranking)"
                ))
            })?;
            if r.bands() != bands {
                return Err(Error::Config(format!(
                    "ranking covers {} bands, scene has {bands}",
                    r.bands()
                )));
            }
            let mut p = r.descending_order()[..top_k].to_vec();
            if id == OrderId::Db4 {
                p.reverse();
            }
            p
        }
    };
    Ok(BandOrderSpec {
        id,
        bands,
        permutation,
        lidar_injection: false,
    })
}

/// Fisher ratio per band over the training pixels:
/// `Σ_c n_c (μ_c − μ)² / (Σ_c n_c σ²_c + ε)` with population variances.
pub fn rank_bands_fisher(
    cube: &HsiCube,
    labels: &LabelMap,
    train: &[usize],
) -> Result<BandRanking> {
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for &p in train {
        let l = *labels
            .labels()
            .get(p)
            .ok_or_else(|| Error::Shape(format!("pixel {p} outside label map")))?;
        if l == 0 {
            return Err(Error::Ranking(format!("training pixel {p} is unlabeled")));
        }
        by_class.entry(l).or_default().push(p);
    }
    if by_class.len() < 2 {
        return Err(Error::Ranking(format!(
            "Fisher ranking needs at least 2 classes in the training set, found {}",
            by_class.len()
        )));
    }
    for px in by_class.values_mut() {
        px.sort_unstable();
    }
    let total: usize = by_class.values().map(Vec::len).sum();
    let scores = (0..cube.bands())
        .map(|b| {
            let stats: Vec<(f64, f64, f64)> = by_class
                .values()
                .map(|px| {
                    let n = px.len() as f64;
                    let mean = px.iter().map(|&p| cube.spectrum(p)[b]).sum::<f64>() / n;
                    let var = px
                        .iter()
                        .map(|&p| (cube.spectrum(p)[b] - mean).powi(2))
                        .sum::<f64>()
                        / n;
                    (n, mean, var)
                })
                .collect();
            let grand = stats.iter().map(|(n, m, _)| n * m).sum::<f64>() / total as f64;
            let between: f64 = stats.iter().map(|(n, m, _)| n * (m - grand).powi(2)).sum();
            let within: f64 = stats.iter().map(|(n, _, v)| n * v).sum();
            between / (within + FISHER_EPS)
        })
        .collect();
    BandRanking::from_scores(scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingKind {
    Scores,
    Permutation,
}

/// `ranking.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingFile {
    pub bands: usize,
    pub kind: RankingKind,
    pub values: Vec<f64>,
}

impl RankingFile {
    pub fn into_ranking(self, bands: usize) -> Result<BandRanking> {
        if self.bands != bands || self.values.len() != bands {
            return Err(Error::Format(format!(
                "ranking lists {} values for {} bands, expected {bands}",
                self.values.len(),
                self.bands
            )));
        }
        match self.kind {
            RankingKind::Scores => BandRanking::from_scores(self.values),
            RankingKind::Permutation => BandRanking::from_permutation(to_indices(&self.values)?),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        write_file(path, (text + "\n").as_bytes())
    }
}

fn to_indices(values: &[f64]) -> Result<Vec<usize>> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{v} is not a band index")))
            }
        })
        .collect()
}

/// Reads either a `ranking.json` document or a plain comma/whitespace list.
/// A plain list of non-negative integers is a most-to-least permutation;
/// any other numeric list is per-band scores.
pub fn load_ranking(path: &Path, bands: usize) -> Result<BandRanking> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ranking(&text, bands).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_ranking(text: &str, bands: usize) -> Result<BandRanking> {
    let trimmed = text.trim();
    if trimmed.starts_with('{') {
        let file: RankingFile = serde_json::from_str(trimmed)
            .map_err(|e| Error::Format(format!("invalid ranking document: {e}")))?;
        return file.into_ranking(bands);
    }
    let tokens: Vec<&str> = trimmed
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.len() != bands {
        return Err(Error::Format(format!(
            "ranking lists {} values, expected {bands}",
            tokens.len()
        )));
    }
    if let Ok(idx) = tokens
        .iter()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
    {
        return BandRanking::from_permutation(idx);
    }
    let scores = tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("`{t}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    BandRanking::from_scores(scores)
}

/// One network configuration: one or two streams, e.g. `DB1Li+DB2Li`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConfigId {
    pub streams: Vec<(OrderId, bool)>,
}

impl ConfigId {
    pub fn needs_ranking(&self) -> bool {
        self.streams.iter().any(|(id, _)| id.needs_ranking())
    }

    pub fn build(
        &self,
        bands: usize,
        ranking: Option<&BandRanking>,
        top_k: usize,
    ) -> Result<Vec<BandOrderSpec>> {
        self.streams
            .iter()
            .map(|&(id, li)| Ok(build_order_top_k(id, bands, ranking, top_k)?.with_lidar(li)))
            .collect()
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (id, li)) in self.streams.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{id}{}", if *li { "Li" } else { "" })?;
        }
        Ok(())
    }
}

impl FromStr for ConfigId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let streams = s
            .split('+')
            .map(|part| {
                let p = part.trim().to_ascii_lowercase();
                let (base, li) = match p.strip_suffix("li") {
                    Some(b) => (b, true),
                    None => (p.as_str(), false),
                };
                let id = match base {
                    "db1" => OrderId::Db1,
                    "db2" => OrderId::Db2,
                    "db3" => OrderId::Db3,
                    "db4" => OrderId::Db4,
                    _ => return Err(Error::Config(format!("unknown band order `{part}`"))),
                };
                Ok((id, li))
            })
            .collect::<Result<Vec<_>>>()?;
        if streams.len() > 2 {
            return Err(Error::Config(format!(
                "at most two streams are supported, got `{s}`"
            )));
        }
        Ok(ConfigId { streams })
    }
}

/// The ten grid columns, HSI-only first, then HSI + LiDAR.
pub fn grid_configs() -> Vec<ConfigId> {
    [
        "db1",
        "db2",
        "db3",
        "db4",
        "db1li",
        "db2li",
        "db1li+db2li",
        "db3li",
        "db4li",
        "db3li+db4li",
    ]
    .iter()
    .map(|s| s.parse().expect("static config ids parse"))
    .collect()
}
