//! Segmentation accuracy arithmetic and the codec abstraction.
//!
//! The codec is modelled only through its rate–accuracy behaviour: for each
//! ladder bitrate, the MIoU its decoder achieves. [`RateAccuracyTable`] holds
//! those measurements per codec.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("confusion matrix must be square with at least one class")]
    NotSquare,
    #[error("every class is absent from both truth and prediction")]
    AllClassesEmpty,
    #[error("compression ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("no encoder configuration with {0} output filters")]
    UnknownFilterCount(u32),
    #[error("unknown codec {0:?}")]
    UnknownCodec(String),
    #[error("codec {codec:?} has no entry at {bitrate_kbps} kbps")]
    UnknownBitrate { codec: String, bitrate_kbps: f64 },
    #[error("bitrate ladder needs at least two strictly increasing positive levels")]
    BadLadder,
    #[error("codec {codec:?}: {reason}")]
    BadTable { codec: String, reason: String },
    #[error("rate-accuracy table: {0}")]
    Parse(String),
}

/// Pixel counts: entry `(i, j)` is the number of pixels of true class `i`
/// predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Result<Self, MetricsError> {
        if classes == 0 {
            return Err(MetricsError::NotSquare);
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let c = rows.len();
        if c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(MetricsError::NotSquare);
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    /// Counts label/prediction pairs. Labels must be `< classes`.
    pub fn from_labels(
        classes: usize,
        truth: &[usize],
        predicted: &[usize],
    ) -> Result<Self, MetricsError> {
        let mut cm = Self::zeros(classes)?;
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p);
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    /// IoU of one class, or `None` when the class is neither present nor predicted.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let c = self.classes;
        let row: u64 = (0..c).map(|j| self.get(class, j)).sum();
        let col: u64 = (0..c).map(|j| self.get(j, class)).sum();
        let tp = self.get(class, class);
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

/// Mean intersection-over-union over classes with a non-empty union.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let (sum, n) = (0..cm.classes())
        .filter_map(|i| cm.class_iou(i))
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(MetricsError::AllClassesEmpty);
    }
    Ok(sum / n as f64)
}

/// Bitrate after compressing a source of `initial_kbps` by `compression_ratio`.
pub fn bitrate_for_ratio(initial_kbps: f64, compression_ratio: f64) -> Result<f64, MetricsError> {
    if !(compression_ratio > 0.0) {
        return Err(MetricsError::NonPositiveRatio(compression_ratio));
    }
    Ok(initial_kbps / compression_ratio)
}

/// Compression ratio of the encoder variant with `filters` output channels.
pub fn ratio_for_filters(filters: u32) -> Result<f64, MetricsError> {
    match filters {
        128 => Ok(6.0),
        64 => Ok(12.0),
        32 => Ok(24.0),
        16 => Ok(48.0),
        other => Err(MetricsError::UnknownFilterCount(other)),
    }
}

/// Ordered set of selectable bitrates in kbps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BitrateLadder {
    levels: Vec<f64>,
}

impl BitrateLadder {
    pub fn new(levels: Vec<f64>) -> Result<Self, MetricsError> {
        let increasing = levels.windows(2).all(|w| w[0] < w[1]);
        if levels.len() < 2 || !increasing || !(levels[0] > 0.0) || levels.iter().any(|v| !v.is_finite())
        {
            return Err(MetricsError::BadLadder);
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kbps(&self, level: usize) -> f64 {
        self.levels[level]
    }

    pub fn mbps(&self, level: usize) -> f64 {
        self.levels[level] / 1000.0
    }
}

impl Default for BitrateLadder {
    fn default() -> Self {
        Self {
            levels: vec![160.0, 320.0, 640.0, 1280.0],
        }
    }
}

impl TryFrom<Vec<f64>> for BitrateLadder {
    type Error = MetricsError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BitrateLadder> for Vec<f64> {
    fn from(l: BitrateLadder) -> Self {
        l.levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub bitrate_kbps: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableFile {
    codecs: BTreeMap<String, Vec<RatePoint>>,
}

/// Per-codec MIoU measured at discrete bitrates.
#[derive(Debug, Clone, PartialEq)]
pub struct RateAccuracyTable {
    codecs: BTreeMap<String, Vec<RatePoint>>,
}

const BUNDLED_TABLE: &str = include_str!("../data/rate_accuracy.toml");

impl RateAccuracyTable {
    pub fn new(codecs: BTreeMap<String, Vec<RatePoint>>) -> Result<Self, MetricsError> {
        for (name, points) in &codecs {
            let bad = |reason: &str| MetricsError::BadTable {
                codec: name.clone(),
                reason: reason.to_string(),
            };
            if points.is_empty() {
                return Err(bad("no entries"));
            }
            if points.iter().any(|p| !(0.0..=1.0).contains(&p.miou)) {
                return Err(bad("miou outside [0, 1]"));
            }
            for w in points.windows(2) {
                if !(w[0].bitrate_kbps < w[1].bitrate_kbps) {
                    return Err(bad("bitrates must be strictly increasing"));
                }
                if w[1].miou < w[0].miou {
                    return Err(bad("miou must be nondecreasing in bitrate"));
                }
            }
        }
        Ok(Self { codecs })
    }

    /// Single-codec table.
    pub fn single(codec: &str, points: &[(f64, f64)]) -> Result<Self, MetricsError> {
        let pts = points
            .iter()
            .map(|&(bitrate_kbps, miou)| RatePoint { bitrate_kbps, miou })
            .collect();
        Self::new(BTreeMap::from([(codec.to_string(), pts)]))
    }

    /// The shipped two-codec table (`abrvsc`, `traditional`).
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED_TABLE).expect("bundled table is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, MetricsError> {
        let file: TableFile = toml::from_str(text).map_err(|e| MetricsError::Parse(e.to_string()))?;
        Self::new(file.codecs)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MetricsError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&TableFile {
            codecs: self.codecs.clone(),
        })
        .expect("table serializes")
    }

    pub fn codecs(&self) -> impl Iterator<Item = &str> {
        self.codecs.keys().map(String::as_str)
    }

    pub fn points(&self, codec: &str) -> Result<&[RatePoint], MetricsError> {
        self.codecs
            .get(codec)
            .map(Vec::as_slice)
            .ok_or_else(|| MetricsError::UnknownCodec(codec.to_string()))
    }

    /// Exact-knot lookup; there is no interpolation between bitrates.
    pub fn miou_at(&self, codec: &str, bitrate_kbps: f64) -> Result<f64, MetricsError> {
        self.points(codec)?
            .iter()
            .find(|p| p.bitrate_kbps == bitrate_kbps)
            .map(|p| p.miou)
            .ok_or_else(|| MetricsError::UnknownBitrate {
                codec: codec.to_string(),
                bitrate_kbps,
            })
    }

    /// Checks that `codec` has an entry at every ladder level.
    pub fn covers(&self, codec: &str, ladder: &BitrateLadder) -> Result<(), MetricsError> {
        for &b in ladder.levels() {
            self.miou_at(codec, b)?;
        }
        Ok(())
    }
}
