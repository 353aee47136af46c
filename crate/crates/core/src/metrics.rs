//! Completion metrics: class-agnostic IoU, semantic mIoU, and range crops.
//!
//! Crop anchoring: the ego vehicle sits at the `x = 0` face of the grid
//! looking along +x. A crop spans `[0, extent_x)` forward, is centered on the
//! lateral mid-line in y, and covers `[0, extent_z)` in height. Extents
//! larger than the grid are clipped to it.

use std::io::Write;
use std::ops::Range;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{unchecked_index, GridDims, SemanticGrid, VoxelCoord, EMPTY_CLASS};
use crate::hardness::csv_err;

/// Counts indexed `[prediction][ground truth]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.num_classes + gt]
    }

    pub fn add(&mut self, pred: usize, gt: usize, n: u64) {
        self.counts[pred * self.num_classes + gt] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(c, g)).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(p, c)).sum::<u64>() - self.tp(c)
    }

    /// `None` when the class appears in neither prediction nor ground truth.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let tp = self.tp(c);
        let denom = tp + self.fp(c) + self.fn_(c);
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Collapse to `{0: empty, 1: occupied}`.
    pub fn binary(&self) -> ConfusionMatrix {
        let mut b = ConfusionMatrix::new(2);
        let occ = |c: usize| usize::from(c != EMPTY_CLASS as usize);
        for p in 0..self.num_classes {
            for g in 0..self.num_classes {
                b.add(occ(p), occ(g), self.get(p, g));
            }
        }
        b
    }

    pub fn accumulate(&mut self, pred: &SemanticGrid, gt: &SemanticGrid, crop: &RangeCrop) -> Result<()> {
        if !pred.dims().same_shape(gt.dims()) {
            return Err(Error::shape("prediction and ground truth grids differ in shape"));
        }
        if gt.num_classes() != self.num_classes {
            return Err(Error::shape(format!(
                "ground truth has {} classes, matrix has {}",
                gt.num_classes(),
                self.num_classes
            )));
        }
        let [xs, ys, zs] = crop.window(gt.dims())?;
        let d = gt.dims();
        for i in xs {
            for j in ys.clone() {
                for k in zs.clone() {
                    let v = unchecked_index(VoxelCoord::new(i, j, k), d);
                    let g = gt.labels()[v];
                    if g == gt.invalid_id() {
                        continue;
                    }
                    let p = pred.labels()[v];
                    if p as usize >= self.num_classes {
                        return Err(Error::config(format!("prediction {p} at voxel {v} is not a class")));
                    }
                    self.add(p as usize, g as usize, 1);
                }
            }
        }
        Ok(())
    }
}

pub fn accumulate(
    mut cm: ConfusionMatrix,
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    crop: &RangeCrop,
) -> Result<ConfusionMatrix> {
    cm.accumulate(pred, gt, crop)?;
    Ok(cm)
}

/// A mean over evaluable classes. `evaluated == 0` flags that nothing could
/// be scored; `value` is then 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Score {
    pub value: f64,
    pub evaluated: usize,
}

impl Score {
    pub fn is_defined(&self) -> bool {
        self.evaluated > 0
    }
}

pub fn miou(cm: &ConfusionMatrix, include_empty: bool) -> Score {
    let first = if include_empty { 0 } else { EMPTY_CLASS as usize + 1 };
    let ious: Vec<f64> = (first..cm.num_classes).filter_map(|c| cm.class_iou(c)).collect();
    if ious.is_empty() {
        return Score {
            value: 0.0,
            evaluated: 0,
        };
    }
    Score {
        value: ious.iter().sum::<f64>() / ious.len() as f64,
        evaluated: ious.len(),
    }
}

/// IoU of the occupied class of a binary (empty/occupied) matrix.
pub fn iou_geometry(cm_binary: &ConfusionMatrix) -> Result<Score> {
    if cm_binary.num_classes != 2 {
        return Err(Error::shape("geometry IoU expects a 2-class occupancy matrix"));
    }
    Ok(match cm_binary.class_iou(1) {
        Some(v) => Score { value: v, evaluated: 1 },
        None => Score {
            value: 0.0,
            evaluated: 0,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeName {
    S,
    M,
    L,
}

impl RangeName {
    pub fn as_str(self) -> &'static str {
        match self {
            RangeName::S => "S",
            RangeName::M => "M",
            RangeName::L => "L",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeCrop {
    pub name: RangeName,
    /// Meters along (forward x, lateral y, height z).
    pub extent: [f64; 3],
}

impl RangeCrop {
    pub const SHORT: RangeCrop = RangeCrop {
        name: RangeName::S,
        extent: [12.8, 12.8, 6.4],
    };
    pub const MIDDLE: RangeCrop = RangeCrop {
        name: RangeName::M,
        extent: [25.6, 25.6, 6.4],
    };
    pub const LONG: RangeCrop = RangeCrop {
        name: RangeName::L,
        extent: [51.2, 51.2, 6.4],
    };

    pub fn standard() -> [RangeCrop; 3] {
        [Self::SHORT, Self::MIDDLE, Self::LONG]
    }

    fn whole_voxels(&self, meters: f64, voxel_size: f64) -> Result<usize> {
        let v = meters / voxel_size;
        let r = v.round();
        if (v - r).abs() > 1e-6 || r < 1.0 {
            return Err(Error::config(format!(
                "range {}: {meters} m is not a whole number of {voxel_size} m voxels",
                self.name.as_str()
            )));
        }
        Ok(r as usize)
    }

    /// Voxel index window of this crop on `dims`.
    pub fn window(&self, dims: &GridDims) -> Result<[Range<usize>; 3]> {
        let fx = self.whole_voxels(self.extent[0], dims.voxel_size)?.min(dims.x);
        let ly = self.whole_voxels(self.extent[1], dims.voxel_size)?.min(dims.y);
        let hz = self.whole_voxels(self.extent[2], dims.voxel_size)?.min(dims.z);
        if (dims.y - ly) % 2 != 0 {
            return Err(Error::config(format!(
                "range {}: {ly} lateral voxels cannot be centered in {}",
                self.name.as_str(),
                dims.y
            )));
        }
        let y0 = (dims.y - ly) / 2;
        Ok([0..fx, y0..y0 + ly, 0..hz])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeMetrics {
    pub iou: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl RangeMetrics {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            iou: iou_geometry(&cm.binary())?.value,
            miou: miou(cm, false).value,
            per_class_iou: (0..cm.num_classes).map(|c| cm.class_iou(c)).collect(),
        })
    }
}

/// Metrics keyed by range, serialized in S, M, L order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub ranges: Vec<(RangeName, RangeMetrics)>,
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.ranges.len()))?;
        for (name, metrics) in &self.ranges {
            m.serialize_entry(name.as_str(), metrics)?;
        }
        m.end()
    }
}

impl MetricsReport {
    pub fn get(&self, name: RangeName) -> Option<&RangeMetrics> {
        self.ranges.iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Flat CSV: `range,iou,miou,class_0,...`; undefined class IoUs are blank.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let classes = self.ranges.first().map_or(0, |(_, m)| m.per_class_iou.len());
        let mut header = vec!["range".to_string(), "iou".into(), "miou".into()];
        header.extend((0..classes).map(|c| format!("class_{c}")));
        w.write_record(&header).map_err(csv_err)?;
        for (name, m) in &self.ranges {
            let mut row = vec![name.as_str().to_string(), m.iou.to_string(), m.miou.to_string()];
            row.extend(m.per_class_iou.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Confusion matrices per crop for a set of (prediction, ground truth) frames.
pub fn evaluate<'a>(
    frames: impl IntoIterator<Item = (&'a SemanticGrid, &'a SemanticGrid)>,
    num_classes: usize,
    crops: &[RangeCrop],
) -> Result<MetricsReport> {
    let mut cms: Vec<ConfusionMatrix> = crops.iter().map(|_| ConfusionMatrix::new(num_classes)).collect();
    for (pred, gt) in frames {
        for (cm, crop) in cms.iter_mut().zip(crops) {
            cm.accumulate(pred, gt, crop)?;
        }
    }
    Ok(MetricsReport {
        ranges: crops
            .iter()
            .zip(&cms)
            .map(|(crop, cm)| Ok((crop.name, RangeMetrics::from_matrix(cm)?)))
            .collect::<Result<_>>()?,
    })
}
