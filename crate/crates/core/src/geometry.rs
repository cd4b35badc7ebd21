//! Bounding boxes in pixel space and on the integer `[0, 100]` grid.
//!
//! Boxes are XYXY (top-left, bottom-right). Pixel boxes must have strictly
//! positive area; grid boxes may be degenerate, since model output can
//! produce them, but IoU against a degenerate box is a domain error.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::LocalLabel;

/// Upper bound of the normalized coordinate grid.
pub const GRID_MAX: u8 = 100;

/// Default IoU above which two same-label boxes count as duplicates.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box {0:?}: zero or negative area")]
    Degenerate([f64; 4]),
    #[error("box coordinate is negative or not finite: {0:?}")]
    InvalidCoordinate([f64; 4]),
    #[error("box {bbox:?} lies outside the {width}x{height} image")]
    OutOfBounds { bbox: [f64; 4], width: u32, height: u32 },
    #[error("grid box {0:?} is not ordered within [0, 100]")]
    InvalidGridBox([u8; 4]),
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("threshold {0} outside the open interval (0, 1)")]
    Threshold(f64),
}

/// Anything with axis-aligned XYXY extents.
pub trait Rect {
    /// `[x_min, y_min, x_max, y_max]`.
    fn xyxy(&self) -> [f64; 4];

    fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.xyxy();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }
}

/// A box in pixel coordinates with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl PixelBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let c = [x_min, y_min, x_max, y_max];
        if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GeometryError::InvalidCoordinate(c));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::Degenerate(c));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn within(&self, dims: ImageDims) -> bool {
        self.x_max <= f64::from(dims.width) && self.y_max <= f64::from(dims.height)
    }
}

impl Rect for PixelBox {
    fn xyxy(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for PixelBox {
    type Error = GeometryError;
    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        b.xyxy()
    }
}

/// A box on the integer `[0, 100]` grid. Ordered but possibly degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u8; 4]", into = "[u8; 4]")]
pub struct NormBox {
    x_min: u8,
    y_min: u8,
    x_max: u8,
    y_max: u8,
}

impl NormBox {
    pub fn new(x_min: u8, y_min: u8, x_max: u8, y_max: u8) -> Result<Self, GeometryError> {
        let ok = x_min <= x_max && y_min <= y_max && x_max <= GRID_MAX && y_max <= GRID_MAX;
        if !ok {
            return Err(GeometryError::InvalidGridBox([x_min, y_min, x_max, y_max]));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn coords(&self) -> [u8; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn is_degenerate(&self) -> bool {
        self.x_min == self.x_max || self.y_min == self.y_max
    }

    /// Integer area in grid cells.
    pub fn cells(&self) -> u32 {
        u32::from(self.x_max - self.x_min) * u32::from(self.y_max - self.y_min)
    }
}

impl Rect for NormBox {
    fn xyxy(&self) -> [f64; 4] {
        self.coords().map(f64::from)
    }
}

impl TryFrom<[u8; 4]> for NormBox {
    type Error = GeometryError;
    fn try_from(c: [u8; 4]) -> Result<Self, Self::Error> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<NormBox> for [u8; 4] {
    fn from(b: NormBox) -> Self {
        b.coords()
    }
}

/// A local finding: label plus grid box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub label: LocalLabel,
    #[serde(rename = "box")]
    pub bbox: NormBox,
}

impl Finding {
    pub fn new(label: LocalLabel, bbox: NormBox) -> Self {
        Self { label, bbox }
    }
}

/// Intersection over union of two boxes in the same coordinate space.
pub fn iou<B: Rect>(a: &B, b: &B) -> Result<f64, GeometryError> {
    for r in [a.xyxy(), b.xyxy()] {
        if !(r[0] < r[2] && r[1] < r[3]) {
            return Err(GeometryError::Degenerate(r));
        }
    }
    Ok(iou_unchecked(&a.xyxy(), &b.xyxy()))
}

/// IoU that scores degenerate boxes as zero overlap instead of failing.
pub fn iou_or_zero<B: Rect>(a: &B, b: &B) -> f64 {
    iou(a, b).unwrap_or(0.0)
}

fn iou_unchecked(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    if a == b {
        return 1.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// What to do with pixel boxes that extend past the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsMode {
    #[default]
    Reject,
    Clamp,
}

fn to_grid(coord: f64, extent: u32) -> u8 {
    // coord * 100 first: exact for integer pixels, so true .5 ties survive the division
    let scaled = (coord * 100.0 / f64::from(extent)).round();
    scaled.clamp(0.0, f64::from(GRID_MAX)) as u8
}

fn widen(lo: u8, hi: u8) -> (u8, u8) {
    if lo < hi {
        (lo, hi)
    } else if hi < GRID_MAX {
        (lo, hi + 1)
    } else {
        (GRID_MAX - 1, GRID_MAX)
    }
}

/// Map a pixel box onto the `[0, 100]` grid.
///
/// Each coordinate becomes `round(coord / extent * 100)` with halves rounded
/// away from zero. A box that collapses on an axis after rounding is widened
/// by one grid unit on that axis.
pub fn normalize_box(b: &PixelBox, dims: ImageDims, mode: BoundsMode) -> Result<NormBox, GeometryError> {
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    let mut c = b.xyxy();
    if !b.within(dims) {
        match mode {
            BoundsMode::Reject => {
                return Err(GeometryError::OutOfBounds { bbox: c, width: dims.width, height: dims.height })
            }
            BoundsMode::Clamp => {
                c = [c[0].min(w), c[1].min(h), c[2].min(w), c[3].min(h)];
            }
        }
    }
    let (x0, x1) = widen(to_grid(c[0], dims.width), to_grid(c[2], dims.width));
    let (y0, y1) = widen(to_grid(c[1], dims.height), to_grid(c[3], dims.height));
    NormBox::new(x0, y0, x1, y1)
}

/// Inverse of [`normalize_box`], up to rounding.
pub fn denormalize_box(n: &NormBox, dims: ImageDims) -> Result<PixelBox, GeometryError> {
    let [x0, y0, x1, y1] = n.xyxy();
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    PixelBox::new(x0 * w / 100.0, y0 * h / 100.0, x1 * w / 100.0, y1 * h / 100.0)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so roots stay stable across runs
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Collapse overlapping same-label findings to one representative each.
///
/// Findings are grouped per label into connected components of the relation
/// `IoU > threshold`. Each component keeps its medoid (largest summed IoU to
/// the other members), breaking ties by smaller area and then by coordinates.
/// Survivors are returned in input order.
pub fn dedup_findings(findings: &[Finding], threshold: f64) -> Result<Vec<Finding>, GeometryError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GeometryError::Threshold(threshold));
    }
    let n = findings.len();
    let mut sets = DisjointSet::new(n);
    let mut overlap = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            if findings[i].label != findings[j].label {
                continue;
            }
            let v = iou_or_zero(&findings[i].bbox, &findings[j].bbox);
            overlap[i * n + j] = v;
            overlap[j * n + i] = v;
            if v > threshold {
                sets.union(i, j);
            }
        }
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let root = sets.find(i);
        clusters[root].push(i);
    }

    let mut keep = vec![false; n];
    for members in clusters.iter().filter(|m| !m.is_empty()) {
        let score = |i: usize| members.iter().map(|&j| overlap[i * n + j]).sum::<f64>();
        let best = members
            .iter()
            .copied()
            .max_by(|&a, &b| {
                score(a)
                    .partial_cmp(&score(b))
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| findings[b].bbox.cells().cmp(&findings[a].bbox.cells()))
                    .then_with(|| findings[b].bbox.coords().cmp(&findings[a].bbox.coords()))
            })
            .expect("cluster is non-empty");
        keep[best] = true;
    }

    Ok(findings.iter().zip(keep).filter_map(|(f, k)| k.then_some(*f)).collect())
}
