//! Head annotations and the ground truth derived from them: density maps
//! built from per-head normalized Gaussians and binary person-region masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityMap, Grid, SegmentationMask};

/// Annotated head center in pixel coordinates (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct HeadPoint {
    pub x: f64,
    pub y: f64,
}

impl HeadPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        HeadPoint { x, y }
    }

    pub fn distance(&self, other: &HeadPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x < width as f64
            && self.y < height as f64
    }
}

impl From<[f64; 2]> for HeadPoint {
    fn from([x, y]: [f64; 2]) -> Self {
        HeadPoint { x, y }
    }
}

impl From<HeadPoint> for [f64; 2] {
    fn from(p: HeadPoint) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub image_path: String,
    pub heads: Vec<HeadPoint>,
}

impl FrameAnnotation {
    pub fn new(frame_index: usize, image_path: impl Into<String>, heads: Vec<HeadPoint>) -> Self {
        FrameAnnotation {
            frame_index,
            image_path: image_path.into(),
            heads,
        }
    }

    pub fn count(&self) -> usize {
        self.heads.len()
    }

    /// Rejects the first head outside `[0, width) x [0, height)`.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for (i, h) in self.heads.iter().enumerate() {
            if !h.in_bounds(width, height) {
                return Err(Error::Annotation {
                    frame: self.frame_index,
                    message: format!("head {i} at ({}, {}) lies outside the {width}x{height} frame", h.x, h.y),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub frames: Vec<FrameAnnotation>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClip {
    clip_id: String,
    width: usize,
    height: usize,
    fps: f64,
    frames: Vec<serde_json::Value>,
}

impl ClipAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "clip {} has zero-sized frames ({}x{})",
                self.clip_id, self.width, self.height
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("clip {} has fps {}", self.clip_id, self.fps)));
        }
        let mut prev: Option<usize> = None;
        for f in &self.frames {
            if let Some(p) = prev {
                if f.frame_index <= p {
                    return Err(Error::Annotation {
                        frame: f.frame_index,
                        message: format!(
                            "frame_index {} is not strictly after {p} (indices must be unique and ordered)",
                            f.frame_index
                        ),
                    });
                }
            }
            prev = Some(f.frame_index);
            f.check_bounds(self.width, self.height)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawClip = serde_json::from_str(text)?;
        let mut frames = Vec::with_capacity(raw.frames.len());
        for (pos, value) in raw.frames.into_iter().enumerate() {
            let frame_no = value
                .get("frame_index")
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .unwrap_or(pos);
            let frame: FrameAnnotation = serde_json::from_value(value).map_err(|e| Error::Annotation {
                frame: frame_no,
                message: e.to_string(),
            })?;
            frames.push(frame);
        }
        let clip = ClipAnnotation {
            clip_id: raw.clip_id,
            width: raw.width,
            height: raw.height,
            fps: raw.fps,
            frames,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation serialization is infallible")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    Adaptive,
    Fixed,
}

/// Gaussian kernel settings for density ground truth.
///
/// In adaptive mode each head gets `sigma = beta * mean distance to its k
/// nearest neighbours`; heads with no neighbour use `fallback_sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub mode: KernelMode,
    pub sigma: f64,
    pub beta: f64,
    pub k: usize,
    pub fallback_sigma: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::adaptive(0.3, 3)
    }
}

impl KernelSpec {
    pub const DEFAULT_FALLBACK_SIGMA: f64 = 5.0;

    pub fn fixed(sigma: f64) -> Self {
        KernelSpec {
            mode: KernelMode::Fixed,
            sigma,
            beta: 0.3,
            k: 3,
            fallback_sigma: Self::DEFAULT_FALLBACK_SIGMA,
        }
    }

    pub fn adaptive(beta: f64, k: usize) -> Self {
        KernelSpec {
            mode: KernelMode::Adaptive,
            sigma: 5.0,
            beta,
            k,
            fallback_sigma: Self::DEFAULT_FALLBACK_SIGMA,
        }
    }

    /// Mall setting (geometry-adaptive, beta 0.3, k 3).
    pub fn mall() -> Self {
        Self::adaptive(0.3, 3)
    }

    /// UCSD setting (fixed sigma 4).
    pub fn ucsd() -> Self {
        Self::fixed(4.0)
    }

    /// Adaptive UCSD variant (beta 0.3, k 4).
    pub fn ucsd_adaptive() -> Self {
        Self::adaptive(0.3, 4)
    }

    /// High-resolution drone footage setting (fixed sigma 5).
    pub fn vidcrowd() -> Self {
        Self::fixed(5.0)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.sigma) {
            return Err(Error::Config(format!("kernel sigma must be > 0, got {}", self.sigma)));
        }
        if !pos(self.beta) {
            return Err(Error::Config(format!("kernel beta must be > 0, got {}", self.beta)));
        }
        if self.k == 0 {
            return Err(Error::Config("kernel k must be >= 1".into()));
        }
        if !pos(self.fallback_sigma) {
            return Err(Error::Config(format!(
                "kernel fallback_sigma must be > 0, got {}",
                self.fallback_sigma
            )));
        }
        Ok(())
    }

    /// Per-head standard deviations for a frame.
    pub fn sigmas(&self, heads: &[HeadPoint]) -> Vec<f64> {
        match self.mode {
            KernelMode::Fixed => vec![self.sigma; heads.len()],
            KernelMode::Adaptive => knn_mean_distance(heads, self.k)
                .into_iter()
                .map(|d| match d {
                    Some(d) if d > 0.0 => self.beta * d,
                    _ => self.fallback_sigma,
                })
                .collect(),
        }
    }
}

/// Mean distance from each head to its `k` nearest other heads.
///
/// With fewer than `k` other heads the mean runs over all of them; a head
/// with no other heads yields `None`.
pub fn knn_mean_distance(heads: &[HeadPoint], k: usize) -> Vec<Option<f64>> {
    let mut dists = Vec::with_capacity(heads.len().saturating_sub(1));
    heads
        .iter()
        .enumerate()
        .map(|(i, h)| {
            dists.clear();
            dists.extend(
                heads
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, o)| h.distance(o)),
            );
            if dists.is_empty() || k == 0 {
                return None;
            }
            let take = k.min(dists.len());
            if take < dists.len() {
                dists.select_nth_unstable_by(take - 1, f64::total_cmp);
            }
            Some(dists[..take].iter().sum::<f64>() / take as f64)
        })
        .collect()
}

/// Inclusive pixel range `[lo, hi]` covered by `center +- radius`, clipped to `[0, len)`.
fn support(center: f64, radius: f64, len: usize) -> Option<(usize, usize)> {
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(len as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Adds one head's truncated, renormalized Gaussian to `map`.
fn splat_head(map: &mut Grid, head: &HeadPoint, sigma: f64) {
    let (w, h) = map.dims();
    let reach = 3.0 * sigma;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let weight = |px: usize, py: usize| {
        let (dx, dy) = (px as f64 - head.x, py as f64 - head.y);
        (-(dx * dx + dy * dy) * inv2s2).exp()
    };

    let mut mass = 0.0;
    let ranges = support(head.x, reach, w).zip(support(head.y, reach, h));
    if let Some(((x0, x1), (y0, y1))) = ranges {
        for py in y0..=y1 {
            for px in x0..=x1 {
                mass += weight(px, py);
            }
        }
        if mass > 0.0 && mass.is_finite() {
            for py in y0..=y1 {
                for px in x0..=x1 {
                    map.add(px, py, weight(px, py) / mass);
                }
            }
            return;
        }
    }
    // Kernel narrower than a pixel: all mass on the nearest pixel.
    let px = (head.x.round() as usize).min(w - 1);
    let py = (head.y.round() as usize).min(h - 1);
    map.add(px, py, 1.0);
}

pub fn render_density(frame: &FrameAnnotation, spec: &KernelSpec, width: usize, height: usize) -> Result<DensityMap> {
    spec.validate()?;
    frame.check_bounds(width, height)?;
    let mut map = Grid::zeros(width, height);
    for (head, sigma) in frame.heads.iter().zip(spec.sigmas(&frame.heads)) {
        splat_head(&mut map, head, sigma);
    }
    Ok(DensityMap(map))
}

/// Union of discs of `radius` pixels around each head.
pub fn render_segmentation(
    frame: &FrameAnnotation,
    radius: f64,
    width: usize,
    height: usize,
) -> Result<SegmentationMask> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Config(format!("segmentation radius must be > 0, got {radius}")));
    }
    frame.check_bounds(width, height)?;
    let mut mask = Grid::zeros(width, height);
    let r2 = radius * radius;
    for head in &frame.heads {
        let Some(((x0, x1), (y0, y1))) = support(head.x, radius, width).zip(support(head.y, radius, height)) else {
            continue;
        };
        for py in y0..=y1 {
            for px in x0..=x1 {
                let (dx, dy) = (px as f64 - head.x, py as f64 - head.y);
                if dx * dx + dy * dy <= r2 {
                    mask.set(px, py, 1.0);
                }
            }
        }
    }
    Ok(SegmentationMask(mask))
}

pub fn count_from_density(map: &DensityMap) -> f64 {
    map.sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(heads: &[(f64, f64)]) -> FrameAnnotation {
        FrameAnnotation::new(
            0,
            "frames/000000.png",
            heads.iter().map(|&(x, y)| HeadPoint::new(x, y)).collect(),
        )
    }

    #[test]
    fn knn_hand_example() {
        let heads = frame(&[(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)]).heads;
        let d = knn_mean_distance(&heads, 2);
        // (0,0): neighbours at 3 and 4; (3,0): 3 and 5; (0,4): 4 and 5
        assert_eq!(d[0], Some(3.5));
        assert_eq!(d[1], Some(4.0));
        assert_eq!(d[2], Some(4.5));
    }

    #[test]
    fn knn_lone_head_has_no_neighbor() {
        assert_eq!(knn_mean_distance(&[HeadPoint::new(5.0, 5.0)], 3), vec![None]);
        assert!(knn_mean_distance(&[], 3).is_empty());
    }

    #[test]
    fn knn_averages_over_available_neighbors() {
        let heads = frame(&[(0.0, 0.0), (6.0, 8.0)]).heads;
        assert_eq!(knn_mean_distance(&heads, 4), vec![Some(10.0), Some(10.0)]);
    }

    #[test]
    fn empty_frame_renders_zero() {
        let d = render_density(&frame(&[]), &KernelSpec::fixed(4.0), 16, 16).unwrap();
        assert_eq!(d.sum(), 0.0);
        let m = render_segmentation(&frame(&[]), 3.0, 16, 16).unwrap();
        assert_eq!(m.sum(), 0.0);
    }

    #[test]
    fn centered_head_has_unit_mass() {
        let d = render_density(&frame(&[(32.0, 32.0)]), &KernelSpec::fixed(5.0), 64, 64).unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-6);
        assert!(d.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn corner_head_keeps_unit_mass() {
        let d = render_density(&frame(&[(0.0, 63.9)]), &KernelSpec::fixed(5.0), 64, 64).unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tiny_adaptive_sigma_falls_back_to_nearest_pixel() {
        let f = frame(&[(10.2, 10.0), (10.2001, 10.0)]);
        let d = render_density(&f, &KernelSpec::adaptive(0.3, 3), 32, 32).unwrap();
        assert!((d.sum() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn head_on_right_edge_is_rejected() {
        let f = frame(&[(1.0, 1.0), (16.0, 3.0)]);
        let err = render_density(&f, &KernelSpec::fixed(4.0), 16, 16).unwrap_err();
        assert!(err.to_string().contains("head 1"), "{err}");
    }

    #[test]
    fn invalid_kernel_spec() {
        let mut s = KernelSpec::fixed(0.0);
        assert!(s.validate().is_err());
        s = KernelSpec::adaptive(0.3, 0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn overlapping_discs_union_is_smaller() {
        let single = render_segmentation(&frame(&[(10.0, 10.0)]), 3.0, 32, 32).unwrap().sum();
        let pair = render_segmentation(&frame(&[(10.0, 10.0), (12.0, 10.0)]), 3.0, 32, 32)
            .unwrap()
            .sum();
        assert!(pair < 2.0 * single);
        assert!(pair > single);
    }

    #[test]
    fn count_is_linear() {
        let d = render_density(&frame(&[(5.0, 5.0), (9.0, 2.0)]), &KernelSpec::fixed(2.0), 16, 16).unwrap();
        let doubled = DensityMap(d.scaled(2.0));
        assert_eq!(count_from_density(&doubled), 2.0 * count_from_density(&d));
        assert_eq!(count_from_density(&DensityMap::zeros(4, 4)), 0.0);
    }

    #[test]
    fn json_rejects_out_of_bounds_head_naming_frame() {
        let text = r#"{"clip_id":"c","width":8,"height":8,"fps":25,
            "frames":[{"frame_index":0,"image_path":"a.png","heads":[[8,1]]}]}"#;
        let err = ClipAnnotation::from_json(text).unwrap_err();
        assert!(matches!(err, Error::Annotation { frame: 0, .. }), "{err}");
    }

    #[test]
    fn json_missing_field_names_frame() {
        let text = r#"{"clip_id":"c","width":8,"height":8,"fps":25,
            "frames":[{"frame_index":0,"image_path":"a.png","heads":[]},
                      {"frame_index":3,"heads":[]}]}"#;
        let err = ClipAnnotation::from_json(text).unwrap_err();
        assert!(matches!(err, Error::Annotation { frame: 3, .. }), "{err}");
        assert!(err.to_string().contains("image_path"));
    }

    #[test]
    fn json_rejects_unordered_frames() {
        let text = r#"{"clip_id":"c","width":8,"height":8,"fps":25,
            "frames":[{"frame_index":1,"image_path":"a.png","heads":[]},
                      {"frame_index":1,"image_path":"b.png","heads":[]}]}"#;
        assert!(ClipAnnotation::from_json(text).is_err());
    }

    #[test]
    fn json_minimal_clip() {
        let text = r#"{"clip_id":"c","width":8,"height":6,"fps":25,
            "frames":[{"frame_index":0,"image_path":"a.png","heads":[]}]}"#;
        let clip = ClipAnnotation::from_json(text).unwrap();
        assert_eq!(clip.frames.len(), 1);
        assert!(clip.frames[0].heads.is_empty());
        assert_eq!(ClipAnnotation::from_json(&clip.to_json()).unwrap(), clip);
    }
}
