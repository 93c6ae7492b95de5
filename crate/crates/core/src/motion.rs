//! Dense people flow between consecutive frames, the soft motion prior
//! derived from it, and color-wheel visualization.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{decode_header, Grid, Image, SegmentationMask};

/// Per-pixel displacement (pixels/frame) from the earlier frame to the later one.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Grid,
    pub v: Grid,
}

impl FlowField {
    pub const MAGIC: [u8; 4] = *b"FLO2";

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            u: Grid::zeros(width, height),
            v: Grid::zeros(width, height),
        }
    }

    pub fn new(u: Grid, v: Grid) -> Result<Self> {
        if !u.same_dims(&v) {
            return Err(Error::Shape(format!(
                "flow components differ: u {:?}, v {:?}",
                u.dims(),
                v.dims()
            )));
        }
        Ok(FlowField { u, v })
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        (self.u.get(x, y), self.v.get(x, y))
    }

    pub fn magnitude(&self) -> Grid {
        Grid::from_fn(self.width(), self.height(), |x, y| {
            let (u, v) = self.at(x, y);
            u.hypot(v)
        })
    }

    /// Mirror left-right; horizontal motion changes sign.
    pub fn flip_horizontal(&self) -> FlowField {
        FlowField {
            u: self.u.flip_horizontal().map(|v| -v),
            v: self.v.flip_horizontal(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<FlowField> {
        Ok(FlowField {
            u: self.u.crop(x0, y0, width, height)?,
            v: self.v.crop(x0, y0, width, height)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.u.values().len());
        out.extend_from_slice(&Self::MAGIC);
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for (&u, &v) in self.u.values().iter().zip(self.v.values()) {
            out.extend_from_slice(&(u as f32).to_le_bytes());
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (height, width, payload) = decode_header(&Self::MAGIC, "flow file", bytes)?;
        if payload.len() != height * width * 8 {
            return Err(Error::format(
                "flow file",
                format!("payload holds {} bytes, expected {}", payload.len(), height * width * 8),
            ));
        }
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for pair in payload.chunks_exact(8) {
            u.push(f32::from_le_bytes([pair[0], pair[1], pair[2], pair[3]]) as f64);
            v.push(f32::from_le_bytes([pair[4], pair[5], pair[6], pair[7]]) as f64);
        }
        FlowField::new(Grid::from_vec(width, height, u)?, Grid::from_vec(width, height, v)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowBackend {
    /// Pass-through of ground-truth flow supplied by the caller.
    Oracle,
    BlockMatching,
    /// Precomputed `FLO2` file.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowEstimatorSpec {
    pub backend: FlowBackend,
    pub block_size: usize,
    pub search_radius: usize,
    pub external_path: Option<PathBuf>,
}

impl Default for FlowEstimatorSpec {
    fn default() -> Self {
        FlowEstimatorSpec {
            backend: FlowBackend::BlockMatching,
            block_size: 5,
            search_radius: 4,
            external_path: None,
        }
    }
}

impl FlowEstimatorSpec {
    pub fn oracle() -> Self {
        FlowEstimatorSpec {
            backend: FlowBackend::Oracle,
            ..Default::default()
        }
    }

    pub fn block_matching(block_size: usize, search_radius: usize) -> Self {
        FlowEstimatorSpec {
            backend: FlowBackend::BlockMatching,
            block_size,
            search_radius,
            external_path: None,
        }
    }

    pub fn external(path: impl Into<PathBuf>) -> Self {
        FlowEstimatorSpec {
            backend: FlowBackend::External,
            external_path: Some(path.into()),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 3 || self.block_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "block_size must be odd and >= 3, got {}",
                self.block_size
            )));
        }
        if self.search_radius == 0 {
            return Err(Error::Config("search_radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Estimates flow from `prev` to `curr` (luminance grids).
///
/// `ground_truth` is only consulted by the oracle backend.
pub fn estimate_flow(
    prev: &Grid,
    curr: &Grid,
    spec: &FlowEstimatorSpec,
    ground_truth: Option<&FlowField>,
) -> Result<FlowField> {
    if !prev.same_dims(curr) {
        return Err(Error::Shape(format!(
            "frames differ in size: {:?} vs {:?}",
            prev.dims(),
            curr.dims()
        )));
    }
    let check_dims = |f: &FlowField, what: &str| -> Result<()> {
        if (f.width(), f.height()) != prev.dims() {
            return Err(Error::Shape(format!(
                "{what} flow is {}x{}, frames are {}x{}",
                f.height(),
                f.width(),
                prev.height(),
                prev.width()
            )));
        }
        Ok(())
    };
    match spec.backend {
        FlowBackend::Oracle => {
            let gt = ground_truth
                .ok_or_else(|| Error::Backend("oracle backend needs ground-truth flow for this frame pair".into()))?;
            check_dims(gt, "ground-truth")?;
            Ok(gt.clone())
        }
        FlowBackend::External => {
            let path = spec
                .external_path
                .as_ref()
                .ok_or_else(|| Error::Backend("external backend needs external_path".into()))?;
            if !path.exists() {
                return Err(Error::Backend(format!("external flow {} not found", path.display())));
            }
            let flow = FlowField::load(path)?;
            check_dims(&flow, "external")?;
            Ok(flow)
        }
        FlowBackend::BlockMatching => {
            spec.validate()?;
            Ok(block_matching(prev, curr, spec.block_size, spec.search_radius))
        }
    }
}

/// Integer-displacement block matching by mean absolute difference over
/// the in-frame part of each displaced block.
///
/// Ties go to the smaller displacement magnitude, then to the
/// lexicographically smaller `(u, v)`.
fn block_matching(prev: &Grid, curr: &Grid, block: usize, radius: usize) -> FlowField {
    let (w, h) = prev.dims();
    let r = radius as isize;
    let bx_n = w.div_ceil(block);
    let by_n = h.div_ceil(block);

    let best: Vec<(isize, isize)> = (0..bx_n * by_n)
        .into_par_iter()
        .map(|b| {
            let (x0, y0) = ((b % bx_n) * block, (b / bx_n) * block);
            let (x1, y1) = ((x0 + block).min(w), (y0 + block).min(h));
            let mut best: Option<(f64, isize, isize)> = None;
            for du in -r..=r {
                for dv in -r..=r {
                    let mut sad = 0.0;
                    let mut n = 0usize;
                    for y in y0..y1 {
                        let ty = y as isize + dv;
                        if ty < 0 || ty >= h as isize {
                            continue;
                        }
                        for x in x0..x1 {
                            let tx = x as isize + du;
                            if tx < 0 || tx >= w as isize {
                                continue;
                            }
                            sad += (prev.get(x, y) - curr.get(tx as usize, ty as usize)).abs();
                            n += 1;
                        }
                    }
                    if n == 0 {
                        continue;
                    }
                    let cost = sad / n as f64;
                    let better = match best {
                        None => true,
                        Some((bc, bu, bv)) => {
                            cost < bc || (cost == bc && (du * du + dv * dv, du, dv) < (bu * bu + bv * bv, bu, bv))
                        }
                    };
                    if better {
                        best = Some((cost, du, dv));
                    }
                }
            }
            best.map(|(_, u, v)| (u, v)).unwrap_or((0, 0))
        })
        .collect();

    let mut flow = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = best[(y / block) * bx_n + x / block];
            flow.u.set(x, y, u as f64);
            flow.v.set(x, y, v as f64);
        }
    }
    flow
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorParams {
    /// Magnitude (pixels/frame) mapped to 0.5.
    pub tau: f64,
    pub tau_scale: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            tau: 1.0,
            tau_scale: 0.25,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft "moving person" prior `sigmoid((|flow| - tau) / tau_scale)`,
/// kept strictly inside (0, 1).
pub fn flow_magnitude_prior(flow: &FlowField, params: &PriorParams) -> Result<SegmentationMask> {
    if !(params.tau > 0.0 && params.tau_scale > 0.0) {
        return Err(Error::Config(format!(
            "prior needs tau > 0 and tau_scale > 0, got {} / {}",
            params.tau, params.tau_scale
        )));
    }
    let lo = f64::EPSILON;
    let hi = 1.0 - f64::EPSILON;
    Ok(SegmentationMask(
        flow.magnitude()
            .map(|m| sigmoid((m - params.tau) / params.tau_scale).clamp(lo, hi)),
    ))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Direction hue in degrees, `[0, 360)`.
pub fn flow_hue(u: f64, v: f64) -> f64 {
    v.atan2(u).to_degrees().rem_euclid(360.0)
}

/// Color-wheel rendering: hue from direction, saturation from magnitude
/// relative to the 95th-percentile magnitude. Zero flow is white.
pub fn flow_color_encode(flow: &FlowField) -> Image {
    let mag = flow.magnitude();
    let mut sorted: Vec<f64> = mag.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut norm = if sorted.is_empty() {
        0.0
    } else {
        sorted[((sorted.len() - 1) as f64 * 0.95).round() as usize]
    };
    if norm <= 0.0 {
        norm = sorted.last().copied().unwrap_or(0.0);
    }
    let (w, h) = (flow.width(), flow.height());
    let mut channels = vec![Grid::filled(w, h, 1.0); 3];
    if norm > 0.0 {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.at(x, y);
                let s = (mag.get(x, y) / norm).min(1.0);
                let rgb = hsv_to_rgb(flow_hue(u, v), s, 1.0);
                for (c, val) in channels.iter_mut().zip(rgb) {
                    c.set(x, y, val);
                }
            }
        }
    }
    Image { channels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize, seed: u64) -> Grid {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Grid::from_fn(w, h, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 40) as f64 / (1u64 << 24) as f64
        })
    }

    #[test]
    fn self_flow_is_zero() {
        let img = texture(32, 24, 3);
        let f = estimate_flow(&img, &img, &FlowEstimatorSpec::block_matching(5, 3), None).unwrap();
        assert!(f.u.values().iter().chain(f.v.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn flat_frames_tie_break_to_zero() {
        let img = Grid::filled(16, 16, 0.4);
        let f = estimate_flow(&img, &img, &FlowEstimatorSpec::block_matching(3, 2), None).unwrap();
        assert_eq!(f.u.sum(), 0.0);
        assert_eq!(f.v.sum(), 0.0);
    }

    #[test]
    fn recovers_right_shift() {
        let base = texture(40, 40, 11);
        let shifted = Grid::from_fn(40, 40, |x, y| if x >= 2 { base.get(x - 2, y) } else { 0.5 });
        let f = estimate_flow(&base, &shifted, &FlowEstimatorSpec::block_matching(5, 3), None).unwrap();
        for y in 5..35 {
            for x in 5..35 {
                assert_eq!(f.at(x, y), (2.0, 0.0), "at ({x},{y})");
            }
        }
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let a = Grid::zeros(8, 8);
        let b = Grid::zeros(8, 9);
        assert!(estimate_flow(&a, &b, &FlowEstimatorSpec::default(), None).is_err());
    }

    #[test]
    fn oracle_passes_through() {
        let a = Grid::zeros(4, 3);
        let gt = FlowField::new(Grid::filled(4, 3, 1.5), Grid::filled(4, 3, -0.5)).unwrap();
        let f = estimate_flow(&a, &a, &FlowEstimatorSpec::oracle(), Some(&gt)).unwrap();
        assert_eq!(f, gt);
        assert!(estimate_flow(&a, &a, &FlowEstimatorSpec::oracle(), None).is_err());
    }

    #[test]
    fn external_backend_errors() {
        let a = Grid::zeros(4, 3);
        let spec = FlowEstimatorSpec::external("/nonexistent/flow.flo2");
        assert!(matches!(estimate_flow(&a, &a, &spec, None), Err(Error::Backend(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo2");
        FlowField::zeros(5, 3).save(&path).unwrap();
        let spec = FlowEstimatorSpec::external(&path);
        assert!(matches!(estimate_flow(&a, &a, &spec, None), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_block_spec() {
        assert!(FlowEstimatorSpec::block_matching(4, 2).validate().is_err());
        assert!(FlowEstimatorSpec::block_matching(1, 2).validate().is_err());
        assert!(FlowEstimatorSpec::block_matching(3, 0).validate().is_err());
    }

    #[test]
    fn prior_values() {
        let p = PriorParams::default();
        let zero = flow_magnitude_prior(&FlowField::zeros(3, 3), &p).unwrap();
        let expected = 1.0 / (1.0 + 4f64.exp());
        assert!(zero.values().iter().all(|&v| (v - expected).abs() < 1e-15));
        assert!((expected - 0.017986).abs() < 1e-6);

        let at_tau = FlowField::new(Grid::filled(2, 2, 0.6), Grid::filled(2, 2, 0.8)).unwrap();
        let m = flow_magnitude_prior(&at_tau, &p).unwrap();
        assert!(m.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));

        let huge = FlowField::new(Grid::filled(1, 1, 1e3), Grid::zeros(1, 1)).unwrap();
        let m = flow_magnitude_prior(&huge, &p).unwrap();
        assert!(m.get(0, 0) < 1.0);
    }

    #[test]
    fn flip_negates_u() {
        let u = Grid::from_fn(3, 3, |x, y| (x + 3 * y) as f64);
        let v = Grid::from_fn(3, 3, |x, y| (10 + x + 3 * y) as f64);
        let f = FlowField::new(u, v).unwrap().flip_horizontal();
        // u'(x) = -u(W-1-x), v'(x) = v(W-1-x)
        assert_eq!(f.u.values(), &[-2.0, -1.0, -0.0, -5.0, -4.0, -3.0, -8.0, -7.0, -6.0]);
        assert_eq!(f.v.values(), &[12.0, 11.0, 10.0, 15.0, 14.0, 13.0, 18.0, 17.0, 16.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_color_encode(&FlowField::zeros(4, 4));
        assert!(img.channels.iter().all(|c| c.values().iter().all(|&v| v == 1.0)));
    }
}
