//! Loss surfaces on the plane through three models.
//!
//! With `u = w2 − w1` and `v` the component of `w3 − w1` orthogonal to `u`,
//! the plane points are `P(x, y) = w1 + x·û + y·v̂`. In quantized mode each
//! point is passed through the per-layer weight quantizer before
//! evaluation, which makes the surface piecewise constant.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, Network};
use crate::quant::ModelQuantizer;
use crate::tensor::Tensor;

pub const GRID_SCHEMA_VERSION: u32 = 1;

/// Concatenate every weight tensor and bias, layer by layer.
pub fn flatten(net: &Network) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    for (w, b) in net.weights().iter().zip(net.biases()) {
        out.extend_from_slice(w.data());
        if let Some(b) = b {
            out.extend_from_slice(b.data());
        }
    }
    out
}

/// Inverse of `flatten` using `template` for shapes.
pub fn unflatten(template: &Network, flat: &[f64]) -> Result<Network> {
    if flat.len() != template.param_count() {
        return Err(Error::ShapeMismatch {
            context: "flattened parameter vector".into(),
            expected: vec![template.param_count()],
            actual: vec![flat.len()],
        });
    }
    let mut net = template.clone();
    let mut pos = 0;
    let mut take = |t: &mut Tensor| {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[pos..pos + n]);
        pos += n;
    };
    for i in 0..net.num_parameterized() {
        take(&mut net.weights_mut()[i]);
        if let Some(b) = net.biases_mut()[i].as_mut() {
            take(b);
        }
    }
    Ok(net)
}

/// Quantize the weight segments of a flattened vector; bias segments pass
/// through unchanged.
fn quantize_flat(template: &Network, flat: &mut [f64], quant: &ModelQuantizer) -> Result<()> {
    if quant.steps.len() != template.num_parameterized() {
        return Err(Error::InvalidArgument("quantizer does not match network".into()));
    }
    let mut pos = 0;
    for (i, (w, b)) in template.weights().iter().zip(template.biases()).enumerate() {
        let q = quant.layer(i);
        for v in &mut flat[pos..pos + w.len()] {
            *v = q.quantize(*v);
        }
        pos += w.len() + b.as_ref().map_or(0, Tensor::len);
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossPlane {
    origin: Vec<f64>,
    u_hat: Vec<f64>,
    v_hat: Vec<f64>,
    anchors: [(f64, f64); 3],
}

impl LossPlane {
    /// Orthonormal plane through three flattened weight vectors.
    pub fn from_vectors(w1: &[f64], w2: &[f64], w3: &[f64]) -> Result<Self> {
        if w1.len() != w2.len() || w1.len() != w3.len() || w1.is_empty() {
            return Err(Error::DegeneratePlane(format!(
                "vectors differ in dimension ({}, {}, {})",
                w1.len(),
                w2.len(),
                w3.len()
            )));
        }
        let u: Vec<f64> = w2.iter().zip(w1).map(|(a, b)| a - b).collect();
        let d3: Vec<f64> = w3.iter().zip(w1).map(|(a, b)| a - b).collect();
        let u_norm = norm(&u);
        if u_norm == 0.0 {
            return Err(Error::DegeneratePlane("w2 coincides with w1".into()));
        }
        let d3_norm = norm(&d3);
        if d3_norm == 0.0 {
            return Err(Error::DegeneratePlane("w3 coincides with w1".into()));
        }
        let u_hat: Vec<f64> = u.iter().map(|x| x / u_norm).collect();
        let coef = dot(&d3, &u) / (u_norm * u_norm);
        let mut v: Vec<f64> = d3.iter().zip(&u).map(|(d, u)| d - coef * u).collect();
        // second Gram-Schmidt pass for orthogonality at round-off level
        let resid = dot(&v, &u_hat);
        for (vi, ui) in v.iter_mut().zip(&u_hat) {
            *vi -= resid * ui;
        }
        let v_norm = norm(&v);
        if v_norm <= 1e-10 * d3_norm {
            return Err(Error::DegeneratePlane("w3 is collinear with w1 and w2".into()));
        }
        let v_hat: Vec<f64> = v.iter().map(|x| x / v_norm).collect();
        let anchors = [
            (0.0, 0.0),
            (u_norm, 0.0),
            (dot(&d3, &u_hat), dot(&d3, &v_hat)),
        ];
        Ok(Self {
            origin: w1.to_vec(),
            u_hat,
            v_hat,
            anchors,
        })
    }

    /// Plane through three networks of identical topology.
    pub fn from_networks(w1: &Network, w2: &Network, w3: &Network) -> Result<Self> {
        if w1.architecture() != w2.architecture() || w1.architecture() != w3.architecture() {
            return Err(Error::DegeneratePlane("networks differ in topology".into()));
        }
        Self::from_vectors(&flatten(w1), &flatten(w2), &flatten(w3))
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn u_hat(&self) -> &[f64] {
        &self.u_hat
    }

    pub fn v_hat(&self) -> &[f64] {
        &self.v_hat
    }

    /// Plane coordinates of w1, w2 and w3.
    pub fn anchors(&self) -> [(f64, f64); 3] {
        self.anchors
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn grid_point(&self, x: f64, y: f64) -> Vec<f64> {
        self.origin
            .iter()
            .zip(&self.u_hat)
            .zip(&self.v_hat)
            .map(|((o, u), v)| o + x * u + y * v)
            .collect()
    }

    /// Plane point with every weight segment quantized by `quant`.
    pub fn quantized_grid_point(
        &self,
        template: &Network,
        x: f64,
        y: f64,
        quant: &ModelQuantizer,
    ) -> Result<Vec<f64>> {
        let mut p = self.grid_point(x, y);
        if p.len() != template.param_count() {
            return Err(Error::ShapeMismatch {
                context: "plane dimension vs template network".into(),
                expected: vec![template.param_count()],
                actual: vec![p.len()],
            });
        }
        quantize_flat(template, &mut p, quant)?;
        Ok(p)
    }

    pub fn network_at(&self, template: &Network, x: f64, y: f64, mode: &SurfaceMode) -> Result<Network> {
        let flat = match mode {
            SurfaceMode::FullPrecision => self.grid_point(x, y),
            SurfaceMode::Quantized(q) => self.quantized_grid_point(template, x, y, q)?,
        };
        unflatten(template, &flat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceMode {
    FullPrecision,
    Quantized(ModelQuantizer),
}

impl SurfaceMode {
    pub fn name(&self) -> &'static str {
        match self {
            SurfaceMode::FullPrecision => "full_precision",
            SurfaceMode::Quantized(_) => "quantized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: (usize, usize),
}

pub const DEFAULT_MARGIN: f64 = 0.2;

impl GridSpec {
    /// Bounding box of the anchors widened by `margin` of its extent per side.
    pub fn around_anchors(plane: &LossPlane, margin: f64, resolution: (usize, usize)) -> Self {
        let a = plane.anchors();
        let span = |vals: [f64; 3]| {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pad = margin * (hi - lo);
            (lo - pad, hi + pad)
        };
        Self {
            x_range: span([a[0].0, a[1].0, a[2].0]),
            y_range: span([a[0].1, a[1].1, a[2].1]),
            resolution,
        }
    }
}

/// `n` evenly spaced values on `range` with each distinct anchor value
/// substituted for its nearest free grid value, so anchors are grid points.
fn axis(range: (f64, f64), n: usize, anchors: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::InvalidArgument(format!("empty range [{lo}, {hi}]")));
    }
    let mut distinct: Vec<f64> = Vec::new();
    for &a in anchors {
        if a < lo || a > hi {
            return Err(Error::InvalidArgument(format!(
                "anchor coordinate {a} outside [{lo}, {hi}]"
            )));
        }
        if !distinct.contains(&a) {
            distinct.push(a);
        }
    }
    if n < distinct.len().max(2) {
        return Err(Error::InvalidArgument(format!(
            "resolution {n} cannot hold {} anchor coordinates",
            distinct.len()
        )));
    }
    let mut xs: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let mut taken = vec![false; n];
    for a in distinct {
        let idx = (0..n)
            .filter(|&i| !taken[i])
            .min_by(|&i, &j| (xs[i] - a).abs().total_cmp(&(xs[j] - a).abs()))
            .unwrap();
        xs[idx] = a;
        taken[idx] = true;
    }
    xs.sort_by(f64::total_cmp);
    Ok(xs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub x: f64,
    pub y: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub mode: SurfaceMode,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major: `points[j * xs.len() + i]` is `(xs[i], ys[j])`.
    pub points: Vec<SurfacePoint>,
    pub anchors: [(f64, f64); 3],
    pub dataset_id: String,
    pub split: String,
}

impl SurfaceGrid {
    pub fn at(&self, x: f64, y: f64) -> Option<&SurfacePoint> {
        self.points.iter().find(|p| p.x == x && p.y == y)
    }
}

/// Evaluate loss and accuracy on every grid point. Points are computed in
/// parallel and stored in canonical row-major order.
pub fn evaluate_surface(
    plane: &LossPlane,
    template: &Network,
    ds: &Dataset,
    spec: &GridSpec,
    mode: &SurfaceMode,
) -> Result<SurfaceGrid> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if plane.dim() != template.param_count() {
        return Err(Error::ShapeMismatch {
            context: "plane dimension vs template network".into(),
            expected: vec![template.param_count()],
            actual: vec![plane.dim()],
        });
    }
    let (nx, ny) = spec.resolution;
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument("grid resolution must be >= 2 per axis".into()));
    }
    let a = plane.anchors();
    let xs = axis(spec.x_range, nx, &[a[0].0, a[1].0, a[2].0])?;
    let ys = axis(spec.y_range, ny, &[a[0].1, a[1].1, a[2].1])?;
    let coords: Vec<(f64, f64)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    let points = coords
        .par_iter()
        .map(|&(x, y)| {
            let net = plane.network_at(template, x, y, mode)?;
            let e = evaluate(&net, ds)?;
            Ok(SurfacePoint {
                x,
                y,
                loss: e.loss,
                accuracy: e.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurfaceGrid {
        mode: mode.clone(),
        xs,
        ys,
        points,
        anchors: a,
        dataset_id: ds.id().to_string(),
        split: "train".into(),
    })
}

/// Sidecar record written next to the CSV grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub schema_version: u32,
    pub mode: String,
    pub bits: Option<u32>,
    pub steps: Option<Vec<f64>>,
    pub anchors: [(f64, f64); 3],
    pub resolution: (usize, usize),
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub dataset_id: String,
    pub split: String,
}

pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Write `x,y,loss,accuracy` rows plus a JSON metadata sidecar.
pub fn export_grid(grid: &SurfaceGrid, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for p in &grid.points {
        w.serialize(p).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let (bits, steps) = match &grid.mode {
        SurfaceMode::FullPrecision => (None, None),
        SurfaceMode::Quantized(q) => (Some(q.bits), Some(q.steps.clone())),
    };
    let meta = GridMetadata {
        schema_version: GRID_SCHEMA_VERSION,
        mode: grid.mode.name().into(),
        bits,
        steps,
        anchors: grid.anchors,
        resolution: (grid.xs.len(), grid.ys.len()),
        x_range: (grid.xs[0], *grid.xs.last().unwrap()),
        y_range: (grid.ys[0], *grid.ys.last().unwrap()),
        dataset_id: grid.dataset_id.clone(),
        split: grid.split.clone(),
    };
    let meta_path = metadata_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta_path)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<(Vec<SurfacePoint>, GridMetadata)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let points = r
        .deserialize()
        .collect::<std::result::Result<Vec<SurfacePoint>, _>>()
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    let meta_path = metadata_path(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: GridMetadata =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&meta_path, e.to_string()))?;
    if meta.schema_version != GRID_SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion {
            found: meta.schema_version,
            supported: GRID_SCHEMA_VERSION,
        });
    }
    Ok((points, meta))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::malformed(path, format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_plane() {
        let p = LossPlane::from_vectors(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(p.u_hat(), &[1.0, 0.0]);
        assert_eq!(p.v_hat(), &[0.0, 1.0]);
        assert_eq!(p.anchors(), [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
    }

    #[test]
    fn degenerate_triples_rejected() {
        let w1 = [1.0, 2.0, 3.0];
        let w2 = [2.0, 2.5, 1.0];
        let w3: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + 2.0 * (b - a)).collect();
        let err = LossPlane::from_vectors(&w1, &w2, &w3).unwrap_err();
        assert!(err.to_string().contains("collinear"), "{err}");
        assert!(LossPlane::from_vectors(&w1, &w1, &w2).unwrap_err().to_string().contains("coincides"));
        assert!(LossPlane::from_vectors(&w1, &w2, &[1.0]).is_err());
    }

    #[test]
    fn grid_point_reproduces_anchors_and_midpoint() {
        let p = LossPlane::from_vectors(&[0.0, 0.0], &[2.0, 0.0], &[1.0, 3.0]).unwrap();
        assert_eq!(p.grid_point(0.0, 0.0), vec![0.0, 0.0]);
        let [_, (x2, _), (x3, y3)] = p.anchors();
        let w2 = p.grid_point(x2, 0.0);
        assert!((w2[0] - 2.0).abs() < 1e-12 && w2[1].abs() < 1e-12);
        // midpoint of the w2 and w3 anchors is the mean of w2 and w3
        let mid = p.grid_point((x2 + x3) / 2.0, y3 / 2.0);
        assert!((mid[0] - 1.5).abs() < 1e-12 && (mid[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn axis_contains_anchors_and_keeps_count() {
        let xs = axis((-0.5, 2.5), 7, &[0.0, 2.0, 0.3]).unwrap();
        assert_eq!(xs.len(), 7);
        for a in [0.0, 2.0, 0.3] {
            assert!(xs.contains(&a));
        }
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
        assert!(axis((0.0, 1.0), 2, &[0.0, 0.5, 1.0]).is_err());
        assert!(axis((0.0, 1.0), 5, &[2.0]).is_err());
    }
}
