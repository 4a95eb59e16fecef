//! Ground-truth generation: Jacobi fields and shape operators of geodesic
//! spheres along geodesics, conjugate points, the Riccati cross-check, and
//! synthesis of wavefront datasets and spherical-surface families.

use crate::error::{Error, Result};
use crate::geodesics::{
    geodesic_endpoint, shoot_geodesic, shoot_with_frame, GeodesicPath,
};
use crate::manifold::{ChartBox, Metric};
use crate::ode::rk4_step;
use crate::series::{MatrixSeries, UniformGrid};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Relative determinant threshold that marks `t` as conjugate to `r`.
pub const CONJUGATE_DET_EPS: f64 = 1e-8;
/// Riccati solutions beyond this norm are treated as a blow-up.
pub const RICCATI_BLOWUP: f64 = 1e8;

/// Curvature coefficients along a path, evaluated exactly on the nodes and
/// the midpoints so that RK4 steps of size `dr` need no interpolation.
#[derive(Debug, Clone)]
pub struct CurvatureTrack {
    pub series: MatrixSeries,
}

impl CurvatureTrack {
    pub fn new<M: Metric + ?Sized>(m: &M, path: &GeodesicPath) -> Result<Self> {
        let dr = path.r_grid.step;
        let len = 2 * path.r_grid.len - 1;
        let grid = UniformGrid::new(0.0, 0.5 * dr, len)?;
        let mut values = Vec::with_capacity(len);
        for k in 0..len {
            let v = if k % 2 == 0 {
                let i = k / 2;
                crate::geodesics::curvature_coeffs_at(
                    m,
                    &path.points[i],
                    &path.velocities[i],
                    &path.frames[i],
                )?
            } else {
                path.curvature_at(m, grid.node(k))?
            };
            values.push(v);
        }
        Ok(CurvatureTrack {
            series: MatrixSeries::new(grid, values)?,
        })
    }

    pub fn from_series(series: MatrixSeries) -> Self {
        CurvatureTrack { series }
    }

    pub fn at(&self, r: f64) -> DMatrix<f64> {
        let g = &self.series.grid;
        let p = g.position(r);
        let k = p.round();
        if (p - k).abs() < 1e-9 && k >= 0.0 && (k as usize) < g.len {
            return self.series.values[k as usize].clone();
        }
        let clamped = r.clamp(g.start, g.end());
        self.series.eval(clamped).expect("clamped into the grid")
    }

    pub fn r_max(&self) -> f64 {
        self.series.grid.end()
    }

    /// Node spacing of the underlying path.
    pub fn dr(&self) -> f64 {
        2.0 * self.series.grid.step
    }
}

/// Jacobi state `(j, ∂_r j)`.
pub type JacobiState = (DMatrix<f64>, DMatrix<f64>);

/// Integrates `j'' + 𝐫(r) j = 0` from `r0` to `r1` with RK4 steps aligned
/// to the node spacing `dr`; `visit` sees the state at every node passed.
pub fn jacobi_propagate<C, V>(
    curv: &C,
    dr: f64,
    r0: f64,
    state: JacobiState,
    r1: f64,
    mut visit: V,
) -> Result<JacobiState>
where
    C: Fn(f64) -> DMatrix<f64>,
    V: FnMut(usize, &JacobiState),
{
    let mut rhs = |r: f64, y: &JacobiState| -> Result<JacobiState> {
        let c = curv(r);
        Ok((y.1.clone(), -(c * &y.0)))
    };
    let dir = if r1 >= r0 { 1.0 } else { -1.0 };
    let mut r = r0;
    let mut y = state;
    let pos = r0 / dr;
    if (pos - pos.round()).abs() < 1e-9 {
        visit(pos.round() as usize, &y);
    }
    while (r1 - r) * dir > 1e-12 * dr.max(1.0) {
        let p = r / dr;
        let next_node = if (p - p.round()).abs() < 1e-9 {
            p.round() + dir
        } else if dir > 0.0 {
            p.ceil()
        } else {
            p.floor()
        };
        let mut target = next_node * dr;
        let mut at_node = true;
        if (r1 - target) * dir < 0.0 {
            target = r1;
            let q = r1 / dr;
            at_node = (q - q.round()).abs() < 1e-9;
        }
        y = rk4_step(&mut rhs, r, &y, target - r)?;
        r = target;
        if at_node {
            visit((r / dr).round() as usize, &y);
        }
    }
    Ok(y)
}

/// Jacobi matrix of the point source at `t_center` on every path node.
#[derive(Debug, Clone)]
pub struct JacobiMatrix {
    pub r_grid: UniformGrid,
    pub t_center: f64,
    pub j: Vec<DMatrix<f64>>,
    pub dj: Vec<DMatrix<f64>>,
}

/// Point-source Jacobi matrix with `j(t_center) = 0`, `∂_r j(t_center) = −I`.
pub fn point_source_jacobi<M: Metric + ?Sized>(
    m: &M,
    path: &GeodesicPath,
    t_center: f64,
) -> Result<JacobiMatrix> {
    let track = CurvatureTrack::new(m, path)?;
    jacobi_from_track(&track, path.r_grid, t_center)
}

pub fn jacobi_from_track(track: &CurvatureTrack, r_grid: UniformGrid, t_center: f64) -> Result<JacobiMatrix> {
    if !r_grid.contains(t_center) {
        return Err(Error::OutOfWindow { r: t_center });
    }
    let k = track.series.values[0].nrows();
    let dr = r_grid.step;
    let mut j = vec![DMatrix::zeros(k, k); r_grid.len];
    let mut dj = vec![DMatrix::zeros(k, k); r_grid.len];
    let start: JacobiState = (DMatrix::zeros(k, k), -DMatrix::identity(k, k));
    let curv = |r: f64| track.at(r);
    let mut store = |i: usize, s: &JacobiState| {
        if i < j.len() {
            j[i] = s.0.clone();
            dj[i] = s.1.clone();
        }
    };
    jacobi_propagate(&curv, dr, t_center, start.clone(), 0.0, &mut store)?;
    jacobi_propagate(&curv, dr, t_center, start, r_grid.end(), &mut store)?;
    Ok(JacobiMatrix {
        r_grid,
        t_center,
        j,
        dj,
    })
}

/// `(j(0), ∂_r j(0))` of the point source at `t_center`.
pub fn point_source_at_start(track: &CurvatureTrack, t_center: f64) -> Result<JacobiState> {
    let k = track.series.values[0].nrows();
    let curv = |r: f64| track.at(r);
    jacobi_propagate(
        &curv,
        track.dr(),
        t_center,
        (DMatrix::zeros(k, k), -DMatrix::identity(k, k)),
        0.0,
        |_, _| {},
    )
}

/// Shape operator of a geodesic sphere and its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeData {
    pub r: f64,
    pub t: f64,
    pub s: DMatrix<f64>,
    pub k: Option<DMatrix<f64>>,
}

/// `S = −∂_r j · j⁻¹` from a Jacobi state, rejecting states with
/// `|det j| < ε (t − r)^{n−1}`.
pub fn shape_from_state(state: &JacobiState, r: f64, t: f64) -> Result<ShapeData> {
    let (j, dj) = state;
    let k = j.nrows();
    let det = j.determinant();
    if !(det.abs() >= CONJUGATE_DET_EPS * (t - r).abs().powi(k as i32)) {
        return Err(Error::ConjugatePoint { r });
    }
    let inv = j.clone().try_inverse().ok_or(Error::ConjugatePoint { r })?;
    let s = -(dj * inv);
    let kmat = s.clone().try_inverse();
    Ok(ShapeData { r, t, s, k: kmat })
}

/// Shape operator at a node (or, off-grid, from cubic interpolation of `j`).
pub fn shape_from_jacobi(jm: &JacobiMatrix, r: f64) -> Result<ShapeData> {
    if !jm.r_grid.contains(r) {
        return Err(Error::OutOfWindow { r });
    }
    let p = jm.r_grid.position(r);
    let state = if (p - p.round()).abs() < 1e-9 {
        let i = p.round() as usize;
        (jm.j[i].clone(), jm.dj[i].clone())
    } else {
        let js = MatrixSeries::new(jm.r_grid, jm.j.clone())?;
        let djs = MatrixSeries::new(jm.r_grid, jm.dj.clone())?;
        (js.eval(r)?, djs.eval(r)?)
    };
    shape_from_state(&state, r, jm.t_center)
}

fn smallest_singular(j: &DMatrix<f64>) -> f64 {
    j.clone().singular_values().min()
}

/// Zeros of `det j` other than the source itself, refined by golden-section
/// search on the smallest singular value of the interpolated `j`.
pub fn conjugate_points(jm: &JacobiMatrix) -> Vec<f64> {
    let len = jm.r_grid.len;
    if len < 4 {
        return Vec::new();
    }
    let dr = jm.r_grid.step;
    let sig: Vec<f64> = jm.j.iter().map(smallest_singular).collect();
    let js = MatrixSeries::new(jm.r_grid, jm.j.clone()).expect("grid sized");
    let djs = MatrixSeries::new(jm.r_grid, jm.dj.clone()).expect("grid sized");
    let f = |r: f64| smallest_singular(&js.eval(r).expect("inside grid"));
    let mut roots: Vec<f64> = Vec::new();
    for i in 0..len {
        let left = if i > 0 { sig[i - 1] } else { f64::INFINITY };
        let right = if i + 1 < len { sig[i + 1] } else { f64::INFINITY };
        if !(sig[i] <= left && sig[i] < right) {
            continue;
        }
        let mut a = jm.r_grid.node(i.saturating_sub(1));
        let mut b = jm.r_grid.node((i + 1).min(len - 1));
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        while b - a > 1e-6 * dr {
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - phi * (b - a);
            d = a + phi * (b - a);
        }
        let root = 0.5 * (a + b);
        if (root - jm.t_center).abs() < 2.0 * dr {
            continue;
        }
        let scale = djs.eval(root).map(|m| m.norm()).unwrap_or(1.0).max(1e-300);
        if f(root) <= 1e-4 * scale && roots.last().map_or(true, |l| (root - l).abs() > dr) {
            roots.push(root);
        }
    }
    roots
}

/// Marches `∂_r S = S² + 𝐫` from `(r0, s_init)` to `r1` on the path nodes.
pub fn riccati_march(
    track: &CurvatureTrack,
    t: f64,
    s_init: &DMatrix<f64>,
    r0: f64,
    r1: f64,
) -> Result<Vec<ShapeData>> {
    let dr = track.dr();
    let mut rhs = |r: f64, s: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        if !(s.norm() <= RICCATI_BLOWUP) {
            return Err(Error::BlowUp { r });
        }
        Ok(s * s + track.at(r))
    };
    let mut out = vec![ShapeData {
        r: r0,
        t,
        s: s_init.clone(),
        k: s_init.clone().try_inverse(),
    }];
    let dir = if r1 >= r0 { 1.0 } else { -1.0 };
    let steps = ((r1 - r0).abs() / dr - 1e-9).ceil().max(0.0) as usize;
    let mut r = r0;
    let mut s = s_init.clone();
    for k in 0..steps {
        let target = if k + 1 == steps { r1 } else { r0 + dir * dr * (k + 1) as f64 };
        s = rk4_step(&mut rhs, r, &s, target - r)?;
        r = target;
        if !(s.norm() <= RICCATI_BLOWUP) {
            return Err(Error::BlowUp { r });
        }
        out.push(ShapeData {
            r,
            t,
            s: s.clone(),
            k: s.clone().try_inverse(),
        });
    }
    Ok(out)
}

/// Parameter grid on the source surface `Σ₀`, one axis per transverse
/// dimension; points are enumerated with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XhatGrid {
    pub start: Vec<f64>,
    pub step: Vec<f64>,
    pub count: Vec<usize>,
}

impl XhatGrid {
    pub fn single(xhat: Vec<f64>) -> Self {
        let k = xhat.len();
        XhatGrid {
            start: xhat,
            step: vec![0.01; k],
            count: vec![1; k],
        }
    }

    pub fn len(&self) -> usize {
        self.count.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.count.len()];
        for a in (0..self.count.len()).rev() {
            idx[a] = flat % self.count[a];
            flat /= self.count[a];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.count).fold(0, |acc, (i, c)| acc * c + i)
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.start[a] + self.step[a] * i as f64)
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

/// Geodesic sphere `Σ₀ = {exp_y(t₀ θ(x̂))}` with a parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma0Spec {
    pub center: Vec<f64>,
    pub t0: f64,
    pub xhat: XhatGrid,
}

impl Sigma0Spec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.center.len() != dim {
            return Err(Error::Invalid("sigma0 center has wrong dimension".into()));
        }
        let k = dim - 1;
        if self.xhat.start.len() != k || self.xhat.step.len() != k || self.xhat.count.len() != k {
            return Err(Error::Invalid(format!("sigma0 xhat grid needs {k} axes")));
        }
        if !(self.t0 > 0.0) || self.xhat.step.iter().any(|s| !(*s > 0.0)) || self.xhat.is_empty() {
            return Err(Error::Invalid("sigma0 needs t0 > 0 and positive xhat steps".into()));
        }
        Ok(())
    }
}

/// Orthonormal basis of `T_y` by Gram–Schmidt from the chart basis, in order.
pub fn chart_orthonormal_basis<M: Metric + ?Sized>(m: &M, y: &[f64]) -> Result<DMatrix<f64>> {
    let g = m.jet(y, 1)?.g;
    let n = y.len();
    let mut e = DMatrix::<f64>::identity(n, n);
    for k in 0..n {
        let mut v = e.column(k).into_owned();
        for p in 0..k {
            let b = e.column(p).into_owned();
            v -= &b * b.dot(&(&g * &v));
        }
        let len = v.dot(&(&g * &v)).sqrt();
        e.set_column(k, &(v / len));
    }
    Ok(e)
}

/// Unit direction `θ(x̂)` at the center and its `x̂`-derivatives, as
/// coefficients in an orthonormal basis.
pub fn direction_coeffs(xhat: &[f64]) -> (DVector<f64>, Vec<DVector<f64>>) {
    match xhat.len() {
        1 => {
            let (s, c) = xhat[0].sin_cos();
            (DVector::from_vec(vec![c, s]), vec![DVector::from_vec(vec![-s, c])])
        }
        2 => {
            let (sa, ca) = xhat[0].sin_cos();
            let (sb, cb) = xhat[1].sin_cos();
            (
                DVector::from_vec(vec![ca * cb, sa * cb, sb]),
                vec![
                    DVector::from_vec(vec![-sa * cb, ca * cb, 0.0]),
                    DVector::from_vec(vec![-ca * sb, -sa * sb, cb]),
                ],
            )
        }
        _ => panic!("direction parameters must have 1 or 2 entries"),
    }
}

/// Chart direction `θ(x̂)` at the center of `Σ₀`.
pub fn sigma0_direction<M: Metric + ?Sized>(m: &M, center: &[f64], xhat: &[f64]) -> Result<Vec<f64>> {
    let e = chart_orthonormal_basis(m, center)?;
    Ok((e * direction_coeffs(xhat).0).iter().copied().collect())
}

/// A point of `Σ₀` with the outward normal and the frame
/// `F_j = ∂X/∂x̂ʲ`, `F_n = −ν`.
#[derive(Debug, Clone)]
pub struct SourcePoint {
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    pub frame: DMatrix<f64>,
}

/// Builds the source point for `x̂`: the coordinate vectors are the Jacobi
/// fields `J(t₀)` with `J(0) = 0`, `J'(0) = ∂θ/∂x̂ʲ` along `γ_{y,θ}`.
pub fn source_point<M: Metric + ?Sized>(m: &M, sigma: &Sigma0Spec, xhat: &[f64]) -> Result<SourcePoint> {
    let n = m.dim();
    let e = chart_orthonormal_basis(m, &sigma.center)?;
    let (theta_c, dtheta_c) = direction_coeffs(xhat);
    let theta: Vec<f64> = (&e * theta_c).iter().copied().collect();
    let steps = (sigma.t0 / 1e-3).ceil().max(20.0);
    let dr = sigma.t0 / steps;
    let path = shoot_geodesic(m, &sigma.center, &theta, sigma.t0, dr)?;
    let f0 = &path.frames[0];
    let inv0 = f0.clone().try_inverse().ok_or(Error::SingularFrame { r: 0.0 })?;
    let track = CurvatureTrack::new(m, &path)?;
    let mut a0 = DMatrix::zeros(n - 1, n - 1);
    for (jx, d) in dtheta_c.iter().enumerate() {
        let coeff = &inv0 * (&e * d);
        for k in 0..n - 1 {
            a0[(k, jx)] = coeff[k];
        }
    }
    let curv = |r: f64| track.at(r);
    let (a, _) = jacobi_propagate(
        &curv,
        dr,
        0.0,
        (DMatrix::zeros(n - 1, n - 1), a0),
        path.r_max(),
        |_, _| {},
    )?;
    let last = path.r_grid.len - 1;
    let fe = &path.frames[last];
    let mut frame = DMatrix::zeros(n, n);
    for jx in 0..n - 1 {
        let mut col = DVector::zeros(n);
        for k in 0..n - 1 {
            col += fe.column(k) * a[(k, jx)];
        }
        frame.set_column(jx, &col);
    }
    let normal = path.velocities[last].clone();
    for i in 0..n {
        frame[(i, n - 1)] = -normal[i];
    }
    Ok(SourcePoint {
        point: path.points[last].clone(),
        normal,
        frame,
    })
}

/// Shape operators `S(x̂, 0, t)` of the geodesic spheres centred on the
/// inward geodesics from `Σ₀`, with conjugacy mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WavefrontDataset {
    pub dim: usize,
    pub t0: f64,
    pub xhat_grid: XhatGrid,
    pub points: Vec<Vec<f64>>,
    pub normals: Vec<Vec<f64>>,
    pub frames: Vec<DMatrix<f64>>,
    pub grams: Vec<DMatrix<f64>>,
    pub t_grid: UniformGrid,
    /// `samples[x̂][t]`; masked entries hold NaN where `S` is undefined.
    pub samples: Vec<Vec<DMatrix<f64>>>,
    pub mask: Vec<Vec<bool>>,
}

/// One geodesic's slice of a dataset.
#[derive(Debug, Clone)]
pub struct GeodesicData {
    pub t_grid: UniformGrid,
    pub samples: Vec<DMatrix<f64>>,
    pub mask: Vec<bool>,
    pub gram: DMatrix<f64>,
}

impl WavefrontDataset {
    pub fn slice(&self, i: usize) -> GeodesicData {
        let k = self.dim - 1;
        GeodesicData {
            t_grid: self.t_grid,
            samples: self.samples[i].clone(),
            mask: self.mask[i].clone(),
            gram: self.grams[i].view((0, 0), (k, k)).into_owned(),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().flatten().filter(|m| **m).count()
    }

    /// Ranges of masked `t` values (union over `x̂`).
    pub fn masked_bands(&self) -> Vec<(f64, f64)> {
        let mut bands: Vec<(f64, f64)> = Vec::new();
        for it in 0..self.t_grid.len {
            if self.mask.iter().any(|m| m[it]) {
                let t = self.t_grid.node(it);
                match bands.last_mut() {
                    Some(b) if (t - b.1 - self.t_grid.step).abs() < 1e-9 => b.1 = t,
                    _ => bands.push((t, t)),
                }
            }
        }
        bands
    }
}

/// Data along the inward geodesic of one source point.
pub fn geodesic_samples<M: Metric + ?Sized>(
    m: &M,
    src: &SourcePoint,
    t_grid: &UniformGrid,
    dr: f64,
) -> Result<(Vec<DMatrix<f64>>, Vec<bool>)> {
    let n = m.dim();
    let r_max = t_grid.end();
    let path = shoot_with_frame(m, &src.point, &src.frame, r_max + 0.5 * dr, dr)?;
    let track = CurvatureTrack::new(m, &path)?;
    let mut samples = Vec::with_capacity(t_grid.len);
    let mut mask = Vec::with_capacity(t_grid.len);
    for it in 0..t_grid.len {
        let t = t_grid.node(it);
        let state = point_source_at_start(&track, t)?;
        match shape_from_state(&state, 0.0, t) {
            Ok(sd) => {
                samples.push(sd.s);
                mask.push(false);
            }
            Err(Error::ConjugatePoint { .. }) => {
                samples.push(DMatrix::from_element(n - 1, n - 1, f64::NAN));
                mask.push(true);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((samples, mask))
}

/// Forward dataset over the `x̂` grid, parallel over source points.
pub fn forward_dataset<M: Metric + ?Sized>(
    m: &M,
    sigma: &Sigma0Spec,
    t_grid: UniformGrid,
    dr: f64,
) -> Result<WavefrontDataset> {
    let n = m.dim();
    sigma.validate(n)?;
    if !(t_grid.start > 0.0) {
        return Err(Error::Invalid("t grid must start above zero".into()));
    }
    let xs = sigma.xhat.points();
    let per: Vec<(SourcePoint, Vec<DMatrix<f64>>, Vec<bool>)> = xs
        .par_iter()
        .map(|xh| {
            let src = source_point(m, sigma, xh)?;
            let (s, mk) = geodesic_samples(m, &src, &t_grid, dr)?;
            Ok((src, s, mk))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = WavefrontDataset {
        dim: n,
        t0: sigma.t0,
        xhat_grid: sigma.xhat.clone(),
        points: Vec::new(),
        normals: Vec::new(),
        frames: Vec::new(),
        grams: Vec::new(),
        t_grid,
        samples: Vec::new(),
        mask: Vec::new(),
    };
    for (src, s, mk) in per {
        let g = m.raw_metric(&src.point);
        ds.grams.push(src.frame.transpose() * g * &src.frame);
        ds.points.push(src.point);
        ds.normals.push(src.normal);
        ds.frames.push(src.frame);
        ds.samples.push(s);
        ds.mask.push(mk);
    }
    Ok(ds)
}

/// Adds independent Gaussian noise of standard deviation `sigma` to every
/// unmasked sample entry.
pub fn add_noise(ds: &mut WavefrontDataset, sigma: f64, seed: u64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    if sigma <= 0.0 {
        return;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for (row, mrow) in ds.samples.iter_mut().zip(&ds.mask) {
        for (s, masked) in row.iter_mut().zip(mrow) {
            if !masked {
                for v in s.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    dim: usize,
    t0: f64,
    delta_t: f64,
    t_grid: UniformGrid,
    xhat_grid: XhatGrid,
    points: Vec<Vec<f64>>,
    normals: Vec<Vec<f64>>,
    /// row-major
    frames: Vec<Vec<f64>>,
    grams: Vec<Vec<f64>>,
    config_hash: String,
    samples_file: String,
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub(crate) fn from_row_major(n: usize, v: &[f64]) -> Result<DMatrix<f64>> {
    if v.len() != n * n {
        return Err(Error::Invalid(format!("expected {} matrix entries, found {}", n * n, v.len())));
    }
    Ok(DMatrix::from_row_slice(n, n, v))
}

/// Path of the CSV payload belonging to a dataset header file.
pub fn samples_path(json_path: &Path) -> PathBuf {
    let stem = json_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    json_path.with_file_name(format!("{stem}.samples.csv"))
}

/// Writes the JSON header and the CSV sample rows.
pub fn write_dataset(ds: &WavefrontDataset, json_path: &Path, config_hash: &str) -> Result<()> {
    let csv_path = samples_path(json_path);
    let header = DatasetHeader {
        dim: ds.dim,
        t0: ds.t0,
        delta_t: ds.t_grid.step,
        t_grid: ds.t_grid,
        xhat_grid: ds.xhat_grid.clone(),
        points: ds.points.clone(),
        normals: ds.normals.clone(),
        frames: ds.frames.iter().map(row_major).collect(),
        grams: ds.grams.iter().map(row_major).collect(),
        config_hash: config_hash.to_string(),
        samples_file: csv_path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(json_path, json + "\n")?;
    let k = ds.dim - 1;
    let mut out = format!("# config_hash={config_hash}\nxhat_index,t_index");
    for a in 1..=k {
        for b in 1..=k {
            let _ = write!(out, ",s_{a}{b}");
        }
    }
    out.push_str(",masked\n");
    for (i, row) in ds.samples.iter().enumerate() {
        for (it, s) in row.iter().enumerate() {
            let _ = write!(out, "{i},{it}");
            for v in row_major(s) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", u8::from(ds.mask[i][it]));
        }
    }
    std::fs::write(csv_path, out)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; returns it with the
/// recorded config hash.
pub fn read_dataset(json_path: &Path) -> Result<(WavefrontDataset, String)> {
    let file = json_path.display().to_string();
    let text = std::fs::read_to_string(json_path)?;
    let h: DatasetHeader = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: file.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let n = h.dim;
    if !(n == 2 || n == 3) {
        return Err(Error::Parse {
            file,
            line: 0,
            message: format!("dim must be 2 or 3, found {n}"),
        });
    }
    let nx = h.xhat_grid.len();
    if h.points.len() != nx || h.normals.len() != nx || h.frames.len() != nx || h.grams.len() != nx {
        return Err(Error::Parse {
            file,
            line: 0,
            message: "per-point metadata does not match the xhat grid".into(),
        });
    }
    let frames = h.frames.iter().map(|v| from_row_major(n, v)).collect::<Result<Vec<_>>>()?;
    let grams = h.grams.iter().map(|v| from_row_major(n, v)).collect::<Result<Vec<_>>>()?;
    let csv_path = json_path.with_file_name(&h.samples_file);
    let csv_name = csv_path.display().to_string();
    let body = std::fs::read_to_string(&csv_path)?;
    let k = n - 1;
    let nt = h.t_grid.len;
    let nan = DMatrix::from_element(k, k, f64::NAN);
    let mut samples = vec![vec![nan; nt]; nx];
    let mut mask = vec![vec![true; nt]; nx];
    let mut seen = vec![vec![false; nt]; nx];
    let perr = |line: usize, message: String| Error::Parse {
        file: csv_name.clone(),
        line,
        message,
    };
    let mut header_seen = false;
    for (ln, line) in body.lines().enumerate() {
        let line_no = ln + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if !line.starts_with("xhat_index") {
                return Err(perr(line_no, "missing column header".into()));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + k * k {
            return Err(perr(line_no, format!("expected {} fields, found {}", 3 + k * k, fields.len())));
        }
        let i: usize = fields[0].parse().map_err(|_| perr(line_no, "bad xhat_index".into()))?;
        let it: usize = fields[1].parse().map_err(|_| perr(line_no, "bad t_index".into()))?;
        if i >= nx || it >= nt {
            return Err(perr(line_no, "index out of range".into()));
        }
        let vals = fields[2..2 + k * k]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| perr(line_no, format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let masked = match fields[2 + k * k] {
            "0" => false,
            "1" => true,
            other => return Err(perr(line_no, format!("bad mask flag {other:?}"))),
        };
        samples[i][it] = from_row_major(k, &vals)?;
        mask[i][it] = masked;
        seen[i][it] = true;
    }
    if seen.iter().flatten().any(|s| !s) {
        return Err(perr(0, "sample rows missing".into()));
    }
    let ds = WavefrontDataset {
        dim: n,
        t0: h.t0,
        xhat_grid: h.xhat_grid,
        points: h.points,
        normals: h.normals,
        frames,
        grams,
        t_grid: h.t_grid,
        samples,
        mask,
    };
    Ok((ds, h.config_hash))
}

/// Sampled spherical surface `Σ_{y,t}` with outward normals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalSurfaceSample {
    pub t: f64,
    pub points: Vec<Vec<f64>>,
    pub normals: Vec<Vec<f64>>,
    #[serde(skip)]
    pub hidden_center: Option<Vec<f64>>,
}

/// `count` unit directions in an orthonormal basis: equally spaced angles in
/// two dimensions, a Fibonacci lattice in three.
pub fn direction_fan(dim: usize, count: usize, phase: f64) -> Vec<DVector<f64>> {
    match dim {
        2 => (0..count)
            .map(|k| {
                let a = phase + 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                DVector::from_vec(vec![a.cos(), a.sin()])
            })
            .collect(),
        _ => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                    let rad = (1.0 - z * z).sqrt();
                    let a = phase + golden * k as f64;
                    DVector::from_vec(vec![rad * a.cos(), rad * a.sin(), z])
                })
                .collect()
        }
    }
}

/// Samples geodesic spheres `(y, t)` restricted to the region `u`.
pub fn sample_surface_family<M: Metric + ?Sized>(
    m: &M,
    u: &ChartBox,
    centers: &[Vec<f64>],
    radii: &[f64],
    pts_per_surface: usize,
) -> Result<Vec<SphericalSurfaceSample>> {
    if centers.len() != radii.len() {
        return Err(Error::Invalid("need one radius per center".into()));
    }
    centers
        .par_iter()
        .zip(radii.par_iter())
        .map(|(y, &t)| {
            let e = chart_orthonormal_basis(m, y)?;
            let mut points = Vec::new();
            let mut normals = Vec::new();
            for d in direction_fan(m.dim(), pts_per_surface, 0.0) {
                let v: Vec<f64> = (&e * d).iter().copied().collect();
                match geodesic_endpoint(m, y, &v, t) {
                    Ok((x, nu)) if u.contains(&x) => {
                        points.push(x);
                        normals.push(nu);
                    }
                    Ok(_) | Err(Error::Domain { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            if points.is_empty() {
                return Err(Error::EmptySurface);
            }
            Ok(SphericalSurfaceSample {
                t,
                points,
                normals,
                hidden_center: Some(y.clone()),
            })
        })
        .collect()
}
