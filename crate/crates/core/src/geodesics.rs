//! Unit-speed geodesics with parallel frames, curvature coefficients along
//! them, the exponential map and Fermi coordinates around a geodesic.

use crate::error::{Error, Result};
use crate::manifold::{christoffel_from_jet, curvature_from_jet, directional_curvature_from, Metric};
use crate::ode::{integrate_adaptive, AdaptiveOptions};
use crate::series::{MatrixSeries, UniformGrid};
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;

/// Integrator tolerances for geodesic and frame transport.
pub fn geodesic_options(h_max: f64) -> AdaptiveOptions {
    AdaptiveOptions {
        atol: 1e-12,
        rtol: 1e-12,
        h_max,
        h_min: 1e-13,
        max_steps: 2_000_000,
    }
}

/// A geodesic sampled on a uniform arclength grid together with a parallel
/// frame. Column `k` of `frames[i]` is `F_k(r_i)` in chart components; the
/// last column is the velocity.
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    pub r_grid: UniformGrid,
    pub points: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub frames: Vec<DMatrix<f64>>,
    pub gram: DMatrix<f64>,
}

/// `(x, v, F)` packed as `[x, v, F column-major]`.
fn pack(x: &[f64], v: &[f64], f: Option<&DMatrix<f64>>) -> Vec<f64> {
    let mut y = Vec::with_capacity(2 * x.len() + x.len() * x.len());
    y.extend_from_slice(x);
    y.extend_from_slice(v);
    if let Some(f) = f {
        y.extend_from_slice(f.as_slice());
    }
    y
}

fn unpack_frame(y: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, &y[2 * n..2 * n + n * n])
}

/// Right-hand side of the geodesic equation, optionally carrying a frame
/// transported by `Ḟ^i_k = −Γ^i_{jl} ẋ^j F^l_k`.
fn transport_rhs<'a, M: Metric + ?Sized>(
    m: &'a M,
    n: usize,
    with_frame: bool,
) -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<()> + 'a {
    move |_r, y, dy| {
        let x = &y[..n];
        let v = &y[n..2 * n];
        let jet = m.jet(x, 1)?;
        let ginv = jet.g.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
            Error::DegenerateMetric {
                point: x.to_vec(),
                min_eigenvalue: jet.g.clone().symmetric_eigenvalues().min(),
            }
        })?;
        let gamma = christoffel_from_jet(&jet, &ginv);
        let acc = gamma.contract(v, v);
        dy[..n].copy_from_slice(v);
        for i in 0..n {
            dy[n + i] = -acc[i];
        }
        if with_frame {
            for k in 0..n {
                let col = &y[2 * n + k * n..2 * n + (k + 1) * n];
                let d = gamma.contract(v, col);
                for i in 0..n {
                    dy[2 * n + k * n + i] = -d[i];
                }
            }
        }
        Ok(())
    }
}

fn norm_g(g: &DMatrix<f64>, v: &[f64]) -> f64 {
    let v = DVector::from_column_slice(v);
    v.dot(&(g * &v)).sqrt()
}

/// g-orthonormal frame with last column `eta`, completed by Gram–Schmidt
/// from the chart basis.
pub fn orthonormal_frame<M: Metric + ?Sized>(m: &M, x: &[f64], eta: &[f64]) -> Result<DMatrix<f64>> {
    let g = m.jet(x, 1)?.g;
    let n = x.len();
    let ip = |a: &DVector<f64>, b: &DVector<f64>| a.dot(&(&g * b));
    let mut basis: Vec<DVector<f64>> = vec![DVector::from_column_slice(eta)];
    let norm = ip(&basis[0], &basis[0]).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    basis[0] /= norm;
    // chart basis vectors ordered by how much survives the projection
    let mut candidates: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            e
        })
        .collect();
    while basis.len() < n {
        let mut best: Option<(usize, DVector<f64>, f64)> = None;
        for (ci, c) in candidates.iter().enumerate() {
            let mut w = c.clone();
            for b in &basis {
                w -= b * ip(b, c);
            }
            let len = ip(&w, &w).sqrt();
            if best.as_ref().map_or(true, |(_, _, l)| len > *l) {
                best = Some((ci, w, len));
            }
        }
        let (ci, w, len) = best.expect("candidate");
        candidates.remove(ci);
        basis.push(w / len);
    }
    let mut f = DMatrix::zeros(n, n);
    for (k, b) in basis.iter().skip(1).enumerate() {
        f.set_column(k, b);
    }
    f.set_column(n - 1, &basis[0]);
    Ok(f)
}

/// Shoots the unit-speed geodesic from `x` in direction `eta` with the
/// default orthonormal frame.
pub fn shoot_geodesic<M: Metric + ?Sized>(
    m: &M,
    x: &[f64],
    eta: &[f64],
    r_max: f64,
    dr: f64,
) -> Result<GeodesicPath> {
    let g = m.jet(x, 1)?.g;
    let len = norm_g(&g, eta);
    if (len - 1.0).abs() > 1e-10 {
        return Err(Error::NotUnit { norm: len });
    }
    let f0 = orthonormal_frame(m, x, eta)?;
    shoot_with_frame(m, x, &f0, r_max, dr)
}

/// Shoots the geodesic with initial velocity equal to the last column of
/// `f0`, transporting every column of `f0` in parallel.
pub fn shoot_with_frame<M: Metric + ?Sized>(
    m: &M,
    x: &[f64],
    f0: &DMatrix<f64>,
    r_max: f64,
    dr: f64,
) -> Result<GeodesicPath> {
    let n = m.dim();
    if !(r_max > 0.0) || !(dr > 0.0) {
        return Err(Error::Invalid(format!("need r_max > 0 and dr > 0, got {r_max}, {dr}")));
    }
    if f0.nrows() != n || f0.ncols() != n {
        return Err(Error::Invalid("frame has wrong shape".into()));
    }
    let jet = m.jet(x, 1)?;
    let eta: Vec<f64> = f0.column(n - 1).iter().copied().collect();
    let speed = norm_g(&jet.g, &eta);
    if (speed - 1.0).abs() > 1e-10 {
        return Err(Error::NotUnit { norm: speed });
    }
    let det0 = f0.determinant().abs();
    if det0 == 0.0 {
        return Err(Error::SingularFrame { r: 0.0 });
    }
    let gram = f0.transpose() * &jet.g * f0;
    let r_grid = UniformGrid::spanning(0.0, r_max, dr)?;
    let mut rhs = transport_rhs(m, n, true);
    let opts = geodesic_options(dr);
    let mut y = pack(x, &eta, Some(f0));
    let mut h = dr;
    let mut points = Vec::with_capacity(r_grid.len);
    let mut velocities = Vec::with_capacity(r_grid.len);
    let mut frames = Vec::with_capacity(r_grid.len);
    points.push(x.to_vec());
    velocities.push(eta.clone());
    frames.push(f0.clone());
    for i in 1..r_grid.len {
        let (a, b) = (r_grid.node(i - 1), r_grid.node(i));
        y = integrate_adaptive(&mut rhs, a, &y, b, &mut h, &opts).map_err(|e| match e {
            Error::Step { .. } => Error::Step { r: a },
            other => other,
        })?;
        let f = unpack_frame(&y, n);
        if f.determinant().abs() < 1e-12 * det0 {
            return Err(Error::SingularFrame { r: b });
        }
        points.push(y[..n].to_vec());
        velocities.push(y[n..2 * n].to_vec());
        frames.push(f);
    }
    Ok(GeodesicPath {
        r_grid,
        points,
        velocities,
        frames,
        gram,
    })
}

/// Transports an arbitrary initial frame along an existing path.
pub fn parallel_frame<M: Metric + ?Sized>(
    m: &M,
    path: &GeodesicPath,
    f0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let n = m.dim();
    let last: Vec<f64> = f0.column(n - 1).iter().copied().collect();
    let eta = &path.velocities[0];
    let diff: f64 = last.iter().zip(eta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if diff > 1e-10 {
        return Err(Error::Invalid("last frame column must equal the initial velocity".into()));
    }
    let dr = path.r_grid.step;
    Ok(shoot_with_frame(m, &path.points[0], f0, path.r_grid.end() + 0.5 * dr * 1e-6, dr)?.frames)
}

/// State of a geodesic after arclength `length`, without a frame.
pub fn geodesic_endpoint<M: Metric + ?Sized>(
    m: &M,
    x: &[f64],
    v: &[f64],
    length: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = m.dim();
    let mut rhs = transport_rhs(m, n, false);
    let mut h = 0.01;
    let y = integrate_adaptive(&mut rhs, 0.0, &pack(x, v, None), length, &mut h, &geodesic_options(0.05))?;
    Ok((y[..n].to_vec(), y[n..].to_vec()))
}

/// `exp_x(w)`: the geodesic with initial velocity `w` evaluated at parameter 1.
pub fn exp_map<M: Metric + ?Sized>(m: &M, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().all(|c| *c == 0.0) {
        m.check_domain(x)?;
        return Ok(x.to_vec());
    }
    Ok(geodesic_endpoint(m, x, w, 1.0)?.0)
}

/// `(n−1)×(n−1)` curvature coefficients `⟨f^k, R(F_j, γ̇)γ̇⟩` at one point.
pub fn curvature_coeffs_at<M: Metric + ?Sized>(
    m: &M,
    x: &[f64],
    v: &[f64],
    frame: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = m.dim();
    let jet = m.jet(x, 2)?;
    let tensors = curvature_from_jet(&jet, x)?;
    let op = directional_curvature_from(&tensors, v);
    let inv = frame
        .clone()
        .try_inverse()
        .ok_or(Error::SingularFrame { r: f64::NAN })?;
    let full = inv * op * frame;
    Ok(full.view((0, 0), (n - 1, n - 1)).into_owned())
}

/// Curvature coefficients at every node of the path.
pub fn curvature_coeffs<M: Metric + ?Sized>(m: &M, path: &GeodesicPath) -> Result<MatrixSeries> {
    let values = (0..path.r_grid.len)
        .map(|i| curvature_coeffs_at(m, &path.points[i], &path.velocities[i], &path.frames[i]))
        .collect::<Result<Vec<_>>>()?;
    MatrixSeries::new(path.r_grid, values)
}

impl GeodesicPath {
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn r_max(&self) -> f64 {
        self.r_grid.end()
    }

    /// Exact state `(x, γ̇, F)` at arclength `r`, integrated from the
    /// nearest grid node.
    pub fn state_at<M: Metric + ?Sized>(
        &self,
        m: &M,
        r: f64,
    ) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
        if !self.r_grid.contains(r) {
            return Err(Error::OutOfWindow { r });
        }
        let i = self.r_grid.nearest(r);
        let r0 = self.r_grid.node(i);
        if (r - r0).abs() < 1e-15 {
            return Ok((self.points[i].clone(), self.velocities[i].clone(), self.frames[i].clone()));
        }
        let n = self.dim();
        let mut rhs = transport_rhs(m, n, true);
        let mut h = self.r_grid.step;
        let y0 = pack(&self.points[i], &self.velocities[i], Some(&self.frames[i]));
        let y = integrate_adaptive(&mut rhs, r0, &y0, r, &mut h, &geodesic_options(self.r_grid.step))?;
        Ok((y[..n].to_vec(), y[n..2 * n].to_vec(), unpack_frame(&y, n)))
    }

    /// Curvature coefficients at `r`, evaluated on the exact state.
    pub fn curvature_at<M: Metric + ?Sized>(&self, m: &M, r: f64) -> Result<DMatrix<f64>> {
        let (x, v, f) = self.state_at(m, r)?;
        curvature_coeffs_at(m, &x, &v, &f)
    }

    /// Largest deviation of `‖γ̇‖_g` from one over the grid.
    pub fn speed_drift<M: Metric + ?Sized>(&self, m: &M) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (x, v) in self.points.iter().zip(&self.velocities) {
            let g = m.raw_metric(x);
            worst = worst.max((norm_g(&g, v) - 1.0).abs());
        }
        Ok(worst)
    }

    /// Largest deviation of `g(F_j, F_k)` from the initial Gram matrix.
    pub fn gram_drift<M: Metric + ?Sized>(&self, m: &M) -> f64 {
        let mut worst: f64 = 0.0;
        for (x, f) in self.points.iter().zip(&self.frames) {
            let g = m.raw_metric(x);
            let d = f.transpose() * g * f - &self.gram;
            worst = worst.max(d.amax());
        }
        worst
    }

    /// CSV dump: `r, x.., v.., F row-major`.
    pub fn to_csv(&self) -> String {
        let n = self.dim();
        let mut out = String::from("r");
        for i in 0..n {
            let _ = write!(out, ",x{i}");
        }
        for i in 0..n {
            let _ = write!(out, ",v{i}");
        }
        for i in 0..n {
            for k in 0..n {
                let _ = write!(out, ",F{i}{k}");
            }
        }
        out.push('\n');
        for idx in 0..self.r_grid.len {
            let _ = write!(out, "{}", self.r_grid.node(idx));
            for c in self.points[idx].iter().chain(&self.velocities[idx]) {
                let _ = write!(out, ",{c}");
            }
            for i in 0..n {
                for k in 0..n {
                    let _ = write!(out, ",{}", self.frames[idx][(i, k)]);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Fermi coordinates `(s, r) ↦ exp_{γ(r)}(Σ s^k F_k(r))` on a tube around a
/// geodesic.
#[derive(Debug, Clone)]
pub struct FermiChart {
    pub base: GeodesicPath,
    /// Tube radius in the `s` coordinates (max-norm).
    pub rho: f64,
    pub r_range: (f64, f64),
}

impl FermiChart {
    /// Builds a chart with the largest tube radius up to `rho_max` that
    /// passes the injectivity sampling test, found by bisection.
    pub fn new<M: Metric + ?Sized>(
        m: &M,
        base: GeodesicPath,
        r_range: (f64, f64),
        rho_max: f64,
    ) -> Result<Self> {
        if !(r_range.0 >= 0.0 && r_range.1 <= base.r_max() + 1e-12 && r_range.0 < r_range.1) {
            return Err(Error::Invalid("Fermi window outside the base geodesic".into()));
        }
        let mut chart = FermiChart {
            base,
            rho: rho_max,
            r_range,
        };
        if chart.injective_on_window(m) {
            return Ok(chart);
        }
        let (mut lo, mut hi) = (0.0, rho_max);
        for _ in 0..12 {
            let mid = 0.5 * (lo + hi);
            chart.rho = mid;
            if chart.injective_on_window(m) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if lo <= 0.0 {
            return Err(Error::Injectivity);
        }
        chart.rho = lo;
        Ok(chart)
    }

    /// Chart with a fixed radius, verified by sampling.
    pub fn with_radius<M: Metric + ?Sized>(
        m: &M,
        base: GeodesicPath,
        r_range: (f64, f64),
        rho: f64,
    ) -> Result<Self> {
        let chart = FermiChart { base, rho, r_range };
        if !chart.injective_on_window(m) {
            return Err(Error::Injectivity);
        }
        Ok(chart)
    }

    fn in_window(&self, s: &[f64], r: f64) -> bool {
        s.iter().all(|c| c.abs() <= self.rho + 1e-12)
            && r >= self.r_range.0 - 1e-12
            && r <= self.r_range.1 + 1e-12
    }

    fn map_unchecked<M: Metric + ?Sized>(&self, m: &M, s: &[f64], r: f64) -> Result<Vec<f64>> {
        let (x, _v, f) = self.base.state_at(m, r)?;
        let n = x.len();
        let mut w = vec![0.0; n];
        for (k, sk) in s.iter().enumerate() {
            for i in 0..n {
                w[i] += sk * f[(i, k)];
            }
        }
        exp_map(m, &x, &w)
    }

    /// Jacobian of the map by central differences, columns `(s.., r)`.
    fn jacobian<M: Metric + ?Sized>(&self, m: &M, s: &[f64], r: f64, h: f64) -> Result<DMatrix<f64>> {
        let n = s.len() + 1;
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let (mut sp, mut sm) = (s.to_vec(), s.to_vec());
            let (mut rp, mut rm) = (r, r);
            if k < n - 1 {
                sp[k] += h;
                sm[k] -= h;
            } else {
                rp += h;
                rm -= h;
            }
            let a = self.map_unchecked(m, &sp, rp.min(self.base.r_max()))?;
            let b = self.map_unchecked(m, &sm, rm.max(0.0))?;
            let width = rp.min(self.base.r_max()) - rm.max(0.0);
            let span = if k < n - 1 { 2.0 * h } else { width };
            for i in 0..n {
                jac[(i, k)] = (a[i] - b[i]) / span;
            }
        }
        Ok(jac)
    }

    /// Injectivity check on a sample lattice: the Jacobian determinant keeps
    /// its sign and size, and distinct samples map to well separated points.
    fn injective_on_window<M: Metric + ?Sized>(&self, m: &M) -> bool {
        let ns = self.base.dim() - 1;
        let s_vals = [-1.0, -0.5, 0.0, 0.5, 1.0].map(|a| a * self.rho);
        let r_count = 9;
        let (r0, r1) = self.r_range;
        let mut params: Vec<(Vec<f64>, f64)> = Vec::new();
        for ir in 0..r_count {
            let r = r0 + (r1 - r0) * ir as f64 / (r_count - 1) as f64;
            let mut idx = vec![0usize; ns];
            loop {
                params.push((idx.iter().map(|&i| s_vals[i]).collect(), r));
                let mut c = 0;
                while c < ns {
                    idx[c] += 1;
                    if idx[c] < s_vals.len() {
                        break;
                    }
                    idx[c] = 0;
                    c += 1;
                }
                if c == ns {
                    break;
                }
            }
        }
        let h = 1e-5_f64.max(1e-3 * self.rho);
        let axis_det = match self.jacobian(m, &vec![0.0; ns], 0.5 * (r0 + r1), h) {
            Ok(j) => j.determinant(),
            Err(_) => return false,
        };
        let mut images = Vec::with_capacity(params.len());
        for (s, r) in &params {
            match (self.map_unchecked(m, s, *r), self.jacobian(m, s, *r, h)) {
                (Ok(x), Ok(j)) => {
                    let d = j.determinant();
                    if !(d * axis_det > 0.0) || d.abs() < 0.1 * axis_det.abs() {
                        return false;
                    }
                    images.push(x);
                }
                _ => return false,
            }
        }
        let scale = axis_det.abs().powf(1.0 / (ns + 1) as f64);
        for a in 0..params.len() {
            for b in a + 1..params.len() {
                let dp: f64 = params[a]
                    .0
                    .iter()
                    .zip(&params[b].0)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    + (params[a].1 - params[b].1).powi(2);
                let dx: f64 = images[a].iter().zip(&images[b]).map(|(p, q)| (p - q) * (p - q)).sum();
                if dx.sqrt() < 0.05 * scale * dp.sqrt() {
                    return false;
                }
            }
        }
        true
    }
}

/// `Ψ(s, r)` for a point inside the chart window.
pub fn fermi_map<M: Metric + ?Sized>(m: &M, chart: &FermiChart, s: &[f64], r: f64) -> Result<Vec<f64>> {
    if s.len() + 1 != m.dim() {
        return Err(Error::Invalid("Fermi coordinate has wrong length".into()));
    }
    if !chart.in_window(s, r) {
        let mut p = s.to_vec();
        p.push(r);
        return Err(Error::Domain { point: p });
    }
    chart.map_unchecked(m, s, r)
}

/// Inverts the Fermi map by damped Newton iteration from `guess`.
pub fn fermi_inverse<M: Metric + ?Sized>(
    m: &M,
    chart: &FermiChart,
    x: &[f64],
    guess: (&[f64], f64),
) -> Result<(Vec<f64>, f64)> {
    let n = m.dim();
    let mut s = guess.0.to_vec();
    let mut r = guess.1;
    let resid = |s: &[f64], r: f64| -> Result<DVector<f64>> {
        let y = chart.map_unchecked(m, s, r)?;
        Ok(DVector::from_iterator(n, y.iter().zip(x).map(|(a, b)| a - b)))
    };
    let mut res = resid(&s, r)?;
    for _ in 0..60 {
        if res.norm() < 1e-12 {
            return Ok((s, r));
        }
        let jac = chart.jacobian(m, &s, r, 1e-6)?;
        let delta = jac.lu().solve(&res).ok_or(Error::NoConvergence)?;
        let mut lambda = 1.0;
        loop {
            let s_new: Vec<f64> = s.iter().enumerate().map(|(k, v)| v - lambda * delta[k]).collect();
            let r_new = (r - lambda * delta[n - 1]).clamp(0.0, chart.base.r_max());
            if let Ok(res_new) = resid(&s_new, r_new) {
                if res_new.norm() < res.norm() || lambda < 1e-4 {
                    s = s_new;
                    r = r_new;
                    res = res_new;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(Error::NoConvergence);
            }
        }
    }
    if res.norm() < 1e-9 {
        Ok((s, r))
    } else {
        Err(Error::NoConvergence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{MetricField, MetricKind};
    use std::f64::consts::FRAC_PI_2;

    fn conformal() -> MetricField {
        MetricField::conformal_bump(2, 1.0, 0.3, 1.0)
    }

    fn unit(m: &MetricField, x: &[f64], d: &[f64]) -> Vec<f64> {
        let g = m.raw_metric(x);
        let l = norm_g(&g, d);
        d.iter().map(|c| c / l).collect()
    }

    #[test]
    fn euclidean_straight_line_and_constant_frame() {
        let m = MetricField::euclidean(2);
        let p = shoot_geodesic(&m, &[0.0, 0.0], &[1.0, 0.0], 2.0, 0.01).unwrap();
        assert_eq!(p.r_grid.len, 201);
        for (i, x) in p.points.iter().enumerate() {
            let r = p.r_grid.node(i);
            assert!((x[0] - r).abs() < 1e-12 && x[1].abs() < 1e-12);
            assert!((&p.frames[i] - &p.frames[0]).amax() < 1e-12);
        }
        assert!((&p.gram - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn sphere_radial_line() {
        let m = MetricField::constant_curvature(2, 1.0);
        let p = shoot_geodesic(&m, &[0.1, 0.7], &[1.0, 0.0], 2.5, 0.05).unwrap();
        for (i, x) in p.points.iter().enumerate() {
            assert!((x[0] - 0.1 - p.r_grid.node(i)).abs() < 1e-10);
            assert!((x[1] - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn conformal_arclength_by_quadrature() {
        let m = conformal();
        let x0 = [-1.0, -0.3];
        let eta = unit(&m, &x0, &[1.0, 0.4]);
        let p = shoot_geodesic(&m, &x0, &eta, 2.0, 0.01).unwrap();
        // Simpson quadrature of ‖ẋ‖_g
        let speeds: Vec<f64> = p
            .points
            .iter()
            .zip(&p.velocities)
            .map(|(x, v)| norm_g(&m.raw_metric(x), v))
            .collect();
        let h = p.r_grid.step;
        let mut s = speeds[0] + speeds[speeds.len() - 1];
        for (i, v) in speeds.iter().enumerate().take(speeds.len() - 1).skip(1) {
            s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        let length = s * h / 3.0;
        assert!((length - 2.0).abs() < 1e-7);
    }

    #[test]
    fn energy_gram_and_reversibility_on_catalog() {
        let metrics = vec![
            MetricField::euclidean(3),
            MetricField::constant_curvature(2, 1.0),
            MetricField::constant_curvature(3, -0.5),
            conformal(),
            MetricField::new(2, MetricKind::DepthProfile { v0: 1.0, gradient: 0.2 }).unwrap(),
            MetricField::new(
                2,
                MetricKind::AnisotropicDiagonal {
                    base: vec![1.0, 1.5],
                    amplitude: vec![0.3, -0.2],
                    center: None,
                    width: 1.0,
                },
            )
            .unwrap(),
        ];
        for m in &metrics {
            let (x0, d): (Vec<f64>, Vec<f64>) = match (&m.kind, m.dim) {
                (MetricKind::ConstantCurvature { .. }, 2) => (vec![FRAC_PI_2, 0.0], vec![0.0, 1.0]),
                (MetricKind::ConstantCurvature { .. }, _) => (vec![1.0, 1.2, 0.0], vec![0.3, 0.2, 0.5]),
                (_, 2) => (vec![-1.5, 0.5], vec![1.0, -0.2]),
                _ => (vec![-1.0, 0.2, 0.1], vec![1.0, 0.1, 0.2]),
            };
            let eta = unit(m, &x0, &d);
            let r_max = if matches!(m.kind, MetricKind::ConstantCurvature { kappa } if kappa > 0.0) { 6.0 } else { 3.0 };
            let p = shoot_geodesic(m, &x0, &eta, r_max, 0.01).unwrap();
            assert!(p.speed_drift(m).unwrap() < 1e-8, "{:?}", m.kind);
            assert!(p.gram_drift(m) < 1e-7);
            let n = m.dim;
            let back_v: Vec<f64> = p.velocities.last().unwrap().iter().map(|c| -c).collect();
            let back = shoot_geodesic(m, p.points.last().unwrap(), &back_v, p.r_max(), 0.01).unwrap();
            let end = back.points.last().unwrap();
            let err: f64 = (0..n).map(|i| (end[i] - x0[i]).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{:?}: {err}", m.kind);
            // last frame column tracks the velocity
            for (f, v) in p.frames.iter().zip(&p.velocities) {
                for i in 0..n {
                    assert!((f[(i, n - 1)] - v[i]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn non_unit_direction_rejected() {
        let m = MetricField::euclidean(2);
        assert!(matches!(
            shoot_geodesic(&m, &[0.0, 0.0], &[2.0, 0.0], 1.0, 0.1),
            Err(Error::NotUnit { .. })
        ));
    }

    #[test]
    fn leaving_the_chart_is_a_domain_error() {
        let m = MetricField::euclidean(2).with_domain(crate::manifold::ChartBox::cube(2, 1.0));
        assert!(matches!(
            shoot_geodesic(&m, &[0.0, 0.0], &[1.0, 0.0], 2.0, 0.1),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn non_orthonormal_frame_keeps_its_gram_matrix() {
        let m = conformal();
        let x0 = [-1.0, 0.0];
        let eta = unit(&m, &x0, &[1.0, 0.0]);
        let f0 = DMatrix::from_row_slice(2, 2, &[0.3, eta[0], 0.7, eta[1]]);
        let p = shoot_geodesic(&m, &x0, &eta, 2.0, 0.01).unwrap();
        let frames = parallel_frame(&m, &p, &f0).unwrap();
        let gram = f0.transpose() * m.raw_metric(&x0) * &f0;
        for (x, f) in p.points.iter().zip(&frames) {
            let d = f.transpose() * m.raw_metric(x) * f - &gram;
            assert!(d.amax() < 1e-7);
        }
    }

    #[test]
    fn curvature_coefficients_on_model_spaces() {
        let m = MetricField::euclidean(3);
        let p = shoot_geodesic(&m, &[0.0; 3], &[0.0, 0.0, 1.0], 1.0, 0.1).unwrap();
        let c = curvature_coeffs(&m, &p).unwrap();
        assert!(c.values.iter().all(|v| v.amax() == 0.0));

        let s = MetricField::constant_curvature(2, 1.0);
        let p = shoot_geodesic(&s, &[FRAC_PI_2, 0.0], &[0.0, 1.0], 6.0, 0.05).unwrap();
        let c = curvature_coeffs(&s, &p).unwrap();
        for v in &c.values {
            assert!((v[(0, 0)] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn curvature_coefficients_are_self_adjoint() {
        let m = MetricField::new(
            3,
            MetricKind::Conformal {
                c0: 1.0,
                amplitude: 0.3,
                center: None,
                width: 1.0,
            },
        )
        .unwrap();
        let x0 = [-1.0, 0.3, 0.1];
        let eta = unit(&m, &x0, &[1.0, 0.1, 0.05]);
        let p = shoot_geodesic(&m, &x0, &eta, 2.0, 0.05).unwrap();
        // transverse columns g-orthogonal to the velocity but not to each other
        let mut f0 = DMatrix::from_row_slice(3, 3, &[0.2, 0.1, eta[0], 0.9, 0.3, eta[1], 0.1, 1.1, eta[2]]);
        let g0 = m.raw_metric(&x0);
        let e = DVector::from_column_slice(&eta);
        for k in 0..2 {
            let c = f0.column(k).into_owned();
            let proj = c.dot(&(&g0 * &e));
            f0.set_column(k, &(c - &e * proj));
        }
        let frames = parallel_frame(&m, &p, &f0).unwrap();
        let ghat = f0.transpose() * m.raw_metric(&x0) * &f0;
        let gs = ghat.view((0, 0), (2, 2)).into_owned();
        for i in (0..p.r_grid.len).step_by(5) {
            let r = curvature_coeffs_at(&m, &p.points[i], &p.velocities[i], &frames[i]).unwrap();
            let a = &gs * r;
            assert!((&a - a.transpose()).amax() < 1e-6);
        }
    }

    #[test]
    fn fermi_map_on_axis_flat_and_round_trip() {
        let e = MetricField::euclidean(2);
        let p = shoot_geodesic(&e, &[0.0, 0.0], &[1.0, 0.0], 2.0, 0.05).unwrap();
        let chart = FermiChart::with_radius(&e, p, (0.0, 2.0), 0.5).unwrap();
        let x = fermi_map(&e, &chart, &[0.3], 1.2).unwrap();
        // frame: F_1 = e_y with the default Gram–Schmidt completion
        let f1 = chart.base.frames[0].column(0).into_owned();
        assert!((x[0] - 1.2 - 0.3 * f1[0]).abs() < 1e-12 && (x[1] - 0.3 * f1[1]).abs() < 1e-12);
        let axis = fermi_map(&e, &chart, &[0.0], 0.7).unwrap();
        assert!((axis[0] - 0.7).abs() < 1e-12);

        let m = conformal();
        let x0 = [-1.0, 0.2];
        let eta = unit(&m, &x0, &[1.0, 0.0]);
        let p = shoot_geodesic(&m, &x0, &eta, 2.0, 0.02).unwrap();
        let chart = FermiChart::new(&m, p, (0.2, 1.8), 0.3).unwrap();
        assert!(chart.rho > 0.0);
        let s = [0.6 * chart.rho];
        let y = fermi_map(&m, &chart, &s, 1.1).unwrap();
        let (s2, r2) = fermi_inverse(&m, &chart, &y, (&[0.0], 1.0)).unwrap();
        assert!((s2[0] - s[0]).abs() < 1e-6 && (r2 - 1.1).abs() < 1e-6);
        assert!(matches!(fermi_map(&m, &chart, &[1.0], 1.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn state_at_matches_grid_node_shots() {
        let m = conformal();
        let x0 = [-1.0, 0.2];
        let eta = unit(&m, &x0, &[1.0, 0.3]);
        let coarse = shoot_geodesic(&m, &x0, &eta, 1.0, 0.1).unwrap();
        let fine = shoot_geodesic(&m, &x0, &eta, 1.0, 0.01).unwrap();
        let (x, _, f) = coarse.state_at(&m, 0.37).unwrap();
        for i in 0..2 {
            assert!((x[i] - fine.points[37][i]).abs() < 1e-10);
        }
        assert!((f - &fine.frames[37]).amax() < 1e-10);
    }
}
