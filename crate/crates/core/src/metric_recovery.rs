//! The metric in the coordinates `(x̂, r) ↦ γ_{x̂}(r)` of the geodesics
//! leaving `Σ₀`: assembly from recovered curvature profiles, a ground-truth
//! oracle in the same chart, conversion to Fermi coordinates and error
//! reports.
//!
//! The coordinate vector `∂_{x̂ʲ}` at `(x̂, r)` is the Jacobi field
//! `J_j = Σ_m 𝐣^m_j F_m` with `J_j(0) = F_j` and `J_j(t₀) = 0`, so
//! `g(∂_{x̂ʲ}, ∂_{x̂ᵏ}) = (𝐣ᵀ ĝ 𝐣)_{jk}`, while `g_rr = 1` and `g_{r x̂} = 0`.

use crate::error::{Error, Result};
use crate::forward::{
    conjugate_points, from_row_major, jacobi_from_track, jacobi_propagate, row_major, source_point,
    CurvatureTrack, JacobiMatrix, Sigma0Spec, WavefrontDataset, XhatGrid,
};
use crate::geodesics::{fermi_map, shoot_with_frame, FermiChart};
use crate::inversion::{reconstruct_along_geodesic, CurvatureProfile, HalfGridLookup, InversionOptions, Reconstruction};
use crate::manifold::{eval_metric, sectional_curvature, Metric};
use crate::series::{cubic_stencil_start, lagrange_weights, UniformGrid};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Metric samples in the `(x̂, r)` chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedChart {
    pub dim: usize,
    pub t0: f64,
    pub xhat_grid: XhatGrid,
    pub r_grid: UniformGrid,
    /// `g_hat[x̂][r]` is `g(∂_{x̂ʲ}, ∂_{x̂ᵏ})`; NaN where nothing was recovered.
    pub g_hat: Vec<Vec<DMatrix<f64>>>,
    /// `jacobi[x̂][r]` is `𝐣(x̂, r; t₀)`.
    pub jacobi: Vec<Vec<DMatrix<f64>>>,
    /// Nodes near a zero of `det 𝐣` or beyond the recovered range.
    pub mask: Vec<Vec<bool>>,
    /// Largest deviation from `g_rr = 1`, `g_{r x̂} = 0`; zero by
    /// construction for recovered charts.
    pub gauss_defect: f64,
}

impl ReconstructedChart {
    pub fn node_count(&self) -> usize {
        self.xhat_grid.len() * self.r_grid.len
    }

    pub fn masked_fraction(&self) -> f64 {
        let masked = self.mask.iter().flatten().filter(|m| **m).count();
        masked as f64 / self.node_count().max(1) as f64
    }

    /// Smallest eigenvalue of `g_hat` over unmasked nodes.
    pub fn min_eigenvalue(&self) -> f64 {
        let mut out = f64::INFINITY;
        for (row, mrow) in self.g_hat.iter().zip(&self.mask) {
            for (g, masked) in row.iter().zip(mrow) {
                if !masked {
                    out = out.min(g.clone().symmetric_eigenvalues().min());
                }
            }
        }
        out
    }
}

/// Nodes of `grid` closer than `2·dr` to one of `roots`.
fn mask_near(roots: &[f64], grid: &UniformGrid) -> Vec<bool> {
    let w = 2.0 * grid.step;
    (0..grid.len)
        .map(|i| roots.iter().any(|r| (grid.node(i) - r).abs() < w - 1e-9 * grid.step))
        .collect()
}

type ChartRow = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<bool>);

/// One `x̂` row of the chart: solves `𝐣'' + 𝐑𝐣 = 0`, `𝐣(0) = I`,
/// `𝐣'(0) = −S(0, t₀)` with the recovered profile up to `reach`.
pub fn chart_row(
    profile: &CurvatureProfile,
    s_t0: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    r_grid: &UniformGrid,
    reach: f64,
) -> Result<ChartRow> {
    let dr = r_grid.step;
    if r_grid.start != 0.0 || (profile.r_grid.step - dr).abs() > 1e-12 * dr {
        return Err(Error::GridMismatch("chart and profile r grids differ".into()));
    }
    let k = gram.nrows();
    let nan = DMatrix::from_element(k, k, f64::NAN);
    let mut j = vec![nan.clone(); r_grid.len];
    let mut dj = vec![nan.clone(); r_grid.len];
    let last = r_grid.nearest(reach.min(profile.r_max()).min(r_grid.end()));
    let look = HalfGridLookup::new(profile);
    let curv = |r: f64| look.at(r);
    jacobi_propagate(
        &curv,
        dr,
        0.0,
        (DMatrix::identity(k, k), -s_t0),
        r_grid.node(last),
        |i, s| {
            if i <= last {
                j[i] = s.0.clone();
                dj[i] = s.1.clone();
            }
        },
    )?;
    let reached = UniformGrid::new(0.0, dr, last + 1)?;
    let roots = conjugate_points(&JacobiMatrix {
        r_grid: reached,
        t_center: f64::NEG_INFINITY,
        j: j[..=last].to_vec(),
        dj: dj[..=last].to_vec(),
    });
    let mut mask = mask_near(&roots, r_grid);
    for m in mask.iter_mut().skip(last + 1) {
        *m = true;
    }
    let g = j.iter().map(|jj| jj.transpose() * gram * jj).collect();
    Ok((g, j, mask))
}

/// Per-`x̂` reconstructions and the chart assembled from them.
#[derive(Debug, Clone)]
pub struct ChartRecovery {
    pub chart: ReconstructedChart,
    pub reconstructions: Vec<Reconstruction>,
    /// Largest `r` recovered along each geodesic.
    pub reach: Vec<f64>,
}

/// Index of `t₀` on the data grid.
fn t0_index(ds: &WavefrontDataset) -> Result<usize> {
    let it = ds.t_grid.nearest(ds.t0);
    if (ds.t_grid.node(it) - ds.t0).abs() > 1e-9 * ds.t_grid.step.max(1.0) {
        return Err(Error::Invalid(format!("t0 = {} is not a node of the t grid", ds.t0)));
    }
    Ok(it)
}

/// Reconstruction along one geodesic; when it stops early the part up to
/// one step before the failure is kept.
fn reconstruct_partial(
    data: &crate::forward::GeodesicData,
    r_max: f64,
    opts: &InversionOptions,
) -> Result<(Reconstruction, f64)> {
    match reconstruct_along_geodesic(data, r_max, opts) {
        Ok(rec) => {
            let reach = rec.profile.r_max();
            Ok((rec, reach))
        }
        Err(e @ (Error::WindowExhausted { .. } | Error::BlowUp { .. } | Error::OutOfWindow { .. })) => {
            let dr = opts.dr.unwrap_or(data.t_grid.step);
            let r = e.reached().unwrap_or(0.0);
            let partial = ((r - dr) / dr + 1e-9).floor() * dr;
            if partial < 4.0 * dr {
                return Err(e);
            }
            let rec = reconstruct_along_geodesic(data, partial, opts)?;
            let reach = rec.profile.r_max();
            Ok((rec, reach))
        }
        Err(e) => Err(e),
    }
}

/// Runs the reconstruction along every geodesic of the dataset and
/// assembles the chart on `[0, r_max]`. Geodesics that stop early leave
/// their remaining nodes masked.
pub fn recover_chart(ds: &WavefrontDataset, r_max: f64, opts: &InversionOptions) -> Result<ChartRecovery> {
    let it0 = t0_index(ds)?;
    let dr = opts.dr.unwrap_or(ds.t_grid.step);
    let steps = (r_max / dr - 1e-9).ceil() as usize;
    let r_grid = UniformGrid::new(0.0, dr, steps + 1)?;
    let rows: Vec<(Reconstruction, f64, ChartRow)> = (0..ds.xhat_grid.len())
        .into_par_iter()
        .map(|i| {
            let data = ds.slice(i);
            let (rec, reach) = reconstruct_partial(&data, r_max, opts)?;
            let row = chart_row(&rec.profile, &data.samples[it0], &data.gram, &r_grid, reach)?;
            Ok((rec, reach, row))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chart = ReconstructedChart {
        dim: ds.dim,
        t0: ds.t0,
        xhat_grid: ds.xhat_grid.clone(),
        r_grid,
        g_hat: Vec::new(),
        jacobi: Vec::new(),
        mask: Vec::new(),
        gauss_defect: 0.0,
    };
    let mut reconstructions = Vec::new();
    let mut reach = Vec::new();
    for (rec, r, (g, j, mask)) in rows {
        chart.g_hat.push(g);
        chart.jacobi.push(j);
        chart.mask.push(mask);
        reconstructions.push(rec);
        reach.push(r);
    }
    Ok(ChartRecovery {
        chart,
        reconstructions,
        reach,
    })
}

/// Five-point central difference weights at offsets `−2, −1, 1, 2`.
const FD5: [(f64, f64); 4] = [(-2.0, 1.0 / 12.0), (-1.0, -8.0 / 12.0), (1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)];

/// The true metric pulled back to the `(x̂, r)` chart. Coordinate vectors
/// `∂_{x̂ʲ}` come from five-point differences across neighbouring geodesics
/// at spacing `dxhat`; the mask covers `r = t₀` and the conjugate points of
/// the forward point-source Jacobi field.
pub fn ground_truth_chart<M: Metric + ?Sized>(
    m: &M,
    sigma: &Sigma0Spec,
    r_grid: UniformGrid,
    dxhat: f64,
) -> Result<ReconstructedChart> {
    let n = m.dim();
    sigma.validate(n)?;
    if r_grid.start != 0.0 || r_grid.len < 4 {
        return Err(Error::Invalid("chart r grid must start at 0 with at least 4 nodes".into()));
    }
    if !(dxhat > 0.0) {
        return Err(Error::Invalid("dxhat must be positive".into()));
    }
    let k = n - 1;
    let dr = r_grid.step;
    let r_end = r_grid.end();
    let geodesic_points = |xh: &[f64]| -> Result<Vec<Vec<f64>>> {
        let src = source_point(m, sigma, xh)?;
        Ok(shoot_with_frame(m, &src.point, &src.frame, r_end, dr)?.points)
    };
    type Row = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<bool>, f64);
    let rows: Vec<Row> = sigma
        .xhat
        .points()
        .par_iter()
        .map(|xh| {
            let src = source_point(m, sigma, xh)?;
            let r_path = r_end.max(sigma.t0 + 2.0 * dr);
            let path = shoot_with_frame(m, &src.point, &src.frame, r_path, dr)?;
            // ∂X/∂x̂ᵃ on every r node
            let mut tangents = vec![DMatrix::<f64>::zeros(n, k); r_grid.len];
            for a in 0..k {
                for (off, w) in FD5 {
                    let mut p = xh.clone();
                    p[a] += off * dxhat;
                    let pts = geodesic_points(&p)?;
                    for (ir, x) in pts.iter().enumerate().take(r_grid.len) {
                        for i in 0..n {
                            tangents[ir][(i, a)] += w * x[i] / dxhat;
                        }
                    }
                }
            }
            let mut g_hat = Vec::with_capacity(r_grid.len);
            let mut jac = Vec::with_capacity(r_grid.len);
            let mut defect: f64 = 0.0;
            for (ir, t) in tangents.iter().enumerate() {
                let x = &path.points[ir];
                let v = nalgebra::DVector::from_column_slice(&path.velocities[ir]);
                let g = eval_metric(m, x)?;
                g_hat.push(t.transpose() * &g * t);
                defect = defect.max((v.dot(&(&g * &v)) - 1.0).abs());
                defect = defect.max((v.transpose() * &g * t).amax());
                let finv = path.frames[ir]
                    .clone()
                    .try_inverse()
                    .ok_or(Error::SingularFrame { r: r_grid.node(ir) })?;
                jac.push((finv * t).rows(0, k).into_owned());
            }
            let track = CurvatureTrack::new(m, &path)?;
            let jm = jacobi_from_track(&track, path.r_grid, sigma.t0)?;
            let mut roots = vec![sigma.t0];
            roots.extend(conjugate_points(&jm));
            Ok((g_hat, jac, mask_near(&roots, &r_grid), defect))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chart = ReconstructedChart {
        dim: n,
        t0: sigma.t0,
        xhat_grid: sigma.xhat.clone(),
        r_grid,
        g_hat: Vec::new(),
        jacobi: Vec::new(),
        mask: Vec::new(),
        gauss_defect: 0.0,
    };
    for (g, j, mask, defect) in rows {
        chart.g_hat.push(g);
        chart.jacobi.push(j);
        chart.mask.push(mask);
        chart.gauss_defect = chart.gauss_defect.max(defect);
    }
    Ok(chart)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub q: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RProfileEntry {
    pub r: f64,
    /// `None` when every node at this `r` is masked.
    pub max_rel: Option<f64>,
}

/// Relative Frobenius errors of a recovered chart against the truth, over
/// nodes unmasked in both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartErrorReport {
    pub max_rel: f64,
    pub median_rel: f64,
    pub quantiles: Vec<Quantile>,
    pub masked_frac: f64,
    pub compared: usize,
    pub per_r_profile: Vec<RProfileEntry>,
}

fn same_grid(a: &UniformGrid, b: &UniformGrid) -> bool {
    a.len == b.len && (a.start - b.start).abs() <= 1e-12 && (a.step - b.step).abs() <= 1e-12 * a.step.abs()
}

pub fn chart_error(recovered: &ReconstructedChart, truth: &ReconstructedChart) -> Result<ChartErrorReport> {
    if recovered.dim != truth.dim {
        return Err(Error::GridMismatch(format!("dimensions {} and {}", recovered.dim, truth.dim)));
    }
    if recovered.xhat_grid != truth.xhat_grid {
        return Err(Error::GridMismatch("x̂ grids differ".into()));
    }
    if !same_grid(&recovered.r_grid, &truth.r_grid) {
        return Err(Error::GridMismatch(format!(
            "r grids differ: {:?} and {:?}",
            recovered.r_grid, truth.r_grid
        )));
    }
    let nr = truth.r_grid.len;
    let mut errors = Vec::new();
    let mut per_r = vec![None::<f64>; nr];
    let mut masked = 0usize;
    for i in 0..truth.xhat_grid.len() {
        for (ir, slot) in per_r.iter_mut().enumerate() {
            if recovered.mask[i][ir] || truth.mask[i][ir] {
                masked += 1;
                continue;
            }
            let b = &truth.g_hat[i][ir];
            let e = (&recovered.g_hat[i][ir] - b).norm() / b.norm();
            let e = if e.is_nan() { f64::INFINITY } else { e };
            errors.push(e);
            *slot = Some(slot.map_or(e, |s: f64| s.max(e)));
        }
    }
    errors.sort_by(f64::total_cmp);
    let quantile = |q: f64| -> f64 {
        if errors.is_empty() {
            return f64::NAN;
        }
        errors[((errors.len() - 1) as f64 * q).round() as usize]
    };
    Ok(ChartErrorReport {
        max_rel: quantile(1.0),
        median_rel: quantile(0.5),
        quantiles: [0.25, 0.5, 0.75, 0.9, 0.99, 1.0]
            .iter()
            .map(|&q| Quantile { q, value: quantile(q) })
            .collect(),
        masked_frac: masked as f64 / truth.node_count().max(1) as f64,
        compared: errors.len(),
        per_r_profile: per_r
            .iter()
            .enumerate()
            .map(|(ir, e)| RProfileEntry {
                r: truth.r_grid.node(ir),
                max_rel: *e,
            })
            .collect(),
    })
}

/// Fills masked nodes of `base` from charts recovered off surfaces shifted
/// back along the geodesics by `s`: the node at `r` corresponds to the
/// node at `r + s` of the shifted chart, whose `x̂` coordinates coincide
/// with those of `base`. Jacobi coefficients of filled nodes refer to the
/// shifted chart's frame.
pub fn stitch_restarts(base: &ReconstructedChart, restarts: &[(f64, ReconstructedChart)]) -> Result<ReconstructedChart> {
    let mut out = base.clone();
    for (s, c) in restarts {
        if c.xhat_grid != base.xhat_grid || c.dim != base.dim {
            return Err(Error::GridMismatch("restart chart has a different x̂ grid".into()));
        }
        if (c.r_grid.step - base.r_grid.step).abs() > 1e-12 * base.r_grid.step {
            return Err(Error::GridMismatch("restart chart has a different r spacing".into()));
        }
        let shift = s / base.r_grid.step;
        if (shift - shift.round()).abs() > 1e-6 {
            return Err(Error::Invalid(format!("restart offset {s} is not a multiple of dr")));
        }
        let shift = shift.round() as isize;
        for i in 0..base.xhat_grid.len() {
            for ir in 0..base.r_grid.len {
                let jr = ir as isize + shift;
                if !out.mask[i][ir] || jr < 0 || jr as usize >= c.r_grid.len {
                    continue;
                }
                let jr = jr as usize;
                if !c.mask[i][jr] {
                    out.g_hat[i][ir] = c.g_hat[i][jr].clone();
                    out.jacobi[i][ir] = c.jacobi[i][jr].clone();
                    out.mask[i][ir] = false;
                }
            }
        }
    }
    Ok(out)
}

/// A chart as a metric on `(x̂, r)`: `g = diag(g_hat, 1)`, tensor-product
/// cubic interpolation between nodes.
#[derive(Debug, Clone)]
pub struct ChartMetric {
    axes: Vec<UniformGrid>,
    values: Vec<DMatrix<f64>>,
    xhat: XhatGrid,
}

impl ChartMetric {
    pub fn new(chart: &ReconstructedChart) -> Result<Self> {
        let k = chart.dim - 1;
        let mut axes = Vec::with_capacity(chart.dim);
        for a in 0..k {
            axes.push(UniformGrid::new(
                chart.xhat_grid.start[a],
                chart.xhat_grid.step[a],
                chart.xhat_grid.count[a],
            )?);
        }
        axes.push(chart.r_grid);
        if axes.iter().any(|g| g.len < 4) {
            return Err(Error::Invalid("interpolating a chart needs at least 4 nodes per axis".into()));
        }
        let mut values = Vec::with_capacity(chart.node_count());
        for row in &chart.g_hat {
            for g in row {
                let mut full = DMatrix::identity(chart.dim, chart.dim);
                full.view_mut((0, 0), (k, k)).copy_from(g);
                values.push(full);
            }
        }
        Ok(ChartMetric {
            axes,
            values,
            xhat: chart.xhat_grid.clone(),
        })
    }

    fn node(&self, idx: &[usize]) -> &DMatrix<f64> {
        let k = idx.len() - 1;
        let flat = self.xhat.flat_index(&idx[..k]);
        &self.values[flat * self.axes[k].len + idx[k]]
    }
}

impl Metric for ChartMetric {
    fn dim(&self) -> usize {
        self.axes.len()
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.axes).all(|(v, g)| g.contains(*v))
    }

    fn raw_metric(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.axes.len();
        let stencils: Vec<(isize, Vec<f64>)> = x
            .iter()
            .zip(&self.axes)
            .map(|(v, g)| {
                let p = g.position(*v);
                let first = cubic_stencil_start(p, g.len);
                (first, lagrange_weights(p, first, 4))
            })
            .collect();
        let mut out = DMatrix::zeros(n, n);
        let mut idx = vec![0usize; n];
        for combo in 0..4usize.pow(n as u32) {
            let mut c = combo;
            let mut w = 1.0;
            for a in 0..n {
                let q = c % 4;
                c /= 4;
                idx[a] = stencils[a].0 as usize + q;
                w *= stencils[a].1[q];
            }
            out += self.node(&idx) * w;
        }
        out
    }
}

/// Metric sample in Fermi coordinates `(s, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FermiSample {
    pub s: Vec<f64>,
    pub r: f64,
    pub g: DMatrix<f64>,
}

/// Step of the central differences of the Fermi map.
const FERMI_FD_STEP: f64 = 1e-4;

/// `g` in the Fermi coordinates built from the geodesic through `base` with
/// initial frame `frame0` (last column the unit velocity), at each sample
/// `(s, r)`; the chart covers `|s|_∞ ≤ rho`, `r ∈ r_range`.
pub fn fermi_metric_samples<M: Metric + ?Sized>(
    m: &M,
    base: &[f64],
    frame0: &DMatrix<f64>,
    r_range: (f64, f64),
    rho: f64,
    samples: &[(Vec<f64>, f64)],
) -> Result<Vec<FermiSample>> {
    let n = m.dim();
    let dr = r_range.1 / (r_range.1 / 0.01).ceil().max(1.0);
    let path = shoot_with_frame(m, base, frame0, r_range.1, dr)?;
    let chart = FermiChart::with_radius(m, path, r_range, rho)?;
    let h = FERMI_FD_STEP;
    samples
        .iter()
        .map(|(s, r)| {
            let x = fermi_map(m, &chart, s, *r)?;
            let mut d = DMatrix::zeros(n, n);
            for c in 0..n {
                let (mut sp, mut sm) = (s.clone(), s.clone());
                let (mut rp, mut rm) = (*r, *r);
                if c < n - 1 {
                    sp[c] += h;
                    sm[c] -= h;
                } else {
                    rp += h;
                    rm -= h;
                }
                let a = fermi_map(m, &chart, &sp, rp)?;
                let b = fermi_map(m, &chart, &sm, rm)?;
                for i in 0..n {
                    d[(i, c)] = (a[i] - b[i]) / (2.0 * h);
                }
            }
            let g = eval_metric(m, &x)?;
            Ok(FermiSample {
                s: s.clone(),
                r: *r,
                g: d.transpose() * g * d,
            })
        })
        .collect()
}

/// The recovered metric in Fermi coordinates around `γ_{x̂₀}`, `x̂₀` the
/// node with flat index `ix0`. The Fermi frame starts as `F(x̂₀, 0)`, whose
/// chart components are the unit vectors because `𝐣(0) = I`; transporting
/// it in the chart metric expresses it in the Jacobi basis, `F = ∂_{x̂}𝐣⁻¹`.
pub fn to_fermi(
    chart: &ReconstructedChart,
    ix0: usize,
    r_range: (f64, f64),
    rho: f64,
    samples: &[(Vec<f64>, f64)],
) -> Result<Vec<FermiSample>> {
    if ix0 >= chart.xhat_grid.len() {
        return Err(Error::Invalid(format!("x̂ index {ix0} out of range")));
    }
    let dr = chart.r_grid.step;
    for row in &chart.mask {
        for (ir, masked) in row.iter().enumerate() {
            let r = chart.r_grid.node(ir);
            if *masked && r >= r_range.0 - 2.0 * dr && r <= r_range.1 + 2.0 * dr {
                return Err(Error::ConjugateMask { r });
            }
        }
    }
    let cm = ChartMetric::new(chart)?;
    let mut base = chart.xhat_grid.point(ix0);
    base.push(0.0);
    let frame0 = DMatrix::identity(chart.dim, chart.dim);
    fermi_metric_samples(&cm, &base, &frame0, r_range, rho, samples)
}

/// The true metric in the Fermi coordinates of the same geodesic, built
/// from the true frame `F(x̂₀, 0)`.
pub fn true_fermi<M: Metric + ?Sized>(
    m: &M,
    sigma: &Sigma0Spec,
    xhat0: &[f64],
    r_range: (f64, f64),
    rho: f64,
    samples: &[(Vec<f64>, f64)],
) -> Result<Vec<FermiSample>> {
    let src = source_point(m, sigma, xhat0)?;
    fermi_metric_samples(m, &src.point, &src.frame, r_range, rho, samples)
}

/// Sectional curvature of a coordinate plane of the chart metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionalSample {
    pub point: Vec<f64>,
    pub plane: (usize, usize),
    pub curvature: f64,
}

/// Sectional curvatures of the coordinate planes of a chart.
///
/// Planes `(∂_{x̂ᵃ}, ∂_r)` use the radial identity
/// `K = −(½G'' − ¼G'G⁻¹G')_{aa} / G_{aa}` (`' = ∂_r`, `G = g_hat`) with
/// five-point differences on the `r` nodes, so only nodes whose stencil
/// avoids masked nodes contribute. Planes spanned by two `x̂` directions
/// (three dimensions) come from the interpolated [`ChartMetric`] at the
/// centers of interior cells, which keeps the difference stencils inside
/// one cubic piece.
pub fn chart_sectional_curvatures(chart: &ReconstructedChart) -> Result<Vec<SectionalSample>> {
    let n = chart.dim;
    let k = n - 1;
    let dr = chart.r_grid.step;
    let nr = chart.r_grid.len;
    let mut out = Vec::new();
    for i in 0..chart.xhat_grid.len() {
        let xh = chart.xhat_grid.point(i);
        let g = &chart.g_hat[i];
        for ir in 2..nr.saturating_sub(2) {
            if (ir - 2..=ir + 2).any(|q| chart.mask[i][q]) {
                continue;
            }
            let d1 = (&g[ir - 2] - &g[ir - 1] * 8.0 + &g[ir + 1] * 8.0 - &g[ir + 2]) / (12.0 * dr);
            let d2 = (-&g[ir - 2] + &g[ir - 1] * 16.0 - &g[ir] * 30.0 + &g[ir + 1] * 16.0 - &g[ir + 2])
                / (12.0 * dr * dr);
            let Some(ginv) = g[ir].clone().try_inverse() else {
                continue;
            };
            let rad = &d2 * 0.5 - &d1 * ginv * &d1 * 0.25;
            let mut point = xh.clone();
            point.push(chart.r_grid.node(ir));
            for a in 0..k {
                out.push(SectionalSample {
                    point: point.clone(),
                    plane: (a, k),
                    curvature: -rad[(a, a)] / g[ir][(a, a)],
                });
            }
        }
    }
    if k < 2 {
        return Ok(out);
    }
    let cm = ChartMetric::new(chart)?;
    let lens: Vec<usize> = cm.axes.iter().map(|g| g.len).collect();
    // cells [i, i+1] with 1 ≤ i ≤ len − 3 on every axis
    let cells: Vec<usize> = lens.iter().map(|l| l - 3).collect();
    let total: usize = cells.iter().product();
    for flat in 0..total {
        let mut c = flat;
        let mut lo = vec![0usize; n];
        for a in (0..n).rev() {
            lo[a] = 1 + c % cells[a];
            c /= cells[a];
        }
        let mut touches_mask = false;
        let mut idx = vec![0usize; k];
        for combo in 0..4usize.pow(k as u32) {
            let mut q = combo;
            for a in 0..k {
                idx[a] = lo[a] - 1 + q % 4;
                q /= 4;
            }
            let row = chart.xhat_grid.flat_index(&idx);
            touches_mask |= (lo[k] - 1..=lo[k] + 2).any(|ir| chart.mask[row][ir]);
        }
        if touches_mask {
            continue;
        }
        let point: Vec<f64> = (0..n).map(|a| cm.axes[a].node(lo[a]) + 0.5 * cm.axes[a].step).collect();
        for a in 0..k {
            for b in a + 1..k {
                let mut u = vec![0.0; n];
                let mut w = vec![0.0; n];
                u[a] = 1.0;
                w[b] = 1.0;
                out.push(SectionalSample {
                    point: point.clone(),
                    plane: (a, b),
                    curvature: sectional_curvature(&cm, &point, &u, &w)?,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ChartHeader {
    dim: usize,
    t0: f64,
    xhat_grid: XhatGrid,
    r_grid: UniformGrid,
    gauss_defect: f64,
    config_hash: String,
    nodes_file: String,
}

/// Path of the CSV payload belonging to a chart header file.
pub fn nodes_path(json_path: &Path) -> PathBuf {
    let stem = json_path.file_stem().and_then(|s| s.to_str()).unwrap_or("chart");
    json_path.with_file_name(format!("{stem}.nodes.csv"))
}

/// Writes the JSON header and one CSV row per node:
/// `x̂ indices, r, g_hat row-major, 𝐣 row-major, masked`.
pub fn write_chart(chart: &ReconstructedChart, json_path: &Path, config_hash: &str) -> Result<()> {
    let csv_path = nodes_path(json_path);
    let header = ChartHeader {
        dim: chart.dim,
        t0: chart.t0,
        xhat_grid: chart.xhat_grid.clone(),
        r_grid: chart.r_grid,
        gauss_defect: chart.gauss_defect,
        config_hash: config_hash.to_string(),
        nodes_file: csv_path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(json_path, json + "\n")?;
    let k = chart.dim - 1;
    let mut out = format!("# config_hash={config_hash}\n");
    for a in 1..=k {
        let _ = write!(out, "i_xhat_{a},");
    }
    out.push_str("r");
    for prefix in ["g", "j"] {
        for a in 1..=k {
            for b in 1..=k {
                let _ = write!(out, ",{prefix}_{a}{b}");
            }
        }
    }
    out.push_str(",masked\n");
    for i in 0..chart.xhat_grid.len() {
        let idx = chart.xhat_grid.multi_index(i);
        for ir in 0..chart.r_grid.len {
            for v in &idx {
                let _ = write!(out, "{v},");
            }
            let _ = write!(out, "{}", chart.r_grid.node(ir));
            for v in row_major(&chart.g_hat[i][ir]).into_iter().chain(row_major(&chart.jacobi[i][ir])) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", u8::from(chart.mask[i][ir]));
        }
    }
    std::fs::write(csv_path, out)?;
    Ok(())
}

/// Reads a chart written by [`write_chart`] with its config hash.
pub fn read_chart(json_path: &Path) -> Result<(ReconstructedChart, String)> {
    let file = json_path.display().to_string();
    let text = std::fs::read_to_string(json_path)?;
    let h: ChartHeader = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: file.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if !(h.dim == 2 || h.dim == 3) || h.xhat_grid.count.len() != h.dim - 1 {
        return Err(Error::Parse {
            file,
            line: 0,
            message: "dim must be 2 or 3 with one x̂ axis per transverse dimension".into(),
        });
    }
    let k = h.dim - 1;
    let nx = h.xhat_grid.len();
    let nr = h.r_grid.len;
    let csv_path = json_path.with_file_name(&h.nodes_file);
    let csv_name = csv_path.display().to_string();
    let body = std::fs::read_to_string(&csv_path)?;
    let perr = |line: usize, message: String| Error::Parse {
        file: csv_name.clone(),
        line,
        message,
    };
    let nan = DMatrix::from_element(k, k, f64::NAN);
    let mut g_hat = vec![vec![nan.clone(); nr]; nx];
    let mut jacobi = vec![vec![nan; nr]; nx];
    let mut mask = vec![vec![true; nr]; nx];
    let mut seen = vec![vec![false; nr]; nx];
    let width = k + 1 + 2 * k * k + 1;
    let mut header_seen = false;
    for (ln, line) in body.lines().enumerate() {
        let line_no = ln + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if !line.starts_with("i_xhat_1") {
                return Err(perr(line_no, "missing column header".into()));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(perr(line_no, format!("expected {width} fields, found {}", fields.len())));
        }
        let idx = fields[..k]
            .iter()
            .map(|f| f.parse::<usize>().map_err(|_| perr(line_no, format!("bad index {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if idx.iter().zip(&h.xhat_grid.count).any(|(i, c)| i >= c) {
            return Err(perr(line_no, "x̂ index out of range".into()));
        }
        let nums = fields[k..width - 1]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| perr(line_no, format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let pos = h.r_grid.position(nums[0]);
        if (pos - pos.round()).abs() > 1e-6 || pos.round() < 0.0 || pos.round() as usize >= nr {
            return Err(perr(line_no, format!("r = {} is not a node of the r grid", nums[0])));
        }
        let ir = pos.round() as usize;
        let i = h.xhat_grid.flat_index(&idx);
        g_hat[i][ir] = from_row_major(k, &nums[1..1 + k * k])?;
        jacobi[i][ir] = from_row_major(k, &nums[1 + k * k..])?;
        mask[i][ir] = match fields[width - 1] {
            "0" => false,
            "1" => true,
            other => return Err(perr(line_no, format!("bad mask flag {other:?}"))),
        };
        seen[i][ir] = true;
    }
    if seen.iter().flatten().any(|s| !s) {
        return Err(perr(0, "node rows missing".into()));
    }
    let chart = ReconstructedChart {
        dim: h.dim,
        t0: h.t0,
        xhat_grid: h.xhat_grid,
        r_grid: h.r_grid,
        g_hat,
        jacobi,
        mask,
        gauss_defect: h.gauss_defect,
    };
    Ok((chart, h.config_hash))
}
