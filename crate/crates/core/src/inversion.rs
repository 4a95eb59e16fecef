//! Recovery of the curvature coefficients `𝐑(r)` and the shape operators
//! `S(r, t)` along one geodesic from the data `S(0, t)`: the closed system
//! for `V^j = ∂_t^j K`, `K = S⁻¹`, is marched in `r`, and the data origin is
//! moved forward between steps by solving Jacobi Cauchy problems.

use crate::error::{Error, Result};
use crate::forward::{conjugate_points, jacobi_propagate, GeodesicData, JacobiMatrix, JacobiState, ShapeData};
use crate::ode::rk4_step;
use crate::series::{MatrixSeries, UniformGrid};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// `(V⁰, V¹, V², V³)` on a run of uniformly spaced `t` nodes at fixed `r`.
#[derive(Debug, Clone)]
pub struct VState {
    pub r: f64,
    /// First node and spacing of the `t` nodes.
    pub t_start: f64,
    pub dt: f64,
    /// Grid offset of each node from `t_start`; consecutive except across
    /// masked data.
    pub offsets: Vec<usize>,
    /// `v[i][j]` is `V^j(r, t_i)`.
    pub v: Vec<[DMatrix<f64>; 4]>,
}

impl VState {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn t(&self, i: usize) -> f64 {
        self.t_start + self.dt * self.offsets[i] as f64
    }

    pub fn t_end(&self) -> f64 {
        self.t(self.len() - 1)
    }

    /// Largest Frobenius norm over nodes and components.
    pub fn sup_norm(&self) -> f64 {
        self.v
            .iter()
            .flat_map(|a| a.iter().map(|m| m.norm()))
            .fold(0.0, f64::max)
    }

    fn flatten(&self) -> Vec<DMatrix<f64>> {
        self.v.iter().flat_map(|a| a.iter().cloned()).collect()
    }

    fn with_flat(&self, r: f64, flat: Vec<DMatrix<f64>>) -> Self {
        let mut v = Vec::with_capacity(flat.len() / 4);
        let mut it = flat.into_iter();
        while let (Some(a), Some(b), Some(c), Some(d)) = (it.next(), it.next(), it.next(), it.next()) {
            v.push([a, b, c, d]);
        }
        VState {
            r,
            t_start: self.t_start,
            dt: self.dt,
            offsets: self.offsets.clone(),
            v,
        }
    }
}

/// Diagnostics of the polynomial differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitDiagnostics {
    /// Largest RMS residual of the local fits.
    pub residual: f64,
    /// Residual expected from round-off alone.
    pub expected: f64,
}

const FIT_NODES: usize = 9;
const FIT_DEGREE: usize = 6;

/// Least-squares operators of the local polynomial fit: for the node at
/// offset `p` inside a stencil of `count` nodes, row `k` of `ops[p]`
/// maps samples to the `k`-th polynomial coefficient in units of the
/// node spacing.
struct FitOperators {
    degree: usize,
    ops: Vec<DMatrix<f64>>,
    vander: Vec<DMatrix<f64>>,
}

impl FitOperators {
    fn new(count: usize, degree: usize) -> Self {
        let mut ops = Vec::with_capacity(count);
        let mut vander = Vec::with_capacity(count);
        for p in 0..count {
            let a = DMatrix::from_fn(count, degree + 1, |i, k| (i as f64 - p as f64).powi(k as i32));
            let pinv = a.clone().pseudo_inverse(1e-14).expect("full-rank Vandermonde");
            ops.push(pinv);
            vander.push(a);
        }
        FitOperators { degree, ops, vander }
    }
}

/// `∂_t^j K` for `j = 0..3` at every node of a uniformly spaced run, from
/// local least-squares polynomials (degree 6 on 9 nodes; exact degree-6
/// interpolation when only 7 or 8 nodes are available).
pub fn t_derivatives(k: &[DMatrix<f64>], dt: f64) -> Result<(Vec<[DMatrix<f64>; 4]>, FitDiagnostics)> {
    let n = k.len();
    if n < 7 {
        return Err(Error::InsufficientSamples { needed: 7, found: n });
    }
    let count = n.min(FIT_NODES);
    let ops = FitOperators::new(count, FIT_DEGREE.min(count - 1));
    let dim = k[0].nrows();
    let mut out = Vec::with_capacity(n);
    let mut residual: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..n {
        let start = (i as isize - (count / 2) as isize).clamp(0, (n - count) as isize) as usize;
        let p = i - start;
        let op = &ops.ops[p];
        let mut ders: [DMatrix<f64>; 4] = std::array::from_fn(|_| DMatrix::zeros(dim, dim));
        for a in 0..dim {
            for b in 0..dim {
                let y = DMatrix::from_fn(count, 1, |q, _| k[start + q][(a, b)]);
                let c = op * &y;
                let mut fact = 1.0;
                for (j, d) in ders.iter_mut().enumerate() {
                    if j > 0 {
                        fact *= j as f64;
                    }
                    d[(a, b)] = c[(j, 0)] * fact / dt.powi(j as i32);
                }
                if count > ops.degree + 1 {
                    let res = &y - &ops.vander[p] * &c;
                    residual = residual.max(res.norm() / (count as f64).sqrt());
                }
                scale = scale.max(y.amax());
            }
        }
        out.push(ders);
    }
    let expected = 64.0 * f64::EPSILON * (1.0 + scale);
    Ok((out, FitDiagnostics { residual, expected }))
}

/// Overwrites the derivatives on the first nodes of a run that starts on the
/// diagonal `t = r`, using `K = (t − r)I + Σ_{m=3..7} c_m (t − r)^m`
/// fitted to the first nine nodes. The first three Taylor coefficients are
/// exact there, which removes the one-sided stencil error at the diagonal.
fn anchor_on_diagonal(k: &[DMatrix<f64>], dt: f64, ders: &mut [[DMatrix<f64>; 4]]) {
    let count = FIT_NODES.min(k.len());
    let powers: Vec<i32> = (3..=7).collect();
    let a = DMatrix::from_fn(count - 1, powers.len(), |i, c| ((i + 1) as f64).powi(powers[c]));
    let Some(pinv) = a.pseudo_inverse(1e-14).ok() else {
        return;
    };
    let dim = k[0].nrows();
    for row in 0..dim {
        for col in 0..dim {
            let lin = if row == col { 1.0 } else { 0.0 };
            let y = DMatrix::from_fn(count - 1, 1, |i, _| k[i + 1][(row, col)] - lin * dt * (i + 1) as f64);
            let c = &pinv * y;
            for (i, d) in ders.iter_mut().enumerate().take(count / 2 + 1) {
                let u = i as f64;
                let mut q = [0.0; 4];
                for (ci, &m) in powers.iter().enumerate() {
                    let mf = m as f64;
                    q[0] += c[ci] * u.powi(m);
                    q[1] += c[ci] * mf * u.powi(m - 1);
                    q[2] += c[ci] * mf * (mf - 1.0) * u.powi(m - 2);
                    q[3] += c[ci] * mf * (mf - 1.0) * (mf - 2.0) * u.powi(m - 3);
                }
                d[0][(row, col)] = q[0] + lin * dt * u;
                d[1][(row, col)] = q[1] / dt + lin;
                d[2][(row, col)] = q[2] / (dt * dt);
                d[3][(row, col)] = q[3] / (dt * dt * dt);
            }
        }
    }
}

/// Builds the state at `r` from `K(r, t)` on uniformly spaced nodes.
pub fn vstate_from_k(
    r: f64,
    t_start: f64,
    dt: f64,
    k: &[DMatrix<f64>],
    noise_limit: Option<f64>,
) -> Result<(VState, FitDiagnostics)> {
    vstate_from_runs(r, t_start, dt, &[(0, k.to_vec())], noise_limit)
}

/// Builds the state from several runs of consecutive nodes, each given by
/// its grid offset from `t_start` and its `K` samples. Every run is
/// differentiated on its own.
pub fn vstate_from_runs(
    r: f64,
    t_start: f64,
    dt: f64,
    runs: &[(usize, Vec<DMatrix<f64>>)],
    noise_limit: Option<f64>,
) -> Result<(VState, FitDiagnostics)> {
    let mut offsets = Vec::new();
    let mut v = Vec::new();
    let mut diag = FitDiagnostics {
        residual: 0.0,
        expected: 0.0,
    };
    for (first, k) in runs {
        let (mut ders, d) = t_derivatives(k, dt)?;
        if *first == 0 && (t_start - r).abs() < 1e-9 * dt && k[0].amax() == 0.0 {
            anchor_on_diagonal(k, dt, &mut ders);
        }
        diag.residual = diag.residual.max(d.residual);
        diag.expected = diag.expected.max(d.expected);
        if offsets.last().is_some_and(|&o| o >= *first) {
            return Err(Error::Invalid("overlapping runs".into()));
        }
        offsets.extend(*first..*first + k.len());
        v.extend(ders);
    }
    if v.is_empty() {
        return Err(Error::InsufficientSamples { needed: 7, found: 0 });
    }
    if let Some(factor) = noise_limit {
        if diag.residual > factor * diag.expected {
            return Err(Error::Noise {
                t: t_start,
                residual: diag.residual,
                limit: factor * diag.expected,
            });
        }
    }
    Ok((
        VState {
            r,
            t_start,
            dt,
            offsets,
            v,
        },
        diag,
    ))
}

/// Initial state at `r = 0` from the data on the window `[t_lo, t_hi]`.
/// A window starting at `t = 0` includes the exact value `K(0, 0) = 0`.
pub fn initial_vstate(data: &GeodesicData, window: (f64, f64), noise_limit: Option<f64>) -> Result<VState> {
    let grid = &data.t_grid;
    let dt = grid.step;
    let k_dim = data.gram.nrows();
    let mut ks = Vec::new();
    let mut t_start = None;
    if window.0 <= 1e-12 && (grid.start - dt).abs() < 1e-9 * dt {
        ks.push(DMatrix::zeros(k_dim, k_dim));
        t_start = Some(0.0);
    }
    for it in 0..grid.len {
        let t = grid.node(it);
        if t < window.0 - 1e-9 * dt || t > window.1 + 1e-9 * dt {
            continue;
        }
        if data.mask[it] {
            return Err(Error::SingularShape { t });
        }
        let kinv = data.samples[it].clone().try_inverse().ok_or(Error::SingularShape { t })?;
        if !kinv.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularShape { t });
        }
        t_start.get_or_insert(t);
        ks.push(kinv);
    }
    let t_start = t_start.ok_or(Error::OutOfWindow { r: window.0 })?;
    Ok(vstate_from_k(0.0, t_start, dt, &ks, noise_limit)?.0)
}

/// `V³(r, r)` by cubic interpolation on the four nodes nearest to `t = r`.
pub fn diag_eval(v: &VState) -> Result<DMatrix<f64>> {
    diag_eval_at(v, v.r)
}

fn diag_eval_at(v: &VState, r: f64) -> Result<DMatrix<f64>> {
    let n = v.len();
    if n < 4 || r < v.t_start - 1e-9 * v.dt || r > v.t_end() + 1e-9 * v.dt {
        return Err(Error::OutOfWindow { r });
    }
    let p = (r - v.t_start) / v.dt;
    let below = v.offsets.partition_point(|&o| (o as f64) <= p + 1e-9).max(1) - 1;
    let first = below.saturating_sub(1).min(n - 4);
    let nodes: Vec<f64> = v.offsets[first..first + 4].iter().map(|&o| o as f64).collect();
    let mut out = DMatrix::zeros(v.v[0][3].nrows(), v.v[0][3].ncols());
    for (q, &xq) in nodes.iter().enumerate() {
        let w: f64 = nodes
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != q)
            .map(|(_, &xm)| (p - xm) / (xq - xm))
            .product();
        out += &v.v[first + q][3] * w;
    }
    Ok(out)
}

/// Right-hand side of the closed system for fixed `𝐑`:
/// `(−I − V⁰RV⁰, −(V¹RV⁰+V⁰RV¹), −(V²RV⁰+V⁰RV²+2V¹RV¹),
///   −(V³RV⁰+V⁰RV³+3V²RV¹+3V¹RV²))`.
pub fn vsystem_rhs(v: &[DMatrix<f64>; 4], r: &DMatrix<f64>) -> [DMatrix<f64>; 4] {
    let id = DMatrix::identity(r.nrows(), r.ncols());
    let rv0 = r * &v[0];
    let rv1 = r * &v[1];
    let v0rv0 = &v[0] * &rv0;
    let v1rv0 = &v[1] * &rv0;
    let v0rv1 = &v[0] * &rv1;
    let v2rv0 = &v[2] * &rv0;
    let v0rv2 = &v[0] * (r * &v[2]);
    let v1rv1 = &v[1] * &rv1;
    let v3rv0 = &v[3] * &rv0;
    let v0rv3 = &v[0] * (r * &v[3]);
    let v2rv1 = &v[2] * &rv1;
    let v1rv2 = &v[1] * (r * &v[2]);
    [
        -(id + v0rv0),
        -(v1rv0 + v0rv1),
        -(v2rv0 + v0rv2 + v1rv1 * 2.0),
        -(v3rv0 + v0rv3 + v2rv1 * 3.0 + v1rv2 * 3.0),
    ]
}

/// Step-length control from the fixed-point argument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepControl {
    pub curvature_bound: f64,
    pub ball_radius: f64,
    pub lipschitz: f64,
    pub t2: f64,
}

/// `t2 = ½ min(π/(4√𝒦), 1/L(ℛ), ℛ/(2(1+4ℛ³)))` with `L(ℛ) = 6ℛ²`.
pub fn step_bound(curvature_bound: f64, ball_radius: f64) -> Result<StepControl> {
    if !(curvature_bound > 0.0) || !(ball_radius >= 1.0) {
        return Err(Error::BadBound(format!(
            "need curvature bound > 0 and ball radius >= 1, got {curvature_bound}, {ball_radius}"
        )));
    }
    let l = 6.0 * ball_radius * ball_radius;
    let t2 = 0.5
        * (std::f64::consts::PI / (4.0 * curvature_bound.sqrt()))
            .min(1.0 / l)
            .min(ball_radius / (2.0 * (1.0 + 4.0 * ball_radius.powi(3))));
    Ok(StepControl {
        curvature_bound,
        ball_radius,
        lipschitz: l,
        t2,
    })
}

/// Curvature samples produced by a march: values on the `r` nodes and at
/// the midpoints used by the RK4 stages.
#[derive(Debug, Clone)]
pub struct MarchRecord {
    pub r: Vec<f64>,
    pub nodes: Vec<DMatrix<f64>>,
    pub mids: Vec<DMatrix<f64>>,
    /// `½V³(r_end, r_end)` of the final state.
    pub end_value: DMatrix<f64>,
}

/// Marches the state from `v.r` to `r_end` with RK4 steps of size `dr`,
/// re-evaluating `𝐑 = ½V³(r, r)` at every stage.
pub fn march_vsystem(v: &VState, r_end: f64, dr: f64, ball: f64) -> Result<(VState, MarchRecord)> {
    let steps = ((r_end - v.r) / dr - 1e-9).ceil().max(0.0) as usize;
    let dt = v.dt;
    let mut state = v.clone();
    let mut rec = MarchRecord {
        r: Vec::with_capacity(steps),
        nodes: Vec::with_capacity(steps),
        mids: Vec::with_capacity(steps),
        end_value: DMatrix::zeros(0, 0),
    };
    for s in 0..steps {
        let r = v.r + dr * s as f64;
        let h = (v.r + dr * (s + 1) as f64).min(r_end) - r;
        let ahead = ((state.t_end() - (r + h)) / dt + 1e-9).floor();
        if ahead < 5.0 {
            return Err(Error::OutOfWindow { r });
        }
        let mut stage_r: Vec<(f64, DMatrix<f64>)> = Vec::with_capacity(4);
        let mut rhs = |rr: f64, y: &Vec<DMatrix<f64>>| -> Result<Vec<DMatrix<f64>>> {
            let st = v.with_flat(rr, y.clone());
            let curv = diag_eval_at(&st, rr)? * 0.5;
            let out = st.v.iter().flat_map(|a| vsystem_rhs(a, &curv)).collect();
            stage_r.push((rr, curv));
            Ok(out)
        };
        let y = rk4_step(&mut rhs, r, &state.flatten(), h)?;
        rec.r.push(r);
        rec.nodes.push(stage_r[0].1.clone());
        rec.mids.push((&stage_r[1].1 + &stage_r[2].1) * 0.5);
        state = v.with_flat(r + h, y);
        if !(state.sup_norm() <= ball) {
            return Err(Error::BlowUp { r: r + h });
        }
    }
    rec.end_value = diag_eval(&state)? * 0.5;
    Ok((state, rec))
}

/// Curvature profile on a uniform `r` grid, with midpoint values kept for
/// Jacobi integration on the same grid.
#[derive(Debug, Clone)]
pub struct CurvatureProfile {
    pub r_grid: UniformGrid,
    pub values: Vec<DMatrix<f64>>,
    pub mids: Vec<DMatrix<f64>>,
}

impl CurvatureProfile {
    /// Values on the half grid (nodes and midpoints interleaved).
    pub fn half_grid_series(&self) -> MatrixSeries {
        let mut v = Vec::with_capacity(2 * self.values.len() - 1);
        for (i, node) in self.values.iter().enumerate() {
            v.push(node.clone());
            if i + 1 < self.values.len() {
                v.push(self.mids[i].clone());
            }
        }
        let g = UniformGrid::new(self.r_grid.start, 0.5 * self.r_grid.step, v.len()).expect("non-empty");
        MatrixSeries::new(g, v).expect("sized")
    }

    /// Value at `r`: exact on nodes and midpoints, cubic in between.
    pub fn at(&self, r: f64) -> DMatrix<f64> {
        let s = self.half_grid_series();
        let p = s.grid.position(r);
        if (p - p.round()).abs() < 1e-9 && p.round() >= 0.0 && (p.round() as usize) < s.grid.len {
            return s.values[p.round() as usize].clone();
        }
        s.eval(r.clamp(s.grid.start, s.grid.end())).expect("clamped")
    }

    pub fn r_max(&self) -> f64 {
        self.r_grid.end()
    }

    pub fn max_abs_error(&self, truth: impl Fn(f64) -> DMatrix<f64>) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - truth(self.r_grid.node(i))).amax())
            .fold(0.0, f64::max)
    }
}

/// Looks up a profile on its half grid without rebuilding the series.
pub struct HalfGridLookup {
    series: MatrixSeries,
}

impl HalfGridLookup {
    pub fn new(p: &CurvatureProfile) -> Self {
        HalfGridLookup {
            series: p.half_grid_series(),
        }
    }

    pub fn at(&self, r: f64) -> DMatrix<f64> {
        let g = &self.series.grid;
        let p = g.position(r);
        let k = p.round();
        if (p - k).abs() < 1e-9 && k >= 0.0 && (k as usize) < g.len {
            return self.series.values[k as usize].clone();
        }
        self.series.eval(r.clamp(g.start, g.end())).expect("clamped")
    }
}

/// Cauchy data `j(0) = I`, `∂_r j(0) = −S`, or the equivalent right-scaled
/// pair `(K, −I)` when `S` is large.
pub fn cauchy_state(s: &DMatrix<f64>) -> Option<JacobiState> {
    if !s.iter().all(|v| v.is_finite()) {
        return None;
    }
    let k = s.nrows();
    if s.norm() <= 1.0 {
        return Some((DMatrix::identity(k, k), -s.clone()));
    }
    let kinv = s.clone().try_inverse()?;
    Some((kinv, -DMatrix::identity(k, k)))
}

/// `S(t1, t)` from the data `S(0, t)` and the curvature on `[0, t1]`, one
/// entry per `t` node; `None` where the data is masked or `j(t1)` is singular.
pub fn continue_past_step(
    profile: &CurvatureProfile,
    t1: f64,
    data: &GeodesicData,
) -> Result<Vec<Option<ShapeData>>> {
    if t1 > profile.r_max() + 1e-9 * profile.r_grid.step {
        return Err(Error::OutOfWindow { r: t1 });
    }
    let look = HalfGridLookup::new(profile);
    let curv = |r: f64| look.at(r);
    let dr = profile.r_grid.step;
    (0..data.t_grid.len)
        .map(|it| {
            let t = data.t_grid.node(it);
            if data.mask[it] {
                return Ok(None);
            }
            let Some(state) = cauchy_state(&data.samples[it]) else {
                return Ok(None);
            };
            let end = jacobi_propagate(&curv, dr, 0.0, state, t1, |_, _| {})?;
            Ok(shape_from_carried(&end, t1, t))
        })
        .collect()
}

fn shape_from_carried(state: &JacobiState, r: f64, t: f64) -> Option<ShapeData> {
    crate::forward::shape_from_state(state, r, t).ok()
}

/// `K = −j (∂_r j)⁻¹` from a carried Jacobi state.
fn k_from_carried(state: &JacobiState) -> Option<DMatrix<f64>> {
    let inv = state.1.clone().try_inverse()?;
    let k = -(&state.0 * inv);
    k.iter().all(|v| v.is_finite()).then_some(k)
}

/// Settings of the reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionOptions {
    /// Upper bound on the `t`-length of a window.
    pub max_window: f64,
    /// Step length between joints in adaptive mode.
    pub step_length: f64,
    /// Cap every step by the fixed-point bound `t2`.
    pub strict_step: bool,
    /// Prior curvature bound `𝒦`; bootstrapped from the data when absent.
    pub curvature_bound: Option<f64>,
    /// Ball radius `ℛ`; `2‖V(r_j)‖ + 1` when absent.
    pub ball_radius: Option<f64>,
    /// Nodes behind the diagonal included in windows after the first step.
    pub behind_nodes: usize,
    /// Reject data whose fit residual exceeds this multiple of the
    /// round-off expectation; `None` disables the check.
    pub noise_factor: Option<f64>,
    /// March step; defaults to the data spacing.
    pub dr: Option<f64>,
    /// Windows end before `‖K‖` exceeds this value.
    pub k_cap: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        InversionOptions {
            max_window: 0.5,
            step_length: 0.2,
            strict_step: false,
            curvature_bound: None,
            ball_radius: None,
            behind_nodes: 4,
            noise_factor: Some(1e4),
            dr: None,
            k_cap: 1e3,
        }
    }
}

/// One joint of the reconstruction.
#[derive(Debug, Clone, Serialize)]
pub struct JointInfo {
    pub r: f64,
    pub window: (f64, f64),
    pub step: StepControl,
    pub fit: FitDiagnostics,
    /// `‖𝐑(r⁻) − 𝐑(r⁺)‖_max` (zero at the first joint).
    pub jump: f64,
}

/// Result of the reconstruction along one geodesic.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub profile: CurvatureProfile,
    /// `S(r, t)` at every joint and at the final `r`, per `t` node.
    pub shapes: Vec<(f64, Vec<Option<DMatrix<f64>>>)>,
    pub joints: Vec<JointInfo>,
    /// Points conjugate to `r = 0` along the recovered geodesic.
    pub conjugate_points: Vec<f64>,
    pub t_grid: UniformGrid,
}

impl Reconstruction {
    pub fn max_joint_jump(&self) -> f64 {
        self.joints.iter().map(|j| j.jump).fold(0.0, f64::max)
    }
}

/// Runs the full layer-stripping reconstruction up to `r_max`.
pub fn reconstruct_along_geodesic(data: &GeodesicData, r_max: f64, opts: &InversionOptions) -> Result<Reconstruction> {
    let grid = data.t_grid;
    let dt = grid.step;
    let dr = opts.dr.unwrap_or(dt);
    let k_dim = data.gram.nrows();
    if (grid.start - dt).abs() > 1e-9 * dt {
        return Err(Error::Invalid("data t grid must start at its spacing".into()));
    }
    if !(r_max > 0.0) || !(dr > 0.0) {
        return Err(Error::Invalid("need r_max > 0 and dr > 0".into()));
    }
    let r_steps = (r_max / dr - 1e-9).ceil() as usize;
    let r_grid = UniformGrid::new(0.0, dr, r_steps + 1)?;
    let r_max = r_grid.end();
    if grid.end() < r_max + 10.0 * dt {
        return Err(Error::WindowExhausted { r: 0.0 });
    }

    // carried Jacobi states, one per data node
    let mut carried: Vec<Option<JacobiState>> = (0..grid.len)
        .map(|it| if data.mask[it] { None } else { cauchy_state(&data.samples[it]) })
        .collect();
    let noise = opts.noise_factor;
    let mut values: Vec<DMatrix<f64>> = Vec::with_capacity(r_grid.len);
    let mut mids: Vec<DMatrix<f64>> = Vec::with_capacity(r_grid.len);
    let mut joints: Vec<JointInfo> = Vec::new();
    let mut shapes = Vec::new();
    let mut kappa = opts.curvature_bound;
    let mut prev_end: Option<DMatrix<f64>> = None;
    let mut r_idx = 0usize;

    while r_idx < r_steps {
        let r0 = r_grid.node(r_idx);
        shapes.push((r0, shape_row(&carried, r0, &grid)));
        let window_len = match kappa {
            Some(k) if k > 0.0 => opts.max_window.min(std::f64::consts::PI / (4.0 * k.sqrt())),
            _ => opts.max_window,
        };
        let (t_start, runs) = select_window(&carried, &grid, r0, window_len, opts, k_dim)
            .map_err(|_| Error::WindowExhausted { r: r0 })?;
        if runs.iter().map(|(_, ks)| ks.len()).sum::<usize>() < FIT_NODES {
            return Err(Error::WindowExhausted { r: r0 });
        }
        let (vstate, fit) = vstate_from_runs(r0, t_start, dt, &runs, noise).map_err(|e| match e {
            Error::Noise { residual, limit, .. } => Error::Noise { t: r0, residual, limit },
            other => other,
        })?;
        let r_here = diag_eval(&vstate)? * 0.5;
        if opts.curvature_bound.is_none() {
            let est = 4.0 * r_here.amax();
            kappa = Some(kappa.unwrap_or(0.0).max(est).max(1e-6));
        }
        let ball = opts.ball_radius.unwrap_or(2.0 * vstate.sup_norm() + 1.0);
        let control = step_bound(kappa.unwrap_or(1e-6).max(1e-12), ball.max(1.0))?;
        let window_end = vstate.t_end();
        let mut len = if opts.strict_step { control.t2 } else { opts.step_length };
        len = len.min(window_end - 5.0 * dt - r0);
        let mut n_steps = (len / dr + 1e-9).floor() as usize;
        if n_steps == 0 {
            if opts.strict_step && window_end - 5.0 * dt - r0 >= dr {
                // t2 below the march step: one step of size dr keeps progress
                n_steps = 1;
            } else {
                return Err(Error::WindowExhausted { r: r0 });
            }
        }
        n_steps = n_steps.min(r_steps - r_idx);
        let r1 = r_grid.node(r_idx + n_steps);
        let jump = prev_end.as_ref().map_or(0.0, |p| (p - &r_here).amax());
        joints.push(JointInfo {
            r: r0,
            window: (vstate.t_start, window_end),
            step: control,
            fit,
            jump,
        });
        let (_, rec) = march_vsystem(&vstate, r1, dr, ball).map_err(|e| match e {
            Error::OutOfWindow { r } => Error::WindowExhausted { r },
            other => other,
        })?;
        values.extend(rec.nodes.iter().cloned());
        mids.extend(rec.mids.iter().cloned());
        // move the data origin to r1
        let seg = CurvatureProfile {
            r_grid: UniformGrid::new(r0, dr, n_steps + 1)?,
            values: rec.nodes.iter().cloned().chain(std::iter::once(rec.end_value.clone())).collect(),
            mids: rec.mids.clone(),
        };
        let look = HalfGridLookup::new(&seg);
        let curv = |r: f64| look.at(r);
        for st in carried.iter_mut() {
            if let Some(s) = st.take() {
                let moved = jacobi_propagate(&curv, dr, r0, s, r1, |_, _| {})?;
                *st = Some(moved);
            }
        }
        prev_end = Some(rec.end_value.clone());
        r_idx += n_steps;
    }
    values.push(prev_end.clone().unwrap_or_else(|| DMatrix::zeros(k_dim, k_dim)));
    shapes.push((r_max, shape_row(&carried, r_max, &grid)));
    let profile = CurvatureProfile { r_grid, values, mids };
    let conj = conjugate_points_of_profile(&profile);
    Ok(Reconstruction {
        profile,
        shapes,
        joints,
        conjugate_points: conj,
        t_grid: grid,
    })
}

fn shape_row(carried: &[Option<JacobiState>], r: f64, grid: &UniformGrid) -> Vec<Option<DMatrix<f64>>> {
    carried
        .iter()
        .enumerate()
        .map(|(it, st)| st.as_ref().and_then(|s| shape_from_carried(s, r, grid.node(it)).map(|d| d.s)))
        .collect()
}

/// Selects the window around the diagonal and returns its first node and
/// the runs of `K(r0, t)` on it as `(offset from the first node, samples)`.
/// Masked data leaves a hole between runs; a pole of `K` (or `‖K‖` above
/// the cap) ends the window three nodes early.
fn select_window(
    carried: &[Option<JacobiState>],
    grid: &UniformGrid,
    r0: f64,
    window_len: f64,
    opts: &InversionOptions,
    k_dim: usize,
) -> Result<(f64, Vec<(usize, Vec<DMatrix<f64>>)>)> {
    enum Node {
        Hole,
        Pole,
        Good(DMatrix<f64>),
    }
    let dt = grid.step;
    let classify = |it: usize| -> Node {
        let Some(st) = carried[it].as_ref() else {
            return Node::Hole;
        };
        match k_from_carried(st) {
            Some(k) if k.amax() <= opts.k_cap => Node::Good(k),
            _ => Node::Pole,
        }
    };
    if r0 <= 1e-12 {
        // exact K(0, 0) = 0 on the diagonal; the first window has no holes
        let mut ks = vec![DMatrix::zeros(k_dim, k_dim)];
        for it in 0..grid.len {
            if grid.node(it) > window_len + 1e-9 * dt {
                break;
            }
            match classify(it) {
                Node::Good(k) => ks.push(k),
                _ => {
                    ks.truncate(ks.len().saturating_sub(3));
                    break;
                }
            }
        }
        return Ok((0.0, vec![(0, ks)]));
    }
    // first node strictly ahead of r0
    let ahead = (((r0 - grid.start) / dt + 1e-9).floor() as isize + 1).max(0) as usize;
    let last = (((r0 + window_len - grid.start) / dt + 1e-9).floor() as usize).min(grid.len - 1);
    // forward part, split at holes
    let mut runs: Vec<(usize, Vec<DMatrix<f64>>)> = vec![(ahead, Vec::new())];
    for it in ahead..=last {
        match classify(it) {
            Node::Good(k) => runs.last_mut().expect("non-empty").1.push(k),
            Node::Hole => runs.push((it + 1, Vec::new())),
            Node::Pole => {
                let run = &mut runs.last_mut().expect("non-empty").1;
                run.truncate(run.len().saturating_sub(3));
                break;
            }
        }
    }
    // walk back from the diagonal: `behind_nodes` usable nodes, and on
    // until the earliest run is long enough to fit on its own
    let mut first = ahead;
    let mut back = 0;
    while first > 0 && first + 2 * FIT_NODES + opts.behind_nodes > ahead {
        if back >= opts.behind_nodes && runs[0].1.len() >= FIT_NODES {
            break;
        }
        match classify(first - 1) {
            Node::Good(k) => {
                runs[0].1.insert(0, k);
                runs[0].0 = first - 1;
                back += 1;
            }
            Node::Hole => runs.insert(0, (first - 1, Vec::new())),
            Node::Pole => break,
        }
        first -= 1;
    }
    // a hole just behind leaves an empty run starting on it
    runs.retain(|(_, ks)| !ks.is_empty());
    runs.retain(|(_, ks)| ks.len() >= 7);
    let Some(&(start, _)) = runs.first() else {
        return Err(Error::WindowExhausted { r: r0 });
    };
    let t_start = grid.node(start);
    Ok((t_start, runs.into_iter().map(|(o, ks)| (o - start, ks)).collect()))
}

/// Zeros of the Jacobi field `j(0) = 0`, `∂_r j(0) = I` along the profile.
pub fn conjugate_points_of_profile(profile: &CurvatureProfile) -> Vec<f64> {
    let k = profile.values[0].nrows();
    let look = HalfGridLookup::new(profile);
    let curv = |r: f64| look.at(r);
    let len = profile.r_grid.len;
    let mut j = vec![DMatrix::zeros(k, k); len];
    let mut dj = vec![DMatrix::zeros(k, k); len];
    let _ = jacobi_propagate(
        &curv,
        profile.r_grid.step,
        0.0,
        (DMatrix::zeros(k, k), DMatrix::identity(k, k)),
        profile.r_max(),
        |i, s| {
            if i < len {
                j[i] = s.0.clone();
                dj[i] = s.1.clone();
            }
        },
    );
    conjugate_points(&JacobiMatrix {
        r_grid: profile.r_grid,
        t_center: 0.0,
        j,
        dj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// Dataset for one geodesic with `S(0, t) = f(t)` given in closed form.
    fn synthetic(f: impl Fn(f64) -> f64, h: f64, t_max: f64) -> GeodesicData {
        let t_grid = UniformGrid::spanning(h, t_max, h).unwrap();
        GeodesicData {
            t_grid,
            samples: t_grid.nodes().iter().map(|&t| scalar(f(t))).collect(),
            mask: vec![false; t_grid.len],
            gram: DMatrix::identity(1, 1),
        }
    }

    fn sec2(t: f64) -> f64 {
        1.0 / (t.cos() * t.cos())
    }

    #[test]
    fn initial_state_flat() {
        let data = synthetic(|t| 1.0 / t, 0.01, 1.0);
        let v = initial_vstate(&data, (0.0, 0.5), None).unwrap();
        assert_eq!(v.t_start, 0.0);
        for (i, a) in v.v.iter().enumerate() {
            let t = v.t(i);
            assert!((a[0][(0, 0)] - t).abs() < 1e-12);
            assert!((a[1][(0, 0)] - 1.0).abs() < 1e-9);
            assert!(a[2][(0, 0)].abs() < 1e-6 && a[3][(0, 0)].abs() < 1e-3);
        }
    }

    #[test]
    fn initial_state_sphere_matches_symbolic_derivatives() {
        let data = synthetic(|t| 1.0 / t.tan(), 0.005, 1.0);
        let v = initial_vstate(&data, (0.3, 0.7), None).unwrap();
        let i = ((0.5 - v.t_start) / v.dt).round() as usize;
        let t = v.t(i);
        assert!((t - 0.5).abs() < 1e-12);
        let (tn, s2) = (t.tan(), sec2(t));
        let want = [tn, s2, 2.0 * s2 * tn, 2.0 * s2 * (s2 + 2.0 * tn * tn)];
        for j in 0..4 {
            let got = v.v[i][j][(0, 0)];
            assert!(((got - want[j]) / want[j]).abs() < 1e-4, "V{j}: {got} vs {}", want[j]);
        }
    }

    #[test]
    fn singular_shape_in_window_is_rejected() {
        let mut data = synthetic(|t| 1.0 / t.tan(), 0.01, 2.0);
        let it = data.t_grid.nearest(1.0);
        data.samples[it] = scalar(0.0);
        assert!(matches!(initial_vstate(&data, (0.5, 1.5), None), Err(Error::SingularShape { .. })));
    }

    #[test]
    fn diagonal_evaluation_on_model_spaces() {
        for (f, want) in [
            ((|t: f64| 1.0 / t) as fn(f64) -> f64, 0.0),
            (|t: f64| 1.0 / t.tan(), 2.0),
            (|t: f64| 1.0 / t.tanh(), -2.0),
        ] {
            let data = synthetic(f, 0.005, 0.5);
            let v = initial_vstate(&data, (0.0, 0.4), None).unwrap();
            let d = diag_eval(&v).unwrap();
            assert!((d[(0, 0)] - want).abs() < 1e-6, "{} vs {want}", d[(0, 0)]);
        }
        let data = synthetic(|t| 1.0 / t, 0.01, 0.5);
        let mut v = initial_vstate(&data, (0.0, 0.4), None).unwrap();
        v.r = 0.6;
        assert!(matches!(diag_eval(&v), Err(Error::OutOfWindow { .. })));
    }

    #[test]
    fn flat_rhs_and_sphere_rhs() {
        let id = DMatrix::identity(2, 2);
        let v: [DMatrix<f64>; 4] = std::array::from_fn(|j| DMatrix::from_element(2, 2, 0.1 * j as f64 + 0.3));
        let out = vsystem_rhs(&v, &DMatrix::zeros(2, 2));
        assert_eq!(out[0], -&id);
        assert!(out[1..].iter().all(|m| m.amax() == 0.0));

        // on the sphere V^j(r, t) = ∂_t^j tan(t − r), so ∂_r V^j = −V^{j+1}
        let t: f64 = 0.7;
        let (tn, s2) = (t.tan(), sec2(t));
        let v3 = 2.0 * s2 * (s2 + 2.0 * tn * tn);
        // fourth derivative of tan
        let v4 = 16.0 * tn + 40.0 * tn.powi(3) + 24.0 * tn.powi(5);
        let v = [scalar(tn), scalar(s2), scalar(2.0 * s2 * tn), scalar(v3)];
        let out = vsystem_rhs(&v, &scalar(1.0));
        let want = [-s2, -2.0 * s2 * tn, -v3, -v4];
        for j in 0..4 {
            assert!((out[j][(0, 0)] - want[j]).abs() < 1e-9 * want[j].abs().max(1.0), "j={j}");
        }
    }

    proptest! {
        #[test]
        fn rhs_is_quadratic_plus_constant(
            entries in prop::collection::vec(-1.0f64..1.0, 16),
            rr in prop::collection::vec(-1.0f64..1.0, 4),
            lambda in 0.1f64..3.0,
        ) {
            let v: [DMatrix<f64>; 4] = std::array::from_fn(|j| DMatrix::from_row_slice(2, 2, &entries[4 * j..4 * j + 4]));
            let r = DMatrix::from_row_slice(2, 2, &rr);
            let scaled: [DMatrix<f64>; 4] = std::array::from_fn(|j| &v[j] * lambda);
            let a = vsystem_rhs(&v, &r);
            let b = vsystem_rhs(&scaled, &r);
            let id = DMatrix::identity(2, 2);
            for j in 0..4 {
                let (mut qa, mut qb) = (a[j].clone(), b[j].clone());
                if j == 0 {
                    qa += &id;
                    qb += &id;
                }
                prop_assert!((qb - qa * lambda * lambda).amax() < 1e-10 * (1.0 + lambda * lambda));
            }
        }
    }

    #[test]
    fn march_flat_and_sphere() {
        let data = synthetic(|t| 1.0 / t, 0.01, 1.0);
        let v = initial_vstate(&data, (0.0, 0.8), None).unwrap();
        let (end, rec) = march_vsystem(&v, 0.3, 0.01, 10.0).unwrap();
        assert!(rec.nodes.iter().all(|m| m.amax() < 1e-9));
        for (i, a) in end.v.iter().enumerate() {
            assert!((a[0][(0, 0)] - (end.t(i) - 0.3)).abs() < 1e-9);
        }

        let data = synthetic(|t| 1.0 / t.tan(), 0.005, 1.0);
        let v = initial_vstate(&data, (0.0, 0.6), None).unwrap();
        let (_, rec) = march_vsystem(&v, 0.3, 0.005, 100.0).unwrap();
        for m in rec.nodes.iter().chain(&rec.mids) {
            assert!((m[(0, 0)] - 1.0).abs() < 1e-3);
        }
        // window too short for the span
        assert!(matches!(march_vsystem(&v, 0.59, 0.005, 100.0), Err(Error::OutOfWindow { .. })));
        assert!(matches!(march_vsystem(&v, 0.3, 0.005, 1.0), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn fixed_point_step_bound() {
        let c = step_bound(1.0, 2.0).unwrap();
        assert_eq!(c.lipschitz, 24.0);
        assert!((c.t2 - 0.5 * 2.0 / 66.0).abs() < 1e-15);
        assert!((c.t2 - 0.01515).abs() < 1e-5);
        let c = step_bound(0.01, 1.0).unwrap();
        assert!((c.t2 - 0.05).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for k in [0.01, 1.0, 100.0, 1e4, 1e8] {
            let t2 = step_bound(k, 1.0).unwrap().t2;
            assert!(t2 <= last && t2 <= PI / (8.0 * k.sqrt()) + 1e-15);
            last = t2;
        }
        let mut last = f64::INFINITY;
        for r in [1.0, 2.0, 4.0, 8.0] {
            let t2 = step_bound(1.0, r).unwrap().t2;
            assert!(t2 < last);
            last = t2;
        }
        assert!(matches!(step_bound(0.0, 2.0), Err(Error::BadBound(_))));
        assert!(matches!(step_bound(1.0, 0.5), Err(Error::BadBound(_))));
    }

    fn constant_profile(value: f64, r_max: f64, dr: f64) -> CurvatureProfile {
        let g = UniformGrid::spanning(0.0, r_max, dr).unwrap();
        CurvatureProfile {
            r_grid: g,
            values: vec![scalar(value); g.len],
            mids: vec![scalar(value); g.len - 1],
        }
    }

    #[test]
    fn continuation_closed_forms() {
        let data = synthetic(|t| 1.0 / t, 0.01, 3.0);
        let out = continue_past_step(&constant_profile(0.0, 1.0, 0.01), 1.0, &data).unwrap();
        for (it, s) in out.iter().enumerate() {
            let t = data.t_grid.node(it);
            if (t - 1.0).abs() < 0.02 {
                continue;
            }
            assert!((s.as_ref().unwrap().s[(0, 0)] - 1.0 / (t - 1.0)).abs() < 1e-8 * (1.0 + 1.0 / (t - 1.0).abs()));
        }

        let data = synthetic(|t| 1.0 / t.tan(), 0.005, 3.0);
        let t1 = 0.4;
        let out = continue_past_step(&constant_profile(1.0, t1, 0.005), t1, &data).unwrap();
        let mut crossed_zero = false;
        for (it, s) in out.iter().enumerate() {
            let t = data.t_grid.node(it);
            if (t - t1).abs() < 0.02 || (t - PI).abs() < 0.02 {
                continue;
            }
            let want = 1.0 / (t - t1).tan();
            let got = s.as_ref().unwrap().s[(0, 0)];
            assert!((got - want).abs() < 1e-4 * (1.0 + want.abs()), "t={t}: {got} vs {want}");
            crossed_zero |= t - t1 > FRAC_PI_2 + 0.1;
        }
        assert!(crossed_zero);
    }

    #[test]
    fn flat_reconstruction() {
        let data = synthetic(|t| 1.0 / t, 0.01, 3.8);
        let rec = reconstruct_along_geodesic(&data, 3.0, &InversionOptions::default()).unwrap();
        assert!(rec.profile.values.iter().all(|m| m.amax() < 1e-6));
        for (r, row) in &rec.shapes {
            for (it, s) in row.iter().enumerate() {
                let t = data.t_grid.node(it);
                if (t - r).abs() > 0.05 {
                    let s = s.as_ref().unwrap()[(0, 0)];
                    assert!((s - 1.0 / (t - r)).abs() < 1e-6 * (1.0 + s.abs()));
                }
            }
        }
        assert!(rec.conjugate_points.is_empty());
    }

    #[test]
    fn sphere_reconstruction_crosses_the_caustic() {
        let data = synthetic(|t| 1.0 / t.tan(), 0.01, 2.0 * PI + 0.8);
        let rec = reconstruct_along_geodesic(&data, 2.0 * PI, &InversionOptions::default()).unwrap();
        assert!(rec.profile.max_abs_error(|_| scalar(1.0)) < 1e-4);
        assert!(rec.max_joint_jump() < 1e-3);
        assert!((rec.conjugate_points[0] - PI).abs() < 1e-4);
    }

    #[test]
    fn strict_steps_stay_below_the_bound() {
        let data = synthetic(|t| 1.0 / t.tan(), 0.005, 1.6);
        let opts = InversionOptions {
            strict_step: true,
            curvature_bound: Some(1.0),
            ..Default::default()
        };
        let rec = reconstruct_along_geodesic(&data, 0.6, &opts).unwrap();
        for w in rec.joints.windows(2) {
            assert!(w[1].r - w[0].r <= w[0].step.t2.max(0.005) + 1e-12);
        }
        assert!(rec.profile.max_abs_error(|_| scalar(1.0)) < 1e-3);
    }

    #[test]
    fn short_data_exhausts_the_window() {
        let data = synthetic(|t| 1.0 / t, 0.01, 1.0);
        assert!(matches!(
            reconstruct_along_geodesic(&data, 1.0, &InversionOptions::default()),
            Err(Error::WindowExhausted { .. })
        ));
    }

    #[test]
    fn noisy_data_is_flagged() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut data = synthetic(|t| 1.0 / t.tan(), 0.005, 1.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 1e-6).unwrap();
        for s in data.samples.iter_mut() {
            s[(0, 0)] += noise.sample(&mut rng);
        }
        let err = reconstruct_along_geodesic(&data, 0.5, &InversionOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Noise { .. }), "{err:?}");
    }

    #[test]
    fn masking_is_local() {
        let data = synthetic(|t| 1.0 / t.tan(), 0.005, 3.0);
        let base = reconstruct_along_geodesic(&data, 2.0, &InversionOptions::default()).unwrap();
        for width in [1, 4] {
            let mut cut = data.clone();
            let it = cut.t_grid.nearest(1.6);
            for m in &mut cut.mask[it..it + width] {
                *m = true;
            }
            let rec = reconstruct_along_geodesic(&cut, 2.0, &InversionOptions::default()).unwrap();
            for (i, (a, b)) in base.profile.values.iter().zip(&rec.profile.values).enumerate() {
                let r = base.profile.r_grid.node(i);
                if r < 0.8 {
                    assert!((a - b).amax() < 1e-12);
                } else {
                    assert!((a - b).amax() < 1e-4, "width {width}, r {r}: {}", (a - b).amax());
                }
            }
        }
    }
}
