//! Chart-based metrics: evaluation of `g`, its first and second
//! derivatives, Christoffel symbols, the Riemann tensor and the directional
//! curvature operator, together with the catalog of analytic test metrics.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Value and coordinate derivatives of a metric at one point.
#[derive(Debug, Clone)]
pub struct MetricJet {
    pub g: DMatrix<f64>,
    /// `dg[m]` is `∂_m g`.
    pub dg: Vec<DMatrix<f64>>,
    /// `d2g[m][l]` is `∂_m ∂_l g`; empty when only first derivatives were requested.
    pub d2g: Vec<Vec<DMatrix<f64>>>,
}

/// A Riemannian metric living in a single chart.
pub trait Metric: Send + Sync {
    fn dim(&self) -> usize;

    fn in_domain(&self, x: &[f64]) -> bool;

    /// Metric value without domain checks; used by finite-difference stencils.
    fn raw_metric(&self, x: &[f64]) -> DMatrix<f64>;

    /// Metric with derivatives up to `order` (1 or 2).
    fn jet(&self, x: &[f64], order: usize) -> Result<MetricJet> {
        self.check_domain(x)?;
        Ok(finite_difference_jet(self, x, order, DEFAULT_FIRST_STEP))
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Invalid(format!(
                "point has {} coordinates, chart has {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || !self.in_domain(x) {
            return Err(Error::Domain { point: x.to_vec() });
        }
        Ok(())
    }
}

/// Step for first derivatives.
pub const DEFAULT_FIRST_STEP: f64 = 1e-5;
/// Step for second derivatives. A second difference divides round-off by
/// `h²`, so it runs on a coarser step than first derivatives.
pub const SECOND_STEP: f64 = 1e-3;

/// Central differences with one Richardson extrapolation level.
pub fn finite_difference_jet<M: Metric + ?Sized>(
    m: &M,
    x: &[f64],
    order: usize,
    h: f64,
) -> MetricJet {
    let n = m.dim();
    let g = m.raw_metric(x);
    let at = |offsets: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, d) in offsets {
            y[i] += d;
        }
        m.raw_metric(&y)
    };
    let first = |i: usize, h: f64| (at(&[(i, h)]) - at(&[(i, -h)])) / (2.0 * h);
    let dg: Vec<DMatrix<f64>> = (0..n)
        .map(|i| (first(i, 0.5 * h) * 4.0 - first(i, h)) / 3.0)
        .collect();
    let mut d2g = Vec::new();
    if order >= 2 {
        let h2 = SECOND_STEP;
        let second = |i: usize, j: usize, h: f64| {
            if i == j {
                (at(&[(i, h)]) - &g * 2.0 + at(&[(i, -h)])) / (h * h)
            } else {
                (at(&[(i, h), (j, h)]) - at(&[(i, h), (j, -h)]) - at(&[(i, -h), (j, h)])
                    + at(&[(i, -h), (j, -h)]))
                    / (4.0 * h * h)
            }
        };
        d2g = vec![vec![DMatrix::zeros(n, n); n]; n];
        for i in 0..n {
            for j in i..n {
                let v = (second(i, j, 0.5 * h2) * 4.0 - second(i, j, h2)) / 3.0;
                d2g[j][i] = v.clone();
                d2g[i][j] = v;
            }
        }
    }
    MetricJet { g, dg, d2g }
}

/// How catalog metrics obtain their derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    Analytic,
    FiniteDifference { h: f64 },
}

/// Axis-aligned box declaring the chart domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ChartBox {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        ChartBox {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }
}

/// The analytic metric families.
///
/// * `constant_curvature` lives in the polar chart
///   `dρ² + s(ρ)² dφ²` (and `dρ² + s(ρ)²(dθ² + sin²θ dφ²)` in three
///   dimensions) with `s(ρ) = sin(√κ ρ)/√κ`, `sinh` for negative `κ`.
/// * `conformal` is `g = c(x)⁻² δ` with `c = c0 + amplitude·exp(−|x−center|²/width²)`.
/// * `depth_profile` is `g = v(z)⁻² δ`, `v = v0 + gradient·z`, `z` the last coordinate.
/// * `anisotropic_diagonal` is `g = diag(a_i)`,
///   `a_i = base_i (1 + amplitude_i exp(−|x−center|²/width²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum MetricKind {
    Euclidean,
    ConstantCurvature {
        kappa: f64,
    },
    Conformal {
        #[serde(default = "one")]
        c0: f64,
        #[serde(default)]
        amplitude: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default = "one")]
        width: f64,
    },
    DepthProfile {
        v0: f64,
        gradient: f64,
    },
    AnisotropicDiagonal {
        base: Vec<f64>,
        amplitude: Vec<f64>,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default = "one")]
        width: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// A catalog metric in its chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricField {
    pub dim: usize,
    pub kind: MetricKind,
    pub derivative_mode: DerivativeMode,
    pub domain: ChartBox,
}

const POLAR_MARGIN: f64 = 1e-3;
const DEFAULT_HALF_WIDTH: f64 = 50.0;

impl MetricField {
    /// Builds a metric with the default derivative mode and chart domain of
    /// its kind.
    pub fn new(dim: usize, kind: MetricKind) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::Invalid(format!("dimension {dim} not supported")));
        }
        let derivative_mode = match kind {
            MetricKind::DepthProfile { .. } | MetricKind::AnisotropicDiagonal { .. } => {
                DerivativeMode::FiniteDifference { h: DEFAULT_FIRST_STEP }
            }
            _ => DerivativeMode::Analytic,
        };
        let domain = Self::default_domain(dim, &kind)?;
        let m = MetricField {
            dim,
            kind,
            derivative_mode,
            domain,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn euclidean(dim: usize) -> Self {
        Self::new(dim, MetricKind::Euclidean).expect("euclidean metric")
    }

    pub fn constant_curvature(dim: usize, kappa: f64) -> Self {
        Self::new(dim, MetricKind::ConstantCurvature { kappa }).expect("constant curvature")
    }

    /// `c(x) = c0 + amplitude·exp(−|x|²/width²)` centred at the origin.
    pub fn conformal_bump(dim: usize, c0: f64, amplitude: f64, width: f64) -> Self {
        Self::new(
            dim,
            MetricKind::Conformal {
                c0,
                amplitude,
                center: None,
                width,
            },
        )
        .expect("conformal metric")
    }

    pub fn with_mode(mut self, mode: DerivativeMode) -> Self {
        self.derivative_mode = mode;
        self
    }

    pub fn with_domain(mut self, domain: ChartBox) -> Self {
        self.domain = domain;
        self
    }

    fn default_domain(dim: usize, kind: &MetricKind) -> Result<ChartBox> {
        Ok(match kind {
            MetricKind::ConstantCurvature { kappa } => {
                let rho_max = if *kappa > 0.0 {
                    std::f64::consts::PI / kappa.sqrt() - POLAR_MARGIN
                } else {
                    DEFAULT_HALF_WIDTH
                };
                let mut lo = vec![POLAR_MARGIN, -1e6];
                let mut hi = vec![rho_max, 1e6];
                if dim == 3 {
                    lo = vec![POLAR_MARGIN, POLAR_MARGIN, -1e6];
                    hi = vec![rho_max, std::f64::consts::PI - POLAR_MARGIN, 1e6];
                }
                ChartBox { lo, hi }
            }
            _ => ChartBox::cube(dim, DEFAULT_HALF_WIDTH),
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim;
        let check_center = |c: &Option<Vec<f64>>| match c {
            Some(c) if c.len() != n => Err(Error::Invalid(format!(
                "center has {} coordinates, expected {n}",
                c.len()
            ))),
            _ => Ok(()),
        };
        match &self.kind {
            MetricKind::Conformal {
                c0, width, center, ..
            } => {
                check_center(center)?;
                if !(*c0 > 0.0) || !(*width > 0.0) {
                    return Err(Error::Invalid("conformal c0 and width must be positive".into()));
                }
            }
            MetricKind::DepthProfile { v0, .. } => {
                if !(*v0 > 0.0) {
                    return Err(Error::Invalid("depth profile v0 must be positive".into()));
                }
            }
            MetricKind::AnisotropicDiagonal {
                base,
                amplitude,
                center,
                width,
            } => {
                check_center(center)?;
                if base.len() != n || amplitude.len() != n {
                    return Err(Error::Invalid(format!(
                        "anisotropic metric needs {n} base and amplitude entries"
                    )));
                }
                if base.iter().any(|b| !(*b > 0.0)) || !(*width > 0.0) {
                    return Err(Error::Invalid("anisotropic base entries must be positive".into()));
                }
            }
            _ => {}
        }
        if self.domain.lo.len() != n || self.domain.hi.len() != n {
            return Err(Error::Invalid("domain box has wrong dimension".into()));
        }
        if self.derivative_mode == DerivativeMode::Analytic
            && matches!(
                self.kind,
                MetricKind::DepthProfile { .. } | MetricKind::AnisotropicDiagonal { .. }
            )
        {
            return Err(Error::Invalid(
                "depth_profile and anisotropic_diagonal use finite-difference derivatives".into(),
            ));
        }
        Ok(())
    }

    /// Checks a deserialized metric.
    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    fn bump(x: &[f64], center: &Option<Vec<f64>>, width: f64) -> (f64, Vec<f64>) {
        let d: Vec<f64> = match center {
            Some(c) => x.iter().zip(c).map(|(a, b)| a - b).collect(),
            None => x.to_vec(),
        };
        let r2: f64 = d.iter().map(|v| v * v).sum();
        ((-r2 / (width * width)).exp(), d)
    }

    fn polar_profile(kappa: f64, rho: f64) -> (f64, f64) {
        if kappa > 0.0 {
            let a = kappa.sqrt();
            ((a * rho).sin() / a, (a * rho).cos())
        } else if kappa < 0.0 {
            let a = (-kappa).sqrt();
            ((a * rho).sinh() / a, (a * rho).cosh())
        } else {
            (rho, 1.0)
        }
    }

    fn analytic_jet(&self, x: &[f64], order: usize) -> MetricJet {
        let n = self.dim;
        let zero = || DMatrix::<f64>::zeros(n, n);
        let mut dg = vec![zero(); n];
        let mut d2g = if order >= 2 { vec![vec![zero(); n]; n] } else { Vec::new() };
        let g = self.raw_metric(x);
        match &self.kind {
            MetricKind::Euclidean => {}
            MetricKind::ConstantCurvature { kappa } => {
                let (s, ds) = Self::polar_profile(*kappa, x[0]);
                let s2_r = 2.0 * s * ds;
                let s2_rr = 2.0 * (ds * ds - kappa * s * s);
                dg[0][(1, 1)] = s2_r;
                if order >= 2 {
                    d2g[0][0][(1, 1)] = s2_rr;
                }
                if n == 3 {
                    let th = x[1];
                    let (st, ct) = th.sin_cos();
                    let sin2 = st * st;
                    dg[0][(2, 2)] = s2_r * sin2;
                    dg[1][(2, 2)] = s * s * 2.0 * st * ct;
                    if order >= 2 {
                        d2g[0][0][(2, 2)] = s2_rr * sin2;
                        d2g[0][1][(2, 2)] = s2_r * 2.0 * st * ct;
                        d2g[1][0][(2, 2)] = s2_r * 2.0 * st * ct;
                        d2g[1][1][(2, 2)] = s * s * 2.0 * (2.0 * th).cos();
                    }
                }
            }
            MetricKind::Conformal {
                c0,
                amplitude,
                center,
                width,
            } => {
                let (e, d) = Self::bump(x, center, *width);
                let w2 = width * width;
                let c = c0 + amplitude * e;
                let dc: Vec<f64> = d.iter().map(|di| -2.0 * amplitude * e * di / w2).collect();
                let id = DMatrix::<f64>::identity(n, n);
                for m in 0..n {
                    dg[m] = &id * (-2.0 * dc[m] / c.powi(3));
                }
                if order >= 2 {
                    for m in 0..n {
                        for l in 0..n {
                            let delta = if m == l { 1.0 } else { 0.0 };
                            let dcc = amplitude * e * (4.0 * d[m] * d[l] / (w2 * w2) - 2.0 * delta / w2);
                            d2g[m][l] =
                                &id * (6.0 * dc[m] * dc[l] / c.powi(4) - 2.0 * dcc / c.powi(3));
                        }
                    }
                }
            }
            _ => unreachable!("finite-difference kinds have no analytic jet"),
        }
        MetricJet { g, dg, d2g }
    }
}

impl Metric for MetricField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        if !self.domain.contains(x) {
            return false;
        }
        match &self.kind {
            MetricKind::DepthProfile { v0, gradient } => v0 + gradient * x[self.dim - 1] > 0.0,
            _ => true,
        }
    }

    fn raw_metric(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        match &self.kind {
            MetricKind::Euclidean => DMatrix::identity(n, n),
            MetricKind::ConstantCurvature { kappa } => {
                let (s, _) = Self::polar_profile(*kappa, x[0]);
                let mut g = DMatrix::identity(n, n);
                g[(1, 1)] = s * s;
                if n == 3 {
                    let st = x[1].sin();
                    g[(2, 2)] = s * s * st * st;
                }
                g
            }
            MetricKind::Conformal {
                c0,
                amplitude,
                center,
                width,
            } => {
                let (e, _) = Self::bump(x, center, *width);
                let c = c0 + amplitude * e;
                DMatrix::identity(n, n) / (c * c)
            }
            MetricKind::DepthProfile { v0, gradient } => {
                let v = v0 + gradient * x[n - 1];
                DMatrix::identity(n, n) / (v * v)
            }
            MetricKind::AnisotropicDiagonal {
                base,
                amplitude,
                center,
                width,
            } => {
                let (e, _) = Self::bump(x, center, *width);
                DMatrix::from_fn(n, n, |i, j| {
                    if i == j {
                        base[i] * (1.0 + amplitude[i] * e)
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    fn jet(&self, x: &[f64], order: usize) -> Result<MetricJet> {
        self.check_domain(x)?;
        Ok(match self.derivative_mode {
            DerivativeMode::Analytic => self.analytic_jet(x, order),
            DerivativeMode::FiniteDifference { h } => finite_difference_jet(self, x, order, h),
        })
    }
}

/// A metric with constant coefficients on a box; used when only a locally
/// estimated metric is available.
#[derive(Debug, Clone)]
pub struct ConstantMetric {
    pub g: DMatrix<f64>,
    pub domain: ChartBox,
}

impl Metric for ConstantMetric {
    fn dim(&self) -> usize {
        self.g.nrows()
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        self.domain.contains(x)
    }

    fn raw_metric(&self, _x: &[f64]) -> DMatrix<f64> {
        self.g.clone()
    }

    fn jet(&self, x: &[f64], order: usize) -> Result<MetricJet> {
        self.check_domain(x)?;
        let n = self.dim();
        let z = DMatrix::zeros(n, n);
        Ok(MetricJet {
            g: self.g.clone(),
            dg: vec![z.clone(); n],
            d2g: if order >= 2 { vec![vec![z; n]; n] } else { Vec::new() },
        })
    }
}

/// Christoffel symbols `Γ^i_{jk}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Christoffel {
    pub n: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.n + j) * self.n + k] = v;
    }

    /// `Γ^i_{jk} u^j w^k`
    pub fn contract(&self, u: &[f64], w: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        acc += self.get(i, j, k) * u[j] * w[k];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Rank-4 tensor stored densely, index order `(i, j, k, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    fn zeros(n: usize) -> Self {
        Tensor4 {
            n,
            data: vec![0.0; n * n * n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[((i * self.n + j) * self.n + k) * self.n + l]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let n = self.n;
        self.data[((i * n + j) * n + k) * n + l] = v;
    }
}

/// Christoffel symbols and the Riemann tensor at one point.
#[derive(Debug, Clone)]
pub struct CurvatureTensors {
    pub christoffel: Christoffel,
    /// `R^i_{jkl}`
    pub riemann: Tensor4,
    /// `R_{ijkl} = g_{ip} R^p_{jkl}`
    pub riemann_lower: Tensor4,
}

fn inverse_metric(g: &DMatrix<f64>, x: &[f64]) -> Result<DMatrix<f64>> {
    g.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::DegenerateMetric {
            point: x.to_vec(),
            min_eigenvalue: g.clone().symmetric_eigenvalues().min(),
        })
}

/// `Γ^i_{jk} = ½ g^{ip}(∂_k g_{jp} + ∂_j g_{kp} − ∂_p g_{jk})`
pub fn christoffel_from_jet(jet: &MetricJet, ginv: &DMatrix<f64>) -> Christoffel {
    let n = jet.g.nrows();
    let mut lowered = vec![0.0; n * n * n]; // Γ_{pjk}
    for p in 0..n {
        for j in 0..n {
            for k in j..n {
                let v = 0.5 * (jet.dg[k][(j, p)] + jet.dg[j][(k, p)] - jet.dg[p][(j, k)]);
                lowered[(p * n + j) * n + k] = v;
                lowered[(p * n + k) * n + j] = v;
            }
        }
    }
    let mut out = Christoffel::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in j..n {
                let v: f64 = (0..n).map(|p| ginv[(i, p)] * lowered[(p * n + j) * n + k]).sum();
                out.set(i, j, k, v);
                out.set(i, k, j, v);
            }
        }
    }
    out
}

/// `∂_m Γ^i_{jk}` for every `m`, from a second-order jet.
pub fn christoffel_derivatives(jet: &MetricJet, ginv: &DMatrix<f64>) -> Vec<Christoffel> {
    let n = jet.g.nrows();
    (0..n)
        .map(|m| {
            // ∂_m g^{ip} = −g^{ia} ∂_m g_{ab} g^{bp}
            let dginv = -(ginv * &jet.dg[m] * ginv);
            let mut out = Christoffel::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    for k in j..n {
                        let mut acc = 0.0;
                        for p in 0..n {
                            let low = 0.5
                                * (jet.dg[k][(j, p)] + jet.dg[j][(k, p)] - jet.dg[p][(j, k)]);
                            let dlow = 0.5
                                * (jet.d2g[m][k][(j, p)] + jet.d2g[m][j][(k, p)]
                                    - jet.d2g[m][p][(j, k)]);
                            acc += dginv[(i, p)] * low + ginv[(i, p)] * dlow;
                        }
                        out.set(i, j, k, acc);
                        out.set(i, k, j, acc);
                    }
                }
            }
            out
        })
        .collect()
}

/// `R^i_{jkl} = ∂_k Γ^i_{jl} − ∂_l Γ^i_{jk} + Γ^p_{jl}Γ^i_{pk} − Γ^p_{jk}Γ^i_{pl}`
pub fn curvature_from_jet(jet: &MetricJet, x: &[f64]) -> Result<CurvatureTensors> {
    let n = jet.g.nrows();
    if jet.d2g.len() != n {
        return Err(Error::Invalid("curvature needs a second-order jet".into()));
    }
    let ginv = inverse_metric(&jet.g, x)?;
    let gamma = christoffel_from_jet(jet, &ginv);
    let dgamma = christoffel_derivatives(jet, &ginv);
    let mut riemann = Tensor4::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let mut v = dgamma[k].get(i, j, l) - dgamma[l].get(i, j, k);
                    for p in 0..n {
                        v += gamma.get(p, j, l) * gamma.get(i, p, k)
                            - gamma.get(p, j, k) * gamma.get(i, p, l);
                    }
                    riemann.set(i, j, k, l, v);
                }
            }
        }
    }
    let mut lower = Tensor4::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let v = (0..n).map(|p| jet.g[(i, p)] * riemann.get(p, j, k, l)).sum();
                    lower.set(i, j, k, l, v);
                }
            }
        }
    }
    Ok(CurvatureTensors {
        christoffel: gamma,
        riemann,
        riemann_lower: lower,
    })
}

/// Metric tensor at `x`, rejecting points outside the chart and metrics
/// with an eigenvalue below `1e-12`.
pub fn eval_metric<M: Metric + ?Sized>(m: &M, x: &[f64]) -> Result<DMatrix<f64>> {
    m.check_domain(x)?;
    let g = m.raw_metric(x);
    let min_eigenvalue = g.clone().symmetric_eigenvalues().min();
    if !(min_eigenvalue >= 1e-12) {
        return Err(Error::DegenerateMetric {
            point: x.to_vec(),
            min_eigenvalue,
        });
    }
    Ok(g)
}

pub fn christoffel<M: Metric + ?Sized>(m: &M, x: &[f64]) -> Result<Christoffel> {
    let jet = m.jet(x, 1)?;
    let ginv = inverse_metric(&jet.g, x)?;
    Ok(christoffel_from_jet(&jet, &ginv))
}

pub fn riemann<M: Metric + ?Sized>(m: &M, x: &[f64]) -> Result<CurvatureTensors> {
    let jet = m.jet(x, 2)?;
    curvature_from_jet(&jet, x)
}

/// Matrix of `V ↦ R(V, v)v` in the chart basis: `M^i_k = R^i_{jkl} v^j v^l`.
pub fn directional_curvature_from(tensors: &CurvatureTensors, v: &[f64]) -> DMatrix<f64> {
    let n = tensors.riemann.n;
    DMatrix::from_fn(n, n, |i, k| {
        let mut acc = 0.0;
        for j in 0..n {
            for l in 0..n {
                acc += tensors.riemann.get(i, j, k, l) * v[j] * v[l];
            }
        }
        acc
    })
}

pub fn directional_curvature<M: Metric + ?Sized>(
    m: &M,
    x: &[f64],
    v: &[f64],
) -> Result<DMatrix<f64>> {
    if v.iter().all(|c| *c == 0.0) {
        return Err(Error::ZeroVector);
    }
    let t = riemann(m, x)?;
    Ok(directional_curvature_from(&t, v))
}

/// Sectional curvature of the plane spanned by `u` and `w`.
pub fn sectional_curvature<M: Metric + ?Sized>(m: &M, x: &[f64], u: &[f64], w: &[f64]) -> Result<f64> {
    let t = riemann(m, x)?;
    let g = m.raw_metric(x);
    Ok(sectional_from(&t, &g, u, w))
}

pub fn sectional_from(t: &CurvatureTensors, g: &DMatrix<f64>, u: &[f64], w: &[f64]) -> f64 {
    let n = g.nrows();
    let mut num = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    num += t.riemann_lower.get(i, j, k, l) * u[i] * w[j] * u[k] * w[l];
                }
            }
        }
    }
    let uu = DVector::from_column_slice(u);
    let ww = DVector::from_column_slice(w);
    let guu = uu.dot(&(g * &uu));
    let gww = ww.dot(&(g * &ww));
    let guw = uu.dot(&(g * &ww));
    num / (guu * gww - guw * guw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn euclidean_metric_is_identity_and_flat() {
        let m = MetricField::euclidean(2);
        let g = eval_metric(&m, &[0.3, -1.2]).unwrap();
        assert_eq!(g, DMatrix::identity(2, 2));
        let t = riemann(&m, &[0.3, -1.2]).unwrap();
        assert!(t.riemann.data.iter().all(|v| *v == 0.0));
        assert!(t.christoffel.data.iter().all(|v| *v == 0.0));
        let d = directional_curvature(&m, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(d, DMatrix::zeros(2, 2));
    }

    #[test]
    fn constant_conformal_factor() {
        let m = MetricField::conformal_bump(2, 2.0, 0.0, 1.0);
        let g = eval_metric(&m, &[4.0, 1.0]).unwrap();
        assert!((g - DMatrix::identity(2, 2) * 0.25).norm() < 1e-15);
    }

    #[test]
    fn sphere_chart_values() {
        let m = MetricField::constant_curvature(2, 1.0);
        let g = eval_metric(&m, &[FRAC_PI_2, 0.0]).unwrap();
        assert!((g - DMatrix::identity(2, 2)).norm() < 1e-15);
        let c = christoffel(&m, &[FRAC_PI_4, 0.0]).unwrap();
        assert!((c.get(0, 1, 1) + 0.5).abs() < 1e-14);
    }

    #[test]
    fn domain_and_degeneracy_errors() {
        let m = MetricField::constant_curvature(2, 1.0);
        assert!(matches!(eval_metric(&m, &[4.0, 0.0]), Err(Error::Domain { .. })));
        let cm = ConstantMetric {
            g: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]),
            domain: ChartBox::cube(2, 1.0),
        };
        assert!(matches!(eval_metric(&cm, &[0.0, 0.0]), Err(Error::DegenerateMetric { .. })));
        assert_eq!(
            directional_curvature(&m, &[1.0, 0.0], &[0.0, 0.0]).unwrap_err(),
            Error::ZeroVector
        );
    }

    #[test]
    fn analytic_and_finite_difference_christoffel_agree() {
        let m = MetricField::conformal_bump(2, 1.0, 0.3, 1.0);
        let fd = m.clone().with_mode(DerivativeMode::FiniteDifference { h: 1e-5 });
        for x in [[0.1, 0.2], [-0.7, 0.4], [1.3, -0.9]] {
            let a = christoffel(&m, &x).unwrap();
            let b = christoffel(&fd, &x).unwrap();
            let diff = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6, "diff {diff}");
        }
    }

    #[test]
    fn constant_curvature_model_identity() {
        for (dim, kappa, x) in [
            (2, 1.0, vec![0.7, 0.3]),
            (2, -1.0, vec![1.1, 2.0]),
            (3, 1.0, vec![0.9, 1.2, 0.4]),
            (3, 0.25, vec![2.1, 0.8, -0.4]),
            (3, -0.5, vec![1.5, 2.0, 1.0]),
        ] {
            let m = MetricField::constant_curvature(dim, kappa);
            let t = riemann(&m, &x).unwrap();
            let g = m.raw_metric(&x);
            for i in 0..dim {
                for j in 0..dim {
                    for k in 0..dim {
                        for l in 0..dim {
                            let want = kappa * (g[(i, k)] * g[(j, l)] - g[(i, l)] * g[(j, k)]);
                            assert!((t.riemann_lower.get(i, j, k, l) - want).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sphere_directional_curvature_spectrum() {
        let m = MetricField::constant_curvature(3, 1.0);
        let x = [1.0, 1.1, 0.2];
        let g = m.raw_metric(&x);
        // unit vector along a mixed direction
        let mut v = DVector::from_vec(vec![0.3, 0.5, -0.4]);
        let nv = v.dot(&(&g * &v)).sqrt();
        v /= nv;
        let d = directional_curvature(&m, &x, v.as_slice()).unwrap();
        assert!((&d * &v).norm() < 1e-12);
        let mut eig: Vec<f64> = d.complex_eigenvalues().iter().map(|c| c.re).collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(eig[0].abs() < 1e-9 && (eig[1] - 1.0).abs() < 1e-9 && (eig[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conformal_gaussian_curvature_matches_independent_formula() {
        // K = c² Δ(log c) for g = c⁻² δ, with the Laplacian taken by
        // finite differences of log c directly.
        let m = MetricField::conformal_bump(2, 1.0, 0.3, 1.0);
        let c = |x: f64, y: f64| 1.0 + 0.3 * (-(x * x + y * y)).exp();
        for (x, y) in [(0.0, 0.0), (0.4, -0.3)] {
            let h = 1e-3;
            let lc = |a: f64, b: f64| c(a, b).ln();
            let lap = (lc(x + h, y) + lc(x - h, y) + lc(x, y + h) + lc(x, y - h) - 4.0 * lc(x, y)) / (h * h);
            let k_oracle = c(x, y).powi(2) * lap;
            let k = sectional_curvature(&m, &[x, y], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
            assert!((k - k_oracle).abs() < 1e-5, "{k} vs {k_oracle}");
        }
    }

    #[test]
    fn directional_curvature_is_contraction_of_riemann() {
        let m = MetricField::conformal_bump(2, 1.0, 0.3, 1.0);
        let x = [0.2, 0.5];
        let v = [0.6, -0.3];
        let t = riemann(&m, &x).unwrap();
        let d = directional_curvature(&m, &x, &v).unwrap();
        // g(R(V,v)v, W) = R_{ijkl} W^i v^j V^k v^l
        let g = m.raw_metric(&x);
        let gd = &g * &d;
        for w in 0..2 {
            for k in 0..2 {
                let mut acc = 0.0;
                for j in 0..2 {
                    for l in 0..2 {
                        acc += t.riemann_lower.get(w, j, k, l) * v[j] * v[l];
                    }
                }
                assert!((gd[(w, k)] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rescaled_sphere_curvatures_match() {
        // ρ' = 2ρ maps the κ/4 metric to 4 times the κ metric
        let kappa = 1.3;
        let a = MetricField::constant_curvature(2, kappa);
        let b = MetricField::constant_curvature(2, kappa / 4.0);
        for rho in [0.3, 0.9, 1.7] {
            let ka = sectional_curvature(&a, &[rho, 0.2], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
            let kb = sectional_curvature(&b, &[2.0 * rho, 0.2], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
            assert!((kb * 4.0 - ka).abs() < 1e-8);
        }
    }

    #[test]
    fn metric_config_json_shape() {
        let k: MetricKind = serde_json::from_str(r#"{"kind":"euclidean"}"#).unwrap();
        assert_eq!(k, MetricKind::Euclidean);
        let k: MetricKind =
            serde_json::from_str(r#"{"kind":"constant_curvature","params":{"kappa":1.0}}"#).unwrap();
        assert_eq!(k, MetricKind::ConstantCurvature { kappa: 1.0 });
        let k: MetricKind =
            serde_json::from_str(r#"{"kind":"conformal","params":{"amplitude":0.3}}"#).unwrap();
        assert!(matches!(k, MetricKind::Conformal { c0, .. } if c0 == 1.0));
    }

    fn catalog(dim: usize) -> Vec<MetricField> {
        let mut out = vec![
            MetricField::euclidean(dim),
            MetricField::constant_curvature(dim, 1.0),
            MetricField::constant_curvature(dim, -0.5),
            MetricField::conformal_bump(dim, 1.0, 0.3, 1.0),
            MetricField::new(dim, MetricKind::DepthProfile { v0: 1.0, gradient: 0.2 }).unwrap(),
            MetricField::new(
                dim,
                MetricKind::AnisotropicDiagonal {
                    base: (0..dim).map(|i| 1.0 + 0.5 * i as f64).collect(),
                    amplitude: (0..dim).map(|i| 0.2 - 0.1 * i as f64).collect(),
                    center: None,
                    width: 0.8,
                },
            )
            .unwrap(),
        ];
        let fd: Vec<MetricField> = out[..4]
            .iter()
            .map(|m| m.clone().with_mode(DerivativeMode::FiniteDifference { h: 1e-4 }))
            .collect();
        out.extend(fd);
        out
    }

    fn sample_point(m: &MetricField, u: &[f64]) -> Vec<f64> {
        // keep polar charts away from their singular ends, other charts in [-1, 1]^n
        (0..m.dim)
            .map(|i| {
                let (lo, hi) = (m.domain.lo[i].max(-1.0), m.domain.hi[i].min(1.5));
                let (lo, hi) = if matches!(m.kind, MetricKind::ConstantCurvature { .. }) && i + 1 < m.dim {
                    (lo.max(0.3), hi.min(1.2))
                } else {
                    (lo, hi)
                };
                lo + (hi - lo) * u[i]
            })
            .collect()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]
        #[test]
        fn riemann_symmetries_and_bianchi(u in proptest::collection::vec(0.0f64..1.0, 3), dim in 2usize..=3) {
            for m in catalog(dim) {
                let x = sample_point(&m, &u);
                let tol = match m.derivative_mode {
                    DerivativeMode::Analytic => 1e-6,
                    DerivativeMode::FiniteDifference { .. } => 1e-4,
                };
                let t = riemann(&m, &x).unwrap();
                let r = |i, j, k, l| t.riemann_lower.get(i, j, k, l);
                for i in 0..dim {
                    for j in 0..dim {
                        for k in 0..dim {
                            for l in 0..dim {
                                let v = r(i, j, k, l);
                                proptest::prop_assert!((v + r(j, i, k, l)).abs() < tol, "{:?} at {:?}", m.kind, x);
                                proptest::prop_assert!((v + r(i, j, l, k)).abs() < tol);
                                proptest::prop_assert!((v - r(k, l, i, j)).abs() < tol);
                                proptest::prop_assert!((v + r(i, k, l, j) + r(i, l, j, k)).abs() < tol);
                            }
                        }
                    }
                }
            }
        }
    }
}
