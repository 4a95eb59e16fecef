//! Distances, coordinates, metric and orientation from an unlabeled family
//! of sampled spherical surfaces.
//!
//! Every surface `Σ_j` of radius `t_j` joins any two of its points by a
//! chain link of cost `2t_j` (both lie within `t_j` of the hidden center).
//! The chain distance is the cheapest sequence of such links; it bounds
//! `d(x, z)` from above and reaches it when the surfaces are small balls
//! whose diameters line up.

use crate::error::{Error, Result};
use crate::forward::SphericalSurfaceSample;
use crate::geodesics::geodesic_endpoint;
use crate::manifold::{eval_metric, ChartBox, Metric};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Sampled surfaces restricted to a region `U` of the chart.
#[derive(Debug, Clone)]
pub struct SurfaceFamily {
    pub surfaces: Vec<SphericalSurfaceSample>,
    pub region: ChartBox,
}

#[derive(Serialize, Deserialize)]
struct SurfaceRecord {
    t: f64,
    points: Vec<Vec<f64>>,
    normals: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FamilyFile {
    region: ChartBox,
    surfaces: Vec<SurfaceRecord>,
}

impl SurfaceFamily {
    pub fn new(surfaces: Vec<SphericalSurfaceSample>, region: ChartBox) -> Result<Self> {
        let dim = region.lo.len();
        for (j, s) in surfaces.iter().enumerate() {
            if !(s.t > 0.0) {
                return Err(Error::Invalid(format!("surface {j}: radius {} is not positive", s.t)));
            }
            if s.points.len() != s.normals.len() {
                return Err(Error::Invalid(format!("surface {j}: {} points but {} normals", s.points.len(), s.normals.len())));
            }
            for p in s.points.iter().chain(&s.normals) {
                if p.len() != dim {
                    return Err(Error::Invalid(format!("surface {j}: vector of length {} in dimension {dim}", p.len())));
                }
            }
            if let Some(p) = s.points.iter().find(|p| !region.contains(p)) {
                return Err(Error::Invalid(format!("surface {j}: point {p:?} lies outside the region")));
            }
        }
        Ok(SurfaceFamily { surfaces, region })
    }

    pub fn dim(&self) -> usize {
        self.region.lo.len()
    }

    pub fn point_count(&self) -> usize {
        self.surfaces.iter().map(|s| s.points.len()).sum()
    }

    /// Median distance from a sample to its nearest neighbour on the same
    /// surface, in chart units.
    pub fn sample_spacing(&self) -> f64 {
        let mut gaps: Vec<f64> = self
            .surfaces
            .iter()
            .flat_map(|s| nearest_gaps(&s.points))
            .collect();
        median(&mut gaps).unwrap_or(0.0)
    }

    /// Writes the family as JSON. Hidden centers go to a separate sidecar
    /// file when `truth_path` is given.
    pub fn write(&self, path: &Path, truth_path: Option<&Path>) -> Result<()> {
        let file = FamilyFile {
            region: self.region.clone(),
            surfaces: self
                .surfaces
                .iter()
                .map(|s| SurfaceRecord {
                    t: s.t,
                    points: s.points.clone(),
                    normals: s.normals.clone(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file).map_err(|e| Error::Io(e.to_string()))?)?;
        if let Some(tp) = truth_path {
            let centers: Vec<Option<Vec<f64>>> = self.surfaces.iter().map(|s| s.hidden_center.clone()).collect();
            std::fs::write(tp, serde_json::to_string_pretty(&centers).map_err(|e| Error::Io(e.to_string()))?)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: FamilyFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let surfaces = file
            .surfaces
            .into_iter()
            .map(|r| SphericalSurfaceSample {
                t: r.t,
                points: r.points,
                normals: r.normals,
                hidden_center: None,
            })
            .collect();
        SurfaceFamily::new(surfaces, file.region)
    }
}

fn chart_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest_gaps(points: &[Vec<f64>]) -> Vec<f64> {
    (0..points.len())
        .filter_map(|i| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| chart_dist(&points[i], q))
                .min_by(f64::total_cmp)
        })
        .collect()
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Anything that answers distance queries between chart points.
pub trait DistanceOracle: Sync {
    fn distance(&self, x: &[f64], z: &[f64]) -> Result<f64>;
}

impl<F> DistanceOracle for F
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    fn distance(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        self(x, z)
    }
}

/// Uniform hash grid over chart points for radius queries.
struct PointGrid {
    cell: f64,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
}

impl PointGrid {
    fn new(points: &[Vec<f64>], cell: f64) -> Self {
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        PointGrid { cell, buckets }
    }

    fn key(p: &[f64], cell: f64) -> Vec<i64> {
        p.iter().map(|c| (c / cell).floor() as i64).collect()
    }

    /// Indices of points in the cells touching the ball of radius `cell`.
    fn candidates(&self, p: &[f64]) -> Vec<usize> {
        let base = Self::key(p, self.cell);
        let n = base.len();
        let mut out = Vec::new();
        for combo in 0..3usize.pow(n as u32) {
            let mut c = combo;
            let key: Vec<i64> = base
                .iter()
                .map(|k| {
                    let off = (c % 3) as i64 - 1;
                    c /= 3;
                    k + off
                })
                .collect();
            if let Some(b) = self.buckets.get(&key) {
                out.extend_from_slice(b);
            }
        }
        out
    }
}

/// The chain graph of a surface family.
///
/// Nodes are the sampled points plus one hub per surface; every point is
/// joined to the hub of its surface with weight `t_j`, so a pass through a
/// hub costs exactly `2t_j`. Samples of different surfaces closer than the
/// snap radius stand for an intersection point and are joined by their
/// chart separation.
pub struct ChainGraph {
    points: Vec<Vec<f64>>,
    grid: PointGrid,
    graph: UnGraph<(), f64>,
    pub snap_radius: f64,
}

impl ChainGraph {
    /// `snap_radius` defaults to the median sample spacing.
    pub fn build(fam: &SurfaceFamily, snap_radius: Option<f64>) -> Result<Self> {
        let snap = snap_radius.unwrap_or_else(|| fam.sample_spacing());
        if !(snap > 0.0) {
            return Err(Error::Invalid(format!("snap radius {snap} must be positive")));
        }
        let mut points = Vec::with_capacity(fam.point_count());
        let mut owner = Vec::with_capacity(fam.point_count());
        let mut graph = UnGraph::<(), f64>::with_capacity(fam.point_count() + fam.surfaces.len(), 0);
        for (j, s) in fam.surfaces.iter().enumerate() {
            for p in &s.points {
                points.push(p.clone());
                owner.push(j);
                graph.add_node(());
            }
        }
        let mut next = 0usize;
        for s in &fam.surfaces {
            let hub = graph.add_node(());
            for _ in &s.points {
                graph.add_edge(NodeIndex::new(next), hub, s.t);
                next += 1;
            }
        }
        let grid = PointGrid::new(&points, snap);
        for (i, p) in points.iter().enumerate() {
            for k in grid.candidates(p) {
                if k > i && owner[k] != owner[i] {
                    let d = chart_dist(p, &points[k]);
                    if d <= snap {
                        graph.add_edge(NodeIndex::new(i), NodeIndex::new(k), d);
                    }
                }
            }
        }
        Ok(ChainGraph {
            points,
            grid,
            graph,
            snap_radius: snap,
        })
    }

    fn snap(&self, x: &[f64]) -> Result<usize> {
        let nearest = self
            .grid
            .candidates(x)
            .into_iter()
            .map(|i| (i, chart_dist(x, &self.points[i])))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((i, d)) if d <= self.snap_radius => Ok(i),
            Some((_, d)) => Err(Error::Snap {
                distance: d,
                radius: self.snap_radius,
            }),
            None => Err(Error::Snap {
                distance: f64::INFINITY,
                radius: self.snap_radius,
            }),
        }
    }

    /// Cheapest chain between the samples nearest to `x` and `z`.
    pub fn chain_distance(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        let a = self.snap(x)?;
        let b = self.snap(z)?;
        if a == b {
            return Ok(0.0);
        }
        let goal = NodeIndex::new(b);
        let costs = dijkstra(&self.graph, NodeIndex::new(a), Some(goal), |e| *e.weight());
        costs.get(&goal).copied().ok_or(Error::Disconnected)
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }
}

impl DistanceOracle for ChainGraph {
    fn distance(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        self.chain_distance(x, z)
    }
}

/// One-off chain distance; build a [`ChainGraph`] for repeated queries.
pub fn chain_distance(fam: &SurfaceFamily, x: &[f64], z: &[f64], snap_radius: Option<f64>) -> Result<f64> {
    ChainGraph::build(fam, snap_radius)?.chain_distance(x, z)
}

/// Distance coordinates of a point with the sampled Jacobian used to check
/// that they form a chart.
#[derive(Debug, Clone)]
pub struct DistanceCoordinates {
    pub coords: DVector<f64>,
    /// `∂u/∂x` fitted on the probes, rows indexed by landmark.
    pub jacobian: DMatrix<f64>,
    pub condition: f64,
}

pub const MAX_LANDMARK_CONDITION: f64 = 1e3;

/// `u_j = d̂(x, z_j)` for `n` landmarks.
///
/// The Jacobian is the least-squares affine fit of `u` over `probes`
/// (points near `x`, at least `n + 1`); a condition number above
/// [`MAX_LANDMARK_CONDITION`] means the landmarks do not separate
/// directions at `x`.
pub fn distance_coordinates(
    oracle: &dyn DistanceOracle,
    x: &[f64],
    landmarks: &[Vec<f64>],
    probes: &[Vec<f64>],
) -> Result<DistanceCoordinates> {
    let n = x.len();
    if landmarks.len() != n {
        return Err(Error::Invalid(format!("need {n} landmarks, got {}", landmarks.len())));
    }
    if probes.len() < n + 1 {
        return Err(Error::InsufficientSamples {
            needed: n + 1,
            found: probes.len(),
        });
    }
    let coords_of = |y: &[f64]| -> Result<DVector<f64>> {
        let u: Result<Vec<f64>> = landmarks.iter().map(|z| oracle.distance(y, z)).collect();
        Ok(DVector::from_vec(u?))
    };
    let coords = coords_of(x)?;
    let us: Vec<DVector<f64>> = probes.par_iter().map(|p| coords_of(p)).collect::<Result<_>>()?;
    // u(y) − u(x) ≈ J (y − x) + c
    let mut a = DMatrix::zeros(probes.len(), n + 1);
    let mut b = DMatrix::zeros(probes.len(), n);
    for (row, (p, u)) in probes.iter().zip(&us).enumerate() {
        for k in 0..n {
            a[(row, k)] = p[k] - x[k];
            b[(row, k)] = u[k] - coords[k];
        }
        a[(row, n)] = 1.0;
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::IllConditioned(e.to_string()))?;
    let jacobian = sol.rows(0, n).transpose();
    let sv = jacobian.singular_values();
    let condition = sv.max() / sv.min();
    if !(condition <= MAX_LANDMARK_CONDITION) {
        return Err(Error::DegenerateLandmarks { condition });
    }
    Ok(DistanceCoordinates {
        coords,
        jacobian,
        condition,
    })
}

/// Metric fitted in distance coordinates.
#[derive(Debug, Clone)]
pub struct MetricFit {
    pub g: DMatrix<f64>,
    /// RMS of `d̂² − ΔᵀgΔ` over the fitted pairs.
    pub residual: f64,
    pub pairs: usize,
}

/// Fits `d̂(y, y')² ≈ g_ij Δ^i Δ^j`, `Δ = u(y) − u(y')`, over all pairs of
/// the probe cloud, where `u` are distance coordinates to `landmarks`.
pub fn estimate_metric_from_distances(
    oracle: &dyn DistanceOracle,
    landmarks: &[Vec<f64>],
    probes: &[Vec<f64>],
) -> Result<MetricFit> {
    let n = landmarks.len();
    let needed = n * (n + 1);
    if probes.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            found: probes.len(),
        });
    }
    let us: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|y| landmarks.iter().map(|z| oracle.distance(y, z)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..probes.len())
        .flat_map(|i| (i + 1..probes.len()).map(move |k| (i, k)))
        .collect();
    let d2: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, k)| oracle.distance(&probes[i], &probes[k]).map(|d| d * d))
        .collect::<Result<_>>()?;
    let unknowns: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |k| (i, k))).collect();
    let mut a = DMatrix::zeros(pairs.len(), unknowns.len());
    for (row, &(i, k)) in pairs.iter().enumerate() {
        let delta: Vec<f64> = (0..n).map(|c| us[i][c] - us[k][c]).collect();
        for (col, &(p, q)) in unknowns.iter().enumerate() {
            a[(row, col)] = if p == q { delta[p] * delta[p] } else { 2.0 * delta[p] * delta[q] };
        }
    }
    let b = DVector::from_vec(d2.clone());
    let svd = a.clone().svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > 1e-10 * smax) {
        return Err(Error::IllConditioned(format!(
            "distance-coordinate design has singular values {smax:e} … {smin:e}"
        )));
    }
    let coef = svd.solve(&b, 0.0).map_err(|e| Error::IllConditioned(e.to_string()))?;
    let mut g = DMatrix::zeros(n, n);
    for (col, &(p, q)) in unknowns.iter().enumerate() {
        g[(p, q)] = coef[col];
        g[(q, p)] = coef[col];
    }
    let res = &a * &coef - &b;
    Ok(MetricFit {
        g,
        residual: (res.norm_squared() / pairs.len() as f64).sqrt(),
        pairs: pairs.len(),
    })
}

/// Outcome of the orientation test for one surface patch.
#[derive(Debug, Clone)]
pub struct OrientationResult {
    /// Normals at `x₀` that passed: a subset of `{ζ₀, −ζ₀}`.
    pub passing: Vec<Vec<f64>>,
    /// Worst focus spread over the flow steps for `+ζ₀` and `−ζ₀`.
    pub spread: [f64; 2],
    pub tolerance: f64,
}

pub const MIN_PATCH_SAMPLES: usize = 10;

/// Decides which unit normals of `Σ` at `x₀` point toward a center.
///
/// For a candidate `ζ`, the patch of samples within `patch_radius` of `x₀`
/// is flowed a distance `s` against `ζ` for `s ∈ {±ε, ±ε/2}`; if `ζ` points
/// to the center this yields the sphere of radius `t + s`, so geodesics
/// along `ζ` of length `t + s` from the flowed points meet in one point.
/// A candidate passes when the spread of those endpoints stays within
/// `3 ×` the median sample spacing for every `s`. On the patch `ζ(x)` is the
/// stored normal at `x`, signed to agree with `ζ₀`.
///
/// `m` is the metric used for the flow: the true one for validation or a
/// fitted one (e.g. a `ConstantMetric` from
/// [`estimate_metric_from_distances`]) end to end.
pub fn orientation_test<M: Metric + ?Sized>(
    m: &M,
    surface: &SphericalSurfaceSample,
    x0: &[f64],
    zeta0: &[f64],
    patch_radius: f64,
    eps: f64,
) -> Result<OrientationResult> {
    let patch: Vec<usize> = (0..surface.points.len())
        .filter(|&i| chart_dist(&surface.points[i], x0) <= patch_radius)
        .collect();
    if patch.len() < MIN_PATCH_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_PATCH_SAMPLES,
            found: patch.len(),
        });
    }
    let pts: Vec<Vec<f64>> = patch.iter().map(|&i| surface.points[i].clone()).collect();
    let mut gaps = nearest_gaps(&pts);
    let tolerance = 3.0 * median(&mut gaps).unwrap_or(0.0);
    let g0 = eval_metric(m, x0)?;
    let z0 = DVector::from_column_slice(zeta0);
    let normals: Vec<Vec<f64>> = patch
        .iter()
        .map(|&i| {
            let nu = DVector::from_column_slice(&surface.normals[i]);
            let sign = if nu.dot(&(&g0 * &z0)) >= 0.0 { 1.0 } else { -1.0 };
            (nu * sign).iter().copied().collect()
        })
        .collect();
    let steps = [eps, -eps, 0.5 * eps, -0.5 * eps];
    let mut spread = [0.0; 2];
    let mut passing = Vec::new();
    for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
        let mut worst = 0.0f64;
        for &s in &steps {
            let ends: Vec<Vec<f64>> = pts
                .par_iter()
                .zip(&normals)
                .map(|(x, nu)| {
                    let zeta: Vec<f64> = nu.iter().map(|c| sign * c).collect();
                    let zeta = unit(m, x, &zeta)?;
                    let back: Vec<f64> = zeta.iter().map(|c| -c).collect();
                    // flow by s against ζ, then shoot t + s along the transported ζ
                    let (y, v) = if s >= 0.0 {
                        let (y, w) = geodesic_endpoint(m, x, &back, s)?;
                        (y, w.iter().map(|c| -c).collect::<Vec<f64>>())
                    } else {
                        geodesic_endpoint(m, x, &zeta, -s)?
                    };
                    Ok(geodesic_endpoint(m, &y, &v, surface.t + s)?.0)
                })
                .collect::<Result<_>>()?;
            worst = worst.max(focus_spread(&ends));
        }
        spread[slot] = worst;
        if worst <= tolerance {
            passing.push(zeta0.iter().map(|c| sign * c).collect());
        }
    }
    Ok(OrientationResult {
        passing,
        spread,
        tolerance,
    })
}

fn unit<M: Metric + ?Sized>(m: &M, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let g = eval_metric(m, x)?;
    let w = DVector::from_column_slice(v);
    let norm = w.dot(&(&g * &w)).sqrt();
    if !(norm > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok((w / norm).iter().copied().collect())
}

/// Largest chart distance from the endpoints to their centroid.
fn focus_spread(ends: &[Vec<f64>]) -> f64 {
    let n = ends[0].len();
    let c: Vec<f64> = (0..n)
        .map(|k| ends.iter().map(|e| e[k]).sum::<f64>() / ends.len() as f64)
        .collect();
    ends.iter().map(|e| chart_dist(e, &c)).fold(0.0, f64::max)
}

/// Unit normal at a sample from principal component analysis of its
/// neighbours: the direction of least spread, for families stored without
/// normals.
pub fn pca_normal(points: &[Vec<f64>], at: usize, neighbours: usize) -> Result<Vec<f64>> {
    let n = points.first().map(|p| p.len()).unwrap_or(0);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| chart_dist(&points[a], &points[at]).total_cmp(&chart_dist(&points[b], &points[at])));
    let near: Vec<&Vec<f64>> = order.iter().take(neighbours + 1).map(|&i| &points[i]).collect();
    if near.len() < n + 1 {
        return Err(Error::InsufficientSamples {
            needed: n + 1,
            found: near.len(),
        });
    }
    let mean: Vec<f64> = (0..n).map(|k| near.iter().map(|p| p[k]).sum::<f64>() / near.len() as f64).collect();
    let mut cov = DMatrix::zeros(n, n);
    for p in &near {
        let d = DVector::from_iterator(n, (0..n).map(|k| p[k] - mean[k]));
        cov += &d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    Ok(eig.eigenvectors.column(k).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::sample_surface_family;
    use crate::manifold::{ConstantMetric, MetricField};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn circle(center: [f64; 2], t: f64, count: usize, arc: (f64, f64)) -> SphericalSurfaceSample {
        let (points, normals) = (0..count)
            .map(|k| {
                let a = arc.0 + (arc.1 - arc.0) * k as f64 / (count - 1).max(1) as f64;
                (
                    vec![center[0] + t * a.cos(), center[1] + t * a.sin()],
                    vec![a.cos(), a.sin()],
                )
            })
            .unzip();
        SphericalSurfaceSample {
            t,
            points,
            normals,
            hidden_center: Some(center.to_vec()),
        }
    }

    fn plane_family(surfaces: Vec<SphericalSurfaceSample>) -> SurfaceFamily {
        SurfaceFamily::new(surfaces, ChartBox::cube(2, 2.0)).unwrap()
    }

    #[test]
    fn one_surface_is_one_hop() {
        let fam = plane_family(vec![circle([0.0, 0.0], 0.3, 40, (0.0, 2.0 * PI))]);
        let g = ChainGraph::build(&fam, None).unwrap();
        let (a, b) = (&fam.surfaces[0].points[0], &fam.surfaces[0].points[7]);
        assert!((g.chain_distance(a, b).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(g.chain_distance(a, a).unwrap(), 0.0);
        assert!(matches!(g.chain_distance(a, &[1.5, 1.5]), Err(Error::Snap { .. })));
    }

    #[test]
    fn chains_cross_at_intersections() {
        // two circles of radius 0.5 centred 0.8 apart meet at (0.4, ±0.3)
        let fam = plane_family(vec![
            circle([0.0, 0.0], 0.5, 400, (0.0, 2.0 * PI)),
            circle([0.8, 0.0], 0.5, 400, (0.0, 2.0 * PI)),
            circle([1.0, 1.5], 0.2, 30, (0.0, 2.0 * PI)),
        ]);
        let g = ChainGraph::build(&fam, None).unwrap();
        let d = g.chain_distance(&[-0.5, 0.0], &[1.3, 0.0]).unwrap();
        assert!((d - 2.0).abs() < 2.0 * g.snap_radius, "{d}");
        let island = fam.surfaces[2].points[0].clone();
        assert!(matches!(g.chain_distance(&[-0.5, 0.0], &island), Err(Error::Disconnected)));
    }

    fn random_family(seed: u64, count: usize, pts: usize) -> SurfaceFamily {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = MetricField::euclidean(2);
        let u = ChartBox::cube(2, 1.0);
        let centers: Vec<Vec<f64>> = (0..count).map(|_| vec![rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)]).collect();
        let radii: Vec<f64> = (0..count).map(|_| rng.random_range(0.1..0.3)).collect();
        SurfaceFamily::new(sample_surface_family(&m, &u, &centers, &radii, pts).unwrap(), u).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn graph_metric_properties(seed in 0u64..1000, picks in proptest::collection::vec(0usize..10_000, 3)) {
            let fam = random_family(seed, 40, 60);
            let all: Vec<&Vec<f64>> = fam.surfaces.iter().flat_map(|s| &s.points).collect();
            let p: Vec<&Vec<f64>> = picks.iter().map(|i| all[i % all.len()]).collect();
            let g = ChainGraph::build(&fam, None).unwrap();
            let d = |a: &[f64], b: &[f64]| g.chain_distance(a, b).ok();
            if let (Some(ab), Some(ba)) = (d(p[0], p[1]), d(p[1], p[0])) {
                prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
                if let (Some(bc), Some(ac)) = (d(p[1], p[2]), d(p[0], p[2])) {
                    prop_assert!(ac <= ab + bc + 1e-12);
                }
                // an upper bound up to the snapped junction slack
                let truth = chart_dist(p[0], p[1]);
                prop_assert!(ab >= truth - 2.0 * 0.3);
                // adding surfaces never lengthens chains
                let mut more = fam.clone();
                more.surfaces.extend(random_family(seed + 1, 20, 60).surfaces);
                let g2 = ChainGraph::build(&more, Some(g.snap_radius)).unwrap();
                prop_assert!(g2.chain_distance(p[0], p[1]).unwrap() <= ab + 1e-12);
            }
        }
    }

    fn exact(g: DMatrix<f64>) -> impl Fn(&[f64], &[f64]) -> Result<f64> + Sync {
        move |a: &[f64], b: &[f64]| {
            let d = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
            Ok(d.dot(&(&g * &d)).sqrt())
        }
    }

    fn probes(x: &[f64], h: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| x.iter().map(|c| c + rng.random_range(-h..h)).collect())
            .collect()
    }

    #[test]
    fn distance_coordinates_first_order() {
        let d = exact(DMatrix::identity(2, 2));
        let r = 0.3;
        let lm = vec![vec![r, 0.0], vec![0.0, r]];
        let dc = distance_coordinates(&d, &[0.0, 0.0], &lm, &probes(&[0.0, 0.0], 0.01, 12, 1)).unwrap();
        assert!((dc.coords[0] - r).abs() < 1e-15 && (dc.coords[1] - r).abs() < 1e-15);
        let eps = 1e-3;
        let moved = distance_coordinates(&d, &[eps, 0.0], &lm, &probes(&[eps, 0.0], 0.01, 12, 2)).unwrap();
        assert!((dc.coords[0] - moved.coords[0] - eps).abs() < 1e-5);
        assert!((dc.condition - 1.0).abs() < 0.05, "{}", dc.condition);
        // collinear landmarks cannot separate the transverse direction
        let bad = vec![vec![r, 0.0], vec![2.0 * r, 0.0]];
        assert!(matches!(
            distance_coordinates(&d, &[0.0, 0.0], &bad, &probes(&[0.0, 0.0], 0.01, 12, 3)),
            Err(Error::DegenerateLandmarks { .. })
        ));
    }

    #[test]
    fn jacobian_is_stable_under_refinement() {
        let d = exact(DMatrix::identity(2, 2));
        let lm = vec![vec![0.3, 0.1], vec![-0.1, 0.35]];
        let x = [0.02, -0.01];
        let j: Vec<DMatrix<f64>> = [0.02, 0.01, 0.005]
            .iter()
            .map(|&h| distance_coordinates(&d, &x, &lm, &probes(&x, h, 16, 4)).unwrap().jacobian)
            .collect();
        let e1 = (&j[0] - &j[1]).norm();
        let e2 = (&j[1] - &j[2]).norm();
        assert!(e2 < 0.6 * e1, "{e1:e} {e2:e}");
    }

    /// `g` in distance coordinates from the chart metric: `J⁻ᵀ g_x J⁻¹`
    /// with `J = ∂u/∂x` by central differences of the exact distance.
    fn pullback(gx: &DMatrix<f64>, x: &[f64], lm: &[Vec<f64>]) -> DMatrix<f64> {
        let d = exact(gx.clone());
        let n = x.len();
        let h = 1e-6;
        let mut j = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            for (a, z) in lm.iter().enumerate() {
                j[(a, k)] = (d(&xp, z).unwrap() - d(&xm, z).unwrap()) / (2.0 * h);
            }
        }
        let ji = j.try_inverse().unwrap();
        ji.transpose() * gx * ji
    }

    #[test]
    fn metric_fit_matches_pullback() {
        let lm = vec![vec![0.3, 0.0], vec![0.0, 0.3]];
        let x = [0.0, 0.0];
        let fit = estimate_metric_from_distances(&exact(DMatrix::identity(2, 2)), &lm, &probes(&x, 0.01, 12, 5)).unwrap();
        // distance coordinates curve on the scale of the landmark distance:
        // O(h/r) bias
        assert!((&fit.g - DMatrix::<f64>::identity(2, 2)).norm() < 0.02, "{}", fit.g);

        // c = 2: g = δ/4
        let gx = DMatrix::identity(2, 2) * 0.25;
        let lm = vec![vec![0.3, 0.05], vec![-0.05, 0.3]];
        let truth = pullback(&gx, &x, &lm);
        let mut residuals = Vec::new();
        for h in [0.02, 0.01] {
            let fit = estimate_metric_from_distances(&exact(gx.clone()), &lm, &probes(&x, h, 16, 6)).unwrap();
            assert!((&fit.g - &truth).norm() / truth.norm() < 0.05, "{} vs {}", fit.g, truth);
            residuals.push(fit.residual);
        }
        assert!(residuals[1] < residuals[0], "{residuals:?}");
        assert!(matches!(
            estimate_metric_from_distances(&exact(gx), &lm, &probes(&x, 0.01, 4, 7)),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn circles_pick_the_center_side() {
        let m = MetricField::euclidean(2);
        let s = circle([0.1, -0.2], 0.4, 200, (0.0, 2.0 * PI));
        let x0 = s.points[20].clone();
        let outward = s.normals[20].clone();
        for eps in [0.01, 0.02, 0.04] {
            let res = orientation_test(&m, &s, &x0, &outward, 0.1, eps).unwrap();
            assert_eq!(res.passing.len(), 1, "{res:?}");
            assert!((res.passing[0][0] + outward[0]).abs() < 1e-15);
            assert!(res.spread[1] < 1e-8 && res.spread[0] > 3.0 * res.tolerance, "{res:?}");
        }
        assert!(matches!(
            orientation_test(&m, &s, &x0, &outward, 0.01, 0.01),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn equatorial_arc_passes_both_ways() {
        // polar chart (ρ, φ) of the unit sphere: the meridian φ = π/2 is the
        // circle of radius π/2 about both (π/2, 0) and (π/2, π)
        let m = MetricField::constant_curvature(2, 1.0);
        let count = 40;
        let (points, normals): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..count)
            .map(|k| {
                let rho = FRAC_PI_2 - 0.3 + 0.6 * k as f64 / (count - 1) as f64;
                (vec![rho, FRAC_PI_2], vec![0.0, 1.0 / rho.sin()])
            })
            .unzip();
        let s = SphericalSurfaceSample {
            t: FRAC_PI_2,
            points,
            normals,
            hidden_center: Some(vec![FRAC_PI_2, 0.0]),
        };
        let x0 = s.points[count / 2].clone();
        let res = orientation_test(&m, &s, &x0, &s.normals[count / 2].clone(), 0.2, 0.02).unwrap();
        assert_eq!(res.passing.len(), 2, "{res:?}");
    }

    #[test]
    fn fitted_constant_metric_flows_like_the_true_one() {
        let m = ConstantMetric {
            g: DMatrix::identity(2, 2),
            domain: ChartBox::cube(2, 5.0),
        };
        let s = circle([0.0, 0.0], 0.3, 120, (0.0, 2.0 * PI));
        let res = orientation_test(&m, &s, &s.points[0].clone(), &[-1.0, 0.0], 0.08, 0.02).unwrap();
        assert_eq!(res.passing, vec![vec![-1.0, 0.0]]);
    }

    #[test]
    fn pca_normals_of_a_circle() {
        let s = circle([0.0, 0.0], 1.0, 360, (0.0, 2.0 * PI));
        let nu = pca_normal(&s.points, 30, 6).unwrap();
        let dot = nu[0] * s.normals[30][0] + nu[1] * s.normals[30][1];
        assert!((dot.abs() - 1.0).abs() < 1e-4, "{dot}");
    }

    #[test]
    fn family_files_round_trip() {
        let fam = plane_family(vec![circle([0.0, 0.0], 0.3, 12, (0.0, 1.0))]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("family.json");
        let truth = dir.path().join("family.truth.json");
        fam.write(&p, Some(&truth)).unwrap();
        let back = SurfaceFamily::read(&p).unwrap();
        assert_eq!(back.surfaces[0].points, fam.surfaces[0].points);
        assert!(back.surfaces[0].hidden_center.is_none());
        assert!(std::fs::read_to_string(&truth).unwrap().contains("0.0"));
        std::fs::write(&p, "{\"region\": {\"lo\": [0, 0],\n \"hi\": 3}}").unwrap();
        assert!(matches!(SurfaceFamily::read(&p), Err(Error::Parse { line: 2, .. })));
    }
}
