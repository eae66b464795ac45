//! Dataset accumulation, null-vector extraction, noise-parameter search and
//! the ribbon-smoothed variant.
//!
//! Reductions split the cloud into fixed chunks of [`CHUNK`] points, reduce
//! each chunk in parallel and merge the partial sums in chunk order, so every
//! result is bit-identical whatever the number of threads.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{AtomTable, Basis, BasisSpec};
use crate::cloud::PointCloud;
use crate::compensation::{
    build_plan, instantiate, unpack_upper, upper_len, CompensationEvaluator, CompensationPlan, Workspace,
};
use crate::error::{FitError, Result};
use crate::noise::{NoiseFamily, NoiseModel};
use crate::shapes::{normalize, AffineTransform, NormalizeMode};

/// Points per reduction chunk.
pub const CHUNK: usize = 4096;

/// Relative spectral gap below which the null space is reported as degenerate.
pub const GAP_WARNING: f64 = 1e-8;

/// Condition number above which the smoothed solve is regularized.
pub const SMOOTHED_MAX_CONDITION: f64 = 1e12;

/// Ridge used for ill-conditioned smoothed solves, relative to `trace / N`.
pub const SMOOTHED_RIDGE: f64 = 1e-10;

/// Default ribbon offset.
pub const DEFAULT_SMOOTHING_C: f64 = 0.05;

/// Running sums of compensated matrices and, optionally, feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    features: usize,
    count: usize,
    skipped: usize,
    matrix_sum: Vec<f64>,
    vector_sum: Option<Vec<f64>>,
}

impl MomentAccumulator {
    pub fn new(features: usize, with_vector: bool) -> Self {
        Self {
            features,
            count: 0,
            skipped: 0,
            matrix_sum: vec![0.0; upper_len(features)],
            vector_sum: with_vector.then(|| vec![0.0; features]),
        }
    }

    /// Adds one point. Points with non-finite coordinates are counted in
    /// [`MomentAccumulator::skipped`] instead of being added.
    pub fn add(&mut self, evaluator: &CompensationEvaluator, y: &[f64], ws: &mut Workspace) -> Result<()> {
        match evaluator.add_point(y, ws, &mut self.matrix_sum, self.vector_sum.as_deref_mut()) {
            Ok(()) => {
                self.count += 1;
                Ok(())
            }
            Err(FitError::NonFinite) => {
                self.skipped += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// Adds the counts and sums of `other`.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        assert_eq!(self.features, other.features, "merging accumulators of different bases");
        self.count += other.count;
        self.skipped += other.skipped;
        for (a, b) in self.matrix_sum.iter_mut().zip(&other.matrix_sum) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.vector_sum, &other.vector_sum) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Packed upper triangle of the running matrix sum.
    pub fn matrix_sum(&self) -> &[f64] {
        &self.matrix_sum
    }

    pub fn vector_sum(&self) -> Option<&[f64]> {
        self.vector_sum.as_deref()
    }

    /// `(1/L) sum Mhat(y)` as a full symmetric matrix.
    pub fn mean_matrix(&self) -> Result<DMatrix<f64>> {
        if self.count == 0 {
            return Err(FitError::EmptyDataset);
        }
        Ok(unpack_upper(self.features, &self.matrix_sum) / self.count as f64)
    }

    /// `(1/L) sum bhat(y)`, if vectors were accumulated.
    pub fn mean_vector(&self) -> Option<Vec<f64>> {
        let count = self.count.max(1) as f64;
        self.vector_sum.as_ref().map(|v| v.iter().map(|x| x / count).collect())
    }
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| FitError::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Chunked parallel reduction with an in-order merge.
fn reduce_chunks<S: Send>(
    cloud: &PointCloud,
    init: impl Fn() -> S + Sync,
    step: impl Fn(&mut S, &[f64]) -> Result<()> + Sync,
    merge: impl Fn(&mut S, S),
) -> Result<S> {
    let n = cloud.dim();
    let parts: Vec<Result<S>> = cloud
        .coords()
        .par_chunks(CHUNK * n)
        .map(|chunk| {
            let mut state = init();
            for p in chunk.chunks_exact(n) {
                step(&mut state, p)?;
            }
            Ok(state)
        })
        .collect();
    let mut total = init();
    for part in parts {
        merge(&mut total, part?);
    }
    Ok(total)
}

fn check_dim(cloud: &PointCloud, spec: &BasisSpec) -> Result<()> {
    if cloud.dim() != spec.n {
        return Err(FitError::DimensionMismatch { expected: spec.n, got: cloud.dim() });
    }
    Ok(())
}

/// Accumulates `Mhat` (and `bhat` when `with_vector`) over a cloud in parallel.
pub fn accumulate(evaluator: &CompensationEvaluator, cloud: &PointCloud, with_vector: bool) -> Result<MomentAccumulator> {
    check_dim(cloud, evaluator.basis().spec())?;
    let n = evaluator.len();
    let acc = reduce_chunks(
        cloud,
        || (MomentAccumulator::new(n, with_vector), evaluator.workspace()),
        |(acc, ws), y| acc.add(evaluator, y, ws),
        |(total, _), (part, _)| total.merge(&part),
    )?;
    Ok(acc.0)
}

/// Mean of the extended feature vector over the finite points of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedMean {
    pub mean: Vec<f64>,
    pub count: usize,
    pub skipped: usize,
}

/// Computes the mean extended feature vector. Compensation is linear in
/// these features, so one pass serves every noise parameter.
pub fn extended_mean(extended: &Basis, cloud: &PointCloud) -> Result<ExtendedMean> {
    check_dim(cloud, extended.spec())?;
    let m = extended.len();
    struct State {
        sum: Vec<f64>,
        count: usize,
        skipped: usize,
        table: AtomTable,
        phi: Vec<f64>,
    }
    let state = reduce_chunks(
        cloud,
        || State { sum: vec![0.0; m], count: 0, skipped: 0, table: extended.scratch(), phi: vec![0.0; m] },
        |s, y| {
            if y.iter().any(|v| !v.is_finite()) {
                s.skipped += 1;
                return Ok(());
            }
            extended.evaluate_into(y, &mut s.table, &mut s.phi);
            for (a, b) in s.sum.iter_mut().zip(&s.phi) {
                *a += b;
            }
            s.count += 1;
            Ok(())
        },
        |total, part| {
            for (a, b) in total.sum.iter_mut().zip(&part.sum) {
                *a += b;
            }
            total.count += part.count;
            total.skipped += part.skipped;
        },
    )?;
    if state.count == 0 {
        return Err(FitError::EmptyDataset);
    }
    let count = state.count;
    Ok(ExtendedMean { mean: state.sum.iter().map(|v| v / count as f64).collect(), count, skipped: state.skipped })
}

/// Fitting variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Unit null vector of the compensated moment matrix.
    #[default]
    Plain,
    /// Ribbon-constrained quadratic with a closed-form solution.
    Smoothed,
}

/// Extra diagnostics of a smoothed fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub c: f64,
    /// `|| 2 M a + 2 c d ||` at the returned coefficients.
    pub gradient_norm: f64,
    /// `||M||_2 * ||a||`, the scale the gradient is compared against.
    pub gradient_scale: f64,
    pub condition: f64,
    /// Ridge added to the diagonal, when the system was ill-conditioned.
    pub ridge: Option<f64>,
}

/// Wall-clock phases of a fit, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub accumulate: f64,
    pub solve: f64,
    pub total: f64,
}

/// Outcome of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub basis_spec: BasisSpec,
    pub mode: FitMode,
    /// Coefficients in the fitting frame (see `transform`).
    pub coefficients: Vec<f64>,
    pub sigma_min: f64,
    /// Singular values, descending.
    pub spectrum: Vec<f64>,
    /// `sigma_{N-1} - sigma_N`.
    pub gap: f64,
    /// Noise bound used, in data units.
    pub theta_used: f64,
    pub compensated: bool,
    pub count: usize,
    pub skipped: usize,
    /// Worst leading-block condition number of the compensation.
    pub lead_condition: f64,
    /// Data-to-fitting-frame map, when the data was normalized.
    pub transform: Option<AffineTransform>,
    pub smoothing: Option<SmoothingReport>,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub timings: Timings,
}

impl FitResult {
    /// `g(x)` for a point in data units.
    pub fn implicit_value(&self, basis: &Basis, x: &[f64]) -> f64 {
        match &self.transform {
            Some(t) => basis.implicit_value(&self.coefficients, &t.apply(x)),
            None => basis.implicit_value(&self.coefficients, x),
        }
    }

    /// Coefficients of the same zero set in data units (monomial families).
    pub fn coefficients_in_data_frame(&self) -> Result<Vec<f64>> {
        match &self.transform {
            Some(t) => t.pull_back(&self.basis_spec, &self.coefficients),
            None => Ok(self.coefficients.clone()),
        }
    }
}

/// Null vector of a symmetric matrix with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSolution {
    pub coefficients: Vec<f64>,
    pub sigma_min: f64,
    pub spectrum: Vec<f64>,
    pub gap: f64,
    pub warnings: Vec<String>,
}

fn symmetrize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(FitError::Decomposition("matrix has non-finite entries".into()));
    }
    Ok((m + m.transpose()) * 0.5)
}

fn svd(m: DMatrix<f64>, vectors: bool) -> Result<nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    nalgebra::SVD::try_new(m, false, vectors, f64::EPSILON, 100_000)
        .ok_or_else(|| FitError::Decomposition("singular value iteration did not converge".into()))
}

/// Singular values, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut s: Vec<f64> = svd(symmetrize(m)?, false)?.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Flips `v` so its first coefficient above `1e-10 * max|v|` is positive.
pub fn normalize_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * max) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Right singular vector of the smallest singular value.
pub fn null_vector(m: &DMatrix<f64>) -> Result<NullSolution> {
    let m = symmetrize(m)?;
    let n = m.nrows();
    let decomposition = svd(m, true)?;
    let v_t = decomposition.v_t.as_ref().expect("requested right singular vectors");
    let values = &decomposition.singular_values;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let spectrum: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let last = *order.last().expect("non-empty matrix");
    let mut coefficients: Vec<f64> = v_t.row(last).iter().copied().collect();
    let norm = coefficients.iter().map(|x| x * x).sum::<f64>().sqrt();
    coefficients.iter_mut().for_each(|x| *x /= norm);
    normalize_sign(&mut coefficients);
    let sigma_min = spectrum[n - 1];
    let gap = if n > 1 { spectrum[n - 2] - sigma_min } else { f64::INFINITY };
    let mut warnings = Vec::new();
    if n > 1 && gap < GAP_WARNING * spectrum[0] {
        warnings.push(format!(
            "smallest singular value is nearly repeated (gap {gap:.3e} vs largest {:.3e}); the null space may have dimension above one",
            spectrum[0]
        ));
    }
    Ok(NullSolution { coefficients, sigma_min, spectrum, gap, warnings })
}

fn plain_result(
    sol: NullSolution,
    evaluator: &CompensationEvaluator,
    count: usize,
    skipped: usize,
    compensated: bool,
) -> FitResult {
    let mut warnings = sol.warnings;
    if skipped > 0 {
        warnings.push(format!("skipped {skipped} points with non-finite coordinates"));
    }
    FitResult {
        basis_spec: evaluator.basis().spec().clone(),
        mode: FitMode::Plain,
        coefficients: sol.coefficients,
        sigma_min: sol.sigma_min,
        spectrum: sol.spectrum,
        gap: sol.gap,
        theta_used: evaluator.model().theta,
        compensated,
        count,
        skipped,
        lead_condition: evaluator.condition(),
        transform: None,
        smoothing: None,
        warnings,
        timings: Timings::default(),
    }
}

/// Null vector of the averaged compensated matrix.
pub fn solve_null(acc: &MomentAccumulator, evaluator: &CompensationEvaluator) -> Result<FitResult> {
    let sol = null_vector(&acc.mean_matrix()?)?;
    Ok(plain_result(sol, evaluator, acc.count(), acc.skipped(), !evaluator.model().is_degenerate()))
}

/// Candidates of a noise-parameter search with their minimum singular values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub grid: Vec<f64>,
    /// `+inf` where the compensation could not be instantiated.
    pub sigma_curve: Vec<f64>,
    /// Algebraically smallest eigenvalue per candidate.
    pub lambda_min_curve: Vec<f64>,
    /// Whether the candidate competed for the minimum (see [`grid_search_theta`]).
    pub admissible: Vec<bool>,
    pub theta_star: f64,
    pub fit: FitResult,
}

impl GridSearchResult {
    /// `theta,sigma_min,lambda_min,admissible` rows with a header.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("theta,sigma_min,lambda_min,admissible\n");
        for i in 0..self.grid.len() {
            out.push_str(&format!(
                "{:?},{:?},{:?},{}\n",
                self.grid[i], self.sigma_curve[i], self.lambda_min_curve[i], self.admissible[i]
            ));
        }
        out
    }
}

/// Picks the noise bound minimizing the smallest singular value of the
/// averaged compensated matrix. Ties go to the smaller candidate.
///
/// Past the true bound the estimate is over-compensated and turns
/// indefinite, and inner eigenvalues crossing zero produce spurious dips in
/// the singular value curve. A candidate therefore only competes when its
/// smallest-magnitude eigenvalue is also its algebraically smallest one,
/// that is when no eigenvalue lies below `-sigma_min`. If no candidate
/// qualifies, all of them compete.
pub fn grid_search_theta(
    cloud: &PointCloud,
    plan: &Arc<CompensationPlan>,
    family: NoiseFamily,
    grid: &[f64],
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(FitError::InvalidArgument("noise grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(FitError::InvalidArgument("noise grid must be non-negative and strictly ascending".into()));
    }
    let spec = &plan.basis_spec;
    let extended = Basis::new(&spec.with_gamma(2 * spec.gamma));
    let phi = extended_mean(&extended, cloud)?;
    let n = spec.feature_count();
    let matrix_at = |theta: f64| -> Result<(CompensationEvaluator, DMatrix<f64>)> {
        let ev = instantiate(plan, &NoiseModel::new(family, theta)?)?;
        let m = unpack_upper(n, &ev.apply_to_extended(&phi.mean));
        Ok((ev, m))
    };
    let mut curve = Vec::with_capacity(grid.len());
    let mut lambda_curve = Vec::with_capacity(grid.len());
    for &theta in grid {
        let eigen = matrix_at(theta).and_then(|(_, m)| symmetrize(&m)).map(|m| m.symmetric_eigenvalues());
        match eigen {
            Ok(values) if values.iter().all(|v| v.is_finite()) => {
                curve.push(values.iter().fold(f64::INFINITY, |a, v| a.min(v.abs())));
                lambda_curve.push(values.iter().fold(f64::INFINITY, |a, &v| a.min(v)));
            }
            _ => {
                curve.push(f64::INFINITY);
                lambda_curve.push(f64::NAN);
            }
        }
    }
    let mut admissible: Vec<bool> = curve
        .iter()
        .zip(&lambda_curve)
        .map(|(&s, &l)| s.is_finite() && l >= -s * (1.0 + 1e-9))
        .collect();
    if !admissible.iter().any(|&a| a) {
        admissible = curve.iter().map(|s| s.is_finite()).collect();
    }
    let best = (0..grid.len())
        .filter(|&i| admissible[i])
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if curve[b] <= curve[i] => Some(b),
            _ => Some(i),
        })
        .ok_or_else(|| FitError::Decomposition("no grid candidate produced a usable matrix".into()))?;
    let theta_star = grid[best];
    let (ev, m) = matrix_at(theta_star)?;
    let sol = null_vector(&m)?;
    let fit = plain_result(sol, &ev, phi.count, phi.skipped, theta_star > 0.0);
    Ok(GridSearchResult {
        grid: grid.to_vec(),
        sigma_curve: curve,
        lambda_min_curve: lambda_curve,
        admissible,
        theta_star,
        fit,
    })
}

/// Three-ribbon fit at a known noise bound.
///
/// Ribbons are `y` (target 0), `(1 - c) y` (target `+c`) and `(1 + c) y`
/// (target `-c`); scaling a noisy point scales its noise, so each ribbon is
/// compensated at its own scaled bound. With averaged matrices `M` and the
/// averaged compensated feature difference `d = bhat_{-c} - bhat_{+c}`, the
/// objective `a^T M a + 2 c d^T a` is minimized by solving `M a = -c d`.
pub fn fit_smoothed(
    cloud: &PointCloud,
    plan: &Arc<CompensationPlan>,
    model: &NoiseModel,
    c: f64,
    compensate: bool,
) -> Result<FitResult> {
    if !(c > 0.0 && c < 1.0) {
        return Err(FitError::InvalidArgument(format!("ribbon offset must lie in (0, 1), got {c}")));
    }
    check_dim(cloud, &plan.basis_spec)?;
    let start = Instant::now();
    let at = |factor: f64| -> Result<CompensationEvaluator> {
        let theta = if compensate { model.theta * factor } else { 0.0 };
        instantiate(plan, &model.with_theta(theta)?)
    };
    let (ev_plus, ev_zero, ev_minus) = (at(1.0 - c)?, at(1.0)?, at(1.0 + c)?);
    let n = ev_zero.len();
    let dim = cloud.dim();
    struct State {
        acc: [MomentAccumulator; 3],
        ws: Workspace,
        scaled: Vec<f64>,
    }
    let evaluators = [(&ev_plus, 1.0 - c), (&ev_zero, 1.0), (&ev_minus, 1.0 + c)];
    let state = reduce_chunks(
        cloud,
        || State {
            acc: std::array::from_fn(|_| MomentAccumulator::new(n, true)),
            ws: ev_zero.workspace(),
            scaled: vec![0.0; dim],
        },
        |s, y| {
            for (acc, (ev, factor)) in s.acc.iter_mut().zip(evaluators) {
                for (d, v) in s.scaled.iter_mut().zip(y) {
                    *d = v * factor;
                }
                acc.add(ev, &s.scaled, &mut s.ws)?;
            }
            Ok(())
        },
        |total, part| {
            for (t, p) in total.acc.iter_mut().zip(&part.acc) {
                t.merge(p);
            }
        },
    )?;
    let [acc_plus, acc_zero, acc_minus] = &state.acc;
    let accumulate_time = start.elapsed().as_secs_f64();
    let solve_start = Instant::now();
    let m = symmetrize(&(acc_plus.mean_matrix()? + acc_zero.mean_matrix()? + acc_minus.mean_matrix()?))?;
    let (bp, bm) = (acc_plus.mean_vector().unwrap_or_default(), acc_minus.mean_vector().unwrap_or_default());
    let d = DVector::from_iterator(n, bm.iter().zip(&bp).map(|(a, b)| a - b));
    let spectrum = singular_values(&m)?;
    let (smax, smin) = (spectrum[0], spectrum[n - 1]);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let mut warnings = Vec::new();
    let mut system = m.clone();
    let ridge = if !(condition <= SMOOTHED_MAX_CONDITION) {
        let lambda = SMOOTHED_RIDGE * m.trace().abs() / n as f64;
        for i in 0..n {
            system[(i, i)] += lambda;
        }
        warnings.push(format!("ill-conditioned ribbon system (condition {condition:.3e}); added ridge {lambda:.3e}"));
        Some(lambda)
    } else {
        None
    };
    let rhs = &d * (-c);
    let a = system
        .clone()
        .lu()
        .solve(&rhs)
        .or_else(|| svd(system.clone(), true).ok()?.solve(&rhs, 0.0).ok())
        .ok_or_else(|| FitError::Decomposition("ribbon system could not be solved".into()))?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FitError::Decomposition("ribbon solution is not finite".into()));
    }
    // gradient of the objective actually minimized (including any ridge)
    let gradient = (&system * &a) * 2.0 + &d * (2.0 * c);
    let gradient_norm = gradient.norm();
    let system_norm = singular_values(&system)?[0];
    let gradient_scale = system_norm * a.norm();
    let skipped = acc_zero.skipped();
    if skipped > 0 {
        warnings.push(format!("skipped {skipped} points with non-finite coordinates"));
    }
    let solve_time = solve_start.elapsed().as_secs_f64();
    Ok(FitResult {
        basis_spec: plan.basis_spec.clone(),
        mode: FitMode::Smoothed,
        coefficients: a.iter().copied().collect(),
        sigma_min: smin,
        gap: if n > 1 { spectrum[n - 2] - smin } else { f64::INFINITY },
        spectrum,
        theta_used: if compensate { model.theta } else { 0.0 },
        compensated: compensate && model.theta > 0.0,
        count: acc_zero.count(),
        skipped,
        lead_condition: ev_minus.condition().max(ev_plus.condition()).max(ev_zero.condition()),
        transform: None,
        smoothing: Some(SmoothingReport { c, gradient_norm, gradient_scale, condition, ridge }),
        warnings,
        timings: Timings { accumulate: accumulate_time, solve: solve_time, total: start.elapsed().as_secs_f64() },
    })
}

/// Candidate noise bounds as fractions of a reference scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridSpec {
    /// `lo, lo + step, ..., hi` (inclusive up to rounding).
    pub fn levels(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0 && self.lo >= 0.0 && self.hi >= self.lo && self.hi.is_finite()) {
            return Err(FitError::InvalidArgument(format!("invalid grid {self:?}")));
        }
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        if count > 100_000 {
            return Err(FitError::InvalidArgument("grid has too many candidates".into()));
        }
        Ok((0..count).map(|i| self.lo + i as f64 * self.step).collect())
    }

    /// Parses `lo:hi:step`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || FitError::InvalidArgument(format!("grid must look like lo:hi:step, got `{text}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let grid = Self { lo: v[0], hi: v[1], step: v[2] };
        grid.levels()?;
        Ok(grid)
    }
}

impl Default for GridSpec {
    /// 0 to 50 % in steps of 1 %.
    fn default() -> Self {
        Self { lo: 0.0, hi: 0.5, step: 0.01 }
    }
}

/// Noise settings of a fit: a known bound or a grid to search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_family")]
    pub family: NoiseFamily,
    /// Known bound in data units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Candidate levels, as fractions of `reference_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// Scale the grid levels multiply; defaults to `max |data|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_scale: Option<f64>,
}

fn default_family() -> NoiseFamily {
    NoiseFamily::Uniform
}

impl NoiseConfig {
    pub fn known(theta: f64) -> Self {
        Self { family: NoiseFamily::Uniform, theta: Some(theta), grid: None, reference_scale: None }
    }

    pub fn search(grid: GridSpec) -> Self {
        Self { family: NoiseFamily::Uniform, theta: None, grid: Some(grid), reference_scale: None }
    }
}

fn default_c() -> f64 {
    DEFAULT_SMOOTHING_C
}

fn default_true() -> bool {
    true
}

/// End-to-end fitting settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub basis: BasisSpec,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub mode: FitMode,
    #[serde(default = "default_c")]
    pub smoothing_c: f64,
    /// Center and rescale before fitting (max |coordinate| 0.5 for plain
    /// fits, max norm 1 for smoothed fits).
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Disable to fit the raw moment matrix of the noisy data.
    #[serde(default = "default_true")]
    pub compensate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl FitConfig {
    pub fn new(basis: BasisSpec, noise: NoiseConfig) -> Self {
        Self {
            basis,
            noise,
            mode: FitMode::Plain,
            smoothing_c: DEFAULT_SMOOTHING_C,
            normalize: true,
            compensate: true,
            seed: None,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.noise.theta, &self.noise.grid) {
            (Some(t), None) if t.is_finite() && *t >= 0.0 => {}
            (Some(t), None) => return Err(FitError::InvalidNoise(format!("noise bound must be >= 0, got {t}"))),
            (None, Some(g)) => {
                g.levels()?;
            }
            (None, None) => return Err(FitError::InvalidArgument("noise needs either `theta` or `grid`".into())),
            (Some(_), Some(_)) => {
                return Err(FitError::InvalidArgument("noise takes `theta` or `grid`, not both".into()))
            }
        }
        if let Some(r) = self.noise.reference_scale {
            if !(r.is_finite() && r > 0.0) {
                return Err(FitError::InvalidArgument(format!("reference scale must be positive, got {r}")));
            }
        }
        if self.mode == FitMode::Smoothed && !(self.smoothing_c > 0.0 && self.smoothing_c < 1.0) {
            return Err(FitError::InvalidArgument(format!("smoothing_c must lie in (0, 1), got {}", self.smoothing_c)));
        }
        if self.threads == Some(0) {
            return Err(FitError::InvalidArgument("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// A fit with the grid search that chose its noise bound, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub result: FitResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_search: Option<GridSearchResult>,
}

/// Normalizes (optionally), resolves the noise bound, accumulates and solves.
///
/// `plan` may be supplied to skip the symbolic build; it must match `config.basis`.
pub fn fit(cloud: &PointCloud, config: &FitConfig, plan: Option<Arc<CompensationPlan>>) -> Result<FitOutcome> {
    config.validate()?;
    with_threads(config.threads, || fit_inner(cloud, config, plan))?
}

fn fit_inner(cloud: &PointCloud, config: &FitConfig, plan: Option<Arc<CompensationPlan>>) -> Result<FitOutcome> {
    let start = Instant::now();
    check_dim(cloud, &config.basis)?;
    if cloud.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let plan = match plan {
        Some(p) if p.basis_spec == config.basis => p,
        Some(_) => return Err(FitError::InvalidArgument("plan was built for a different basis".into())),
        None => Arc::new(build_plan(&config.basis)?),
    };
    let (data, transform) = if config.normalize {
        let mode = match config.mode {
            FitMode::Plain => NormalizeMode::Isotropic,
            FitMode::Smoothed => NormalizeMode::UnitNorm,
        };
        let (d, t) = normalize(cloud, mode)?;
        (d, Some(t))
    } else {
        (cloud.clone(), None)
    };
    // noise bounds are given in data units; the isotropic scale carries them over
    let s = transform.as_ref().and_then(|t| t.isotropic_scale()).unwrap_or(1.0);
    let mut grid_search = None;
    let theta = match (config.noise.theta, &config.noise.grid) {
        (Some(t), _) => t * s,
        (None, Some(g)) => {
            let reference = config.noise.reference_scale.unwrap_or_else(|| cloud.max_abs());
            let grid: Vec<f64> = g.levels()?.iter().map(|l| l * reference * s).collect();
            let mut gs = grid_search_theta(&data, &plan, config.noise.family, &grid)?;
            gs.grid.iter_mut().for_each(|t| *t /= s);
            gs.theta_star /= s;
            gs.fit.theta_used /= s;
            gs.fit.transform = transform.clone();
            let t = gs.theta_star * s;
            grid_search = Some(gs);
            t
        }
        (None, None) => unreachable!("validated"),
    };
    let model = NoiseModel::new(config.noise.family, theta)?;
    let mut result = match config.mode {
        FitMode::Plain => {
            let ev = instantiate(&plan, &model.with_theta(if config.compensate { theta } else { 0.0 })?)?;
            let t0 = Instant::now();
            let acc = accumulate(&ev, &data, false)?;
            let accumulate_time = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let mut r = solve_null(&acc, &ev)?;
            r.timings.accumulate = accumulate_time;
            r.timings.solve = t1.elapsed().as_secs_f64();
            r
        }
        FitMode::Smoothed => fit_smoothed(&data, &plan, &model, config.smoothing_c, config.compensate)?,
    };
    result.theta_used = if config.compensate { theta / s } else { 0.0 };
    result.transform = transform;
    result.timings.total = start.elapsed().as_secs_f64();
    Ok(FitOutcome { result, grid_search })
}
