//! Ground-truth implicit shapes, zero-set sampling, noise injection and normalization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisSpec, FamilyKind};
use crate::cloud::PointCloud;
use crate::error::{FitError, Result};
use crate::noise::NoiseModel;

/// Names accepted by [`builtin_shape`].
pub const BUILTIN_SHAPES: &[&str] =
    &["elliptic-cone", "clebsch-cubic", "unit-circle", "ellipse-2d", "line-2d", "quartic-blob"];

const CLEBSCH_JSON: &str = include_str!("../data/clebsch-cubic.json");

/// A surface `g(x) = a . b(x) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitShape {
    pub name: String,
    pub basis_spec: BasisSpec,
    pub coefficients: Vec<f64>,
}

impl ImplicitShape {
    pub fn new(name: impl Into<String>, basis_spec: BasisSpec, coefficients: Vec<f64>) -> Result<Self> {
        let shape = Self { name: name.into(), basis_spec, coefficients };
        shape.validate()?;
        Ok(shape)
    }

    fn validate(&self) -> Result<()> {
        let n = self.basis_spec.feature_count();
        if self.coefficients.len() != n {
            return Err(FitError::InvalidShape(format!(
                "{} coefficients for a {n}-feature basis",
                self.coefficients.len()
            )));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(FitError::InvalidShape("non-finite coefficient".into()));
        }
        if self.coefficients.iter().all(|&c| c == 0.0) {
            return Err(FitError::InvalidShape("all coefficients are zero".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let shape: ImplicitShape =
            serde_json::from_str(text).map_err(|e| FitError::InvalidShape(e.to_string()))?;
        shape.validate()?;
        Ok(shape)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.basis_spec.n
    }

    pub fn basis(&self) -> Basis {
        Basis::new(&self.basis_spec)
    }
}

/// Looks up a bundled shape.
pub fn builtin_shape(name: &str) -> Result<ImplicitShape> {
    let mono = |n, gamma| BasisSpec::monomial(n, gamma).expect("valid builtin spec");
    match name {
        // x1^2 - x2^2 - x3^2 + 0.1
        "elliptic-cone" => ImplicitShape::new(
            name,
            mono(3, 2),
            vec![0.1, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, -1.0],
        ),
        "clebsch-cubic" => ImplicitShape::from_json(CLEBSCH_JSON),
        // x1^2 + x2^2 - 1
        "unit-circle" => ImplicitShape::new(name, mono(2, 2), vec![-1.0, 0.0, 0.0, 1.0, 0.0, 1.0]),
        // (x1 / 0.8)^2 + (x2 / 0.5)^2 - 1
        "ellipse-2d" => {
            ImplicitShape::new(name, mono(2, 2), vec![-1.0, 0.0, 0.0, 1.0 / 0.64, 0.0, 4.0])
        }
        // x1 - 0.5 x2 - 0.1
        "line-2d" => ImplicitShape::new(name, mono(2, 1), vec![-0.1, 1.0, -0.5]),
        // x1^4 + 2 x2^4 + x1^2 x2 - 0.25 x1 - 0.3, a closed non-convex curve
        "quartic-blob" => {
            let mut a = vec![0.0; 15];
            a[0] = -0.3;
            a[1] = -0.25;
            a[7] = 1.0;
            a[10] = 1.0;
            a[14] = 2.0;
            ImplicitShape::new(name, mono(2, 4), a)
        }
        _ => Err(FitError::UnknownShape(name.to_string())),
    }
}

/// A built-in name or a path to a shape JSON file.
pub fn resolve_shape(name_or_path: &str) -> Result<ImplicitShape> {
    if BUILTIN_SHAPES.contains(&name_or_path) {
        return builtin_shape(name_or_path);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return ImplicitShape::load(path);
    }
    Err(FitError::UnknownShape(name_or_path.to_string()))
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bbox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(FitError::InvalidArgument("box corners must share a dimension".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b && a.is_finite() && b.is_finite())) {
            return Err(FitError::InvalidArgument("box must have positive finite extent".into()));
        }
        Ok(Self { lo, hi })
    }

    /// `[-r, r]^n`.
    pub fn cube(n: usize, r: f64) -> Self {
        Self { lo: vec![-r; n], hi: vec![r; n] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.lo).zip(&self.hi).all(|((v, a), b)| v >= a && v <= b)
    }

    /// Smallest box holding every finite point, padded by `margin` times its extent.
    pub fn around(cloud: &PointCloud, margin: f64) -> Result<Self> {
        let n = cloud.dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for p in cloud.iter().filter(|p| p.iter().all(|v| v.is_finite())) {
            for i in 0..n {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let extent = lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max);
        if !(extent > 0.0) {
            return Err(FitError::DegenerateCloud("points span no volume".into()));
        }
        let pad = margin * extent;
        Self::new(lo.iter().map(|v| v - pad).collect(), hi.iter().map(|v| v + pad).collect())
    }
}

/// Points with the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCloud {
    pub points: PointCloud,
    pub shape: String,
    /// Noise bound as a fraction of the noiseless `max |D_L|`.
    pub noise_level: f64,
    /// The resolved noise bound `u`.
    pub u_actual: f64,
    pub seed: u64,
}

/// Sampling batch size; batch `k` draws from ChaCha8 stream `k` of the seed.
pub const SAMPLE_BATCH: usize = 1024;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;
const PROBE_STEPS: usize = 16;

/// Projects `x` onto `g = 0` along the gradient; `None` if it does not converge.
fn newton_project(basis: &Basis, a: &[f64], x: &mut [f64]) -> Option<()> {
    let (mut g, mut grad) = basis.value_and_gradient(a, x);
    let mut trial = x.to_vec();
    for _ in 0..NEWTON_MAX_ITER {
        if !g.is_finite() {
            return None;
        }
        if g.abs() <= NEWTON_TOL {
            return Some(());
        }
        let norm2: f64 = grad.iter().map(|v| v * v).sum();
        if !(norm2 > 0.0 && norm2.is_finite()) {
            return None;
        }
        let mut step = g / norm2;
        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..x.len() {
                trial[i] = x[i] - step * grad[i];
            }
            let (tg, tgrad) = basis.value_and_gradient(a, &trial);
            if tg.is_finite() && tg.abs() < g.abs() {
                x.copy_from_slice(&trial);
                g = tg;
                grad = tgrad;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    (g.abs() <= NEWTON_TOL).then_some(())
}

/// Checks for a sign change of `g` on a coarse grid over the box.
fn probe_surface(basis: &Basis, a: &[f64], bbox: &Bbox) -> bool {
    let n = bbox.dim();
    let per_axis = if n <= 3 { PROBE_STEPS + 1 } else { 5 };
    let total = per_axis.pow(n as u32);
    let (mut pos, mut neg) = (false, false);
    let mut p = vec![0.0; n];
    for idx in 0..total {
        let mut rem = idx;
        for i in 0..n {
            let k = rem % per_axis;
            rem /= per_axis;
            p[i] = bbox.lo[i] + (bbox.hi[i] - bbox.lo[i]) * k as f64 / (per_axis - 1) as f64;
        }
        let g = basis.implicit_value(a, &p);
        if g == 0.0 {
            return true;
        }
        pos |= g > 0.0;
        neg |= g < 0.0;
        if pos && neg {
            return true;
        }
    }
    false
}

/// Draws `count` points on the zero set inside `bbox`.
///
/// Candidates are uniform in the box and projected by damped Newton steps;
/// candidates that fail to converge or leave the box are discarded.
pub fn sample_zero_set(shape: &ImplicitShape, count: usize, seed: u64, bbox: &Bbox) -> Result<SampledCloud> {
    let n = shape.dim();
    if bbox.dim() != n {
        return Err(FitError::DimensionMismatch { expected: n, got: bbox.dim() });
    }
    if count == 0 {
        return Err(FitError::InvalidArgument("sample count must be at least 1".into()));
    }
    let basis = shape.basis();
    let a = &shape.coefficients;
    if !probe_surface(&basis, a, bbox) {
        return Err(FitError::SurfaceNotFound);
    }
    let batches = count.div_ceil(SAMPLE_BATCH);
    let results: Vec<Result<Vec<f64>>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let want = SAMPLE_BATCH.min(count - b * SAMPLE_BATCH);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut out = Vec::with_capacity(want * n);
            let mut x = vec![0.0; n];
            let max_attempts = 200 * want + 1000;
            let mut attempts = 0;
            while out.len() < want * n {
                attempts += 1;
                if attempts > max_attempts {
                    return Err(FitError::SurfaceNotFound);
                }
                for i in 0..n {
                    x[i] = rng.random_range(bbox.lo[i]..=bbox.hi[i]);
                }
                if newton_project(&basis, a, &mut x).is_some() && bbox.contains(&x) {
                    out.extend_from_slice(&x);
                }
            }
            Ok(out)
        })
        .collect();
    let mut coords = Vec::with_capacity(count * n);
    for r in results {
        coords.extend(r?);
    }
    Ok(SampledCloud {
        points: PointCloud::new(n, coords)?,
        shape: shape.name.clone(),
        noise_level: 0.0,
        u_actual: 0.0,
        seed,
    })
}

/// Stream used for noise draws, distinct from the sampling batches.
const NOISE_STREAM: u64 = u64::MAX;

/// Adds IID `U[-u, u]` noise with `u = level * max |D_L|`.
pub fn add_noise(cloud: &SampledCloud, level: f64, seed: u64) -> Result<SampledCloud> {
    if !(level.is_finite() && level >= 0.0) {
        return Err(FitError::InvalidNoise(format!("noise level must be >= 0, got {level}")));
    }
    let u = level * cloud.points.max_abs();
    let model = NoiseModel::uniform(u)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    let points = if u == 0.0 {
        cloud.points.clone()
    } else {
        cloud.points.map(|src, dst| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + model.sample(&mut rng);
            }
        })
    };
    Ok(SampledCloud { points, shape: cloud.shape.clone(), noise_level: level, u_actual: u, seed })
}

/// How [`normalize`] scales a centered cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// One scale for all axes so that `max |coordinate| = 0.5`.
    #[default]
    Isotropic,
    /// Each axis scaled separately to `max |coordinate| = 0.5`.
    PerAxis,
    /// One scale so that the largest Euclidean norm is 1.
    UnitNorm,
}

/// `z = scale * (x - center)` coordinate-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(n: usize) -> Self {
        Self { center: vec![0.0; n], scale: vec![1.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).zip(&self.scale).map(|((v, c), s)| s * (v - c)).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.center).zip(&self.scale).map(|((v, c), s)| v / s + c).collect()
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map(|src, dst| {
            for i in 0..src.len() {
                dst[i] = self.scale[i] * (src[i] - self.center[i]);
            }
        })
    }

    /// The common scale, if every axis uses the same one.
    pub fn isotropic_scale(&self) -> Option<f64> {
        let s = *self.scale.first()?;
        self.scale.iter().all(|&v| v == s).then_some(s)
    }

    /// Coefficients of `x -> g(T x)` given those of `g`, for monomial families.
    pub fn pull_back(&self, spec: &BasisSpec, coefficients: &[f64]) -> Result<Vec<f64>> {
        let alpha = self.scale.clone();
        let beta: Vec<f64> = self.scale.iter().zip(&self.center).map(|(s, c)| -s * c).collect();
        substitute(spec, coefficients, &alpha, &beta)
    }

    /// Coefficients of `z -> g(T^{-1} z)` given those of `g`, for monomial families.
    pub fn push_forward(&self, spec: &BasisSpec, coefficients: &[f64]) -> Result<Vec<f64>> {
        let alpha: Vec<f64> = self.scale.iter().map(|s| 1.0 / s).collect();
        substitute(spec, coefficients, &alpha, &self.center)
    }
}

/// Coefficients of `x -> g(alpha * x + beta)`; the degree cannot grow.
fn substitute(spec: &BasisSpec, coefficients: &[f64], alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    if spec.kind != FamilyKind::Monomial {
        return Err(FitError::InvalidArgument(
            "coefficient mapping between frames needs a monomial family".into(),
        ));
    }
    if alpha.len() != spec.n || coefficients.len() != spec.feature_count() {
        return Err(FitError::DimensionMismatch { expected: spec.n, got: alpha.len() });
    }
    let basis = Basis::new(spec);
    let binom = |p: u32, k: u32| -> f64 { (0..k).fold(1.0, |acc, i| acc * (p - i) as f64 / (i + 1) as f64) };
    let mut out = vec![0.0; basis.len()];
    for (f, &c) in basis.features().iter().zip(coefficients) {
        if c == 0.0 {
            continue;
        }
        // expand prod_i (alpha_i x_i + beta_i)^{p_i} term by term
        let mut terms: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), c)];
        for (i, atom) in f.atoms.iter().enumerate() {
            let p = atom.power;
            let mut next = Vec::with_capacity(terms.len() * (p as usize + 1));
            for (powers, v) in &terms {
                for k in 0..=p {
                    let w = binom(p, k) * alpha[i].powi(k as i32) * beta[i].powi((p - k) as i32);
                    if w != 0.0 {
                        let mut pw = powers.clone();
                        pw.push(k);
                        next.push((pw, v * w));
                    }
                }
            }
            terms = next;
        }
        for (powers, v) in terms {
            let feature = crate::basis::Feature {
                atoms: powers.into_iter().map(crate::basis::FeatureAtom::monomial).collect(),
            };
            out[basis.index_of(&feature).expect("lower-degree monomial is in the family")] += v;
        }
    }
    Ok(out)
}

/// Centers a cloud and rescales it, returning the transform used.
pub fn normalize(cloud: &PointCloud, mode: NormalizeMode) -> Result<(PointCloud, AffineTransform)> {
    if cloud.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let n = cloud.dim();
    let center = cloud.mean();
    let mut max_abs = vec![0.0f64; n];
    let mut max_norm = 0.0f64;
    for p in cloud.iter().filter(|p| p.iter().all(|v| v.is_finite())) {
        let mut norm2 = 0.0;
        for i in 0..n {
            let d = p[i] - center[i];
            max_abs[i] = max_abs[i].max(d.abs());
            norm2 += d * d;
        }
        max_norm = max_norm.max(norm2.sqrt());
    }
    let overall = max_abs.iter().copied().fold(0.0, f64::max);
    if !(overall > 0.0) {
        return Err(FitError::DegenerateCloud("all points coincide".into()));
    }
    let scale = match mode {
        NormalizeMode::Isotropic => vec![0.5 / overall; n],
        NormalizeMode::UnitNorm => vec![1.0 / max_norm; n],
        NormalizeMode::PerAxis => {
            if max_abs.contains(&0.0) {
                return Err(FitError::DegenerateCloud("an axis has zero spread".into()));
            }
            max_abs.iter().map(|m| 0.5 / m).collect()
        }
    };
    let transform = AffineTransform { center, scale };
    Ok((transform.apply_cloud(cloud), transform))
}
