//! Parametric noise models and the scalar moments consumed by compensation.
//!
//! Every model is IID across coordinates, so a moment is a one-dimensional
//! expectation `E[e^k]`, `E[e^k cos(a e)]` or `E[e^k sin(a e)]`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::basis::Trig;
use crate::error::{FitError, Result};

/// Supported noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// `U[-theta, theta]`, zero mean.
    Uniform,
}

impl NoiseFamily {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseFamily::Uniform => "uniform",
        }
    }
}

/// A noise family together with its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    pub theta: f64,
}

/// A symbolic noise moment. The frequency is `harmonic * omega` for the
/// base frequency `omega` of the feature family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MomentKey {
    pub power: u32,
    pub trig: Trig,
    pub harmonic: u32,
}

impl MomentKey {
    pub fn plain(power: u32) -> Self {
        Self { power, trig: Trig::None, harmonic: 0 }
    }

    pub fn cos(power: u32, harmonic: u32) -> Self {
        Self { power, trig: Trig::Cos, harmonic }
    }

    pub fn sin(power: u32, harmonic: u32) -> Self {
        Self { power, trig: Trig::Sin, harmonic }
    }

    pub fn frequency(&self, omega: f64) -> f64 {
        self.harmonic as f64 * omega
    }
}

impl NoiseModel {
    pub fn new(family: NoiseFamily, theta: f64) -> Result<Self> {
        match family {
            NoiseFamily::Uniform => Self::uniform(theta),
        }
    }

    pub fn uniform(bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound >= 0.0) {
            return Err(FitError::InvalidNoise(format!("uniform bound must be >= 0, got {bound}")));
        }
        Ok(Self { family: NoiseFamily::Uniform, theta: bound })
    }

    /// Same family at another parameter value.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        Self::new(self.family, theta)
    }

    pub fn is_degenerate(&self) -> bool {
        self.theta == 0.0
    }

    /// `E[e^power * trig(frequency * e)]` over one noise coordinate.
    pub fn moment(&self, power: u32, trig: Trig, frequency: f64) -> f64 {
        match self.family {
            NoiseFamily::Uniform => uniform_moment(self.theta, power, trig, frequency),
        }
    }

    pub fn moment_of(&self, key: &MomentKey, omega: f64) -> f64 {
        self.moment(key.power, key.trig, key.frequency(omega))
    }

    /// Draws one noise coordinate.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            NoiseFamily::Uniform if self.theta == 0.0 => 0.0,
            NoiseFamily::Uniform => rng.random_range(-self.theta..=self.theta),
        }
    }

    /// Largest absolute noise value, used to bound moments.
    pub fn support_radius(&self) -> f64 {
        self.theta
    }
}

fn degenerate(power: u32, trig: Trig) -> f64 {
    if power == 0 && trig != Trig::Sin {
        1.0
    } else {
        0.0
    }
}

fn uniform_moment(u: f64, power: u32, trig: Trig, frequency: f64) -> f64 {
    if u == 0.0 {
        return degenerate(power, trig);
    }
    let even = power.is_multiple_of(2);
    let scale = u.powi(power as i32);
    match trig {
        Trig::None => {
            if even {
                scale / (power as f64 + 1.0)
            } else {
                0.0
            }
        }
        Trig::Cos => {
            if even {
                scale * unit_cos_integral(power, (frequency * u).abs())
            } else {
                0.0
            }
        }
        Trig::Sin => {
            if even {
                0.0
            } else {
                let t = frequency * u;
                scale * unit_sin_integral(power, t.abs()) * t.signum()
            }
        }
    }
}

// Above this argument the integration-by-parts recurrence is used; below it
// the alternating power series, whose largest term stays near e^t.
const SERIES_LIMIT: f64 = 8.0;

/// `int_0^1 s^k cos(t s) ds` for `t >= 0`.
fn unit_cos_integral(k: u32, t: f64) -> f64 {
    if t <= SERIES_LIMIT {
        let (c, _) = unit_series(k, t);
        c
    } else {
        unit_recurrence(k, t).0
    }
}

/// `int_0^1 s^k sin(t s) ds` for `t >= 0`.
fn unit_sin_integral(k: u32, t: f64) -> f64 {
    if t <= SERIES_LIMIT {
        let (_, s) = unit_series(k, t);
        s
    } else {
        unit_recurrence(k, t).1
    }
}

fn unit_series(k: u32, t: f64) -> (f64, f64) {
    let k = k as f64;
    // term = t^j / j!
    let mut cos_sum = 0.0;
    let mut sin_sum = 0.0;
    let mut term = 1.0;
    let mut j = 0u32;
    loop {
        let jf = j as f64;
        let sign = if (j / 2).is_multiple_of(2) { 1.0 } else { -1.0 };
        let contrib = sign * term / (k + jf + 1.0);
        if j.is_multiple_of(2) {
            cos_sum += contrib;
        } else {
            sin_sum += contrib;
        }
        if jf > t && term < 1e-18 * (cos_sum.abs() + sin_sum.abs()).max(1e-300) {
            break;
        }
        if j > 400 {
            break;
        }
        j += 1;
        term *= t / j as f64;
        if term == 0.0 {
            break;
        }
    }
    (cos_sum, sin_sum)
}

fn unit_recurrence(k: u32, t: f64) -> (f64, f64) {
    let (st, ct) = t.sin_cos();
    let mut c = st / t;
    let mut s = (1.0 - ct) / t;
    for j in 1..=k {
        let jf = j as f64;
        let c_next = st / t - jf / t * s;
        let s_next = -ct / t + jf / t * c;
        c = c_next;
        s = s_next;
    }
    (c, s)
}

/// Adaptive Gauss-Kronrod estimate of the same moment, to absolute tolerance
/// `tol`. Independent of the closed forms; meant as a cross-check.
pub fn quadrature_moment(model: &NoiseModel, power: u32, trig: Trig, frequency: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(FitError::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    match model.family {
        NoiseFamily::Uniform => {
            let u = model.theta;
            if u == 0.0 {
                return Ok(degenerate(power, trig));
            }
            let f = |e: f64| {
                let p = e.powi(power as i32);
                let v = match trig {
                    Trig::None => p,
                    Trig::Cos => p * (frequency * e).cos(),
                    Trig::Sin => p * (frequency * e).sin(),
                };
                v / (2.0 * u)
            };
            adaptive_gauss_kronrod(&f, -u, u, tol, 10_000)
        }
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS_K: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const GK_WEIGHTS_G: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * GK_WEIGHTS_K[7];
    let mut gauss = fc * GK_WEIGHTS_G[3];
    for i in 0..7 {
        let x = h * GK_NODES[i];
        let pair = f(c - x) + f(c + x);
        kronrod += GK_WEIGHTS_K[i] * pair;
        if i % 2 == 1 {
            gauss += GK_WEIGHTS_G[i / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

fn adaptive_gauss_kronrod(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, max_intervals: usize) -> Result<f64> {
    let (v, e) = gk15(f, a, b);
    let mut intervals = vec![(a, b, v, e)];
    for _ in 0..max_intervals {
        let total_err: f64 = intervals.iter().map(|iv| iv.3).sum();
        if total_err <= tol {
            return Ok(intervals.iter().map(|iv| iv.2).sum());
        }
        // split the interval with the largest error estimate
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(f, lo, mid);
        let (v2, e2) = gk15(f, mid, hi);
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
    Err(FitError::QuadratureDiverged(max_intervals))
}

/// Numeric moment values for one model and base frequency.
#[derive(Debug, Clone, Default)]
pub struct MomentTable {
    values: HashMap<MomentKey, f64>,
}

impl MomentTable {
    pub fn get(&self, key: &MomentKey) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MomentKey, &f64)> {
        self.values.iter()
    }
}

/// Closed-form moments for every key.
pub fn build_moment_table<'a>(
    model: &NoiseModel,
    keys: impl IntoIterator<Item = &'a MomentKey>,
    omega: f64,
) -> Result<MomentTable> {
    let keys: BTreeSet<&MomentKey> = keys.into_iter().collect();
    let mut values = HashMap::with_capacity(keys.len());
    for key in keys {
        let v = model.moment_of(key, omega);
        if !v.is_finite() {
            return Err(FitError::InvalidNoise(format!("moment {key:?} is not finite")));
        }
        values.insert(*key, v);
    }
    Ok(MomentTable { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uni(u: f64) -> NoiseModel {
        NoiseModel::uniform(u).unwrap()
    }

    #[test]
    fn moment_examples() {
        let m = uni(0.7);
        assert_eq!(m.moment(1, Trig::None, 0.0), 0.0);
        assert!((m.moment(2, Trig::None, 0.0) - 0.49 / 3.0).abs() < 1e-15);
        let (a, u) = (2.0, 0.7);
        assert!((m.moment(0, Trig::Cos, a) - (a * u).sin() / (a * u)).abs() < 1e-15);
        // tiny frequency-bound product falls back to the limit
        assert!((m.moment(0, Trig::Cos, 1e-12) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_examples() {
        let q = quadrature_moment(&uni(0.3), 2, Trig::None, 0.0, 1e-12).unwrap();
        assert!((q - 0.03).abs() < 1e-12);
        for k in 1..5 {
            for trig in [Trig::None, Trig::Cos, Trig::Sin] {
                assert_eq!(quadrature_moment(&uni(0.0), k, trig, 1.5, 1e-12).unwrap(), 0.0);
            }
        }
        let q = quadrature_moment(&uni(0.5), 0, Trig::Cos, 2.0, 1e-12).unwrap();
        assert!((q - 1f64.sin()).abs() < 1e-12);
        assert!((q - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!(quadrature_moment(&uni(0.5), 0, Trig::Cos, 2.0, 0.0).is_err());
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let u = rng.random_range(0.0..1.5);
            let k = rng.random_range(0..=8u32);
            let a = rng.random_range(0.0..10.0);
            let trig = [Trig::None, Trig::Cos, Trig::Sin][rng.random_range(0..3)];
            let m = uni(u);
            let closed = m.moment(k, trig, a);
            let quad = quadrature_moment(&m, k, trig, a, 1e-13).unwrap();
            assert!((closed - quad).abs() <= 1e-10, "u={u} k={k} a={a} {trig:?}: {closed} vs {quad}");
        }
    }

    #[test]
    fn large_arguments_use_stable_recurrence() {
        for (u, a, k) in [(1.0, 9.0, 3), (2.0, 20.0, 6), (1.0, 50.0, 2), (0.8, 10.5, 8)] {
            let m = uni(u);
            for trig in [Trig::Cos, Trig::Sin] {
                let closed = m.moment(k, trig, a);
                let quad = quadrature_moment(&m, k, trig, a, 1e-13).unwrap();
                assert!((closed - quad).abs() < 1e-11, "{u} {a} {k} {trig:?}");
            }
        }
    }

    #[test]
    fn odd_keys_are_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m = uni(rng.random_range(0.01..2.0));
            let a = rng.random_range(0.0..10.0);
            let k = rng.random_range(0..10u32);
            if k % 2 == 1 {
                assert_eq!(m.moment(k, Trig::None, 0.0), 0.0);
                assert_eq!(m.moment(k, Trig::Cos, a), 0.0);
            } else {
                assert_eq!(m.moment(k, Trig::Sin, a), 0.0);
            }
        }
    }

    #[test]
    fn continuity_at_zero_bound() {
        let h = 1e-8;
        for k in 0..6 {
            for trig in [Trig::None, Trig::Cos, Trig::Sin] {
                let near = uni(h).moment(k, trig, 3.0);
                let limit = uni(0.0).moment(k, trig, 3.0);
                assert!((near - limit).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn moments_bounded_by_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let u = rng.random_range(0.0..3.0);
            let k = rng.random_range(0..10u32);
            let a = rng.random_range(0.0..20.0);
            let m = uni(u);
            for trig in [Trig::None, Trig::Cos, Trig::Sin] {
                assert!(m.moment(k, trig, a).abs() <= u.powi(k as i32) * (1.0 + 1e-12) + 1e-300);
            }
        }
    }

    #[test]
    fn tables() {
        let keys = [MomentKey::plain(0), MomentKey::plain(2)];
        let t = build_moment_table(&uni(0.1), &keys, 1.0).unwrap();
        assert_eq!(t.get(&keys[0]), Some(1.0));
        assert!((t.get(&keys[1]).unwrap() - 0.01 / 3.0).abs() < 1e-18);
        let t = build_moment_table(&uni(0.0), &[MomentKey::cos(0, 2), MomentKey::sin(1, 1)], 2.0).unwrap();
        assert_eq!(t.get(&MomentKey::cos(0, 2)), Some(1.0));
        assert_eq!(t.get(&MomentKey::sin(1, 1)), Some(0.0));
        assert!(build_moment_table(&uni(0.2), &[], 1.0).unwrap().is_empty());
    }

    #[test]
    fn json_shape() {
        let m = uni(0.25);
        assert_eq!(serde_json::to_string(&m).unwrap(), r#"{"family":"uniform","theta":0.25}"#);
        assert!(NoiseModel::uniform(-1.0).is_err());
    }
}
