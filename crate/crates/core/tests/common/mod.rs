//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use implicit_fit::{Basis, BasisSpec, FeatureAtom, NoiseModel, Trig};
use nalgebra::{DMatrix, DVector};

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `trig(h w x)` with a signed harmonic, as (atom, sign); `sin(0)` vanishes.
fn signed_trig(power: u32, trig: Trig, harmonic: i64) -> Option<(FeatureAtom, f64)> {
    let q = harmonic.unsigned_abs() as u32;
    match trig {
        Trig::None => Some((FeatureAtom::monomial(power), 1.0)),
        Trig::Cos if q == 0 => Some((FeatureAtom::monomial(power), 1.0)),
        Trig::Cos => Some((FeatureAtom::cos(power, q), 1.0)),
        Trig::Sin if q == 0 => None,
        Trig::Sin => Some((FeatureAtom::sin(power, q), harmonic.signum() as f64)),
    }
}

/// Product of two atoms by the product-to-sum identities.
fn atom_product(a: &FeatureAtom, b: &FeatureAtom) -> Vec<(FeatureAtom, f64)> {
    let p = a.power + b.power;
    let (qa, qb) = (a.harmonic as i64, b.harmonic as i64);
    let terms: Vec<(Trig, i64, f64)> = match (a.trig, b.trig) {
        (Trig::None, t) => vec![(t, qb, 1.0)],
        (t, Trig::None) => vec![(t, qa, 1.0)],
        (Trig::Cos, Trig::Cos) => vec![(Trig::Cos, qa - qb, 0.5), (Trig::Cos, qa + qb, 0.5)],
        (Trig::Sin, Trig::Sin) => vec![(Trig::Cos, qa - qb, 0.5), (Trig::Cos, qa + qb, -0.5)],
        (Trig::Sin, Trig::Cos) => vec![(Trig::Sin, qa + qb, 0.5), (Trig::Sin, qa - qb, 0.5)],
        (Trig::Cos, Trig::Sin) => vec![(Trig::Sin, qb + qa, 0.5), (Trig::Sin, qb - qa, 0.5)],
    };
    terms
        .into_iter()
        .filter_map(|(t, q, c)| signed_trig(p, t, q).map(|(atom, s)| (atom, c * s)))
        .collect()
}

/// `E[atom(x + e)]` as a combination of atoms in `x`.
fn atom_expectation(atom: &FeatureAtom, model: &NoiseModel, omega: f64) -> Vec<(FeatureAtom, f64)> {
    let p = atom.power;
    let freq = atom.harmonic as f64 * omega;
    let mut out = Vec::new();
    for r in 0..=p {
        let c = binomial(p, r);
        let rest = p - r;
        match atom.trig {
            Trig::None => out.push((FeatureAtom::monomial(rest), c * model.moment(r, Trig::None, 0.0))),
            Trig::Cos => {
                // cos(a + b) = cos a cos b - sin a sin b
                out.push((FeatureAtom::cos(rest, atom.harmonic), c * model.moment(r, Trig::Cos, freq)));
                out.push((FeatureAtom::sin(rest, atom.harmonic), -c * model.moment(r, Trig::Sin, freq)));
            }
            Trig::Sin => {
                // sin(a + b) = sin a cos b + cos a sin b
                out.push((FeatureAtom::sin(rest, atom.harmonic), c * model.moment(r, Trig::Cos, freq)));
                out.push((FeatureAtom::cos(rest, atom.harmonic), c * model.moment(r, Trig::Sin, freq)));
            }
        }
    }
    out
}

/// Tensor product of per-coordinate atom combinations.
fn tensor(per_coord: &[Vec<(FeatureAtom, f64)>]) -> Vec<(Vec<FeatureAtom>, f64)> {
    let mut acc: Vec<(Vec<FeatureAtom>, f64)> = vec![(Vec::new(), 1.0)];
    for options in per_coord {
        let mut next = Vec::new();
        for (atoms, c) in &acc {
            for (a, d) in options {
                let mut v = atoms.clone();
                v.push(*a);
                next.push((v, c * d));
            }
        }
        acc = next;
    }
    acc
}

/// Compensated moment matrix by dense inversion of the expectation map on
/// the order-`2 gamma` family: `E[phi(y)] = A phi(x)`, so `A^-1 phi(y)` is an
/// unbiased estimate of `phi(x)`.
pub struct DenseOracle {
    basis: Basis,
    extended: Basis,
    /// `A^-1`.
    inverse: DMatrix<f64>,
    /// Entry `(k, l)` as a combination of extended features.
    products: Vec<Vec<(usize, f64)>>,
}

impl DenseOracle {
    pub fn new(spec: &BasisSpec, model: &NoiseModel) -> Self {
        let basis = Basis::new(spec);
        let extended = Basis::new(&spec.with_gamma(2 * spec.gamma));
        let omega = spec.omega();
        let index: HashMap<Vec<FeatureAtom>, usize> =
            extended.features().iter().enumerate().map(|(i, f)| (f.atoms.clone(), i)).collect();
        let m = extended.len();
        let mut a = DMatrix::zeros(m, m);
        for (j, f) in extended.features().iter().enumerate() {
            let per: Vec<_> = f.atoms.iter().map(|atom| atom_expectation(atom, model, omega)).collect();
            for (atoms, c) in tensor(&per) {
                a[(j, index[&atoms])] += c;
            }
        }
        let inverse = a.try_inverse().expect("expectation map is invertible");
        let n = basis.len();
        let mut products = Vec::with_capacity(n * n);
        for k in 0..n {
            for l in 0..n {
                let fk = &basis.features()[k];
                let fl = &basis.features()[l];
                let per: Vec<_> = fk.atoms.iter().zip(&fl.atoms).map(|(x, y)| atom_product(x, y)).collect();
                let mut entry: HashMap<usize, f64> = HashMap::new();
                for (atoms, c) in tensor(&per) {
                    *entry.entry(index[&atoms]).or_default() += c;
                }
                products.push(entry.into_iter().collect());
            }
        }
        Self { basis, extended, inverse, products }
    }

    /// Unbiased estimate of `phi(x)` over the extended family.
    pub fn feature_estimate(&self, y: &[f64]) -> DVector<f64> {
        let phi = DVector::from_vec(self.extended.evaluate(y).expect("valid point"));
        &self.inverse * phi
    }

    pub fn compensate_point(&self, y: &[f64]) -> DMatrix<f64> {
        let z = self.feature_estimate(y);
        let n = self.basis.len();
        DMatrix::from_fn(n, n, |k, l| self.products[k * n + l].iter().map(|&(i, c)| c * z[i]).sum())
    }

    /// `b(x) b(x)^T`.
    pub fn noiseless(&self, x: &[f64]) -> DMatrix<f64> {
        let b = self.basis.evaluate(x).expect("valid point");
        DMatrix::from_fn(b.len(), b.len(), |k, l| b[k] * b[l])
    }
}

/// `|a . b| / (|a| |b|)` written out independently of the library.
pub fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot.abs() / (na * nb)
}

/// Ground-truth cone coefficients in the library's feature order.
pub const CONE_A_STAR: [f64; 10] = [0.1, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, -1.0];
