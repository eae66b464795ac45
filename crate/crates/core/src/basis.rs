//! Ordered feature families.
//!
//! A family of model order `gamma` stacks the blocks `C_0, C_1, ..., C_gamma`.
//! Every feature is a product of one univariate atom per coordinate, where an
//! atom is `x^s`, `x^s cos(q w x)` or `x^s sin(q w x)` and has order `s + q`.
//! A feature belongs to `C_k` when the orders of its atoms sum to `k`.
//!
//! # Ordering
//!
//! Blocks are laid out by increasing order, so the family of order `gamma` is
//! a prefix of the family of order `2 gamma`. Inside a block, features without
//! any trigonometric atom come first. Ties are broken by comparing atoms from
//! the last coordinate to the first, each atom keyed by `(order, harmonic,
//! trig)` with `none < cos < sin`. For pure monomials this is the graded
//! colexicographic order, e.g. for three variables and order two:
//!
//! ```text
//! 1, x1, x2, x3, x1^2, x1 x2, x2^2, x1 x3, x2 x3, x3^2
//! ```
//!
//! and for one variable with trigonometric atoms the order-two block reads
//! `x^2, x cos(wx), x sin(wx), cos(2wx), sin(2wx)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{FitError, Result};

/// Exact rational used for expansion coefficients.
pub type Rational = BigRational;

/// Family kind: pure monomials or monomials times harmonics of one frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Monomial,
    PolyTrig,
}

/// The pair (model order, family) that fully determines the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasisSpec")]
pub struct BasisSpec {
    pub n: usize,
    pub gamma: usize,
    pub kind: FamilyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
}

#[derive(Deserialize)]
struct RawBasisSpec {
    n: usize,
    gamma: usize,
    kind: FamilyKind,
    #[serde(default)]
    omega: Option<f64>,
}

impl TryFrom<RawBasisSpec> for BasisSpec {
    type Error = FitError;

    fn try_from(raw: RawBasisSpec) -> Result<Self> {
        match raw.kind {
            FamilyKind::Monomial => Self::monomial(raw.n, raw.gamma),
            FamilyKind::PolyTrig => Self::poly_trig(
                raw.n,
                raw.gamma,
                raw.omega.ok_or_else(|| {
                    FitError::InvalidBasis("poly-trig family requires omega".into())
                })?,
            ),
        }
    }
}

impl BasisSpec {
    pub fn monomial(n: usize, gamma: usize) -> Result<Self> {
        if n == 0 {
            return Err(FitError::InvalidBasis("dimension must be at least 1".into()));
        }
        Ok(Self { n, gamma, kind: FamilyKind::Monomial, omega: None })
    }

    pub fn poly_trig(n: usize, gamma: usize, omega: f64) -> Result<Self> {
        if n == 0 {
            return Err(FitError::InvalidBasis("dimension must be at least 1".into()));
        }
        if !(omega.is_finite() && omega > 0.0) {
            return Err(FitError::InvalidBasis(format!("omega must be positive, got {omega}")));
        }
        Ok(Self { n, gamma, kind: FamilyKind::PolyTrig, omega: Some(omega) })
    }

    /// Same family with a different model order.
    pub fn with_gamma(&self, gamma: usize) -> Self {
        Self { gamma, ..self.clone() }
    }

    pub fn omega(&self) -> f64 {
        self.omega.unwrap_or(0.0)
    }

    /// Number of features, computed without enumerating them.
    pub fn feature_count(&self) -> usize {
        // per-coordinate generating counts: atoms of order d
        let atoms = |d: usize| -> usize {
            match (self.kind, d) {
                (_, 0) => 1,
                (FamilyKind::Monomial, _) => 1,
                (FamilyKind::PolyTrig, d) => 1 + 2 * d,
            }
        };
        // ways[k] = number of features of order exactly k, built coordinate by coordinate
        let mut ways = vec![0usize; self.gamma + 1];
        ways[0] = 1;
        for _ in 0..self.n {
            let mut next = vec![0usize; self.gamma + 1];
            for (k, &w) in ways.iter().enumerate() {
                if w == 0 {
                    continue;
                }
                for d in 0..=(self.gamma - k) {
                    next[k + d] = next[k + d].saturating_add(w.saturating_mul(atoms(d)));
                }
            }
            ways = next;
        }
        ways.iter().fold(0usize, |a, &b| a.saturating_add(b))
    }
}

/// Trigonometric factor of an atom. The derived order is `None < Cos < Sin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trig {
    None,
    Cos,
    Sin,
}

/// `x^power`, `x^power cos(harmonic w x)` or `x^power sin(harmonic w x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureAtom {
    pub power: u32,
    pub trig: Trig,
    pub harmonic: u32,
}

impl FeatureAtom {
    pub const ONE: FeatureAtom = FeatureAtom { power: 0, trig: Trig::None, harmonic: 0 };

    pub fn monomial(power: u32) -> Self {
        Self { power, trig: Trig::None, harmonic: 0 }
    }

    pub fn cos(power: u32, harmonic: u32) -> Self {
        debug_assert!(harmonic > 0);
        Self { power, trig: Trig::Cos, harmonic }
    }

    pub fn sin(power: u32, harmonic: u32) -> Self {
        debug_assert!(harmonic > 0);
        Self { power, trig: Trig::Sin, harmonic }
    }

    pub fn order(&self) -> u32 {
        self.power + self.harmonic
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::ONE
    }

    fn sort_key(&self) -> (u32, u32, Trig) {
        (self.order(), self.harmonic, self.trig)
    }

    /// All atoms of order exactly `d` for the given family kind, in block order.
    pub fn of_order(kind: FamilyKind, d: u32) -> Vec<FeatureAtom> {
        if d == 0 {
            return vec![Self::ONE];
        }
        let mut atoms = vec![Self::monomial(d)];
        if kind == FamilyKind::PolyTrig {
            for q in 1..=d {
                atoms.push(Self::cos(d - q, q));
                atoms.push(Self::sin(d - q, q));
            }
        }
        atoms
    }

    /// Value of the atom at `x` for base frequency `omega`.
    pub fn eval(&self, x: f64, omega: f64) -> f64 {
        let p = x.powi(self.power as i32);
        match self.trig {
            Trig::None => p,
            Trig::Cos => p * (self.harmonic as f64 * omega * x).cos(),
            Trig::Sin => p * (self.harmonic as f64 * omega * x).sin(),
        }
    }

    /// Derivative of the atom at `x`.
    pub fn derivative(&self, x: f64, omega: f64) -> f64 {
        let s = self.power as i32;
        let dp = if s == 0 { 0.0 } else { s as f64 * x.powi(s - 1) };
        let p = x.powi(s);
        let a = self.harmonic as f64 * omega;
        match self.trig {
            Trig::None => dp,
            Trig::Cos => dp * (a * x).cos() - p * a * (a * x).sin(),
            Trig::Sin => dp * (a * x).sin() + p * a * (a * x).cos(),
        }
    }

    /// Product of two atoms on the same coordinate as a combination of atoms.
    pub fn product(&self, other: &FeatureAtom) -> Vec<(FeatureAtom, Rational)> {
        let power = self.power + other.power;
        let half = || Rational::new(1.into(), 2.into());
        let one = Rational::one;
        let (a, b) = (self.harmonic as i64, other.harmonic as i64);
        // atom for trig(h) with possibly negative or zero harmonic, with its sign
        let cos_atom = |h: i64| -> FeatureAtom {
            if h == 0 {
                FeatureAtom::monomial(power)
            } else {
                FeatureAtom::cos(power, h.unsigned_abs() as u32)
            }
        };
        let sin_atom = |h: i64| -> Option<(FeatureAtom, bool)> {
            match h.cmp(&0) {
                std::cmp::Ordering::Equal => None,
                std::cmp::Ordering::Greater => Some((FeatureAtom::sin(power, h as u32), false)),
                std::cmp::Ordering::Less => Some((FeatureAtom::sin(power, (-h) as u32), true)),
            }
        };
        let mut out: Vec<(FeatureAtom, Rational)> = Vec::with_capacity(2);
        let mut push = |atom: FeatureAtom, c: Rational| {
            if let Some(slot) = out.iter_mut().find(|(at, _)| *at == atom) {
                slot.1 += c;
            } else {
                out.push((atom, c));
            }
        };
        let push_sin = |push: &mut dyn FnMut(FeatureAtom, Rational), h: i64, c: Rational| {
            if let Some((atom, negate)) = sin_atom(h) {
                push(atom, if negate { -c } else { c });
            }
        };
        match (self.trig, other.trig) {
            (Trig::None, Trig::None) => push(FeatureAtom::monomial(power), one()),
            (Trig::None, Trig::Cos) => push(FeatureAtom::cos(power, other.harmonic), one()),
            (Trig::None, Trig::Sin) => push(FeatureAtom::sin(power, other.harmonic), one()),
            (Trig::Cos, Trig::None) => push(FeatureAtom::cos(power, self.harmonic), one()),
            (Trig::Sin, Trig::None) => push(FeatureAtom::sin(power, self.harmonic), one()),
            // cos a cos b = (cos(a-b) + cos(a+b)) / 2
            (Trig::Cos, Trig::Cos) => {
                push(cos_atom(a - b), half());
                push(cos_atom(a + b), half());
            }
            // sin a sin b = (cos(a-b) - cos(a+b)) / 2
            (Trig::Sin, Trig::Sin) => {
                push(cos_atom(a - b), half());
                push(cos_atom(a + b), -half());
            }
            // sin a cos b = (sin(a+b) + sin(a-b)) / 2
            (Trig::Sin, Trig::Cos) => {
                push_sin(&mut push, a + b, half());
                push_sin(&mut push, a - b, half());
            }
            // cos a sin b = (sin(a+b) - sin(a-b)) / 2
            (Trig::Cos, Trig::Sin) => {
                push_sin(&mut push, a + b, half());
                push_sin(&mut push, a - b, -half());
            }
        }
        out.retain(|(_, c)| !c.is_zero());
        out
    }
}

impl fmt::Display for FeatureAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_identity() {
            return write!(f, "1");
        }
        let mono = match self.power {
            0 => String::new(),
            1 => "x".to_string(),
            p => format!("x^{p}"),
        };
        let trig = match self.trig {
            Trig::None => String::new(),
            Trig::Cos if self.harmonic == 1 => "cos(wx)".to_string(),
            Trig::Sin if self.harmonic == 1 => "sin(wx)".to_string(),
            Trig::Cos => format!("cos({}wx)", self.harmonic),
            Trig::Sin => format!("sin({}wx)", self.harmonic),
        };
        match (mono.is_empty(), trig.is_empty()) {
            (false, false) => write!(f, "{mono} {trig}"),
            (false, true) => write!(f, "{mono}"),
            _ => write!(f, "{trig}"),
        }
    }
}

/// One feature: an atom per coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Feature {
    pub atoms: Vec<FeatureAtom>,
}

impl Feature {
    pub fn order(&self) -> u32 {
        self.atoms.iter().map(FeatureAtom::order).sum()
    }

    pub fn has_trig(&self) -> bool {
        self.atoms.iter().any(|a| a.trig != Trig::None)
    }

    pub fn eval(&self, point: &[f64], omega: f64) -> f64 {
        self.atoms.iter().zip(point).map(|(a, &x)| a.eval(x, omega)).product()
    }

    fn sort_key(&self) -> (bool, Vec<(u32, u32, Trig)>) {
        (self.has_trig(), self.atoms.iter().rev().map(FeatureAtom::sort_key).collect())
    }

    /// Human-readable label such as `x1^2 x3` or `x1 cos(2wx2)`.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self
            .atoms
            .iter()
            .enumerate()
            .filter(|(_, a)| !a.is_identity())
            .map(|(i, a)| a.to_string().replace('x', &format!("x{}", i + 1)))
            .collect();
        if parts.is_empty() {
            "1".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Sparse linear combination of features, as (feature index, coefficient).
pub type Expansion = Vec<(usize, Rational)>;

/// An enumerated feature family.
#[derive(Debug, Clone)]
pub struct Basis {
    spec: BasisSpec,
    features: Vec<Feature>,
    index: HashMap<Feature, usize>,
    block_starts: Vec<usize>,
    // non-identity atoms of each feature as (coordinate, atom)
    sparse: Vec<Vec<(usize, FeatureAtom)>>,
    max_power: u32,
    max_harmonic: u32,
}

impl Basis {
    pub fn new(spec: &BasisSpec) -> Self {
        let n = spec.n;
        let mut features = Vec::new();
        let mut block_starts = vec![0];
        for k in 0..=spec.gamma as u32 {
            let mut block = Vec::new();
            let mut atoms = vec![FeatureAtom::ONE; n];
            collect_block(spec.kind, n, 0, k, &mut atoms, &mut block);
            block.sort_by_cached_key(Feature::sort_key);
            features.extend(block);
            block_starts.push(features.len());
        }
        let index = features.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        let sparse = features
            .iter()
            .map(|f| {
                f.atoms
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| !a.is_identity())
                    .map(|(i, a)| (i, *a))
                    .collect()
            })
            .collect();
        let max_power = features.iter().flat_map(|f| f.atoms.iter().map(|a| a.power)).max().unwrap_or(0);
        let max_harmonic =
            features.iter().flat_map(|f| f.atoms.iter().map(|a| a.harmonic)).max().unwrap_or(0);
        Self { spec: spec.clone(), features, index, block_starts, sparse, max_power, max_harmonic }
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.n
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &Feature {
        &self.features[i]
    }

    pub fn index_of(&self, feature: &Feature) -> Option<usize> {
        self.index.get(feature).copied()
    }

    /// Index range of the block `C_k`.
    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        self.block_starts[k]..self.block_starts[k + 1]
    }

    /// The family of order `2 gamma` used to expand products of features.
    pub fn extended(&self) -> Basis {
        Basis::new(&self.spec.with_gamma(2 * self.spec.gamma))
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.spec.n {
            return Err(FitError::DimensionMismatch { expected: self.spec.n, got: point.len() });
        }
        Ok(())
    }

    /// Evaluates the feature vector at `point`.
    pub fn evaluate(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_point(point)?;
        let mut out = vec![0.0; self.len()];
        let mut scratch = self.scratch();
        self.evaluate_into(point, &mut scratch, &mut out);
        Ok(out)
    }

    /// Allocation for [`Basis::evaluate_into`].
    pub fn scratch(&self) -> AtomTable {
        AtomTable::new(self.spec.n, self.max_power, self.max_harmonic)
    }

    /// Evaluates into `out` without allocating. `point` must have dimension `n`.
    pub fn evaluate_into(&self, point: &[f64], table: &mut AtomTable, out: &mut [f64]) {
        table.fill(point, self.spec.omega());
        for (slot, atoms) in out.iter_mut().zip(&self.sparse) {
            let mut v = 1.0;
            for &(coord, atom) in atoms {
                v *= table.get(coord, atom);
            }
            *slot = v;
        }
    }

    /// Value and gradient of `g(x) = coeffs . b(x)`.
    pub fn value_and_gradient(&self, coeffs: &[f64], point: &[f64]) -> (f64, Vec<f64>) {
        let omega = self.spec.omega();
        let n = self.spec.n;
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        let mut vals = vec![0.0; n];
        let mut ders = vec![0.0; n];
        for (f, &c) in self.features.iter().zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            for i in 0..n {
                vals[i] = f.atoms[i].eval(point[i], omega);
                ders[i] = f.atoms[i].derivative(point[i], omega);
            }
            value += c * vals.iter().product::<f64>();
            for i in 0..n {
                let mut d = ders[i];
                for (j, v) in vals.iter().enumerate() {
                    if j != i {
                        d *= v;
                    }
                }
                grad[i] += c * d;
            }
        }
        (value, grad)
    }

    /// `g(x) = coeffs . b(x)`.
    pub fn implicit_value(&self, coeffs: &[f64], point: &[f64]) -> f64 {
        let omega = self.spec.omega();
        self.features
            .iter()
            .zip(coeffs)
            .filter(|(_, &c)| c != 0.0)
            .map(|(f, &c)| c * f.eval(point, omega))
            .sum()
    }

    /// Expansion of `b_i * b_j` over `extended`, which must be a family of the
    /// same kind whose order is at least `order(i) + order(j)`.
    pub fn product_expansion(&self, i: usize, j: usize, extended: &Basis) -> Expansion {
        let (fi, fj) = (&self.features[i], &self.features[j]);
        let mut acc: Vec<(Vec<FeatureAtom>, Rational)> = vec![(Vec::new(), Rational::one())];
        for (ai, aj) in fi.atoms.iter().zip(&fj.atoms) {
            let terms = ai.product(aj);
            let mut next = Vec::with_capacity(acc.len() * terms.len());
            for (prefix, c) in &acc {
                for (atom, tc) in &terms {
                    let mut atoms = prefix.clone();
                    atoms.push(*atom);
                    next.push((atoms, c * tc));
                }
            }
            acc = next;
        }
        let mut merged: BTreeMap<usize, Rational> = BTreeMap::new();
        for (atoms, c) in acc {
            let idx = extended
                .index_of(&Feature { atoms })
                .expect("product of features lies in the extended family");
            *merged.entry(idx).or_insert_with(Rational::zero) += c;
        }
        merged.into_iter().filter(|(_, c)| !c.is_zero()).collect()
    }
}

fn collect_block(
    kind: FamilyKind,
    n: usize,
    coord: usize,
    remaining: u32,
    atoms: &mut Vec<FeatureAtom>,
    out: &mut Vec<Feature>,
) {
    if coord == n - 1 {
        for atom in FeatureAtom::of_order(kind, remaining) {
            atoms[coord] = atom;
            out.push(Feature { atoms: atoms.clone() });
        }
        return;
    }
    for d in 0..=remaining {
        for atom in FeatureAtom::of_order(kind, d) {
            atoms[coord] = atom;
            collect_block(kind, n, coord + 1, remaining - d, atoms, out);
        }
    }
    atoms[coord] = FeatureAtom::ONE;
}

/// Enumerates the ordered feature list of a family.
pub fn enumerate_features(spec: &BasisSpec) -> Vec<Feature> {
    Basis::new(spec).features
}

/// Expansion of `b_i * b_j` over the family of order `2 gamma`.
pub fn feature_product(spec: &BasisSpec, i: usize, j: usize) -> Expansion {
    let basis = Basis::new(spec);
    basis.product_expansion(i, j, &basis.extended())
}

/// Per-coordinate powers and harmonics, refilled for every point.
#[derive(Debug, Clone)]
pub struct AtomTable {
    stride_p: usize,
    stride_q: usize,
    powers: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl AtomTable {
    fn new(n: usize, max_power: u32, max_harmonic: u32) -> Self {
        let stride_p = max_power as usize + 1;
        let stride_q = max_harmonic as usize + 1;
        Self {
            stride_p,
            stride_q,
            powers: vec![0.0; n * stride_p],
            cos: vec![0.0; n * stride_q],
            sin: vec![0.0; n * stride_q],
        }
    }

    fn fill(&mut self, point: &[f64], omega: f64) {
        for (i, &x) in point.iter().enumerate() {
            let p = &mut self.powers[i * self.stride_p..(i + 1) * self.stride_p];
            p[0] = 1.0;
            for s in 1..p.len() {
                p[s] = p[s - 1] * x;
            }
            for q in 1..self.stride_q {
                let (s, c) = (q as f64 * omega * x).sin_cos();
                self.cos[i * self.stride_q + q] = c;
                self.sin[i * self.stride_q + q] = s;
            }
        }
    }

    #[inline]
    fn get(&self, coord: usize, atom: FeatureAtom) -> f64 {
        let p = self.powers[coord * self.stride_p + atom.power as usize];
        match atom.trig {
            Trig::None => p,
            Trig::Cos => p * self.cos[coord * self.stride_q + atom.harmonic as usize],
            Trig::Sin => p * self.sin[coord * self.stride_q + atom.harmonic as usize],
        }
    }
}
