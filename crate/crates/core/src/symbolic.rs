//! Polynomials in noise-moment symbols with exact rational coefficients.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg};

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::basis::{Rational, Trig};
use crate::noise::{MomentKey, MomentTable};

/// A symbol whose value depends on the noise parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Factor {
    /// A raw noise moment.
    Moment(MomentKey),
    /// `1 / (E[cos(q w e)]^2 + E[sin(q w e)]^2)`, the squared-modulus inverse
    /// of the leading rotation-scaling block of harmonic `q`.
    InverseLeadNorm { harmonic: u32 },
}

impl Factor {
    pub fn moment(key: MomentKey) -> Self {
        Factor::Moment(key)
    }

    /// Moment keys this factor reads.
    pub fn keys(&self) -> Vec<MomentKey> {
        match *self {
            Factor::Moment(k) => vec![k],
            Factor::InverseLeadNorm { harmonic } => {
                vec![MomentKey::cos(0, harmonic), MomentKey::sin(0, harmonic)]
            }
        }
    }

    pub fn value(&self, table: &MomentTable) -> f64 {
        match *self {
            Factor::Moment(k) => table.get(&k).expect("moment table covers plan keys"),
            Factor::InverseLeadNorm { harmonic } => {
                let c = table.get(&MomentKey::cos(0, harmonic)).expect("lead cosine moment");
                let s = table.get(&MomentKey::sin(0, harmonic)).expect("lead sine moment");
                1.0 / (c * c + s * s)
            }
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Moment(k) => {
                let p = if k.power == 0 { String::new() } else { format!("e^{}", k.power) };
                match k.trig {
                    Trig::None => write!(f, "E[{}]", if p.is_empty() { "1".into() } else { p }),
                    Trig::Cos => write!(f, "E[{p} cos({}we)]", k.harmonic),
                    Trig::Sin => write!(f, "E[{p} sin({}we)]", k.harmonic),
                }
            }
            Factor::InverseLeadNorm { harmonic } => write!(f, "N{harmonic}^-1"),
        }
    }
}

/// Product of factors with multiplicities, kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactorProduct(pub Vec<(Factor, u32)>);

impl FactorProduct {
    pub fn one() -> Self {
        Self(Vec::new())
    }

    pub fn single(f: Factor) -> Self {
        Self(vec![(f, 1)])
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn factors(&self) -> impl Iterator<Item = &Factor> {
        self.0.iter().map(|(f, _)| f)
    }

    pub fn mul(&self, other: &FactorProduct) -> FactorProduct {
        let mut merged: BTreeMap<Factor, u32> = self.0.iter().copied().collect();
        for &(f, e) in &other.0 {
            *merged.entry(f).or_insert(0) += e;
        }
        FactorProduct(merged.into_iter().collect())
    }

    pub fn value(&self, table: &MomentTable) -> f64 {
        self.0.iter().map(|&(f, e)| f.value(table).powi(e as i32)).product()
    }
}

/// A polynomial in [`Factor`] symbols with rational coefficients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymPoly {
    terms: BTreeMap<FactorProduct, Rational>,
}

impl SymPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: Rational) -> Self {
        let mut p = Self::zero();
        if !c.is_zero() {
            p.terms.insert(FactorProduct::one(), c);
        }
        p
    }

    pub fn one() -> Self {
        Self::constant(Rational::one())
    }

    pub fn integer(c: i64) -> Self {
        Self::constant(Rational::from_integer(c.into()))
    }

    pub fn factor(f: Factor) -> Self {
        let mut p = Self::zero();
        p.terms.insert(FactorProduct::single(f), Rational::one());
        p
    }

    pub fn moment(key: MomentKey) -> Self {
        Self::factor(Factor::Moment(key))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&FactorProduct, &Rational)> {
        self.terms.iter()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn add_term(&mut self, m: FactorProduct, c: Rational) {
        if c.is_zero() {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if o.get().is_zero() {
                    o.remove();
                }
            }
        }
    }

    pub fn scale(&self, c: &Rational) -> SymPoly {
        if c.is_zero() {
            return SymPoly::zero();
        }
        SymPoly { terms: self.terms.iter().map(|(m, v)| (m.clone(), v * c)).collect() }
    }

    pub fn value(&self, table: &MomentTable) -> f64 {
        self.terms.iter().map(|(m, c)| rational_to_f64(c) * m.value(table)).sum()
    }
}

impl Add<&SymPoly> for &SymPoly {
    type Output = SymPoly;
    fn add(self, rhs: &SymPoly) -> SymPoly {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl AddAssign<&SymPoly> for SymPoly {
    fn add_assign(&mut self, rhs: &SymPoly) {
        for (m, c) in &rhs.terms {
            self.add_term(m.clone(), c.clone());
        }
    }
}

impl Mul<&SymPoly> for &SymPoly {
    type Output = SymPoly;
    fn mul(self, rhs: &SymPoly) -> SymPoly {
        let mut out = SymPoly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }
}

impl Neg for &SymPoly {
    type Output = SymPoly;
    fn neg(self) -> SymPoly {
        SymPoly { terms: self.terms.iter().map(|(m, c)| (m.clone(), -c)).collect() }
    }
}

/// `re + i im` with symbolic parts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComplexSym {
    pub re: SymPoly,
    pub im: SymPoly,
}

impl ComplexSym {
    pub fn real(re: SymPoly) -> Self {
        Self { re, im: SymPoly::zero() }
    }

    pub fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }

    pub fn mul(&self, other: &ComplexSym) -> ComplexSym {
        ComplexSym {
            re: &(&self.re * &other.re) + &(-&(&self.im * &other.im)),
            im: &(&self.re * &other.im) + &(&self.im * &other.re),
        }
    }

    pub fn add_assign(&mut self, other: &ComplexSym) {
        self.re += &other.re;
        self.im += &other.im;
    }

    pub fn scale(&self, c: &Rational) -> ComplexSym {
        ComplexSym { re: self.re.scale(c), im: self.im.scale(c) }
    }
}

/// Nearest `f64` to an exact rational.
pub fn rational_to_f64(r: &Rational) -> f64 {
    if let (Some(n), Some(d)) = (r.numer().to_i64(), r.denom().to_i64()) {
        if n.unsigned_abs() < (1 << 53) && d < (1 << 53) {
            return n as f64 / d as f64;
        }
    }
    r.to_f64().unwrap_or(f64::NAN)
}

/// Binomial coefficient as a rational.
pub fn binomial(n: u32, k: u32) -> Rational {
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    Rational::from_integer(acc)
}

/// Serializes a rational as `"p/q"` (or `"p"` for integers).
pub fn rational_to_string(r: &Rational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

pub fn parse_rational(s: &str) -> Option<Rational> {
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.trim().parse::<BigInt>().ok()?, d.trim().parse::<BigInt>().ok()?),
        None => (s.trim().parse::<BigInt>().ok()?, BigInt::one()),
    };
    if d.is_zero() || d.is_negative() {
        return None;
    }
    Some(Rational::new(n, d))
}

/// Serde adapter storing rationals as strings.
pub mod rational_serde {
    use super::*;

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&rational_to_string(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid rational `{s}`")))
    }
}
