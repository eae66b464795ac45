//! Noise compensation of moment matrices.
//!
//! For one coordinate and harmonic `q`, write `Z_s(x) = x^s e^{i q w x}`.
//! With `y = x + e` and `m_r = E[e^r e^{i q w e}]`,
//!
//! ```text
//! E[Z_s(y)] = sum_r C(s, r) m_r Z_{s-r}(x)
//! ```
//!
//! so the estimator `Zhat_s = m_0^{-1} (Z_s(y) - sum_{r>=1} C(s, r) m_r Zhat_{s-r})`
//! is unbiased for `Z_s(x)`. Its real and imaginary parts are the estimators
//! of the cosine and sine atoms; `q = 0` gives the plain powers. A feature is a
//! product of atoms on independent coordinates, so its estimator is the
//! product of the per-coordinate ones. The recursion is unrolled symbolically
//! once per family ([`build_plan`]) and turned into numeric linear functionals
//! of the extended feature vector for each noise parameter ([`instantiate`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{AtomTable, Basis, BasisSpec, Feature, FeatureAtom, Rational, Trig};
use crate::error::{FitError, Result};
use crate::noise::{build_moment_table, MomentKey, MomentTable, NoiseModel};
use crate::symbolic::{
    binomial, rational_serde, rational_to_f64, ComplexSym, Factor, FactorProduct, SymPoly,
};

/// Current plan serialization version.
pub const PLAN_FORMAT_VERSION: u32 = 1;

/// Largest feature count a plan may be built for.
pub const PLAN_CAPACITY: usize = 512;

/// Largest acceptable condition number of a leading block.
pub const MAX_LEAD_CONDITION: f64 = 1e12;

/// One term `coefficient * moments * phi_{y_feature}(y)` of an estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTerm {
    pub y_feature: usize,
    pub moments: FactorProduct,
    #[serde(with = "rational_serde")]
    pub coefficient: Rational,
}

/// Estimator of the matrix entry `b_row(x) b_col(x)`, `row <= col`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryForm {
    pub row: usize,
    pub col: usize,
    pub terms: Vec<ExpansionTerm>,
}

/// Noise-parameter-free symbolic form of the compensated moment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationPlan {
    pub format_version: u32,
    pub basis_spec: BasisSpec,
    /// Upper triangle in row-major order.
    pub entry_forms: Vec<EntryForm>,
    /// Estimator of each `b_k(x)`.
    pub vector_forms: Vec<Vec<ExpansionTerm>>,
    pub required_moments: Vec<MomentKey>,
}

/// Length of a packed upper triangle of an `n x n` matrix.
pub fn upper_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(k, l)`, `k <= l`, in the packed row-major upper triangle.
#[inline]
pub fn upper_index(n: usize, k: usize, l: usize) -> usize {
    debug_assert!(k <= l && l < n);
    k * (2 * n - k + 1) / 2 + (l - k)
}

/// Mirrors a packed upper triangle into a full symmetric matrix.
pub fn unpack_upper(n: usize, packed: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut idx = 0;
    for k in 0..n {
        for l in k..n {
            m[(k, l)] = packed[idx];
            m[(l, k)] = packed[idx];
            idx += 1;
        }
    }
    m
}

type Form = BTreeMap<usize, SymPoly>;

/// Coefficients `w_{s,t}` of `Zhat_s = sum_t w_{s,t} Z_t(y)` for `s <= max_power`.
fn harmonic_recursion(max_power: u32, harmonic: u32) -> Vec<Vec<ComplexSym>> {
    let moment = |r: u32| -> ComplexSym {
        if harmonic == 0 {
            ComplexSym::real(SymPoly::moment(MomentKey::plain(r)))
        } else {
            ComplexSym {
                re: SymPoly::moment(MomentKey::cos(r, harmonic)),
                im: SymPoly::moment(MomentKey::sin(r, harmonic)),
            }
        }
    };
    let lead_inverse = if harmonic == 0 {
        ComplexSym::real(SymPoly::one())
    } else {
        let norm = SymPoly::factor(Factor::InverseLeadNorm { harmonic });
        let m0 = moment(0);
        ComplexSym { re: &m0.re * &norm, im: &(-&m0.im) * &norm }
    };
    let mut w: Vec<Vec<ComplexSym>> = Vec::new();
    for s in 0..=max_power {
        let mut rhs = vec![ComplexSym::default(); s as usize + 1];
        rhs[s as usize] = ComplexSym::real(SymPoly::one());
        for r in 1..=s {
            let coupling = moment(r).scale(&-binomial(s, r));
            for (t, wt) in w[(s - r) as usize].iter().enumerate() {
                rhs[t].add_assign(&coupling.mul(wt));
            }
        }
        w.push(rhs.iter().map(|c| lead_inverse.mul(c)).collect());
    }
    w
}

/// Per-coordinate atom estimators keyed by atom.
struct AtomEstimators {
    cache: HashMap<FeatureAtom, Vec<(FeatureAtom, SymPoly)>>,
}

impl AtomEstimators {
    fn new(extended: &Basis) -> Self {
        let mut max_power: BTreeMap<u32, u32> = BTreeMap::new();
        for f in extended.features() {
            for a in &f.atoms {
                let e = max_power.entry(a.harmonic).or_insert(0);
                *e = (*e).max(a.power);
            }
        }
        let mut cache = HashMap::new();
        for (&q, &smax) in &max_power {
            let w = harmonic_recursion(smax, q);
            for s in 0..=smax {
                let ws = &w[s as usize];
                if q == 0 {
                    let terms = ws
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| !c.re.is_zero())
                        .map(|(t, c)| (FeatureAtom::monomial(t as u32), c.re.clone()))
                        .collect();
                    cache.insert(FeatureAtom::monomial(s), terms);
                    continue;
                }
                let mut cos_terms = Vec::new();
                let mut sin_terms = Vec::new();
                for (t, c) in ws.iter().enumerate() {
                    let (ca, sa) = (FeatureAtom::cos(t as u32, q), FeatureAtom::sin(t as u32, q));
                    cos_terms.push((ca, c.re.clone()));
                    cos_terms.push((sa, -&c.im));
                    sin_terms.push((ca, c.im.clone()));
                    sin_terms.push((sa, c.re.clone()));
                }
                cos_terms.retain(|(_, p)| !p.is_zero());
                sin_terms.retain(|(_, p)| !p.is_zero());
                cache.insert(FeatureAtom::cos(s, q), cos_terms);
                cache.insert(FeatureAtom::sin(s, q), sin_terms);
            }
        }
        Self { cache }
    }

    /// Estimator of a whole feature as the tensor product of atom estimators.
    fn feature(&self, feature: &Feature, extended: &Basis) -> Form {
        let mut acc: Vec<(Vec<FeatureAtom>, SymPoly)> = vec![(Vec::new(), SymPoly::one())];
        for atom in &feature.atoms {
            let terms = &self.cache[atom];
            let mut next = Vec::with_capacity(acc.len() * terms.len());
            for (prefix, c) in &acc {
                for (ya, tc) in terms {
                    let mut atoms = prefix.clone();
                    atoms.push(*ya);
                    next.push((atoms, c * tc));
                }
            }
            acc = next;
        }
        let mut form = Form::new();
        for (atoms, c) in acc {
            let idx = extended
                .index_of(&Feature { atoms })
                .expect("estimator atoms have order at most the feature order");
            *form.entry(idx).or_default() += &c;
        }
        form.retain(|_, p| !p.is_zero());
        form
    }
}

fn flatten(form: &Form) -> Vec<ExpansionTerm> {
    form.iter()
        .flat_map(|(&y_feature, poly)| {
            poly.terms().map(move |(m, c)| ExpansionTerm {
                y_feature,
                moments: m.clone(),
                coefficient: c.clone(),
            })
        })
        .collect()
}

/// Builds the symbolic compensation plan of a feature family.
pub fn build_plan(spec: &BasisSpec) -> Result<CompensationPlan> {
    let count = spec.feature_count();
    if count > PLAN_CAPACITY {
        return Err(FitError::Capacity { features: count, capacity: PLAN_CAPACITY });
    }
    let basis = Basis::new(spec);
    let extended = basis.extended();
    let atoms = AtomEstimators::new(&extended);
    let estimators: Vec<Form> =
        extended.features().par_iter().map(|f| atoms.feature(f, &extended)).collect();
    let n = basis.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|k| (k..n).map(move |l| (k, l))).collect();
    let entry_forms: Vec<EntryForm> = pairs
        .par_iter()
        .map(|&(row, col)| {
            let mut form = Form::new();
            for (e, c) in basis.product_expansion(row, col, &extended) {
                for (&y, poly) in &estimators[e] {
                    *form.entry(y).or_default() += &poly.scale(&c);
                }
            }
            form.retain(|_, p| !p.is_zero());
            EntryForm { row, col, terms: flatten(&form) }
        })
        .collect();
    // the family of order gamma is a prefix of the extended family
    let vector_forms: Vec<Vec<ExpansionTerm>> = estimators[..n].iter().map(flatten).collect();
    let mut keys = BTreeSet::new();
    for term in entry_forms.iter().flat_map(|e| &e.terms).chain(vector_forms.iter().flatten()) {
        for f in term.moments.factors() {
            keys.extend(f.keys());
        }
    }
    Ok(CompensationPlan {
        format_version: PLAN_FORMAT_VERSION,
        basis_spec: spec.clone(),
        entry_forms,
        vector_forms,
        required_moments: keys.into_iter().collect(),
    })
}

/// Serializes a plan as JSON.
pub fn save_plan(plan: &CompensationPlan) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(plan)?)
}

/// Parses a plan written by [`save_plan`], checking version and structure.
pub fn load_plan(bytes: &[u8]) -> Result<CompensationPlan> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| FitError::Malformed(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| FitError::Malformed("missing format_version".into()))?;
    if found != PLAN_FORMAT_VERSION as u64 {
        return Err(FitError::VersionMismatch {
            expected: PLAN_FORMAT_VERSION,
            found: u32::try_from(found).unwrap_or(u32::MAX),
        });
    }
    let plan: CompensationPlan =
        serde_json::from_value(value).map_err(|e| FitError::Malformed(e.to_string()))?;
    plan.validate()?;
    Ok(plan)
}

impl CompensationPlan {
    /// Number of features `N`.
    pub fn len(&self) -> usize {
        self.vector_forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector_forms.is_empty()
    }

    /// Form of entry `(k, l)` in either order.
    pub fn entry(&self, k: usize, l: usize) -> &EntryForm {
        let (k, l) = if k <= l { (k, l) } else { (l, k) };
        &self.entry_forms[upper_index(self.len(), k, l)]
    }

    fn validate(&self) -> Result<()> {
        let malformed = |msg: String| Err(FitError::Malformed(msg));
        let n = self.basis_spec.feature_count();
        if n > PLAN_CAPACITY {
            return Err(FitError::Capacity { features: n, capacity: PLAN_CAPACITY });
        }
        if self.vector_forms.len() != n || self.entry_forms.len() != upper_len(n) {
            return malformed(format!("plan does not match its {n}-feature basis"));
        }
        let ext = self.basis_spec.with_gamma(2 * self.basis_spec.gamma).feature_count();
        let keys: BTreeSet<&MomentKey> = self.required_moments.iter().collect();
        let check_terms = |terms: &[ExpansionTerm]| -> Result<()> {
            for t in terms {
                if t.y_feature >= ext || t.coefficient.is_zero() {
                    return malformed(format!("invalid term for feature {}", t.y_feature));
                }
                for f in t.moments.factors() {
                    if f.keys().iter().any(|k| !keys.contains(k)) {
                        return malformed(format!("moment {f} missing from required set"));
                    }
                }
            }
            Ok(())
        };
        let mut idx = 0;
        for k in 0..n {
            for l in k..n {
                let e = &self.entry_forms[idx];
                if (e.row, e.col) != (k, l) {
                    return malformed(format!("entry {idx} is out of order"));
                }
                check_terms(&e.terms)?;
                idx += 1;
            }
        }
        for v in &self.vector_forms {
            check_terms(v)?;
        }
        Ok(())
    }

    /// Instantiates the plan at a noise model.
    pub fn instantiate(self: &Arc<Self>, model: &NoiseModel) -> Result<CompensationEvaluator> {
        instantiate(self, model)
    }
}

/// Sparse linear functionals over the extended feature vector.
#[derive(Debug, Clone, Default)]
struct Functionals {
    offsets: Vec<usize>,
    index: Vec<u32>,
    coef: Vec<f64>,
}

impl Functionals {
    fn collapse<'a>(
        forms: impl Iterator<Item = &'a [ExpansionTerm]>,
        values: &mut HashMap<FactorProduct, f64>,
        table: &MomentTable,
    ) -> Self {
        let mut out = Functionals { offsets: vec![0], ..Default::default() };
        for terms in forms {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for t in terms {
                let m = *values.entry(t.moments.clone()).or_insert_with(|| t.moments.value(table));
                *acc.entry(t.y_feature).or_insert(0.0) += rational_to_f64(&t.coefficient) * m;
            }
            for (y, c) in acc {
                if c != 0.0 {
                    out.index.push(y as u32);
                    out.coef.push(c);
                }
            }
            out.offsets.push(out.index.len());
        }
        out
    }

    #[inline]
    fn apply(&self, row: usize, phi: &[f64]) -> f64 {
        let (a, b) = (self.offsets[row], self.offsets[row + 1]);
        self.index[a..b].iter().zip(&self.coef[a..b]).map(|(&i, &c)| c * phi[i as usize]).sum()
    }

    fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[row], self.offsets[row + 1]);
        self.index[a..b].iter().zip(&self.coef[a..b]).map(|(&i, &c)| (i as usize, c))
    }

    fn nnz(&self) -> usize {
        self.index.len()
    }
}

/// A plan bound to one noise parameter.
#[derive(Debug, Clone)]
pub struct CompensationEvaluator {
    plan: Arc<CompensationPlan>,
    model: NoiseModel,
    basis: Basis,
    extended: Basis,
    moments: MomentTable,
    entries: Functionals,
    vector: Functionals,
    worst_condition: f64,
}

/// Per-thread scratch for [`CompensationEvaluator`].
#[derive(Debug, Clone)]
pub struct Workspace {
    table: AtomTable,
    phi: Vec<f64>,
}

/// Condition number of each leading block `A(j, j)` of the extended family.
fn lead_conditions(extended: &Basis, table: &MomentTable) -> Vec<f64> {
    let modulus = |q: u32| -> f64 {
        let c = table.get(&MomentKey::cos(0, q)).unwrap_or(1.0);
        let s = table.get(&MomentKey::sin(0, q)).unwrap_or(0.0);
        c.hypot(s)
    };
    (0..=extended.spec().gamma)
        .map(|j| {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for f in &extended.features()[extended.block(j)] {
                let scale: f64 = f
                    .atoms
                    .iter()
                    .filter(|a| a.trig != Trig::None)
                    .map(|a| modulus(a.harmonic))
                    .product();
                lo = lo.min(scale);
                hi = hi.max(scale);
            }
            if lo > 0.0 {
                hi / lo
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// Binds a plan to a noise model.
pub fn instantiate(plan: &Arc<CompensationPlan>, model: &NoiseModel) -> Result<CompensationEvaluator> {
    let spec = &plan.basis_spec;
    let basis = Basis::new(spec);
    let extended = basis.extended();
    let omega = spec.omega();
    let moments = build_moment_table(model, &plan.required_moments, omega)?;
    let conditions = lead_conditions(&extended, &moments);
    let mut worst_condition = 1.0f64;
    for (order, &condition) in conditions.iter().enumerate() {
        if !(condition <= MAX_LEAD_CONDITION) {
            return Err(FitError::SingularLeadingBlock { order, condition });
        }
        worst_condition = worst_condition.max(condition);
    }
    let mut cache = HashMap::new();
    let entries = Functionals::collapse(
        plan.entry_forms.iter().map(|e| e.terms.as_slice()),
        &mut cache,
        &moments,
    );
    let vector = Functionals::collapse(plan.vector_forms.iter().map(Vec::as_slice), &mut cache, &moments);
    Ok(CompensationEvaluator {
        plan: Arc::clone(plan),
        model: *model,
        basis,
        extended,
        moments,
        entries,
        vector,
        worst_condition,
    })
}

impl CompensationEvaluator {
    pub fn plan(&self) -> &Arc<CompensationPlan> {
        &self.plan
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// The family of order `2 gamma` the functionals act on.
    pub fn extended(&self) -> &Basis {
        &self.extended
    }

    pub fn moment_table(&self) -> &MomentTable {
        &self.moments
    }

    /// Largest leading-block condition number seen at instantiation.
    pub fn condition(&self) -> f64 {
        self.worst_condition
    }

    /// Number of features `N`.
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// Total number of stored coefficients across all entry functionals.
    pub fn nnz(&self) -> usize {
        self.entries.nnz() + self.vector.nnz()
    }

    /// Collapsed functional of entry `(k, l)` as `(extended feature, coefficient)`.
    pub fn entry_functional(&self, k: usize, l: usize) -> Vec<(usize, f64)> {
        let (k, l) = if k <= l { (k, l) } else { (l, k) };
        self.entries.row(upper_index(self.len(), k, l)).collect()
    }

    /// Collapsed functional of the `k`-th feature estimator.
    pub fn vector_functional(&self, k: usize) -> Vec<(usize, f64)> {
        self.vector.row(k).collect()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace { table: self.extended.scratch(), phi: vec![0.0; self.extended.len()] }
    }

    fn load(&self, y: &[f64], ws: &mut Workspace) -> Result<()> {
        if y.len() != self.basis.dim() {
            return Err(FitError::DimensionMismatch { expected: self.basis.dim(), got: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFinite);
        }
        self.extended.evaluate_into(y, &mut ws.table, &mut ws.phi);
        Ok(())
    }

    /// Adds `Mhat(y)` to a packed upper triangle and, if given, `bhat(y)` to a vector.
    pub fn add_point(
        &self,
        y: &[f64],
        ws: &mut Workspace,
        matrix: &mut [f64],
        vector: Option<&mut [f64]>,
    ) -> Result<()> {
        self.load(y, ws)?;
        let n = self.len();
        let phi = &ws.phi;
        if self.model.is_degenerate() {
            // no noise: the estimator is b(y) b(y)^T itself, and b(y) is a prefix of phi
            let mut idx = 0;
            for k in 0..n {
                for l in k..n {
                    matrix[idx] += phi[k] * phi[l];
                    idx += 1;
                }
            }
            if let Some(v) = vector {
                for (s, p) in v.iter_mut().zip(&phi[..n]) {
                    *s += p;
                }
            }
            return Ok(());
        }
        for (i, slot) in matrix.iter_mut().enumerate() {
            *slot += self.entries.apply(i, phi);
        }
        if let Some(v) = vector {
            for (k, slot) in v.iter_mut().enumerate() {
                *slot += self.vector.apply(k, phi);
            }
        }
        Ok(())
    }

    /// The compensated matrix `Mhat(y)`, exactly symmetric.
    pub fn compensate_point(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let mut packed = vec![0.0; upper_len(self.len())];
        self.add_point(y, &mut self.workspace(), &mut packed, None)?;
        Ok(unpack_upper(self.len(), &packed))
    }

    /// The compensated feature vector `bhat(y)`.
    pub fn compensate_feature(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut ws = self.workspace();
        self.load(y, &mut ws)?;
        let n = self.len();
        if self.model.is_degenerate() {
            return Ok(ws.phi[..n].to_vec());
        }
        Ok((0..n).map(|k| self.vector.apply(k, &ws.phi)).collect())
    }

    /// Bias `B(y) = b(y) b(y)^T - Mhat(y)` removed by compensation.
    pub fn bias(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let b = DMatrix::from_column_slice(self.len(), 1, &self.basis.evaluate(y)?);
        Ok(&b * b.transpose() - self.compensate_point(y)?)
    }

    /// Packed upper triangle of the functionals applied to a given extended
    /// feature vector, usually a dataset mean. Compensation is linear in the
    /// extended features, so this equals the mean of `Mhat` over the dataset.
    pub fn apply_to_extended(&self, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.extended.len(), "extended feature length");
        (0..upper_len(self.len())).map(|i| self.entries.apply(i, phi)).collect()
    }

    /// Feature-vector functionals applied to an extended feature vector.
    pub fn apply_vector_to_extended(&self, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.extended.len(), "extended feature length");
        (0..self.len()).map(|k| self.vector.apply(k, phi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseModel;
    use proptest::prelude::*;

    fn r(n: i64, d: i64) -> Rational {
        Rational::new(n.into(), d.into())
    }

    fn plan(spec: BasisSpec) -> Arc<CompensationPlan> {
        Arc::new(build_plan(&spec).unwrap())
    }

    fn coefficient(terms: &[ExpansionTerm], y: usize, moments: &[(MomentKey, u32)]) -> Rational {
        let want = FactorProduct(moments.iter().map(|&(k, e)| (Factor::Moment(k), e)).collect());
        terms
            .iter()
            .filter(|t| t.y_feature == y && t.moments == want)
            .map(|t| t.coefficient.clone())
            .sum()
    }

    #[test]
    fn upper_index_is_row_major() {
        for n in 1..7 {
            let mut idx = 0;
            for k in 0..n {
                for l in k..n {
                    assert_eq!(upper_index(n, k, l), idx);
                    idx += 1;
                }
            }
            assert_eq!(idx, upper_len(n));
        }
    }

    #[test]
    fn univariate_square_unrolls_the_recursion() {
        // hat(x^2) = y^2 - 2 E[e] (y - E[e]) - E[e^2]
        let p = plan(BasisSpec::monomial(1, 1).unwrap());
        let terms = &p.entry(1, 1).terms;
        let e1 = MomentKey::plain(1);
        let e2 = MomentKey::plain(2);
        assert_eq!(coefficient(terms, 2, &[]), r(1, 1));
        assert_eq!(coefficient(terms, 1, &[(e1, 1)]), r(-2, 1));
        assert_eq!(coefficient(terms, 0, &[(e1, 2)]), r(2, 1));
        assert_eq!(coefficient(terms, 0, &[(e2, 1)]), r(-1, 1));
        assert_eq!(terms.len(), 4);
    }

    #[test]
    fn constant_entry_is_trivial() {
        for spec in [BasisSpec::monomial(3, 2).unwrap(), BasisSpec::poly_trig(2, 2, 1.3).unwrap()] {
            let p = plan(spec);
            let terms = &p.entry(0, 0).terms;
            assert_eq!(terms.len(), 1);
            assert_eq!(terms[0].y_feature, 0);
            assert!(terms[0].moments.is_one());
            assert_eq!(terms[0].coefficient, r(1, 1));
        }
    }

    #[test]
    fn mixed_product_is_separable() {
        // hat(x1 x2) = (y1 - E[e]) (y2 - E[e])
        let spec = BasisSpec::monomial(2, 1).unwrap();
        let p = plan(spec.clone());
        let basis = Basis::new(&spec);
        let ext = basis.extended();
        let idx = |atoms: [u32; 2]| {
            ext.index_of(&Feature { atoms: atoms.iter().map(|&s| FeatureAtom::monomial(s)).collect() })
                .unwrap()
        };
        let terms = &p.entry(1, 2).terms;
        let e1 = MomentKey::plain(1);
        assert_eq!(coefficient(terms, idx([1, 1]), &[]), r(1, 1));
        assert_eq!(coefficient(terms, idx([1, 0]), &[(e1, 1)]), r(-1, 1));
        assert_eq!(coefficient(terms, idx([0, 1]), &[(e1, 1)]), r(-1, 1));
        assert_eq!(coefficient(terms, idx([0, 0]), &[(e1, 2)]), r(1, 1));
        assert_eq!(terms.len(), 4);
    }

    #[test]
    fn every_term_stays_in_the_extended_family() {
        let spec = BasisSpec::poly_trig(2, 2, 0.9).unwrap();
        let p = plan(spec.clone());
        let ext = spec.with_gamma(4).feature_count();
        for e in &p.entry_forms {
            assert!(e.terms.iter().all(|t| t.y_feature < ext && !t.coefficient.is_zero()));
        }
    }

    #[test]
    fn uniform_square_collapses() {
        let p = plan(BasisSpec::monomial(1, 1).unwrap());
        let ev = instantiate(&p, &NoiseModel::uniform(0.3).unwrap()).unwrap();
        let m = ev.compensate_point(&[2.0]).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(0, 1)], 2.0);
        assert_eq!(m[(1, 0)], 2.0);
        assert!((m[(1, 1)] - (4.0 - 0.03)).abs() < 1e-15);
        assert_eq!(ev.entry_functional(1, 1).len(), 2);
    }

    #[test]
    fn uniform_feature_vector() {
        let p = plan(BasisSpec::monomial(1, 2).unwrap());
        let u = 0.4;
        let ev = instantiate(&p, &NoiseModel::uniform(u).unwrap()).unwrap();
        let b = ev.compensate_feature(&[1.5]).unwrap();
        assert_eq!(b[0], 1.0);
        assert_eq!(b[1], 1.5);
        assert!((b[2] - (2.25 - u * u / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn poly_trig_leading_block_is_rotation_scaling() {
        // features: 1, x, cos, sin, x^2, x cos, x sin, cos 2, sin 2; the leading
        // coefficient of a harmonic-q atom in its own estimator is 1 / E[cos(q w e)].
        let (omega, u) = (1.7, 0.35);
        let p = plan(BasisSpec::poly_trig(1, 2, omega).unwrap());
        let ev = instantiate(&p, &NoiseModel::uniform(u).unwrap()).unwrap();
        let sinc = |t: f64| t.sin() / t;
        let lead = |k: usize| ev.vector_functional(k).into_iter().find(|&(i, _)| i == k).unwrap().1;
        assert_eq!(lead(1), 1.0);
        assert_eq!(lead(4), 1.0);
        for k in [2, 3, 5, 6] {
            assert!((lead(k) - 1.0 / sinc(omega * u)).abs() < 1e-13);
        }
        assert!((lead(7) - 1.0 / sinc(2.0 * omega * u)).abs() < 1e-13);
        assert!((lead(8) - 1.0 / sinc(2.0 * omega * u)).abs() < 1e-13);
        // symmetric noise: no sine feature in the estimator of a cosine one
        assert!(ev.vector_functional(7).iter().all(|&(i, _)| i != 8));
        // worst block is order four: x^4 against cos(4 w x)
        let expected = 1.0 / sinc(4.0 * omega * u);
        assert!((ev.condition() - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn zero_noise_is_exact_identity() {
        let spec = BasisSpec::poly_trig(2, 2, 1.1).unwrap();
        let p = plan(spec.clone());
        let ev = instantiate(&p, &NoiseModel::uniform(0.0).unwrap()).unwrap();
        let basis = Basis::new(&spec);
        let y = [0.37, -1.21];
        let b = DMatrix::from_column_slice(basis.len(), 1, &basis.evaluate(&y).unwrap());
        assert_eq!(ev.compensate_point(&y).unwrap(), &b * b.transpose());
        assert_eq!(ev.compensate_feature(&y).unwrap(), basis.evaluate(&y).unwrap());
        assert_eq!(ev.condition(), 1.0);
        assert!(ev.bias(&y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singular_lead_block_is_reported() {
        // sinc(q w u) = 0 at q w u = pi
        let spec = BasisSpec::poly_trig(1, 1, 1.0).unwrap();
        let p = plan(spec);
        let err = instantiate(&p, &NoiseModel::uniform(std::f64::consts::PI / 2.0).unwrap()).unwrap_err();
        assert!(matches!(err, FitError::SingularLeadingBlock { order: 2, .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn capacity_guard() {
        let spec = BasisSpec::monomial(3, 13).unwrap();
        assert!(spec.feature_count() > PLAN_CAPACITY);
        let err = build_plan(&spec).unwrap_err();
        assert!(matches!(err, FitError::Capacity { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_points_are_rejected() {
        let p = plan(BasisSpec::monomial(2, 1).unwrap());
        let ev = instantiate(&p, &NoiseModel::uniform(0.1).unwrap()).unwrap();
        assert!(matches!(ev.compensate_point(&[1.0]), Err(FitError::DimensionMismatch { .. })));
        assert!(matches!(ev.compensate_point(&[1.0, f64::NAN]), Err(FitError::NonFinite)));
        assert!(matches!(ev.compensate_feature(&[f64::INFINITY, 0.0]), Err(FitError::NonFinite)));
    }

    #[test]
    fn save_load_round_trip() {
        let p = build_plan(&BasisSpec::poly_trig(2, 2, 0.75).unwrap()).unwrap();
        let bytes = save_plan(&p).unwrap();
        assert_eq!(load_plan(&bytes).unwrap(), p);
    }

    #[test]
    fn truncated_and_versioned_payloads() {
        let p = build_plan(&BasisSpec::monomial(2, 2).unwrap()).unwrap();
        let bytes = save_plan(&p).unwrap();
        let err = load_plan(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, FitError::Malformed(_)), "{err}");

        let mut bumped = p.clone();
        bumped.format_version = PLAN_FORMAT_VERSION + 1;
        let err = load_plan(&save_plan(&bumped).unwrap()).unwrap_err();
        assert!(matches!(err, FitError::VersionMismatch { found, .. } if found == PLAN_FORMAT_VERSION + 1));

        let mut broken = p;
        broken.entry_forms.pop();
        assert!(matches!(load_plan(&save_plan(&broken).unwrap()), Err(FitError::Malformed(_))));
    }

    #[test]
    fn extended_mean_path_matches_pointwise() {
        let spec = BasisSpec::poly_trig(2, 2, 1.2).unwrap();
        let p = plan(spec);
        let ev = instantiate(&p, &NoiseModel::uniform(0.2).unwrap()).unwrap();
        let y = [0.3, -0.7];
        let phi = ev.extended().evaluate(&y).unwrap();
        let packed = ev.apply_to_extended(&phi);
        let m = ev.compensate_point(&y).unwrap();
        assert_eq!(unpack_upper(ev.len(), &packed), m);
        assert_eq!(ev.apply_vector_to_extended(&phi), ev.compensate_feature(&y).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn output_is_exactly_symmetric(
            y in prop::collection::vec(-2.0f64..2.0, 2),
            u in 0.0f64..0.5,
        ) {
            let p = plan(BasisSpec::poly_trig(2, 1, 0.8).unwrap());
            let ev = instantiate(&p, &NoiseModel::uniform(u).unwrap()).unwrap();
            let m = ev.compensate_point(&y).unwrap();
            prop_assert_eq!(m.transpose(), m);
        }
    }
}
