//! Comparison functions: class K, class K∞ and their extended variants.
//!
//! Every safety condition in the crate is phrased through one of these
//! scalar maps (α, γ, ι, σ̲, σ̄). A [`ComparisonFunction`] pairs a concrete
//! family with the domain it is claimed to be a comparison function on.
//!
//! Extension rule: `Power` is extended to negative arguments by odd
//! reflection, `c·|r|^p·sign(r)`, which makes every power family an
//! extended class K∞ function without a separate code path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Geometric probe grid `10^j, j = -3..=3` used for the unboundedness check.
pub const UNBOUNDED_PROBE_EXPONENTS: std::ops::RangeInclusive<i32> = -3..=3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KfunError {
    #[error("argument {r} outside the domain [{lo}, {hi}]")]
    Domain { r: f64, lo: f64, hi: f64 },
    #[error("range [{range_lo}, {range_hi}] of inner function not contained in outer domain [{lo}, {hi}]")]
    RangeMismatch {
        range_lo: f64,
        range_hi: f64,
        lo: f64,
        hi: f64,
    },
    #[error("function has no closed-form inverse: {0}")]
    NotInvertible(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Which comparison-function class the function is claimed to belong to.
///
/// Bounded domains are treated as closed intervals `[-b, a]` (or `[0, a]`)
/// so that tabulated functions can be evaluated at their end breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainKind {
    ClassK { a: f64 },
    ClassKInf,
    ExtendedClassK { a: f64, b: f64 },
    ExtendedClassKInf,
}

impl DomainKind {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            DomainKind::ClassK { a } => (0.0, a),
            DomainKind::ClassKInf => (0.0, f64::INFINITY),
            DomainKind::ExtendedClassK { a, b } => (-b, a),
            DomainKind::ExtendedClassKInf => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn is_extended(&self) -> bool {
        matches!(
            self,
            DomainKind::ExtendedClassK { .. } | DomainKind::ExtendedClassKInf
        )
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, DomainKind::ClassKInf | DomainKind::ExtendedClassKInf)
    }

    fn from_bounds(lo: f64, hi: f64) -> Self {
        match (lo == 0.0, hi.is_infinite()) {
            (true, true) => DomainKind::ClassKInf,
            (true, false) => DomainKind::ClassK { a: hi },
            (false, true) if lo.is_infinite() => DomainKind::ExtendedClassKInf,
            _ => DomainKind::ExtendedClassK { a: hi, b: -lo },
        }
    }

    fn contains(&self, r: f64) -> bool {
        let (lo, hi) = self.bounds();
        r >= lo && r <= hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    Linear {
        k: f64,
    },
    /// `r ↦ r / c`; the inverse of `Linear(c)`, kept as a division so that
    /// `Linear(c)⁻¹ ∘ γ` evaluates to exactly `γ(r) / c`.
    LinearDivisor {
        c: f64,
    },
    Power {
        c: f64,
        p: f64,
    },
    Composition {
        outer: Box<ComparisonFunction>,
        inner: Box<ComparisonFunction>,
    },
    /// Monotone piecewise-linear interpolation through sorted `(r, value)` pairs.
    Tabulated {
        breakpoints: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Repr", into = "Repr")]
pub struct ComparisonFunction {
    family: Family,
    domain: DomainKind,
}

#[derive(Serialize, Deserialize)]
struct Repr {
    #[serde(flatten)]
    family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<DomainKind>,
}

impl TryFrom<Repr> for ComparisonFunction {
    type Error = KfunError;

    fn try_from(repr: Repr) -> Result<Self, Self::Error> {
        let f = match repr.family {
            Family::Linear { k } => ComparisonFunction::linear(k)?,
            Family::LinearDivisor { c } => ComparisonFunction::linear(c)?.inverse()?,
            Family::Power { c, p } => ComparisonFunction::power(c, p)?,
            Family::Composition { outer, inner } => ComparisonFunction::compose(&outer, &inner)?,
            Family::Tabulated { breakpoints } => ComparisonFunction::tabulated(breakpoints)?,
        };
        match repr.domain {
            Some(domain) => f.restricted_to(domain),
            None => Ok(f),
        }
    }
}

impl From<ComparisonFunction> for Repr {
    fn from(f: ComparisonFunction) -> Self {
        let natural = f.natural_domain();
        Repr {
            domain: (f.domain != natural).then_some(f.domain),
            family: f.family,
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), KfunError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(KfunError::InvalidParameter(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

impl ComparisonFunction {
    /// `r ↦ k·r`, extended class K∞.
    pub fn linear(k: f64) -> Result<Self, KfunError> {
        check_positive("k", k)?;
        Ok(Self {
            family: Family::Linear { k },
            domain: DomainKind::ExtendedClassKInf,
        })
    }

    /// `r ↦ c·|r|^p·sign(r)`, extended class K∞.
    pub fn power(c: f64, p: f64) -> Result<Self, KfunError> {
        check_positive("c", c)?;
        check_positive("p", p)?;
        Ok(Self {
            family: Family::Power { c, p },
            domain: DomainKind::ExtendedClassKInf,
        })
    }

    /// Piecewise-linear table. Breakpoint abscissae must be strictly
    /// increasing and the table must pass through `(0, 0)`. Monotonicity
    /// of the values is not enforced here; use [`verify_class_membership`].
    pub fn tabulated(breakpoints: Vec<(f64, f64)>) -> Result<Self, KfunError> {
        if breakpoints.len() < 2 {
            return Err(KfunError::InvalidParameter(
                "tabulated function needs at least two breakpoints".into(),
            ));
        }
        if breakpoints
            .iter()
            .any(|(r, v)| !r.is_finite() || !v.is_finite())
        {
            return Err(KfunError::InvalidParameter(
                "tabulated breakpoints must be finite".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(KfunError::InvalidParameter(
                "tabulated abscissae must be strictly increasing".into(),
            ));
        }
        if !breakpoints.iter().any(|&(r, v)| r == 0.0 && v == 0.0) {
            return Err(KfunError::InvalidParameter(
                "tabulated function must contain the breakpoint (0, 0)".into(),
            ));
        }
        let lo = breakpoints[0].0;
        let hi = breakpoints[breakpoints.len() - 1].0;
        Ok(Self {
            family: Family::Tabulated { breakpoints },
            domain: DomainKind::from_bounds(lo, hi),
        })
    }

    /// Identity map, the trivial compatible projection and default ι.
    pub fn identity() -> Self {
        Self {
            family: Family::Linear { k: 1.0 },
            domain: DomainKind::ExtendedClassKInf,
        }
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn domain(&self) -> DomainKind {
        self.domain
    }

    /// Slope when the function is linear.
    pub fn linear_gain(&self) -> Option<f64> {
        match self.family {
            Family::Linear { k } => Some(k),
            Family::LinearDivisor { c } => Some(1.0 / c),
            _ => None,
        }
    }

    /// Narrow the claimed domain. The new domain must lie inside the
    /// natural one of the family.
    pub fn restricted_to(mut self, domain: DomainKind) -> Result<Self, KfunError> {
        let (lo, hi) = domain.bounds();
        let (nlo, nhi) = self.natural_domain().bounds();
        if lo < nlo || hi > nhi || lo > 0.0 || hi <= 0.0 {
            return Err(KfunError::InvalidParameter(format!(
                "domain [{lo}, {hi}] not inside natural domain [{nlo}, {nhi}] or excludes 0"
            )));
        }
        self.domain = domain;
        Ok(self)
    }

    fn natural_domain(&self) -> DomainKind {
        match &self.family {
            Family::Linear { .. } | Family::LinearDivisor { .. } | Family::Power { .. } => {
                DomainKind::ExtendedClassKInf
            }
            Family::Composition { inner, .. } => inner.domain,
            Family::Tabulated { breakpoints } => {
                DomainKind::from_bounds(breakpoints[0].0, breakpoints[breakpoints.len() - 1].0)
            }
        }
    }

    pub fn evaluate(&self, r: f64) -> Result<f64, KfunError> {
        if !self.domain.contains(r) {
            let (lo, hi) = self.domain.bounds();
            return Err(KfunError::Domain { r, lo, hi });
        }
        match &self.family {
            Family::Composition { outer, inner } => outer.evaluate(inner.evaluate(r)?),
            _ => Ok(self.raw(r)),
        }
    }

    /// Family formula without domain checks; maps ±∞ to ±∞ for the
    /// unbounded families, which is how ranges are computed.
    fn raw(&self, r: f64) -> f64 {
        match &self.family {
            Family::Linear { k } => k * r,
            Family::LinearDivisor { c } => r / c,
            Family::Power { c, p } => {
                if r == 0.0 {
                    0.0
                } else {
                    c * r.abs().powf(*p) * r.signum()
                }
            }
            Family::Composition { outer, inner } => outer.raw(inner.raw(r)),
            Family::Tabulated { breakpoints } => interpolate(breakpoints, r),
        }
    }

    /// Image of the claimed domain, assuming monotonicity.
    pub fn range(&self) -> (f64, f64) {
        let (lo, hi) = self.domain.bounds();
        (self.raw(lo), self.raw(hi))
    }

    pub fn inverse(&self) -> Result<Self, KfunError> {
        let (rlo, rhi) = self.range();
        let family = match &self.family {
            Family::Linear { k } => Family::LinearDivisor { c: *k },
            Family::LinearDivisor { c } => Family::Linear { k: *c },
            Family::Power { c, p } => Family::Power {
                c: c.powf(-1.0 / p),
                p: 1.0 / p,
            },
            Family::Tabulated { breakpoints } => {
                if breakpoints.windows(2).any(|w| w[0].1 >= w[1].1) {
                    return Err(KfunError::NotInvertible(
                        "tabulated values are not strictly increasing".into(),
                    ));
                }
                Family::Tabulated {
                    breakpoints: breakpoints.iter().map(|&(r, v)| (v, r)).collect(),
                }
            }
            Family::Composition { outer, inner } => {
                let inner_inv = inner.inverse().map_err(|e| {
                    KfunError::NotInvertible(format!("inner part of composition: {e}"))
                })?;
                let outer_inv = outer.inverse().map_err(|e| {
                    KfunError::NotInvertible(format!("outer part of composition: {e}"))
                })?;
                return Self::compose(&inner_inv, &outer_inv);
            }
        };
        Ok(Self {
            family,
            domain: DomainKind::from_bounds(rlo, rhi),
        })
    }

    /// `r ↦ outer(inner(r))` on the domain of `inner`.
    pub fn compose(outer: &Self, inner: &Self) -> Result<Self, KfunError> {
        let (range_lo, range_hi) = inner.range();
        let (lo, hi) = outer.domain.bounds();
        if range_lo < lo || range_hi > hi {
            return Err(KfunError::RangeMismatch {
                range_lo,
                range_hi,
                lo,
                hi,
            });
        }
        Ok(Self {
            family: Family::Composition {
                outer: Box::new(outer.clone()),
                inner: Box::new(inner.clone()),
            },
            domain: inner.domain,
        })
    }
}

fn interpolate(table: &[(f64, f64)], r: f64) -> f64 {
    let idx = table.partition_point(|&(x, _)| x < r);
    if idx < table.len() && table[idx].0 == r {
        return table[idx].1;
    }
    // Clamp to the end segments; callers check the domain first.
    let i = idx.clamp(1, table.len() - 1);
    let (x0, y0) = table[i - 1];
    let (x1, y1) = table[i];
    y0 + (y1 - y0) * (r - x0) / (x1 - x0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum MembershipViolation {
    /// Grid unsorted, missing 0, or leaving the claimed domain.
    GridPrecondition(String),
    NonZeroAtOrigin(f64),
    NotIncreasing { r1: f64, r2: f64, v1: f64, v2: f64 },
    WrongSign { r: f64, value: f64 },
    /// Probe increments shrink, suggesting a bounded function claimed as K∞.
    BoundedOnProbe { r: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipReport {
    pub violations: Vec<MembershipViolation>,
    /// `None` when the claimed class is not K∞.
    pub unbounded_probe_ok: Option<bool>,
}

impl MembershipReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violating_pair(&self) -> Option<(f64, f64)> {
        self.violations.iter().find_map(|v| match *v {
            MembershipViolation::NotIncreasing { r1, r2, .. } => Some((r1, r2)),
            _ => None,
        })
    }
}

/// Sampled check of the class-K axioms on `grid`. Violations are report
/// content, never errors.
pub fn verify_class_membership(alpha: &ComparisonFunction, grid: &[f64]) -> MembershipReport {
    let mut violations = Vec::new();
    if grid.windows(2).any(|w| w[0] > w[1]) {
        violations.push(MembershipViolation::GridPrecondition("grid not sorted".into()));
    }
    if !grid.contains(&0.0) {
        violations.push(MembershipViolation::GridPrecondition("grid does not contain 0".into()));
    }

    let mut values = Vec::with_capacity(grid.len());
    for &r in grid {
        match alpha.evaluate(r) {
            Ok(v) => values.push((r, v)),
            Err(e) => violations.push(MembershipViolation::GridPrecondition(e.to_string())),
        }
    }

    for &(r, v) in &values {
        if r == 0.0 && v != 0.0 {
            violations.push(MembershipViolation::NonZeroAtOrigin(v));
        }
        let sign_ok = if r > 0.0 {
            v > 0.0
        } else if r < 0.0 {
            v < 0.0
        } else {
            true
        };
        if !sign_ok {
            violations.push(MembershipViolation::WrongSign { r, value: v });
        }
    }
    for w in values.windows(2) {
        let ((r1, v1), (r2, v2)) = (w[0], w[1]);
        if r1 < r2 && v1 >= v2 {
            violations.push(MembershipViolation::NotIncreasing { r1, r2, v1, v2 });
        }
    }

    let unbounded_probe_ok = alpha.domain().is_unbounded().then(|| {
        let ok = unbounded_probe(alpha);
        if let Err(r) = ok {
            violations.push(MembershipViolation::BoundedOnProbe { r });
        }
        ok.is_ok()
    });

    MembershipReport {
        violations,
        unbounded_probe_ok,
    }
}

/// Increments of α over the geometric probe grid must not shrink (on both
/// sides for extended functions). Returns the first offending probe point.
fn unbounded_probe(alpha: &ComparisonFunction) -> Result<(), f64> {
    let signs: &[f64] = if alpha.domain().is_extended() {
        &[1.0, -1.0]
    } else {
        &[1.0]
    };
    for &s in signs {
        let pts: Vec<f64> = UNBOUNDED_PROBE_EXPONENTS
            .map(|j| s * 10f64.powi(j))
            .collect();
        let vals: Vec<f64> = pts
            .iter()
            .map(|&r| alpha.evaluate(r).map(|v| s * v).unwrap_or(f64::NAN))
            .collect();
        for i in 1..vals.len() - 1 {
            let before = vals[i] - vals[i - 1];
            let after = vals[i + 1] - vals[i];
            if !(after >= before) || !vals[i + 1].is_finite() {
                return Err(pts[i + 1]);
            }
        }
    }
    Ok(())
}
