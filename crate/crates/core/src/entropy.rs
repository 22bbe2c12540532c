//! Matrix-based Rényi α-entropy and mutual information over normalised Gram
//! matrices, in bits.
//!
//! For a unit-trace PSD matrix `A` with eigenvalues `λ_i`:
//!
//! ```text
//! S_α(A) = 1/(1-α) · log2 Σ λ_i^α
//! ```
//!
//! At α = 2 the sum is `||A||_F^2`, so [`entropy_frob`] skips the
//! eigendecomposition entirely. [`entropy`] picks the Frobenius path whenever
//! α is exactly 2.

use crate::error::{Error, Result};
use crate::gram::{self, GramMatrix, PSD_SLACK};

/// A validated Rényi order: `α > 0` and `|α - 1| > 1e-9`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyOrder(f64);

impl EntropyOrder {
    pub const TWO: EntropyOrder = EntropyOrder(2.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Contract(format!("alpha must be positive, got {alpha}")));
        }
        if (alpha - 1.0).abs() <= 1e-9 {
            return Err(Error::Contract(
                "alpha = 1 (Shannon limit) is not supported; use e.g. 1.01".into(),
            ));
        }
        Ok(Self(alpha))
    }

    pub fn alpha(self) -> f64 {
        self.0
    }

    pub fn is_two(self) -> bool {
        self.0 == 2.0
    }
}

/// An entropy or information value in bits.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct EntropyValue(pub f64);

impl EntropyValue {
    pub fn bits(self) -> f64 {
        self.0
    }
}

fn require_unit_trace(a: &GramMatrix) -> Result<()> {
    if !a.trace_is_one() {
        return Err(Error::Contract(format!(
            "entropy needs a trace-normalised matrix, trace is {}",
            a.trace()
        )));
    }
    Ok(())
}

/// Eigenvalue path, valid for every supported order.
///
/// Eigenvalues in `[-1e-9, 0)` are treated as zero; anything lower is an
/// error. Zero eigenvalues contribute nothing (`0^α := 0`).
pub fn entropy_eig(a: &GramMatrix, order: EntropyOrder) -> Result<EntropyValue> {
    require_unit_trace(a)?;
    let eig = a.eigenvalues()?;
    let alpha = order.alpha();
    let mut sum = 0.0;
    for &l in &eig {
        if l < -PSD_SLACK {
            return Err(Error::NotPsd(l));
        }
        if l > 0.0 {
            sum += l.powf(alpha);
        }
    }
    if sum <= 0.0 {
        return Err(Error::Degenerate("matrix has no positive eigenvalue".into()));
    }
    Ok(EntropyValue(sum.log2() / (1.0 - alpha)))
}

/// Frobenius path: `S_2(A) = -log2 ||A||_F^2`.
pub fn entropy_frob(a: &GramMatrix) -> Result<EntropyValue> {
    require_unit_trace(a)?;
    let f = a.frobenius_sq();
    if f <= 0.0 {
        return Err(Error::Degenerate("zero Frobenius norm".into()));
    }
    Ok(EntropyValue(-f.log2()))
}

/// Entropy via the cheapest exact path for `order`.
pub fn entropy(a: &GramMatrix, order: EntropyOrder) -> Result<EntropyValue> {
    if order.is_two() {
        entropy_frob(a)
    } else {
        entropy_eig(a, order)
    }
}

/// Joint entropy of the trace-normalised Hadamard product of `mats`.
pub fn joint_entropy(mats: &[&GramMatrix], order: EntropyOrder) -> Result<EntropyValue> {
    entropy(&gram::hadamard_joint(mats)?, order)
}

/// `I(A; B) = S(A) + S(B) - S(A, B)`.
pub fn mutual_information(
    a: &GramMatrix,
    b: &GramMatrix,
    order: EntropyOrder,
) -> Result<EntropyValue> {
    if a.n() != b.n() {
        return Err(Error::Shape(format!(
            "sample counts differ: {} vs {}",
            a.n(),
            b.n()
        )));
    }
    require_unit_trace(a)?;
    require_unit_trace(b)?;
    let sa = entropy(a, order)?.bits();
    let sb = entropy(b, order)?.bits();
    let sab = joint_entropy(&[a, b], order)?.bits();
    Ok(EntropyValue(sa + sb - sab))
}

/// `I(A_1, ..., A_k; B) = S(A_1..A_k) + S(B) - S(A_1..A_k, B)`.
pub fn multivariate_mi(
    groups: &[&GramMatrix],
    b: &GramMatrix,
    order: EntropyOrder,
) -> Result<EntropyValue> {
    if groups.is_empty() {
        return Err(Error::Contract("multivariate_mi needs at least one group".into()));
    }
    for g in groups.iter().chain(std::iter::once(&b)) {
        if g.n() != b.n() {
            return Err(Error::Shape("all matrices must share n".into()));
        }
        require_unit_trace(g)?;
    }
    let s_groups = joint_entropy(groups, order)?.bits();
    let s_b = entropy(b, order)?.bits();
    let mut all = groups.to_vec();
    all.push(b);
    let s_all = joint_entropy(&all, order)?.bits();
    Ok(EntropyValue(s_groups + s_b - s_all))
}
