//! Kernel Gram matrices and their normalisations.
//!
//! Only the degree-1 polynomial (linear) kernel `k(x, y) = x . y` is provided.
//! Samples are the rows of a `[n, M]` feature matrix.

use crate::error::{Error, Result};
use crate::linalg;
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Tolerance on `tr == 1` for normalised matrices.
pub const TRACE_TOL: f64 = 1e-10;

/// Floating-point slack below zero tolerated on the smallest eigenvalue.
pub const PSD_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    /// `A_ij = K_ij / (n sqrt(K_ii K_jj))`.
    Def1,
    /// `A / tr(A)`.
    Trace1,
}

/// Symmetric `n x n` Gram matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    n: usize,
    entries: Vec<f64>,
    normalization: Normalization,
}

impl GramMatrix {
    /// Wraps a raw square matrix, checking shape, finiteness and symmetry
    /// (within `1e-12` relative to the largest entry).
    pub fn from_raw(entries: Vec<f64>, n: usize) -> Result<Self> {
        if entries.len() != n * n || n == 0 {
            return Err(Error::Shape(format!(
                "{} entries do not form a non-empty {n}x{n} matrix",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gram entry".into()));
        }
        let scale = entries.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in (i + 1)..n {
                if (entries[i * n + j] - entries[j * n + i]).abs() > 1e-12 * scale {
                    return Err(Error::Contract(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            entries,
            normalization: Normalization::Raw,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(Error::Shape(format!("Gram matrix must be square, got {r}x{c}")));
        }
        Self::from_raw(t.data().to_vec(), r)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.entries[i * self.n + i]).sum()
    }

    /// `||A||_F^2`.
    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.n, self.n], self.entries.clone())
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        linalg::symmetric_eigenvalues(&self.entries, self.n)
    }

    /// Errors with [`Error::NotPsd`] if the smallest eigenvalue is below
    /// `-PSD_SLACK`.
    pub fn check_psd(&self) -> Result<()> {
        let min = linalg::min_eigenvalue(&self.entries, self.n)?;
        if min < -PSD_SLACK {
            return Err(Error::NotPsd(min));
        }
        Ok(())
    }

    /// `P A P^T` where `perm[i]` is the source index of new sample `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut e = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                e[i * n + j] = self.entries[perm[i] * n + perm[j]];
            }
        }
        Self {
            n,
            entries: e,
            normalization: self.normalization,
        }
    }

    pub(crate) fn trace_is_one(&self) -> bool {
        (self.trace() - 1.0).abs() <= TRACE_TOL
    }
}

/// `K = X X^T` for features `X: [n, M]`.
pub fn linear_gram(features: &Tensor) -> Result<GramMatrix> {
    linear_gram_with(features, Exec::default())
}

/// [`linear_gram`] with an explicit execution strategy; rows of `K` are
/// computed independently.
pub fn linear_gram_with(features: &Tensor, exec: Exec) -> Result<GramMatrix> {
    let (n, m) = features.dims2()?;
    if n == 0 || m == 0 {
        return Err(Error::Shape(format!("features must be non-empty, got {n}x{m}")));
    }
    let x = features.data();
    let mut k = vec![0.0; n * n];
    par::fill_chunks(exec, &mut k, n, |i, row| {
        let xi = &x[i * m..(i + 1) * m];
        for (j, out) in row.iter_mut().enumerate() {
            let xj = &x[j * m..(j + 1) * m];
            *out = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
        }
    });
    Ok(GramMatrix {
        n,
        entries: k,
        normalization: Normalization::Raw,
    })
}

/// Cosine normalisation with the `1/n` factor, giving diagonal `1/n` and unit
/// trace.
pub fn normalize_def1(k: &GramMatrix) -> Result<GramMatrix> {
    let n = k.n;
    let diag: Vec<f64> = (0..n).map(|i| k.get(i, i)).collect();
    if let Some(i) = diag.iter().position(|&d| d <= 1e-12) {
        return Err(Error::Degenerate(format!(
            "diagonal entry {i} is {:e}; kernel is degenerate",
            diag[i]
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            e[i * n + j] = if i == j {
                inv_n
            } else {
                inv_n * k.get(i, j) / (diag[i] * diag[j]).sqrt()
            };
        }
    }
    Ok(GramMatrix {
        n,
        entries: e,
        normalization: Normalization::Def1,
    })
}

/// `A / tr(A)`.
pub fn trace_normalize(m: &GramMatrix) -> Result<GramMatrix> {
    let tr = m.trace();
    if tr.is_nan() || tr <= 1e-300 {
        return Err(Error::Degenerate(format!("trace {tr:e} is not positive")));
    }
    Ok(GramMatrix {
        n: m.n,
        entries: m.entries.iter().map(|v| v / tr).collect(),
        normalization: Normalization::Trace1,
    })
}

/// Trace-normalised elementwise product `A_1 o A_2 o ... o A_k`.
pub fn hadamard_joint(mats: &[&GramMatrix]) -> Result<GramMatrix> {
    let Some((first, rest)) = mats.split_first() else {
        return Err(Error::Contract("hadamard_joint needs at least one matrix".into()));
    };
    let mut e = first.entries.clone();
    for m in rest {
        if m.n != first.n {
            return Err(Error::Shape(format!(
                "cannot combine {}x{} with {}x{}",
                first.n, first.n, m.n, m.n
            )));
        }
        e.iter_mut().zip(&m.entries).for_each(|(a, b)| *a *= b);
    }
    trace_normalize(&GramMatrix {
        n: first.n,
        entries: e,
        normalization: Normalization::Raw,
    })
}

/// The canonical feature pipeline: flatten, l2-normalise rows, linear Gram,
/// trace-normalise.
pub fn feature_gram(features: &Tensor) -> Result<GramMatrix> {
    let flat = crate::tensor::flatten_batch(features)?;
    let unit = crate::tensor::l2_normalize_rows(&flat)?;
    trace_normalize(&linear_gram(&unit)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn g(rows: &[&[f64]]) -> GramMatrix {
        let n = rows.len();
        GramMatrix::from_raw(rows.concat(), n).unwrap()
    }

    fn feats(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &GramMatrix, b: &[f64], tol: f64) -> bool {
        a.entries().iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn linear_gram_examples() {
        let k = linear_gram(&feats(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(k.entries(), &[1.0, 0.0, 0.0, 1.0]);
        let k = linear_gram(&feats(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert_eq!(k.entries(), &[2.0; 4]);
        let k = linear_gram(&feats(&[&[3.0]])).unwrap();
        assert_eq!(k.entries(), &[9.0]);
        assert!(linear_gram(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn def1_examples() {
        let a = normalize_def1(&g(&[&[2.0, 2.0], &[2.0, 2.0]])).unwrap();
        assert!(close(&a, &[0.5; 4], 1e-15));
        let a = normalize_def1(&g(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!(close(&a, &[0.5, 0.0, 0.0, 0.5], 1e-15));
        assert!((a.trace() - 1.0).abs() < 1e-12);
        assert_eq!(a.normalization(), Normalization::Def1);
        assert!(matches!(
            normalize_def1(&g(&[&[0.0, 0.0], &[0.0, 1.0]])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn trace_normalize_examples() {
        let a = trace_normalize(&g(&[&[2.0, 0.0], &[0.0, 2.0]])).unwrap();
        assert!(close(&a, &[0.5, 0.0, 0.0, 0.5], 0.0));
        let again = trace_normalize(&a).unwrap();
        assert!(close(&again, a.entries(), 1e-15));
        assert!(matches!(
            trace_normalize(&g(&[&[0.0, 0.0], &[0.0, 0.0]])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn hadamard_examples() {
        let a = g(&[&[3.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(hadamard_joint(&[&a]).unwrap(), trace_normalize(&a).unwrap());

        let half = g(&[&[0.5, 0.0], &[0.0, 0.5]]);
        let j = hadamard_joint(&[&half, &half]).unwrap();
        assert!(close(&j, &[0.5, 0.0, 0.0, 0.5], 1e-15));

        let p = g(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let q = g(&[&[0.5, -0.5], &[-0.5, 0.5]]);
        let j = hadamard_joint(&[&p, &q]).unwrap();
        assert!(close(&j, &[0.5, -0.5, -0.5, 0.5], 1e-15));
        let e = j.eigenvalues().unwrap();
        assert!(e[0].abs() < 1e-15 && (e[1] - 1.0).abs() < 1e-15);

        let three = GramMatrix::from_raw(vec![1.0; 9], 3).unwrap();
        assert!(matches!(hadamard_joint(&[&p, &three]), Err(Error::Shape(_))));
        assert!(matches!(hadamard_joint(&[]), Err(Error::Contract(_))));
        let zero = g(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(hadamard_joint(&[&p, &zero]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rejects_asymmetric_input() {
        assert!(matches!(
            GramMatrix::from_raw(vec![1.0, 0.5, 0.0, 1.0], 2),
            Err(Error::Contract(_))
        ));
    }

    fn random_features(s: &mut Stream, n: usize, m: usize) -> Tensor {
        Tensor::new(vec![n, m], s.normals(n * m)).unwrap()
    }

    #[test]
    fn schur_product_stays_psd() {
        let mut s = Stream::new(11, 0);
        for _ in 0..50 {
            let n = 2 + s.below(10);
            let (ma, mb) = (1 + s.below(5), 1 + s.below(5));
            let a = linear_gram(&random_features(&mut s, n, ma)).unwrap();
            let b = linear_gram(&random_features(&mut s, n, mb)).unwrap();
            let j = hadamard_joint(&[&a, &b]).unwrap();
            j.check_psd().unwrap();
            assert!((j.trace() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn def1_is_row_scale_invariant() {
        let mut s = Stream::new(12, 0);
        let x = random_features(&mut s, 6, 4);
        let scales: Vec<f64> = (0..6).map(|_| s.uniform_in(0.1, 10.0)).collect();
        let mut y = x.clone();
        for (row, c) in y.data_mut().chunks_mut(4).zip(&scales) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let a = normalize_def1(&linear_gram(&x).unwrap()).unwrap();
        let b = normalize_def1(&linear_gram(&y).unwrap()).unwrap();
        assert!(close(&a, b.entries(), 1e-12));
    }

    #[test]
    fn def1_of_unit_rows_is_scaled_gram() {
        let mut s = Stream::new(13, 0);
        let x = crate::tensor::l2_normalize_rows(&random_features(&mut s, 7, 5)).unwrap();
        let k = linear_gram(&x).unwrap();
        let a = normalize_def1(&k).unwrap();
        let expect: Vec<f64> = k.entries().iter().map(|v| v / 7.0).collect();
        assert!(close(&a, &expect, 1e-12));
        let f = feature_gram(&x).unwrap();
        assert!(close(&f, &expect, 1e-12));
    }

    #[test]
    fn permutation_equivariance() {
        let mut s = Stream::new(14, 0);
        let x = random_features(&mut s, 5, 3);
        let perm = s.permutation(5);
        let rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&i| x.data()[i * 3..(i + 1) * 3].to_vec())
            .collect();
        let px = Tensor::from_rows(&rows).unwrap();
        let k = linear_gram(&x).unwrap();
        assert_eq!(linear_gram(&px).unwrap(), k.permuted(&perm));
    }

    #[test]
    fn sequential_and_parallel_grams_match() {
        let mut s = Stream::new(15, 0);
        let x = random_features(&mut s, 40, 9);
        assert_eq!(
            linear_gram_with(&x, Exec::Sequential).unwrap(),
            linear_gram_with(&x, Exec::Parallel).unwrap()
        );
    }
}
