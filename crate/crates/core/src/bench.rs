//! Timing of the two order-2 entropy paths: Frobenius norm against the
//! eigendecomposition route.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::entropy::{self, EntropyOrder};
use crate::error::{Error, Result};
use crate::gram::{self, GramMatrix};
use crate::par::Exec;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Seeded trace-one PSD matrix `X X^T / tr` with `X` an `n x n` standard
/// normal draw from stream `(seed, stream)`.
pub fn random_trace_one_psd(n: usize, seed: u64, stream: u64) -> Result<GramMatrix> {
    if n < 1 {
        return Err(Error::Contract("matrix size must be >= 1".into()));
    }
    let mut s = Stream::new(seed, stream);
    let x = Tensor::new(vec![n, n], s.normals(n * n))?;
    gram::trace_normalize(&gram::linear_gram_with(&x, Exec::default())?)
}

/// Mean and sample standard deviation; the deviation is 0 for one sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathTiming {
    pub path: &'static str,
    pub alpha: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Entropy of the last timed matrix, in bits.
    pub bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub trials: usize,
    pub frob: PathTiming,
    pub eig: PathTiming,
    /// `eig.mean_ms / frob.mean_ms`.
    pub speedup: f64,
    /// Largest `|frob - eig|` over all trials; only meaningful at `alpha = 2`.
    pub max_value_gap: f64,
}

pub const CSV_HEADER: &str = "path,n,alpha,trials,mean_ms,std_ms,bits,speedup";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (p, ratio) in [(&self.frob, 1.0), (&self.eig, self.speedup)] {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.path, self.n, p.alpha, self.trials, p.mean_ms, p.std_ms, p.bits, ratio
            );
        }
        out
    }
}

fn time_ms<T>(f: impl FnOnce() -> Result<T>) -> Result<(f64, T)> {
    let start = Instant::now();
    let v = f()?;
    Ok((start.elapsed().as_secs_f64() * 1e3, v))
}

/// Times `entropy_frob` (order 2) and `entropy_eig` at `alpha` on the same
/// matrix for each trial. Trial `k` uses stream `k` of `seed`.
pub fn run_alpha_bench(n: usize, trials: usize, alpha: f64, seed: u64) -> Result<BenchReport> {
    if n < 2 {
        return Err(Error::Contract(format!("n must be >= 2, got {n}")));
    }
    if trials < 1 {
        return Err(Error::Contract("trials must be >= 1".into()));
    }
    let order = EntropyOrder::new(alpha)?;
    let (mut frob_ms, mut eig_ms) = (Vec::new(), Vec::new());
    let (mut frob_bits, mut eig_bits, mut gap) = (0.0, 0.0, 0.0f64);
    for k in 0..trials {
        let g = random_trace_one_psd(n, seed, k as u64)?;
        let (tf, f) = time_ms(|| entropy::entropy_frob(&g))?;
        let (te, e) = time_ms(|| entropy::entropy_eig(&g, order))?;
        frob_ms.push(tf);
        eig_ms.push(te);
        frob_bits = f.bits();
        eig_bits = e.bits();
        gap = gap.max((frob_bits - eig_bits).abs());
    }
    let (fm, fs) = mean_std(&frob_ms);
    let (em, es) = mean_std(&eig_ms);
    Ok(BenchReport {
        n,
        trials,
        frob: PathTiming {
            path: "frob",
            alpha: 2.0,
            mean_ms: fm,
            std_ms: fs,
            bits: frob_bits,
        },
        eig: PathTiming {
            path: "eig",
            alpha,
            mean_ms: em,
            std_ms: es,
            bits: eig_bits,
        },
        speedup: em / fm.max(f64::MIN_POSITIVE),
        max_value_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_one_psd_matrices() {
        let g = random_trace_one_psd(6, 1, 2).unwrap();
        assert!((g.trace() - 1.0).abs() < 1e-12);
        g.check_psd().unwrap();
        assert_eq!(g, random_trace_one_psd(6, 1, 2).unwrap());
        assert_ne!(g, random_trace_one_psd(6, 1, 3).unwrap());
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tiny_bench_agrees_in_value() {
        let r = run_alpha_bench(2, 3, 2.0, 0).unwrap();
        assert!(r.max_value_gap < 1e-10);
        let one = run_alpha_bench(8, 1, 2.0, 0).unwrap();
        assert_eq!((one.frob.std_ms, one.eig.std_ms), (0.0, 0.0));
        let csv = one.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().all(|l| l.split(',').count() == 8));
    }

    #[test]
    fn bench_contract() {
        assert!(matches!(run_alpha_bench(1, 3, 2.0, 0), Err(Error::Contract(_))));
        assert!(matches!(run_alpha_bench(4, 0, 2.0, 0), Err(Error::Contract(_))));
        assert!(run_alpha_bench(4, 1, 1.0, 0).is_err());
        let r = run_alpha_bench(4, 1, 3.0, 0).unwrap();
        assert_eq!((r.frob.alpha, r.eig.alpha), (2.0, 3.0));
    }
}
