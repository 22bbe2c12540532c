//! Attention relation module between image embeddings and mask tokens.
//!
//! For each batch element `b`:
//!
//! ```text
//! Q = LN_m(z_m[b]) W_Q^T + b_Q            [N, D]
//! K = LN_i(z_i[b]) W_K^T + b_K            [P, D]
//! S = Q K^T / sqrt(D) + z_m[b] z_i[b]^T   [N, P]
//! r[b] = flatten(S) / ||flatten(S)||_2
//! ```
//!
//! The residual term uses the raw inputs, and the l2 normalisation spans the
//! whole `N x P` map of a sample. Teacher and student both run through the
//! same [`RelationVars`], i.e. the same parameter nodes on the tape.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{self, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Stream id used for parameter initialisation.
const INIT_STREAM: u64 = 0x52454c;

pub const FIELD_NAMES: [&str; 8] = [
    "w_q",
    "b_q",
    "w_k",
    "b_k",
    "ln_m_gain",
    "ln_m_bias",
    "ln_i_gain",
    "ln_i_bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RelationParams {
    pub dim: usize,
    pub seed: u64,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub ln_m_gain: Tensor,
    pub ln_m_bias: Tensor,
    pub ln_i_gain: Tensor,
    pub ln_i_bias: Tensor,
}

impl RelationParams {
    /// Projections uniform on `±sqrt(6 / 2D)`, biases zero, gains one.
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("relation dimension must be >= 1".into()));
        }
        let bound = Self::init_bound(dim);
        let mut s = Stream::new(seed, INIT_STREAM);
        let mut weight = || {
            let data = (0..dim * dim).map(|_| s.uniform_in(-bound, bound)).collect();
            Tensor::from_parts(vec![dim, dim], data)
        };
        let w_q = weight();
        let w_k = weight();
        Ok(Self {
            dim,
            seed,
            w_q,
            b_q: Tensor::zeros(&[dim]),
            w_k,
            b_k: Tensor::zeros(&[dim]),
            ln_m_gain: Tensor::filled(&[dim], 1.0),
            ln_m_bias: Tensor::zeros(&[dim]),
            ln_i_gain: Tensor::filled(&[dim], 1.0),
            ln_i_bias: Tensor::zeros(&[dim]),
        })
    }

    pub fn init_bound(dim: usize) -> f64 {
        (6.0 / (2.0 * dim as f64)).sqrt()
    }

    /// Fields in [`FIELD_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.ln_m_gain,
            &self.ln_m_bias,
            &self.ln_i_gain,
            &self.ln_i_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.ln_m_gain,
            &mut self.ln_m_bias,
            &mut self.ln_i_gain,
            &mut self.ln_i_bias,
        ]
    }

    fn expected_shape(&self, field: usize) -> Vec<usize> {
        match field {
            0 | 2 => vec![self.dim, self.dim],
            _ => vec![self.dim],
        }
    }

    /// Puts every field on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> RelationVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let [w_q, b_q, w_k, b_k, ln_m_gain, ln_m_bias, ln_i_gain, ln_i_bias] =
            self.tensors().map(&mut put);
        RelationVars {
            dim: self.dim,
            w_q,
            b_q,
            w_k,
            b_k,
            ln_m_gain,
            ln_m_bias,
            ln_i_gain,
            ln_i_bias,
        }
    }

    /// Writes one `<field>.npy` per field plus `manifest.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        for (name, t) in FIELD_NAMES.iter().zip(self.tensors()) {
            let file = format!("{name}.npy");
            tensor::save_tensor(t, dir.join(&file))?;
            files.insert(name.to_string(), file);
        }
        let manifest = ParamsManifest {
            dim: self.dim,
            seed: self.seed,
            fields: files,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ParamsManifest = serde_json::from_slice(&bytes)?;
        let mut params = Self::init(manifest.dim, manifest.seed)?;
        for (i, name) in FIELD_NAMES.iter().enumerate() {
            let file = manifest
                .fields
                .get(*name)
                .ok_or_else(|| Error::Format(format!("manifest lacks field {name}")))?;
            let t = tensor::load_tensor(dir.join(file))?;
            if t.shape() != params.expected_shape(i) {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    params.expected_shape(i)
                )));
            }
            *params.tensors_mut()[i] = t;
        }
        Ok(params)
    }
}

/// Manifest stored next to the per-field NPY files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamsManifest {
    pub dim: usize,
    pub seed: u64,
    pub fields: BTreeMap<String, String>,
}

/// Relation parameters bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationVars {
    pub dim: usize,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub ln_m_gain: Var,
    pub ln_m_bias: Var,
    pub ln_i_gain: Var,
    pub ln_i_bias: Var,
}

impl RelationVars {
    pub fn vars(&self) -> [Var; 8] {
        [
            self.w_q,
            self.b_q,
            self.w_k,
            self.b_k,
            self.ln_m_gain,
            self.ln_m_bias,
            self.ln_i_gain,
            self.ln_i_bias,
        ]
    }
}

/// Checks `z_i: [B, P, D]`, `z_m: [B, N, D]` against `dim`; returns `(B, N, P)`.
pub fn check_inputs(z_i: &Tensor, z_m: &Tensor, dim: usize) -> Result<(usize, usize, usize)> {
    let (&[bi, p, di], &[bm, n, dm]) = (z_i.shape(), z_m.shape()) else {
        return Err(Error::Shape(format!(
            "expected z_i [B, P, D] and z_m [B, N, D], got {:?} and {:?}",
            z_i.shape(),
            z_m.shape()
        )));
    };
    if bi != bm || di != dim || dm != dim || bi == 0 || n == 0 || p == 0 {
        return Err(Error::Shape(format!(
            "z_i {:?} and z_m {:?} are incompatible with D = {dim}",
            z_i.shape(),
            z_m.shape()
        )));
    }
    Ok((bi, n, p))
}

/// Records the relation forward pass; returns `r: [B, N * P]`.
pub fn relation_graph(tape: &mut Tape, params: &RelationVars, z_i: Var, z_m: Var) -> Result<Var> {
    let (b, n, p) = check_inputs(tape.value(z_i), tape.value(z_m), params.dim)?;
    let inv_sqrt_d = 1.0 / (params.dim as f64).sqrt();
    let w_qt = tape.transpose(params.w_q)?;
    let w_kt = tape.transpose(params.w_k)?;

    let mut rows = Vec::with_capacity(b);
    for s in 0..b {
        let zm = tape.select(z_m, s)?;
        let zi = tape.select(z_i, s)?;

        let lm = tape.layernorm(zm, params.ln_m_gain, params.ln_m_bias, LAYERNORM_EPS)?;
        let q = tape.matmul(lm, w_qt)?;
        let q = tape.add_row(q, params.b_q)?;

        let li = tape.layernorm(zi, params.ln_i_gain, params.ln_i_bias, LAYERNORM_EPS)?;
        let k = tape.matmul(li, w_kt)?;
        let k = tape.add_row(k, params.b_k)?;

        let kt = tape.transpose(k)?;
        let qk = tape.matmul(q, kt)?;
        let qk = tape.scale(qk, inv_sqrt_d)?;

        let zit = tape.transpose(zi)?;
        let residual = tape.matmul(zm, zit)?;
        let score = tape.add(qk, residual)?;
        rows.push(tape.reshape(score, &[n * p])?);
    }
    let flat = tape.stack(&rows)?;
    tape.l2norm_rows(flat).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("attention score is zero: {msg}")),
        other => other,
    })
}

/// Flattened, l2-normalised attention scores `[B, N * P]`; each row has unit
/// norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationOutput {
    r: Tensor,
}

impl RelationOutput {
    /// Wraps a `[B, M]` matrix, checking unit row norms within `1e-9`.
    pub fn new(r: Tensor) -> Result<Self> {
        let (_, m) = r.dims2()?;
        for (i, row) in r.data().chunks(m.max(1)).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("relation row {i} has norm {n}")));
            }
        }
        Ok(Self { r })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.r
    }

    pub fn into_tensor(self) -> Tensor {
        self.r
    }

    pub fn batch(&self) -> usize {
        self.r.shape()[0]
    }
}

/// Value-only forward pass.
pub fn relation_forward(params: &RelationParams, z_i: &Tensor, z_m: &Tensor) -> Result<RelationOutput> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let zi = tape.constant(z_i.clone());
    let zm = tape.constant(z_m.clone());
    let r = relation_graph(&mut tape, &vars, zi, zm)?;
    Ok(RelationOutput {
        r: tape.value(r).clone(),
    })
}
