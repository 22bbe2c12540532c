//! Synthetic teacher/student harness.
//!
//! A frozen "teacher" produces Gaussian image embeddings `z_i: [B, P, D]` and
//! mask tokens `z_m: [B, N, D]`. The student sees the same features plus
//! noise, passed through a residual bottleneck adapter. Both sides run through
//! one shared [`RelationParams`]; a single Adam optimiser updates the adapter
//! and the relation parameters on `L_total = task_weight * L_task + L_info`.
//!
//! Each step follows the order: synthesise batch, adapt student features,
//! task loss, teacher and student relations, `L_r`, `L_d`, combine, backward,
//! Adam update.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::entropy::{self, EntropyOrder};
use crate::error::{Error, Result};
use crate::gram;
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::relation::{self, RelationParams, RelationVars};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Gain applied to the task head's centred probe response.
const HEAD_GAIN: f64 = 4.0;

const PROBE_STREAM: u64 = 0x50524f4245;
const ADAPTER_STREAM: u64 = 0x4144415054;
/// Step `k` (0-based) draws its batch from stream `BATCH_STREAM_BASE + k`.
const BATCH_STREAM_BASE: u64 = 1 << 32;

fn default_seed() -> u64 {
    42
}
fn default_steps() -> usize {
    300
}
fn default_batch() -> usize {
    4
}
fn default_masks() -> usize {
    2
}
fn default_positions() -> usize {
    16
}
fn default_dim() -> usize {
    8
}
fn default_lr_init() -> f64 {
    2e-4
}
fn default_lr_final() -> f64 {
    2e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_task_weight() -> f64 {
    1.0
}
fn default_student_noise() -> f64 {
    0.1
}

/// Harness hyperparameters. Every field may be omitted from the JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_masks")]
    pub masks: usize,
    #[serde(default = "default_positions")]
    pub positions: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_task_weight")]
    pub task_weight: f64,
    /// Standard deviation of the student's feature perturbation.
    #[serde(default = "default_student_noise")]
    pub student_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            steps: default_steps(),
            batch: default_batch(),
            masks: default_masks(),
            positions: default_positions(),
            dim: default_dim(),
            lr_init: default_lr_init(),
            lr_final: default_lr_final(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weights: LossWeights::default(),
            task_weight: default_task_weight(),
            student_noise: default_student_noise(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.steps < 1 {
            return fail("steps must be >= 1".into());
        }
        if self.batch < 2 {
            return fail(format!("batch must be >= 2, got {}", self.batch));
        }
        if self.masks < 1 || self.positions < 1 || self.dim < 1 {
            return fail("masks, positions and dim must be >= 1".into());
        }
        if !(self.lr_init.is_finite() && self.lr_final.is_finite())
            || self.lr_final < 0.0
            || self.lr_final > self.lr_init
        {
            return fail(format!(
                "need 0 <= lr_final <= lr_init, got {} and {}",
                self.lr_final, self.lr_init
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return fail("eps must be positive".into());
        }
        if !(self.task_weight.is_finite() && self.task_weight >= 0.0) {
            return fail("task_weight must be finite and >= 0".into());
        }
        if !(self.student_noise.is_finite() && self.student_noise >= 0.0) {
            return fail("student_noise must be finite and >= 0".into());
        }
        self.weights.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Bottleneck width `ceil(D / 4)`, at least 1.
    pub fn bottleneck(&self) -> usize {
        self.dim.div_ceil(4).max(1)
    }
}

/// One synthetic batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub teacher_zi: Tensor,
    pub teacher_zm: Tensor,
    pub student_zi: Tensor,
    pub student_zm: Tensor,
    /// `[B, N]` binary labels.
    pub target: Tensor,
    /// Median teacher probe response; the task head is centred on it.
    pub threshold: f64,
}

/// Fixed unit-norm linear probe used for labels and the task head.
pub fn probe(config: &TrainConfig) -> Tensor {
    let mut s = Stream::new(config.seed, PROBE_STREAM);
    let mut w = s.normals(config.dim);
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= n);
    Tensor::from_parts(vec![config.dim, 1], w)
}

fn probe_responses(z_m: &Tensor, w: &Tensor) -> Vec<f64> {
    let d = w.len();
    z_m.data()
        .chunks(d)
        .map(|tok| tok.iter().zip(w.data()).map(|(a, b)| a * b).sum())
        .collect()
}

/// Deterministic batch from stream `(config.seed, step_seed)`.
///
/// Draw order: teacher `z_i`, teacher `z_m`, then the student noise for `z_i`
/// and `z_m`, all standard normals in row-major order. Labels are 1 where the
/// teacher probe response exceeds the batch median, so exactly
/// `floor(B N / 2)` entries are 1 when responses are distinct.
pub fn synth_batch(config: &TrainConfig, step_seed: u64) -> Batch {
    let (b, n, p, d) = (config.batch, config.masks, config.positions, config.dim);
    let mut s = Stream::new(config.seed, step_seed);
    let zi = s.normals(b * p * d);
    let zm = s.normals(b * n * d);
    let sigma = config.student_noise;
    let si: Vec<f64> = zi.iter().map(|v| v + sigma * s.normal()).collect();
    let sm: Vec<f64> = zm.iter().map(|v| v + sigma * s.normal()).collect();

    let teacher_zm = Tensor::from_parts(vec![b, n, d], zm);
    let responses = probe_responses(&teacher_zm, &probe(config));
    let mut sorted = responses.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let threshold = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let target = responses
        .iter()
        .map(|&r| if r > threshold { 1.0 } else { 0.0 })
        .collect();

    Batch {
        teacher_zi: Tensor::from_parts(vec![b, p, d], zi),
        teacher_zm,
        student_zi: Tensor::from_parts(vec![b, p, d], si),
        student_zm: Tensor::from_parts(vec![b, n, d], sm),
        target: Tensor::from_parts(vec![b, n], target),
        threshold,
    }
}

/// `lr_final + (lr_init - lr_final) (1 + cos(pi step / (total - 1))) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_final: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Contract(format!(
            "step {step} outside 0..{total_steps}"
        )));
    }
    if total_steps == 1 {
        return Ok(lr_init);
    }
    if step == total_steps - 1 {
        return Ok(lr_final);
    }
    let phase = std::f64::consts::PI * step as f64 / (total_steps - 1) as f64;
    Ok(lr_final + 0.5 * (lr_init - lr_final) * (1.0 + phase.cos()))
}

/// Residual bottleneck `x + GELU(x A_down) A_up` applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentAdapter {
    pub down: Tensor,
    pub up: Tensor,
}

impl StudentAdapter {
    /// `A_down` uniform on `±sqrt(6 / (D + d))`, `A_up` zero.
    pub fn init(dim: usize, bottleneck: usize, seed: u64) -> Self {
        let bound = (6.0 / (dim + bottleneck) as f64).sqrt();
        let mut s = Stream::new(seed, ADAPTER_STREAM);
        let down = (0..dim * bottleneck).map(|_| s.uniform_in(-bound, bound)).collect();
        Self {
            down: Tensor::from_parts(vec![dim, bottleneck], down),
            up: Tensor::zeros(&[bottleneck, dim]),
        }
    }
}

/// Adapter parameters bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterVars {
    pub down: Var,
    pub up: Var,
}

/// Applies the adapter to `x: [.., D]` (any leading shape).
pub fn adapter_graph(tape: &mut Tape, adapter: &AdapterVars, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let d = *shape.last().ok_or_else(|| Error::Shape("adapter input is a scalar".into()))?;
    let rows = tape.value(x).len() / d.max(1);
    let flat = tape.reshape(x, &[rows, d])?;
    let h = tape.matmul(flat, adapter.down)?;
    let h = tape.gelu(h)?;
    let delta = tape.matmul(h, adapter.up)?;
    let out = tape.add(flat, delta)?;
    tape.reshape(out, &shape)
}

/// Task head logits `[B, N]`: `HEAD_GAIN * (z_m . probe - threshold)`.
pub fn task_logits(tape: &mut Tape, z_m: Var, probe: Var, threshold: f64) -> Result<Var> {
    let shape = tape.value(z_m).shape().to_vec();
    let [b, n, d] = shape[..] else {
        return Err(Error::Shape(format!("z_m must be [B, N, D], got {shape:?}")));
    };
    let flat = tape.reshape(z_m, &[b * n, d])?;
    let resp = tape.matmul(flat, probe)?;
    let resp = tape.reshape(resp, &[b, n])?;
    let centred = tape.add_scalar(resp, -threshold)?;
    tape.scale(centred, HEAD_GAIN)
}

/// Moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Contract(format!(
                "param {i}: shape {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.t += 1;
    let AdamHyper { beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *pj -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Everything the optimiser updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainables {
    pub relation: RelationParams,
    pub adapter: StudentAdapter,
}

impl Trainables {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            relation: RelationParams::init(config.dim, config.seed)?,
            adapter: StudentAdapter::init(config.dim, config.bottleneck(), config.seed),
        })
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.relation.tensors().to_vec();
        v.push(&self.adapter.down);
        v.push(&self.adapter.up);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.relation.tensors_mut().into_iter().collect();
        v.push(&mut self.adapter.down);
        v.push(&mut self.adapter.up);
        v
    }
}

/// A recorded forward pass of one training step.
pub struct StepGraph {
    pub tape: Tape,
    pub relation: RelationVars,
    pub adapter: AdapterVars,
    pub teacher_zi: Var,
    pub teacher_zm: Var,
    pub student_zi: Var,
    pub student_zm: Var,
    pub r_teacher: Var,
    pub r_student: Var,
    pub l_task: Var,
    pub terms: losses::InfoTerms,
    pub l_total: Var,
}

/// Records the full per-step objective. Teacher features are constants; the
/// relation and adapter parameters are trainable leaves, and the single
/// [`RelationVars`] is used for both the teacher and the student relation.
pub fn step_graph(config: &TrainConfig, params: &Trainables, batch: &Batch) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let relation = params.relation.bind(&mut tape, true);
    let adapter = AdapterVars {
        down: tape.leaf(params.adapter.down.clone()),
        up: tape.leaf(params.adapter.up.clone()),
    };
    let teacher_zi = tape.constant(batch.teacher_zi.clone());
    let teacher_zm = tape.constant(batch.teacher_zm.clone());
    let base_zi = tape.constant(batch.student_zi.clone());
    let base_zm = tape.constant(batch.student_zm.clone());
    let w = tape.constant(probe(config));

    let student_zi = adapter_graph(&mut tape, &adapter, base_zi)?;
    let student_zm = adapter_graph(&mut tape, &adapter, base_zm)?;

    let logits = task_logits(&mut tape, student_zm, w, batch.threshold)?;
    let task = losses::toy_structure_loss(&mut tape, logits, &batch.target)?;
    let l_task = tape.scale(task, config.task_weight)?;

    let r_teacher = relation::relation_graph(&mut tape, &relation, teacher_zi, teacher_zm)?;
    let r_student = relation::relation_graph(&mut tape, &relation, student_zi, student_zm)?;
    let terms = losses::info_terms(
        &mut tape,
        teacher_zi,
        teacher_zm,
        r_teacher,
        r_student,
        &config.weights,
    )?;
    let l_total = tape.add(l_task, terms.l_info)?;
    Ok(StepGraph {
        tape,
        relation,
        adapter,
        teacher_zi,
        teacher_zm,
        student_zi,
        student_zm,
        r_teacher,
        r_student,
        l_task,
        terms,
        l_total,
    })
}

/// Metrics logged for one step (1-based), evaluated before that step's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_r: f64,
    pub l_d: f64,
    pub l_task: f64,
    pub l_info: f64,
    pub l_total: f64,
    /// `I_2(G_r^T; G_r^S)` in bits.
    pub mi_ts: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub final_params: Trainables,
}

pub const CSV_HEADER: &str = "step,lr,l_r,l_d,l_task,l_total,mi_ts";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.lr, r.l_r, r.l_d, r.l_task, r.l_total, r.mi_ts
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Trailing mean of `l_total` over the `window` steps ending at `step`
    /// (1-based, inclusive).
    pub fn moving_average_total(&self, step: usize, window: usize) -> f64 {
        let end = step.min(self.records.len());
        let start = end.saturating_sub(window);
        let xs = &self.records[start..end];
        xs.iter().map(|r| r.l_total).sum::<f64>() / xs.len() as f64
    }
}

fn mi_between(r_t: &Tensor, r_s: &Tensor) -> Result<f64> {
    let g_t = gram::trace_normalize(&gram::linear_gram(r_t)?)?;
    let g_s = gram::trace_normalize(&gram::linear_gram(r_s)?)?;
    Ok(entropy::mutual_information(&g_t, &g_s, EntropyOrder::TWO)?.bits())
}

/// Runs the harness for `config.steps` steps.
pub fn run_toy_training(config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let mut params = Trainables::init(config)?;
    let mut state = AdamState::new(&params.tensors());
    let hyper = AdamHyper {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
    };
    let mut records = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let lr = cosine_lr(step, config.steps, config.lr_init, config.lr_final)?;
        let batch = synth_batch(config, BATCH_STREAM_BASE + step as u64);
        let g = step_graph(config, &params, &batch).map_err(|e| {
            Error::Numeric(format!("step {}: forward pass failed: {e}", step + 1))
        })?;
        let bd = LossBreakdown::from_tape(&g.tape, &g.terms, Some(g.l_task), &config.weights);
        let mi_ts = mi_between(g.tape.value(g.r_teacher), g.tape.value(g.r_student))?;
        let record = StepRecord {
            step: step + 1,
            lr,
            l_r: bd.l_r,
            l_d: bd.l_d,
            l_task: bd.l_task,
            l_info: bd.l_info,
            l_total: g.tape.value(g.l_total).item(),
            mi_ts,
        };
        let finite = [record.l_r, record.l_d, record.l_task, record.l_total, record.mi_ts]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric(format!("non-finite loss at step {}: {record:?}", step + 1)));
        }

        let grads = g.tape.backward(g.l_total)?;
        let mut vars: Vec<Var> = g.relation.vars().to_vec();
        vars.extend([g.adapter.down, g.adapter.up]);
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let grad_refs: Vec<&Tensor> = vars
            .iter()
            .zip(&zeros)
            .map(|(v, z)| grads.get(*v).unwrap_or(z))
            .collect();
        adam_step(&mut params.tensors_mut(), &grad_refs, &mut state, lr, hyper)?;
        records.push(record);
    }
    Ok(TrainReport {
        records,
        final_params: params,
    })
}

/// Result of one gradient-check group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckGroup {
    pub name: String,
    /// `None` when the group is expected to receive no gradient at all.
    pub max_rel_error: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GradcheckGroup>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,max_rel_error,status\n");
        for g in &self.groups {
            let err = g.max_rel_error.map_or("none".to_string(), |e| format!("{e:e}"));
            let status = match (g.max_rel_error, g.passed) {
                (None, true) => "no-gradient",
                (_, true) => "pass",
                _ => "fail",
            };
            let _ = writeln!(out, "{},{err},{status}", g.name);
        }
        out
    }
}

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Gradient checks at `B=3, N=2, P=4, D=4` for every loss and parameter
/// group. With `corrupt` set the analytic gradients are perturbed, which must
/// make every checked group fail.
pub fn gradcheck_all(seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let config = TrainConfig {
        seed,
        steps: 1,
        batch: 3,
        masks: 2,
        positions: 4,
        dim: 4,
        ..TrainConfig::default()
    };
    let mut params = Trainables::init(&config)?;
    // move every parameter off its initial value so no path is trivially inert
    let mut s = Stream::new(seed, 0x4743);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * s.normal();
        }
    }
    let batch = synth_batch(&config, 0);
    let weights = config.weights;

    let check = |f: &(dyn Fn(&mut Tape, Var) -> Result<Var> + Sync + Send), x: &Tensor| -> Result<f64> {
        let mut analytic = autodiff::analytic_gradient(&f, x)?;
        if corrupt {
            for v in analytic.data_mut() {
                *v = 1.5 * *v + 1e-3;
            }
        }
        let numeric = autodiff::numeric_gradient(
            |p| {
                let mut t = Tape::new();
                let leaf = t.constant(p.clone());
                let root = f(&mut t, leaf)?;
                Ok(t.value(root).item())
            },
            x,
            GRADCHECK_STEP,
            crate::par::Exec::default(),
        )?;
        Ok(autodiff::max_relative_error(&analytic, &numeric))
    };

    let relation_field = |t: &mut Tape, field: usize, v: Var| -> RelationVars {
        let mut vars = params.relation.bind(t, false);
        match field {
            0 => vars.w_q = v,
            1 => vars.b_q = v,
            2 => vars.w_k = v,
            3 => vars.b_k = v,
            4 => vars.ln_m_gain = v,
            5 => vars.ln_m_bias = v,
            6 => vars.ln_i_gain = v,
            _ => vars.ln_i_bias = v,
        }
        vars
    };

    let mut groups = Vec::new();
    let mut push = |name: &str, err: f64| {
        groups.push(GradcheckGroup {
            name: name.to_string(),
            max_rel_error: Some(err),
            passed: err < GRADCHECK_TOL,
        })
    };

    let mut worst = 0.0f64;
    for field in 0..8 {
        let f = |t: &mut Tape, v: Var| {
            let vars = relation_field(t, field, v);
            let zi = t.constant(batch.teacher_zi.clone());
            let zm = t.constant(batch.teacher_zm.clone());
            let r_t = relation::relation_graph(t, &vars, zi, zm)?;
            losses::loss_r(t, zi, zm, r_t)
        };
        worst = worst.max(check(&f, params.relation.tensors()[field])?);
    }
    push("L_r/relation_params", worst);

    let student_relation = |t: &mut Tape, vars: &RelationVars, zi: Var, zm: Var| -> Result<Var> {
        let ti = t.constant(batch.teacher_zi.clone());
        let tm = t.constant(batch.teacher_zm.clone());
        let r_t = relation::relation_graph(t, vars, ti, tm)?;
        let r_s = relation::relation_graph(t, vars, zi, zm)?;
        losses::loss_d(t, r_t, r_s)
    };

    let mut worst = 0.0f64;
    for field in 0..8 {
        let f = |t: &mut Tape, v: Var| {
            let vars = relation_field(t, field, v);
            let zi = t.constant(batch.student_zi.clone());
            let zm = t.constant(batch.student_zm.clone());
            student_relation(t, &vars, zi, zm)
        };
        worst = worst.max(check(&f, params.relation.tensors()[field])?);
    }
    push("L_d/relation_params", worst);

    let f_zi = |t: &mut Tape, v: Var| {
        let vars = params.relation.bind(t, false);
        let zm = t.constant(batch.student_zm.clone());
        student_relation(t, &vars, v, zm)
    };
    let f_zm = |t: &mut Tape, v: Var| {
        let vars = params.relation.bind(t, false);
        let zi = t.constant(batch.student_zi.clone());
        student_relation(t, &vars, zi, v)
    };
    let worst = check(&f_zi, &batch.student_zi)?.max(check(&f_zm, &batch.student_zm)?);
    push("L_d/student_features", worst);

    let mut logits = Tensor::new(vec![3, 2], s.normals(6))?;
    logits.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    let f_task = |t: &mut Tape, v: Var| losses::toy_structure_loss(t, v, &batch.target);
    push("toy_structure_loss/logits", check(&f_task, &logits)?);

    let total = |t: &mut Tape, down: Var, up: Var| -> Result<Var> {
        let vars = params.relation.bind(t, false);
        let adapter = AdapterVars { down, up };
        let ti = t.constant(batch.teacher_zi.clone());
        let tm = t.constant(batch.teacher_zm.clone());
        let bi = t.constant(batch.student_zi.clone());
        let bm = t.constant(batch.student_zm.clone());
        let w = t.constant(probe(&config));
        let si = adapter_graph(t, &adapter, bi)?;
        let sm = adapter_graph(t, &adapter, bm)?;
        let logits = task_logits(t, sm, w, batch.threshold)?;
        let task = losses::toy_structure_loss(t, logits, &batch.target)?;
        let task = t.scale(task, config.task_weight)?;
        let r_t = relation::relation_graph(t, &vars, ti, tm)?;
        let r_s = relation::relation_graph(t, &vars, si, sm)?;
        let terms = losses::info_terms(t, ti, tm, r_t, r_s, &weights)?;
        t.add(task, terms.l_info)
    };
    let f_down = |t: &mut Tape, v: Var| {
        let up = t.constant(params.adapter.up.clone());
        total(t, v, up)
    };
    let f_up = |t: &mut Tape, v: Var| {
        let down = t.constant(params.adapter.down.clone());
        total(t, down, v)
    };
    let worst = check(&f_down, &params.adapter.down)?.max(check(&f_up, &params.adapter.up)?);
    push("L_total/adapter_params", worst);

    // Teacher features must never receive a gradient.
    let g = step_graph(&config, &params, &batch)?;
    let grads = g.tape.backward(g.l_total)?;
    let detached = !grads.contains(g.teacher_zi) && !grads.contains(g.teacher_zm);
    groups.push(GradcheckGroup {
        name: "teacher_features".into(),
        max_rel_error: None,
        passed: detached,
    });

    Ok(GradcheckReport {
        seed,
        tolerance: GRADCHECK_TOL,
        groups,
    })
}
