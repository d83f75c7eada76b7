//! Watermark embedding for counterfactual explanations.
//!
//! The perturbation `theta` (one row per served CF, bounded in l-infinity
//! norm by `delta`) is chosen by a bi-level optimization. The inner problem
//! imitates the adversary: surrogate models `w1` train on the query set, a
//! sample of proprietary training data, and the watermarked CFs, while
//! benign reference models `w2` train on the same data *without* the CFs.
//! The outer problem ascends on
//!
//! ```text
//! L = l1 * poison(w1) - l2 * validity(F_W) - l3 * regularization(w2)
//! ```
//!
//! where poison rewards the surrogate's extra confidence on watermarked CFs
//! over unwatermarked ones, validity penalizes shifting the proprietary
//! model's outputs, and the regularization term suppresses the same
//! confidence gap on benign models so that innocent parties are not flagged.
//!
//! Each outer step runs K Adam updates for every ensemble pair on one tape
//! (weights stay differentiable functions of theta), takes one sign-gradient
//! ascent step averaged over the ensemble, and re-projects theta: clamp to
//! the l-infinity ball, zero immutable columns, clip the watermarked sum
//! into [0, 1]. Models and optimizer moments warm-start across outer steps;
//! the meta-gradient flows through the current K steps only.

use crate::autodiff::{AdamSnapshot, Tape, TapeAdam, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{self, MlpParams};
use crate::rng;
use rand::seq::index::sample as index_sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

// ── Loss forms ────────────────────────────────────────────────────────

/// Functional form of the poison / validity / regularization terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    /// log p(wm) - log p(unwm)
    LogDiff,
    /// Bernoulli KL( p(wm) || p(unwm) )
    Kl,
    /// p(wm) - p(unwm)
    Residual,
}

/// Closed-form value of a loss form on a single probability pair.
pub fn loss_form_value(p_wm: f64, p_unwm: f64, form: LossForm) -> f64 {
    let p = p_wm.clamp(crate::autodiff::PROB_CLAMP_MIN, crate::autodiff::PROB_CLAMP_MAX);
    let q = p_unwm.clamp(crate::autodiff::PROB_CLAMP_MIN, crate::autodiff::PROB_CLAMP_MAX);
    match form {
        LossForm::LogDiff => p.ln() - q.ln(),
        LossForm::Kl => p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln(),
        LossForm::Residual => p - q,
    }
}

// ── Configuration ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WatermarkConfig {
    /// outer (watermarking) steps T
    pub outer_steps: usize,
    /// unrolled inner Adam steps K per outer step
    pub unroll_steps: usize,
    /// l-infinity radius of the perturbation
    pub delta: f64,
    pub lambda_poison: f64,
    pub lambda_validity: f64,
    pub lambda_reg: f64,
    /// independently initialized (w1, w2) pairs averaged in the outer loss
    pub ensembles: usize,
    pub inner_lr: f64,
    pub inner_batch: usize,
    /// architecture of the inner surrogate/benign models
    pub surrogate_hidden: Vec<usize>,
    pub poison_form: LossForm,
    pub validity_form: LossForm,
    /// reinitialize (w1, w2) at every outer step instead of warm-starting
    #[serde(default)]
    pub reinit_per_outer: bool,
    pub seed: u64,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        WatermarkConfig {
            outer_steps: 50,
            unroll_steps: 5,
            delta: 0.05,
            lambda_poison: 1.0,
            lambda_validity: 1.0,
            lambda_reg: 1.0,
            ensembles: 8,
            inner_lr: 0.01,
            inner_batch: 64,
            surrogate_hidden: vec![32, 32],
            poison_form: LossForm::LogDiff,
            validity_form: LossForm::Kl,
            reinit_per_outer: false,
            seed: 0,
        }
    }
}

impl WatermarkConfig {
    /// Sign-step size: 2.5 * delta / T.
    pub fn step_size(&self) -> f64 {
        2.5 * self.delta / self.outer_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta <= 0.0 {
            return Err(Error::InvalidConfig("delta must be positive".into()));
        }
        if self.outer_steps == 0 || self.unroll_steps == 0 || self.ensembles == 0 {
            return Err(Error::InvalidConfig(
                "outer steps, unroll steps, and ensembles must all be at least 1".into(),
            ));
        }
        if self.lambda_poison < 0.0 || self.lambda_validity < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if self.inner_lr <= 0.0 {
            return Err(Error::InvalidConfig("inner learning rate must be positive".into()));
        }
        if self.inner_batch == 0 {
            return Err(Error::InvalidConfig("inner batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

// ── Inputs and outputs ────────────────────────────────────────────────

/// Everything the embedding optimizes against. `query_x` row i is the input
/// whose CF is `cf_x` row i; `cf_labels[i] = 1 - thresholded F_W(query_x[i])`.
pub struct EmbedInputs<'a> {
    pub query_x: &'a Matrix,
    /// soft labels F_W(query_x), one column
    pub query_scores: &'a Matrix,
    pub cf_x: &'a Matrix,
    pub cf_labels: &'a [u8],
    /// sampled proprietary training data (may have zero rows)
    pub train_x: &'a Matrix,
    pub train_y: &'a Matrix,
    pub fw: &'a MlpParams,
    pub mask: &'a [bool],
}

impl EmbedInputs<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.cf_x.rows() != self.query_x.rows() || self.cf_x.rows() != self.cf_labels.len() {
            return Err(Error::LengthMismatch {
                left: self.cf_x.rows(),
                right: self.query_x.rows(),
            });
        }
        if self.cf_x.rows() == 0 {
            return Err(Error::EmptyDataset { op: "embed" });
        }
        if self.mask.len() != self.cf_x.cols() {
            return Err(Error::WidthMismatch {
                expected: self.cf_x.cols(),
                actual: self.mask.len(),
            });
        }
        if self.fw.input_dim() != self.cf_x.cols() {
            return Err(Error::WidthMismatch {
                expected: self.fw.input_dim(),
                actual: self.cf_x.cols(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub dataset_id: String,
}

/// The embedded perturbation with its bound, mask, and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WatermarkTheta {
    pub theta: Matrix,
    pub delta: f64,
    pub mask: Vec<bool>,
    pub provenance: Provenance,
}

impl WatermarkTheta {
    /// Post-embed invariants: bounded, masked columns exactly zero, finite.
    pub fn check_invariants(&self) -> Result<()> {
        if !self.theta.is_finite() {
            return Err(Error::NonFinite { op: "theta", iteration: 0 });
        }
        if self.theta.max_abs() > self.delta + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "theta exceeds the l-infinity bound: {} > {}",
                self.theta.max_abs(),
                self.delta
            )));
        }
        for i in 0..self.theta.rows() {
            for (j, &masked) in self.mask.iter().enumerate() {
                if masked && self.theta.get(i, j) != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "masked column {j} carries a nonzero perturbation at row {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One row of the loss trace, written per outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub poison: f64,
    pub validity: f64,
    pub regularization: f64,
    pub objective: f64,
}

/// Write a loss trace as JSON lines.
pub fn write_trace(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in trace {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── Inner (lower-level) problem ───────────────────────────────────────

/// Persistent state of one ensemble member across outer iterations.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub w1: MlpParams,
    pub w2: MlpParams,
    pub adam1: AdamSnapshot,
    pub adam2: AdamSnapshot,
}

impl InnerState {
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64, member: usize) -> Self {
        use rand::Rng;
        // distinct derived seeds keep the pair decorrelated
        let s1: u64 = rng::stream(seed, &format!("wm/w1/{member}")).gen();
        let s2: u64 = rng::stream(seed, &format!("wm/w2/{member}")).gen();
        let w1 = MlpParams::init(input_dim, hidden, s1);
        let w2 = MlpParams::init(input_dim, hidden, s2);
        let adam1 = AdamSnapshot::zeros(&w1.shapes());
        let adam2 = AdamSnapshot::zeros(&w2.shapes());
        InnerState { w1, w2, adam1, adam2 }
    }
}

/// The unrolled inner problem on a live tape: updated surrogate and benign
/// parameter vars (functions of theta via the watermarked CF rows), ready
/// for outer-loss construction.
pub struct UnrolledInner {
    pub tape: Tape,
    pub theta: Var,
    /// cf_x + theta
    pub x_wm: Var,
    pub w1: Vec<Var>,
    pub w2: Vec<Var>,
    adam1: TapeAdam,
    adam2: TapeAdam,
}

/// Run K differentiable Adam steps for one (w1, w2) pair.
///
/// `w1` minimizes BCE over query rows, the training-data sample, and the
/// watermarked CFs; `w2` over the first two only, so it never depends on
/// theta. Batches are drawn without replacement from the given streams.
pub fn inner_update(
    inputs: &EmbedInputs,
    state: &InnerState,
    theta: &Matrix,
    k: usize,
    lr: f64,
    batch_size: usize,
    w1_stream: &mut rng::Stream,
    w2_stream: &mut rng::Stream,
) -> Result<UnrolledInner> {
    let mut tape = Tape::new();
    let theta_var = tape.leaf(theta.clone());
    let cf_const = tape.constant(inputs.cf_x.clone());
    let x_wm = tape.add(cf_const, theta_var)?;

    let cf_y: Matrix = Matrix::from_vec(
        inputs.cf_labels.len(),
        1,
        inputs.cf_labels.iter().map(|&l| f64::from(l)).collect(),
    );

    // w1 training pool: query rows + training sample + watermarked CFs
    let qx = tape.constant(inputs.query_x.clone());
    let qy = tape.constant(inputs.query_scores.clone());
    let cfy = tape.constant(cf_y);
    let (pool1_x, pool1_y, n1) = if inputs.train_x.rows() > 0 {
        let tx = tape.constant(inputs.train_x.clone());
        let ty = tape.constant(inputs.train_y.clone());
        let x = tape.concat_rows(&[qx, tx, x_wm])?;
        let y = tape.concat_rows(&[qy, ty, cfy])?;
        (x, y, inputs.query_x.rows() + inputs.train_x.rows() + inputs.cf_x.rows())
    } else {
        let x = tape.concat_rows(&[qx, x_wm])?;
        let y = tape.concat_rows(&[qy, cfy])?;
        (x, y, inputs.query_x.rows() + inputs.cf_x.rows())
    };

    // w2 training pool: query rows + training sample only
    let (pool2_x, pool2_y, n2) = if inputs.train_x.rows() > 0 {
        let tx = tape.constant(inputs.train_x.clone());
        let ty = tape.constant(inputs.train_y.clone());
        let x = tape.concat_rows(&[qx, tx])?;
        let y = tape.concat_rows(&[qy, ty])?;
        (x, y, inputs.query_x.rows() + inputs.train_x.rows())
    } else {
        (qx, qy, inputs.query_x.rows())
    };

    let mut w1: Vec<Var> = mlp::params_as_leaves(&mut tape, &state.w1);
    let mut w2: Vec<Var> = mlp::params_as_leaves(&mut tape, &state.w2);
    let mut adam1 = TapeAdam::resume(&mut tape, &state.adam1, lr);
    let mut adam2 = TapeAdam::resume(&mut tape, &state.adam2, lr);

    for _ in 0..k {
        let b1 = batch_size.min(n1);
        let idx1 = index_sample(w1_stream, n1, b1).into_vec();
        let xb = tape.gather_rows(pool1_x, &idx1);
        let yb = tape.gather_rows(pool1_y, &idx1);
        let p = mlp::forward_tape(&mut tape, &w1, xb)?;
        let loss = mlp::bce_tape(&mut tape, p, yb)?;
        let grads = tape.grad_at(loss, &w1)?;
        w1 = adam1.step(&mut tape, &w1, &grads)?;

        let b2 = batch_size.min(n2);
        let idx2 = index_sample(w2_stream, n2, b2).into_vec();
        let xb = tape.gather_rows(pool2_x, &idx2);
        let yb = tape.gather_rows(pool2_y, &idx2);
        let p = mlp::forward_tape(&mut tape, &w2, xb)?;
        let loss = mlp::bce_tape(&mut tape, p, yb)?;
        let grads = tape.grad_at(loss, &w2)?;
        w2 = adam2.step(&mut tape, &w2, &grads)?;
    }

    Ok(UnrolledInner { tape, theta: theta_var, x_wm, w1, w2, adam1, adam2 })
}

impl UnrolledInner {
    /// Detach the updated models and optimizer moments for the next outer
    /// iteration.
    pub fn detach_state(&self) -> InnerState {
        let take = |vars: &[Var]| -> MlpParams {
            let layers = vars
                .chunks(2)
                .map(|c| mlp::Layer {
                    weight: self.tape.value(c[0]).clone(),
                    bias: self.tape.value(c[1]).clone(),
                })
                .collect();
            MlpParams { layers }
        };
        InnerState {
            w1: take(&self.w1),
            w2: take(&self.w2),
            adam1: self.adam1.snapshot(&self.tape),
            adam2: self.adam2.snapshot(&self.tape),
        }
    }
}

// ── Outer objective ───────────────────────────────────────────────────

/// Orient probabilities toward a per-row label: p if label 1, 1-p if 0.
fn orient(tape: &mut Tape, p: Var, labels: &[u8]) -> Result<Var> {
    let a = Matrix::from_vec(
        labels.len(),
        1,
        labels.iter().map(|&l| 2.0 * f64::from(l) - 1.0).collect(),
    );
    let b = Matrix::from_vec(labels.len(), 1, labels.iter().map(|&l| 1.0 - f64::from(l)).collect());
    let av = tape.constant(a);
    let bv = tape.constant(b);
    let t = tape.mul(av, p)?;
    tape.add(t, bv)
}

/// Mean loss-form value over rows for a pair of probability columns.
fn form_mean(tape: &mut Tape, p_wm: Var, p_unwm: Var, form: LossForm) -> Result<Var> {
    let p = tape.clamp_prob(p_wm);
    let q = tape.clamp_prob(p_unwm);
    let per_row = match form {
        LossForm::LogDiff => {
            let lp = tape.log(p);
            let lq = tape.log(q);
            tape.sub(lp, lq)?
        }
        LossForm::Kl => {
            // p ln(p/q) + (1-p) ln((1-p)/(1-q))
            let lp = tape.log(p);
            let lq = tape.log(q);
            let ratio = tape.sub(lp, lq)?;
            let t1 = tape.mul(p, ratio)?;
            let np = tape.scale(p, -1.0);
            let cp = tape.add_const(np, 1.0);
            let cp = tape.clamp_prob(cp);
            let nq = tape.scale(q, -1.0);
            let cq = tape.add_const(nq, 1.0);
            let cq = tape.clamp_prob(cq);
            let lcp = tape.log(cp);
            let lcq = tape.log(cq);
            let cratio = tape.sub(lcp, lcq)?;
            let t2 = tape.mul(cp, cratio)?;
            tape.add(t1, t2)?
        }
        LossForm::Residual => tape.sub(p, q)?,
    };
    Ok(tape.reduce_mean(per_row))
}

struct ObjectiveVars {
    poison: Var,
    validity: Var,
    regularization: Var,
    total: Var,
}

/// Build poison, validity, and regularization terms plus the weighted total
/// on the inner tape.
fn outer_objective(
    ui: &mut UnrolledInner,
    inputs: &EmbedInputs,
    cfg: &WatermarkConfig,
) -> Result<ObjectiveVars> {
    let tape = &mut ui.tape;
    let cf_const = tape.constant(inputs.cf_x.clone());

    // poison: surrogate confidence gap on the CF training labels
    let p1_wm = mlp::forward_tape(tape, &ui.w1, ui.x_wm)?;
    let p1_un = mlp::forward_tape(tape, &ui.w1, cf_const)?;
    let p1_wm = orient(tape, p1_wm, inputs.cf_labels)?;
    let p1_un = orient(tape, p1_un, inputs.cf_labels)?;
    let poison = form_mean(tape, p1_wm, p1_un, cfg.poison_form)?;

    // validity: proprietary-model output shift on raw probabilities
    let fw_vars = mlp::params_as_constants(tape, inputs.fw);
    let pf_wm = mlp::forward_tape(tape, &fw_vars, ui.x_wm)?;
    let pf_un = mlp::forward_tape(tape, &fw_vars, cf_const)?;
    let validity = form_mean(tape, pf_wm, pf_un, cfg.validity_form)?;

    // regularization: same form as poison, on the benign pair
    let p2_wm = mlp::forward_tape(tape, &ui.w2, ui.x_wm)?;
    let p2_un = mlp::forward_tape(tape, &ui.w2, cf_const)?;
    let p2_wm = orient(tape, p2_wm, inputs.cf_labels)?;
    let p2_un = orient(tape, p2_un, inputs.cf_labels)?;
    let regularization = form_mean(tape, p2_wm, p2_un, cfg.poison_form)?;

    let a = tape.scale(poison, cfg.lambda_poison);
    let b = tape.scale(validity, cfg.lambda_validity);
    let c = tape.scale(regularization, cfg.lambda_reg);
    let ab = tape.sub(a, b)?;
    let total = tape.sub(ab, c)?;
    Ok(ObjectiveVars { poison, validity, regularization, total })
}

/// Value and components of one ensemble member's outer objective at `theta`,
/// advancing the member state through K warm-started inner steps.
pub struct MemberEval {
    pub poison: f64,
    pub validity: f64,
    pub regularization: f64,
    pub objective: f64,
    pub grad: Option<Matrix>,
}

#[allow(clippy::too_many_arguments)]
pub fn member_objective(
    inputs: &EmbedInputs,
    cfg: &WatermarkConfig,
    state: &mut InnerState,
    theta: &Matrix,
    w1_stream: &mut rng::Stream,
    w2_stream: &mut rng::Stream,
    want_grad: bool,
) -> Result<MemberEval> {
    let mut ui = inner_update(
        inputs,
        state,
        theta,
        cfg.unroll_steps,
        cfg.inner_lr,
        cfg.inner_batch,
        w1_stream,
        w2_stream,
    )?;
    let obj = outer_objective(&mut ui, inputs, cfg)?;
    let grad = if want_grad {
        let g = ui.tape.grad(obj.total, &[ui.theta])?[0];
        Some(ui.tape.value(g).clone())
    } else {
        None
    };
    let eval = MemberEval {
        poison: ui.tape.item(obj.poison),
        validity: ui.tape.item(obj.validity),
        regularization: ui.tape.item(obj.regularization),
        objective: ui.tape.item(obj.total),
        grad,
    };
    *state = ui.detach_state();
    Ok(eval)
}

// ── Embedding ─────────────────────────────────────────────────────────

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Project theta in place: l-infinity clamp, mask zeroing, and feasibility
/// clip so that cf + theta stays inside [0, 1].
fn project(theta: &mut Matrix, cf_x: &Matrix, mask: &[bool], delta: f64) {
    for i in 0..theta.rows() {
        for j in 0..theta.cols() {
            if mask[j] {
                theta.set(i, j, 0.0);
                continue;
            }
            let clamped = theta.get(i, j).clamp(-delta, delta);
            let lo = -cf_x.get(i, j);
            let hi = 1.0 - cf_x.get(i, j);
            theta.set(i, j, clamped.clamp(lo, hi));
        }
    }
}

pub struct EmbedOutput {
    pub theta: WatermarkTheta,
    pub trace: Vec<TraceRow>,
}

/// Solve the bi-level problem and return the watermark plus its loss trace.
///
/// Deterministic given inputs and the config seed. Ensemble members run on
/// independent tapes (in parallel where a thread pool is configured) and
/// their gradients reduce by summation in member order.
pub fn embed(inputs: &EmbedInputs, cfg: &WatermarkConfig, dataset_id: &str) -> Result<EmbedOutput> {
    cfg.validate()?;
    inputs.validate()?;

    let dim = inputs.cf_x.cols();
    let mut states: Vec<InnerState> = (0..cfg.ensembles)
        .map(|m| InnerState::init(dim, &cfg.surrogate_hidden, cfg.seed, m))
        .collect();
    let mut streams: Vec<(rng::Stream, rng::Stream)> = (0..cfg.ensembles)
        .map(|m| {
            (
                rng::stream(cfg.seed, &format!("wm/batch/w1/{m}")),
                rng::stream(cfg.seed, &format!("wm/batch/w2/{m}")),
            )
        })
        .collect();

    let mut theta = Matrix::zeros(inputs.cf_x.rows(), dim);
    let alpha = cfg.step_size();
    let mut trace = Vec::with_capacity(cfg.outer_steps);

    for iteration in 0..cfg.outer_steps {
        if cfg.reinit_per_outer {
            for (m, state) in states.iter_mut().enumerate() {
                let step_seed = cfg.seed ^ ((iteration as u64) << 20);
                *state = InnerState::init(dim, &cfg.surrogate_hidden, step_seed, m);
            }
        }
        let evals: Vec<Result<MemberEval>> = states
            .par_iter_mut()
            .zip(streams.par_iter_mut())
            .map(|(state, (s1, s2))| {
                member_objective(inputs, cfg, state, &theta, s1, s2, true)
            })
            .collect();

        let mut grad_sum = Matrix::zeros(theta.rows(), theta.cols());
        let mut poison = 0.0;
        let mut validity = 0.0;
        let mut regularization = 0.0;
        let mut objective = 0.0;
        for eval in evals {
            let eval = eval?;
            let g = eval.grad.as_ref().expect("gradient requested");
            for (acc, &v) in grad_sum.data_mut().iter_mut().zip(g.data()) {
                *acc += v;
            }
            poison += eval.poison;
            validity += eval.validity;
            regularization += eval.regularization;
            objective += eval.objective;
        }
        let e = cfg.ensembles as f64;
        let row = TraceRow {
            iteration,
            poison: poison / e,
            validity: validity / e,
            regularization: regularization / e,
            objective: objective / e,
        };
        if !row.objective.is_finite() || !grad_sum.is_finite() {
            return Err(Error::EmbedDiverged {
                iteration,
                detail: format!(
                    "objective {} with non-finite entries in the meta-gradient",
                    row.objective
                ),
            });
        }
        trace.push(row);

        for (t, &g) in theta.data_mut().iter_mut().zip(grad_sum.data()) {
            *t += alpha * sign(g);
        }
        project(&mut theta, inputs.cf_x, inputs.mask, cfg.delta);
    }

    let theta = WatermarkTheta {
        theta,
        delta: cfg.delta,
        mask: inputs.mask.to_vec(),
        provenance: Provenance {
            config_hash: cfg.config_hash(),
            dataset_id: dataset_id.to_string(),
        },
    };
    theta.check_invariants()?;
    Ok(EmbedOutput { theta, trace })
}

/// Apply the watermark: elementwise sum clipped into [0, 1].
pub fn apply(theta: &Matrix, cf_x: &Matrix) -> Result<Matrix> {
    cf_x.zip(theta, "apply", |x, t| (x + t).clamp(0.0, 1.0))
}

// ── Direct loss evaluation (reporting) ────────────────────────────────

/// Mean poison-form value of `model` on (cf + theta, cf) pairs, probabilities
/// oriented to the CF training labels. Used for both the poison loss on a
/// suspect and the regularization term on a benign model.
pub fn poison_loss_value(
    model: &MlpParams,
    cf_x: &Matrix,
    theta: &Matrix,
    labels: &[u8],
    form: LossForm,
) -> Result<f64> {
    let wm = apply(theta, cf_x)?;
    let p_wm = mlp::predict_proba(model, &wm)?;
    let p_un = mlp::predict_proba(model, cf_x)?;
    let mut total = 0.0;
    for i in 0..cf_x.rows() {
        let orient = |p: f64| if labels[i] == 1 { p } else { 1.0 - p };
        total += loss_form_value(orient(p_wm.get(i, 0)), orient(p_un.get(i, 0)), form);
    }
    Ok(total / cf_x.rows() as f64)
}

/// Mean validity-form value of the proprietary model on raw probabilities.
pub fn validity_loss_value(
    fw: &MlpParams,
    cf_x: &Matrix,
    theta: &Matrix,
    form: LossForm,
) -> Result<f64> {
    let wm = apply(theta, cf_x)?;
    let p_wm = mlp::predict_proba(fw, &wm)?;
    let p_un = mlp::predict_proba(fw, cf_x)?;
    let mut total = 0.0;
    for i in 0..cf_x.rows() {
        total += loss_form_value(p_wm.get(i, 0), p_un.get(i, 0), form);
    }
    Ok(total / cf_x.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::mlp::TrainConfig;

    fn fixture(seed: u64) -> (MlpParams, Matrix, Matrix, Matrix, Vec<u8>, Matrix, Matrix) {
        let ds = synthetic_blobs(60, 0.12, seed);
        let (train, test) = ds.split(0.4, seed);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 80,
            batch_size: 16,
            hidden: vec![8],
            seed,
        };
        let fw = mlp::train(&train.x, &train.y_matrix(), &cfg).unwrap();
        let query_x = test.x.clone();
        let query_scores = mlp::predict_proba(&fw, &query_x).unwrap();
        let cf_cfg = crate::explain::CfConfig { max_iter: 200, ..Default::default() };
        let batch = crate::explain::generate_batch(&fw, &query_x, &[false, false], &cf_cfg).unwrap();
        let cf_labels = batch.target_labels.clone();
        (fw, query_x, query_scores, batch.counterfactuals, cf_labels, train.x.clone(), train.y_matrix())
    }

    fn quick_cfg(seed: u64) -> WatermarkConfig {
        WatermarkConfig {
            outer_steps: 4,
            unroll_steps: 2,
            ensembles: 2,
            inner_batch: 16,
            surrogate_hidden: vec![8],
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn loss_form_closed_values() {
        // log ratio of 0.8 over 0.4 is ln 2
        assert!((loss_form_value(0.8, 0.4, LossForm::LogDiff) - std::f64::consts::LN_2).abs() < 1e-12);
        // Bernoulli KL(0.9 || 0.5) = 0.9 ln 1.8 + 0.1 ln 0.2
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((loss_form_value(0.9, 0.5, LossForm::Kl) - expected).abs() < 1e-12);
        assert!((expected - 0.3681).abs() < 1e-4);
        // residual form
        assert!((loss_form_value(0.8, 0.4, LossForm::Residual) - 0.4).abs() < 1e-12);
        // zero at equal probabilities, exactly
        for form in [LossForm::LogDiff, LossForm::Kl, LossForm::Residual] {
            assert_eq!(loss_form_value(0.63, 0.63, form), 0.0);
        }
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut stream = rng::stream(3, "wm/kl-prop");
        use rand::Rng;
        for _ in 0..500 {
            let p: f64 = stream.gen_range(0.001..0.999);
            let q: f64 = stream.gen_range(0.001..0.999);
            assert!(loss_form_value(p, q, LossForm::Kl) >= -1e-15, "KL({p}||{q}) negative");
        }
    }

    #[test]
    fn zero_theta_gives_exactly_zero_losses() {
        let (fw, _, _, cf_x, labels, _, _) = fixture(1);
        let theta = Matrix::zeros(cf_x.rows(), cf_x.cols());
        for form in [LossForm::LogDiff, LossForm::Kl, LossForm::Residual] {
            assert_eq!(poison_loss_value(&fw, &cf_x, &theta, &labels, form).unwrap(), 0.0);
            assert_eq!(validity_loss_value(&fw, &cf_x, &theta, form).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_reg_weight_drops_term_from_objective() {
        let (fw, query_x, query_scores, cf_x, labels, tx, ty) = fixture(2);
        let mask = vec![false, false];
        let inputs = EmbedInputs {
            query_x: &query_x,
            query_scores: &query_scores,
            cf_x: &cf_x,
            cf_labels: &labels,
            train_x: &tx,
            train_y: &ty,
            fw: &fw,
            mask: &mask,
        };
        let cfg = WatermarkConfig { lambda_reg: 0.0, ..quick_cfg(2) };
        let mut state = InnerState::init(2, &cfg.surrogate_hidden, cfg.seed, 0);
        let mut s1 = rng::stream(cfg.seed, "test/noreg/w1");
        let mut s2 = rng::stream(cfg.seed, "test/noreg/w2");
        let mut theta = Matrix::zeros(cf_x.rows(), 2);
        theta.set(0, 0, 0.02);
        let eval =
            member_objective(&inputs, &cfg, &mut state, &theta, &mut s1, &mut s2, false).unwrap();
        let expected = cfg.lambda_poison * eval.poison - cfg.lambda_validity * eval.validity;
        assert!((eval.objective - expected).abs() < 1e-12);
    }

    #[test]
    fn single_step_theta_has_sign_step_structure() {
        let (fw, query_x, query_scores, cf_x, labels, tx, ty) = fixture(3);
        let mask = vec![false, true]; // second column immutable
        let inputs = EmbedInputs {
            query_x: &query_x,
            query_scores: &query_scores,
            cf_x: &cf_x,
            cf_labels: &labels,
            train_x: &tx,
            train_y: &ty,
            fw: &fw,
            mask: &mask,
        };
        let cfg = WatermarkConfig {
            outer_steps: 1,
            unroll_steps: 1,
            ensembles: 1,
            inner_batch: 8,
            surrogate_hidden: vec![4],
            seed: 3,
            ..Default::default()
        };
        let out = embed(&inputs, &cfg, "test").unwrap();
        let alpha = cfg.step_size();
        for i in 0..out.theta.theta.rows() {
            // mutable entries are one sign step (possibly feasibility-clipped
            // toward zero), masked entries are exactly zero
            let v = out.theta.theta.get(i, 0);
            assert!(
                v == 0.0 || (v.abs() - alpha).abs() < 1e-12 || v.abs() < alpha,
                "unexpected entry {v} (alpha {alpha})"
            );
            assert_eq!(out.theta.theta.get(i, 1), 0.0);
        }
    }

    #[test]
    fn embed_respects_invariants() {
        let (fw, query_x, query_scores, cf_x, labels, tx, ty) = fixture(4);
        let mask = vec![false, false];
        let inputs = EmbedInputs {
            query_x: &query_x,
            query_scores: &query_scores,
            cf_x: &cf_x,
            cf_labels: &labels,
            train_x: &tx,
            train_y: &ty,
            fw: &fw,
            mask: &mask,
        };
        let cfg = quick_cfg(4);
        let out = embed(&inputs, &cfg, "test").unwrap();
        out.theta.check_invariants().unwrap();
        assert!(out.theta.theta.max_abs() <= cfg.delta + 1e-12);
        assert_eq!(out.trace.len(), cfg.outer_steps);

        // watermarked CFs stay inside the unit box
        let wm = apply(&out.theta.theta, &cf_x).unwrap();
        assert!(wm.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn embed_is_deterministic() {
        let (fw, query_x, query_scores, cf_x, labels, tx, ty) = fixture(5);
        let mask = vec![false, false];
        let inputs = EmbedInputs {
            query_x: &query_x,
            query_scores: &query_scores,
            cf_x: &cf_x,
            cf_labels: &labels,
            train_x: &tx,
            train_y: &ty,
            fw: &fw,
            mask: &mask,
        };
        let a = embed(&inputs, &quick_cfg(5), "test").unwrap();
        let b = embed(&inputs, &quick_cfg(5), "test").unwrap();
        assert_eq!(a.theta.theta, b.theta.theta);
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.objective.to_bits(), rb.objective.to_bits());
        }
    }

    #[test]
    fn validity_only_config_keeps_theta_at_zero() {
        // with lambda1 = lambda3 = 0 the objective is -KL, which theta = 0
        // already minimizes; the sign step sees a zero gradient and stays put
        let (fw, query_x, query_scores, cf_x, labels, tx, ty) = fixture(6);
        let mask = vec![false, false];
        let inputs = EmbedInputs {
            query_x: &query_x,
            query_scores: &query_scores,
            cf_x: &cf_x,
            cf_labels: &labels,
            train_x: &tx,
            train_y: &ty,
            fw: &fw,
            mask: &mask,
        };
        let cfg = WatermarkConfig {
            lambda_poison: 0.0,
            lambda_reg: 0.0,
            lambda_validity: 1.0,
            ..quick_cfg(6)
        };
        let out = embed(&inputs, &cfg, "test").unwrap();
        assert_eq!(out.theta.theta.max_abs(), 0.0);
        for row in &out.trace {
            assert!(row.validity.abs() < 1e-12, "validity drifted: {}", row.validity);
        }
    }

    #[test]
    fn apply_examples() {
        let cf = Matrix::from_rows(&[vec![0.98, 0.5]]);
        let theta = Matrix::from_rows(&[vec![0.05, 0.0]]);
        let wm = apply(&theta, &cf).unwrap();
        assert_eq!(wm.get(0, 0), 1.0); // clipped
        assert_eq!(wm.get(0, 1), 0.5); // untouched

        let zero = Matrix::zeros(1, 2);
        assert_eq!(apply(&zero, &cf).unwrap(), cf);
    }

    #[test]
    fn inner_update_gradient_matches_finite_difference() {
        let (fw, query_x, query_scores, cf_x, labels, tx, ty) = fixture(7);
        let mask = vec![false, false];
        let inputs = EmbedInputs {
            query_x: &query_x,
            query_scores: &query_scores,
            cf_x: &cf_x,
            cf_labels: &labels,
            train_x: &tx,
            train_y: &ty,
            fw: &fw,
            mask: &mask,
        };
        let cfg = WatermarkConfig {
            unroll_steps: 2,
            inner_batch: 1000, // full batch keeps FD reruns aligned
            surrogate_hidden: vec![4],
            seed: 7,
            ..Default::default()
        };
        let base_state = InnerState::init(2, &cfg.surrogate_hidden, cfg.seed, 0);
        let theta0 = Matrix::zeros(cf_x.rows(), 2);

        let eval = |theta: &Matrix, want_grad: bool| -> MemberEval {
            let mut state = base_state.clone();
            let mut s1 = rng::stream(cfg.seed, "test/fd/w1");
            let mut s2 = rng::stream(cfg.seed, "test/fd/w2");
            member_objective(&inputs, &cfg, &mut state, theta, &mut s1, &mut s2, want_grad)
                .unwrap()
        };

        let base = eval(&theta0, true);
        let grad = base.grad.unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (i, j) in [(0usize, 0usize), (1, 1), (2, 0)] {
            if i >= theta0.rows() {
                continue;
            }
            let mut plus = theta0.clone();
            plus.set(i, j, h);
            let mut minus = theta0.clone();
            minus.set(i, j, -h);
            let fd = (eval(&plus, false).objective - eval(&minus, false).objective) / (2.0 * h);
            let an = grad.get(i, j);
            let denom = fd.abs().max(1e-8);
            assert!(
                ((an - fd) / denom).abs() < 1e-3,
                "theta[{i},{j}]: analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
        assert!(checked >= 2);

        // the gradient is not identically zero: some theta entry matters
        assert!(grad.max_abs() > 1e-9, "meta-gradient vanished everywhere");
    }

    #[test]
    fn sign_step_directional_derivative_is_l1_norm() {
        let (fw, query_x, query_scores, cf_x, labels, tx, ty) = fixture(8);
        let mask = vec![false, false];
        let inputs = EmbedInputs {
            query_x: &query_x,
            query_scores: &query_scores,
            cf_x: &cf_x,
            cf_labels: &labels,
            train_x: &tx,
            train_y: &ty,
            fw: &fw,
            mask: &mask,
        };
        let cfg = WatermarkConfig {
            unroll_steps: 1,
            inner_batch: 1000,
            surrogate_hidden: vec![4],
            seed: 8,
            ..Default::default()
        };
        let base_state = InnerState::init(2, &cfg.surrogate_hidden, cfg.seed, 0);
        let theta0 = Matrix::zeros(cf_x.rows(), 2);
        let eval = |theta: &Matrix, want_grad: bool| -> MemberEval {
            let mut state = base_state.clone();
            let mut s1 = rng::stream(cfg.seed, "test/dd/w1");
            let mut s2 = rng::stream(cfg.seed, "test/dd/w2");
            member_objective(&inputs, &cfg, &mut state, theta, &mut s1, &mut s2, want_grad)
                .unwrap()
        };
        let base = eval(&theta0, true);
        let grad = base.grad.unwrap();
        let l1: f64 = grad.data().iter().map(|v| v.abs()).sum();
        assert!(l1 > 0.0);

        let h = 1e-6;
        let dir = grad.map(sign);
        let mut plus = theta0.clone();
        let mut minus = theta0.clone();
        for i in 0..plus.len() {
            plus.data_mut()[i] += h * dir.data()[i];
            minus.data_mut()[i] -= h * dir.data()[i];
        }
        let dd = (eval(&plus, false).objective - eval(&minus, false).objective) / (2.0 * h);
        assert!(dd >= 0.0, "directional derivative along sign(grad) negative: {dd}");
        assert!(
            ((dd - l1) / l1).abs() < 1e-2,
            "directional derivative {dd} vs l1 norm {l1}"
        );
    }

    #[test]
    fn theta_persistence_roundtrip() {
        let theta = WatermarkTheta {
            theta: Matrix::from_rows(&[vec![0.01, 0.0], vec![-0.05, 0.0]]),
            delta: 0.05,
            mask: vec![false, true],
            provenance: Provenance {
                config_hash: "abc".into(),
                dataset_id: "blobs".into(),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.json");
        theta.save(&path).unwrap();
        let back = WatermarkTheta::load(&path).unwrap();
        assert_eq!(theta.theta, back.theta);
        assert_eq!(back.provenance.dataset_id, "blobs");
        back.check_invariants().unwrap();
    }
}
