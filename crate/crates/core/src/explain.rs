//! Counterfactual explanation generation and quality metrics.
//!
//! Two explainers exercise the watermark pipeline. The gradient method runs
//! projected gradient descent on `(F(x') - y')^2 + lambda * |x' - x|_1`
//! toward the flipped label; the growing-sphere method samples uniformly in
//! expanding l2 shells around the input and takes the first sample the model
//! classifies as the target, followed by a greedy pass that restores
//! coordinates to their original values whenever validity survives.
//!
//! Both explainers freeze immutable columns (one-hot groups and flagged
//! continuous features) and keep every coordinate inside [0, 1]. An invalid
//! CF is returned flagged, never raised as an error.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{self, MlpParams};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfMethod {
    Gradient,
    GrowingSphere,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfConfig {
    pub method: CfMethod,
    /// gradient method: maximum projected-descent steps
    pub max_iter: usize,
    /// gradient method: step size
    pub step_size: f64,
    /// gradient method: l1 distance weight
    pub distance_weight: f64,
    /// growing sphere: shell width (eta)
    pub shell_width: f64,
    /// growing sphere: samples drawn per shell
    pub samples_per_shell: usize,
    /// growing sphere: number of shells before giving up
    pub max_shells: usize,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            method: CfMethod::Gradient,
            max_iter: 1000,
            step_size: 0.05,
            distance_weight: 0.1,
            shell_width: 0.02,
            samples_per_shell: 100,
            max_shells: 50,
            seed: 0,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if self.shell_width <= 0.0 {
            return Err(Error::InvalidConfig("shell width must be positive".into()));
        }
        Ok(())
    }
}

/// One generated counterfactual.
#[derive(Debug, Clone)]
pub struct CfOutcome {
    pub point: Vec<f64>,
    pub valid: bool,
    /// growing sphere only: shell index where the point was accepted
    pub shell: Option<usize>,
    /// growing sphere only: sampled search radius of the accepted point
    pub radius: f64,
}

/// A batch of originals and their counterfactuals, index-aligned.
#[derive(Debug, Clone)]
pub struct CfBatch {
    pub originals: Matrix,
    pub counterfactuals: Matrix,
    /// target label of each CF: the flip of the model's prediction on x
    pub target_labels: Vec<u8>,
    pub valid: Vec<bool>,
    pub shells: Vec<Option<usize>>,
    pub radii: Vec<f64>,
}

impl CfBatch {
    pub fn n(&self) -> usize {
        self.originals.rows()
    }
}

fn predicted_label(model: &MlpParams, row: &[f64]) -> Result<u8> {
    Ok(u8::from(mlp::predict_one(model, row)? >= 0.5))
}

// ── Gradient method ───────────────────────────────────────────────────

/// Projected gradient descent toward the target label for a whole batch at
/// once (the objective is separable across rows).
///
/// Each row runs in two phases. Until its iterate first flips the
/// prediction, cross-entropy toward the target drives the descent: the
/// squared target term has a vanishing gradient wherever the model
/// saturates, which would trap confident rows at their original point.
/// Once valid, the row descends the full squared+l1 objective and the
/// best-objective valid iterate is kept.
fn gradient_cf_batch(
    model: &MlpParams,
    x: &Matrix,
    targets: &[u8],
    mask: &[bool],
    cfg: &CfConfig,
) -> Result<Vec<CfOutcome>> {
    let (n, d) = x.shape();
    let y_t = Matrix::from_vec(n, 1, targets.iter().map(|&t| f64::from(t)).collect());
    let mut current = x.clone();
    let mut active = vec![true; n];
    let mut best_valid: Vec<Option<(f64, Vec<f64>)>> = vec![None; n];

    let l1_dist = |row: &[f64], i: usize| -> f64 {
        row.iter().zip(x.row(i)).map(|(a, b)| (a - b).abs()).sum()
    };

    for _ in 0..cfg.max_iter {
        if active.iter().all(|a| !a) {
            break;
        }
        let mut tape = Tape::new();
        let params = mlp::params_as_constants(&mut tape, model);
        let xv = tape.leaf(current.clone());
        let p = mlp::forward_tape_raw(&mut tape, &params, xv)?;
        let yv = tape.constant(y_t.clone());

        // squared target term, per row
        let diff = tape.sub(p, yv)?;
        let sq = tape.mul(diff, diff)?;
        // cross-entropy toward the target, per row; the clamp interval is
        // essentially the full f64 range so its straight-through gate never
        // blocks gradient flow in saturated regions (1/p cancels against the
        // sigmoid's p(1-p), keeping the gradient O(1))
        let pc = tape.clamp(p, 1e-300, 1.0 - 1e-16);
        let lp = tape.log(pc);
        let pos = tape.mul(yv, lp)?;
        let np = tape.scale(p, -1.0);
        let q = tape.add_const(np, 1.0);
        let qc = tape.clamp(q, 1e-300, 1.0 - 1e-16);
        let lq = tape.log(qc);
        let ny = tape.scale(yv, -1.0);
        let oy = tape.add_const(ny, 1.0);
        let neg = tape.mul(oy, lq)?;
        let ce_pos = tape.add(pos, neg)?;
        let ce = tape.scale(ce_pos, -1.0);

        // rows still seeking validity follow cross-entropy, the rest refine
        // the squared term
        let gate_vals = Matrix::from_vec(
            n,
            1,
            best_valid.iter().map(|b| if b.is_none() { 1.0 } else { 0.0 }).collect(),
        );
        let gate = tape.constant(gate_vals.clone());
        let inv_gate_vals = gate_vals.map(|v| 1.0 - v);
        let inv_gate = tape.constant(inv_gate_vals);
        let seek = tape.mul(gate, ce)?;
        let refine = tape.mul(inv_gate, sq)?;
        let combined = tape.add(seek, refine)?;
        let loss = tape.reduce_sum(combined);

        let p_now = tape.value(p).clone();
        let grad = tape.grad(loss, &[xv])?[0];
        let g = tape.value(grad).clone();

        for i in 0..n {
            if !active[i] {
                continue;
            }
            let valid_now = u8::from(p_now.get(i, 0) >= 0.5) == targets[i];
            if valid_now {
                let obj = {
                    let e = p_now.get(i, 0) - f64::from(targets[i]);
                    e * e + cfg.distance_weight * l1_dist(current.row(i), i)
                };
                if best_valid[i].as_ref().is_none_or(|(b, _)| obj < *b) {
                    best_valid[i] = Some((obj, current.row(i).to_vec()));
                }
            }
            let lambda = if best_valid[i].is_some() { cfg.distance_weight } else { 0.0 };
            let mut max_move = 0.0_f64;
            for j in 0..d {
                if mask[j] {
                    continue;
                }
                let away = current.get(i, j) - x.get(i, j);
                let l1_grad = if away == 0.0 { 0.0 } else { lambda * away.signum() };
                let step = cfg.step_size * (g.get(i, j) + l1_grad);
                let updated = (current.get(i, j) - step).clamp(0.0, 1.0);
                max_move = max_move.max((updated - current.get(i, j)).abs());
                current.set(i, j, updated);
            }
            if max_move < 1e-12 {
                active[i] = false;
            }
        }
    }

    let p_final = mlp::predict_proba(model, &current)?;
    Ok((0..n)
        .map(|i| match best_valid[i].take() {
            Some((_, point)) => CfOutcome { point, valid: true, shell: None, radius: 0.0 },
            None => CfOutcome {
                point: current.row(i).to_vec(),
                valid: u8::from(p_final.get(i, 0) >= 0.5) == targets[i],
                shell: None,
                radius: 0.0,
            },
        })
        .collect())
}

/// Single-row gradient CF toward an explicit target label.
pub fn gradient_cf(
    model: &MlpParams,
    x: &[f64],
    target: u8,
    mask: &[bool],
    cfg: &CfConfig,
) -> Result<CfOutcome> {
    cfg.validate()?;
    if predicted_label(model, x)? == target {
        return Ok(CfOutcome { point: x.to_vec(), valid: true, shell: None, radius: 0.0 });
    }
    let xm = Matrix::from_vec(1, x.len(), x.to_vec());
    Ok(gradient_cf_batch(model, &xm, &[target], mask, cfg)?.remove(0))
}

// ── Growing sphere method ─────────────────────────────────────────────

/// Random search in expanding l2 shells restricted to mutable coordinates.
pub fn growing_sphere_cf(
    model: &MlpParams,
    x: &[f64],
    target: u8,
    mask: &[bool],
    cfg: &CfConfig,
    stream: &mut rng::Stream,
) -> Result<CfOutcome> {
    cfg.validate()?;
    if predicted_label(model, x)? == target {
        return Ok(CfOutcome { point: x.to_vec(), valid: true, shell: None, radius: 0.0 });
    }
    let mutable: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(j, &m)| (!m).then_some(j))
        .collect();
    if mutable.is_empty() {
        return Ok(CfOutcome { point: x.to_vec(), valid: false, shell: None, radius: 0.0 });
    }
    let dm = mutable.len() as f64;

    let gauss = |s: &mut rng::Stream| -> f64 {
        let u1: f64 = s.gen_range(f64::EPSILON..1.0);
        let u2: f64 = s.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };

    let mut best_point: Option<Vec<f64>> = None;
    let mut best_score = f64::NEG_INFINITY;

    for shell in 0..cfg.max_shells {
        let lo = shell as f64 * cfg.shell_width;
        let hi = lo + cfg.shell_width;
        // draw candidates, then run one batched prediction over the shell
        let mut candidates = Matrix::zeros(cfg.samples_per_shell, x.len());
        let mut radii = Vec::with_capacity(cfg.samples_per_shell);
        for s in 0..cfg.samples_per_shell {
            // direction uniform on the mutable-coordinate sphere, radius
            // distributed for uniform density over the annulus volume
            let mut dir: Vec<f64> = mutable.iter().map(|_| gauss(stream)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            for v in &mut dir {
                *v /= norm;
            }
            let u: f64 = stream.gen_range(0.0..1.0);
            let r = (lo.powf(dm) + u * (hi.powf(dm) - lo.powf(dm))).powf(1.0 / dm);
            radii.push(r);
            for j in 0..x.len() {
                candidates.set(s, j, x[j]);
            }
            for (k, &j) in mutable.iter().enumerate() {
                candidates.set(s, j, (x[j] + r * dir[k]).clamp(0.0, 1.0));
            }
        }
        let probs = mlp::predict_proba(model, &candidates)?;
        for s in 0..cfg.samples_per_shell {
            let p = probs.get(s, 0);
            let label = u8::from(p >= 0.5);
            if label == target {
                let accepted = candidates.row(s).to_vec();
                let restored = restore_coordinates(model, x, &accepted, &mutable, target)?;
                return Ok(CfOutcome {
                    point: restored,
                    valid: true,
                    shell: Some(shell),
                    radius: radii[s],
                });
            }
            let score = if target == 1 { p } else { 1.0 - p };
            if score > best_score {
                best_score = score;
                best_point = Some(candidates.row(s).to_vec());
            }
        }
    }

    // budget exhausted: hand back the best-scoring sample, flagged invalid
    Ok(CfOutcome {
        point: best_point.unwrap_or_else(|| x.to_vec()),
        valid: false,
        shell: None,
        radius: 0.0,
    })
}

/// Greedy sparsification: walk coordinates by ascending |move| and put each
/// back to the original value whenever the prediction stays on target.
fn restore_coordinates(
    model: &MlpParams,
    x: &[f64],
    accepted: &[f64],
    mutable: &[usize],
    target: u8,
) -> Result<Vec<f64>> {
    let mut point = accepted.to_vec();
    let mut order: Vec<usize> = mutable.to_vec();
    order.sort_by(|&a, &b| {
        let da = (accepted[a] - x[a]).abs();
        let db = (accepted[b] - x[b]).abs();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    for j in order {
        if point[j] == x[j] {
            continue;
        }
        let saved = point[j];
        point[j] = x[j];
        if predicted_label(model, &point)? != target {
            point[j] = saved;
        }
    }
    Ok(point)
}

// ── Batch generation ──────────────────────────────────────────────────

/// Generate one CF per row, targeting the flip of the model's prediction.
/// Row `i` of a growing-sphere search draws from its own derived stream.
pub fn generate_batch(
    model: &MlpParams,
    x: &Matrix,
    mask: &[bool],
    cfg: &CfConfig,
) -> Result<CfBatch> {
    cfg.validate()?;
    if x.cols() != mask.len() {
        return Err(Error::WidthMismatch { expected: mask.len(), actual: x.cols() });
    }
    let n = x.rows();
    let preds = mlp::predict_labels(model, x)?;
    let targets: Vec<u8> = preds.iter().map(|&l| 1 - l).collect();

    let outcomes: Vec<CfOutcome> = match cfg.method {
        CfMethod::Gradient => gradient_cf_batch(model, x, &targets, mask, cfg)?,
        CfMethod::GrowingSphere => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut stream = rng::stream(cfg.seed, &format!("cf/gs/row{i}"));
                out.push(growing_sphere_cf(model, x.row(i), targets[i], mask, cfg, &mut stream)?);
            }
            out
        }
    };

    let mut cfs = Matrix::zeros(n, x.cols());
    for (i, o) in outcomes.iter().enumerate() {
        for (j, &v) in o.point.iter().enumerate() {
            cfs.set(i, j, v);
        }
    }
    Ok(CfBatch {
        originals: x.clone(),
        counterfactuals: cfs,
        target_labels: targets,
        valid: outcomes.iter().map(|o| o.valid).collect(),
        shells: outcomes.iter().map(|o| o.shell).collect(),
        radii: outcomes.iter().map(|o| o.radius).collect(),
    })
}

// ── Metrics ───────────────────────────────────────────────────────────

/// Fraction of rows whose thresholded model prediction equals the target.
pub fn validity(batch: &CfBatch, model: &MlpParams) -> Result<f64> {
    if batch.n() == 0 {
        return Err(Error::EmptyDataset { op: "validity" });
    }
    let labels = mlp::predict_labels(model, &batch.counterfactuals)?;
    let hits = labels.iter().zip(&batch.target_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / batch.n() as f64)
}

/// Mean l1 distance between originals and counterfactuals.
pub fn proximity(batch: &CfBatch) -> f64 {
    if batch.n() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..batch.n() {
        for j in 0..batch.originals.cols() {
            total += (batch.originals.get(i, j) - batch.counterfactuals.get(i, j)).abs();
        }
    }
    total / batch.n() as f64
}

/// Write a batch as CSV: row id, CF coordinates, target label, validity.
pub fn export_csv(batch: &CfBatch, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot open {}: {e}", path.display())))?;
    let d = batch.counterfactuals.cols();
    let mut header = vec!["row_id".to_string()];
    header.extend((0..d).map(|j| format!("cf_{j}")));
    header.push("target_label".into());
    header.push("valid".into());
    writer.write_record(&header)?;
    for i in 0..batch.n() {
        let mut record = vec![i.to_string()];
        record.extend(batch.counterfactuals.row(i).iter().map(|v| format!("{v:?}")));
        record.push(batch.target_labels[i].to_string());
        record.push(batch.valid[i].to_string());
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
