//! Small feed-forward binary classifiers.
//!
//! The same parameter type serves three roles in the pipeline: the
//! proprietary model, the extracted surrogates, and the benign reference
//! models used for regularization. Hidden layers are ReLU, the output is a
//! single sigmoid unit giving P(y=1 | x), and training is Adam on binary
//! cross-entropy with soft targets (an attacker trains on probability
//! scores, so hard 0/1 labels are just a special case).

use crate::autodiff::{Tape, Var, PROB_CLAMP_MAX, PROB_CLAMP_MIN};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One dense layer: weight is `in x out`, bias is `1 x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Parameters of a feed-forward binary classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Training configuration. Adam runs with beta1 = 0.9, beta2 = 0.999,
/// epsilon = 1e-8 throughout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            hidden: vec![32, 32],
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

impl MlpParams {
    /// He-style uniform initialization scaled by fan-in, seeded.
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut stream = rng::stream(seed, &format!("mlp/init/layer{l}"));
            let weight = Matrix::from_vec(
                fan_in,
                fan_out,
                (0..fan_in * fan_out).map(|_| stream.gen_range(-bound..bound)).collect(),
            );
            layers.push(Layer { weight, bias: Matrix::zeros(1, fan_out) });
        }
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.weight.cols()).collect()
    }

    /// Per-parameter shapes in `[w0, b0, w1, b1, ...]` order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.shape(), l.bias.shape()])
            .collect()
    }

    fn to_flat(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    fn from_flat(flat: &[Matrix]) -> Self {
        let layers = flat
            .chunks(2)
            .map(|c| Layer { weight: c[0].clone(), bias: c[1].clone() })
            .collect();
        MlpParams { layers }
    }
}

// ── Tape forward pass ─────────────────────────────────────────────────
//
// Shared by plain training (params as leaves) and the watermark embedding
// (params as tape values that depend on the perturbation).

/// Register all parameters on a tape as differentiable leaves.
pub fn params_as_leaves(tape: &mut Tape, params: &MlpParams) -> Vec<Var> {
    params.to_flat().into_iter().map(|m| tape.leaf(m)).collect()
}

/// Register all parameters on a tape as constants.
pub fn params_as_constants(tape: &mut Tape, params: &MlpParams) -> Vec<Var> {
    params.to_flat().into_iter().map(|m| tape.constant(m)).collect()
}

/// Forward pass producing clamped probabilities for a flat `[w, b, ...]`
/// parameter var list. `x` is an `n x input_dim` tape value.
pub fn forward_tape(tape: &mut Tape, flat: &[Var], x: Var) -> Result<Var> {
    let p = forward_tape_raw(tape, flat, x)?;
    Ok(tape.clamp_prob(p))
}

/// Forward pass without the output probability clamp. The clamp's
/// straight-through gate blocks gradients wherever the sigmoid saturates
/// past the clamp interval; searches that must keep moving through
/// saturated regions (CF generation) use this variant and clamp only
/// inside their own log terms.
pub fn forward_tape_raw(tape: &mut Tape, flat: &[Var], x: Var) -> Result<Var> {
    assert!(flat.len() >= 2 && flat.len() % 2 == 0, "flat params come in (w, b) pairs");
    let mut h = x;
    let n_layers = flat.len() / 2;
    for l in 0..n_layers {
        let z = tape.matmul(h, flat[2 * l])?;
        let z = tape.add_row(z, flat[2 * l + 1])?;
        h = if l + 1 < n_layers { tape.relu(z) } else { tape.sigmoid(z) };
    }
    Ok(h)
}

/// Mean binary cross-entropy of probabilities `p` against (possibly soft)
/// targets `y`, both `n x 1` tape values.
pub fn bce_tape(tape: &mut Tape, p: Var, y: Var) -> Result<Var> {
    let lp = tape.log(p);
    let pos = tape.mul(y, lp)?;
    let np = tape.scale(p, -1.0);
    let q = tape.add_const(np, 1.0);
    let q = tape.clamp_prob(q);
    let lq = tape.log(q);
    let ny = tape.scale(y, -1.0);
    let oy = tape.add_const(ny, 1.0);
    let neg = tape.mul(oy, lq)?;
    let s = tape.add(pos, neg)?;
    let mean = tape.reduce_mean(s);
    Ok(tape.scale(mean, -1.0))
}

// ── Plain (detached) Adam for model training ──────────────────────────

struct AdamOpt {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: usize,
}

impl AdamOpt {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPSILON: f64 = 1e-8;

    fn new(shapes: &[(usize, usize)]) -> Self {
        AdamOpt {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 / (1.0 - Self::BETA1.powi(t));
        let bc2 = 1.0 / (1.0 - Self::BETA2.powi(t));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * gi;
                let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= lr * (mi * bc1) / ((vi * bc2).sqrt() + Self::EPSILON);
            }
        }
    }
}

// ── Training ──────────────────────────────────────────────────────────

fn check_data(x: &Matrix, y: &Matrix, op: &'static str) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::EmptyDataset { op });
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite { op, iteration: 0 });
    }
    if y.rows() != x.rows() || y.cols() != 1 {
        return Err(Error::ShapeMismatch {
            op,
            left_rows: x.rows(),
            left_cols: x.cols(),
            right_rows: y.rows(),
            right_cols: y.cols(),
        });
    }
    Ok(())
}

/// Train a fresh model. Deterministic given the config seed.
pub fn train(x: &Matrix, y: &Matrix, cfg: &TrainConfig) -> Result<MlpParams> {
    Ok(train_traced(x, y, cfg)?.0)
}

/// Train and return the per-epoch mean BCE trace alongside the parameters.
pub fn train_traced(x: &Matrix, y: &Matrix, cfg: &TrainConfig) -> Result<(MlpParams, Vec<f64>)> {
    cfg.validate()?;
    check_data(x, y, "train")?;
    let params = MlpParams::init(x.cols(), &cfg.hidden, cfg.seed);
    let mut shuffle = rng::stream(cfg.seed, "mlp/train/shuffle");
    fit(params, x, y, cfg.epochs, cfg.batch_size, cfg.learning_rate, &mut shuffle)
}

/// Continue training existing parameters. Zero epochs returns them unchanged.
pub fn finetune(
    params: &MlpParams,
    x: &Matrix,
    y: &Matrix,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<MlpParams> {
    if epochs == 0 {
        return Ok(params.clone());
    }
    check_data(x, y, "finetune")?;
    if x.cols() != params.input_dim() {
        return Err(Error::WidthMismatch { expected: params.input_dim(), actual: x.cols() });
    }
    let mut shuffle = rng::stream(seed, "mlp/finetune/shuffle");
    let batch = x.rows().min(32);
    Ok(fit(params.clone(), x, y, epochs, batch, lr, &mut shuffle)?.0)
}

fn fit(
    mut params: MlpParams,
    x: &Matrix,
    y: &Matrix,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    shuffle: &mut rng::Stream,
) -> Result<(MlpParams, Vec<f64>)> {
    let n = x.rows();
    let mut flat = params.to_flat();
    let mut opt = AdamOpt::new(&params.shapes());
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        order.shuffle(shuffle);
        for chunk in order.chunks(batch_size) {
            let xb = x.gather_rows(chunk);
            let yb = y.gather_rows(chunk);
            let mut tape = Tape::new();
            let vars: Vec<Var> = flat.iter().map(|m| tape.leaf(m.clone())).collect();
            let xv = tape.constant(xb);
            let yv = tape.constant(yb);
            let p = forward_tape(&mut tape, &vars, xv)?;
            let loss = bce_tape(&mut tape, p, yv)?;
            let grads = tape.grad(loss, &vars)?;
            let grad_mats: Vec<Matrix> = grads.iter().map(|&g| tape.value(g).clone()).collect();
            opt.update(&mut flat, &grad_mats, lr);
        }
        // end-of-epoch loss on the full training set
        trace.push(bce_loss(&MlpParams::from_flat(&flat), x, y)?);
    }
    params = MlpParams::from_flat(&flat);
    Ok((params, trace))
}

// ── Inference ─────────────────────────────────────────────────────────

/// Probabilities P(y=1 | x) for each row, clamped away from 0 and 1.
pub fn predict_proba(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    if x.cols() != params.input_dim() {
        return Err(Error::WidthMismatch { expected: params.input_dim(), actual: x.cols() });
    }
    let n_layers = params.layers.len();
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = h.matmul(&layer.weight)?;
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                z.set(i, j, z.get(i, j) + layer.bias.get(0, j));
            }
        }
        h = if l + 1 < n_layers {
            z.map(|v| if v > 0.0 { v } else { 0.0 })
        } else {
            z.map(|v| crate::autodiff::sigmoid(v).clamp(PROB_CLAMP_MIN, PROB_CLAMP_MAX))
        };
    }
    Ok(h)
}

/// Probability of class 1 for a single row.
pub fn predict_one(params: &MlpParams, row: &[f64]) -> Result<f64> {
    let x = Matrix::from_vec(1, row.len(), row.to_vec());
    Ok(predict_proba(params, &x)?.item())
}

/// Hard labels at the fixed 0.5 threshold.
pub fn predict_labels(params: &MlpParams, x: &Matrix) -> Result<Vec<u8>> {
    Ok(predict_proba(params, x)?.data().iter().map(|&p| u8::from(p >= 0.5)).collect())
}

/// Mean BCE of a model on a dataset (evaluation only).
pub fn bce_loss(params: &MlpParams, x: &Matrix, y: &Matrix) -> Result<f64> {
    let p = predict_proba(params, x)?;
    let mut total = 0.0;
    for i in 0..p.rows() {
        let pi = p.get(i, 0);
        let yi = y.get(i, 0);
        total -= yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln();
    }
    Ok(total / p.rows() as f64)
}

/// Fraction of rows where the two models agree on the thresholded label.
pub fn agreement(a: &MlpParams, b: &MlpParams, x: &Matrix) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptyDataset { op: "agreement" });
    }
    let la = predict_labels(a, x)?;
    let lb = predict_labels(b, x)?;
    let same = la.iter().zip(&lb).filter(|(p, q)| p == q).count();
    Ok(same as f64 / x.rows() as f64)
}

// ── Magnitude pruning ─────────────────────────────────────────────────

/// Zero out the `floor(rate * #weights)` smallest-magnitude weights across
/// all layers (biases excluded). Ties break by (layer, index) so the result
/// is deterministic and idempotent at a fixed rate.
pub fn prune(params: &MlpParams, rate: f64) -> Result<MlpParams> {
    if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
        return Err(Error::InvalidConfig(format!("prune rate must be in [0,1], got {rate}")));
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        for (i, &w) in layer.weight.data().iter().enumerate() {
            entries.push((w.abs(), l, i));
        }
    }
    let k = ((rate * entries.len() as f64).floor() as usize).min(entries.len());
    entries.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut out = params.clone();
    for &(_, l, i) in entries.iter().take(k) {
        out.layers[l].weight.data_mut()[i] = 0.0;
    }
    Ok(out)
}

// ── Persistence ───────────────────────────────────────────────────────

/// On-disk JSON document for a trained model. 64-bit values round-trip
/// bit-exactly through serde_json's shortest-decimal encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub layer_sizes: Vec<usize>,
    pub params: MlpParams,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_meta: Option<TrainConfig>,
}

impl ModelDocument {
    pub fn new(params: MlpParams, cfg: Option<&TrainConfig>) -> Self {
        let mut layer_sizes = vec![params.input_dim()];
        for l in &params.layers {
            layer_sizes.push(l.weight.cols());
        }
        ModelDocument {
            layer_sizes,
            params,
            seed: cfg.map(|c| c.seed),
            train_meta: cfg.cloned(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn blob_fixture(seed: u64) -> (Matrix, Matrix, Matrix, Matrix) {
        let ds = synthetic_blobs(200, 0.12, seed);
        let (train, test) = ds.split(0.25, seed);
        (train.x.clone(), train.y_matrix(), test.x.clone(), test.y_matrix())
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig { learning_rate: 0.01, epochs: 120, batch_size: 32, hidden: vec![16], seed }
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let (x, y, _, _) = blob_fixture(7);
        let params = train(&x, &y, &quick_cfg(7)).unwrap();
        let labels = predict_labels(&params, &x).unwrap();
        let correct = labels
            .iter()
            .zip(y.data())
            .filter(|(&l, &t)| f64::from(l) == t)
            .count();
        let acc = correct as f64 / x.rows() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn heldout_blob_point_matches_label() {
        let (x, y, xt, yt) = blob_fixture(11);
        let params = train(&x, &y, &quick_cfg(11)).unwrap();
        let p = predict_proba(&params, &xt).unwrap();
        // check a single held-out point confidently
        let idx = 0;
        let prob = p.get(idx, 0);
        let prob_for_label = if yt.get(idx, 0) > 0.5 { prob } else { 1.0 - prob };
        assert!(prob_for_label > 0.9, "held-out confidence {prob_for_label}");
    }

    #[test]
    fn degenerate_single_class_saturates() {
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.4, 0.3], vec![0.8, 0.9]]);
        let y = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]);
        let cfg = TrainConfig { epochs: 300, ..quick_cfg(3) };
        let params = train(&x, &y, &cfg).unwrap();
        let p = predict_proba(&params, &x).unwrap();
        for i in 0..3 {
            assert!(p.get(i, 0) >= 0.9, "row {i}: {}", p.get(i, 0));
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let (x, y, _, _) = blob_fixture(5);
        let a = train(&x, &y, &quick_cfg(5)).unwrap();
        let b = train(&x, &y, &quick_cfg(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_rejected() {
        let x = Matrix::zeros(0, 2);
        let y = Matrix::zeros(0, 1);
        assert!(matches!(train(&x, &y, &quick_cfg(0)), Err(Error::EmptyDataset { .. })));
    }

    #[test]
    fn nonfinite_features_rejected() {
        let x = Matrix::from_rows(&[vec![f64::NAN, 0.0]]);
        let y = Matrix::from_rows(&[vec![1.0]]);
        assert!(matches!(train(&x, &y, &quick_cfg(0)), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn zero_params_predict_half() {
        let params = MlpParams {
            layers: vec![
                Layer { weight: Matrix::zeros(2, 4), bias: Matrix::zeros(1, 4) },
                Layer { weight: Matrix::zeros(4, 1), bias: Matrix::zeros(1, 1) },
            ],
        };
        let x = Matrix::from_rows(&[vec![3.0, -1.0], vec![0.0, 0.0]]);
        let p = predict_proba(&params, &x).unwrap();
        assert_eq!(p.get(0, 0), 0.5);
        assert_eq!(p.get(1, 0), 0.5);
    }

    #[test]
    fn positive_weight_model_is_monotone() {
        let params = MlpParams {
            layers: vec![Layer {
                weight: Matrix::from_rows(&[vec![2.0]]),
                bias: Matrix::from_rows(&[vec![-1.0]]),
            }],
        };
        let x = Matrix::from_rows(&[vec![0.0], vec![0.5], vec![1.0]]);
        let p = predict_proba(&params, &x).unwrap();
        assert!(p.get(0, 0) < p.get(1, 0) && p.get(1, 0) < p.get(2, 0));
    }

    #[test]
    fn width_mismatch_rejected() {
        let params = MlpParams::init(3, &[4], 0);
        let x = Matrix::zeros(2, 2);
        assert!(matches!(
            predict_proba(&params, &x),
            Err(Error::WidthMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let (x, y, _, _) = blob_fixture(2);
        let params = train(&x, &y, &quick_cfg(2)).unwrap();
        let tuned = finetune(&params, &x, &y, 0, 0.01, 99).unwrap();
        assert_eq!(params, tuned);
    }

    #[test]
    fn finetune_on_same_data_does_not_hurt() {
        let (x, y, _, _) = blob_fixture(4);
        let params = train(&x, &y, &quick_cfg(4)).unwrap();
        let before = bce_loss(&params, &x, &y).unwrap();
        let tuned = finetune(&params, &x, &y, 10, 0.001, 123).unwrap();
        let after = bce_loss(&tuned, &x, &y).unwrap();
        assert!(after <= before * 1.10, "loss went {before} -> {after}");
    }

    #[test]
    fn finetune_on_flipped_labels_erases_agreement() {
        let (x, y, _, _) = blob_fixture(6);
        let params = train(&x, &y, &quick_cfg(6)).unwrap();
        let flipped = y.map(|v| 1.0 - v);
        let tuned = finetune(&params, &x, &flipped, 300, 0.01, 9).unwrap();
        let labels = predict_labels(&tuned, &x).unwrap();
        let agree_original = labels
            .iter()
            .zip(y.data())
            .filter(|(&l, &t)| f64::from(l) == t)
            .count() as f64
            / x.rows() as f64;
        assert!(agree_original < 0.5, "agreement with original labels {agree_original}");
    }

    #[test]
    fn loss_trace_mostly_decreases() {
        let (x, y, _, _) = blob_fixture(8);
        let cfg = TrainConfig { batch_size: 64, epochs: 100, ..quick_cfg(8) };
        let (_, trace) = train_traced(&x, &y, &cfg).unwrap();
        assert!(trace.last().unwrap() < trace.first().unwrap());
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "transient increase too large: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn prune_examples() {
        let params = MlpParams {
            layers: vec![Layer {
                weight: Matrix::from_vec(4, 1, vec![0.1, -0.2, 0.3, -0.4]),
                bias: Matrix::zeros(1, 1),
            }],
        };
        let pruned = prune(&params, 0.5).unwrap();
        assert_eq!(pruned.layers[0].weight.data(), &[0.0, 0.0, 0.3, -0.4]);

        let same = prune(&params, 0.0).unwrap();
        assert_eq!(same, params);

        let all = prune(&params, 1.0).unwrap();
        assert_eq!(all.layers[0].weight.data(), &[0.0; 4]);
    }

    #[test]
    fn prune_rejects_bad_rate() {
        let params = MlpParams::init(2, &[2], 0);
        assert!(prune(&params, -0.1).is_err());
        assert!(prune(&params, 1.5).is_err());
    }

    #[test]
    fn prune_is_idempotent_at_fixed_rate() {
        let params = MlpParams::init(5, &[7, 3], 21);
        for rate in [0.0, 0.25, 0.5, 0.9] {
            let once = prune(&params, rate).unwrap();
            let twice = prune(&once, rate).unwrap();
            assert_eq!(once, twice, "rate {rate}");
        }
    }

    #[test]
    fn agreement_examples() {
        let (x, y, xt, _) = blob_fixture(13);
        let a = train(&x, &y, &quick_cfg(13)).unwrap();
        assert_eq!(agreement(&a, &a, &xt).unwrap(), 1.0);

        // negating the final layer pre-sigmoid flips every label
        let mut b = a.clone();
        let last = b.layers.len() - 1;
        b.layers[last].weight = b.layers[last].weight.map(|v| -v);
        b.layers[last].bias = b.layers[last].bias.map(|v| -v);
        let p = predict_proba(&a, &xt).unwrap();
        if p.data().iter().all(|&v| (v - 0.5).abs() > 1e-9) {
            assert_eq!(agreement(&a, &b, &xt).unwrap(), 0.0);
        }

        // two independently trained models on separable data agree
        let c = train(&x, &y, &quick_cfg(14)).unwrap();
        assert!(agreement(&a, &c, &xt).unwrap() >= 0.95);
    }

    #[test]
    fn agreement_rejects_empty_input() {
        let a = MlpParams::init(2, &[2], 0);
        assert!(matches!(
            agreement(&a, &a, &Matrix::zeros(0, 2)),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn model_document_roundtrip_is_bit_exact() {
        let (x, y, _, _) = blob_fixture(17);
        let cfg = quick_cfg(17);
        let params = train(&x, &y, &cfg).unwrap();
        let doc = ModelDocument::new(params.clone(), Some(&cfg));
        let text = serde_json::to_string(&doc).unwrap();
        let back: ModelDocument = serde_json::from_str(&text).unwrap();
        for (a, b) in params
            .layers
            .iter()
            .zip(&back.params.layers)
        {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.bias.data().iter().zip(b.bias.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let params = MlpParams::init(3, &[5, 4], 42);
        let x = Matrix::from_rows(&[vec![0.2, -0.7, 1.1], vec![0.0, 0.3, -0.2]]);
        let plain = predict_proba(&params, &x).unwrap();
        let mut tape = Tape::new();
        let vars = params_as_constants(&mut tape, &params);
        let xv = tape.constant(x);
        let p = forward_tape(&mut tape, &vars, xv).unwrap();
        for i in 0..2 {
            assert_eq!(plain.get(i, 0).to_bits(), tape.value(p).get(i, 0).to_bits());
        }
    }
}
