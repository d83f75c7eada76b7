//! Model-extraction attack simulation against a defended service.
//!
//! The defender serves predictions and counterfactual explanations. Every CF
//! that crosses the service boundary is watermarked: a session batches all
//! CF responses (both rounds, when duals are requested), embeds one theta
//! over the whole batch, and only then releases the perturbed rows. The
//! unwatermarked batch never leaves the [`CfSession`].
//!
//! Three attackers are simulated. `querying` trains a surrogate on
//! prediction queries only (ground-truth negative); `mrce` halves its query
//! budget by adding the served CFs with flipped labels; `dualcf` trains on
//! the served CFs plus the CFs of those CFs (ground-truth positives).

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::explain::{self, CfBatch, CfConfig};
use crate::matrix::Matrix;
use crate::mlp::{self, MlpParams, TrainConfig};
use crate::rng;
use crate::watermark::{self, EmbedInputs, TraceRow, WatermarkConfig, WatermarkTheta};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Querying,
    Mrce,
    Dualcf,
}

impl AttackKind {
    pub fn uses_cfs(&self) -> bool {
        !matches!(self, AttackKind::Querying)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Querying => "querying",
            AttackKind::Mrce => "mrce",
            AttackKind::Dualcf => "dualcf",
        }
    }
}

/// Query accounting for one attack run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLog {
    pub prediction_queries: usize,
    pub cf_queries: usize,
}

/// Everything an attack run produces.
#[derive(Debug, Clone)]
pub struct AttackTranscript {
    pub kind: AttackKind,
    pub budget: usize,
    pub log: QueryLog,
    /// the attacker's training set (features)
    pub train_x: Matrix,
    /// soft labels for queried points, hard labels for CF points
    pub train_y: Matrix,
    pub surrogate: MlpParams,
    /// ground truth: trained on watermarked CFs
    pub positive: bool,
}

/// Serializable summary of a transcript for the harness output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub kind: AttackKind,
    pub budget: usize,
    pub log: QueryLog,
    pub training_rows: usize,
    pub positive: bool,
}

impl AttackTranscript {
    pub fn summary(&self) -> TranscriptSummary {
        TranscriptSummary {
            kind: self.kind,
            budget: self.budget,
            log: self.log,
            training_rows: self.train_x.rows(),
            positive: self.positive,
        }
    }
}

// ── Defender service ──────────────────────────────────────────────────

/// The proprietary model plus everything needed to serve watermarked CFs.
pub struct DefenderService {
    pub fw: MlpParams,
    pub explainer: CfConfig,
    pub watermark: WatermarkConfig,
    train: TabularDataset,
    mask: Vec<bool>,
}

/// One CF-serving session: the defender's response to a batch of CF queries,
/// with the watermark embedded over every row that will be released.
///
/// Rows `0..n_round1` answer the attacker's direct queries; rows from
/// `n_round1` on (present when duals were requested) answer queries made
/// with the round-1 CFs as inputs.
pub struct CfSession {
    /// inputs whose CFs were generated, row-aligned with the CF sets
    pub inputs_x: Matrix,
    /// proprietary-model scores on `inputs_x`
    pub input_scores: Matrix,
    /// retained unwatermarked CFs; never released
    pub unwm_cfs: Matrix,
    /// released watermarked CFs
    pub wm_cfs: Matrix,
    /// CF training labels: the flip of the thresholded score on the input
    pub cf_labels: Vec<u8>,
    pub theta: WatermarkTheta,
    pub trace: Vec<TraceRow>,
    pub n_round1: usize,
    /// round-1 generation batch (for CF quality metrics)
    pub round1_batch: CfBatch,
}

impl CfSession {
    /// Round-1 batch with the released (watermarked) CFs substituted in,
    /// for original-vs-watermarked quality comparisons.
    pub fn round1_watermarked_batch(&self) -> CfBatch {
        let idx: Vec<usize> = (0..self.n_round1).collect();
        CfBatch {
            counterfactuals: self.wm_cfs.gather_rows(&idx),
            ..self.round1_batch.clone()
        }
    }
}

impl DefenderService {
    pub fn new(
        fw: MlpParams,
        explainer: CfConfig,
        watermark: WatermarkConfig,
        train: TabularDataset,
        mask: Vec<bool>,
    ) -> Self {
        DefenderService { fw, explainer, watermark, train, mask }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn train_data(&self) -> &TabularDataset {
        &self.train
    }

    /// Serve CFs for `attack_x` (and their duals when requested), embedding
    /// one watermark over the full response batch before release.
    pub fn open_session(
        &self,
        attack_x: &Matrix,
        include_dual: bool,
        session_seed: u64,
        dataset_id: &str,
    ) -> Result<CfSession> {
        let scores1 = mlp::predict_proba(&self.fw, attack_x)?;
        let labels1: Vec<u8> = scores1.data().iter().map(|&p| 1 - u8::from(p >= 0.5)).collect();

        let mut explainer = self.explainer.clone();
        explainer.seed = rng::stream(session_seed, "session/explainer1").gen();
        let batch1 = explain::generate_batch(&self.fw, attack_x, &self.mask, &explainer)?;
        let n1 = batch1.n();

        let (inputs_x, input_scores, unwm_cfs, cf_labels) = if include_dual {
            // duals: CFs of the round-1 CFs, batched before release
            let mut explainer2 = self.explainer.clone();
            explainer2.seed = rng::stream(session_seed, "session/explainer2").gen();
            let scores2 = mlp::predict_proba(&self.fw, &batch1.counterfactuals)?;
            let labels2: Vec<u8> =
                scores2.data().iter().map(|&p| 1 - u8::from(p >= 0.5)).collect();
            let batch2 = explain::generate_batch(
                &self.fw,
                &batch1.counterfactuals,
                &self.mask,
                &explainer2,
            )?;
            let inputs = Matrix::concat_rows(&[attack_x, &batch1.counterfactuals])?;
            let scores = Matrix::concat_rows(&[&scores1, &scores2])?;
            let cfs =
                Matrix::concat_rows(&[&batch1.counterfactuals, &batch2.counterfactuals])?;
            let labels: Vec<u8> = labels1.iter().chain(&labels2).copied().collect();
            (inputs, scores, cfs, labels)
        } else {
            (attack_x.clone(), scores1, batch1.counterfactuals.clone(), labels1)
        };

        // training-data sample for the inner problem, one row per pair row
        let n_dt = inputs_x.rows().min(self.train.n());
        let mut dt_stream = rng::stream(session_seed, "session/dt");
        let dt_idx = index_sample(&mut dt_stream, self.train.n(), n_dt).into_vec();
        let train_x = self.train.x.gather_rows(&dt_idx);
        let train_y = Matrix::from_vec(
            dt_idx.len(),
            1,
            dt_idx.iter().map(|&i| f64::from(self.train.y[i])).collect(),
        );

        let mut wm_cfg = self.watermark.clone();
        wm_cfg.seed = session_seed;
        let embed_inputs = EmbedInputs {
            query_x: &inputs_x,
            query_scores: &input_scores,
            cf_x: &unwm_cfs,
            cf_labels: &cf_labels,
            train_x: &train_x,
            train_y: &train_y,
            fw: &self.fw,
            mask: &self.mask,
        };
        let out = watermark::embed(&embed_inputs, &wm_cfg, dataset_id)?;
        let wm_cfs = watermark::apply(&out.theta.theta, &unwm_cfs)?;

        Ok(CfSession {
            inputs_x,
            input_scores,
            unwm_cfs,
            wm_cfs,
            cf_labels,
            theta: out.theta,
            trace: out.trace,
            n_round1: n1,
            round1_batch: batch1,
        })
    }
}

// ── Attacks ───────────────────────────────────────────────────────────

/// Surrogate trained on `(x, F_W(x))` pairs only. Ground-truth negative.
pub fn querying_attack(
    service: &DefenderService,
    rows: &Matrix,
    m: usize,
    cfg: &TrainConfig,
) -> Result<AttackTranscript> {
    if m == 0 {
        return Err(Error::InvalidConfig("querying attack needs a positive budget".into()));
    }
    if m > rows.rows() {
        return Err(Error::InvalidConfig(format!(
            "budget {m} exceeds the {} available attack rows",
            rows.rows()
        )));
    }
    let idx: Vec<usize> = (0..m).collect();
    let train_x = rows.gather_rows(&idx);
    let train_y = mlp::predict_proba(&service.fw, &train_x)?;
    let surrogate = mlp::train(&train_x, &train_y, cfg)?;
    Ok(AttackTranscript {
        kind: AttackKind::Querying,
        budget: m,
        log: QueryLog { prediction_queries: m, cf_queries: 0 },
        train_x,
        train_y,
        surrogate,
        positive: false,
    })
}

/// Surrogate trained on M/2 queried rows plus their M/2 served (watermarked)
/// CFs labeled with the flipped prediction. Ground-truth positive.
pub fn mrce_attack(
    session: &CfSession,
    m: usize,
    cfg: &TrainConfig,
) -> Result<AttackTranscript> {
    if m == 0 || m % 2 != 0 {
        return Err(Error::InvalidConfig(format!("mrce needs an even positive budget, got {m}")));
    }
    let half = m / 2;
    if session.n_round1 < half {
        return Err(Error::InvalidConfig(format!(
            "session served only {} CFs; budget {m} needs {half}",
            session.n_round1
        )));
    }
    let idx: Vec<usize> = (0..half).collect();
    let queried_x = session.inputs_x.gather_rows(&idx);
    let queried_y = session.input_scores.gather_rows(&idx);
    let cf_x = session.wm_cfs.gather_rows(&idx);
    let cf_y = Matrix::from_vec(
        half,
        1,
        idx.iter().map(|&i| f64::from(session.cf_labels[i])).collect(),
    );
    let train_x = Matrix::concat_rows(&[&queried_x, &cf_x])?;
    let train_y = Matrix::concat_rows(&[&queried_y, &cf_y])?;
    let surrogate = mlp::train(&train_x, &train_y, cfg)?;
    Ok(AttackTranscript {
        kind: AttackKind::Mrce,
        budget: m,
        log: QueryLog { prediction_queries: half, cf_queries: half },
        train_x,
        train_y,
        surrogate,
        positive: true,
    })
}

/// Surrogate trained on the served CFs and their duals only (no raw query
/// rows). Both rounds are watermarked by the service. Ground-truth positive.
pub fn dualcf_attack(
    session: &CfSession,
    m: usize,
    cfg: &TrainConfig,
) -> Result<AttackTranscript> {
    if m == 0 || m % 2 != 0 {
        return Err(Error::InvalidConfig(format!("dualcf needs an even positive budget, got {m}")));
    }
    let half = m / 2;
    if session.unwm_cfs.rows() < session.n_round1 * 2 || session.n_round1 < half {
        return Err(Error::InvalidConfig(
            "session was opened without dual CFs or with a smaller budget".into(),
        ));
    }
    let idx1: Vec<usize> = (0..half).collect();
    let idx2: Vec<usize> = (session.n_round1..session.n_round1 + half).collect();
    let cf1 = session.wm_cfs.gather_rows(&idx1);
    let cf2 = session.wm_cfs.gather_rows(&idx2);
    let y1 = Matrix::from_vec(
        half,
        1,
        idx1.iter().map(|&i| f64::from(session.cf_labels[i])).collect(),
    );
    let y2 = Matrix::from_vec(
        half,
        1,
        idx2.iter().map(|&i| f64::from(session.cf_labels[i])).collect(),
    );
    let train_x = Matrix::concat_rows(&[&cf1, &cf2])?;
    let train_y = Matrix::concat_rows(&[&y1, &y2])?;
    let surrogate = mlp::train(&train_x, &train_y, cfg)?;
    Ok(AttackTranscript {
        kind: AttackKind::Dualcf,
        budget: m,
        log: QueryLog { prediction_queries: 0, cf_queries: m },
        train_x,
        train_y,
        surrogate,
        positive: true,
    })
}
