//! End-to-end evaluation protocol.
//!
//! One evaluation run trains the proprietary model on a training split,
//! draws bootstrap subsets from the test split, and exposes each subset to
//! every configured attack. One watermark is embedded per subset (the
//! defender's response to that attack session); each extracted model is then
//! verified with the paired t-test and scored against its ground truth
//! (CF-using attacks are positives, the querying attack is a negative).
//! Confusion counts, the F1 score, CF quality before/after watermarking,
//! and every per-run verification record land in a machine-readable report.
//!
//! Bootstrap subsets run in a worker pool; every worker derives its own
//! RNG streams from (master seed, subset index, stage), and aggregation is
//! an index-ordered reduce, so reports are byte-identical across reruns.

use crate::data::{self, TabularDataset};
use crate::error::{Error, Result};
use crate::explain::{self, CfConfig};
use crate::extract::{self, AttackKind, AttackTranscript, CfSession, DefenderService, TranscriptSummary};
use crate::mlp::{self, MlpParams, TrainConfig};
use crate::rng;
use crate::verify::{self, VerificationResult};
use crate::watermark::{self, LossForm, WatermarkConfig};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

// ── Configuration ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// bundled breast-tumor diagnostic table
    Cancer,
    /// synthetic two-blob data in the unit square
    Blobs {
        #[serde(default = "default_blob_n")]
        n: usize,
        #[serde(default = "default_blob_std")]
        std_dev: f64,
    },
    /// generic CSV + schema ingestion
    Csv { path: String, schema: String },
}

fn default_blob_n() -> usize {
    400
}

fn default_blob_std() -> f64 {
    0.12
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapSpec {
    /// number of subsets B
    pub count: usize,
    /// subset size M (the attack budget)
    pub size: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerifySpec {
    pub tau: f64,
    pub alpha: f64,
    /// cap on the number of verification pairs
    pub max_n: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        VerifySpec { tau: 0.05, alpha: 0.05, max_n: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessSpec {
    pub finetune_epochs: Vec<usize>,
    pub finetune_lr: f64,
    pub prune_rates: Vec<f64>,
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        RobustnessSpec {
            finetune_epochs: vec![0, 5, 10],
            finetune_lr: 1e-3,
            prune_rates: vec![0.0, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// proprietary-model training
    pub model: TrainConfig,
    /// attacker surrogate training
    pub surrogate: TrainConfig,
    pub explainer: CfConfig,
    pub watermark: WatermarkConfig,
    pub attacks: Vec<AttackKind>,
    pub bootstrap: BootstrapSpec,
    #[serde(default)]
    pub verification: VerifySpec,
    #[serde(default)]
    pub robustness: RobustnessSpec,
    pub master_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::InvalidConfig("at least one attack must be configured".into()));
        }
        if self.bootstrap.count == 0 || self.bootstrap.size == 0 {
            return Err(Error::InvalidConfig("bootstrap count and size must be positive".into()));
        }
        if self.attacks.iter().any(AttackKind::uses_cfs) && self.bootstrap.size % 2 != 0 {
            return Err(Error::InvalidConfig(
                "CF-based attacks split the budget in half; bootstrap size must be even".into(),
            ));
        }
        self.explainer.validate()?;
        self.watermark.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    fn dataset_id(&self) -> String {
        match &self.dataset {
            DatasetSpec::Cancer => "cancer".into(),
            DatasetSpec::Blobs { n, std_dev } => format!("blobs(n={n},std={std_dev})"),
            DatasetSpec::Csv { path, .. } => format!("csv:{path}"),
        }
    }
}

/// Materialize the dataset as (train, test) in transformed feature space.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(TabularDataset, TabularDataset)> {
    match &cfg.dataset {
        DatasetSpec::Cancer => {
            let (raw, schema) = data::builtin_cancer();
            data::fit_transform(&raw, &schema, cfg.master_seed, cfg.test_fraction)
        }
        DatasetSpec::Blobs { n, std_dev } => {
            let ds = data::synthetic_blobs(*n, *std_dev, cfg.master_seed);
            Ok(ds.split(cfg.test_fraction, cfg.master_seed))
        }
        DatasetSpec::Csv { path, schema } => {
            let schema = data::Schema::load(Path::new(schema))?;
            let raw = data::load_csv(Path::new(path), &schema)?;
            data::fit_transform(&raw, &schema, cfg.master_seed, cfg.test_fraction)
        }
    }
}

// ── Report types ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: bool, flagged: bool) {
        match (truth, flagged) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn tpr(&self) -> f64 {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        let denom = self.fp + self.tn;
        if denom == 0 {
            0.0
        } else {
            self.fp as f64 / denom as f64
        }
    }
}

/// One verification record: subset x attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub subset: usize,
    pub attack: AttackKind,
    pub ground_truth_positive: bool,
    pub verification: VerificationResult,
    /// label agreement between the suspect and the proprietary model on the
    /// full test split
    pub agreement: f64,
    /// poison-form confidence gap of the suspect on the pair set
    pub poison_loss: f64,
    pub transcript: TranscriptSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityTable {
    pub validity_original: f64,
    pub validity_watermarked: f64,
    /// percentage decrease from original to watermarked
    pub validity_change_pct: f64,
    pub proximity_original: f64,
    pub proximity_watermarked: f64,
    /// percentage increase from original to watermarked
    pub proximity_change_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: AttackKind,
    pub runs: usize,
    pub confusion: Confusion,
    pub positive_rate: f64,
    pub mean_poison_loss: f64,
    pub mean_agreement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub dataset_id: String,
    pub confusion: Confusion,
    pub f1: f64,
    pub per_attack: Vec<AttackSummary>,
    pub cf_quality: QualityTable,
    pub runs: Vec<RunRecord>,
    /// stage failures (subset index and error); empty on a clean run
    pub failures: Vec<String>,
}

// ── Evaluation ────────────────────────────────────────────────────────

/// Per-subset artifacts kept alive for sweeps that re-derive suspects.
pub struct SubsetOutcome {
    pub records: Vec<RunRecord>,
    pub validity_original: f64,
    pub validity_watermarked: f64,
    pub proximity_original: f64,
    pub proximity_watermarked: f64,
    pub positives: Vec<(AttackKind, AttackTranscript)>,
    pub session: CfSession,
}

fn derive_seed(master: u64, purpose: &str) -> u64 {
    rng::stream(master, purpose).gen()
}

fn run_subset(
    cfg: &ExperimentConfig,
    service: &DefenderService,
    test: &TabularDataset,
    subset_idx: usize,
    rows: &[usize],
) -> Result<SubsetOutcome> {
    let m = cfg.bootstrap.size;
    let subset_x = test.x.gather_rows(rows);
    let needs_cfs = cfg.attacks.iter().any(AttackKind::uses_cfs);
    let include_dual = cfg.attacks.contains(&AttackKind::Dualcf);

    let session = if needs_cfs {
        let half: Vec<usize> = (0..m / 2).collect();
        let half_x = subset_x.gather_rows(&half);
        let session_seed = derive_seed(cfg.master_seed, &format!("subset/{subset_idx}/session"));
        service.open_session(&half_x, include_dual, session_seed, &cfg.dataset_id())?
    } else {
        // no CF-based attack configured: an empty session placeholder is
        // still needed for verification pairs, so serve CFs for the half
        // anyway (the defender would, on demand)
        let half: Vec<usize> = (0..m / 2).collect();
        let half_x = subset_x.gather_rows(&half);
        let session_seed = derive_seed(cfg.master_seed, &format!("subset/{subset_idx}/session"));
        service.open_session(&half_x, false, session_seed, &cfg.dataset_id())?
    };

    let mut records = Vec::with_capacity(cfg.attacks.len());
    let mut positives = Vec::new();
    for attack in &cfg.attacks {
        let mut train_cfg = cfg.surrogate.clone();
        train_cfg.seed =
            derive_seed(cfg.master_seed, &format!("subset/{subset_idx}/{}/train", attack.name()));
        let transcript = match attack {
            AttackKind::Querying => extract::querying_attack(service, &subset_x, m, &train_cfg)?,
            AttackKind::Mrce => extract::mrce_attack(&session, m, &train_cfg)?,
            AttackKind::Dualcf => extract::dualcf_attack(&session, m, &train_cfg)?,
        };
        let record = verify_transcript(cfg, service, test, &session, subset_idx, &transcript)?;
        if transcript.positive {
            positives.push((*attack, transcript));
        }
        records.push(record);
    }

    let wm_batch = session.round1_watermarked_batch();
    Ok(SubsetOutcome {
        validity_original: explain::validity(&session.round1_batch, &service.fw)?,
        validity_watermarked: explain::validity(&wm_batch, &service.fw)?,
        proximity_original: explain::proximity(&session.round1_batch),
        proximity_watermarked: explain::proximity(&wm_batch),
        records,
        positives,
        session,
    })
}

fn verify_transcript(
    cfg: &ExperimentConfig,
    service: &DefenderService,
    test: &TabularDataset,
    session: &CfSession,
    subset_idx: usize,
    transcript: &AttackTranscript,
) -> Result<RunRecord> {
    let verify_seed = derive_seed(
        cfg.master_seed,
        &format!("subset/{subset_idx}/{}/verify", transcript.kind.name()),
    );
    let verification = verify::verify_ownership(
        &transcript.surrogate,
        &session.wm_cfs,
        &session.unwm_cfs,
        &session.cf_labels,
        cfg.verification.tau,
        cfg.verification.alpha,
        cfg.verification.max_n,
        verify_seed,
    )?;
    let agreement = mlp::agreement(&transcript.surrogate, &service.fw, &test.x)?;
    let poison_loss = watermark::poison_loss_value(
        &transcript.surrogate,
        &session.unwm_cfs,
        &session.theta.theta,
        &session.cf_labels,
        cfg.watermark.poison_form,
    )?;
    Ok(RunRecord {
        subset: subset_idx,
        attack: transcript.kind,
        ground_truth_positive: transcript.positive,
        verification,
        agreement,
        poison_loss,
        transcript: transcript.summary(),
    })
}

fn summarize(cfg: &ExperimentConfig, outcomes: Vec<(usize, Result<SubsetOutcome>)>) -> (Report, Vec<SubsetOutcome>) {
    let mut confusion = Confusion::default();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut kept = Vec::new();
    let mut quality_acc = [0.0f64; 4];
    let mut quality_n = 0usize;

    for (idx, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                for r in &o.records {
                    confusion.add(r.ground_truth_positive, r.verification.is_positive());
                }
                runs.extend(o.records.clone());
                quality_acc[0] += o.validity_original;
                quality_acc[1] += o.validity_watermarked;
                quality_acc[2] += o.proximity_original;
                quality_acc[3] += o.proximity_watermarked;
                quality_n += 1;
                kept.push(o);
            }
            Err(e) => failures.push(format!("subset {idx}: {e}")),
        }
    }

    let qn = quality_n.max(1) as f64;
    let (vo, vw, po, pw) =
        (quality_acc[0] / qn, quality_acc[1] / qn, quality_acc[2] / qn, quality_acc[3] / qn);
    let pct = |old: f64, new: f64, increase: bool| {
        if old == 0.0 {
            0.0
        } else if increase {
            (new - old) / old * 100.0
        } else {
            (old - new) / old * 100.0
        }
    };

    let per_attack = cfg
        .attacks
        .iter()
        .map(|&attack| {
            let rows: Vec<&RunRecord> = runs.iter().filter(|r| r.attack == attack).collect();
            let mut c = Confusion::default();
            let mut poison = 0.0;
            let mut agreement = 0.0;
            let mut flagged = 0usize;
            for r in &rows {
                c.add(r.ground_truth_positive, r.verification.is_positive());
                poison += r.poison_loss;
                agreement += r.agreement;
                flagged += usize::from(r.verification.is_positive());
            }
            let n = rows.len().max(1) as f64;
            AttackSummary {
                attack,
                runs: rows.len(),
                confusion: c,
                positive_rate: flagged as f64 / n,
                mean_poison_loss: poison / n,
                mean_agreement: agreement / n,
            }
        })
        .collect();

    let report = Report {
        config_hash: cfg.config_hash(),
        dataset_id: cfg.dataset_id(),
        f1: confusion.f1(),
        confusion,
        per_attack,
        cf_quality: QualityTable {
            validity_original: vo,
            validity_watermarked: vw,
            validity_change_pct: pct(vo, vw, false),
            proximity_original: po,
            proximity_watermarked: pw,
            proximity_change_pct: pct(po, pw, true),
        },
        runs,
        failures,
    };
    (report, kept)
}

/// Run the full protocol and keep the per-subset artifacts for sweeps.
pub fn run_evaluation_detailed(
    cfg: &ExperimentConfig,
) -> Result<(Report, Vec<SubsetOutcome>, DefenderService, TabularDataset)> {
    cfg.validate()?;
    let (train, test) = load_dataset(cfg)?;
    let mask = train.immutable_mask();

    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = derive_seed(cfg.master_seed, "fw/train");
    let fw = mlp::train(&train.x, &train.y_matrix(), &model_cfg)?;

    let pool = data::bootstrap(&test, cfg.bootstrap.count, cfg.bootstrap.size, cfg.master_seed)?;
    let service =
        DefenderService::new(fw, cfg.explainer.clone(), cfg.watermark.clone(), train, mask);

    let outcomes: Vec<(usize, Result<SubsetOutcome>)> = pool
        .subsets
        .par_iter()
        .enumerate()
        .map(|(idx, rows)| (idx, run_subset(cfg, &service, &test, idx, rows)))
        .collect();

    let (report, kept) = summarize(cfg, outcomes);
    Ok((report, kept, service, test))
}

/// Run the full protocol. Deterministic given the config and master seed.
pub fn run_evaluation(cfg: &ExperimentConfig) -> Result<Report> {
    Ok(run_evaluation_detailed(cfg)?.0)
}

// ── Loss-function ablation ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCell {
    pub poison_form: LossForm,
    pub validity_form: LossForm,
    pub f1: f64,
    pub validity_change_pct: f64,
    pub proximity_change_pct: f64,
}

/// 3x3 grid over poison x validity functional forms.
pub fn run_ablation_losses(cfg: &ExperimentConfig) -> Result<Vec<LossCell>> {
    let forms = [LossForm::LogDiff, LossForm::Kl, LossForm::Residual];
    let mut cells = Vec::with_capacity(9);
    for poison_form in forms {
        for validity_form in forms {
            let mut variant = cfg.clone();
            variant.watermark.poison_form = poison_form;
            variant.watermark.validity_form = validity_form;
            let report = run_evaluation(&variant)?;
            cells.push(LossCell {
                poison_form,
                validity_form,
                f1: report.f1,
                validity_change_pct: report.cf_quality.validity_change_pct,
                proximity_change_pct: report.cf_quality.proximity_change_pct,
            });
        }
    }
    Ok(cells)
}

// ── Regularization ablation ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegCell {
    pub lambda_reg: f64,
    pub fp_rate: f64,
    pub tp_rate: f64,
    pub poison_by_attack: Vec<(AttackKind, f64)>,
}

/// Re-run the evaluation at each regularization weight, tracking the false
/// positive rate and the per-attack poison loss.
pub fn run_ablation_regularization(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
) -> Result<Vec<RegCell>> {
    let mut cells = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut variant = cfg.clone();
        variant.watermark.lambda_reg = lambda;
        let report = run_evaluation(&variant)?;
        let poison_by_attack = report
            .per_attack
            .iter()
            .map(|s| (s.attack, s.mean_poison_loss))
            .collect();
        cells.push(RegCell {
            lambda_reg: lambda,
            fp_rate: report.confusion.fpr(),
            tp_rate: report.confusion.tpr(),
            poison_by_attack,
        });
    }
    Ok(cells)
}

// ── Robustness sweeps ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessPoint {
    /// sweep parameter: fine-tune epochs or prune rate
    pub parameter: f64,
    pub tpr: f64,
    pub mean_agreement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub finetune: Vec<RobustnessPoint>,
    pub prune: Vec<RobustnessPoint>,
}

/// Re-derive suspects from the positive transcripts under fine-tuning and
/// pruning, then re-verify.
pub fn run_robustness(cfg: &ExperimentConfig) -> Result<RobustnessReport> {
    let (_, outcomes, service, test) = run_evaluation_detailed(cfg)?;

    let evaluate = |transform: &dyn Fn(&AttackTranscript, usize) -> Result<MlpParams>|
     -> Result<RobustnessPoint> {
        let mut flagged = 0usize;
        let mut total = 0usize;
        let mut agreement = 0.0;
        for outcome in &outcomes {
            for (k, (_, transcript)) in outcome.positives.iter().enumerate() {
                let suspect = transform(transcript, k)?;
                let verify_seed =
                    derive_seed(cfg.master_seed, &format!("robust/{total}/verify"));
                let v = verify::verify_ownership(
                    &suspect,
                    &outcome.session.wm_cfs,
                    &outcome.session.unwm_cfs,
                    &outcome.session.cf_labels,
                    cfg.verification.tau,
                    cfg.verification.alpha,
                    cfg.verification.max_n,
                    verify_seed,
                )?;
                flagged += usize::from(v.is_positive());
                agreement += mlp::agreement(&suspect, &service.fw, &test.x)?;
                total += 1;
            }
        }
        let n = total.max(1) as f64;
        Ok(RobustnessPoint { parameter: 0.0, tpr: flagged as f64 / n, mean_agreement: agreement / n })
    };

    let mut finetune = Vec::new();
    for &epochs in &cfg.robustness.finetune_epochs {
        let seed = derive_seed(cfg.master_seed, &format!("robust/ft/{epochs}"));
        let mut point = evaluate(&|t: &AttackTranscript, _k| {
            mlp::finetune(&t.surrogate, &t.train_x, &t.train_y, epochs, cfg.robustness.finetune_lr, seed)
        })?;
        point.parameter = epochs as f64;
        finetune.push(point);
    }

    let mut prune = Vec::new();
    for &rate in &cfg.robustness.prune_rates {
        let mut point = evaluate(&|t: &AttackTranscript, _k| mlp::prune(&t.surrogate, rate))?;
        point.parameter = rate;
        prune.push(point);
    }

    Ok(RobustnessReport { finetune, prune })
}

// ── Emission ──────────────────────────────────────────────────────────

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write report.json, tables.csv, runs.jsonl, and the config snapshot.
pub fn emit_report(report: &Report, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write_file(&dir.join("config_snapshot.json"), &serde_json::to_string_pretty(cfg)?)?;

    let mut runs = String::new();
    for r in &report.runs {
        runs.push_str(&serde_json::to_string(r)?);
        runs.push('\n');
    }
    write_file(&dir.join("runs.jsonl"), &runs)?;

    let q = &report.cf_quality;
    let c = &report.confusion;
    let tables = format!(
        "metric,value\nf1,{:?}\ntp,{}\nfp,{}\ntn,{}\nfn,{}\nvalidity_original,{:?}\nvalidity_watermarked,{:?}\nvalidity_change_pct,{:?}\nproximity_original,{:?}\nproximity_watermarked,{:?}\nproximity_change_pct,{:?}\n",
        report.f1,
        c.tp,
        c.fp,
        c.tn,
        c.fn_,
        q.validity_original,
        q.validity_watermarked,
        q.validity_change_pct,
        q.proximity_original,
        q.proximity_watermarked,
        q.proximity_change_pct,
    );
    write_file(&dir.join("tables.csv"), &tables)?;
    Ok(())
}
