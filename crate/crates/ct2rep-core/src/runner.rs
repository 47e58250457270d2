//! Training, generation, and evaluation drivers shared by the CLI and the
//! acceptance suite.
//!
//! Training follows the published recipe: batch size 1, Adam with the visual
//! extractor in its own learning-rate group, optional StepLR decay, seeded
//! per-epoch shuffling. Epoch permutations are a pure function of
//! (seed, epoch), so resuming from a checkpoint continues bit-identically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, ModelKind};
use crate::config::RunConfig;
use crate::longitudinal::{load_pairs_manifest, PairsEntry};
use crate::metrics::{
    bleu, clinical_efficacy, corpus_bleu, meteor_lite, rouge_l, CeReport, LabelerRules,
    MetricReport, MetricsError,
};
use crate::model::decoder::teacher_forward;
use crate::model::encoder::transformer_encode;
use crate::model::fusion::{embed_prior_report, fuse_prior};
use crate::model::generate::{decode, DecodeContext, DecodeMode};
use crate::model::vision::encode_volume;
use crate::model::{is_visual_param, Forward, ModelError, ModelWeights};
use crate::text::{canonical, decode_tokens, encode_report, tokenize, TextError, TokenSequence, PAD};
use crate::text::Vocabulary;
use crate::tensor::{Adam, AdamHyper, ParamStore, TensorError};
use crate::volume::{
    convert_and_clip, crop_or_pad_center, load_manifest, normalize, resample_to_spacing, Volume3D,
    VolumeError, VolumeMeta,
};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("manifest row {index} ({payload}) has no findings text")]
    MissingFindings { index: usize, payload: String },
    #[error("training set is empty")]
    EmptySet,
    #[error("checkpoint is a {found} model but {requested} was requested")]
    ModeMismatch { found: ModelKind, requested: ModelKind },
    #[error("io error at {path}: {message}")]
    Io { path: String, message: String },
    #[error("prediction/truth ids do not align; missing from predictions: {missing_pred:?}, missing from truth: {missing_truth:?}")]
    IdMismatch {
        missing_pred: Vec<String>,
        missing_truth: Vec<String>,
    },
    #[error("reports file {path}, line {line}: {message}")]
    BadReportsFile {
        path: String,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> RunnerError {
    RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Full preprocessing chain: HU conversion + clip, resample to target
/// spacing, center crop/pad to the model slab, scale to [-1, 1].
pub fn preprocess(raw: &Volume3D, meta: &VolumeMeta, cfg: &RunConfig) -> Result<Volume3D, RunnerError> {
    let hu = convert_and_clip(raw, meta)?;
    let resampled = resample_to_spacing(&hu, cfg.target_spacing())?;
    let cropped = crop_or_pad_center(&resampled, cfg.volume_shape());
    Ok(normalize(&cropped)?)
}

/// One base-model training sample.
pub struct BaseSample {
    pub id: String,
    pub volume: Volume3D,
    pub findings: String,
}

/// One longitudinal training sample.
pub struct PairSample {
    pub id: String,
    pub new_volume: Volume3D,
    pub old_volume: Volume3D,
    pub old_findings: String,
    pub new_findings: String,
}

pub fn payload_stem(payload: &str) -> String {
    Path::new(payload)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| payload.to_string())
}

pub fn load_base_samples(manifest: &Path, cfg: &RunConfig) -> Result<Vec<BaseSample>, RunnerError> {
    let entries = load_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let findings = e.row.findings.clone().ok_or(RunnerError::MissingFindings {
            index: e.index,
            payload: e.row.payload.clone(),
        })?;
        let raw = e.load_volume()?;
        let volume = preprocess(&raw, &e.row.meta(), cfg)?;
        out.push(BaseSample {
            id: payload_stem(&e.row.payload),
            volume,
            findings,
        });
    }
    Ok(out)
}

pub fn load_pair_samples(pairs: &Path, cfg: &RunConfig) -> Result<Vec<PairSample>, RunnerError> {
    let entries: Vec<PairsEntry> = load_pairs_manifest(pairs)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let old_findings = e.row.old.findings.clone().ok_or(RunnerError::MissingFindings {
            index: e.index,
            payload: e.row.old.payload.clone(),
        })?;
        let new_findings = e.row.new.findings.clone().ok_or(RunnerError::MissingFindings {
            index: e.index,
            payload: e.row.new.payload.clone(),
        })?;
        let old_raw = e.load_old()?;
        let new_raw = e.load_new()?;
        out.push(PairSample {
            id: payload_stem(&e.row.new.payload),
            new_volume: preprocess(&new_raw, &e.row.new.meta(), cfg)?,
            old_volume: preprocess(&old_raw, &e.row.old.meta(), cfg)?,
            old_findings,
            new_findings,
        });
    }
    Ok(out)
}

/// A model instance with its optimizer: everything needed to take training
/// steps and decode reports.
pub struct Trainer {
    pub cfg: RunConfig,
    pub kind: ModelKind,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub weights: ModelWeights,
    pub adam: Adam,
    /// When set, the longitudinal pathway is skipped entirely: the model
    /// computes exactly the base forward (the zeroed-priors ablation).
    pub zero_priors: bool,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, vocab: Vocabulary, kind: ModelKind) -> Result<Self, RunnerError> {
        let dims = cfg.dims(vocab.len());
        let patch = cfg.patch();
        let grid = patch.grid_for(cfg.volume_shape())?;
        let mut store = ParamStore::new();
        let weights = ModelWeights::init(
            &mut store,
            &dims,
            patch.patch_len(),
            grid,
            kind == ModelKind::Longitudinal,
            cfg.seed,
        )?;
        let adam = Adam::new(
            &store,
            AdamHyper {
                beta1: cfg.optim.beta1,
                beta2: cfg.optim.beta2,
                eps: cfg.optim.eps,
            },
        );
        Ok(Trainer {
            cfg: cfg.clone(),
            kind,
            vocab,
            store,
            weights,
            adam,
            zero_priors: false,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RunnerError> {
        let mut t = Trainer::new(&ck.config, ck.vocab.clone(), ck.kind)?;
        t.adam = ck.restore_into(&mut t.store)?;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count
    }

    /// Learning rates after StepLR decay for the given epoch index.
    pub fn lrs_at_epoch(&self, epoch: u64) -> (f64, f64) {
        let mut scale = 1.0;
        if let Some(every) = self.cfg.optim.step_lr_every_epochs {
            if every > 0 {
                scale = self.cfg.optim.step_lr_gamma.powi((epoch / every) as i32);
            }
        }
        (self.cfg.optim.lr_visual * scale, self.cfg.optim.lr_other * scale)
    }

    pub fn encode_findings(&self, findings: &str) -> TokenSequence {
        encode_report(findings, &self.vocab)
    }

    fn base_forward(
        &self,
        volume: &Volume3D,
        target: &TokenSequence,
    ) -> Result<(Forward<'_>, crate::tensor::TensorId), RunnerError> {
        let dims = self.cfg.dims(self.vocab.len());
        let patch = self.cfg.patch();
        let mut fw = Forward::new(&self.store);
        let z = encode_volume(&mut fw, volume, &patch, &self.weights.vision, &dims)?;
        let h = transformer_encode(&mut fw, z.id, &self.weights.encoder, &dims)?;
        let loss = teacher_loss(&mut fw, &target.ids, h, None, &self.weights, &dims)?;
        Ok((fw, loss))
    }

    fn long_forward(
        &self,
        sample: &PairSample,
    ) -> Result<(Forward<'_>, crate::tensor::TensorId), RunnerError> {
        let dims = self.cfg.dims(self.vocab.len());
        let patch = self.cfg.patch();
        let r_old = self.encode_findings(&sample.old_findings);
        let r_new = self.encode_findings(&sample.new_findings);
        let mut fw = Forward::new(&self.store);
        let z_new = encode_volume(&mut fw, &sample.new_volume, &patch, &self.weights.vision, &dims)?;
        let h_new = transformer_encode(&mut fw, z_new.id, &self.weights.encoder, &dims)?;
        let fusion_input = if self.zero_priors {
            None
        } else {
            let fusion_w = self.weights.fusion.as_ref().expect("longitudinal weights");
            let z_old =
                encode_volume(&mut fw, &sample.old_volume, &patch, &self.weights.vision, &dims)?;
            let rep = embed_prior_report(&mut fw, &r_old.ids, &self.weights.decoder, fusion_w, &dims)?;
            let feats = fuse_prior(&mut fw, z_old.id, rep, fusion_w, &dims)?;
            Some((fusion_w, feats.h_l))
        };
        let loss = teacher_loss(&mut fw, &r_new.ids, h_new, fusion_input, &self.weights, &dims)?;
        Ok((fw, loss))
    }

    /// Forward-only teacher-forced loss (no gradients, no update).
    pub fn loss_base(&self, volume: &Volume3D, target: &TokenSequence) -> Result<f64, RunnerError> {
        let (fw, loss) = self.base_forward(volume, target)?;
        Ok(fw.tape.scalar(loss))
    }

    pub fn loss_long(&self, sample: &PairSample) -> Result<f64, RunnerError> {
        let (fw, loss) = self.long_forward(sample)?;
        Ok(fw.tape.scalar(loss))
    }

    /// Forward + backward, leaving gradients in the store (no update).
    pub fn accumulate_grads_base(
        &mut self,
        volume: &Volume3D,
        target: &TokenSequence,
    ) -> Result<f64, RunnerError> {
        self.store.zero_grad();
        let (fw, loss) = self.base_forward(volume, target)?;
        let loss_val = fw.tape.scalar(loss);
        let mut tape = fw.into_tape();
        tape.backward(loss)?;
        tape.scatter_grads(&mut self.store);
        Ok(loss_val)
    }

    pub fn accumulate_grads_long(&mut self, sample: &PairSample) -> Result<f64, RunnerError> {
        self.store.zero_grad();
        let (fw, loss) = self.long_forward(sample)?;
        let loss_val = fw.tape.scalar(loss);
        let mut tape = fw.into_tape();
        tape.backward(loss)?;
        tape.scatter_grads(&mut self.store);
        Ok(loss_val)
    }

    /// Teacher-forced step on one (volume, report) sample. Returns the mean
    /// next-token cross-entropy.
    pub fn train_step_base(
        &mut self,
        volume: &Volume3D,
        target: &TokenSequence,
        epoch: u64,
    ) -> Result<f64, RunnerError> {
        let loss_val = self.accumulate_grads_base(volume, target)?;
        self.finish_step(epoch)?;
        Ok(loss_val)
    }

    /// Teacher-forced step on one longitudinal sample.
    pub fn train_step_long(
        &mut self,
        sample: &PairSample,
        epoch: u64,
    ) -> Result<f64, RunnerError> {
        let loss_val = self.accumulate_grads_long(sample)?;
        self.finish_step(epoch)?;
        Ok(loss_val)
    }

    fn finish_step(&mut self, epoch: u64) -> Result<(), RunnerError> {
        // Parameters outside this step's graph carry an explicit zero
        // gradient; the optimizer contract requires every grad populated.
        for (_, p) in self.store.iter_mut() {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.data.len()]);
            }
        }
        let (lr_v, lr_o) = self.lrs_at_epoch(epoch);
        self.adam.step(&mut self.store, |p| {
            if is_visual_param(&p.name) {
                lr_v
            } else {
                lr_o
            }
        })?;
        Ok(())
    }

    /// Decode a report for one preprocessed volume. Features are encoded
    /// once; each decoding step then runs on its own bounded tape.
    pub fn generate_base(&self, volume: &Volume3D, mode: DecodeMode) -> Result<TokenSequence, RunnerError> {
        let dims = self.cfg.dims(self.vocab.len());
        let patch = self.cfg.patch();
        let ctx = {
            let mut fw = Forward::new(&self.store);
            let z = encode_volume(&mut fw, volume, &patch, &self.weights.vision, &dims)?;
            let h = transformer_encode(&mut fw, z.id, &self.weights.encoder, &dims)?;
            DecodeContext::base(fw.tape.data(h).to_vec(), fw.tape.shape(h)[0])
        };
        Ok(decode(&self.store, &ctx, &self.weights.decoder, None, &dims, mode)?)
    }

    /// Decode a report for a new volume conditioned on the prior visit.
    pub fn generate_long(
        &self,
        new_volume: &Volume3D,
        old_volume: &Volume3D,
        old_findings: &str,
        mode: DecodeMode,
    ) -> Result<TokenSequence, RunnerError> {
        let dims = self.cfg.dims(self.vocab.len());
        let patch = self.cfg.patch();
        let r_old = self.encode_findings(old_findings);
        let mut fw = Forward::new(&self.store);
        let z_new = encode_volume(&mut fw, new_volume, &patch, &self.weights.vision, &dims)?;
        let h_new = transformer_encode(&mut fw, z_new.id, &self.weights.encoder, &dims)?;
        let h_data = fw.tape.data(h_new).to_vec();
        let h_rows = fw.tape.shape(h_new)[0];
        let (ctx, fusion_w) = if self.zero_priors {
            (DecodeContext::base(h_data, h_rows), None)
        } else {
            let fusion_w = self.weights.fusion.as_ref().expect("longitudinal weights");
            let z_old = encode_volume(&mut fw, old_volume, &patch, &self.weights.vision, &dims)?;
            let rep = embed_prior_report(&mut fw, &r_old.ids, &self.weights.decoder, fusion_w, &dims)?;
            let feats = fuse_prior(&mut fw, z_old.id, rep, fusion_w, &dims)?;
            let h_l = fw.tape.data(feats.h_l).to_vec();
            let h_l_rows = fw.tape.shape(feats.h_l)[0];
            (
                DecodeContext::longitudinal(h_data, h_rows, h_l, h_l_rows),
                Some(fusion_w),
            )
        };
        drop(fw);
        Ok(decode(&self.store, &ctx, &self.weights.decoder, fusion_w, &dims, mode)?)
    }

    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint::capture(&self.cfg, self.kind, step, &self.vocab, &self.store, &self.adam)
    }
}

/// Shift a token sequence into (input prefix, next-token targets) and take
/// the masked mean cross-entropy. PAD positions are excluded from the mean.
fn teacher_loss(
    fw: &mut Forward,
    ids: &[u32],
    h: crate::tensor::TensorId,
    fusion: Option<(&crate::model::FusionWeights, crate::tensor::TensorId)>,
    weights: &ModelWeights,
    dims: &crate::model::ModelDims,
) -> Result<crate::tensor::TensorId, RunnerError> {
    let input = &ids[..ids.len() - 1];
    let targets: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
    let mask: Vec<bool> = ids[1..].iter().map(|&t| t != PAD).collect();
    let logits = teacher_forward(fw, input, h, &weights.decoder, fusion, dims)?;
    Ok(fw.tape.cross_entropy(logits, &targets, &mask)?)
}

// ── Training loop ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub mode: ModelKind,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub zero_priors: bool,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: u64,
    pub final_loss: f64,
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub losses: Vec<f64>,
}

/// Deterministic sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from_u64(seed).derive(0xE90C ^ epoch);
    rng.shuffle(&mut order);
    order
}

enum SampleSet {
    Base(Vec<BaseSample>),
    Pairs(Vec<PairSample>),
}

impl SampleSet {
    fn len(&self) -> usize {
        match self {
            SampleSet::Base(v) => v.len(),
            SampleSet::Pairs(v) => v.len(),
        }
    }
}

/// Train from a manifest, writing a CSV loss log and checkpoints under
/// `out_dir`. With `resume`, continues an interrupted run bit-identically.
pub fn run_train(cfg: &RunConfig, manifest: &Path, opts: &TrainOptions) -> Result<TrainReport, RunnerError> {
    fs::create_dir_all(&opts.out_dir).map_err(|e| io_err(&opts.out_dir, e))?;

    let samples = match opts.mode {
        ModelKind::Base => SampleSet::Base(load_base_samples(manifest, cfg)?),
        ModelKind::Longitudinal => SampleSet::Pairs(load_pair_samples(manifest, cfg)?),
    };
    if samples.len() == 0 {
        return Err(RunnerError::EmptySet);
    }

    // Vocabulary from the training findings (old and new sides for pairs).
    let corpus: Vec<String> = match &samples {
        SampleSet::Base(v) => v.iter().map(|s| s.findings.clone()).collect(),
        SampleSet::Pairs(v) => v
            .iter()
            .flat_map(|s| [s.old_findings.clone(), s.new_findings.clone()])
            .collect(),
    };

    let mut trainer = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.kind != opts.mode {
                return Err(RunnerError::ModeMismatch {
                    found: ck.kind,
                    requested: opts.mode,
                });
            }
            if ck.config.model != cfg.model {
                return Err(RunnerError::Checkpoint(CheckpointError::Corrupt {
                    message: "resume config changes the model architecture".into(),
                }));
            }
            let mut t = Trainer::from_checkpoint(&ck)?;
            // The caller's run settings (epochs, caps, scheduler) govern the
            // continued run and its checkpoints.
            t.cfg = cfg.clone();
            t
        }
        None => {
            let vocab = Vocabulary::build(&corpus, cfg.model.vocab_min_count)?;
            Trainer::new(cfg, vocab, opts.mode)?
        }
    };
    trainer.zero_priors = opts.zero_priors;

    let n = samples.len() as u64;
    let total_steps = match cfg.optim.max_steps {
        Some(cap) => cap.min(cfg.optim.epochs * n),
        None => cfg.optim.epochs * n,
    };

    // The vocabulary also ships inside the checkpoint; the JSON file is the
    // standalone interchange form (token array in id order).
    let vocab_path = opts.out_dir.join("vocab.json");
    fs::write(&vocab_path, trainer.vocab.to_json()).map_err(|e| io_err(&vocab_path, e))?;

    let loss_log_path = opts.out_dir.join("loss_log.csv");
    let mut log = if trainer.step_count() > 0 && loss_log_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&loss_log_path)
            .map_err(|e| io_err(&loss_log_path, e))?
    } else {
        let mut f = fs::File::create(&loss_log_path).map_err(|e| io_err(&loss_log_path, e))?;
        writeln!(f, "step,epoch,sample,loss,lr_visual,lr_other").map_err(|e| io_err(&loss_log_path, e))?;
        f
    };

    let checkpoint_path = opts.out_dir.join("checkpoint.ct2rep");
    let mut losses = Vec::new();
    let mut step = trainer.step_count();
    while step < total_steps {
        let epoch = step / n;
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let idx_in_epoch = (step % n) as usize;
        let sample_idx = order[idx_in_epoch];
        let loss = match &samples {
            SampleSet::Base(v) => {
                let s = &v[sample_idx];
                let target = trainer.encode_findings(&s.findings);
                trainer.train_step_base(&s.volume, &target, epoch)?
            }
            SampleSet::Pairs(v) => trainer.train_step_long(&v[sample_idx], epoch)?,
        };
        step += 1;
        losses.push(loss);
        let (lr_v, lr_o) = trainer.lrs_at_epoch(epoch);
        writeln!(log, "{step},{epoch},{sample_idx},{loss},{lr_v},{lr_o}")
            .map_err(|e| io_err(&loss_log_path, e))?;
        if !opts.quiet && (step % 50 == 0 || step == total_steps) {
            println!("step {step}/{total_steps} loss {loss:.4}");
        }
        if let Some(every) = cfg.optim.checkpoint_every_steps {
            if every > 0 && step % every == 0 && step < total_steps {
                trainer
                    .checkpoint(step)
                    .save(&opts.out_dir.join(format!("checkpoint_step{step}.ct2rep")))?;
            }
        }
    }
    trainer.checkpoint(step).save(&checkpoint_path)?;
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok(TrainReport {
        steps: step,
        final_loss,
        checkpoint_path,
        loss_log_path,
        losses,
    })
}

// ── Generation over manifests ───────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub report: String,
}

/// Decode one report per manifest entry into a JSON-lines file of
/// `{id, report}` rows. The manifest must match the checkpoint's kind:
/// volume rows for base, pair rows for longitudinal.
pub fn run_generate(
    checkpoint: &Path,
    manifest: &Path,
    out_path: &Path,
    requested_mode: Option<ModelKind>,
) -> Result<Vec<ReportRow>, RunnerError> {
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(mode) = requested_mode {
        if mode != ck.kind {
            return Err(RunnerError::ModeMismatch {
                found: ck.kind,
                requested: mode,
            });
        }
    }
    let trainer = Trainer::from_checkpoint(&ck)?;
    let mode = ck.config.decode;
    let mut rows = Vec::new();
    match ck.kind {
        ModelKind::Base => {
            for s in load_base_samples(manifest, &ck.config)? {
                let seq = trainer.generate_base(&s.volume, mode)?;
                rows.push(ReportRow {
                    id: s.id,
                    report: decode_tokens(&seq, &trainer.vocab)?,
                });
            }
        }
        ModelKind::Longitudinal => {
            for s in load_pair_samples(manifest, &ck.config)? {
                let seq =
                    trainer.generate_long(&s.new_volume, &s.old_volume, &s.old_findings, mode)?;
                rows.push(ReportRow {
                    id: s.id,
                    report: decode_tokens(&seq, &trainer.vocab)?,
                });
            }
        }
    }
    let mut out = String::new();
    for row in &rows {
        out.push_str(&serde_json::to_string(row).expect("report row serializes"));
        out.push('\n');
    }
    fs::write(out_path, out).map_err(|e| io_err(out_path, e))?;
    Ok(rows)
}

// ── Evaluation ──────────────────────────────────────────────────────

/// Reports file parser. Accepts `{id, report}` rows, volume-manifest rows
/// (id from the payload stem, report from findings), or pairs-manifest rows
/// (the new visit's findings).
pub fn load_reports(path: &Path) -> Result<Vec<ReportRow>, RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(row) = serde_json::from_str::<ReportRow>(line) {
            rows.push(row);
            continue;
        }
        if let Ok(pair) = serde_json::from_str::<crate::longitudinal::PairsRow>(line) {
            if let Some(findings) = pair.new.findings.clone() {
                rows.push(ReportRow {
                    id: payload_stem(&pair.new.payload),
                    report: findings,
                });
                continue;
            }
        }
        if let Ok(vol) = serde_json::from_str::<crate::volume::ManifestRow>(line) {
            if let Some(findings) = vol.findings.clone() {
                rows.push(ReportRow {
                    id: payload_stem(&vol.payload),
                    report: findings,
                });
                continue;
            }
        }
        return Err(RunnerError::BadReportsFile {
            path: path.display().to_string(),
            line: lineno + 1,
            message: "not a report/manifest row with findings".into(),
        });
    }
    Ok(rows)
}

/// Table-style evaluation: corpus NLG metrics, sentence-level BLEU means,
/// and the 18-label clinical-efficacy table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: MetricReport,
    pub sentence_bleu: [f64; 4],
    pub ce: CeReport,
    pub pairs: usize,
}

pub fn evaluate_reports(
    preds: &[ReportRow],
    truths: &[ReportRow],
    rules: &LabelerRules,
) -> Result<EvalReport, RunnerError> {
    // Align by id; both sides must cover the same set.
    let mut truth_map = std::collections::BTreeMap::new();
    for t in truths {
        truth_map.insert(t.id.clone(), t.report.clone());
    }
    let pred_ids: std::collections::BTreeSet<String> =
        preds.iter().map(|p| p.id.clone()).collect();
    let truth_ids: std::collections::BTreeSet<String> = truth_map.keys().cloned().collect();
    if pred_ids != truth_ids {
        return Err(RunnerError::IdMismatch {
            missing_pred: truth_ids.difference(&pred_ids).cloned().collect(),
            missing_truth: pred_ids.difference(&truth_ids).cloned().collect(),
        });
    }

    let mut ordered: Vec<(String, String, String)> = preds
        .iter()
        .map(|p| (p.id.clone(), p.report.clone(), truth_map[&p.id].clone()))
        .collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));

    let token_pairs: Vec<(Vec<String>, Vec<String>)> = ordered
        .iter()
        .map(|(_, pred, truth)| (tokenize(pred), tokenize(truth)))
        .collect();

    let n = token_pairs.len().max(1) as f64;
    let mut sentence = [0.0f64; 4];
    let mut meteor_sum = 0.0;
    let mut rouge_sum = 0.0;
    for (cand, reference) in &token_pairs {
        for (k, slot) in sentence.iter_mut().enumerate() {
            *slot += bleu(cand, reference, k + 1);
        }
        meteor_sum += meteor_lite(cand, reference);
        rouge_sum += rouge_l(cand, reference);
    }
    for slot in sentence.iter_mut() {
        *slot /= n;
    }

    let pred_texts: Vec<String> = ordered.iter().map(|(_, p, _)| canonical(p)).collect();
    let truth_texts: Vec<String> = ordered.iter().map(|(_, _, t)| canonical(t)).collect();
    let ce = clinical_efficacy(&pred_texts, &truth_texts, rules)?;

    let corpus = MetricReport {
        bleu1: corpus_bleu(&token_pairs, 1),
        bleu2: corpus_bleu(&token_pairs, 2),
        bleu3: corpus_bleu(&token_pairs, 3),
        bleu4: corpus_bleu(&token_pairs, 4),
        meteor_lite: meteor_sum / n,
        rouge_l: rouge_sum / n,
        precision: ce.mean_precision,
        recall: ce.mean_recall,
        f1: ce.mean_f1,
    };
    Ok(EvalReport {
        corpus,
        sentence_bleu: sentence,
        ce,
        pairs: token_pairs.len(),
    })
}

pub fn run_eval(pred_path: &Path, truth_path: &Path, rules: &LabelerRules) -> Result<EvalReport, RunnerError> {
    let preds = load_reports(pred_path)?;
    let truths = load_reports(truth_path)?;
    evaluate_reports(&preds, &truths, rules)
}
