//! Fine-tuning and evaluation on a transfer corpus: task recognition from
//! the pooled video embedding, step recognition from layer-1 clip outputs,
//! and step forecasting from a masked prefix.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, VideoRecord};
use crate::error::{PivotError, Result};
use crate::neural::checkpoint::{self, write_atomic, ValueWidth};
use crate::neural::mlp::Mlp;
use crate::neural::ops;
use crate::neural::params::{v1, v1_mut, ParamSet};
use crate::neural::{AdamConfig, AdamState, Encoder, ModelConfig, PackedInput, PivotModel, Segment};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamTask {
    TaskRecognition,
    StepRecognition,
    StepForecasting,
}

impl DownstreamTask {
    pub const ALL: [DownstreamTask; 3] = [
        DownstreamTask::StepForecasting,
        DownstreamTask::StepRecognition,
        DownstreamTask::TaskRecognition,
    ];

    /// Two-letter column name.
    pub fn short(self) -> &'static str {
        match self {
            DownstreamTask::TaskRecognition => "TR",
            DownstreamTask::StepRecognition => "SR",
            DownstreamTask::StepForecasting => "SF",
        }
    }

    pub fn num_classes(self, bundle: &CorpusBundle) -> usize {
        match self {
            DownstreamTask::TaskRecognition => bundle.tasks.len(),
            _ => bundle.steps.len(),
        }
    }
}

impl fmt::Display for DownstreamTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short().to_lowercase())
    }
}

impl FromStr for DownstreamTask {
    type Err = PivotError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tr" | "task_recognition" => Ok(DownstreamTask::TaskRecognition),
            "sr" | "step_recognition" => Ok(DownstreamTask::StepRecognition),
            "sf" | "step_forecasting" => Ok(DownstreamTask::StepForecasting),
            other => Err(PivotError::Validation(format!(
                "unknown downstream task {other:?} (expected tr, sr or sf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub task: DownstreamTask,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Train only the head (and mask vector); the encoder stays fixed.
    pub freeze_encoder: bool,
    /// Forecasting sees clips after the masked one as well.
    pub bidirectional: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: DownstreamTask::TaskRecognition,
            batch_size: 16,
            epochs: 100,
            adam: AdamConfig::default(),
            seed: 0,
            freeze_encoder: false,
            bidirectional: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PivotError::Validation("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// An encoder with a freshly sized head for one downstream task.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedModel {
    pub task: DownstreamTask,
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: Mlp,
    /// Stands in for the clip being forecast; only used by forecasting.
    pub mask: Array1<f64>,
    pub bidirectional: bool,
}

impl ParamSet for TunedModel {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.encoder.blocks(&mut out);
        self.head.blocks("head", &mut out);
        if self.task == DownstreamTask::StepForecasting {
            out.push(v1("mask", "vec", &self.mask));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.encoder.blocks_mut(&mut out);
        self.head.blocks_mut("head", &mut out);
        if self.task == DownstreamTask::StepForecasting {
            out.push(v1_mut("mask", "vec", &mut self.mask));
        }
        out
    }
}

impl TunedModel {
    /// Takes the encoder of `pretrained` and attaches a new head.
    pub fn from_pretrained(
        pretrained: &PivotModel,
        task: DownstreamTask,
        num_classes: usize,
        seed: u64,
        bidirectional: bool,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(PivotError::Validation(format!("{task}: empty label space")));
        }
        let config = pretrained.config.clone();
        let mut rng = util::stream(&[seed, 0x4EAD, task as u64]);
        let head = Mlp::new(&mut rng, config.dim, config.head_hidden, num_classes);
        Ok(TunedModel {
            task,
            encoder: pretrained.encoder.clone(),
            head,
            mask: Array1::zeros(config.dim),
            config,
            bidirectional,
        })
    }

    /// Randomly initialized encoder of the given shape, same head draw as
    /// [`TunedModel::from_pretrained`] for the same seed.
    pub fn from_scratch(
        config: &ModelConfig,
        task: DownstreamTask,
        num_classes: usize,
        seed: u64,
        bidirectional: bool,
    ) -> Result<Self> {
        let fresh = PivotModel::new(config.clone(), util::mix_seed(&[seed, 0x5C4A]))?;
        Self::from_pretrained(&fresh, task, num_classes, seed, bidirectional)
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_size()
    }

    fn zeros_like(&self) -> Self {
        TunedModel {
            task: self.task,
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
            mask: Array1::zeros(self.mask.raw_dim()),
            bidirectional: self.bidirectional,
        }
    }
}

// --- samples ------------------------------------------------------------------

/// One supervised unit: a video (task and step recognition) or one masked
/// position of a video (forecasting).
#[derive(Debug, Clone, PartialEq)]
enum Unit {
    Video { video: usize, label: usize },
    Clips { video: usize, labels: Vec<Option<usize>> },
    Forecast { video: usize, position: usize, label: usize },
}

fn gold_steps(v: &VideoRecord) -> Result<&[Option<usize>]> {
    v.gold_steps.as_deref().ok_or_else(|| {
        PivotError::Validation(format!("video {} has no gold step labels", v.video_id))
    })
}

fn units(bundle: &CorpusBundle, task: DownstreamTask, max_len: usize) -> Result<Vec<Unit>> {
    let mut out = Vec::new();
    for (vi, v) in bundle.videos.iter().enumerate() {
        if v.len() > max_len {
            return Err(PivotError::SequenceTooLong {
                len: v.len(),
                max: max_len,
            });
        }
        match task {
            DownstreamTask::TaskRecognition => {
                let label = v.gold_task.ok_or_else(|| {
                    PivotError::Validation(format!("video {} has no gold task", v.video_id))
                })?;
                out.push(Unit::Video { video: vi, label });
            }
            DownstreamTask::StepRecognition => out.push(Unit::Clips {
                video: vi,
                labels: gold_steps(v)?.to_vec(),
            }),
            DownstreamTask::StepForecasting => {
                for (p, s) in gold_steps(v)?.iter().enumerate().skip(1) {
                    if let Some(label) = s {
                        out.push(Unit::Forecast {
                            video: vi,
                            position: p,
                            label: *label,
                        });
                    }
                }
            }
        }
    }
    let n_classes = task.num_classes(bundle);
    for u in &out {
        let bad = match u {
            Unit::Video { label, .. } | Unit::Forecast { label, .. } => *label >= n_classes,
            Unit::Clips { labels, .. } => labels.iter().flatten().any(|&l| l >= n_classes),
        };
        if bad {
            return Err(PivotError::Validation(format!(
                "{task}: label outside the {n_classes}-class space"
            )));
        }
    }
    Ok(out)
}

/// Forecasting input for 1-based position `i`: clips `1..i−1` followed by
/// the mask slot (`None`). With `bidirectional`, clips after `i` follow the mask.
pub fn build_forecast_input(
    video: &VideoRecord,
    i: usize,
    bidirectional: bool,
) -> Result<Vec<Option<&[f64]>>> {
    if i < 2 {
        return Err(PivotError::Validation(format!(
            "forecast position {i}: needs at least one prior clip"
        )));
    }
    if i > video.len() {
        return Err(PivotError::Validation(format!(
            "forecast position {i} past the end of video {} ({} clips)",
            video.video_id,
            video.len()
        )));
    }
    let mut seq: Vec<Option<&[f64]>> = video.clip_embeddings[..i - 1]
        .iter()
        .map(|c| Some(&c[..]))
        .collect();
    seq.push(None);
    if bidirectional {
        seq.extend(video.clip_embeddings[i..].iter().map(|c| Some(&c[..])));
    }
    Ok(seq)
}

/// Packed encoder input plus where the supervised outputs live.
struct Assembled {
    input: PackedInput,
    mask_rows: Vec<usize>,
    /// `(output row, class)`; rows index clip outputs, or sequences for task recognition.
    targets: Vec<(usize, usize)>,
}

fn assemble(model: &TunedModel, bundle: &CorpusBundle, batch: &[&Unit]) -> Result<Assembled> {
    let dim = model.config.dim;
    let mut seqs: Vec<Vec<Option<&[f64]>>> = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut row = 0;
    for (si, u) in batch.iter().enumerate() {
        let seq = match u {
            Unit::Video { video, label } => {
                targets.push((si, *label));
                bundle.videos[*video].clip_embeddings.iter().map(|c| Some(&c[..])).collect()
            }
            Unit::Clips { video, labels } => {
                for (p, l) in labels.iter().enumerate() {
                    if let Some(l) = l {
                        targets.push((row + p, *l));
                    }
                }
                bundle.videos[*video].clip_embeddings.iter().map(|c| Some(&c[..])).collect()
            }
            Unit::Forecast {
                video,
                position,
                label,
            } => {
                targets.push((row + position, *label));
                build_forecast_input(&bundle.videos[*video], position + 1, model.bidirectional)?
            }
        };
        row += seq.len();
        seqs.push(seq);
    }
    let mut rows = Array2::zeros((row, dim));
    let mut positions = Vec::with_capacity(row);
    let mut segments = Vec::with_capacity(seqs.len());
    let mut mask_rows = Vec::new();
    let mut r = 0;
    for seq in &seqs {
        segments.push(Segment {
            start: r,
            len: seq.len(),
        });
        for (p, c) in seq.iter().enumerate() {
            match c {
                Some(c) => rows.row_mut(r).assign(&ndarray::ArrayView1::from(*c)),
                None => {
                    rows.row_mut(r).assign(&model.mask);
                    mask_rows.push(r);
                }
            }
            positions.push(p);
            r += 1;
        }
    }
    Ok(Assembled {
        input: PackedInput {
            rows,
            positions,
            segments,
        },
        mask_rows,
        targets,
    })
}

fn gather(features: &Array2<f64>, targets: &[(usize, usize)]) -> Array2<f64> {
    let mut x = Array2::zeros((targets.len(), features.ncols()));
    for (i, &(r, _)) in targets.iter().enumerate() {
        x.row_mut(i).assign(&features.row(r));
    }
    x
}

/// Mean cross-entropy over the batch's targets and its gradient.
fn loss_and_grads(
    model: &TunedModel,
    bundle: &CorpusBundle,
    batch: &[&Unit],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<(f64, TunedModel)>> {
    let a = assemble(model, bundle, batch)?;
    if a.targets.is_empty() {
        return Ok(None);
    }
    let pass = model.encoder.forward(&a.input, rng)?;
    let on_video = model.task == DownstreamTask::TaskRecognition;
    let features = if on_video { &pass.video } else { &pass.clip_out };
    let (logits, cache) = model.head.forward(gather(features, &a.targets));
    let n = a.targets.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut g = vec![0.0; logits.ncols()];
    let mut loss = 0.0;
    for (i, &(_, class)) in a.targets.iter().enumerate() {
        loss += ops::softmax_ce(logits.row(i).as_slice().unwrap(), class, &mut g);
        for (d, gv) in dlogits.row_mut(i).iter_mut().zip(&g) {
            *d = gv / n;
        }
    }
    let (dx, g_head) = model.head.backward(&dlogits, &cache);
    let mut d_clip = Array2::zeros(pass.clip_out.raw_dim());
    let mut d_video = Array2::zeros(pass.video.raw_dim());
    {
        let target = if on_video { &mut d_video } else { &mut d_clip };
        for (i, &(r, _)) in a.targets.iter().enumerate() {
            let mut row = target.row_mut(r);
            row += &dx.row(i);
        }
    }
    let (g_enc, d_input) = model.encoder.backward(&pass, &a.input, &d_clip, &d_video);
    let mut grads = model.zeros_like();
    grads.encoder = g_enc;
    grads.head = g_head;
    for &r in &a.mask_rows {
        grads.mask += &d_input.row(r);
    }
    Ok(Some((loss / n, grads)))
}

// --- training -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains `model` in place on every labeled unit of `bundle`.
pub fn finetune(
    model: &mut TunedModel,
    bundle: &CorpusBundle,
    config: &FinetuneConfig,
) -> Result<FinetuneLog> {
    config.validate()?;
    check_compatible(model, bundle)?;
    let all = units(bundle, model.task, model.config.max_seq_len)?;
    if all.is_empty() {
        return Err(PivotError::Validation(format!(
            "{}: no labeled samples in the transfer corpus",
            model.task
        )));
    }
    let mut adam = AdamState::new(model);
    let frozen = config.freeze_encoder;
    let trainable = |name: &str| !(frozen && name.starts_with("enc."));
    let mut log = FinetuneLog {
        epoch_loss: Vec::with_capacity(config.epochs),
    };
    for epoch in 1..=config.epochs {
        let mut order: Vec<&Unit> = all.iter().collect();
        order.shuffle(&mut util::stream(&[config.seed, 0xF17E, epoch as u64]));
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut rng = util::stream(&[config.seed, 0xF1D0, epoch as u64, bi as u64]);
            let rng = (!frozen).then_some(&mut rng);
            let Some((loss, grads)) = loss_and_grads(model, bundle, chunk, rng)? else {
                continue;
            };
            if !loss.is_finite() {
                return Err(PivotError::NonFiniteLoss { epoch, batch: bi });
            }
            adam.step_where(model, &grads, &config.adam, trainable)?;
            total += loss;
            batches += 1;
        }
        log.epoch_loss.push(total / batches.max(1) as f64);
    }
    Ok(log)
}

fn check_compatible(model: &TunedModel, bundle: &CorpusBundle) -> Result<()> {
    if bundle.dim != model.config.dim {
        return Err(PivotError::DimMismatch {
            expected: model.config.dim,
            got: bundle.dim,
        });
    }
    let needed = model.task.num_classes(bundle);
    if needed != model.num_classes() {
        return Err(PivotError::Validation(format!(
            "{}: head has {} classes, corpus defines {needed}",
            model.task,
            model.num_classes()
        )));
    }
    Ok(())
}

// --- evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: DownstreamTask,
    /// Percentage, `100 · correct / n`.
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    pub per_class: Vec<ClassCount>,
}

impl EvalReport {
    fn from_counts(task: DownstreamTask, counts: BTreeMap<usize, (usize, usize)>) -> Result<Self> {
        let n: usize = counts.values().map(|c| c.1).sum();
        if n == 0 {
            return Err(PivotError::Validation(format!("{task}: nothing to evaluate")));
        }
        let correct: usize = counts.values().map(|c| c.0).sum();
        Ok(EvalReport {
            task,
            accuracy: 100.0 * correct as f64 / n as f64,
            correct,
            n,
            per_class: counts
                .into_iter()
                .map(|(class, (correct, total))| ClassCount {
                    class,
                    correct,
                    total,
                })
                .collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, (self.to_json() + "\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<EvalReport> {
        let text = fs::read_to_string(path).map_err(|e| PivotError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PivotError::Parse {
            file: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

const EVAL_BATCH: usize = 64;

/// Predicted class for every target of every unit, in unit order.
fn predict(model: &TunedModel, bundle: &CorpusBundle, all: &[Unit]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    let refs: Vec<&Unit> = all.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let a = assemble(model, bundle, chunk)?;
        if a.targets.is_empty() {
            continue;
        }
        let pass = model.encoder.forward(&a.input, None)?;
        let features = if model.task == DownstreamTask::TaskRecognition {
            &pass.video
        } else {
            &pass.clip_out
        };
        let (logits, _) = model.head.forward(gather(features, &a.targets));
        for (i, &(_, class)) in a.targets.iter().enumerate() {
            out.push((class, ops::argmax(logits.row(i).as_slice().unwrap())));
        }
    }
    Ok(out)
}

/// Accuracy of the model's own task on `bundle`.
pub fn evaluate(model: &TunedModel, bundle: &CorpusBundle) -> Result<EvalReport> {
    check_compatible(model, bundle)?;
    let all = units(bundle, model.task, model.config.max_seq_len)?;
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (gold, pred) in predict(model, bundle, &all)? {
        let c = counts.entry(gold).or_default();
        c.0 += (gold == pred) as usize;
        c.1 += 1;
    }
    EvalReport::from_counts(model.task, counts)
}

fn expect_task(model: &TunedModel, task: DownstreamTask) -> Result<()> {
    if model.task != task {
        return Err(PivotError::Validation(format!(
            "model was tuned for {}, not {task}",
            model.task
        )));
    }
    Ok(())
}

/// Argmax of the task head on the pooled video embedding, over videos.
pub fn eval_task_recognition(model: &TunedModel, bundle: &CorpusBundle) -> Result<EvalReport> {
    expect_task(model, DownstreamTask::TaskRecognition)?;
    evaluate(model, bundle)
}

/// Per-clip argmax on layer-1 outputs, over clips with a gold step.
pub fn eval_step_recognition(model: &TunedModel, bundle: &CorpusBundle) -> Result<EvalReport> {
    expect_task(model, DownstreamTask::StepRecognition)?;
    evaluate(model, bundle)
}

/// Masked-position argmax over every `(video, i ≥ 2)` with a gold step.
pub fn eval_step_forecasting(model: &TunedModel, bundle: &CorpusBundle) -> Result<EvalReport> {
    expect_task(model, DownstreamTask::StepForecasting)?;
    evaluate(model, bundle)
}

// --- persistence --------------------------------------------------------------

pub const TUNED_KIND: &str = "finetune";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TunedHeader {
    task: DownstreamTask,
    model: ModelConfig,
    num_classes: usize,
    bidirectional: bool,
}

pub fn save_tuned(path: &Path, model: &TunedModel, epochs: usize) -> Result<()> {
    let header = TunedHeader {
        task: model.task,
        model: model.config.clone(),
        num_classes: model.num_classes(),
        bidirectional: model.bidirectional,
    };
    let bytes = checkpoint::encode(
        TUNED_KIND,
        epochs,
        serde_json::to_value(&header).expect("header serializes"),
        model,
        None,
        ValueWidth::F64,
    );
    write_atomic(path, &bytes)
}

pub fn load_tuned(path: &Path) -> Result<TunedModel> {
    let bytes = fs::read(path).map_err(|e| PivotError::io(path, e))?;
    let file = checkpoint::decode(&bytes)?;
    if file.header.kind != TUNED_KIND {
        return Err(PivotError::Format(format!(
            "{}: expected a fine-tuned model, found {:?}",
            path.display(),
            file.header.kind
        )));
    }
    let h: TunedHeader = serde_json::from_value(file.header.config.clone())
        .map_err(|e| PivotError::Format(format!("bad fine-tune header: {e}")))?;
    let mut model = TunedModel::from_scratch(&h.model, h.task, h.num_classes, 0, h.bidirectional)?;
    file.fill(&mut model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::textsim::Embedding;

    fn video(n: usize) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            leaf_node: 0,
            clip_embeddings: (0..n).map(|i| Embedding(vec![i as f64; 4])).collect(),
            caption_embeddings: (0..n).map(|_| Embedding(vec![0.0; 4])).collect(),
            caption_texts: None,
            gold_task: Some(0),
            gold_steps: Some((0..n).map(Some).collect()),
        }
    }

    #[test]
    fn forecast_input_is_a_masked_prefix() {
        let v = video(5);
        let s = build_forecast_input(&v, 2, false).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], Some(&[0.0; 4][..]));
        assert!(s[1].is_none());
        let s = build_forecast_input(&v, 5, false).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s[..4].iter().all(|c| c.is_some()));
        assert!(s[4].is_none());
        assert!(build_forecast_input(&v, 1, false).is_err());
        assert!(build_forecast_input(&v, 6, false).is_err());
        let b = build_forecast_input(&v, 3, true).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b[2].is_none());
        assert_eq!(b[3], Some(&[3.0; 4][..]));
    }

    #[test]
    fn forecast_input_never_contains_target_or_future() {
        let v = video(8);
        for i in 2..=8 {
            let s = build_forecast_input(&v, i, false).unwrap();
            for (p, c) in s.iter().enumerate() {
                if let Some(c) = c {
                    assert!(c[0] < (i - 1) as f64, "position {p} leaks clip {}", c[0]);
                }
            }
        }
    }

    fn small_corpus() -> CorpusBundle {
        let cfg = CorpusConfig {
            level_counts: vec![1, 2, 3],
            videos_per_leaf: 4,
            clips_per_video: 6,
            dim: 16,
            ..CorpusConfig::default()
        };
        generate_corpus(&cfg, 5).unwrap()
    }

    fn small_model(b: &CorpusBundle) -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            ff_dim: 32,
            head_hidden: 16,
            num_steps: 3,
            level_sizes: vec![1],
            max_seq_len: 16,
            ..ModelConfig::for_dim(b.dim, 3, vec![1])
        }
    }

    #[test]
    fn mask_gradient_matches_differences() {
        let b = small_corpus();
        let mut m = TunedModel::from_scratch(
            &small_model(&b),
            DownstreamTask::StepForecasting,
            b.steps.len(),
            1,
            false,
        )
        .unwrap();
        m.mask.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.5);
        m.encoder.dropout = 0.0;
        let all = units(&b, m.task, 16).unwrap();
        let batch: Vec<&Unit> = all.iter().take(5).collect();
        let (_, g) = loss_and_grads(&m, &b, &batch, None).unwrap().unwrap();
        let eps = 1e-5;
        for i in 0..4 {
            let mut p = m.clone();
            p.mask[i] += eps;
            let lp = loss_and_grads(&p, &b, &batch, None).unwrap().unwrap().0;
            p.mask[i] -= 2.0 * eps;
            let lm = loss_and_grads(&p, &b, &batch, None).unwrap().unwrap().0;
            let n = (lp - lm) / (2.0 * eps);
            assert!((n - g.mask[i]).abs() < 1e-6 * n.abs().max(1e-3), "{n} vs {}", g.mask[i]);
        }
    }

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let b = small_corpus();
        let m0 = TunedModel::from_scratch(
            &small_model(&b),
            DownstreamTask::TaskRecognition,
            b.tasks.len(),
            3,
            false,
        )
        .unwrap();
        let mut m = m0.clone();
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        finetune(&mut m, &b, &cfg).unwrap();
        assert_eq!(m, m0);
        assert_eq!(evaluate(&m, &b).unwrap(), evaluate(&m0, &b).unwrap());
    }

    #[test]
    fn single_class_space_is_always_right() {
        let mut b = small_corpus();
        b.tasks.truncate(1);
        for v in b.videos.iter_mut() {
            v.gold_task = Some(0);
        }
        let m = TunedModel::from_scratch(&small_model(&b), DownstreamTask::TaskRecognition, 1, 0, false)
            .unwrap();
        let r = eval_task_recognition(&m, &b).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.n, b.videos.len());
    }

    #[test]
    fn eval_is_order_invariant_and_task_checked() {
        let b = small_corpus();
        let m = TunedModel::from_scratch(
            &small_model(&b),
            DownstreamTask::StepRecognition,
            b.steps.len(),
            2,
            false,
        )
        .unwrap();
        let r1 = eval_step_recognition(&m, &b).unwrap();
        let mut rev = b.clone();
        rev.videos.reverse();
        let r2 = eval_step_recognition(&m, &rev).unwrap();
        assert_eq!(r1.accuracy, r2.accuracy);
        assert_eq!(r1.per_class, r2.per_class);
        assert!(eval_task_recognition(&m, &b).is_err());
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let b = small_corpus();
        let cfg = ModelConfig::for_dim(8, 3, vec![1]);
        let mut m = TunedModel::from_scratch(&cfg, DownstreamTask::TaskRecognition, b.tasks.len(), 0, false)
            .unwrap();
        assert!(matches!(
            finetune(&mut m, &b, &FinetuneConfig::default()),
            Err(PivotError::DimMismatch { .. })
        ));
    }

    #[test]
    fn tuned_model_round_trips() {
        let b = small_corpus();
        let m = TunedModel::from_scratch(
            &small_model(&b),
            DownstreamTask::StepForecasting,
            b.steps.len(),
            4,
            false,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tuned.pivt");
        save_tuned(&p, &m, 0).unwrap();
        let back = load_tuned(&p).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn task_names_parse() {
        for t in DownstreamTask::ALL {
            assert_eq!(t.to_string().parse::<DownstreamTask>().unwrap(), t);
        }
        assert!("xx".parse::<DownstreamTask>().is_err());
    }
}
