//! Joint pre-training loop, metric logging, checkpointing, and the
//! polynomial early-stopping analysis.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, PreparedVideo};
use crate::corpus::{self, CorpusBundle, VideoRecord};
use crate::error::{PivotError, Result};
use crate::mining::{self, VideoLabels};
use crate::neural::checkpoint::{checkpoint_name, save_checkpoint, ValueWidth};
use crate::neural::ops::argmax;
use crate::neural::{AdamConfig, AdamState, Batch, BatchItem, ModelConfig, PackedInput, PivotModel};
use crate::util;

pub const METRICS_HEADER: &str = "epoch,step_acc,loss_step,loss_path,loss_joint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STOP_ANALYSIS_FILE: &str = "stop_analysis.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// `num_steps` and `level_sizes` are taken from the corpus.
    pub model: ModelConfig,
    pub poly_degree: usize,
    pub patience: usize,
    /// Fraction of videos held out for the per-epoch accuracy.
    pub holdout_fraction: f64,
    pub checkpoint_width: ValueWidth,
    /// Store optimizer moments in checkpoints.
    pub save_optimizer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            batch_size: 256,
            adam: AdamConfig::default(),
            checkpoint_interval: 50,
            seed: 0,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            poly_degree: 10,
            patience: 50,
            holdout_fraction: 0.1,
            checkpoint_width: ValueWidth::F64,
            save_optimizer: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PivotError::Validation(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint interval must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout fraction must be in [0, 1)");
        }
        self.augment.validate()
    }

    /// Epochs at which a checkpoint is written.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        checkpoint_schedule(self.epochs, self.checkpoint_interval)
    }
}

/// Every multiple of `interval` up to `epochs`, plus `epochs` itself.
pub fn checkpoint_schedule(epochs: usize, interval: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=epochs).filter(|e| e % interval == 0).collect();
    if v.last() != Some(&epochs) {
        v.push(epochs);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Held-out clip-step top-1 accuracy in `[0, 1]`.
    pub step_acc: f64,
    pub loss_step: f64,
    pub loss_path: f64,
    pub loss_joint: f64,
}

/// Per-epoch records, epochs contiguous from 1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSeries {
    pub records: Vec<EpochRecord>,
}

impl MetricSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.step_acc).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.step_acc, r.loss_step, r.loss_path, r.loss_joint
            )
            .unwrap();
        }
        s
    }

    pub fn parse_csv(text: &str, file: &str) -> Result<MetricSeries> {
        let perr = |line: usize, msg: String| PivotError::Parse {
            file: file.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            Some((_, h)) => return Err(perr(1, format!("unexpected header {h:?}"))),
            None => return Err(perr(1, "empty file".into())),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(perr(i + 1, format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| perr(i + 1, format!("{s:?}: {e}")))
            };
            let epoch = f[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| perr(i + 1, format!("epoch {:?}: {e}", f[0])))?;
            if epoch != records.len() + 1 {
                return Err(perr(
                    i + 1,
                    format!("epoch {epoch} out of sequence, expected {}", records.len() + 1),
                ));
            }
            records.push(EpochRecord {
                epoch,
                step_acc: num(f[1])?,
                loss_step: num(f[2])?,
                loss_path: num(f[3])?,
                loss_joint: num(f[4])?,
            });
        }
        Ok(MetricSeries { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| PivotError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<MetricSeries> {
        let text = fs::read_to_string(path).map_err(|e| PivotError::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }
}

// --- training data ------------------------------------------------------------

/// One video ready for batching: its cached selection and path targets.
#[derive(Debug, Clone)]
pub struct TrainVideo<'a> {
    pub index: usize,
    pub record: &'a VideoRecord,
    pub prepared: PreparedVideo,
    /// Class index per hierarchy level, root first.
    pub path_targets: Vec<usize>,
}

/// Runs the deterministic augmentation stages for every video.
///
/// The de-duplication draw for video `i` comes from its own stream, so
/// results do not depend on which other videos are present.
pub fn prepare_videos<'a>(
    bundle: &'a CorpusBundle,
    labels: &'a [VideoLabels],
    augment: &AugmentConfig,
    max_len: usize,
    seed: u64,
) -> Result<Vec<TrainVideo<'a>>> {
    let hierarchy = bundle.hierarchy()?;
    let steps = bundle.step_embeddings();
    let aligned = mining::align_labels(bundle, labels)?;
    let mut out = Vec::with_capacity(aligned.len());
    for (i, (video, vl)) in aligned.into_iter().enumerate() {
        let pseudo = vl.pseudo_labels();
        let dots = augment::caption_step_dots(video, &pseudo, &steps)?;
        let task = bundle
            .tasks
            .iter()
            .find(|t| t.task_id == vl.topic.task_id)
            .ok_or_else(|| {
                PivotError::Validation(format!(
                    "video {}: unknown topic task {}",
                    video.video_id, vl.topic.task_id
                ))
            })?;
        let mut rng = util::stream(&[seed, 0xDED0, i as u64]);
        let mut prepared = augment::prepare(&pseudo, &dots, task, augment, &mut rng)?;
        if prepared.clips.len() > max_len {
            log::warn!(
                "video {}: {} selected clips; truncating to {max_len}",
                video.video_id,
                prepared.clips.len()
            );
            prepared.clips.truncate(max_len);
        }
        let path = mining::resolve_path(video.leaf_node, &hierarchy)?;
        let path_targets = path
            .0
            .iter()
            .map(|&n| hierarchy.index_in_level(n).expect("path nodes are in the hierarchy"))
            .collect();
        out.push(TrainVideo {
            index: i,
            record: video,
            prepared,
            path_targets,
        });
    }
    Ok(out)
}

/// Held-out accuracies of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    /// Fraction of clips whose argmax step equals the clip's best label.
    pub step_acc: f64,
    /// Accuracy of each path head, root first.
    pub path_acc: Vec<f64>,
    /// Fraction of videos with every level correct.
    pub full_path_acc: f64,
    pub n_clips: usize,
    pub n_videos: usize,
}

const EVAL_CHUNK: usize = 256;

/// Scores held-out videos in evaluation mode (no dropout, no swap).
pub fn evaluate_held_out(model: &PivotModel, videos: &[&TrainVideo<'_>]) -> Result<HeldOutMetrics> {
    let levels = model.path_heads.len();
    let (mut correct, mut total) = (0usize, 0usize);
    let mut path_correct = vec![0usize; levels];
    let mut full = 0usize;
    for chunk in videos.chunks(EVAL_CHUNK) {
        let seqs: Vec<Vec<&[f64]>> = chunk
            .iter()
            .map(|v| {
                v.prepared
                    .clips
                    .iter()
                    .map(|c| &v.record.clip_embeddings[c.index][..])
                    .collect()
            })
            .collect();
        let input = PackedInput::from_sequences(&seqs, model.config.dim);
        let (steps, paths) = model.infer(&input)?;
        for (v, seg) in chunk.iter().zip(&input.segments) {
            for (j, c) in v.prepared.clips.iter().enumerate() {
                let row = steps.row(seg.start + j);
                if argmax(row.as_slice().unwrap()) == c.labels[0].step_id {
                    correct += 1;
                }
                total += 1;
            }
        }
        for (bi, v) in chunk.iter().enumerate() {
            let mut all = true;
            for (l, logits) in paths.iter().enumerate() {
                let ok = argmax(logits.row(bi).as_slice().unwrap()) == v.path_targets[l];
                path_correct[l] += ok as usize;
                all &= ok;
            }
            full += all as usize;
        }
    }
    let n = videos.len().max(1) as f64;
    Ok(HeldOutMetrics {
        step_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        path_acc: path_correct.iter().map(|&c| c as f64 / n).collect(),
        full_path_acc: full as f64 / n,
        n_clips: total,
        n_videos: videos.len(),
    })
}

// --- training loop ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PivotModel,
    pub adam: AdamState,
    pub metrics: MetricSeries,
    pub saved_epochs: Vec<usize>,
    /// Clip positions fed to the model in each epoch.
    pub clip_positions: Vec<usize>,
    pub held_out: HeldOutMetrics,
    pub train_videos: usize,
    pub held_out_videos: usize,
}

/// Model configuration completed from the corpus label spaces.
pub fn resolve_model_config(bundle: &CorpusBundle, template: &ModelConfig) -> Result<ModelConfig> {
    let hierarchy = bundle.hierarchy()?;
    let config = ModelConfig {
        dim: bundle.dim,
        num_steps: bundle.steps.len(),
        level_sizes: hierarchy.level_sizes(),
        ..template.clone()
    };
    config.validate()?;
    Ok(config)
}

/// Trains from scratch. When `out_dir` is given, checkpoints and
/// `metrics.csv` are written there.
pub fn pretrain(
    bundle: &CorpusBundle,
    labels: &[VideoLabels],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    bundle.validate()?;
    let model_config = resolve_model_config(bundle, &config.model)?;
    let max_len = model_config.max_seq_len;

    let all = prepare_videos(bundle, labels, &config.augment, max_len, config.seed)?;
    // held-out videos are scored after the deterministic filters only
    let eval_augment = AugmentConfig {
        unique: false,
        swap: false,
        ..config.augment.clone()
    };
    let eval_all = prepare_videos(bundle, labels, &eval_augment, max_len, config.seed)?;
    let held = corpus::holdout_mask(all.len(), config.holdout_fraction, config.seed);
    let train: Vec<&TrainVideo> = all.iter().zip(&held).filter(|(_, &h)| !h).map(|(v, _)| v).collect();
    let held_out: Vec<&TrainVideo> = eval_all
        .iter()
        .zip(&held)
        .filter(|(_, &h)| h)
        .map(|(v, _)| v)
        .collect();
    // with no held-out slice the accuracy is measured on the training videos
    let eval_set: Vec<&TrainVideo> = if held_out.is_empty() {
        eval_all.iter().collect()
    } else {
        held_out.clone()
    };
    if train.is_empty() {
        return Err(PivotError::Validation("no training videos".into()));
    }

    let mut model = PivotModel::new(model_config, config.seed)?;
    let mut adam = AdamState::new(&model);
    let schedule = config.checkpoint_epochs();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| PivotError::io(dir, e))?;
    }

    let mut metrics = MetricSeries::default();
    let mut clip_positions = Vec::with_capacity(config.epochs);
    let mut saved = Vec::new();
    let mut last_eval = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut util::stream(&[config.seed, 0x0D3E, epoch as u64]));

        let sequences: Vec<_> = order
            .iter()
            .map(|&i| {
                let v = train[i];
                let mut rng = util::stream(&[config.seed, 0x5A4B, epoch as u64, v.index as u64]);
                (v, v.prepared.sample(&mut rng))
            })
            .collect();
        clip_positions.push(sequences.iter().map(|(_, s)| s.len()).sum());

        let (mut sum_step, mut sum_path) = (0.0, 0.0);
        for (bi, chunk) in sequences.chunks(config.batch_size).enumerate() {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|(v, seq)| BatchItem {
                    clips: seq
                        .clip_indices
                        .iter()
                        .map(|&c| &v.record.clip_embeddings[c][..])
                        .collect(),
                    step_targets: seq.targets.iter().map(|t| Some(t.clone())).collect(),
                    path_targets: v.path_targets.iter().map(|&p| Some(p)).collect(),
                })
                .collect();
            let batch = Batch::from_items(&items, model.config.dim)?;
            let mut drop_rng = util::stream(&[config.seed, 0xD409, epoch as u64, bi as u64]);
            let (losses, grads) = model.gradients(&batch, Some(&mut drop_rng))?;
            if !losses.joint.is_finite() {
                return Err(PivotError::NonFiniteLoss { epoch, batch: bi });
            }
            adam.step(&mut model, &grads, &config.adam)?;
            let w = chunk.len() as f64;
            sum_step += w * losses.step;
            sum_path += w * losses.path;
        }
        let n = sequences.len() as f64;
        let loss_step = sum_step / n;
        let loss_path = sum_path / n;
        let loss_joint =
            model.config.step_weight * loss_step + model.config.path_weight * loss_path;

        let eval = evaluate_held_out(&model, &eval_set)?;
        metrics.records.push(EpochRecord {
            epoch,
            step_acc: eval.step_acc,
            loss_step,
            loss_path,
            loss_joint,
        });
        log::info!(
            "epoch {epoch}: acc {:.4} L_step {loss_step:.5} L_path {loss_path:.5}",
            eval.step_acc
        );
        last_eval = Some(eval);

        if schedule.binary_search(&epoch).is_ok() {
            if let Some(dir) = out_dir {
                let state = config.save_optimizer.then_some(&adam);
                save_checkpoint(
                    &dir.join(checkpoint_name(epoch)),
                    &model,
                    epoch,
                    state,
                    config.checkpoint_width,
                )?;
            }
            saved.push(epoch);
        }
    }
    if let Some(dir) = out_dir {
        metrics.write(&dir.join(METRICS_FILE))?;
    }
    Ok(TrainOutcome {
        model,
        adam,
        metrics,
        saved_epochs: saved,
        clip_positions,
        held_out: last_eval.expect("at least one epoch"),
        train_videos: train.len(),
        held_out_videos: held_out.len(),
    })
}

/// Saved checkpoint epochs found in a directory, ascending.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PivotError::io(dir, e))? {
        let entry = entry.map_err(|e| PivotError::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(epoch) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".pivt"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.push((epoch, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

// --- early stopping -----------------------------------------------------------

/// Maps epoch `e` to `x = (e − offset) / scale`, so `[1, |M|]` becomes `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub offset: f64,
    pub scale: f64,
}

impl DomainTransform {
    pub fn apply(&self, epoch: f64) -> f64 {
        (epoch - self.offset) / self.scale
    }
}

/// Least-squares polynomial in the rescaled domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    /// `a₀ … a_n` in powers of the rescaled variable.
    pub coefficients: Vec<f64>,
    pub domain: DomainTransform,
}

impl PolyFit {
    fn horner(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
    }

    /// `p` at an epoch.
    pub fn eval(&self, epoch: f64) -> f64 {
        Self::horner(&self.coefficients, self.domain.apply(epoch))
    }

    /// `dp/de` at an epoch (chain rule through the domain transform).
    pub fn derivative(&self, epoch: f64) -> f64 {
        let d: Vec<f64> = self
            .coefficients
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &a)| i as f64 * a)
            .collect();
        Self::horner(&d, self.domain.apply(epoch)) / self.domain.scale
    }
}

/// Fits `values[e−1] ≈ p(e)` for `e = 1..=|values|` with a degree-`degree`
/// polynomial, solved by SVD on the rescaled Vandermonde matrix.
pub fn fit_poly(values: &[f64], degree: usize) -> Result<PolyFit> {
    let n = values.len();
    if n < degree + 1 {
        return Err(PivotError::Validation(format!(
            "degree-{degree} fit needs at least {} points, got {n}",
            degree + 1
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PivotError::Validation("non-finite metric value".into()));
    }
    let domain = DomainTransform {
        offset: 1.0,
        scale: if n > 1 { (n - 1) as f64 } else { 1.0 },
    };
    let a = DMatrix::from_fn(n, degree + 1, |r, c| domain.apply((r + 1) as f64).powi(c as i32));
    let b = DVector::from_column_slice(values);
    let svd = a.svd(true, true);
    let tol = svd.singular_values.max() * f64::EPSILON * n as f64;
    let x = svd
        .solve(&b, tol)
        .map_err(|e| PivotError::Validation(format!("least squares failed: {e}")))?;
    Ok(PolyFit {
        coefficients: x.iter().copied().collect(),
        domain,
    })
}

/// Epoch in `1..=k` where `p′` is largest; ties go to the earliest epoch.
///
/// A fit whose values vary by less than roundoff over the grid has no
/// meaningful derivative; every epoch ties and the answer is 1.
pub fn optimal_epoch(fit: &PolyFit, k: usize) -> usize {
    if k <= 1 {
        return 1;
    }
    let values: Vec<f64> = (1..=k).map(|e| fit.eval(e as f64)).collect();
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let magnitude = hi.abs().max(lo.abs());
    if hi - lo <= 1e-10 * magnitude || hi - lo == 0.0 {
        return 1;
    }
    let mut best = 1;
    let mut best_d = fit.derivative(1.0);
    for e in 2..=k {
        let d = fit.derivative(e as f64);
        if d > best_d {
            best = e;
            best_d = d;
        }
    }
    best
}

/// First epoch `t` with `max(m_{t+1} … m_{t+patience}) ≤ m_t`; only full
/// windows count. Falls back to the last epoch.
pub fn saturation_epoch(m: &[f64], patience: usize) -> usize {
    let n = m.len();
    if n == 0 {
        return 0;
    }
    if patience == 0 || patience >= n {
        return n;
    }
    // sliding maximum over m[t+1 ..= t+patience] (0-based), via a monotone deque
    let mut window: VecDeque<usize> = VecDeque::new();
    let push = |w: &mut VecDeque<usize>, j: usize| {
        while w.back().is_some_and(|&b| m[b] <= m[j]) {
            w.pop_back();
        }
        w.push_back(j);
    };
    for j in 1..=patience {
        push(&mut window, j);
    }
    for t in 0..n - patience {
        if t > 0 {
            push(&mut window, t + patience);
        }
        while window.front().is_some_and(|&f| f <= t) {
            window.pop_front();
        }
        if m[window[0]] <= m[t] {
            return t + 1;
        }
    }
    n
}

/// Saved epoch closest to `e_star`; ties go to the earlier epoch.
pub fn select_checkpoint(e_star: usize, saved: &[usize]) -> Result<usize> {
    saved
        .iter()
        .copied()
        .min_by_key(|&s| (s.abs_diff(e_star), s))
        .ok_or_else(|| PivotError::Validation("no saved checkpoints to select from".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopAnalysis {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub domain: DomainTransform,
    pub epochs: usize,
    pub e_star: usize,
    pub saturation_epoch: usize,
    pub patience: usize,
    pub selected_checkpoint_epoch: usize,
}

pub fn analyze_stop(
    metrics: &MetricSeries,
    degree: usize,
    patience: usize,
    saved_epochs: &[usize],
) -> Result<StopAnalysis> {
    if patience == 0 {
        return Err(PivotError::Validation("patience must be at least 1".into()));
    }
    let m = metrics.accuracies();
    let fit = fit_poly(&m, degree)?;
    let e_star = optimal_epoch(&fit, m.len());
    Ok(StopAnalysis {
        degree,
        coefficients: fit.coefficients,
        domain: fit.domain,
        epochs: m.len(),
        e_star,
        saturation_epoch: saturation_epoch(&m, patience),
        patience,
        selected_checkpoint_epoch: select_checkpoint(e_star, saved_epochs)?,
    })
}

impl StopAnalysis {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("analysis serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| PivotError::io(path, e))
    }
}
