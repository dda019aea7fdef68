use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;

use pivot_core::corpus::{self, CorpusConfig};
use pivot_core::downstream::{self, DownstreamTask, EvalReport, FinetuneConfig, TunedModel};
use pivot_core::mining;
use pivot_core::neural::checkpoint::{load_checkpoint, write_atomic};
use pivot_core::pretrain::{self, MetricSeries, TrainConfig};

use crate::config::{overlay, FileConfig};
use crate::manifest::{files_in, ClipCounts, RunManifest, MANIFEST_FILE};
use crate::{
    AnalyzeStopArgs, EvalArgs, FinetuneArgs, GenCorpusArgs, MineArgs, Preset, PretrainArgs,
    ReportArgs,
};

pub const TUNED_FILE: &str = "tuned.pivt";
pub const REPORT_FILE: &str = "report.json";

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration serializes")
}

/// Manifest path for a single-file artifact: `labels.jsonl` gets
/// `labels.jsonl.manifest.json` beside it.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_corpus(dir: &Path) -> Result<corpus::CorpusBundle> {
    corpus::load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

pub fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let seed = file.resolve_seed(a.seed)?;
    let preset = match a.preset {
        Preset::Desk => CorpusConfig::default(),
        Preset::Large => CorpusConfig::large(),
        Preset::Transfer => CorpusConfig::transfer(),
    };
    let config = overlay(preset, file.corpus.as_ref(), "corpus")?;
    let bundle = corpus::generate_corpus(&config, seed)?;
    create_dir(&a.out)?;
    corpus::save_corpus(&bundle, &a.out)?;
    info!(
        "{} videos, {} steps, {} tasks",
        bundle.videos.len(),
        bundle.steps.len(),
        bundle.tasks.len()
    );
    let mut m = RunManifest::new("gen-corpus", to_json(&config), Some(seed));
    if let Some(c) = &a.config {
        m = m.input(c);
    }
    m.outputs(&a.out, &files_in(&a.out)?)?
        .write(&a.out.join(MANIFEST_FILE))
}

pub fn mine(a: MineArgs) -> Result<()> {
    ensure!(a.k >= 1, "--k must be at least 1");
    let bundle = load_corpus(&a.corpus)?;
    let labels = mining::mine_corpus(&bundle, a.k)?;
    create_dir(&parent_dir(&a.out))?;
    mining::write_labels(&a.out, &labels)?;
    RunManifest::new("mine", serde_json::json!({ "k": a.k }), None)
        .input(&a.corpus)
        .outputs(&parent_dir(&a.out), std::slice::from_ref(&a.out))?
        .write(&sidecar(&a.out))
}

/// Defaults, then the `[train]` section, then flags.
pub fn resolve_train_config(a: &PretrainArgs, file: &FileConfig) -> Result<TrainConfig> {
    let mut c = overlay(TrainConfig::default(), file.train.as_ref(), "train")?;
    c.seed = file.resolve_seed(a.seed)?;
    let aug = &mut c.augment;
    aug.threshold_enabled |= a.thresh;
    aug.in_task |= a.in_task;
    aug.sort |= a.sort;
    aug.unique |= a.unique;
    aug.swap |= a.swap;
    if let Some(t) = a.threshold_value {
        aug.threshold_value = t;
    }
    if let Some(p) = a.swap_prob {
        aug.swap_prob = p;
    }
    if let Some(p) = a.pool {
        c.model.pool = p.into();
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    c.validate()?;
    Ok(c)
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let config = resolve_train_config(&a, &file)?;
    let bundle = load_corpus(&a.corpus)?;
    let labels = mining::read_labels(&a.labels)?;
    info!("augmentation: {}", config.augment.describe());
    create_dir(&a.out)?;
    let out = pretrain::pretrain(&bundle, &labels, &config, Some(&a.out))?;
    info!(
        "held-out step accuracy {:.4} over {} clips",
        out.held_out.step_acc, out.held_out.n_clips
    );
    let mut resolved = to_json(&config);
    resolved["model"] = to_json(&out.model.config);
    resolved["augment_summary"] = config.augment.describe().into();
    let mut m = RunManifest::new("pretrain", resolved, Some(config.seed))
        .input(&a.corpus)
        .input(&a.labels);
    if let Some(c) = &a.config {
        m = m.input(c);
    }
    m.clip_counts = Some(ClipCounts::new(out.clip_positions));
    m.outputs(&a.out, &files_in(&a.out)?)?
        .write(&a.out.join(MANIFEST_FILE))
}

pub fn analyze_stop(a: AnalyzeStopArgs) -> Result<()> {
    let metrics = MetricSeries::read(&a.metrics)?;
    ensure!(!metrics.is_empty(), "{} has no epochs", a.metrics.display());
    let dir = parent_dir(&a.metrics);
    let mut saved: Vec<usize> = pretrain::list_checkpoints(&dir)?
        .into_iter()
        .map(|(e, _)| e)
        .collect();
    if saved.is_empty() {
        saved = pretrain::checkpoint_schedule(metrics.len(), TrainConfig::default().checkpoint_interval);
    }
    let analysis = pretrain::analyze_stop(&metrics, a.degree, a.patience, &saved)?;
    let out = a.out.unwrap_or_else(|| dir.join(pretrain::STOP_ANALYSIS_FILE));
    create_dir(&parent_dir(&out))?;
    write_atomic(&out, (analysis.to_json() + "\n").as_bytes())?;
    println!(
        "e_star {} saturation {} checkpoint {}",
        analysis.e_star, analysis.saturation_epoch, analysis.selected_checkpoint_epoch
    );
    RunManifest::new(
        "analyze-stop",
        serde_json::json!({ "degree": a.degree, "patience": a.patience, "saved_epochs": saved }),
        None,
    )
    .input(&a.metrics)
    .outputs(&parent_dir(&out), std::slice::from_ref(&out))?
    .write(&sidecar(&out))
}

pub fn resolve_finetune_config(a: &FinetuneArgs, file: &FileConfig) -> Result<FinetuneConfig> {
    let mut c = overlay(FinetuneConfig::default(), file.finetune.as_ref(), "finetune")?;
    c.task = a.task.into();
    c.seed = file.resolve_seed(a.seed)?;
    c.freeze_encoder |= a.freeze_encoder;
    c.bidirectional |= a.bidirectional;
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    c.validate()?;
    Ok(c)
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let config = resolve_finetune_config(&a, &file)?;
    let ckpt = load_checkpoint(&a.ckpt)
        .with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let bundle = load_corpus(&a.corpus)?;
    let (train, test) = match &a.eval_corpus {
        Some(dir) => (bundle, load_corpus(dir)?),
        None => {
            ensure!(
                a.holdout > 0.0 && a.holdout < 1.0,
                "--holdout must lie strictly between 0 and 1"
            );
            corpus::split_videos(&bundle, a.holdout, config.seed)
        }
    };
    let task = config.task;
    let n = task.num_classes(&train);
    let mut model = if a.from_scratch {
        TunedModel::from_scratch(&ckpt.model.config, task, n, config.seed, config.bidirectional)?
    } else {
        TunedModel::from_pretrained(&ckpt.model, task, n, config.seed, config.bidirectional)?
    };
    let log = downstream::finetune(&mut model, &train, &config)?;
    let report = downstream::evaluate(&model, &test)?;
    println!("{} accuracy {:.2}% ({}/{})", task.short(), report.accuracy, report.correct, report.n);

    create_dir(&a.out)?;
    downstream::save_tuned(&a.out.join(TUNED_FILE), &model, config.epochs)?;
    report.write(&a.out.join(REPORT_FILE))?;
    let mut resolved = to_json(&config);
    resolved["from_scratch"] = a.from_scratch.into();
    resolved["holdout"] = match a.eval_corpus {
        Some(_) => serde_json::Value::Null,
        None => a.holdout.into(),
    };
    resolved["final_train_loss"] = log.epoch_loss.last().copied().into();
    let mut m = RunManifest::new("finetune", resolved, Some(config.seed))
        .input(&a.ckpt)
        .input(&a.corpus);
    if let Some(e) = &a.eval_corpus {
        m = m.input(e);
    }
    m.outputs(&a.out, &[a.out.join(TUNED_FILE), a.out.join(REPORT_FILE)])?
        .write(&a.out.join(MANIFEST_FILE))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = downstream::load_tuned(&a.model)
        .with_context(|| format!("loading model {}", a.model.display()))?;
    let bundle = load_corpus(&a.corpus)?;
    let task: DownstreamTask = a.task.into();
    let report = match task {
        DownstreamTask::TaskRecognition => downstream::eval_task_recognition(&model, &bundle),
        DownstreamTask::StepRecognition => downstream::eval_step_recognition(&model, &bundle),
        DownstreamTask::StepForecasting => downstream::eval_step_forecasting(&model, &bundle),
    }?;
    println!("{} accuracy {:.2}% ({}/{})", task.short(), report.accuracy, report.correct, report.n);
    create_dir(&parent_dir(&a.out))?;
    report.write(&a.out)?;
    RunManifest::new("eval", serde_json::json!({ "task": task }), None)
        .input(&a.model)
        .input(&a.corpus)
        .outputs(&parent_dir(&a.out), std::slice::from_ref(&a.out))?
        .write(&sidecar(&a.out))
}

/// Reports in `dir` itself and in its immediate subdirectories.
fn find_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let direct = dir.join(REPORT_FILE);
    if direct.is_file() {
        found.push(direct);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for s in subdirs {
        let p = s.join(REPORT_FILE);
        if p.is_file() {
            found.push(p);
        }
    }
    Ok(found)
}

/// One row per run, columns in SF / SR / TR order; a task reported more
/// than once in a run is averaged.
pub fn collect_table(runs: &[PathBuf]) -> Result<Vec<(String, BTreeMap<DownstreamTask, f64>)>> {
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let reports = find_reports(run)?;
        if reports.is_empty() {
            bail!("no {REPORT_FILE} under {}", run.display());
        }
        let mut acc: BTreeMap<DownstreamTask, Vec<f64>> = BTreeMap::new();
        for p in reports {
            let r = EvalReport::read(&p)?;
            acc.entry(r.task).or_default().push(r.accuracy);
        }
        let means = acc
            .into_iter()
            .map(|(t, v)| (t, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        rows.push((run.display().to_string(), means));
    }
    Ok(rows)
}

pub fn render_csv(rows: &[(String, BTreeMap<DownstreamTask, f64>)]) -> String {
    let mut s = String::from("run");
    for t in DownstreamTask::ALL {
        write!(s, ",{}", t.short()).unwrap();
    }
    s.push('\n');
    for (run, cols) in rows {
        s.push_str(&csv_field(run));
        for t in DownstreamTask::ALL {
            match cols.get(&t) {
                Some(v) => write!(s, ",{v:.2}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_text(rows: &[(String, BTreeMap<DownstreamTask, f64>)]) -> String {
    let width = rows.iter().map(|(r, _)| r.len()).max().unwrap_or(0).max(3);
    let mut s = format!("{:<width$}", "run");
    for t in DownstreamTask::ALL {
        write!(s, "  {:>6}", t.short()).unwrap();
    }
    s.push('\n');
    for (run, cols) in rows {
        write!(s, "{run:<width$}").unwrap();
        for t in DownstreamTask::ALL {
            match cols.get(&t) {
                Some(v) => write!(s, "  {v:>6.2}").unwrap(),
                None => write!(s, "  {:>6}", "-").unwrap(),
            }
        }
        s.push('\n');
    }
    s
}

pub fn report(a: ReportArgs) -> Result<()> {
    let rows = collect_table(&a.runs)?;
    print!("{}", render_text(&rows));
    if let Some(path) = &a.csv {
        create_dir(&parent_dir(path))?;
        write_atomic(path, render_csv(&rows).as_bytes())?;
        let inputs: Vec<_> = a.runs.iter().map(|r| r.display().to_string()).collect();
        RunManifest::new("report", serde_json::json!({ "runs": inputs }), None)
            .outputs(&parent_dir(path), std::slice::from_ref(path))?
            .write(&sidecar(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_columns_follow_sf_sr_tr() {
        let mut cols = BTreeMap::new();
        cols.insert(DownstreamTask::TaskRecognition, 80.0);
        cols.insert(DownstreamTask::StepForecasting, 12.5);
        let rows = vec![("runs/a".to_string(), cols)];
        assert_eq!(render_csv(&rows), "run,SF,SR,TR\nruns/a,12.50,,80.00\n");
        let text = render_text(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run         SF      SR      TR");
        assert_eq!(lines[1], "runs/a   12.50       -   80.00");
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar(Path::new("out/labels.jsonl")), PathBuf::from("out/labels.jsonl.manifest.json"));
        assert_eq!(parent_dir(Path::new("labels.jsonl")), PathBuf::from("."));
    }
}
