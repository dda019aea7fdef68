use pivot_core::corpus::{self, CorpusConfig};
use pivot_core::downstream::{self, DownstreamTask, FinetuneConfig, TunedModel};
use pivot_core::mining;
use pivot_core::neural::{load_checkpoint, ModelConfig, PoolMode};
use pivot_core::pretrain::{self, MetricSeries, TrainConfig};

fn tiny_corpus(namespace: &str, seed: u64) -> corpus::CorpusBundle {
    let cfg = CorpusConfig {
        level_counts: vec![1, 2, 4],
        videos_per_leaf: 3,
        clips_per_video: 6,
        dim: 16,
        namespace: namespace.into(),
        ..CorpusConfig::default()
    };
    corpus::generate_corpus(&cfg, seed).unwrap()
}

fn tiny_train(epochs: usize, pool: PoolMode) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        checkpoint_interval: 5,
        seed: 9,
        model: ModelConfig {
            heads: 2,
            ff_dim: 32,
            head_hidden: 16,
            pool,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn corpus_survives_disk_round_trip_and_mines_identically() {
    let b = tiny_corpus("", 1);
    let dir = tempfile::tempdir().unwrap();
    corpus::save_corpus(&b, dir.path()).unwrap();
    let back = corpus::load_corpus(dir.path()).unwrap();
    assert_eq!(back.videos, b.videos);
    assert_eq!(mining::mine_corpus(&back, 3).unwrap(), mining::mine_corpus(&b, 3).unwrap());

    let path = dir.path().join("labels.jsonl");
    let labels = mining::mine_corpus(&b, 2).unwrap();
    mining::write_labels(&path, &labels).unwrap();
    assert_eq!(mining::read_labels(&path).unwrap(), labels);
}

#[test]
fn pretraining_writes_schedule_and_metrics() {
    let b = tiny_corpus("", 2);
    let labels = mining::mine_corpus(&b, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain::pretrain(&b, &labels, &tiny_train(12, PoolMode::Tfenc), Some(dir.path())).unwrap();
    assert_eq!(out.saved_epochs, vec![5, 10, 12]);
    let found: Vec<usize> = pretrain::list_checkpoints(dir.path())
        .unwrap()
        .into_iter()
        .map(|(e, _)| e)
        .collect();
    assert_eq!(found, vec![5, 10, 12]);
    let metrics = MetricSeries::read(&dir.path().join(pretrain::METRICS_FILE)).unwrap();
    assert_eq!(metrics, out.metrics);
    assert_eq!(out.clip_positions.len(), 12);

    let last = load_checkpoint(&dir.path().join("ckpt_12.pivt")).unwrap();
    assert_eq!(last.epoch, 12);
    assert_eq!(last.model, out.model);
    assert_eq!(last.adam.as_ref(), Some(&out.adam));

    let analysis = pretrain::analyze_stop(&metrics, 3, 4, &out.saved_epochs).unwrap();
    assert!(out.saved_epochs.contains(&analysis.selected_checkpoint_epoch));
    assert!((1..=12).contains(&analysis.e_star));
}

#[test]
fn pretraining_is_reproducible() {
    let b = tiny_corpus("", 3);
    let labels = mining::mine_corpus(&b, 1).unwrap();
    let mut cfg = tiny_train(4, PoolMode::Mean);
    cfg.augment.in_task = true;
    cfg.augment.sort = true;
    cfg.augment.swap = true;
    cfg.augment.unique = true;
    let a = pretrain::pretrain(&b, &labels, &cfg, None).unwrap();
    let c = pretrain::pretrain(&b, &labels, &cfg, None).unwrap();
    assert_eq!(a.metrics.to_csv(), c.metrics.to_csv());
    assert_eq!(a.model, c.model);
    cfg.seed += 1;
    let d = pretrain::pretrain(&b, &labels, &cfg, None).unwrap();
    assert_ne!(a.model, d.model);
}

#[test]
fn transfer_tasks_run_from_a_checkpoint() {
    let source = tiny_corpus("", 4);
    let labels = mining::mine_corpus(&source, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pretrain::pretrain(&source, &labels, &tiny_train(5, PoolMode::Tfenc), Some(dir.path())).unwrap();
    let ckpt_path = dir.path().join("ckpt_5.pivt");
    let before = std::fs::read(&ckpt_path).unwrap();
    let ckpt = load_checkpoint(&ckpt_path).unwrap();

    let target = tiny_corpus(corpus::TRANSFER_NAMESPACE, 5);
    let step_texts: Vec<&str> = target.steps.iter().map(|s| s.text.as_str()).collect();
    assert!(source.steps.iter().all(|s| !step_texts.contains(&s.text.as_str())));

    for task in DownstreamTask::ALL {
        let n = task.num_classes(&target);
        let cfg = FinetuneConfig {
            task,
            epochs: 2,
            batch_size: 4,
            seed: 1,
            ..FinetuneConfig::default()
        };
        let mut a = TunedModel::from_pretrained(&ckpt.model, task, n, 1, false).unwrap();
        let log = downstream::finetune(&mut a, &target, &cfg).unwrap();
        assert_eq!(log.epoch_loss.len(), 2);
        assert!(log.epoch_loss.iter().all(|l| l.is_finite()));
        let mut b = TunedModel::from_pretrained(&ckpt.model, task, n, 1, false).unwrap();
        downstream::finetune(&mut b, &target, &cfg).unwrap();
        let (ra, rb) = (downstream::evaluate(&a, &target).unwrap(), downstream::evaluate(&b, &target).unwrap());
        assert_eq!(ra, rb);
        assert_eq!(ra.correct, ra.per_class.iter().map(|c| c.correct).sum::<usize>());
        assert_eq!(ra.n, ra.per_class.iter().map(|c| c.total).sum::<usize>());
        assert!((ra.accuracy - 100.0 * ra.correct as f64 / ra.n as f64).abs() < 1e-12);
        assert_ne!(a.encoder, ckpt.model.encoder);
    }
    assert_eq!(std::fs::read(&ckpt_path).unwrap(), before);
}

#[test]
fn frozen_encoder_stays_fixed() {
    let source = tiny_corpus("", 6);
    let cfg = tiny_train(1, PoolMode::Tfenc);
    let model_cfg = pretrain::resolve_model_config(&source, &cfg.model).unwrap();
    let target = tiny_corpus(corpus::TRANSFER_NAMESPACE, 7);
    let task = DownstreamTask::StepForecasting;
    let mut m = TunedModel::from_scratch(&model_cfg, task, task.num_classes(&target), 0, false).unwrap();
    let enc = m.encoder.clone();
    let ft = FinetuneConfig {
        task,
        epochs: 2,
        freeze_encoder: true,
        ..FinetuneConfig::default()
    };
    downstream::finetune(&mut m, &target, &ft).unwrap();
    assert_eq!(m.encoder, enc);
    assert!(m.mask.iter().any(|v| *v != 0.0));
}
