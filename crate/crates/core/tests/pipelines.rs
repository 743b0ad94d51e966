//! Pipeline equivalences, mask schedules and reporting on tiny synthetic runs.

use prq_core::checkpoint::Checkpoint;
use prq_core::data::{gen_synthetic, SyntheticSpec};
use prq_core::metrics::{compression_report, CompressionPolicy};
use prq_core::pipelines::{
    evaluate, init_network, run_pipeline, DataConfig, EpochRecord, NoObserver, Observer, Phase,
    Pipeline, QuantPair, QuantSpec, TrainConfig,
};
use prq_core::prune::PruneMask;
use prq_core::report::{epochs_csv, policy_for, RunReport, EPOCH_CSV_HEADER};
use prq_core::{Dataset, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(model: &str, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: model.into(),
        seed: 5,
        epochs_prune: epochs,
        epochs_quant: 0,
        lr0: 0.02,
        batch_size: 16,
        data: DataConfig {
            seed: 5,
            n_per_class: 12,
            classes: 3,
            image_size: 8,
            val_fraction: 0.25,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn passthrough() -> QuantPair {
    QuantPair {
        weights: QuantSpec {
            bits: 32,
            base_bits: 1,
        },
        acts: QuantSpec {
            bits: 32,
            base_bits: 1,
        },
    }
}

fn bytes(ck: &Checkpoint) -> Vec<u8> {
    ck.to_bytes().unwrap()
}

fn accuracies(records: &[EpochRecord]) -> Vec<(f64, f64, f64)> {
    records
        .iter()
        .map(|r| (r.train_acc, r.eval_acc, r.lr))
        .collect()
}

#[test]
fn spq_without_pruning_or_quantization_is_baseline() {
    let base_cfg = tiny("desknet-r8", 3);
    let cfg = TrainConfig {
        prune_rates: vec![0.0],
        stages: 1,
        quant: passthrough(),
        first_last_bits: 32,
        ..base_cfg.clone()
    };
    let (_, _, base) = run_pipeline(Pipeline::Baseline, &base_cfg, &mut NoObserver).unwrap();
    let (_, _, spq) = run_pipeline(Pipeline::Spq, &cfg, &mut NoObserver).unwrap();
    assert_eq!(accuracies(&base.records), accuracies(&spq.records));
    assert_eq!(bytes(&base.checkpoint), bytes(&spq.checkpoint));
}

#[test]
fn single_stage_ppq_at_rate_zero_is_baseline() {
    let base_cfg = tiny("desknet-s", 4);
    let cfg = TrainConfig {
        prune_rates: vec![0.0],
        stages: 1,
        quant: passthrough(),
        first_last_bits: 32,
        ..base_cfg.clone()
    };
    let (_, _, base) = run_pipeline(Pipeline::Baseline, &base_cfg, &mut NoObserver).unwrap();
    let (_, _, ppq) = run_pipeline(Pipeline::Ppq, &cfg, &mut NoObserver).unwrap();
    assert_eq!(accuracies(&base.records), accuracies(&ppq.records));
    assert_eq!(bytes(&base.checkpoint), bytes(&ppq.checkpoint));
}

#[derive(Default)]
struct MaskLog {
    conv2: Vec<Option<PruneMask>>,
    stages: Vec<usize>,
}

impl Observer for MaskLog {
    fn after_epoch(&mut self, record: &EpochRecord, net: &Network) {
        self.conv2.push(net.convs()[1].mask.clone());
        self.stages.push(record.stage);
    }
}

#[test]
fn staged_masks_on_a_sixteen_filter_layer() {
    let cfg = TrainConfig {
        stages: 2,
        prune_rates: vec![0.15, 0.3],
        epochs_quant: 1,
        ..tiny("desknet-s", 4)
    };
    let mut log = MaskLog::default();
    run_pipeline(Pipeline::Ppq, &cfg, &mut log).unwrap();
    assert_eq!(log.stages, vec![0, 1, 1, 2, 2]);
    let counts: Vec<usize> = log
        .conv2
        .iter()
        .map(|m| m.as_ref().map_or(0, |m| m.pruned_count))
        .collect();
    assert_eq!(counts, vec![0, 2, 2, 4, 4]);
    let first = log.conv2[1].as_ref().unwrap();
    let second = log.conv2[3].as_ref().unwrap();
    assert_eq!(first.filters(), 16);
    assert!(first.is_subset_of(second));
    assert_eq!(log.conv2[3], log.conv2[4]);
}

fn random_label_set(n: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        seed,
        n_per_class: n / 10,
        classes: 10,
        image_size: 8,
        noise: 1.0,
    };
    let mut ds = gen_synthetic(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ds.labels
        .iter_mut()
        .for_each(|l| *l = rng.random_range(0..10));
    ds
}

#[test]
fn evaluation_is_chance_on_random_labels_and_repeatable() {
    let ds = random_label_set(2000, 8);
    let mut net = init_network(&tiny("desknet-r8", 0), 10).unwrap();
    let acc = evaluate(&mut net, &ds, false).unwrap();
    // Binomial standard deviation at n = 2000 is about 0.0067.
    assert!((acc - 0.1).abs() < 0.04, "{acc}");
    assert_eq!(evaluate(&mut net, &ds, false).unwrap(), acc);
}

#[test]
fn passthrough_quantizers_do_not_change_evaluation() {
    let ds = random_label_set(200, 3);
    let mut net = init_network(&tiny("desknet-r8", 0), 10).unwrap();
    let fp = evaluate(&mut net, &ds, false).unwrap();
    let q = passthrough();
    net.set_quant(q.weight_config(), q.act_config(), 32)
        .unwrap();
    assert_eq!(evaluate(&mut net, &ds, true).unwrap(), fp);
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let cfg = tiny("desknet-s", 0);
    let init = Checkpoint::from_network(&init_network(&cfg, 3).unwrap());
    let (_, _, out) = run_pipeline(Pipeline::Baseline, &cfg, &mut NoObserver).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(bytes(&out.checkpoint), bytes(&init));
}

#[test]
fn reruns_are_identical() {
    let cfg = TrainConfig {
        stages: 2,
        prune_rates: vec![0.15, 0.3],
        epochs_quant: 1,
        ..tiny("desknet-s", 2)
    };
    let (_, _, a) = run_pipeline(Pipeline::Ppq, &cfg, &mut NoObserver).unwrap();
    let (_, _, b) = run_pipeline(Pipeline::Ppq, &cfg, &mut NoObserver).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));
}

#[test]
fn report_agrees_with_metrics_and_csv() {
    let cfg = TrainConfig {
        epochs_quant: 1,
        ..tiny("desknet-r8", 2)
    };
    let (net, train, out) = run_pipeline(Pipeline::Spq, &cfg, &mut NoObserver).unwrap();
    let report = RunReport::build(
        Pipeline::Spq,
        &cfg,
        &net,
        &out.records,
        train.normalization,
        train.image_size(),
    )
    .unwrap();
    let m = report.metrics.as_ref().unwrap();
    let arch = net.descriptor(train.image_size()).unwrap();
    let direct = compression_report(
        &arch,
        &CompressionPolicy::baseline(),
        &policy_for(Pipeline::Spq, &cfg),
    )
    .unwrap();
    assert_eq!(
        (m.size_ratio, m.bops_ratio),
        (direct.size_ratio, direct.bops_ratio)
    );
    assert_eq!(m.policy.conv_prune_rate, 0.3);

    let back = RunReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(
        report.final_eval_acc,
        out.records.last().map(|r| r.eval_acc)
    );
    assert!(report
        .mask_census
        .iter()
        .all(|c| c.pruned == c.filters * 3 / 10));
    assert!(report.epochs.iter().all(|r| r.phase == Phase::Spq));

    let csv = epochs_csv(&out.records);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(EPOCH_CSV_HEADER));
    assert_eq!(lines.count(), out.records.len());

    let bumped = report
        .to_json()
        .unwrap()
        .replace("\"schema_version\": 1", "\"schema_version\": 2");
    assert!(RunReport::from_json(&bumped).is_err());
}

#[test]
fn ppq_config_errors() {
    let cfg = TrainConfig {
        stages: 3,
        prune_rates: vec![0.1, 0.2],
        ..tiny("desknet-s", 3)
    };
    assert!(run_pipeline(Pipeline::Ppq, &cfg, &mut NoObserver).is_err());
    let cfg = TrainConfig {
        stages: 2,
        epochs_prune: 1,
        ..tiny("desknet-s", 1)
    };
    assert!(run_pipeline(Pipeline::Ppq, &cfg, &mut NoObserver).is_err());
}
