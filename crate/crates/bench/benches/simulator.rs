//! Hot-path benchmarks: the exact 2^N decoder, privacy-checked matrix
//! construction, one federated training round, and score clustering.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use fedsim_core::evaluation::{cluster_detect, Polarity};
use fedsim_core::federation::{run_training, TrainingRun};
use fedsim_core::fedgt::{
    build_assignment, decode_marginals, ChannelModel, GroupOutcomes, MatrixStrategy,
};
use fedsim_core::harness::{
    prepare_data, DatasetSpec, ExperimentConfig, FedgtParams, Method, ModeSpec, PartitionKind,
    PipelineSpec, QiParams, SeedPlan, SCHEMA_VERSION,
};
use fedsim_core::model::{ModelKind, TrainConfig};

fn bench_decoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_marginals");
    for n in [10usize, 12, 15] {
        let l = 6;
        let a = build_assignment(n, l, 5.min(n - 1), 7, MatrixStrategy::Prefixed, 1).unwrap();
        let outcomes = GroupOutcomes {
            round_index: 1,
            outcomes: (0..l).map(|i| i % 2 == 0).collect(),
        };
        let ch = ChannelModel::new(0.05, 1.0 / 3.0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| decode_marginals(black_box(&outcomes), black_box(&a), black_box(&ch)))
        });
    }
    group.finish();
}

fn bench_matrix_construction(c: &mut Criterion) {
    c.bench_function("build_assignment_15x6x5", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed = seed.wrapping_add(1);
            build_assignment(15, 6, 5, black_box(seed), MatrixStrategy::Prefixed, 1).unwrap()
        })
    });
}

fn training_config() -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment_id: "bench-round".into(),
        master_seed: 7,
        num_clients: 15,
        rounds: 1,
        repetitions: 1,
        dataset: DatasetSpec::Synthetic {
            classes: 5,
            features: 16,
            rows: 3000,
            separation: 2.5,
        },
        partition: PartitionKind::Iid,
        attackers: vec![],
        noise: false,
        methods: vec![Method::Cos],
        fedgt: FedgtParams::default(),
        qi: QiParams::default(),
        test_rounds: Some(vec![]),
        mode: ModeSpec::Silo,
        pipeline: PipelineSpec::Plain,
        train: TrainConfig {
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            model_kind: ModelKind::Logistic,
        },
        validation_fraction: 0.1,
    }
}

fn bench_training_round(c: &mut Criterion) {
    let cfg = training_config();
    let seeds = SeedPlan::new(cfg.master_seed);
    let data = prepare_data(&cfg, &seeds).unwrap();
    c.bench_function("federated_round_15_clients", |b| {
        b.iter(|| {
            let run = TrainingRun {
                shards: &data.shards,
                valset: &data.valset,
                train_cfg: &cfg.train,
                rounds: 1,
                init_seed: seeds.model_init(0),
                round_seed: seeds.round_base(0),
                selection: None,
            };
            run_training(black_box(&run)).unwrap()
        })
    });
}

fn bench_clustering(c: &mut Criterion) {
    let scores: Vec<f64> = (0..15)
        .map(|i| if i < 5 { -40.0 - i as f64 * 3.0 } else { 10.0 + i as f64 })
        .collect();
    c.bench_function("cluster_detect_15_scores", |b| {
        b.iter(|| cluster_detect(black_box(&scores), Polarity::LowIsMalicious).unwrap())
    });
}

criterion_group!(
    benches,
    bench_decoder,
    bench_matrix_construction,
    bench_training_round,
    bench_clustering
);
criterion_main!(benches);
