use pemoe::corpus::{generate_synthetic, SyntheticSpec};
use pemoe::eval::evaluate;
use pemoe::model::{read_checkpoint, write_checkpoint};
use pemoe::pipeline::{init_model, run_mining, run_stage1, run_stage2, split, train_all, ExperimentConfig};
use pemoe::train::Phase;
use pemoe::{Corpus, Fusion, Platform};

fn small() -> (Corpus, Corpus, ExperimentConfig) {
    let corpus = generate_synthetic(&SyntheticSpec {
        locations_per_platform: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut config = ExperimentConfig::default();
    config.train.stage1_epochs = 20;
    config.train.stage2_epochs = 3;
    let (train, val) = split(&corpus, &config).unwrap();
    (train, val, config)
}

#[test]
fn phase_a_loss_falls_for_every_expert() {
    let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let mut config = ExperimentConfig::default();
    config.train.stage1_epochs = 20;
    let (train, _) = split(&corpus, &config).unwrap();
    let mut model = init_model(&train, &config).unwrap();
    let log = run_stage1(&mut model, &train, &config).unwrap();
    for p in Platform::ALL {
        let l = log.losses(Phase::A, Some(p));
        assert_eq!(l.len(), 20);
        assert!(l[19] < l[0], "{p}: {l:?}");
        let access = &log.phase_a_access[p];
        for id in &access.item_ids {
            assert_eq!(train.item(*id).unwrap().platform, p);
        }
    }
    assert_eq!(log.losses(Phase::B, None).len(), 20);
}

#[test]
fn staged_pipeline_matches_train_all() {
    let (train, _, config) = small();
    let all = train_all(&train, &config).unwrap();
    let mut model = init_model(&train, &config).unwrap();
    run_stage1(&mut model, &train, &config).unwrap();
    // Stage boundaries pass through checkpoints.
    let model = read_checkpoint(&write_checkpoint(&model)).unwrap();
    assert_eq!(model, all.stage1);
    let triplets = run_mining(&model, &train, &config).unwrap();
    assert_eq!(triplets, all.triplets);
    let (stage2, _) = run_stage2(&model, &train, &triplets, &config).unwrap();
    assert_eq!(write_checkpoint(&stage2), write_checkpoint(&all.model));
}

#[test]
fn evaluation_ignores_thread_count() {
    let (train, val, config) = small();
    let model = train_all(&train, &config).unwrap().model;
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&model, Fusion::Gated, &val, &[20], "m").unwrap())
    };
    let one = run(1);
    assert_eq!(one.metric_lines(), run(4).metric_lines());
    assert!(one.recall(1) <= one.recall(5) && one.recall(5) <= one.recall(20));
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let (train, val, config) = small();
    let model = train_all(&train, &config).unwrap().model;
    let restored = read_checkpoint(&write_checkpoint(&model)).unwrap();
    let a = evaluate(&model, Fusion::Gated, &val, &[], "m").unwrap();
    let b = evaluate(&restored, Fusion::Gated, &val, &[], "m").unwrap();
    assert_eq!(a, b);
}
