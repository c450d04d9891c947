use ikl_core::align::{train_alignment, AlignTrainConfig};
use ikl_core::data::{gen_norm_sphere, load_json, save_json, LabeledDataset, Split};
use ikl_core::gantoy::{continue_gan, train_gan, GanConfig, GanKernel, GanState, RingTarget};
use ikl_core::numerics::Prng;
use ikl_core::rks::{run_pipeline, Method, PipelineConfig};
use ikl_core::spectral::{SpectralSampler, SpectralSource};

fn splits(d: usize, seed: u64) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    let root = Prng::new(seed);
    (
        gen_norm_sphere(240, d, &mut root.split("train")).with_split(Split::Train),
        gen_norm_sphere(120, d, &mut root.split("val")).with_split(Split::Validation),
        gen_norm_sphere(120, d, &mut root.split("test")).with_split(Split::Test),
    )
}

fn small_pipeline(method: Method) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        method,
        feature_counts: vec![16, 64],
        seed: 4,
        ..PipelineConfig::default()
    };
    cfg.align.lr = 1e-3;
    cfg.align.max_iters = 40;
    cfg.align.eval_every = 10;
    cfg
}

#[test]
fn pipeline_reports_every_method_and_feature_count() {
    let (train, val, test) = splits(3, 1);
    for method in [Method::Rff, Method::Ikl, Method::Sm] {
        let cfg = small_pipeline(method);
        let entries = run_pipeline(&train, &val, &test, &cfg).unwrap();
        assert_eq!(entries.iter().map(|e| e.m_features).collect::<Vec<_>>(), vec![16, 64]);
        for e in &entries {
            assert_eq!((e.method, e.d, e.seed), (method, 3, 4));
            assert!((0.0..=1.0).contains(&e.test_error) && (0.0..=1.0).contains(&e.val_error));
            assert!(cfg.lambdas.contains(&e.chosen_lambda));
        }
        if method == Method::Rff {
            assert!(entries.iter().all(|e| e.stage1_iters == 0));
        }
        assert_eq!(entries, run_pipeline(&train, &val, &test, &cfg).unwrap());
    }
}

#[test]
fn low_dimensional_sphere_is_learnable_with_a_fixed_kernel() {
    let (train, val, test) = splits(2, 2);
    let cfg = PipelineConfig {
        feature_counts: vec![256],
        ..small_pipeline(Method::Rff)
    };
    let entries = run_pipeline(&train, &val, &test, &cfg).unwrap();
    assert!(entries[0].test_error < 0.15, "{entries:?}");
}

#[test]
fn trained_sampler_survives_a_json_roundtrip() {
    let (train, val, _) = splits(2, 3);
    let mut sampler = SpectralSampler::new(2, &[8, 8], &mut Prng::new(5)).unwrap();
    let cfg = AlignTrainConfig {
        lr: 1e-3,
        max_iters: 30,
        eval_every: 10,
        ..AlignTrainConfig::default()
    };
    let log = train_alignment(&train, Some(&val), &mut sampler, &cfg).unwrap();
    assert!(log.iters_run <= 30 && !log.rows.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sampler.json");
    save_json(&path, &sampler).unwrap();
    let loaded: SpectralSampler = load_json(&path).unwrap();
    let nu = Prng::new(6).normal_matrix(32, 2);
    assert_eq!(sampler.map(&nu).unwrap(), loaded.map(&nu).unwrap());
    assert_eq!(sampler.params(), loaded.params());
}

#[test]
fn gan_checkpoint_resumes_to_the_uninterrupted_run() {
    let cfg = GanConfig {
        kernel: GanKernel::Ikl,
        batch_size: 8,
        m: 32,
        generator_hidden: vec![8],
        critic_hidden: vec![8],
        embed_dim: 4,
        sampler_hidden: vec![8],
        iters: 6,
        eval_every: 2,
        eval_size: 50,
        ..GanConfig::default()
    };
    let target = RingTarget::from_config(&cfg);
    let prng = Prng::new(cfg.seed);
    let full = train_gan(&cfg, &target, &prng).unwrap();
    assert!(full.divergence.is_none());

    let first = train_gan(
        &GanConfig {
            iters: 3,
            ..cfg.clone()
        },
        &target,
        &prng,
    )
    .unwrap()
    .state;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    save_json(&path, &first).unwrap();
    let restored: GanState = load_json(&path).unwrap();
    assert_eq!(restored, first);
    let resumed = continue_gan(restored, &cfg, &target, &prng).unwrap().state;
    assert_eq!(resumed.generator, full.state.generator);
    assert_eq!(resumed.critic, full.state.critic);
    assert_eq!(resumed.kernel, full.state.kernel);
    assert_eq!(resumed.log.last(), full.state.log.last());
}
