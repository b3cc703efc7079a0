use std::fs;

use proptest::prelude::*;
use voxmim::diffcore::{Tape, Tensor};
use voxmim::params::ParamSet;
use voxmim::rng;
use voxmim::scenegen::MultiViewClip;
use voxmim::temporal::Strategy;
use voxmim::trainer::{
    ablate, evaluate, forward_pipeline, generate_dataset, init_params, load_dataset, read_losses, settings, toy_clip, toy_config, train,
    write_ablation_csv, write_render, AdamW, Axis, Checkpoint, Config, ConfigError, ForwardOptions, PipelineError, RunOptions, TrainError,
    Trainer, METRICS_HEADER,
};

fn forward_loss(clip: &MultiViewClip, cfg: &Config, params: &ParamSet, seed: u64) -> Result<f64, PipelineError> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true).unwrap();
    let fwd = forward_pipeline(&mut tape, clip, cfg, &b, &mut rng::stream(seed, &[1]), &ForwardOptions { jitter: true, normals: None })?;
    Ok(tape.value(fwd.loss).item())
}

#[test]
fn default_config_roundtrips_and_is_valid() {
    let c = Config::default();
    c.validate().unwrap();
    let text = c.serialize();
    let back = Config::parse(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.serialize(), text);
    assert_eq!(Config::parse("").unwrap(), c);
    assert_eq!(c.hash().len(), 64);
}

#[test]
fn config_overlays_and_rejects() {
    let c = Config::parse("# desk run\nrenderer.lambda_rgb=3\ntemporal.strategy=short\ngrid.dims=16,16,2\n").unwrap();
    assert_eq!(c.renderer.lambda_rgb, 3.0);
    assert_eq!(c.temporal.strategy, Strategy::Short);
    assert_eq!(c.grid.dims, [16, 16, 2]);
    assert_ne!(c.hash(), Config::default().hash());

    assert_eq!(Config::parse("renderer.lamda_rgb=3"), Err(ConfigError::UnknownKey("renderer.lamda_rgb".into())));
    assert!(matches!(Config::parse("masking.rho=1.5"), Err(ConfigError::OutOfRange { .. })));
    assert!(matches!(Config::parse("scene.views=two"), Err(ConfigError::Parse { .. })));
    assert!(matches!(Config::parse("grid.dims=4,4"), Err(ConfigError::Parse { .. })));
    assert!(matches!(Config::parse("temporal.strategy=sideways"), Err(ConfigError::Parse { .. })));
    assert!(matches!(Config::parse("scene.width=62"), Err(ConfigError::OutOfRange { .. })));
    assert!(matches!(Config::parse("scene.window=1"), Err(ConfigError::OutOfRange { .. })));
    assert!(Config::parse("scene.window=1\ntemporal.strategy=none").is_ok());
    assert!(matches!(Config::parse("novalue"), Err(ConfigError::Syntax(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_serialize_parse_is_a_fixed_point(lr in 1e-6f64..0.5, rho in 0.0f64..=1.0, tau in 0.1f64..100.0, seed in any::<u64>(), s in 0usize..5) {
        let mut c = Config::default();
        c.optimizer.lr = lr;
        c.masking.rho = rho;
        c.masking.tau = tau;
        c.scene.seed = seed;
        c.temporal.strategy = Strategy::ALL[s];
        let once = Config::parse(&c.serialize()).unwrap();
        prop_assert_eq!(&once, &c);
        prop_assert_eq!(Config::parse(&once.serialize()).unwrap(), once);
    }
}

#[test]
fn adamw_matches_hand_computation() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let mut g = ParamSet::new();
    g.insert("w", Tensor::new(vec![2], vec![0.5, -3.0]).unwrap());
    let (lr, wd, b1, b2, eps) = (0.1, 0.01, 0.9, 0.999, 1e-8);
    let mut opt = AdamW::new(&p, lr, wd, b1, b2, eps);
    let mut expect = [1.0f64, -2.0];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for t in 1..=3 {
        let grad = [0.5, -3.0];
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            expect[i] -= lr * (mh / (vh.sqrt() + eps) + wd * expect[i]);
        }
        opt.step(&mut p, &g);
    }
    let got = p.get("w").unwrap().data();
    for i in 0..2 {
        assert!((got[i] - expect[i]).abs() < 1e-15);
    }
    // the first bias-corrected step is lr·sign(g) plus decay
    let mut q = ParamSet::new();
    q.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap());
    let mut g1 = ParamSet::new();
    g1.insert("w", Tensor::new(vec![1], vec![-7.0]).unwrap());
    AdamW::new(&q, 0.01, 0.0, b1, b2, eps).step(&mut q, &g1);
    assert!((q.get("w").unwrap().data()[0] - 0.01).abs() < 1e-9);
}

#[test]
fn pipeline_is_deterministic_and_scales_to_zero() {
    let cfg = toy_config(Strategy::Both, 3);
    let clip = toy_clip(&cfg, 11);
    let params = init_params(&cfg, 5);
    let a = forward_loss(&clip, &cfg, &params, 9).unwrap();
    let b = forward_loss(&clip, &cfg, &params, 9).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(a > 0.0);

    let mut zero = cfg.clone();
    zero.renderer.lambda_rgb = 0.0;
    zero.renderer.lambda_depth = 0.0;
    for seed in 0..3 {
        assert_eq!(forward_loss(&clip, &zero, &init_params(&zero, seed), seed).unwrap(), 0.0);
    }

    let e = evaluate(&clip, &cfg, &params, 0).unwrap();
    let d = &e.diagnostics;
    assert!(d.drop < 3 && d.rays == 4);
    assert!(d.masked_fraction > 0.0 && d.masked_fraction < 1.0);
    assert!(d.mean_weight_sum >= 0.0 && d.mean_weight_sum <= 1.0);
    assert!((d.loss - (d.rgb_term + d.depth_term)).abs() < 1e-12);
    assert!(e.reconstruction_error > 0.0);
    assert_eq!(evaluate(&clip, &cfg, &params, 0).unwrap(), e);
}

#[test]
fn single_frame_none_is_masked_rendering() {
    let cfg = toy_config(Strategy::None, 1);
    let clip = toy_clip(&toy_config(Strategy::Both, 3), 2);
    let params = init_params(&cfg, 1);
    let e = evaluate(&clip, &cfg, &params, 4).unwrap();
    assert_eq!(e.diagnostics.drop, 0);
    assert!(e.diagnostics.loss.is_finite());
    // strategy none keeps no temporal parameters
    assert!(params.iter().all(|(k, _)| !k.starts_with("temporal.")));
}

#[test]
fn pipeline_rejects_mismatched_clips_and_names_overflowing_stages() {
    let cfg = toy_config(Strategy::Both, 2);
    let clip = toy_clip(&cfg, 1);
    let params = init_params(&cfg, 1);

    let mut wide = cfg.clone();
    wide.scene.views = 2;
    assert!(matches!(forward_loss(&clip, &wide, &params, 0), Err(PipelineError::Mismatch(_))));
    let mut long = cfg.clone();
    long.scene.window = 3;
    assert!(matches!(forward_loss(&clip, &long, &params, 0), Err(PipelineError::Mismatch(_))));

    // values that overflow inside the named stage
    let cases: [(&[&str], f64, &str); 3] = [
        (&["encoder.conv0.weight"], 1e308, "encoder"),
        (&["temporal.fuse.hidden.bias", "temporal.fuse.out.weight"], 1e300, "temporal"),
        (&["renderer.log_sharpness"], 800.0, "renderer"),
    ];
    for (names, value, stage) in cases {
        let mut bad = params.clone();
        for name in names {
            bad.get_mut(name).unwrap().data_mut().fill(value);
        }
        let err = forward_loss(&clip, &cfg, &bad, 0).expect_err(stage);
        assert!(err.to_string().starts_with(stage), "{stage}: {err}");
    }
}

#[test]
fn training_writes_metrics_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(Strategy::Both, 3);
    cfg.optimizer.checkpoint_every = 2;
    let clips = vec![toy_clip(&cfg, 7)];

    let one = train(&cfg, &clips, &RunOptions { out: dir.path().join("one"), steps: Some(1), resume: None }).unwrap();
    let text = fs::read_to_string(dir.path().join("one/metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines[1].split(',').count(), 6);
    assert!(!text.contains('\r'));
    assert!(one.checkpoint.exists());

    let a = train(&cfg, &clips, &RunOptions { out: dir.path().join("a"), steps: Some(5), resume: None }).unwrap();
    let b = train(&cfg, &clips, &RunOptions { out: dir.path().join("b"), steps: Some(5), resume: None }).unwrap();
    let la = read_losses(&dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(la, read_losses(&dir.path().join("b/metrics.csv")).unwrap());
    assert_eq!(la.len(), 5);
    assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
    assert!(dir.path().join("a/checkpoint_2.mv4d").exists() && dir.path().join("a/checkpoint_4.mv4d").exists());

    // resume at step 2 and continue to 5
    let resumed = dir.path().join("r");
    fs::create_dir_all(&resumed).unwrap();
    let r = train(&cfg, &clips, &RunOptions { out: resumed.clone(), steps: Some(5), resume: Some(dir.path().join("a/checkpoint_2.mv4d")) }).unwrap();
    assert_eq!(r.metrics.iter().map(|m| m.loss).collect::<Vec<_>>(), la[2..].to_vec());
    assert_eq!(fs::read(&r.checkpoint).unwrap(), fs::read(&a.checkpoint).unwrap());

    let mut other = cfg.clone();
    other.renderer.lambda_rgb = 1.0;
    let err = train(&other, &clips, &RunOptions { out: dir.path().join("x"), steps: Some(3), resume: Some(a.checkpoint.clone()) });
    assert!(matches!(err, Err(TrainError::ConfigHash { .. })));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(Strategy::Short, 2);
    let clips = vec![toy_clip(&cfg, 3)];
    let mut t = Trainer::new(cfg.clone(), &clips, 21);
    t.step().unwrap();
    t.step().unwrap();
    let ck = t.checkpoint();
    let path = dir.path().join("ck.mv4d");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path, &cfg).unwrap();
    assert_eq!(back, ck);
    let (c2, p2) = Checkpoint::load_for_inference(&path).unwrap();
    assert_eq!((c2, p2), (cfg, ck.params));
}

#[test]
fn batch_reduction_is_independent_of_thread_count() {
    let mut cfg = toy_config(Strategy::Long, 3);
    cfg.optimizer.batch = 3;
    let clips = vec![toy_clip(&cfg, 1), toy_clip(&cfg, 2)];
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut t = Trainer::new(cfg.clone(), &clips, 3);
            let losses: Vec<u64> = (0..3).map(|_| t.step().unwrap().loss.to_bits()).collect();
            (losses, t.params)
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn divergence_aborts() {
    let mut cfg = toy_config(Strategy::None, 1);
    cfg.renderer.lambda_depth = 1e9;
    let clips = vec![toy_clip(&toy_config(Strategy::Both, 2), 1)];
    let mut t = Trainer::new(cfg, &clips, 0);
    assert!(matches!(t.step(), Err(TrainError::Diverged { step: 0, .. })));
}

#[test]
fn ablation_axes_have_the_expected_rows_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(Strategy::Both, 5);
    let clips = vec![toy_clip(&cfg, 8)];
    let w = settings(&cfg, Axis::Window);
    assert_eq!(w.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>(), ["1", "3", "4", "5"]);
    assert_eq!(w[0].1.temporal.strategy, Strategy::None);
    let s = settings(&cfg, Axis::Strategy);
    assert_eq!(s.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>(), ["none", "warp-cat", "short", "long", "both"]);

    let mut texts = Vec::new();
    for run in 0..2 {
        let mut rows = ablate(&cfg, &clips, Axis::Window, 2).unwrap();
        rows.extend(ablate(&cfg, &clips, Axis::Strategy, 2).unwrap());
        assert_eq!(rows.len(), 9);
        assert!(rows.iter().all(|r| r.render_loss.is_finite() && r.reconstruction_error.is_finite()));
        let path = dir.path().join(format!("ablate{run}.csv"));
        write_ablation_csv(&rows, &path).unwrap();
        texts.push(fs::read_to_string(path).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    assert_eq!(texts[0].lines().count(), 10);
}

#[test]
fn dataset_generation_and_dense_render() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(Strategy::Both, 2);
    cfg.scene.clips = 2;
    let dirs = generate_dataset(&cfg, dir.path(), false).unwrap();
    assert_eq!(dirs.len(), 2);
    let clips = load_dataset(dir.path()).unwrap();
    assert_eq!(clips.len(), 2);
    assert_ne!(clips[0], clips[1]);
    assert_eq!(load_dataset(&dirs[1]).unwrap()[0], clips[1]);

    let out = dir.path().join("render");
    write_render(&clips[0], &cfg, &init_params(&cfg, 0), 0, &out).unwrap();
    for name in ["rgb_v0.ppm", "depth_v0.ppm", "target_v0.ppm"] {
        let bytes = fs::read(out.join(name)).unwrap();
        assert!(bytes.starts_with(b"P6\n16 12\n255\n"), "{name}");
    }
    let csv = fs::read_to_string(out.join("render.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn overfit_smoke_single_static_clip() {
    let mut cfg = Config::default();
    cfg.scene.ego_speed = 0.0;
    cfg.temporal.strategy = Strategy::None;
    cfg.optimizer.lr = 2e-3;
    cfg.renderer.log_sharpness_init = 2.0;
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, dir.path(), false).unwrap();
    let clips = load_dataset(dir.path()).unwrap();
    let mut t = Trainer::new(cfg.clone(), &clips, cfg.scene.seed);
    let initial = evaluate(&clips[0], &cfg, &t.params, 0).unwrap().diagnostics.loss;
    for _ in 0..500 {
        t.step().unwrap();
    }
    let last = evaluate(&clips[0], &cfg, &t.params, 0).unwrap().diagnostics.loss;
    assert!(last < 0.2 * initial, "{initial} -> {last}");
}
