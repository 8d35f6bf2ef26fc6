use super::*;
use crate::body::toy::{joint_limits, toy_model};
use crate::data::{synth_generate, SynthConfig};
use nalgebra::Rotation3;

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        stage_steps: 4,
        validate_every: 2,
        validation_fraction: 0.25,
        architecture: Architecture {
            dae_hidden: vec![16, 8],
            atn_hidden: vec![16],
            psi_hidden: vec![16, 16],
        },
        ..TrainConfig::default()
    }
}

fn setup(frames: usize) -> (BodyModel, QuaternionBounds, Dataset) {
    let model = toy_model().unwrap();
    let bounds = QuaternionBounds::from_euler_limits(&joint_limits(), Some(0), 2000, 1);
    let cfg = SynthConfig {
        frames,
        seed: 11,
        ..SynthConfig::default()
    };
    let (data, _) = synth_generate(&model, &joint_limits(), &cfg).unwrap();
    (model, bounds, data)
}

#[test]
fn defaults_and_config_files() {
    let d = TrainConfig::default();
    assert_eq!((d.learning_rate, d.batch_size, d.keep, d.max_steps, d.stage_steps), (1e-3, 256, 0.8, 6000, 3000));
    let cfg = TrainConfig::from_toml("seed = 4\npreprocess = \"procrustes\"\n[weights]\nunpose = 0.0\n").unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.preprocess, Preprocess::Procrustes);
    assert_eq!(cfg.weights.unpose, 0.0);
    assert_eq!(cfg.weights.surface, 10.0);
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_ne!(cfg.fingerprint(), d.fingerprint());
    for bad in ["learning_rat = 1", "keep = 0.0", "missing_rate = 1.0", "[weights]\nsurface = -1.0", "preprocess = \"rotate\""] {
        assert!(matches!(TrainConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn stage_names_round_trip() {
    for s in [Stage::Base, Stage::Cascade(1), Stage::Cascade(3)] {
        assert_eq!(Stage::parse(&s.to_string()), Some(s));
    }
    assert_eq!(Stage::parse("cascade-0"), None);
}

#[test]
fn split_is_seeded_and_disjoint() {
    let (model, bounds, data) = setup(40);
    let trainer = Trainer::new(&model, bounds, small_config()).unwrap();
    let a = trainer.prepare(&data).unwrap();
    let b = trainer.prepare(&data).unwrap();
    assert_eq!((a.train.len(), a.validation.len()), (30, 10));
    assert_eq!(a.validation, b.validation);
    for f in &a.validation.frames {
        assert!(!a.train.frames.iter().any(|g| g.sequence == f.sequence && g.index == f.index));
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints_and_finite_logs() {
    let (model, bounds, data) = setup(24);
    let cfg = TrainConfig {
        cascades: 1,
        missing_rate: 0.2,
        ..small_config()
    };
    let run = || Trainer::new(&model, bounds.clone(), cfg.clone()).unwrap().train(&data).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.best, y.best);
        assert_eq!(x.last.to_archive().to_bytes(), y.last.to_archive().to_bytes());
        assert_eq!(x.metrics, y.metrics);
    }
    for row in a.iter().flat_map(|o| &o.metrics) {
        assert!(row.total.is_finite() && row.total >= 0.0);
        assert!(row.components.iter().all(|c| c.is_finite() && *c >= 0.0));
    }
    assert_eq!(a[1].metrics[0].components[0], 0.0, "cascade objective has no reconstruction term");
    assert!(a[0].metrics[1].validation.is_some() && a[0].metrics[0].validation.is_none());
    let other = Trainer::new(&model, bounds, TrainConfig { seed: 1, ..cfg }).unwrap().train(&data).unwrap();
    assert_ne!(other[0].last, a[0].last);
}

#[test]
fn cascade_stage_leaves_earlier_blocks_untouched() {
    let (model, bounds, data) = setup(24);
    let trainer = Trainer::new(&model, bounds, small_config()).unwrap();
    let prepared = trainer.prepare(&data).unwrap();
    let base = trainer.train_stage(Stage::Base, &prepared, None, 3).unwrap();
    let cascade = trainer.train_stage(Stage::Cascade(1), &prepared, Some(&base.best), 3).unwrap();
    let (before, after) = (&base.best.networks, &cascade.last.networks);
    assert_eq!(before.dae, after.dae);
    assert_eq!(before.atn, after.atn);
    assert_eq!(before.psi[0], after.psi[0]);
    assert_eq!(after.psi.len(), 2);
    assert_eq!(after.frozen, [BlockId::Dae, BlockId::Atn, BlockId::Psi(0)]);
    assert_eq!(cascade.last.step, base.best.step + 3);
    assert_eq!(cascade.last.meta["stage"], "cascade-1");
}

#[test]
fn stages_need_their_prerequisites() {
    let (model, bounds, data) = setup(16);
    let trainer = Trainer::new(&model, bounds.clone(), small_config()).unwrap();
    let prepared = trainer.prepare(&data).unwrap();
    assert!(matches!(trainer.train_stage(Stage::Cascade(1), &prepared, None, 1), Err(Error::Staging(_))));
    let base = trainer.train_stage(Stage::Base, &prepared, None, 1).unwrap();
    assert!(matches!(
        trainer.train_stage(Stage::Cascade(2), &prepared, Some(&base.best), 1),
        Err(Error::Staging(_))
    ));
    let procrustes = TrainConfig {
        preprocess: Preprocess::Procrustes,
        ..small_config()
    };
    let other = Trainer::new(&model, bounds, procrustes).unwrap();
    assert!(matches!(
        other.train_stage(Stage::Cascade(1), &prepared, Some(&base.best), 1),
        Err(Error::Staging(_))
    ));
}

#[test]
fn procrustes_training_ignores_global_rigid_motion() {
    let (model, bounds, data) = setup(24);
    let r = Rotation3::from_euler_angles(0.4, -1.1, 2.0);
    let t = Vec3::new(0.3, -2.0, 5.0);
    let mut moved = data.clone();
    for f in &mut moved.frames {
        for (p, &v) in f.points.iter_mut().zip(&f.valid) {
            if v {
                let q = r * Vec3::from(*p) + t;
                *p = [q.x, q.y, q.z];
            }
        }
    }
    let cfg = TrainConfig {
        preprocess: Preprocess::Procrustes,
        ..small_config()
    };
    let trainer = Trainer::new(&model, bounds, cfg).unwrap();
    let a = trainer.train(&data).unwrap();
    let b = trainer.train(&moved).unwrap();
    for (x, y) in a[0].metrics.iter().zip(&b[0].metrics) {
        assert!((x.total - y.total).abs() < 1e-9, "{} vs {}", x.total, y.total);
        if let (Some(u), Some(v)) = (x.validation, y.validation) {
            assert!((u.loss - v.loss).abs() < 1e-9);
        }
    }
}

#[test]
fn reconstruction_only_weights_skip_the_body() {
    let (model, bounds, data) = setup(16);
    let cfg = TrainConfig {
        missing_rate: 0.3,
        weights: LossWeights {
            beta: 0.0,
            phi: 0.0,
            joints: 0.0,
            surface: 0.0,
            unpose: 0.0,
            ..LossWeights::default()
        },
        ..small_config()
    };
    let trainer = Trainer::new(&model, bounds, cfg).unwrap();
    let out = trainer.train(&data).unwrap();
    let init = trainer.init_networks();
    assert_ne!(out[0].last.networks.dae, init.dae);
    assert_eq!(out[0].last.networks.atn, init.atn);
    assert!(out[0].metrics.iter().all(|r| r.components[1..].iter().all(|&c| c == 0.0)));
}

#[test]
fn metrics_log_has_one_line_per_step() {
    let rows = vec![
        MetricsRow {
            stage: Stage::Base,
            step: 1,
            total: 1.5,
            components: [1.0, 0.5, 0.0, 0.0, 0.0, 0.0],
            validation: None,
        },
        MetricsRow {
            stage: Stage::Cascade(1),
            step: 2,
            total: 0.25,
            components: [0.0; 6],
            validation: Some(Validation {
                loss: 0.5,
                joint_gap: 0.1,
                surface_gap: 0.01,
            }),
        },
    ];
    let mut out = Vec::new();
    write_metrics(&rows, &mut out, true).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines[1], "base,1,1.5,1,0.5,0,0,0,0,,,");
    assert_eq!(lines[2], "cascade-1,2,0.25,0,0,0,0,0,0,0.5,0.1,0.01");
}
