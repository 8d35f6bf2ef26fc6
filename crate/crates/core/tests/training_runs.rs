//! Short real training runs on the toy body.

use mocap_surface::body::toy::{joint_limits, toy_model};
use mocap_surface::body::BodyModel;
use mocap_surface::data::{synth_generate, Dataset, GroundTruth, SynthConfig};
use mocap_surface::eval::evaluate;
use mocap_surface::inference::infer;
use mocap_surface::losses::{LossWeights, Objective, QuaternionBounds};
use mocap_surface::networks::Architecture;
use mocap_surface::training::{Stage, TrainConfig, Trainer};

fn setup(frames: usize, seed: u64) -> (BodyModel, QuaternionBounds, Dataset, GroundTruth) {
    let model = toy_model().unwrap();
    let bounds = QuaternionBounds::from_euler_limits(&joint_limits(), Some(model.tree().root()), 2000, 1);
    let cfg = SynthConfig {
        frames,
        seed,
        ..SynthConfig::default()
    };
    let (data, gt) = synth_generate(&model, &joint_limits(), &cfg).unwrap();
    (model, bounds, data, gt)
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        stage_steps: steps,
        keep: 1.0,
        validate_every: 50,
        architecture: Architecture {
            dae_hidden: vec![128, 64],
            atn_hidden: vec![128, 128],
            psi_hidden: vec![256, 256],
        },
        ..TrainConfig::default()
    }
}

#[test]
fn cascade_training_loss_does_not_exceed_the_base() {
    let (model, bounds, data, _) = setup(512, 21);
    let trainer = Trainer::new(&model, bounds, config(400)).unwrap();
    let prepared = trainer.prepare(&data).unwrap();
    let base = trainer.train_stage(Stage::Base, &prepared, None, 400).unwrap();
    let cascade = trainer.train_stage(Stage::Cascade(1), &prepared, Some(&base.best), 400).unwrap();
    let before = trainer.validate(&base.best.networks, &prepared.train, 1, Objective::Refine).unwrap().loss;
    let after = trainer.validate(&cascade.best.networks, &prepared.train, 2, Objective::Refine).unwrap().loss;
    assert!(after <= before, "cascade {after} vs base {before}");
}

#[test]
fn unposing_loss_improves_attention_joints_on_a_small_set() {
    let (model, bounds, data, _) = setup(256, 22);
    let held_cfg = SynthConfig {
        frames: 128,
        seed: 1022,
        ..SynthConfig::default()
    };
    let (held, truth) = synth_generate(&model, &joint_limits(), &held_cfg).unwrap();
    let jin_error = |unpose: f64| {
        let cfg = TrainConfig {
            weights: LossWeights {
                unpose,
                ..LossWeights::default()
            },
            ..config(400)
        };
        let trainer = Trainer::new(&model, bounds.clone(), cfg).unwrap();
        let out = trainer.train(&data).unwrap();
        let pred = infer(&out[0].best, &model, &held, 128).unwrap();
        evaluate(&pred, &model, &truth, 128).unwrap().overall.joints_in.unwrap()
    };
    let (with, without) = (jin_error(LossWeights::default().unpose), jin_error(0.0));
    assert!(with < without, "J_in with unposing {:.1} mm, without {:.1} mm", with * 1e3, without * 1e3);
}
