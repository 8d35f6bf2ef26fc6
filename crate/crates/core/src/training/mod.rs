//! Staged training: an end-to-end base stage (DAE, attention and the first
//! regressor) followed by cascade stages that each train one new regressor
//! with everything before it frozen.

mod adam;
mod preprocess;

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::body::{full_forward, inflate_template, BodyModel, PosedBody, DEFAULT_INFLATION};
use crate::data::{Dataset, FrameBatch};
use crate::error::{Error, Result};
use crate::geometry::{points_from_flat, Vec3};
use crate::losses::{
    combined_loss, loss_beta, loss_dae, loss_joints, loss_phi, loss_surface, loss_unpose, LossComponents, LossWeights,
    Objective, QuaternionBounds, SurfaceIndex,
};
use crate::networks::{Architecture, BlockId, Checkpoint, Mode, Networks, Prediction};

pub use adam::Adam;
pub use preprocess::{
    augment_missing, preprocess_dataset, preprocess_procrustes, preprocess_translate, procrustes_fit, restore,
    translation_fit, Preprocess, RigidTransform,
};

/// Training hyperparameters. Every field has a default, so a config file
/// only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Dropout keep probability on hidden layers.
    pub keep: f64,
    /// Steps per stage.
    pub stage_steps: usize,
    /// Cap on the total number of steps over all stages.
    pub max_steps: usize,
    /// Cascade stages after the base stage.
    pub cascades: usize,
    /// Fraction of valid landmarks hidden from the networks at each step.
    pub missing_rate: f64,
    pub seed: u64,
    pub preprocess: Preprocess,
    pub validation_fraction: f64,
    pub validate_every: usize,
    /// Outward template offset used by the surface terms, meters.
    pub inflation: f64,
    pub weights: LossWeights,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            keep: 0.8,
            stage_steps: 3000,
            max_steps: 6000,
            cascades: 0,
            missing_rate: 0.0,
            seed: 0,
            preprocess: Preprocess::Translate,
            validation_fraction: 0.1,
            validate_every: 100,
            inflation: DEFAULT_INFLATION,
            weights: LossWeights::default(),
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return bad("batch_size and validate_every must be positive".into());
        }
        if !(self.keep > 0.0 && self.keep <= 1.0) {
            return bad(format!("keep must lie in (0, 1], got {}", self.keep));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate must lie in [0, 1), got {}", self.missing_rate));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if !(self.inflation >= 0.0 && self.inflation.is_finite()) {
            return bad(format!("inflation must be >= 0, got {}", self.inflation));
        }
        let arch = &self.architecture;
        if [&arch.dae_hidden, &arch.atn_hidden, &arch.psi_hidden].iter().any(|h| h.is_empty() || h.contains(&0)) {
            return bad("every block needs at least one non-empty hidden layer".into());
        }
        self.weights.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// FNV-1a hash of the canonical serialization, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_toml().bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// One training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    /// Trains regressor `i >= 1`.
    Cascade(usize),
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Base => write!(f, "base"),
            Stage::Cascade(i) => write!(f, "cascade-{i}"),
        }
    }
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(Stage::Base),
            _ => s.strip_prefix("cascade-")?.parse().ok().filter(|&i| i > 0).map(Stage::Cascade),
        }
    }

    fn index(self) -> usize {
        match self {
            Stage::Base => 0,
            Stage::Cascade(i) => i,
        }
    }

    fn objective(self) -> Objective {
        match self {
            Stage::Base => Objective::Full,
            Stage::Cascade(_) => Objective::Refine,
        }
    }

    fn trainable(self) -> Vec<BlockId> {
        match self {
            Stage::Base => vec![BlockId::Dae, BlockId::Atn, BlockId::Psi(0)],
            Stage::Cascade(i) => vec![BlockId::Psi(i)],
        }
    }
}

/// Unsupervised validation metrics (no ground truth involved).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    /// Stage objective on the validation frames, without dropout. Landmarks
    /// are dropped as in training, from a fixed stream.
    pub loss: f64,
    /// Mean distance between attention joints and posed model joints, meters.
    pub joint_gap: f64,
    /// Mean distance from each landmark to its nearest patch vertex, meters.
    pub surface_gap: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub stage: Stage,
    pub step: usize,
    pub total: f64,
    /// Weighted terms: dae, beta, phi, joints, surface, unpose.
    pub components: [f64; 6],
    pub validation: Option<Validation>,
}

pub const METRICS_HEADER: &str =
    "stage,step,total,dae,beta,phi,joints,surface,unpose,val_loss,val_joint_gap,val_surface_gap";

/// Appends rows as delimited text; writes the header first if asked.
pub fn write_metrics(rows: &[MetricsRow], mut out: impl Write, header: bool) -> Result<()> {
    if header {
        writeln!(out, "{METRICS_HEADER}")?;
    }
    for r in rows {
        write!(out, "{},{},{}", r.stage, r.step, r.total)?;
        for c in r.components {
            write!(out, ",{c}")?;
        }
        match r.validation {
            Some(v) => writeln!(out, ",{},{},{}", v.loss, v.joint_gap, v.surface_gap)?,
            None => writeln!(out, ",,,")?,
        }
    }
    Ok(())
}

/// Training and validation frames after preprocessing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub validation: Dataset,
}

/// Result of one stage: the best-validation checkpoint (the last one when
/// there is no validation split), the final checkpoint and the log.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_step: usize,
    pub metrics: Vec<MetricsRow>,
}

/// Shared state of a training run: the loss model (inflated template),
/// patch index, rotation bounds and hyperparameters.
pub struct Trainer<'a> {
    model: &'a BodyModel,
    loss_model: BodyModel,
    index: SurfaceIndex,
    bounds: QuaternionBounds,
    reference: Vec<Vec3>,
    config: TrainConfig,
}

/// Random stream for `stage`'s step `step` (or initialization when `step` is `None`).
fn stream(seed: u64, stage: Stage, step: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = step.map_or(u32::MAX as u64, |s| s as u64);
    rng.set_stream(((stage.index() as u64) << 32) | s);
    rng
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a BodyModel, bounds: QuaternionBounds, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if bounds.len() != model.joint_count() {
            return Err(Error::Config(format!(
                "{} rotation bounds for {} joints",
                bounds.len(),
                model.joint_count()
            )));
        }
        let loss_model = inflate_template(model, config.inflation)?;
        Ok(Trainer {
            index: SurfaceIndex::new(&loss_model),
            reference: points_from_flat(model.template_landmarks().data()),
            loss_model,
            model,
            bounds,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Rest-pose median-vertex landmarks used as the alignment target.
    pub fn reference(&self) -> &[Vec3] {
        &self.reference
    }

    /// Preprocesses every frame and makes the seeded train/validation split.
    pub fn prepare(&self, data: &Dataset) -> Result<Prepared> {
        if data.landmark_count() != self.model.landmark_count() {
            return Err(Error::Data(format!(
                "dataset has {} landmark columns, model has {}",
                data.landmark_count(),
                self.model.landmark_count()
            )));
        }
        let expected: Vec<&str> = self.model.landmarks().codes().collect();
        if data.codes.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(Error::Data("dataset columns do not follow the model's landmark order".into()));
        }
        let (pre, _) = preprocess_dataset(data, self.config.preprocess, &self.reference)?;
        let mut order: Vec<usize> = (0..pre.len()).collect();
        order.shuffle(&mut stream(self.config.seed, Stage::Base, None));
        let n_val = (pre.len() as f64 * self.config.validation_fraction).round() as usize;
        if n_val >= pre.len() {
            return Err(Error::Data(format!("{} frames leave nothing to train on", pre.len())));
        }
        let (val, train) = order.split_at(n_val);
        let (mut val, mut train) = (val.to_vec(), train.to_vec());
        val.sort_unstable();
        train.sort_unstable();
        Ok(Prepared {
            train: pre.subset(&train),
            validation: pre.subset(&val),
        })
    }

    /// Fresh networks for the base stage.
    pub fn init_networks(&self) -> Networks {
        Networks::new(
            self.model.landmark_count(),
            self.model.joint_count(),
            0,
            self.config.architecture.clone(),
            &mut stream(self.config.seed, Stage::Base, None),
        )
    }

    fn checkpoint(&self, networks: Networks, step: u64, stage: Stage) -> Checkpoint {
        let mut ck = Checkpoint::new(networks, step);
        ck.meta.insert("preprocess".into(), self.config.preprocess.name().into());
        ck.meta.insert("stage".into(), stage.to_string());
        ck.meta.insert("config".into(), self.config.fingerprint());
        ck
    }

    /// Forward pass and loss terms. `clean` is the batch before
    /// augmentation and is the reconstruction target.
    pub fn objective(
        &self,
        tape: &Tape,
        networks: &Networks,
        clean: &FrameBatch,
        input: &FrameBatch,
        stages: usize,
        objective: Objective,
        mode: &mut Mode,
    ) -> Result<(Tensor, [f64; 6], Prediction, Option<PosedBody>)> {
        let w = &self.config.weights;
        let root = self.model.tree().root();
        let pred = networks.forward(tape, &input.landmarks, &input.mask, stages, mode, root)?;
        let mut c = LossComponents::default();
        if objective == Objective::Full && w.dae > 0.0 {
            c.dae = Some(loss_dae(tape, &clean.landmarks, &pred.reconstruction, &clean.mask)?);
        }
        let needs_body = w.beta > 0.0 || w.phi > 0.0 || w.joints > 0.0 || w.surface > 0.0 || w.unpose > 0.0;
        let mut body = None;
        if needs_body {
            let (q, beta) = pred.final_pose();
            let posed = full_forward(tape, q, beta, &self.loss_model)?.centered_on_root(tape, root)?;
            if w.beta > 0.0 {
                c.beta = Some(loss_beta(tape, beta)?);
            }
            if w.phi > 0.0 {
                c.phi = Some(loss_phi(tape, q, &self.bounds)?);
            }
            if w.joints > 0.0 {
                c.joints = Some(loss_joints(tape, &pred.joints, &posed.joints)?);
            }
            if w.surface > 0.0 {
                c.surface = Some(loss_surface(tape, &pred.centered_landmarks, &posed.vertices, &self.index)?);
            }
            if w.unpose > 0.0 {
                c.unpose = Some(loss_unpose(
                    tape,
                    &posed.rotations,
                    &pred.joints,
                    &pred.centered_landmarks,
                    &posed.rest_joints,
                    &posed.rest_vertices,
                    &self.loss_model,
                    &self.index,
                )?);
            }
            body = Some(posed);
        }
        let (total, values) = combined_loss(tape, objective, &c, w)?;
        Ok((total, values, pred, body))
    }

    /// Objective and gap metrics over `data` in evaluation mode.
    pub fn validate(&self, networks: &Networks, data: &Dataset, stages: usize, objective: Objective) -> Result<Validation> {
        let (mut loss, mut jgap, mut sgap) = (0.0, 0.0, 0.0);
        let (m, l) = (self.model.joint_count(), self.model.landmark_count());
        let patches = self.model.landmarks().patches();
        let all: Vec<usize> = (0..data.len()).collect();
        for (k, chunk) in all.chunks(self.config.batch_size).enumerate() {
            let batch = data.batch(chunk)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream((1 << 63) | k as u64);
            let input = augment_missing(&batch, self.config.missing_rate, &mut rng)?;
            let tape = Tape::new();
            let (total, _, pred, body) = self.objective(&tape, networks, &batch, &input, stages, objective, &mut Mode::Eval)?;
            loss += total.item()? * chunk.len() as f64;
            let Some(body) = body else { continue };
            let p = self.model.vertex_count();
            for b in 0..chunk.len() {
                let ja = points_from_flat(&pred.joints.data()[b * m * 3..(b + 1) * m * 3]);
                let jb = points_from_flat(&body.joints.data()[b * m * 3..(b + 1) * m * 3]);
                jgap += ja.iter().zip(&jb).map(|(x, y)| (x - y).norm()).sum::<f64>() / m as f64;
                let lm = points_from_flat(&pred.centered_landmarks.data()[b * l * 3..(b + 1) * l * 3]);
                let surf = points_from_flat(&body.vertices.data()[b * p * 3..(b + 1) * p * 3]);
                sgap += lm
                    .iter()
                    .zip(patches)
                    .map(|(q, patch)| patch.vertices.iter().map(|&v| (surf[v] - q).norm()).fold(f64::INFINITY, f64::min))
                    .sum::<f64>()
                    / l as f64;
            }
        }
        let n = data.len().max(1) as f64;
        Ok(Validation {
            loss: loss / n,
            joint_gap: jgap / n,
            surface_gap: sgap / n,
        })
    }

    /// Runs one stage for `steps` steps. The base stage starts from fresh
    /// networks (or `prev`, to continue training); cascade stage `i` needs
    /// the checkpoint of stage `i - 1`.
    pub fn train_stage(&self, stage: Stage, data: &Prepared, prev: Option<&Checkpoint>, steps: usize) -> Result<StageOutcome> {
        let cfg = &self.config;
        let mut networks = match (stage, prev) {
            (Stage::Base, None) => self.init_networks(),
            (Stage::Base, Some(ck)) if ck.networks.psi.len() == 1 => ck.networks.clone(),
            (Stage::Base, Some(ck)) => {
                return Err(Error::Staging(format!(
                    "base stage cannot continue a checkpoint with {} regressors",
                    ck.networks.psi.len()
                )))
            }
            (Stage::Cascade(i), None) => {
                return Err(Error::Staging(format!("{stage} needs the checkpoint of stage {}", i - 1)))
            }
            (Stage::Cascade(i), Some(ck)) => {
                if ck.networks.psi.len() != i {
                    return Err(Error::Staging(format!(
                        "{stage} needs a checkpoint with {i} trained regressors, got {}",
                        ck.networks.psi.len()
                    )));
                }
                let mut n = ck.networks.clone();
                for id in n.blocks() {
                    n.set_frozen(id, true);
                }
                n.push_regressor(&mut stream(cfg.seed, stage, None));
                n
            }
        };
        if let Some(mode) = prev.and_then(|ck| ck.meta.get("preprocess")) {
            if mode != cfg.preprocess.name() {
                return Err(Error::Staging(format!(
                    "checkpoint was trained with '{mode}' preprocessing, config asks for '{}'",
                    cfg.preprocess.name()
                )));
            }
        }
        if networks.landmarks != self.model.landmark_count() || networks.joints != self.model.joint_count() {
            return Err(Error::Staging("checkpoint does not match the body model".into()));
        }
        if data.train.is_empty() {
            return Err(Error::Data("no training frames".into()));
        }
        let start_step = prev.map_or(0, |ck| ck.step);
        let trainable = stage.trainable();
        let objective = stage.objective();
        let stages = stage.index() + 1;
        let mut adam = Adam::new(cfg.learning_rate);
        let mut metrics = Vec::with_capacity(steps);
        let mut best: Option<(f64, Networks, usize)> = None;

        for step in 0..steps {
            let mut rng = stream(cfg.seed, stage, Some(step));
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..data.train.len())).collect();
            let clean = data.train.batch(&idx)?;
            let input = augment_missing(&clean, cfg.missing_rate, &mut rng)?;
            let tape = Tape::new();
            let bound = networks.bind(&tape, &trainable);
            let mut mode = Mode::Train {
                keep: cfg.keep,
                rng: &mut rng,
            };
            let (total, components, _, _) = self.objective(&tape, &bound, &clean, &input, stages, objective, &mut mode)?;
            let total_value = total.item()?;
            if !total_value.is_finite() {
                return Err(Error::numeric(format!("{stage} step {step}"), format!("loss {total_value}")));
            }
            let grads = tape.backward(&total)?;
            let named_grads: Vec<(String, Vec<f64>)> = bound
                .named_tensors()
                .into_iter()
                .filter(|(name, _)| trainable.iter().any(|id| name.starts_with(&format!("{id}."))))
                .map(|(name, t)| (name, grads.get(t).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)))
                .collect();
            let mut params: Vec<(String, &mut Tensor, Vec<f64>)> = networks
                .tensors_mut(&trainable)
                .into_iter()
                .zip(named_grads)
                .map(|((name, t), (gname, g))| {
                    debug_assert_eq!(name, gname);
                    (name, t, g)
                })
                .collect();
            adam.step(&mut params)?;

            let mut row = MetricsRow {
                stage,
                step: step + 1,
                total: total_value,
                components,
                validation: None,
            };
            let last = step + 1 == steps;
            if (step + 1) % cfg.validate_every == 0 || last {
                let score = if data.validation.is_empty() {
                    None
                } else {
                    let v = self.validate(&networks, &data.validation, stages, objective)?;
                    row.validation = Some(v);
                    Some(v.loss)
                };
                log::info!("{stage} step {}: loss {total_value:.6} validation {score:?}", step + 1);
                match (score, &best) {
                    (Some(s), Some((b, _, _))) if s >= *b => {}
                    (Some(s), _) => best = Some((s, networks.clone(), step + 1)),
                    (None, _) if last => best = Some((total_value, networks.clone(), step + 1)),
                    _ => {}
                }
            }
            metrics.push(row);
        }
        let last = self.checkpoint(networks.clone(), start_step + steps as u64, stage);
        let (best, best_step) = match best {
            Some((_, n, s)) => (self.checkpoint(n, start_step + s as u64, stage), s),
            None => (last.clone(), steps),
        };
        Ok(StageOutcome {
            stage,
            best,
            last,
            best_step,
            metrics,
        })
    }

    /// Base stage then `cascades` cascade stages, each continuing from the
    /// previous stage's best checkpoint, within the `max_steps` budget.
    pub fn train(&self, data: &Dataset) -> Result<Vec<StageOutcome>> {
        let prepared = self.prepare(data)?;
        let mut outcomes: Vec<StageOutcome> = Vec::new();
        let mut budget = self.config.max_steps;
        let schedule = std::iter::once(Stage::Base).chain((1..=self.config.cascades).map(Stage::Cascade));
        for stage in schedule {
            let steps = self.config.stage_steps.min(budget);
            if steps == 0 {
                log::warn!("step budget exhausted before {stage}");
                break;
            }
            budget -= steps;
            let prev = outcomes.last().map(|o| &o.best);
            let outcome = self.train_stage(stage, &prepared, prev, steps)?;
            outcomes.push(outcome);
        }
        Ok(outcomes)
    }
}

#[cfg(test)]
mod tests;
