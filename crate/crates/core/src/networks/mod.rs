//! Learnable blocks: landmark denoising autoencoder, joint attention
//! network and the cascade of residual pose/shape regressors.

mod checkpoint;

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::body::SHAPE_DIM;
use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;

/// Hidden-layer widths of every block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Encoder widths; the decoder mirrors them.
    pub dae_hidden: Vec<usize>,
    pub atn_hidden: Vec<usize>,
    pub psi_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            dae_hidden: vec![256, 128],
            atn_hidden: vec![256, 256],
            psi_hidden: vec![512, 512, 512],
        }
    }
}

/// Identifies one learnable block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    Dae,
    Atn,
    Psi(usize),
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Dae => write!(f, "dae"),
            BlockId::Atn => write!(f, "atn"),
            BlockId::Psi(i) => write!(f, "psi{i}"),
        }
    }
}

impl BlockId {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dae" => Some(BlockId::Dae),
            "atn" => Some(BlockId::Atn),
            _ => s.strip_prefix("psi")?.parse().ok().map(BlockId::Psi),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[in, out]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
}

impl Layer {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.gen_range(-a..a)).collect();
        Layer {
            weight: Tensor::new(&[inputs, outputs], w).expect("positive layer sizes"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Dropout state for one forward pass. Masks are drawn here and handed to
/// the dropout primitive, so a pass is reproducible from the generator state.
pub enum Mode<'a> {
    Eval,
    Train { keep: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    fn mask(&mut self, shape: &[usize]) -> Option<Tensor> {
        match self {
            Mode::Eval => None,
            Mode::Train { keep, rng } => {
                let n = shape.iter().product();
                let scale = 1.0 / *keep;
                let data = (0..n).map(|_| if rng.gen::<f64>() < *keep { scale } else { 0.0 }).collect();
                Some(Tensor::new(shape, data).expect("non-empty activations"))
            }
        }
    }
}

/// Fully connected stack: ReLU (then dropout) on hidden layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Layer::xavier(w[0], w[1], rng)).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.inputs()];
        s.extend(self.layers.iter().map(Layer::outputs));
        s
    }

    /// `x` is `[b, inputs]`.
    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: &mut Mode, name: &str) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.add(&tape.matmul(&h, &layer.weight)?, &layer.bias)?;
            if i < last {
                h = tape.relu(&h)?;
                if let Some(mask) = mode.mask(h.shape()) {
                    h = tape.dropout(&h, &mask)?;
                }
            }
            if !h.all_finite() {
                return Err(Error::numeric(format!("{name} layer {i}"), "non-finite activations"));
            }
        }
        Ok(h)
    }

    fn bind(&self, tape: &Tape) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: tape.var(&l.weight),
                    bias: tape.var(&l.bias),
                })
                .collect(),
        }
    }

    fn detached(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.detach(),
                    bias: l.bias.detach(),
                })
                .collect(),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| {
            [(format!("{i}.weight"), &l.weight), (format!("{i}.bias"), &l.bias)]
        })
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.layers.iter_mut().enumerate().flat_map(|(i, l)| {
            [(format!("{i}.weight"), &mut l.weight), (format!("{i}.bias"), &mut l.bias)]
        })
    }
}

/// Every learnable block plus which blocks are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub landmarks: usize,
    pub joints: usize,
    pub architecture: Architecture,
    pub dae: Mlp,
    pub atn: Mlp,
    pub psi: Vec<Mlp>,
    pub frozen: Vec<BlockId>,
}

/// Intermediate and final outputs of one pass through the network stack.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Raw reconstruction, `[b, l, 3]`.
    pub reconstruction: Tensor,
    /// Observed landmarks where valid, reconstruction elsewhere.
    pub landmarks: Tensor,
    /// Row-stochastic attention, `[b, m, l]`.
    pub attention: Tensor,
    /// Joints from attention, re-centered on their root, `[b, m, 3]`.
    pub joints: Tensor,
    /// `landmarks` shifted by the same root offset.
    pub centered_landmarks: Tensor,
    /// Root of the un-centered attention joints, `[b, 1, 3]`.
    pub root: Tensor,
    /// Quaternions `[b, m, 4]` and shape `[b, 10]` after each cascade block.
    pub stages: Vec<(Tensor, Tensor)>,
}

impl Prediction {
    pub fn final_pose(&self) -> &(Tensor, Tensor) {
        self.stages.last().expect("at least one regressor")
    }
}

impl Networks {
    /// Fresh Xavier-initialized blocks with `cascades + 1` regressors. The
    /// first regressor's output bias is the identity quaternion per joint
    /// and zero shape; later regressors start as exact identities of their
    /// residual (zero output layer).
    pub fn new(landmarks: usize, joints: usize, cascades: usize, architecture: Architecture, rng: &mut ChaCha8Rng) -> Self {
        let (l, m) = (landmarks, joints);
        // The DAE sees coordinates and the observation mask side by side.
        let mut dae_sizes = vec![6 * l];
        dae_sizes.extend(&architecture.dae_hidden);
        dae_sizes.extend(architecture.dae_hidden.iter().rev().skip(1));
        dae_sizes.push(3 * l);
        let dae = Mlp::new(&dae_sizes, rng);
        let mut atn_sizes = vec![3 * l];
        atn_sizes.extend(&architecture.atn_hidden);
        atn_sizes.push(m * l);
        let atn = Mlp::new(&atn_sizes, rng);
        let mut nets = Networks {
            landmarks: l,
            joints: m,
            architecture,
            dae,
            atn,
            psi: Vec::new(),
            frozen: Vec::new(),
        };
        for _ in 0..=cascades {
            nets.push_regressor(rng);
        }
        nets
    }

    fn psi_sizes(&self, index: usize) -> Vec<usize> {
        let (l, m) = (self.landmarks, self.joints);
        let extra = if index > 0 { 4 * m + SHAPE_DIM } else { 0 };
        let mut sizes = vec![3 * m + 3 * l + extra];
        sizes.extend(&self.architecture.psi_hidden);
        sizes.push(4 * m + SHAPE_DIM);
        sizes
    }

    /// Appends a new regressor initialized as described in [`Networks::new`].
    pub fn push_regressor(&mut self, rng: &mut ChaCha8Rng) {
        let index = self.psi.len();
        let mut mlp = Mlp::new(&self.psi_sizes(index), rng);
        let out = mlp.layers.last_mut().unwrap();
        if index == 0 {
            let n = out.outputs();
            let bias = (0..n).map(|k| if k < 4 * self.joints && k % 4 == 0 { 1.0 } else { 0.0 }).collect();
            out.bias = Tensor::new(&[n], bias).unwrap();
        } else {
            out.weight = Tensor::zeros(out.weight.shape());
        }
        self.psi.push(mlp);
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        let mut b = vec![BlockId::Dae, BlockId::Atn];
        b.extend((0..self.psi.len()).map(BlockId::Psi));
        b
    }

    pub fn block(&self, id: BlockId) -> Option<&Mlp> {
        match id {
            BlockId::Dae => Some(&self.dae),
            BlockId::Atn => Some(&self.atn),
            BlockId::Psi(i) => self.psi.get(i),
        }
    }

    pub fn is_frozen(&self, id: BlockId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn set_frozen(&mut self, id: BlockId, frozen: bool) {
        self.frozen.retain(|b| *b != id);
        if frozen {
            self.frozen.push(id);
            self.frozen.sort();
        }
    }

    /// `(name, tensor)` for every parameter, names like `psi1.2.weight`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.blocks()
            .into_iter()
            .flat_map(|id| {
                self.block(id)
                    .unwrap()
                    .tensors()
                    .map(move |(n, t)| (format!("{id}.{n}"), t))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Mutable access to the parameters of the listed blocks, named as in
    /// [`Networks::named_tensors`].
    pub fn tensors_mut(&mut self, blocks: &[BlockId]) -> Vec<(String, &mut Tensor)> {
        let mut all: Vec<(BlockId, &mut Mlp)> = vec![(BlockId::Dae, &mut self.dae), (BlockId::Atn, &mut self.atn)];
        all.extend(self.psi.iter_mut().enumerate().map(|(i, p)| (BlockId::Psi(i), p)));
        let mut out = Vec::new();
        for (id, mlp) in all {
            if blocks.contains(&id) {
                out.extend(mlp.tensors_mut().map(|(n, t)| (format!("{id}.{n}"), t)));
            }
        }
        out
    }

    /// Copy whose parameters of the listed blocks are registered on `tape`;
    /// all other blocks stay constants and receive no gradient.
    pub fn bind(&self, tape: &Tape, trainable: &[BlockId]) -> Networks {
        let pick = |id: BlockId, mlp: &Mlp| if trainable.contains(&id) { mlp.bind(tape) } else { mlp.detached() };
        Networks {
            dae: pick(BlockId::Dae, &self.dae),
            atn: pick(BlockId::Atn, &self.atn),
            psi: self.psi.iter().enumerate().map(|(i, m)| pick(BlockId::Psi(i), m)).collect(),
            ..self.clone()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Reconstructs all landmarks. `landmarks` and `mask` are `[b, l, 3]`,
    /// centered, with zeros at missing entries. Returns the raw
    /// reconstruction and the mask-merged landmarks.
    pub fn dae_forward(&self, tape: &Tape, landmarks: &Tensor, mask: &Tensor, mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        let (b, l) = self.check_landmarks(landmarks)?;
        if mask.shape() != landmarks.shape() {
            return Err(Error::dim("dae_forward", format!("mask {:?}", mask.shape())));
        }
        let flat = tape.reshape(landmarks, &[b, 3 * l])?;
        let flat_mask = tape.reshape(mask, &[b, 3 * l])?;
        let input = tape.concat(&[&flat, &flat_mask], 1)?;
        let out = self.dae.forward(tape, &input, mode, "dae")?;
        let missing = Tensor::new(mask.shape(), mask.data().iter().map(|m| 1.0 - m).collect())?;
        let correction = tape.mul(&tape.reshape(&out, &[b, l, 3])?, &missing)?;
        let reconstruction = tape.add(landmarks, &correction)?;
        let merged = tape.add(&tape.mul(mask, landmarks)?, &tape.mul(&missing, &reconstruction)?)?;
        Ok((reconstruction, merged))
    }

    /// Attention joints from landmarks `[b, l, 3]`: returns un-centered
    /// joints `[b, m, 3]` and the row-stochastic attention `[b, m, l]`.
    pub fn atn_forward(&self, tape: &Tape, landmarks: &Tensor, mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        let (b, l) = self.check_landmarks(landmarks)?;
        let flat = tape.reshape(landmarks, &[b, 3 * l])?;
        let logits = self.atn.forward(tape, &flat, mode, "atn")?;
        let attention = tape.softmax(&tape.reshape(&logits, &[b, self.joints, l])?)?;
        let joints = tape.matmul(&attention, landmarks)?;
        Ok((joints, attention))
    }

    /// One cascade block. `joints` `[b, m, 3]` and `landmarks` `[b, l, 3]`
    /// are root-centered; `prev` is the previous block's output.
    pub fn psi_forward(
        &self,
        tape: &Tape,
        index: usize,
        joints: &Tensor,
        landmarks: &Tensor,
        prev: Option<&(Tensor, Tensor)>,
        mode: &mut Mode,
    ) -> Result<(Tensor, Tensor)> {
        let (b, l) = self.check_landmarks(landmarks)?;
        let m = self.joints;
        let block = self
            .psi
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no regressor {index}")))?;
        if (index > 0) != prev.is_some() {
            return Err(Error::Contract(format!(
                "regressor {index} {} a previous prediction",
                if index > 0 { "needs" } else { "takes no" }
            )));
        }
        let j = tape.reshape(joints, &[b, 3 * m])?;
        let lm = tape.reshape(landmarks, &[b, 3 * l])?;
        let mut inputs = vec![j, lm];
        if let Some((q, beta)) = prev {
            inputs.push(tape.reshape(q, &[b, 4 * m])?);
            inputs.push(beta.clone());
        }
        let x = tape.concat(&inputs.iter().collect::<Vec<_>>(), 1)?;
        let mut out = block.forward(tape, &x, mode, &format!("psi{index}"))?;
        if let Some((q, beta)) = prev {
            let prev_flat = tape.concat(&[&tape.reshape(q, &[b, 4 * m])?, beta], 1)?;
            out = tape.add(&out, &prev_flat)?;
        }
        let quats = tape.reshape(&tape.gather(&out, 1, &(0..4 * m).collect::<Vec<_>>())?, &[b, m, 4])?;
        let betas = tape.gather(&out, 1, &(4 * m..4 * m + SHAPE_DIM).collect::<Vec<_>>())?;
        Ok((quats, betas))
    }

    /// Runs the DAE, attention and the first `stages` regressors. Frozen
    /// blocks run without dropout.
    pub fn forward(
        &self,
        tape: &Tape,
        landmarks: &Tensor,
        mask: &Tensor,
        stages: usize,
        mode: &mut Mode,
        root: usize,
    ) -> Result<Prediction> {
        let (b, l) = self.check_landmarks(landmarks)?;
        let m = self.joints;
        let mut eval = Mode::Eval;
        macro_rules! mode_for {
            ($id:expr) => {
                if self.is_frozen($id) {
                    &mut eval
                } else {
                    &mut *mode
                }
            };
        }
        let (reconstruction, merged) = self.dae_forward(tape, landmarks, mask, mode_for!(BlockId::Dae))?;
        let (joints_raw, attention) = self.atn_forward(tape, &merged, mode_for!(BlockId::Atn))?;
        let root_joint = tape.gather(&joints_raw, 1, &[root])?;
        let joints = tape.sub(&joints_raw, &tape.gather(&joints_raw, 1, &vec![root; m])?)?;
        let centered = tape.sub(&merged, &tape.gather(&joints_raw, 1, &vec![root; l])?)?;
        let mut outputs: Vec<(Tensor, Tensor)> = Vec::new();
        for i in 0..stages.min(self.psi.len()).max(1) {
            let prev = outputs.last();
            let next = self.psi_forward(tape, i, &joints, &centered, prev, mode_for!(BlockId::Psi(i)))?;
            outputs.push(next);
        }
        debug_assert_eq!(root_joint.shape(), [b, 1, 3]);
        Ok(Prediction {
            reconstruction,
            landmarks: merged,
            attention,
            joints,
            centered_landmarks: centered,
            root: root_joint,
            stages: outputs,
        })
    }

    fn check_landmarks(&self, landmarks: &Tensor) -> Result<(usize, usize)> {
        let s = landmarks.shape();
        if s.len() != 3 || s[1] != self.landmarks || s[2] != 3 {
            return Err(Error::dim(
                "networks",
                format!("expected [b, {}, 3] landmarks, got {s:?}", self.landmarks),
            ));
        }
        Ok((s[0], s[1]))
    }
}
