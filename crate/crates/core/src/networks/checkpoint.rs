use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Architecture, BlockId, Layer, Mlp, Networks};
use crate::archive::Archive;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Network parameters plus a text manifest (sizes, freeze flags, step
/// counter and free-form metadata such as the preprocessing mode).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub networks: Networks,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad size '{t}'")))
        .collect()
}

impl Checkpoint {
    pub fn new(networks: Networks, step: u64) -> Self {
        Checkpoint {
            networks,
            step,
            meta: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> String {
        let n = &self.networks;
        let mut s = String::new();
        let _ = writeln!(s, "landmarks = {}", n.landmarks);
        let _ = writeln!(s, "joints = {}", n.joints);
        let _ = writeln!(s, "dae_hidden = {}", list(&n.architecture.dae_hidden));
        let _ = writeln!(s, "atn_hidden = {}", list(&n.architecture.atn_hidden));
        let _ = writeln!(s, "psi_hidden = {}", list(&n.architecture.psi_hidden));
        let _ = writeln!(s, "regressors = {}", n.psi.len());
        let frozen: Vec<String> = n.frozen.iter().map(BlockId::to_string).collect();
        let _ = writeln!(s, "frozen = {}", frozen.join(","));
        let _ = writeln!(s, "step = {}", self.step);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta.{k} = {v}");
        }
        s
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (name, t) in self.networks.named_tensors() {
            a.put_floats(&name, t.shape(), t.to_vec());
        }
        a.put_text("manifest", self.manifest());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("checkpoint manifest: {m}"));
        let mut fields = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in a.text("manifest")?.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line '{line}'")))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            match k.strip_prefix("meta.") {
                Some(mk) => meta.insert(mk.to_string(), v),
                None => fields.insert(k.to_string(), v),
            };
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing '{k}'")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad '{k}'"))) };
        let sizes = |k: &str| -> Result<Vec<usize>> { parse_list(get(k)?).map_err(bad) };
        let architecture = Architecture {
            dae_hidden: sizes("dae_hidden")?,
            atn_hidden: sizes("atn_hidden")?,
            psi_hidden: sizes("psi_hidden")?,
        };
        let frozen = get("frozen")?
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| BlockId::parse(t).ok_or_else(|| bad(format!("unknown block '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        let step = get("step")?.parse().map_err(|_| bad("bad 'step'".into()))?;
        let (landmarks, joints, regressors) = (num("landmarks")?, num("joints")?, num("regressors")?);

        let load_block = |id: BlockId| -> Result<Mlp> {
            let mut layers = Vec::new();
            while a.contains(&format!("{id}.{}.weight", layers.len())) {
                let i = layers.len();
                let fetch = |what: &str| -> Result<Tensor> {
                    let (shape, data) = a.floats(&format!("{id}.{i}.{what}"))?;
                    Tensor::new(shape, data.to_vec())
                };
                let (weight, bias) = (fetch("weight")?, fetch("bias")?);
                if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
                    return Err(bad(format!("{id} layer {i} has inconsistent shapes")));
                }
                if let Some(prev) = layers.last().map(Layer::outputs) {
                    if prev != weight.shape()[0] {
                        return Err(bad(format!("{id} layer {i} does not chain")));
                    }
                }
                layers.push(Layer { weight, bias });
            }
            if layers.is_empty() {
                return Err(bad(format!("no layers for block {id}")));
            }
            Ok(Mlp { layers })
        };
        let networks = Networks {
            landmarks,
            joints,
            architecture,
            dae: load_block(BlockId::Dae)?,
            atn: load_block(BlockId::Atn)?,
            psi: (0..regressors).map(|i| load_block(BlockId::Psi(i))).collect::<Result<_>>()?,
            frozen,
        };
        for i in 0..regressors {
            if networks.psi[i].sizes() != networks.psi_sizes(i) {
                return Err(bad(format!("regressor {i} sizes do not match the manifest")));
            }
        }
        if networks.dae.inputs() != 6 * landmarks || networks.atn.outputs() != joints * landmarks {
            return Err(bad("block sizes do not match landmark/joint counts".into()));
        }
        if !networks.all_finite() {
            return Err(bad("non-finite parameters".into()));
        }
        Ok(Checkpoint { networks, step, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
