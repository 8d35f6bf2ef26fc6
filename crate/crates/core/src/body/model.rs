use std::path::Path;
use std::sync::Arc;

use crate::archive::Archive;
use crate::autodiff::Tensor;
use crate::data::LandmarkDictionary;
use crate::error::{Error, Result};

/// Number of shape coefficients.
pub const SHAPE_DIM: usize = 10;

/// Parent relation over joints, validated to be a single rooted tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    root: usize,
    /// Joints grouped by depth; `levels[0] == [root]`.
    levels: Vec<Vec<usize>>,
}

impl KinematicTree {
    pub fn new(parents: Vec<Option<usize>>) -> Result<Self> {
        let m = parents.len();
        let roots: Vec<usize> = (0..m).filter(|&i| parents[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::ModelValidation(format!(
                "kinematic tree needs exactly one root, found {}",
                roots.len()
            )));
        }
        if let Some((i, p)) = parents
            .iter()
            .enumerate()
            .find_map(|(i, p)| p.filter(|&p| p >= m || p == i).map(|p| (i, p)))
        {
            return Err(Error::ModelValidation(format!("joint {i} has invalid parent {p}")));
        }
        let root = roots[0];
        let mut levels = vec![vec![root]];
        let mut placed = 1;
        loop {
            let prev = levels.last().unwrap();
            let next: Vec<usize> = (0..m)
                .filter(|&i| parents[i].is_some_and(|p| prev.contains(&p)))
                .collect();
            if next.is_empty() {
                break;
            }
            placed += next.len();
            levels.push(next);
        }
        if placed != m {
            return Err(Error::ModelValidation(
                "kinematic parents contain a cycle or unreachable joints".into(),
            ));
        }
        Ok(KinematicTree { parents, root, levels })
    }

    /// Builds a tree from the integer encoding used on disk (negative = root).
    pub fn from_encoded(parents: &[i64]) -> Result<Self> {
        Self::new(
            parents
                .iter()
                .map(|&p| if p < 0 { None } else { Some(p as usize) })
                .collect(),
        )
    }

    pub fn encoded(&self) -> Vec<i64> {
        self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect()
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    /// Joints in breadth-first (parents before children) order.
    pub fn topological_order(&self) -> Vec<usize> {
        self.levels.iter().flatten().copied().collect()
    }
}

/// Linear-blend-skinning body: rest template, shape blendshapes, joint
/// regressor, skinning weights, kinematic tree, mesh faces and landmark patches.
#[derive(Clone, Debug)]
pub struct BodyModel {
    template: Tensor,
    blendshapes: Tensor,
    blend_matrix: Tensor,
    joint_regressor: Tensor,
    skinning_weights: Tensor,
    tree: KinematicTree,
    faces: Arc<Vec<[usize; 3]>>,
    landmarks: LandmarkDictionary,
    landmark_weights: Tensor,
}

impl BodyModel {
    /// `template` is `p×3`, `blendshapes` `p×3×10`, `joint_regressor` `m×p`,
    /// `skinning_weights` `p×m`.
    pub fn new(
        template: Tensor,
        blendshapes: Tensor,
        joint_regressor: Tensor,
        skinning_weights: Tensor,
        tree: KinematicTree,
        faces: Vec<[usize; 3]>,
        landmarks: LandmarkDictionary,
    ) -> Result<Self> {
        let bad = |what: &str, got: &[usize], want: &[usize]| {
            Err(Error::ModelValidation(format!("{what} has shape {got:?}, expected {want:?}")))
        };
        let p = template.shape()[0];
        let m = tree.len();
        if template.shape() != [p, 3] {
            return bad("template", template.shape(), &[p, 3]);
        }
        if blendshapes.shape() != [p, 3, SHAPE_DIM] {
            return bad("blendshapes", blendshapes.shape(), &[p, 3, SHAPE_DIM]);
        }
        if joint_regressor.shape() != [m, p] {
            return bad("joint_regressor", joint_regressor.shape(), &[m, p]);
        }
        if skinning_weights.shape() != [p, m] {
            return bad("skinning_weights", skinning_weights.shape(), &[p, m]);
        }
        for (v, row) in skinning_weights.data().chunks(m).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::ModelValidation(format!(
                    "skinning weights of vertex {v} are not a convex combination (sum {sum})"
                )));
            }
        }
        for arr in [&template, &blendshapes, &joint_regressor] {
            if !arr.all_finite() {
                return Err(Error::ModelValidation("non-finite model parameters".into()));
            }
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= p)) {
            return Err(Error::ModelValidation(format!("face {f:?} indexes past {p} vertices")));
        }
        landmarks.check_vertex_range(p)?;

        // [p,3,10] -> [10, 3p] so a batch of β multiplies it directly
        let bs = blendshapes.data();
        let mut bm = vec![0.0; SHAPE_DIM * 3 * p];
        for row in 0..3 * p {
            for k in 0..SHAPE_DIM {
                bm[k * 3 * p + row] = bs[row * SHAPE_DIM + k];
            }
        }
        let blend_matrix = Tensor::new(&[SHAPE_DIM, 3 * p], bm)?;
        let landmark_weights = Self::weights_for(&skinning_weights, m, &landmarks.medians());
        Ok(BodyModel {
            template,
            blendshapes,
            blend_matrix,
            joint_regressor,
            skinning_weights,
            tree,
            faces: Arc::new(faces),
            landmarks,
            landmark_weights,
        })
    }

    fn weights_for(skinning: &Tensor, m: usize, vertices: &[usize]) -> Tensor {
        let w = skinning.data();
        let data = vertices.iter().flat_map(|&v| w[v * m..(v + 1) * m].to_vec()).collect();
        Tensor::new(&[vertices.len(), m], data).expect("non-empty landmark set")
    }

    pub fn vertex_count(&self) -> usize {
        self.template.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.tree.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }

    pub fn template(&self) -> &Tensor {
        &self.template
    }

    pub fn blendshapes(&self) -> &Tensor {
        &self.blendshapes
    }

    /// Blendshapes laid out as `[10, 3p]`.
    pub fn blend_matrix(&self) -> &Tensor {
        &self.blend_matrix
    }

    pub fn joint_regressor(&self) -> &Tensor {
        &self.joint_regressor
    }

    pub fn skinning_weights(&self) -> &Tensor {
        &self.skinning_weights
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.tree
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn landmarks(&self) -> &LandmarkDictionary {
        &self.landmarks
    }

    /// Skinning-weight rows of each landmark's median vertex, `l×m`.
    pub fn landmark_weights(&self) -> &Tensor {
        &self.landmark_weights
    }

    /// Skinning-weight rows for arbitrary vertices, `k×m`.
    pub fn vertex_weights(&self, vertices: &[usize]) -> Tensor {
        Self::weights_for(&self.skinning_weights, self.joint_count(), vertices)
    }

    /// Template positions of the landmark median vertices, `l×3`.
    pub fn template_landmarks(&self) -> Tensor {
        let t = self.template.data();
        let data = self
            .landmarks
            .medians()
            .iter()
            .flat_map(|&v| t[3 * v..3 * v + 3].to_vec())
            .collect();
        Tensor::new(&[self.landmark_count(), 3], data).expect("non-empty landmark set")
    }

    /// Joint positions regressed from the unshaped template, `m×3`.
    pub fn template_joints(&self) -> Tensor {
        let (m, p) = (self.joint_count(), self.vertex_count());
        let r = self.joint_regressor.data();
        let t = self.template.data();
        let mut out = vec![0.0; m * 3];
        for j in 0..m {
            for v in 0..p {
                let w = r[j * p + v];
                if w != 0.0 {
                    for c in 0..3 {
                        out[3 * j + c] += w * t[3 * v + c];
                    }
                }
            }
        }
        Tensor::new(&[m, 3], out).expect("m > 0")
    }

    /// Same model with a different template (used by inflation).
    pub fn with_template(&self, template: Tensor) -> Result<Self> {
        if template.shape() != self.template.shape() {
            return Err(Error::dim(
                "with_template",
                format!("{:?} vs {:?}", template.shape(), self.template.shape()),
            ));
        }
        let mut out = self.clone();
        out.template = template;
        Ok(out)
    }

    /// Same model with a different landmark dictionary.
    pub fn with_landmarks(&self, landmarks: LandmarkDictionary) -> Result<Self> {
        landmarks.check_vertex_range(self.vertex_count())?;
        let mut out = self.clone();
        out.landmark_weights = Self::weights_for(&self.skinning_weights, self.joint_count(), &landmarks.medians());
        out.landmarks = landmarks;
        Ok(out)
    }

    pub fn to_archive(&self) -> Archive {
        let (p, m) = (self.vertex_count(), self.joint_count());
        let mut a = Archive::new();
        a.put_floats("template", &[p, 3], self.template.to_vec());
        a.put_floats("blendshapes", &[p, 3, SHAPE_DIM], self.blendshapes.to_vec());
        a.put_floats("joint_regressor", &[m, p], self.joint_regressor.to_vec());
        a.put_floats("skinning_weights", &[p, m], self.skinning_weights.to_vec());
        a.put_ints("parents", &[m], self.tree.encoded());
        let faces: Vec<i64> = self.faces.iter().flatten().map(|&i| i as i64).collect();
        a.put_ints("faces", &[self.faces.len(), 3], faces);
        a.put_text("patches", self.landmarks.to_patch_table());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let float = |name: &str| -> Result<Tensor> {
            let (shape, data) = a.floats(name)?;
            Tensor::new(shape, data.to_vec())
        };
        let tree = KinematicTree::from_encoded(a.ints("parents")?.1)?;
        let (fshape, fdata) = a.ints("faces")?;
        if fshape.len() != 2 || fshape[1] != 3 {
            return Err(Error::ModelValidation(format!("faces have shape {fshape:?}")));
        }
        if fdata.iter().any(|&i| i < 0) {
            return Err(Error::ModelValidation("negative face index".into()));
        }
        let faces = fdata
            .chunks(3)
            .map(|f| [f[0] as usize, f[1] as usize, f[2] as usize])
            .collect();
        let landmarks = LandmarkDictionary::parse_patch_table(a.text("patches")?).map_err(Error::ModelValidation)?;
        Self::new(
            float("template")?,
            float("blendshapes")?,
            float("joint_regressor")?,
            float("skinning_weights")?,
            tree,
            faces,
            landmarks,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
