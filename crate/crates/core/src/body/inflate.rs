use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{flat_from_points, points_from_flat, vertex_normals};

use super::model::BodyModel;

/// Default displacement of the template along its vertex normals, in meters.
pub const DEFAULT_INFLATION: f64 = 0.01;

/// Copy of `model` whose template is pushed `offset` meters along the
/// area-weighted vertex normals.
pub fn inflate_template(model: &BodyModel, offset: f64) -> Result<BodyModel> {
    if !(offset >= 0.0 && offset.is_finite()) {
        return Err(Error::Config(format!("inflation offset must be >= 0, got {offset}")));
    }
    if offset == 0.0 {
        return Ok(model.clone());
    }
    if model.faces().is_empty() {
        return Err(Error::ModelValidation("inflation needs mesh faces".into()));
    }
    let vertices = points_from_flat(model.template().data());
    let normals = vertex_normals(&vertices, model.faces())?;
    let moved: Vec<_> = vertices.iter().zip(&normals).map(|(v, n)| v + n * offset).collect();
    model.with_template(Tensor::new(&[vertices.len(), 3], flat_from_points(&moved))?)
}
