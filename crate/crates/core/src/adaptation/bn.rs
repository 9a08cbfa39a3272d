use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

/// Copy of `model` whose batchnorm running statistics are recomputed from
/// `target`; learned parameters are left untouched.
pub fn bn_adapt(model: &Model, target: &Dataset) -> Result<Model> {
    const OP: &str = "bn_adapt";
    model.require_frozen(OP)?;
    if !model.has_batchnorm() {
        return Err(Error::Capability {
            op: OP,
            msg: "model has no batchnorm layers to adapt".into(),
        });
    }
    if target.image_shape() != model.spec.input_shape {
        return Err(Error::shape(OP, &model.spec.input_shape, &target.image_shape()));
    }
    let mut out = model.clone();
    out.bn_stats = model.population_bn_stats(&target.images)?;
    Ok(out)
}
