//! Linear operators with a registered adjoint.

use crate::scalar::Scalar;

/// A linear map between flat arrays together with its exact adjoint.
///
/// Shapes are `[channels, rows, cols]`; the autodiff engine uses them to check
/// graph construction and differentiates an application by applying the
/// adjoint to the incoming gradient.
pub trait LinearOperator<T: Scalar>: Send + Sync {
    fn domain_shape(&self) -> [usize; 3];
    fn range_shape(&self) -> [usize; 3];
    fn apply(&self, x: &[T]) -> Vec<T>;
    fn apply_adjoint(&self, y: &[T]) -> Vec<T>;

    fn name(&self) -> &str {
        "linear-operator"
    }
}
