//! Dense linear algebra, feed-forward and attention layers with manual
//! backpropagation, and the Adam optimizer.

mod adam;
mod attention;
mod mlp;
mod real;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use attention::{AttentionParams, AttentionTape};
pub use mlp::{sigmoid, softplus, Activation, Dense, MlpBackward, MlpParams, MlpTape, RowGroups};
pub use real::Real;
pub use rng::Rng;
pub use tensor::{gemm, matmul, matmul_nt, MatMut, MatRef, Tensor2};

/// A named collection of parameter slices with a fixed visiting order.
///
/// Gradient containers reuse the parameter type, so optimizers and
/// serializers can walk both structures in lockstep.
pub trait Parameters<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[R]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [R]));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<R>
    where
        R: Copy,
    {
        let mut out = Vec::new();
        self.visit("", &mut |_, s| out.extend_from_slice(s));
        out
    }

    /// Overwrites parameters from a flat vector in visiting order.
    fn load_flat(&mut self, values: &[R]) -> bool
    where
        R: Copy,
    {
        if values.len() != self.parameter_count() {
            return false;
        }
        let mut offset = 0;
        self.visit_mut("", &mut |_, s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        });
        true
    }
}
