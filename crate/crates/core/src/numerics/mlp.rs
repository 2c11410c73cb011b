//! Dense feed-forward networks with explicit activation tapes.
//!
//! Besides plain batched evaluation, the first layer accepts *grouped* inputs:
//! rows are split into contiguous groups and each group shares a tail of input
//! columns (e.g. every sample on one ray shares the ray's conditioning vector).
//! The shared tail is multiplied once per group instead of once per row, which
//! is mathematically identical to concatenating it onto every row.

use super::tensor::{gemm, matmul_nt, Tensor2};
use super::{Parameters, Real, Rng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
    Tanh,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Softplus => 3,
            Activation::Tanh => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Softplus,
            4 => Activation::Tanh,
            _ => return None,
        })
    }

    #[inline]
    pub fn apply<R: Real>(self, z: R) -> R {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(R::zero()),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative<R: Real>(self, z: R, y: R) -> R {
        match self {
            Activation::Identity => R::one(),
            Activation::Relu => {
                if z > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
            Activation::Sigmoid => y * (R::one() - y),
            Activation::Softplus => sigmoid(z),
            Activation::Tanh => R::one() - y * y,
        }
    }
}

#[inline]
pub fn sigmoid<R: Real>(z: R) -> R {
    if z >= R::zero() {
        R::one() / (R::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus<R: Real>(z: R) -> R {
    if z > R::of(20.0) {
        z + (-z).exp()
    } else if z < R::of(-20.0) {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<R> {
    /// `out x in`.
    pub weight: Tensor2<R>,
    pub bias: Vec<R>,
    pub activation: Activation,
}

impl<R: Real> Dense<R> {
    pub fn in_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<R> {
    pub layers: Vec<Dense<R>>,
}

/// Row grouping for the first layer: `inputs` holds one row per group and
/// `bounds[g]..bounds[g + 1]` are the batch rows belonging to group `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGroups<R> {
    pub inputs: Tensor2<R>,
    pub bounds: Vec<usize>,
}

impl<R: Real> RowGroups<R> {
    pub fn new(inputs: Tensor2<R>, bounds: Vec<usize>) -> Result<Self> {
        if bounds.len() != inputs.rows() + 1 || bounds.first() != Some(&0) {
            return Err(Error::Usage(format!(
                "row groups need {} bounds starting at 0",
                inputs.rows() + 1
            )));
        }
        if bounds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Usage("row group bounds must be non-decreasing".into()));
        }
        Ok(RowGroups { inputs, bounds })
    }

    fn rows(&self) -> usize {
        *self.bounds.last().unwrap_or(&0)
    }
}

/// Everything `backward` needs to replay a forward call exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTape<R> {
    shapes: Vec<(usize, usize)>,
    /// Input to each layer (`inputs[0]` is the per-row part of the network input).
    inputs: Vec<Tensor2<R>>,
    pre: Vec<Tensor2<R>>,
    output: Tensor2<R>,
    groups: Option<RowGroups<R>>,
}

impl<R: Real> MlpTape<R> {
    pub fn output(&self) -> &Tensor2<R> {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.output.rows()
    }

    /// Sign pattern of every ReLU pre-activation, used to detect kinks when
    /// comparing against finite differences.
    pub fn relu_signature(&self, params: &MlpParams<R>) -> Vec<bool> {
        let mut sig = Vec::new();
        for (layer, z) in params.layers.iter().zip(&self.pre) {
            if layer.activation == Activation::Relu {
                sig.extend(z.data().iter().map(|v| *v > R::zero()));
            }
        }
        sig
    }
}

#[derive(Debug, Clone)]
pub struct MlpBackward<R> {
    /// Gradient w.r.t. the per-row input (absent when not requested).
    pub input_grad: Option<Tensor2<R>>,
    /// Gradient w.r.t. each group's shared input row.
    pub group_grad: Option<Tensor2<R>>,
}

impl<R: Real> MlpParams<R> {
    /// Seeded uniform(-a, a) init with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(widths: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = Tensor2::from_fn(fan_out, fan_in, |_, _| R::of(rng.uniform_range(-a, a)));
            let activation = if i + 2 == widths.len() { output } else { hidden };
            layers.push(Dense {
                weight,
                bias: vec![R::zero(); fan_out],
                activation,
            });
        }
        MlpParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Tensor2::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![R::zero(); l.bias.len()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> MlpParams<S> {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|b| S::of(b.f64())).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_width())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_width())
    }

    /// `(in, out)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_width(), l.out_width())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("MLP has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::Config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_width(),
                    i + 1,
                    pair[1].in_width()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.out_width() {
                return Err(Error::Config(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(())
    }

    /// Single-vector forward pass.
    pub fn forward(&self, input: &[R]) -> Result<(Vec<R>, MlpTape<R>)> {
        let (out, tape) = self.forward_batch(Tensor2::row_vector(input))?;
        Ok((out.into_vec(), tape))
    }

    pub fn forward_batch(&self, input: Tensor2<R>) -> Result<(Tensor2<R>, MlpTape<R>)> {
        self.forward_impl(input, None)
    }

    /// Forward pass where row `r` of the logical input is
    /// `[local.row(r), groups.inputs.row(g(r))]`.
    pub fn forward_grouped(
        &self,
        local: Tensor2<R>,
        groups: RowGroups<R>,
    ) -> Result<(Tensor2<R>, MlpTape<R>)> {
        if groups.rows() != local.rows() {
            return Err(Error::Usage(format!(
                "row groups cover {} rows but batch has {}",
                groups.rows(),
                local.rows()
            )));
        }
        self.forward_impl(local, Some(groups))
    }

    fn forward_impl(
        &self,
        local: Tensor2<R>,
        groups: Option<RowGroups<R>>,
    ) -> Result<(Tensor2<R>, MlpTape<R>)> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Config("MLP has no layers".into()))?;
        let shared = groups.as_ref().map_or(0, |g| g.inputs.cols());
        if local.cols() + shared != first.in_width() {
            return Err(Error::Config(format!(
                "input width {} does not match first layer width {}",
                local.cols() + shared,
                first.in_width()
            )));
        }
        let n = local.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = local;
        for (li, layer) in self.layers.iter().enumerate() {
            let out_w = layer.out_width();
            let mut z = Tensor2::zeros(n, out_w);
            let local_w = x.cols();
            gemm(
                R::one(),
                x.view(),
                layer.weight.cols_view(0, local_w).t(),
                R::zero(),
                z.view_mut(),
            );
            if li == 0 {
                if let Some(g) = &groups {
                    // per-group bias: shared_row . W[:, local_w..]^T
                    let mut gb = Tensor2::zeros(g.inputs.rows(), out_w);
                    gemm(
                        R::one(),
                        g.inputs.view(),
                        layer.weight.cols_view(local_w, shared).t(),
                        R::zero(),
                        gb.view_mut(),
                    );
                    for gi in 0..g.inputs.rows() {
                        let brow = gb.row(gi).to_vec();
                        for r in g.bounds[gi]..g.bounds[gi + 1] {
                            for (zv, bv) in z.row_mut(r).iter_mut().zip(&brow) {
                                *zv += *bv;
                            }
                        }
                    }
                }
            }
            for r in 0..n {
                for (zv, bv) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *zv += *bv;
                }
            }
            let mut y = z.clone();
            let act = layer.activation;
            if act != Activation::Identity {
                y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        let tape = MlpTape {
            shapes: self.shapes(),
            inputs,
            pre,
            output: x.clone(),
            groups,
        };
        Ok((x, tape))
    }

    /// Accumulates parameter gradients into `grads` (`+=` semantics) and
    /// returns input gradients when `want_input_grad` is set.
    pub fn backward(
        &self,
        tape: &MlpTape<R>,
        output_grad: &Tensor2<R>,
        grads: &mut MlpParams<R>,
        want_input_grad: bool,
    ) -> Result<MlpBackward<R>> {
        if tape.shapes != self.shapes() {
            return Err(Error::Usage("tape was recorded with a different network".into()));
        }
        if grads.shapes() != self.shapes() {
            return Err(Error::Usage("gradient buffer shaped unlike the network".into()));
        }
        if output_grad.shape() != tape.output.shape() {
            return Err(Error::Usage(format!(
                "output gradient {:?} does not match recorded output {:?}",
                output_grad.shape(),
                tape.output.shape()
            )));
        }
        let n = tape.batch();
        let mut upstream = output_grad.clone();
        let mut input_grad = None;
        let mut group_grad = None;
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let z = &tape.pre[li];
            let y = if li + 1 < self.layers.len() {
                &tape.inputs[li + 1]
            } else {
                &tape.output
            };
            // dz = upstream * act'(z)
            let act = layer.activation;
            let mut dz = upstream;
            if act != Activation::Identity {
                for ((d, zv), yv) in dz.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
                    *d *= act.derivative(*zv, *yv);
                }
            }
            let x = &tape.inputs[li];
            let local_w = x.cols();
            let g = &mut grads.layers[li];
            // dW[:, :local] += dz^T x
            gemm(
                R::one(),
                dz.view().t(),
                x.view(),
                R::one(),
                g.weight.cols_view_mut(0, local_w),
            );
            for r in 0..n {
                for (b, d) in g.bias.iter_mut().zip(dz.row(r)) {
                    *b += *d;
                }
            }
            if li == 0 {
                if let Some(groups) = &tape.groups {
                    let shared = groups.inputs.cols();
                    let ng = groups.inputs.rows();
                    let mut sums = Tensor2::zeros(ng, layer.out_width());
                    for gi in 0..ng {
                        let srow = sums.row_mut(gi);
                        for r in groups.bounds[gi]..groups.bounds[gi + 1] {
                            for (s, d) in srow.iter_mut().zip(dz.row(r)) {
                                *s += *d;
                            }
                        }
                    }
                    gemm(
                        R::one(),
                        sums.view().t(),
                        groups.inputs.view(),
                        R::one(),
                        g.weight.cols_view_mut(local_w, shared),
                    );
                    let mut gg = Tensor2::zeros(ng, shared);
                    gemm(
                        R::one(),
                        sums.view(),
                        layer.weight.cols_view(local_w, shared),
                        R::zero(),
                        gg.view_mut(),
                    );
                    group_grad = Some(gg);
                }
                if want_input_grad {
                    let mut dx = Tensor2::zeros(n, local_w);
                    gemm(
                        R::one(),
                        dz.view(),
                        layer.weight.cols_view(0, local_w),
                        R::zero(),
                        dx.view_mut(),
                    );
                    input_grad = Some(dx);
                }
                upstream = Tensor2::zeros(0, 0);
            } else {
                let mut dx = Tensor2::zeros(n, local_w);
                gemm(R::one(), dz.view(), layer.weight.view(), R::zero(), dx.view_mut());
                upstream = dx;
            }
        }
        drop(upstream);
        Ok(MlpBackward {
            input_grad,
            group_grad,
        })
    }

    /// Straight-line reference evaluation used to cross-check the GEMM path.
    pub fn forward_reference(&self, input: &[R]) -> Vec<R> {
        let mut x = input.to_vec();
        for layer in &self.layers {
            let z = matmul_nt(&Tensor2::row_vector(&x), &layer.weight);
            x = z
                .data()
                .iter()
                .zip(&layer.bias)
                .map(|(v, b)| layer.activation.apply(*v + *b))
                .collect();
        }
        x
    }
}

impl<R: Real> Parameters<R> for MlpParams<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[R])) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("{prefix}.layer{i}.weight"), l.weight.data());
            f(&format!("{prefix}.layer{i}.bias"), &l.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [R])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.layer{i}.weight"), l.weight.data_mut());
            f(&format!("{prefix}.layer{i}.bias"), &mut l.bias);
        }
    }
}
