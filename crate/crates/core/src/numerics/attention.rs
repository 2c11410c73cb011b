//! Single-head scaled dot-product self-attention with learned projections.

use super::tensor::{gemm, matmul, matmul_nt, Tensor2};
use super::{Parameters, Real, Rng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<R> {
    pub width: usize,
    pub query: Tensor2<R>,
    pub key: Tensor2<R>,
    pub value: Tensor2<R>,
    pub output: Tensor2<R>,
    pub query_bias: Vec<R>,
    pub key_bias: Vec<R>,
    pub value_bias: Vec<R>,
    pub output_bias: Vec<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTape<R> {
    width: usize,
    tokens: Tensor2<R>,
    q: Tensor2<R>,
    k: Tensor2<R>,
    v: Tensor2<R>,
    weights: Tensor2<R>,
    context: Tensor2<R>,
}

impl<R: Real> AttentionTape<R> {
    /// Row-stochastic attention matrix from the recorded forward pass.
    pub fn attention_weights(&self) -> &Tensor2<R> {
        &self.weights
    }
}

fn add_bias<R: Real>(t: &mut Tensor2<R>, bias: &[R]) {
    for r in 0..t.rows() {
        for (v, b) in t.row_mut(r).iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

fn col_sums_into<R: Real>(t: &Tensor2<R>, out: &mut [R]) {
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += *v;
        }
    }
}

impl<R: Real> AttentionParams<R> {
    pub fn init(width: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (2 * width) as f64).sqrt();
        let mut m = || Tensor2::from_fn(width, width, |_, _| R::of(rng.uniform_range(-a, a)));
        let (query, key, value, output) = (m(), m(), m(), m());
        AttentionParams {
            width,
            query,
            key,
            value,
            output,
            query_bias: vec![R::zero(); width],
            key_bias: vec![R::zero(); width],
            value_bias: vec![R::zero(); width],
            output_bias: vec![R::zero(); width],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let w = self.width;
        AttentionParams {
            width: w,
            query: Tensor2::zeros(w, w),
            key: Tensor2::zeros(w, w),
            value: Tensor2::zeros(w, w),
            output: Tensor2::zeros(w, w),
            query_bias: vec![R::zero(); w],
            key_bias: vec![R::zero(); w],
            value_bias: vec![R::zero(); w],
            output_bias: vec![R::zero(); w],
        }
    }

    pub fn cast<S: Real>(&self) -> AttentionParams<S> {
        let v = |x: &[R]| x.iter().map(|b| S::of(b.f64())).collect::<Vec<S>>();
        AttentionParams {
            width: self.width,
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
            query_bias: v(&self.query_bias),
            key_bias: v(&self.key_bias),
            value_bias: v(&self.value_bias),
            output_bias: v(&self.output_bias),
        }
    }

    pub fn forward(&self, tokens: &Tensor2<R>) -> Result<(Tensor2<R>, AttentionTape<R>)> {
        if tokens.rows() == 0 {
            return Err(Error::Usage("attention over an empty token sequence".into()));
        }
        if tokens.cols() != self.width {
            return Err(Error::Config(format!(
                "token width {} does not match attention width {}",
                tokens.cols(),
                self.width
            )));
        }
        let mut q = matmul_nt(tokens, &self.query);
        add_bias(&mut q, &self.query_bias);
        let mut k = matmul_nt(tokens, &self.key);
        add_bias(&mut k, &self.key_bias);
        let mut v = matmul_nt(tokens, &self.value);
        add_bias(&mut v, &self.value_bias);

        let scale = R::one() / R::of(self.width as f64).sqrt();
        let mut weights = matmul_nt(&q, &k);
        for r in 0..weights.rows() {
            let row = weights.row_mut(r);
            let mut max = R::neg_infinity();
            for x in row.iter_mut() {
                *x *= scale;
                max = max.max(*x);
            }
            let mut sum = R::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let context = matmul(&weights, &v);
        let mut out = matmul_nt(&context, &self.output);
        add_bias(&mut out, &self.output_bias);
        let tape = AttentionTape {
            width: self.width,
            tokens: tokens.clone(),
            q,
            k,
            v,
            weights,
            context,
        };
        Ok((out, tape))
    }

    /// Accumulates into `grads` and returns the gradient w.r.t. the input tokens.
    pub fn backward(
        &self,
        tape: &AttentionTape<R>,
        output_grad: &Tensor2<R>,
        grads: &mut AttentionParams<R>,
    ) -> Result<Tensor2<R>> {
        if tape.width != self.width || grads.width != self.width {
            return Err(Error::Usage("attention tape or gradients shaped unlike params".into()));
        }
        if output_grad.shape() != tape.tokens.shape() {
            return Err(Error::Usage("attention output gradient shape mismatch".into()));
        }
        let n = tape.tokens.rows();
        let one = R::one();

        gemm(one, output_grad.view().t(), tape.context.view(), one, grads.output.view_mut());
        col_sums_into(output_grad, &mut grads.output_bias);
        let d_context = matmul(output_grad, &self.output);

        // d weights = d_context . v^T ; d v = weights^T . d_context
        let d_weights = matmul_nt(&d_context, &tape.v);
        let mut d_v = Tensor2::zeros(n, self.width);
        gemm(one, tape.weights.view().t(), d_context.view(), R::zero(), d_v.view_mut());

        let scale = one / R::of(self.width as f64).sqrt();
        let mut d_scores = Tensor2::zeros(n, n);
        for r in 0..n {
            let a = tape.weights.row(r);
            let da = d_weights.row(r);
            let dot: R = a.iter().zip(da).map(|(x, y)| *x * *y).sum();
            for (c, out) in d_scores.row_mut(r).iter_mut().enumerate() {
                *out = a[c] * (da[c] - dot) * scale;
            }
        }
        let d_q = matmul(&d_scores, &tape.k);
        let mut d_k = Tensor2::zeros(n, self.width);
        gemm(one, d_scores.view().t(), tape.q.view(), R::zero(), d_k.view_mut());

        let mut d_tokens = Tensor2::zeros(n, self.width);
        for (d, w, gw, gb) in [
            (&d_q, &self.query, &mut grads.query, &mut grads.query_bias),
            (&d_k, &self.key, &mut grads.key, &mut grads.key_bias),
            (&d_v, &self.value, &mut grads.value, &mut grads.value_bias),
        ] {
            gemm(one, d.view().t(), tape.tokens.view(), one, gw.view_mut());
            col_sums_into(d, gb);
            gemm(one, d.view(), w.view(), one, d_tokens.view_mut());
        }
        Ok(d_tokens)
    }
}

impl<R: Real> Parameters<R> for AttentionParams<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[R])) {
        f(&format!("{prefix}.query"), self.query.data());
        f(&format!("{prefix}.key"), self.key.data());
        f(&format!("{prefix}.value"), self.value.data());
        f(&format!("{prefix}.output"), self.output.data());
        f(&format!("{prefix}.query_bias"), &self.query_bias);
        f(&format!("{prefix}.key_bias"), &self.key_bias);
        f(&format!("{prefix}.value_bias"), &self.value_bias);
        f(&format!("{prefix}.output_bias"), &self.output_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [R])) {
        f(&format!("{prefix}.query"), self.query.data_mut());
        f(&format!("{prefix}.key"), self.key.data_mut());
        f(&format!("{prefix}.value"), self.value.data_mut());
        f(&format!("{prefix}.output"), self.output.data_mut());
        f(&format!("{prefix}.query_bias"), &mut self.query_bias);
        f(&format!("{prefix}.key_bias"), &mut self.key_bias);
        f(&format!("{prefix}.value_bias"), &mut self.value_bias);
        f(&format!("{prefix}.output_bias"), &mut self.output_bias);
    }
}
