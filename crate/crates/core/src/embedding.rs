//! Fine-tuning embedding: attention encoder from the raw expression vector to
//! a compact conditioning feature.
//!
//! Each expression component becomes one token `δ_j * e_j + p_j`; a single
//! self-attention block with a residual connection mixes the tokens, which are
//! then mean-pooled and projected through `tanh`.

use crate::error::{Error, Result};
use crate::numerics::{AttentionParams, AttentionTape, Parameters, Real, Rng, Tensor2};

pub const TOKEN_WIDTH: usize = 16;
pub const DEFAULT_EMBED_WIDTH: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    Raw,
    FineTuned,
}

impl EmbeddingMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::Raw => "raw",
            EmbeddingMode::FineTuned => "fine_tuned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EmbeddingMode::Raw),
            "fine_tuned" | "ft" | "f.t." => Ok(EmbeddingMode::FineTuned),
            other => Err(Error::Config(format!("unknown embedding mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<R> {
    /// `input_dim x TOKEN_WIDTH` per-component scale vectors.
    pub token_scale: Tensor2<R>,
    /// `input_dim x TOKEN_WIDTH` per-component position offsets.
    pub token_offset: Tensor2<R>,
    pub attention: AttentionParams<R>,
    /// `output_dim x TOKEN_WIDTH`.
    pub out_weight: Tensor2<R>,
    pub out_bias: Vec<R>,
}

#[derive(Debug, Clone)]
pub struct EmbedTape<R> {
    delta: Vec<R>,
    attention: AttentionTape<R>,
    pooled: Vec<R>,
    output: Vec<R>,
}

impl<R: Real> EncoderParams<R> {
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let a_tok = (6.0 / (1 + TOKEN_WIDTH) as f64).sqrt();
        let token_scale = Tensor2::from_fn(input_dim, TOKEN_WIDTH, |_, _| R::of(rng.uniform_range(-a_tok, a_tok)));
        let token_offset = Tensor2::from_fn(input_dim, TOKEN_WIDTH, |_, _| R::of(rng.uniform_range(-0.1, 0.1)));
        let attention = AttentionParams::init(TOKEN_WIDTH, rng);
        let a_out = (6.0 / (TOKEN_WIDTH + output_dim) as f64).sqrt();
        let out_weight = Tensor2::from_fn(output_dim, TOKEN_WIDTH, |_, _| R::of(rng.uniform_range(-a_out, a_out)));
        EncoderParams {
            token_scale,
            token_offset,
            attention,
            out_weight,
            out_bias: vec![R::zero(); output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.token_scale.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.out_weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            token_scale: Tensor2::zeros(self.input_dim(), TOKEN_WIDTH),
            token_offset: Tensor2::zeros(self.input_dim(), TOKEN_WIDTH),
            attention: self.attention.zeros_like(),
            out_weight: Tensor2::zeros(self.output_dim(), TOKEN_WIDTH),
            out_bias: vec![R::zero(); self.output_dim()],
        }
    }

    pub fn cast<S: Real>(&self) -> EncoderParams<S> {
        EncoderParams {
            token_scale: self.token_scale.cast(),
            token_offset: self.token_offset.cast(),
            attention: self.attention.cast(),
            out_weight: self.out_weight.cast(),
            out_bias: self.out_bias.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    pub fn embed(&self, delta: &[R]) -> Result<(Vec<R>, EmbedTape<R>)> {
        let d = self.input_dim();
        if delta.len() != d {
            return Err(Error::Config(format!(
                "encoder expects {d} expression components, got {}",
                delta.len()
            )));
        }
        let tokens = Tensor2::from_fn(d, TOKEN_WIDTH, |j, c| {
            delta[j] * self.token_scale.get(j, c) + self.token_offset.get(j, c)
        });
        let (mixed, attention) = self.attention.forward(&tokens)?;
        let inv = R::one() / R::of(d as f64);
        let mut pooled = vec![R::zero(); TOKEN_WIDTH];
        for j in 0..d {
            for c in 0..TOKEN_WIDTH {
                pooled[c] += (tokens.get(j, c) + mixed.get(j, c)) * inv;
            }
        }
        let output: Vec<R> = (0..self.output_dim())
            .map(|o| {
                let z: R = self.out_weight.row(o).iter().zip(&pooled).map(|(w, p)| *w * *p).sum::<R>() + self.out_bias[o];
                z.tanh()
            })
            .collect();
        let tape = EmbedTape {
            delta: delta.to_vec(),
            attention,
            pooled,
            output: output.clone(),
        };
        Ok((output, tape))
    }

    /// Accumulates parameter gradients and returns `d loss / d δ`.
    pub fn backward(&self, tape: &EmbedTape<R>, output_grad: &[R], grads: &mut EncoderParams<R>) -> Result<Vec<R>> {
        let d = self.input_dim();
        if output_grad.len() != self.output_dim() || tape.delta.len() != d {
            return Err(Error::Usage("embedding gradient shaped unlike the encoder".into()));
        }
        let mut d_pooled = vec![R::zero(); TOKEN_WIDTH];
        for o in 0..self.output_dim() {
            let y = tape.output[o];
            let dz = output_grad[o] * (R::one() - y * y);
            grads.out_bias[o] += dz;
            for c in 0..TOKEN_WIDTH {
                let g = grads.out_weight.get(o, c) + dz * tape.pooled[c];
                grads.out_weight.set(o, c, g);
                d_pooled[c] += dz * self.out_weight.get(o, c);
            }
        }
        let inv = R::one() / R::of(d as f64);
        let d_mixed = Tensor2::from_fn(d, TOKEN_WIDTH, |_, c| d_pooled[c] * inv);
        let mut d_tokens = self.attention.backward(&tape.attention, &d_mixed, &mut grads.attention)?;
        d_tokens.add_assign(&d_mixed);
        let mut d_delta = vec![R::zero(); d];
        for (j, dd) in d_delta.iter_mut().enumerate() {
            for c in 0..TOKEN_WIDTH {
                let g = d_tokens.get(j, c);
                let s = grads.token_scale.get(j, c) + g * tape.delta[j];
                grads.token_scale.set(j, c, s);
                let p = grads.token_offset.get(j, c) + g;
                grads.token_offset.set(j, c, p);
                *dd += g * self.token_scale.get(j, c);
            }
        }
        Ok(d_delta)
    }
}

impl<R: Real> Parameters<R> for EncoderParams<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[R])) {
        f(&format!("{prefix}.token_scale"), self.token_scale.data());
        f(&format!("{prefix}.token_offset"), self.token_offset.data());
        self.attention.visit(&format!("{prefix}.attention"), f);
        f(&format!("{prefix}.out_weight"), self.out_weight.data());
        f(&format!("{prefix}.out_bias"), &self.out_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [R])) {
        f(&format!("{prefix}.token_scale"), self.token_scale.data_mut());
        f(&format!("{prefix}.token_offset"), self.token_offset.data_mut());
        self.attention.visit_mut(&format!("{prefix}.attention"), f);
        f(&format!("{prefix}.out_weight"), self.out_weight.data_mut());
        f(&format!("{prefix}.out_bias"), &mut self.out_bias);
    }
}

/// Conditioning vector for the radiance field: the raw expression in raw mode,
/// the embedding in fine-tuned mode.
pub fn conditioning_for<R: Real>(
    mode: EmbeddingMode,
    delta: &[R],
    params: Option<&EncoderParams<R>>,
) -> Result<Vec<R>> {
    match mode {
        EmbeddingMode::Raw => Ok(delta.to_vec()),
        EmbeddingMode::FineTuned => {
            let p = params.ok_or_else(|| Error::Config("fine-tuned conditioning needs encoder parameters".into()))?;
            Ok(p.embed(delta)?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(rng: &mut Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
    }

    #[test]
    fn zero_projection_gives_zero_output() {
        let mut rng = Rng::seeded(1);
        let mut p = EncoderParams::<f64>::init(79, 30, &mut rng);
        p.out_weight.fill(0.0);
        let (y, _) = p.embed(&delta(&mut rng, 79)).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_width_and_range() {
        let mut rng = Rng::seeded(2);
        let p = EncoderParams::<f32>::init(79, 30, &mut rng);
        for _ in 0..20 {
            let x: Vec<f32> = (0..79).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect();
            let (y, _) = p.embed(&x).unwrap();
            assert_eq!(y.len(), 30);
            assert!(y.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn wrong_width_is_config_error() {
        let mut rng = Rng::seeded(3);
        let p = EncoderParams::<f64>::init(79, 30, &mut rng);
        assert!(matches!(p.embed(&[0.0; 10]), Err(Error::Config(_))));
    }

    #[test]
    fn conditioning_modes() {
        let mut rng = Rng::seeded(4);
        let p = EncoderParams::<f64>::init(79, 30, &mut rng);
        let x = delta(&mut rng, 79);
        assert_eq!(conditioning_for(EmbeddingMode::Raw, &x, None).unwrap(), x);
        assert_eq!(conditioning_for(EmbeddingMode::FineTuned, &x, Some(&p)).unwrap().len(), 30);
        assert!(conditioning_for::<f64>(EmbeddingMode::FineTuned, &x, None).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = Rng::seeded(5);
        let p = EncoderParams::<f64>::init(12, 6, &mut rng);
        let x = delta(&mut rng, 12);
        let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let f = |x: &[f64]| -> f64 { p.embed(x).unwrap().0.iter().zip(&w).map(|(a, b)| a * b).sum() };
        let (_, tape) = p.embed(&x).unwrap();
        let mut g = p.zeros_like();
        let dx = p.backward(&tape, &w, &mut g).unwrap();
        for i in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += 1e-4;
            b[i] -= 1e-4;
            let fd = (f(&a) - f(&b)) / 2e-4;
            let rel = (fd - dx[i]).abs() / fd.abs().max(dx[i].abs()).max(1e-6);
            assert!(rel < 1e-5, "component {i}: {fd} vs {}", dx[i]);
        }
    }
}
