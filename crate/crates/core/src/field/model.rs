use crate::config::{fmt_list, parse_array, parse_value, unknown_key, Settings};
use crate::embedding::{conditioning_for, EmbeddingMode, EncoderParams, DEFAULT_EMBED_WIDTH};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Activation, MlpParams, Parameters, Real, Rng, Tensor2};

use super::encoding::{encode_into, encoded_width};

pub const CODE_WIDTH: usize = 8;
pub const RAW_OUTPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Head,
    Torso,
}

/// Architecture and geometry of a trained model. Everything here is stored in
/// the checkpoint so a receiver can rebuild the decoder without a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub expr_dim: usize,
    pub mode: EmbeddingMode,
    pub embed_width: usize,
    pub code_enabled: bool,
    pub pos_orders: usize,
    pub dir_orders: usize,
    pub head_layers: usize,
    pub head_width: usize,
    pub torso_layers: usize,
    pub torso_width: usize,
    pub density_shift: f64,
    pub density_scale: f64,
    pub focal: f64,
    pub bound_radius: f64,
    pub background: [f64; 3],
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            expr_dim: 79,
            mode: EmbeddingMode::Raw,
            embed_width: DEFAULT_EMBED_WIDTH,
            code_enabled: true,
            pos_orders: 6,
            dir_orders: 4,
            head_layers: 6,
            head_width: 128,
            torso_layers: 4,
            torso_width: 128,
            density_shift: -1.0,
            density_scale: 10.0,
            focal: 1.25,
            bound_radius: 0.5,
            background: [0.55, 0.58, 0.62],
        }
    }
}

impl ModelSpec {
    /// Width of the vector the field is conditioned on.
    pub fn conditioning_width(&self) -> usize {
        match self.mode {
            EmbeddingMode::Raw => self.expr_dim,
            EmbeddingMode::FineTuned => self.embed_width,
        }
    }

    pub fn position_width(&self) -> usize {
        encoded_width(3, self.pos_orders)
    }

    pub fn direction_width(&self) -> usize {
        encoded_width(3, self.dir_orders)
    }

    /// Columns shared by every sample of one ray: direction, conditioning, code.
    pub fn ray_width(&self) -> usize {
        self.direction_width() + self.conditioning_width() + CODE_WIDTH
    }

    pub fn input_width(&self) -> usize {
        self.position_width() + self.ray_width()
    }

    pub fn widths(&self, part: Part) -> Vec<usize> {
        let (layers, width) = match part {
            Part::Head => (self.head_layers, self.head_width),
            Part::Torso => (self.torso_layers, self.torso_width),
        };
        let mut w = vec![self.input_width()];
        w.extend(std::iter::repeat(width).take(layers));
        w.push(RAW_OUTPUTS);
        w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.expr_dim == 0 || self.embed_width == 0 {
            return bad("expression and embedding widths must be positive".into());
        }
        if self.head_layers == 0 || self.torso_layers == 0 || self.head_width == 0 || self.torso_width == 0 {
            return bad("field networks need at least one hidden layer of positive width".into());
        }
        if !(self.density_scale > 0.0) || !self.density_shift.is_finite() {
            return bad("density scale must be positive and shift finite".into());
        }
        if !(self.focal > 0.0) || !(self.bound_radius > 0.0) {
            return bad("focal length and bound radius must be positive".into());
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background components must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Density from the raw density output.
    #[inline]
    pub fn density<R: Real>(&self, raw: R) -> f64 {
        softplus(raw.f64() + self.density_shift) * self.density_scale
    }

    /// `dσ / d raw`.
    #[inline]
    pub fn density_slope<R: Real>(&self, raw: R) -> f64 {
        sigmoid(raw.f64() + self.density_shift) * self.density_scale
    }

    /// Per-ray input columns `[dir_enc | conditioning | code]`.
    pub fn ray_columns<R: Real>(&self, direction: [f64; 3], conditioning: &[R], code: &[R], out: &mut [R]) {
        let dw = self.direction_width();
        encode_into(&direction, self.dir_orders, &mut out[..dw]);
        let cw = conditioning.len();
        out[dw..dw + cw].copy_from_slice(conditioning);
        out[dw + cw..].copy_from_slice(code);
    }

    /// Per-sample input columns: the position normalized by the bound radius.
    pub fn position_columns<R: Real>(&self, point: [f64; 3], out: &mut [R]) {
        let r = self.bound_radius;
        encode_into(&[point[0] / r, point[1] / r, point[2] / r], self.pos_orders, out);
    }
}

impl Settings for ModelSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "expr_dim" => self.expr_dim = parse_value(key, value)?,
            "mode" => self.mode = EmbeddingMode::parse(value)?,
            "embed_width" => self.embed_width = parse_value(key, value)?,
            "constraint_code" => self.code_enabled = crate::config::parse_bool(key, value)?,
            "pos_orders" => self.pos_orders = parse_value(key, value)?,
            "dir_orders" => self.dir_orders = parse_value(key, value)?,
            "head_layers" => self.head_layers = parse_value(key, value)?,
            "head_width" => self.head_width = parse_value(key, value)?,
            "torso_layers" => self.torso_layers = parse_value(key, value)?,
            "torso_width" => self.torso_width = parse_value(key, value)?,
            "density_shift" => self.density_shift = parse_value(key, value)?,
            "density_scale" => self.density_scale = parse_value(key, value)?,
            "focal" => self.focal = parse_value(key, value)?,
            "bound_radius" => self.bound_radius = parse_value(key, value)?,
            "background" => self.background = parse_array(key, value)?,
            _ => return Err(unknown_key("model", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("expr_dim", self.expr_dim.to_string()),
            e("mode", self.mode.name().to_string()),
            e("embed_width", self.embed_width.to_string()),
            e("constraint_code", self.code_enabled.to_string()),
            e("pos_orders", self.pos_orders.to_string()),
            e("dir_orders", self.dir_orders.to_string()),
            e("head_layers", self.head_layers.to_string()),
            e("head_width", self.head_width.to_string()),
            e("torso_layers", self.torso_layers.to_string()),
            e("torso_width", self.torso_width.to_string()),
            e("density_shift", self.density_shift.to_string()),
            e("density_scale", self.density_scale.to_string()),
            e("focal", self.focal.to_string()),
            e("bound_radius", self.bound_radius.to_string()),
            e("background", fmt_list(&self.background)),
        ]
    }
}

/// Coarse and fine networks of one field (head or torso).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<R> {
    pub coarse: MlpParams<R>,
    pub fine: MlpParams<R>,
}

impl<R: Real> FieldParams<R> {
    pub fn init(widths: &[usize], rng: &mut Rng) -> Self {
        FieldParams {
            coarse: MlpParams::init(widths, Activation::Relu, Activation::Identity, rng),
            fine: MlpParams::init(widths, Activation::Relu, Activation::Identity, rng),
        }
    }

    pub fn net(&self, stage: Stage) -> &MlpParams<R> {
        match stage {
            Stage::Coarse => &self.coarse,
            Stage::Fine => &self.fine,
        }
    }

    pub fn net_mut(&mut self, stage: Stage) -> &mut MlpParams<R> {
        match stage {
            Stage::Coarse => &mut self.coarse,
            Stage::Fine => &mut self.fine,
        }
    }

    pub fn zeros_like(&self) -> Self {
        FieldParams {
            coarse: self.coarse.zeros_like(),
            fine: self.fine.zeros_like(),
        }
    }

    pub fn cast<S: Real>(&self) -> FieldParams<S> {
        FieldParams {
            coarse: self.coarse.cast(),
            fine: self.fine.cast(),
        }
    }
}

impl<R: Real> Parameters<R> for FieldParams<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[R])) {
        self.coarse.visit(&format!("{prefix}.coarse"), f);
        self.fine.visit(&format!("{prefix}.fine"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [R])) {
        self.coarse.visit_mut(&format!("{prefix}.coarse"), f);
        self.fine.visit_mut(&format!("{prefix}.fine"), f);
    }
}

/// Head and torso fields, the shared constraint code and the optional
/// fine-tuning encoder. Gradient buffers use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<R> {
    pub spec: ModelSpec,
    pub head: FieldParams<R>,
    pub torso: FieldParams<R>,
    pub code: Vec<R>,
    pub encoder: Option<EncoderParams<R>>,
}

impl<R: Real> Model<R> {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::stream(seed, 0x4649_454c_44);
        let head = FieldParams::init(&spec.widths(Part::Head), &mut rng);
        let torso = FieldParams::init(&spec.widths(Part::Torso), &mut rng);
        let encoder = match spec.mode {
            EmbeddingMode::Raw => None,
            EmbeddingMode::FineTuned => Some(EncoderParams::init(spec.expr_dim, spec.embed_width, &mut rng)),
        };
        Ok(Model {
            head,
            torso,
            code: vec![R::zero(); CODE_WIDTH],
            encoder,
            spec,
        })
    }

    pub fn field(&self, part: Part) -> &FieldParams<R> {
        match part {
            Part::Head => &self.head,
            Part::Torso => &self.torso,
        }
    }

    pub fn field_mut(&mut self, part: Part) -> &mut FieldParams<R> {
        match part {
            Part::Head => &mut self.head,
            Part::Torso => &mut self.torso,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            head: self.head.zeros_like(),
            torso: self.torso.zeros_like(),
            code: vec![R::zero(); self.code.len()],
            encoder: self.encoder.as_ref().map(|e| e.zeros_like()),
        }
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            spec: self.spec.clone(),
            head: self.head.cast(),
            torso: self.torso.cast(),
            code: self.code.iter().map(|v| S::of(v.f64())).collect(),
            encoder: self.encoder.as_ref().map(|e| e.cast()),
        }
    }

    /// Checks that every network matches the architecture in `spec`.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for part in [Part::Head, Part::Torso] {
            let expected: Vec<(usize, usize)> = self.spec.widths(part).windows(2).map(|w| (w[0], w[1])).collect();
            for stage in [Stage::Coarse, Stage::Fine] {
                let net = self.field(part).net(stage);
                net.validate()?;
                if net.shapes() != expected {
                    return Err(Error::Config(format!(
                        "{part:?} {stage:?} network has shapes {:?}, expected {expected:?}",
                        net.shapes()
                    )));
                }
            }
        }
        if self.code.len() != CODE_WIDTH {
            return Err(Error::Config(format!("constraint code has width {}", self.code.len())));
        }
        match (&self.encoder, self.spec.mode) {
            (None, EmbeddingMode::Raw) => {}
            (Some(e), EmbeddingMode::FineTuned)
                if e.input_dim() == self.spec.expr_dim && e.output_dim() == self.spec.embed_width => {}
            _ => return Err(Error::Config("encoder presence or shape disagrees with the embedding mode".into())),
        }
        Ok(())
    }

    /// The conditioning vector the fields see for an expression.
    pub fn conditioning(&self, expression: &[R]) -> Result<Vec<R>> {
        if expression.len() != self.spec.expr_dim {
            return Err(Error::Config(format!(
                "expression has {} components, model expects {}",
                expression.len(),
                self.spec.expr_dim
            )));
        }
        conditioning_for(self.spec.mode, expression, self.encoder.as_ref())
    }
}

impl<R: Real> Parameters<R> for Model<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[R])) {
        self.head.visit(&format!("{prefix}head"), f);
        self.torso.visit(&format!("{prefix}torso"), f);
        f(&format!("{prefix}code"), &self.code);
        if let Some(e) = &self.encoder {
            e.visit(&format!("{prefix}encoder"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [R])) {
        self.head.visit_mut(&format!("{prefix}head"), f);
        self.torso.visit_mut(&format!("{prefix}torso"), f);
        f(&format!("{prefix}code"), &mut self.code);
        if let Some(e) = &mut self.encoder {
            e.visit_mut(&format!("{prefix}encoder"), f);
        }
    }
}

/// Evaluates one field network at a single point, returning `(c, σ)`.
pub fn field_eval<R: Real>(
    spec: &ModelSpec,
    field: &FieldParams<R>,
    stage: Stage,
    point: [f64; 3],
    direction: [f64; 3],
    conditioning: &[R],
    code: &[R],
) -> Result<([f64; 3], f64)> {
    let n = crate::camera::norm(direction);
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("direction has norm {n}")));
    }
    if conditioning.len() != spec.conditioning_width() || code.len() != CODE_WIDTH {
        return Err(Error::Config(format!(
            "field expects conditioning width {} and code width {CODE_WIDTH}, got {} and {}",
            spec.conditioning_width(),
            conditioning.len(),
            code.len()
        )));
    }
    let pw = spec.position_width();
    let mut input = vec![R::zero(); spec.input_width()];
    spec.position_columns(point, &mut input[..pw]);
    spec.ray_columns(direction, conditioning, code, &mut input[pw..]);
    let (out, _) = field.net(stage).forward(&input)?;
    Ok(decode_raw(spec, &out))
}

/// Maps the four raw network outputs to `(c, σ)`.
#[inline]
pub fn decode_raw<R: Real>(spec: &ModelSpec, raw: &[R]) -> ([f64; 3], f64) {
    let c = [
        sigmoid(raw[0].f64()),
        sigmoid(raw[1].f64()),
        sigmoid(raw[2].f64()),
    ];
    (c, spec.density(raw[3]))
}

/// Builds the concatenated `[pos_enc | dir_enc | cond | code]` input row for
/// one sample; used by tests as an independent layout oracle.
pub fn input_row<R: Real>(spec: &ModelSpec, point: [f64; 3], direction: [f64; 3], conditioning: &[R], code: &[R]) -> Tensor2<R> {
    let pw = spec.position_width();
    let mut row = vec![R::zero(); spec.input_width()];
    spec.position_columns(point, &mut row[..pw]);
    spec.ray_columns(direction, conditioning, code, &mut row[pw..]);
    Tensor2::row_vector(&row)
}
