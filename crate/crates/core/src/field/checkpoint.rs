//! NVCK checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "NVCK" | version u16 | conditioning width u16 | code width u16
//! expr dim u16 | embed width u16 | flags u16 | pos orders u8 | dir orders u8
//! density shift f64 | density scale f64 | focal f64 | bound radius f64 | background 3 x f64
//! network count u16, then per network: layer count u16, per layer (out u16, in u16, activation u8)
//! field parameters f32 (head coarse, head fine, torso coarse, torso fine), code f32 x code width
//! encoder section: present u8 [input u16 | output u16 | token width u16 | parameters f32]
//! training section: present u8 [iteration u64 | seed u64 | adam step u64 | lr, beta1, beta2, eps f64 |
//!                               first moments f32 | second moments f32]
//! ```
//!
//! The model identifier is the SHA-256 of everything before the training
//! section, so resuming training does not change a model's identity until its
//! weights change.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{Model, ModelSpec, Part, Stage, CODE_WIDTH};
use crate::embedding::{EmbeddingMode, TOKEN_WIDTH};
use crate::error::{Error, Result};
use crate::numerics::{Activation, AdamConfig, AdamState, Parameters};
use crate::wire::{narrow_u16, ByteReader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVCK";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const FLAG_FINE_TUNED: u16 = 1;
pub const FLAG_CONSTRAINT_CODE: u16 = 1 << 1;

pub type ModelDigest = [u8; 32];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    /// Number of completed optimizer steps.
    pub iteration: u64,
    pub seed: u64,
    pub adam: AdamState<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub training: Option<TrainingState>,
}

pub fn spec_flags(spec: &ModelSpec) -> u16 {
    let mut flags = 0;
    if spec.mode == EmbeddingMode::FineTuned {
        flags |= FLAG_FINE_TUNED;
    }
    if spec.code_enabled {
        flags |= FLAG_CONSTRAINT_CODE;
    }
    flags
}

const NETS: [(Part, Stage); 4] = [
    (Part::Head, Stage::Coarse),
    (Part::Head, Stage::Fine),
    (Part::Torso, Stage::Coarse),
    (Part::Torso, Stage::Fine),
];

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Model-only serialization: everything the digest covers.
pub fn model_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    model.validate()?;
    let spec = &model.spec;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&narrow_u16(spec.conditioning_width(), "conditioning width")?.to_le_bytes());
    out.extend_from_slice(&narrow_u16(CODE_WIDTH, "code width")?.to_le_bytes());
    out.extend_from_slice(&narrow_u16(spec.expr_dim, "expression dimension")?.to_le_bytes());
    out.extend_from_slice(&narrow_u16(spec.embed_width, "embedding width")?.to_le_bytes());
    out.extend_from_slice(&spec_flags(spec).to_le_bytes());
    let order = |v: usize| u8::try_from(v).map_err(|_| Error::Format(format!("encoding order {v} too large")));
    out.push(order(spec.pos_orders)?);
    out.push(order(spec.dir_orders)?);
    for v in [spec.density_shift, spec.density_scale, spec.focal, spec.bound_radius] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in spec.background {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(NETS.len() as u16).to_le_bytes());
    for (part, stage) in NETS {
        let net = model.field(part).net(stage);
        out.extend_from_slice(&narrow_u16(net.layers.len(), "layer count")?.to_le_bytes());
        for layer in &net.layers {
            out.extend_from_slice(&narrow_u16(layer.out_width(), "layer width")?.to_le_bytes());
            out.extend_from_slice(&narrow_u16(layer.in_width(), "layer width")?.to_le_bytes());
            out.push(layer.activation.code());
        }
    }
    for (part, stage) in NETS {
        model.field(part).net(stage).visit("", &mut |_, s| put_f32s(&mut out, s));
    }
    put_f32s(&mut out, &model.code);
    match &model.encoder {
        None => out.push(0),
        Some(e) => {
            out.push(1);
            out.extend_from_slice(&narrow_u16(e.input_dim(), "encoder input")?.to_le_bytes());
            out.extend_from_slice(&narrow_u16(e.output_dim(), "encoder output")?.to_le_bytes());
            out.extend_from_slice(&(TOKEN_WIDTH as u16).to_le_bytes());
            e.visit("", &mut |_, s| put_f32s(&mut out, s));
        }
    }
    Ok(out)
}

pub fn model_digest(model: &Model<f32>) -> Result<ModelDigest> {
    Ok(Sha256::digest(model_bytes(model)?).into())
}

pub fn digest_hex(digest: &ModelDigest) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Checkpoint { model, training: None }
    }

    pub fn digest(&self) -> Result<ModelDigest> {
        model_digest(&self.model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = model_bytes(&self.model)?;
        match &self.training {
            None => out.push(0),
            Some(t) => {
                let expected = self.model.parameter_count();
                let stored: usize = t.adam.first_moment.iter().map(|m| m.len()).sum();
                if stored != expected {
                    return Err(Error::Format(format!(
                        "optimizer state covers {stored} parameters, model has {expected}"
                    )));
                }
                out.push(1);
                out.extend_from_slice(&t.iteration.to_le_bytes());
                out.extend_from_slice(&t.seed.to_le_bytes());
                out.extend_from_slice(&t.adam.step.to_le_bytes());
                let c = t.adam.config;
                for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for m in t.adam.first_moment.iter().chain(&t.adam.second_moment) {
                    put_f32s(&mut out, m);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cond_width = r.u16("conditioning width")? as usize;
        let code_width = r.u16("code width")? as usize;
        let expr_dim = r.u16("expression dimension")? as usize;
        let embed_width = r.u16("embedding width")? as usize;
        let flags = r.u16("flags")?;
        if flags & !(FLAG_FINE_TUNED | FLAG_CONSTRAINT_CODE) != 0 {
            return Err(Error::Format(format!("unknown checkpoint flags {flags:#06x}")));
        }
        let pos_orders = r.u8("position orders")? as usize;
        let dir_orders = r.u8("direction orders")? as usize;
        let density_shift = r.f64("density shift")?;
        let density_scale = r.f64("density scale")?;
        let focal = r.f64("focal")?;
        let bound_radius = r.f64("bound radius")?;
        let background = [r.f64("background")?, r.f64("background")?, r.f64("background")?];
        let mode = if flags & FLAG_FINE_TUNED != 0 {
            EmbeddingMode::FineTuned
        } else {
            EmbeddingMode::Raw
        };
        if code_width != CODE_WIDTH {
            return Err(Error::Format(format!("constraint code width {code_width}, expected {CODE_WIDTH}")));
        }
        let net_count = r.u16("network count")? as usize;
        if net_count != NETS.len() {
            return Err(Error::Format(format!("{net_count} networks stored, expected {}", NETS.len())));
        }
        let mut tables = Vec::with_capacity(net_count);
        for _ in 0..net_count {
            let layers = r.u16("layer count")? as usize;
            let mut table = Vec::with_capacity(layers);
            for _ in 0..layers {
                let out = r.u16("layer shape")? as usize;
                let inp = r.u16("layer shape")? as usize;
                let code = r.u8("activation")?;
                let act = Activation::from_code(code)
                    .ok_or_else(|| Error::Format(format!("unknown activation code {code}")))?;
                table.push((out, inp, act));
            }
            tables.push(table);
        }
        let hidden = |t: &[(usize, usize, Activation)]| -> Result<(usize, usize)> {
            if t.len() < 2 {
                return Err(Error::Format("field network with fewer than two layers".into()));
            }
            Ok((t.len() - 1, t[0].0))
        };
        let (head_layers, head_width) = hidden(&tables[0])?;
        let (torso_layers, torso_width) = hidden(&tables[2])?;
        let spec = ModelSpec {
            expr_dim,
            mode,
            embed_width,
            code_enabled: flags & FLAG_CONSTRAINT_CODE != 0,
            pos_orders,
            dir_orders,
            head_layers,
            head_width,
            torso_layers,
            torso_width,
            density_shift,
            density_scale,
            focal,
            bound_radius,
            background,
        };
        spec.validate().map_err(|e| Error::Format(format!("checkpoint model spec: {e}")))?;
        if spec.conditioning_width() != cond_width {
            return Err(Error::Format(format!(
                "conditioning width {cond_width} disagrees with the stored mode"
            )));
        }
        let mut model = Model::<f32>::init(spec, 0)?;
        for ((part, stage), table) in NETS.iter().zip(&tables) {
            let net = model.field_mut(*part).net_mut(*stage);
            let expected: Vec<(usize, usize, Activation)> = net
                .layers
                .iter()
                .map(|l| (l.out_width(), l.in_width(), l.activation))
                .collect();
            if *table != expected {
                return Err(Error::Format(format!(
                    "{part:?} {stage:?} layer table {table:?} does not match the architecture {expected:?}"
                )));
            }
            let mut failed = None;
            let mut slices = Vec::new();
            net.visit("", &mut |name, s| slices.push((name.to_string(), s.len())));
            let mut values = Vec::new();
            for (name, len) in &slices {
                match r.f32s(*len, name) {
                    Ok(v) => values.extend(v),
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            if let Some(e) = failed {
                return Err(e);
            }
            net.load_flat(&values);
        }
        model.code = r.f32s(CODE_WIDTH, "constraint code")?;
        let has_encoder = r.u8("encoder section")?;
        match (has_encoder, mode) {
            (0, EmbeddingMode::Raw) => {}
            (1, EmbeddingMode::FineTuned) => {
                let inp = r.u16("encoder input")? as usize;
                let outw = r.u16("encoder output")? as usize;
                let tok = r.u16("token width")? as usize;
                if inp != expr_dim || outw != embed_width || tok != TOKEN_WIDTH {
                    return Err(Error::Format(format!(
                        "encoder section shaped {inp}->{outw} (tokens {tok}), expected {expr_dim}->{embed_width} (tokens {TOKEN_WIDTH})"
                    )));
                }
                let enc = model.encoder.as_mut().expect("fine-tuned model has an encoder");
                let n = enc.parameter_count();
                let values = r.f32s(n, "encoder parameters")?;
                enc.load_flat(&values);
            }
            (flag, _) => {
                return Err(Error::Format(format!(
                    "encoder section marker {flag} inconsistent with embedding mode {}",
                    mode.name()
                )))
            }
        }
        let training = match r.u8("training section")? {
            0 => None,
            1 => {
                let iteration = r.u64("iteration")?;
                let seed = r.u64("seed")?;
                let step = r.u64("optimizer step")?;
                let config = AdamConfig {
                    learning_rate: r.f64("learning rate")?,
                    beta1: r.f64("beta1")?,
                    beta2: r.f64("beta2")?,
                    epsilon: r.f64("epsilon")?,
                };
                let mut adam = AdamState::new(&model, config);
                adam.step = step;
                for m in adam.first_moment.iter_mut().chain(adam.second_moment.iter_mut()) {
                    let n = m.len();
                    *m = r.f32s(n, "optimizer moments")?;
                }
                Some(TrainingState { iteration, seed, adam })
            }
            other => return Err(Error::Format(format!("bad training section marker {other}"))),
        };
        r.finish()?;
        if model.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint { model, training })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: EmbeddingMode) -> ModelSpec {
        ModelSpec {
            mode,
            head_layers: 2,
            head_width: 16,
            torso_layers: 1,
            torso_width: 8,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        for mode in [EmbeddingMode::Raw, EmbeddingMode::FineTuned] {
            let mut model = Model::<f32>::init(spec(mode), 9).unwrap();
            model.code = (0..8).map(|i| i as f32 * 0.25).collect();
            let mut adam = AdamState::new(&model, AdamConfig::default());
            adam.step = 17;
            adam.first_moment[0][0] = 0.5;
            let ck = Checkpoint {
                model,
                training: Some(TrainingState {
                    iteration: 17,
                    seed: 4,
                    adam,
                }),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn digest_ignores_training_state() {
        let model = Model::<f32>::init(spec(EmbeddingMode::Raw), 1).unwrap();
        let a = Checkpoint::new(model.clone());
        let b = Checkpoint {
            training: Some(TrainingState {
                iteration: 3,
                seed: 0,
                adam: AdamState::new(&model, AdamConfig::default()),
            }),
            model,
        };
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = a.clone();
        c.model.code[0] = 1.0;
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn code_flag_is_stored() {
        let mut s = spec(EmbeddingMode::Raw);
        s.code_enabled = false;
        let model = Model::<f32>::init(s, 1).unwrap();
        let bytes = Checkpoint::new(model).to_bytes().unwrap();
        let flags = u16::from_le_bytes([bytes[14], bytes[15]]);
        assert_eq!(flags & FLAG_CONSTRAINT_CODE, 0);
        assert!(!Checkpoint::from_bytes(&bytes).unwrap().model.spec.code_enabled);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = Model::<f32>::init(spec(EmbeddingMode::Raw), 1).unwrap();
        let bytes = Checkpoint::new(model).to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Decode { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        // head's first layer width changed in the shape table
        let mut bad = bytes.clone();
        let table = 4 + 2 * 6 + 2 + 4 * 8 + 3 * 8 + 2 + 2;
        bad[table + 2] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
