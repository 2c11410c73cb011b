//! Resolution of key=value configuration: file, then `--set` overrides, then
//! dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nerfcast::config::{KeyValues, Settings};
use nerfcast::field::ModelSpec;
use nerfcast::scene::SceneConfig;
use nerfcast::session::RenderConfig;
use nerfcast::trainer::TrainConfig;

const SECTIONS: [&str; 4] = ["scene", "model", "train", "render"];

#[derive(Debug, Clone, Default)]
pub struct Resolved {
    pub scene: SceneConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub render: RenderConfig,
    /// Model keys given explicitly, so dataset-derived defaults do not clobber them.
    pub model_keys: Vec<String>,
}

impl Resolved {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match file {
            Some(p) => KeyValues::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => KeyValues::default(),
        };
        for o in overrides {
            kv.set_override(o)?;
        }
        for (k, _) in kv.iter() {
            let section = k.split('.').next().unwrap_or_default();
            if !k.contains('.') || !SECTIONS.contains(&section) {
                bail!("configuration key `{k}` must start with one of {}", SECTIONS.map(|s| format!("{s}.")).join(", "));
            }
        }
        let mut r = Resolved::default();
        kv.apply_section("scene", &mut r.scene)?;
        r.model_keys = kv.apply_section("model", &mut r.model)?;
        kv.apply_section("train", &mut r.train)?;
        kv.apply_section("render", &mut r.render)?;
        Ok(r)
    }

    pub fn model_key_given(&self, key: &str) -> bool {
        self.model_keys.iter().any(|k| k == &format!("model.{key}"))
    }

    pub fn set_model(&mut self, key: &str, value: &str) -> Result<()> {
        self.model.set(key, value)?;
        self.model_keys.push(format!("model.{key}"));
        Ok(())
    }

    /// The named resolved sections, for manifests.
    pub fn write_sections(&self, sections: &[&str], kv: &mut KeyValues) {
        for s in sections {
            match *s {
                "scene" => self.scene.write_section(s, kv),
                "model" => self.model.write_section(s, kv),
                "train" => self.train.write_section(s, kv),
                "render" => self.render.write_section(s, kv),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_sections_fail() {
        let r = Resolved::load(None, &["train.iterations=7".into(), "model.mode=ft".into()]).unwrap();
        assert_eq!(r.train.iterations, 7);
        assert!(r.model_key_given("mode"));
        assert!(Resolved::load(None, &["bogus.key=1".into()]).is_err());
        assert!(Resolved::load(None, &["train.nope=1".into()]).is_err());
    }
}
