//! Run manifests: the resolved configuration, seed and format versions of a
//! command, plus content hashes of every input and output file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nerfcast::config::KeyValues;
use sha2::{Digest, Sha256};

pub struct Manifest {
    kv: KeyValues,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, args: &[String], threads: usize) -> Self {
        let mut kv = KeyValues::default();
        kv.set("run.command", command);
        kv.set("run.args", args.join(" "));
        kv.set("run.threads", threads.to_string());
        kv.set("run.version", env!("CARGO_PKG_VERSION"));
        kv.set("format.nvds", nerfcast::scene::DATASET_VERSION.to_string());
        kv.set("format.nvck", nerfcast::field::checkpoint::CHECKPOINT_VERSION.to_string());
        kv.set("format.nvrt", nerfcast::protocol::PROTOCOL_VERSION.to_string());
        Manifest {
            kv,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.kv.set(key, value.to_string());
    }

    pub fn kv_mut(&mut self) -> &mut KeyValues {
        &mut self.kv
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.push((name.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.push((name.to_string(), path.to_path_buf()));
    }

    /// Writes `<dir>/<command>.manifest` and returns its path.
    pub fn write(mut self, dir: &Path, command: &str) -> Result<PathBuf> {
        for (group, files) in [("input", &self.inputs), ("output", &self.outputs)] {
            for (name, path) in files {
                self.kv.set(&format!("{group}.{name}"), path.display().to_string());
                if path.is_file() {
                    self.kv.set(&format!("{group}.{name}.sha256"), file_sha256(path)?);
                }
            }
        }
        let path = dir.join(format!("{command}.manifest"));
        fs::write(&path, self.kv.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
