//! Checkpoint directories: one safetensors file holding painter and critic
//! weights under the `painter.` and `critic.` prefixes, plus a plain-text
//! `manifest.txt` describing the architecture.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::critic::{Critic, CriticConfig};
use crate::error::{Error, Result};
use crate::model::{Painter, PainterConfig};
use crate::nn::{load_into, named_tensors};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Architecture and provenance recorded next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub painter: PainterConfig,
    pub critic: Option<CriticConfig>,
    pub step: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let p = &self.painter;
        let mut lines = vec![
            format!("patch_size = {}", p.patch_size),
            format!("max_strokes = {}", p.max_strokes),
            format!("width = {}", p.width),
            format!("enc_layers = {}", p.enc_layers),
            format!("dec_layers = {}", p.dec_layers),
            format!("heads = {}", p.heads),
            format!("ffn_mult = {}", p.ffn_mult),
            format!("use_differential = {}", p.use_differential),
            format!("use_coord = {}", p.use_coord),
        ];
        if let Some(c) = &self.critic {
            lines.push(format!("critic_base_width = {}", c.base_width));
            lines.push(format!("critic_blocks = {}", c.blocks));
            lines.push(format!("critic_use_coord = {}", c.use_coord));
        }
        lines.push(format!("step = {}", self.step));
        lines.push(format!("seed = {}", self.seed));
        lines.join("\n") + "\n"
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| -> Result<&String> {
            kv.get(key).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("manifest lacks {key}"),
            })
        };
        fn num<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("bad value {v:?} for {key}"),
            })
        }
        let painter = PainterConfig {
            patch_size: num(path, "patch_size", get("patch_size")?)?,
            max_strokes: num(path, "max_strokes", get("max_strokes")?)?,
            width: num(path, "width", get("width")?)?,
            enc_layers: num(path, "enc_layers", get("enc_layers")?)?,
            dec_layers: num(path, "dec_layers", get("dec_layers")?)?,
            heads: num(path, "heads", get("heads")?)?,
            ffn_mult: num(path, "ffn_mult", get("ffn_mult")?)?,
            use_differential: num(path, "use_differential", get("use_differential")?)?,
            use_coord: num(path, "use_coord", get("use_coord")?)?,
        };
        let critic = match kv.get("critic_base_width") {
            Some(w) => Some(CriticConfig {
                patch_size: painter.patch_size,
                base_width: num(path, "critic_base_width", w)?,
                blocks: num(path, "critic_blocks", get("critic_blocks")?)?,
                use_coord: num(path, "critic_use_coord", get("critic_use_coord")?)?,
            }),
            None => None,
        };
        Ok(Self {
            painter,
            critic,
            step: num(path, "step", get("step")?)?,
            seed: num(path, "seed", get("seed")?)?,
        })
    }
}

/// Writes `dir/weights.safetensors` and `dir/manifest.txt`.
pub fn save(dir: &Path, manifest: &Manifest, painter: &Painter, critic: Option<&Critic>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for (name, t) in named_tensors(painter.varmap()) {
        tensors.insert(format!("painter.{name}"), t);
    }
    if let Some(critic) = critic {
        for (name, t) in named_tensors(critic.varmap()) {
            tensors.insert(format!("critic.{name}"), t);
        }
    }
    let weights = dir.join(WEIGHTS_FILE);
    candle_core::safetensors::save(&tensors, &weights)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(dir.to_path_buf())
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub manifest: Manifest,
    pub painter: Painter,
    pub critic: Option<Critic>,
    /// Hex SHA-256 over manifest and weight bytes.
    pub hash: String,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        msg: format!("cannot read manifest: {e}"),
    })?;
    Manifest::parse(&text, &path)
}

/// Loads a checkpoint directory. When `expected` is given the manifest must
/// describe the same painter architecture.
pub fn load(dir: &Path, expected: Option<&PainterConfig>, device: &Device) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    if let Some(exp) = expected {
        if *exp != manifest.painter {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                msg: format!("manifest describes {:?}, runtime expects {:?}", manifest.painter, exp),
            });
        }
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| Error::Checkpoint {
        path: weights_path.clone(),
        msg: format!("cannot read weights: {e}"),
    })?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device).map_err(|e| Error::Checkpoint {
        path: weights_path.clone(),
        msg: e.to_string(),
    })?;
    let painter = Painter::new(manifest.painter, 0, device, DType::F32)?;
    load_into(painter.varmap(), &tensors, "painter.").map_err(|e| Error::Checkpoint {
        path: weights_path.clone(),
        msg: e.to_string(),
    })?;
    let critic = match manifest.critic {
        Some(cfg) if tensors.keys().any(|k| k.starts_with("critic.")) => {
            let critic = Critic::new(cfg, 0, device, DType::F32)?;
            load_into(critic.varmap(), &tensors, "critic.")?;
            Some(critic)
        }
        _ => None,
    };
    let mut hasher = Sha256::new();
    hasher.update(manifest.to_text().as_bytes());
    hasher.update(&bytes);
    Ok(Checkpoint {
        manifest,
        painter,
        critic,
        hash: hex::encode(hasher.finalize()),
    })
}
