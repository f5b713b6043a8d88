//! Network checkpoints: a `.bin` archive of SAQT containers plus a JSON
//! manifest holding the `NetConfig` and the array index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LoRAAdapter, Linear, LoraLayer, NetConfig, Parameters};
use crate::archive::{self, ArchiveEntry};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "saq-net-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: NetConfig,
    pub t_end: f64,
    pub data_file: String,
    pub arrays: Vec<ArchiveEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub requested_rank: usize,
    pub scale_constant: f64,
    pub ranks: Vec<usize>,
}

/// Serialises parameters (and an optional adapter) to `(bin, manifest)`.
pub fn encode(params: &Parameters, adapter: Option<&LoRAAdapter>, data_file: &str) -> (Vec<u8>, CheckpointManifest) {
    let mut arrays = Vec::new();
    for (i, l) in params.layers.iter().enumerate() {
        let name = Parameters::layer_name(i);
        arrays.push((format!("{name}.weight"), &l.weight));
        arrays.push((format!("{name}.bias"), &l.bias));
    }
    if let Some(ad) = adapter {
        for (i, l) in ad.layers.iter().enumerate() {
            if let Some(l) = l {
                let name = Parameters::layer_name(i);
                arrays.push((format!("{name}.lora_a"), &l.a));
                arrays.push((format!("{name}.lora_b"), &l.b));
            }
        }
    }
    let (bytes, index) = archive::pack(arrays);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config.clone(),
        t_end: params.t_end,
        data_file: data_file.into(),
        arrays: index,
        adapter: adapter.map(|ad| AdapterMeta {
            requested_rank: ad.requested_rank,
            scale_constant: ad.scale_constant,
            ranks: ad
                .layers
                .iter()
                .map(|l| l.as_ref().map_or(0, |l| l.rank))
                .collect(),
        }),
    };
    (bytes, manifest)
}

pub fn decode(bytes: &[u8], manifest: &CheckpointManifest) -> Result<(Parameters, Option<LoRAAdapter>)> {
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format `{}`", manifest.format)));
    }
    manifest.config.validate()?;
    let dims = manifest.config.layer_dims();
    let mut layers = Vec::with_capacity(dims.len());
    for (i, &(fi, fo)) in dims.iter().enumerate() {
        let name = Parameters::layer_name(i);
        let weight = archive::read_entry(bytes, archive::find(&manifest.arrays, &format!("{name}.weight"))?)?;
        let bias = archive::read_entry(bytes, archive::find(&manifest.arrays, &format!("{name}.bias"))?)?;
        if weight.shape() != [fo, fi] || bias.shape() != [fo] {
            return Err(Error::Format(format!("{name} does not match the config")));
        }
        layers.push(Linear { weight, bias });
    }
    let params = Parameters {
        config: manifest.config.clone(),
        t_end: manifest.t_end,
        layers,
    };
    params.check_finite()?;
    let adapter = match &manifest.adapter {
        None => None,
        Some(meta) => {
            if meta.ranks.len() != dims.len() {
                return Err(Error::Format("adapter rank list length mismatch".into()));
            }
            let mut ls = Vec::with_capacity(dims.len());
            for (i, &r) in meta.ranks.iter().enumerate() {
                if r == 0 {
                    ls.push(None);
                    continue;
                }
                let name = Parameters::layer_name(i);
                let a = archive::read_entry(bytes, archive::find(&manifest.arrays, &format!("{name}.lora_a"))?)?;
                let b = archive::read_entry(bytes, archive::find(&manifest.arrays, &format!("{name}.lora_b"))?)?;
                ls.push(Some(LoraLayer { rank: r, a, b }));
            }
            Some(LoRAAdapter {
                requested_rank: meta.requested_rank,
                scale_constant: meta.scale_constant,
                layers: ls,
            })
        }
    };
    Ok((params, adapter))
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns both paths.
pub fn save(params: &Parameters, adapter: Option<&LoRAAdapter>, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let bin_name = format!("{stem}.bin");
    let (bytes, manifest) = encode(params, adapter, &bin_name);
    let bin = dir.join(&bin_name);
    let json = dir.join(format!("{stem}.json"));
    fs::write(&bin, bytes)?;
    fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
    Ok((bin, json))
}

pub fn load(manifest_path: &Path) -> Result<(Parameters, Option<LoRAAdapter>)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&manifest.data_file))?;
    decode(&bytes, &manifest)
}
