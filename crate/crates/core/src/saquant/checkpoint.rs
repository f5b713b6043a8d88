//! Quantized-model checkpoint: the base network checkpoint (weights and
//! adapter tensors), a JSON sidecar with per-layer `(s, z, b)`, and the
//! hardened rounding masks packed LSB-first into bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BitConfig, QuantModel, RoundingMode};
use crate::error::{Error, Result};
use crate::net::checkpoint;
use crate::net::Parameters;
use crate::quant::QuantSpec;

pub const QUANT_FORMAT: &str = "saq-quant-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerQuantRecord {
    pub name: String,
    pub weight: QuantSpec,
    pub act: Option<QuantSpec>,
    /// Byte offset of this layer's packed mask in the mask file.
    pub mask_offset: usize,
    pub mask_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSidecar {
    pub format: String,
    pub base_manifest: String,
    pub mask_file: String,
    pub bits: BitConfig,
    pub rounding: RoundingMode,
    pub weights_quantized: bool,
    pub acts_quantized: bool,
    pub layers: Vec<LayerQuantRecord>,
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Format(format!("{} mask bytes for {len} bits", bytes.len())));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

fn sidecar_and_masks(qm: &QuantModel, stem: &str) -> (QuantSidecar, Vec<u8>) {
    let mut masks = Vec::new();
    let mut layers = Vec::new();
    for l in 0..qm.depth() {
        layers.push(LayerQuantRecord {
            name: Parameters::layer_name(l),
            weight: qm.weight_specs[l],
            act: qm.act_specs[l],
            mask_offset: masks.len(),
            mask_len: qm.masks[l].len(),
        });
        masks.extend_from_slice(&pack_bits(&qm.masks[l]));
    }
    let sidecar = QuantSidecar {
        format: QUANT_FORMAT.into(),
        base_manifest: format!("{stem}.json"),
        mask_file: format!("{stem}.masks"),
        bits: qm.bits,
        rounding: qm.rounding,
        weights_quantized: qm.weights_quantized,
        acts_quantized: qm.acts_quantized,
        layers,
    };
    (sidecar, masks)
}

/// Writes `<stem>.bin`, `<stem>.json`, `<stem>.masks` and `<stem>.quant.json`.
/// Returns every written path, sidecar last.
pub fn save(qm: &QuantModel, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let (bin, manifest) = checkpoint::save(&qm.base, qm.adapter.as_ref(), dir, stem)?;
    let (sidecar, masks) = sidecar_and_masks(qm, stem);
    let mask_path = dir.join(&sidecar.mask_file);
    fs::write(&mask_path, &masks)?;
    let side_path = dir.join(format!("{stem}.quant.json"));
    fs::write(&side_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(vec![bin, manifest, mask_path, side_path])
}

/// SHA-256 over exactly what [`save`] would persist, as lowercase hex.
pub fn model_hash(qm: &QuantModel) -> Result<String> {
    let (bin, manifest) = checkpoint::encode(&qm.base, qm.adapter.as_ref(), "model.bin");
    let (sidecar, masks) = sidecar_and_masks(qm, "model");
    let mut h = Sha256::new();
    for part in [
        bin,
        serde_json::to_vec(&manifest)?,
        masks,
        serde_json::to_vec(&sidecar)?,
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(&part);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Loads a model saved by [`save`]. Soft-rounding variables are reset to the
/// fractional parts of the weights; the masks carry the rounding decisions.
pub fn load(sidecar_path: &Path) -> Result<QuantModel> {
    let sidecar: QuantSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)?;
    if sidecar.format != QUANT_FORMAT {
        return Err(Error::Format(format!("unknown quant format {}", sidecar.format)));
    }
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let (base, adapter) = checkpoint::load(&dir.join(&sidecar.base_manifest))?;
    let masks_bytes = fs::read(dir.join(&sidecar.mask_file))?;
    if sidecar.layers.len() != base.depth() {
        return Err(Error::Format("sidecar layer count differs from the network".into()));
    }
    let mut qm = QuantModel::new(base, sidecar.bits)?;
    for (l, rec) in sidecar.layers.iter().enumerate() {
        rec.weight.validate()?;
        if let Some(a) = rec.act {
            a.validate()?;
        }
        let end = rec.mask_offset + rec.mask_len.div_ceil(8);
        let bytes = masks_bytes
            .get(rec.mask_offset..end)
            .ok_or_else(|| Error::Format(format!("mask of {} out of range", rec.name)))?;
        if rec.mask_len != qm.base.layers[l].weight.len() {
            return Err(Error::Format(format!("mask of {} has the wrong length", rec.name)));
        }
        qm.weight_specs[l] = rec.weight;
        qm.reset_rounding(l);
        qm.masks[l] = unpack_bits(bytes, rec.mask_len)?;
        qm.act_specs[l] = rec.act;
    }
    qm.rounding = sidecar.rounding;
    qm.adapter = adapter;
    qm.weights_quantized = sidecar.weights_quantized;
    qm.acts_quantized = sidecar.acts_quantized;
    Ok(qm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LoRAAdapter, NetConfig};
    use crate::rng::rng_from_seed;
    use crate::tensor::Tensor;

    #[test]
    fn bit_packing_round_trip() {
        let bits: Vec<bool> = (0..19).map(|i| i % 3 == 0).collect();
        let packed = pack_bits(&bits);
        assert_eq!(packed.len(), 3);
        assert_eq!(packed[0], 0b0100_1001);
        assert_eq!(unpack_bits(&packed, 19).unwrap(), bits);
        assert!(unpack_bits(&packed, 30).is_err());
    }

    #[test]
    fn save_load_preserves_forward_bitwise() {
        let p = Parameters::init(&NetConfig::default(), 1.0, &mut rng_from_seed(8)).unwrap();
        let mut qm = QuantModel::new(p.clone(), BitConfig { weight_bits: 4, act_bits: 6 }).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.2, -0.1, 1.0, 1.5, -2.0, 0.3]);
        qm.calibrate_activations(&[(&x, &[0.5])]).unwrap();
        qm.masks[1][3] = !qm.masks[1][3];
        let mut ad = LoRAAdapter::new(&p, 4, &mut rng_from_seed(1));
        for l in ad.layers.iter_mut().flatten() {
            l.b = l.b.map(|_| 0.01);
        }
        qm.adapter = Some(ad);
        let dir = tempfile::tempdir().unwrap();
        let paths = save(&qm, dir.path(), "q").unwrap();
        let back = load(paths.last().unwrap()).unwrap();
        assert_eq!(back.masks, qm.masks);
        assert_eq!(back.weight_specs, qm.weight_specs);
        let a = back.forward_times(&x, &[0.3]).unwrap();
        let b = qm.forward_times(&x, &[0.3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(model_hash(&back).unwrap(), model_hash(&qm).unwrap());
        qm.masks[0][0] = !qm.masks[0][0];
        assert_ne!(model_hash(&back).unwrap(), model_hash(&qm).unwrap());
    }
}
