//! Model container format: magic + version + JSON manifest + raw little-endian
//! f32 arrays. The same layout serves as the import path for externally
//! exported weights.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use plq_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::net::{layer_specs, ConvLayer, QuantAttachment, SrConfig, SrModel};

const MAGIC: &[u8; 4] = b"PLQM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    arch: SrConfig,
    params: Vec<ParamEntry>,
    #[serde(default)]
    quant: BTreeMap<String, QuantAttachment>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 4],
    /// Byte offset into the blob that follows the manifest.
    offset: u64,
    /// Length in bytes (4 × element count).
    len: u64,
}

fn fmt_err(detail: impl Into<String>) -> CoreError {
    CoreError::ModelFormat { detail: detail.into() }
}

pub fn save_model<P: AsRef<Path>>(model: &SrModel, path: P) -> Result<()> {
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, t: &Tensor, params: &mut Vec<ParamEntry>, blob: &mut Vec<u8>| {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ParamEntry {
            name,
            shape: t.shape(),
            offset,
            len: (t.numel() * 4) as u64,
        });
    };
    for layer in model.layers() {
        push(format!("{}.weight", layer.name), &layer.weight, &mut params, &mut blob);
        push(format!("{}.bias", layer.name), &layer.bias, &mut params, &mut blob);
    }
    let manifest = Manifest {
        format: "plq-model".into(),
        version: MODEL_VERSION,
        arch: model.config,
        params,
        quant: model.attachments().clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut file = std::fs::File::create(path.as_ref())?;
    file.write_all(MAGIC)?;
    file.write_all(&MODEL_VERSION.to_le_bytes())?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&blob)?;
    Ok(())
}

pub fn load_model<P: AsRef<Path>>(path: P) -> Result<SrModel> {
    let mut file = std::fs::File::open(path.as_ref())?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|_| fmt_err("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(fmt_err(format!("bad magic {magic:?}, not a model file")));
    }
    let mut v = [0u8; 4];
    file.read_exact(&mut v).map_err(|_| fmt_err("file too short for version"))?;
    let version = u32::from_le_bytes(v);
    if version != MODEL_VERSION {
        return Err(fmt_err(format!("unsupported version {version}, expected {MODEL_VERSION}")));
    }
    let mut l = [0u8; 8];
    file.read_exact(&mut l).map_err(|_| fmt_err("file too short for manifest length"))?;
    let manifest_len = u64::from_le_bytes(l) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes).map_err(|_| fmt_err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| fmt_err(format!("manifest json: {e}")))?;
    if manifest.format != "plq-model" {
        return Err(fmt_err(format!("unexpected format tag {:?}", manifest.format)));
    }
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;

    let mut by_name: BTreeMap<&str, &ParamEntry> = BTreeMap::new();
    for p in &manifest.params {
        if by_name.insert(p.name.as_str(), p).is_some() {
            return Err(fmt_err(format!("duplicate parameter {:?}", p.name)));
        }
    }
    let read_tensor = |name: &str, want_shape: Option<[usize; 4]>| -> Result<Tensor> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| fmt_err(format!("missing parameter {name:?}")))?;
        if let Some(want) = want_shape {
            if entry.shape != want {
                return Err(fmt_err(format!(
                    "parameter {name:?} has shape {:?}, expected {want:?}",
                    entry.shape
                )));
            }
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > blob.len() || entry.len % 4 != 0 {
            return Err(fmt_err(format!("parameter {name:?} outside blob bounds")));
        }
        let count = entry.len as usize / 4;
        if count != entry.shape.iter().product::<usize>() {
            return Err(fmt_err(format!("parameter {name:?} length/shape mismatch")));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Tensor::new(entry.shape, data).map_err(|e| fmt_err(format!("parameter {name:?}: {e}")))
    };

    let mut layers = Vec::new();
    for spec in layer_specs(&manifest.arch) {
        let weight = read_tensor(&format!("{}.weight", spec.name), Some([spec.cout, spec.cin, 3, 3]))?;
        let bias = read_tensor(&format!("{}.bias", spec.name), Some([1, spec.cout, 1, 1]))?;
        layers.push(ConvLayer { name: spec.name, weight, bias, padding: 1 });
    }
    let expected = layers.len() * 2;
    if manifest.params.len() != expected {
        return Err(fmt_err(format!(
            "manifest lists {} parameters, architecture needs {expected}",
            manifest.params.len()
        )));
    }
    for (name, att) in &manifest.quant {
        if !layers.iter().any(|layer| &layer.name == name) {
            return Err(fmt_err(format!("quant attachment for unknown layer {name:?}")));
        }
        if let Some(p) = &att.weight_quantizer {
            p.validate()?;
        }
        if let Some(p) = &att.activation_quantizer {
            p.validate()?;
        }
    }
    Ok(SrModel::from_parts(manifest.arch, layers, manifest.quant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{calibrate, CalibConfig};
    use crate::data::CalibrationSet;
    use crate::net::{AttachPlan, FirstLastPolicy, ForwardMode};
    use crate::quant::QuantKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new([1, 3, 8, 8], data).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.plqm");
        let mut model = SrModel::new(
            SrConfig { scale: 2, channels: 8, n_blocks: 2, residual_scale: 0.5 },
            3,
        )
        .unwrap();
        model
            .attach_quantizers(AttachPlan {
                act_kind: QuantKind::PiecewiseAct,
                bits_w: 4,
                bits_a: 4,
                policy: FirstLastPolicy::EightBit,
            })
            .unwrap();
        let cal = CalibrationSet::new((0..4).map(|i| rand_input(i)).collect(), 2).unwrap();
        calibrate(&mut model, &cal, &CalibConfig::default()).unwrap();

        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();

        let x = rand_input(99);
        let (a, _) = model.forward(&x, ForwardMode::Quantized, None).unwrap();
        let (b, _) = loaded.forward(&x, ForwardMode::Quantized, None).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(model.attachments().len(), loaded.attachments().len());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.plqm");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load_model(&path), Err(CoreError::ModelFormat { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.plqm");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn model_saved_without_quant_needs_calibration_after_attach() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.plqm");
        let model = SrModel::new(
            SrConfig { scale: 2, channels: 8, n_blocks: 1, residual_scale: 1.0 },
            5,
        )
        .unwrap();
        save_model(&model, &path).unwrap();
        let mut loaded = load_model(&path).unwrap();
        assert!(loaded.attachments().is_empty());
        loaded
            .attach_quantizers(AttachPlan {
                act_kind: QuantKind::PiecewiseAct,
                bits_w: 4,
                bits_a: 4,
                policy: FirstLastPolicy::EightBit,
            })
            .unwrap();
        let err = loaded.forward(&rand_input(1), ForwardMode::Quantized, None).unwrap_err();
        assert!(matches!(err, CoreError::UninitializedQuant { .. }));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.plqm");
        let model = SrModel::new(
            SrConfig { scale: 2, channels: 4, n_blocks: 1, residual_scale: 1.0 },
            5,
        )
        .unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(load_model(&path), Err(CoreError::ModelFormat { .. })));
    }
}
