//! Model checkpoints: one safetensors file holding the three parameter sets,
//! a JSON manifest in the header metadata, and optional trainer state.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{SafeTensors, TensorView};
use safetensors::Dtype;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_net::PLANE_ORDER;
use crate::pipeline::{build_model, DehazeModel, ModelConfig, ParamGroup};
use crate::tensor::{Real, Tensor};

pub const FORMAT: &str = "dehaze-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub plane_order: String,
    pub dtype: String,
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

pub(crate) fn values_from_view<T: Real>(name: &str, view: &TensorView<'_>) -> Result<Vec<T>> {
    let bytes = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect()),
        Dtype::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect()),
        other => Err(Error::Format(format!("tensor {name} has unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    match T::DTYPE {
        Dtype::F32 => t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect(),
        _ => t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect(),
    }
}

fn dtype_name<T: Real>() -> &'static str {
    match T::DTYPE {
        Dtype::F32 => "f32",
        _ => "f64",
    }
}

/// Writes named tensors and string metadata, replacing `path` atomically.
pub fn write_tensors<T: Real>(path: &Path, tensors: &[(String, &Tensor<T>)], metadata: HashMap<String, String>) -> Result<()> {
    let bytes: Vec<Vec<u8>> = tensors.iter().map(|(_, t)| tensor_bytes(t)).collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, t), b)| Ok((name.clone(), TensorView::new(T::DTYPE, t.shape().to_vec(), b)?)))
        .collect::<Result<Vec<_>>>()?;
    let buffer = canonical_header(safetensors::serialize(views, &Some(metadata))?)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, buffer).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Rewrites the JSON header with sorted keys so equal inputs give equal bytes.
fn canonical_header(buffer: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(buffer[..8].try_into().expect("8-byte prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&buffer[8..8 + n])?;
    let mut text = serde_json::to_vec(&header)?;
    while (8 + text.len()) % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + buffer.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&buffer[8 + n..]);
    Ok(out)
}

/// Tensors of a safetensors file as `(name, shape, values)` plus its metadata.
pub type TensorEntries<T> = Vec<(String, Vec<usize>, Vec<T>)>;

pub fn read_tensors<T: Real>(path: &Path) -> Result<(HashMap<String, String>, TensorEntries<T>)> {
    let bytes = read_file(path)?;
    let wrap = |e: safetensors::SafeTensorError| Error::Format(format!("{}: {e}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(wrap)?;
    let st = SafeTensors::deserialize(&bytes).map_err(wrap)?;
    let mut entries = Vec::new();
    for (name, view) in st.tensors() {
        let values = values_from_view(&name, &view)?;
        entries.push((name, view.shape().to_vec(), values));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((meta.metadata().clone().unwrap_or_default(), entries))
}

/// A loaded checkpoint. `train_state` and `extra` are whatever the trainer
/// stored next to the model.
pub struct Loaded<T> {
    pub model: DehazeModel<T>,
    pub train_state: Option<String>,
    pub extra: HashMap<String, Tensor<T>>,
}

pub fn save<T: Real>(path: &Path, model: &DehazeModel<T>, train_state: Option<&str>, extra: &[(String, &Tensor<T>)]) -> Result<()> {
    let manifest = Manifest {
        model: model.config(),
        plane_order: PLANE_ORDER.to_string(),
        dtype: dtype_name::<T>().to_string(),
    };
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("manifest".to_string(), serde_json::to_string(&manifest)?);
    if let Some(s) = train_state {
        meta.insert("train_state".to_string(), s.to_string());
    }
    let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
    for group in ParamGroup::ALL {
        for (name, t) in model.params(group).iter() {
            tensors.push((format!("{}.{name}", group.name()), &**t));
        }
    }
    tensors.extend(extra.iter().map(|(n, t)| (n.clone(), *t)));
    write_tensors(path, &tensors, meta)
}

/// Reads the manifest without loading tensors.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest_from(path, meta.metadata().as_ref())
}

fn manifest_from(path: &Path, meta: Option<&HashMap<String, String>>) -> Result<Manifest> {
    let meta = meta.ok_or_else(|| Error::Format(format!("{}: no checkpoint metadata", path.display())))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Format(format!("{} is not a {FORMAT} file", path.display())));
    }
    let version = meta.get("format_version").map(String::as_str).unwrap_or("?");
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Version(format!(
            "{}: format version {version}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(meta.get("manifest").map(String::as_str).unwrap_or(""))
        .map_err(|e| Error::Version(format!("{}: unreadable manifest: {e}", path.display())))?;
    if manifest.plane_order != PLANE_ORDER {
        return Err(Error::Version(format!(
            "{}: plane order {:?} differs from {PLANE_ORDER:?}",
            path.display(),
            manifest.plane_order
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint. With `expected` set, a differing model config is a
/// version error.
pub fn load<T: Real>(path: &Path, expected: Option<&ModelConfig>) -> Result<Loaded<T>> {
    let (meta, entries) = read_tensors::<T>(path)?;
    let manifest = manifest_from(path, Some(&meta))?;
    if let Some(exp) = expected {
        if *exp != manifest.model {
            return Err(Error::Version(format!(
                "{}: checkpoint model config differs from the requested one",
                path.display()
            )));
        }
    }
    let mut model = build_model::<T>(&manifest.model, 0).map_err(|e| Error::Version(format!("{}: {e}", path.display())))?;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<T>)> = entries.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
    for group in ParamGroup::ALL {
        let params = model.params_mut(group);
        for i in 0..params.len() {
            let key = format!("{}.{}", group.name(), params.name(i));
            let (shape, values) = tensors
                .remove(&key)
                .ok_or_else(|| Error::Version(format!("{}: missing tensor {key}", path.display())))?;
            let want = params.get(i).shape();
            if shape[..] != want[..] {
                return Err(Error::Version(format!(
                    "{}: tensor {key} has shape {shape:?}, expected {want:?}",
                    path.display()
                )));
            }
            params.set(i, Tensor::from_vec(want, values)?)?;
        }
    }
    let mut extra = HashMap::new();
    for (name, (shape, values)) in tensors {
        if ParamGroup::ALL.iter().any(|g| name.starts_with(&format!("{}.", g.name()))) {
            return Err(Error::Version(format!("{}: unexpected model tensor {name}", path.display())));
        }
        let mut s = [1usize; 4];
        if shape.len() > 4 {
            return Err(Error::Format(format!("{}: tensor {name} has rank {}", path.display(), shape.len())));
        }
        s[4 - shape.len()..].copy_from_slice(&shape);
        extra.insert(name, Tensor::from_vec(s, values)?);
    }
    Ok(Loaded {
        model,
        train_state: meta.get("train_state").cloned(),
        extra,
    })
}
