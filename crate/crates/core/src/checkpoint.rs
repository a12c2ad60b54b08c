//! On-disk format: a directory holding `manifest.json` plus one raw
//! little-endian, row-major tensor file per entry of the manifest's tensor
//! table. The same container stores dense checkpoints, compressed
//! checkpoints and calibration batch sets.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::model::{
    check_finite, CompressedDecoderWeights, CompressedModel, DecoderWeights, Model, ModelConfig,
    QkBases,
};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_NAME: &str = "flat-checkpoint";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    /// Lossy export format; widened back to f64 on load.
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Dense,
    Compressed,
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub retained_rank: usize,
    pub retained_mlp: usize,
    pub qk_compressed: bool,
    pub mlp_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    pub kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerMeta>>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Dense(Model),
    Compressed(CompressedModel),
}

/// Row-major tensor payload staged for writing.
struct Staged {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn stage_matrix(name: String, m: &DMatrix<f64>) -> Staged {
    // nalgebra storage is column-major; the file is row-major.
    let data = m.transpose().as_slice().to_vec();
    Staged {
        name,
        shape: vec![m.nrows(), m.ncols()],
        data,
    }
}

fn stage_vector(name: String, v: &DVector<f64>) -> Staged {
    Staged {
        name,
        shape: vec![v.len()],
        data: v.as_slice().to_vec(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FlatError + '_ {
    move |source| FlatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_container(
    dir: &Path,
    kind: CheckpointKind,
    config: Option<ModelConfig>,
    layers: Option<Vec<LayerMeta>>,
    staged: Vec<Staged>,
    dtype: Dtype,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tensors = Vec::with_capacity(staged.len());
    for t in staged {
        let file = format!("{}.bin", t.name);
        let path = dir.join(&file);
        let mut bytes = Vec::with_capacity(t.data.len() * dtype.size());
        match dtype {
            Dtype::F64 => t.data.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            Dtype::F32 => t
                .data
                .iter()
                .for_each(|&x| bytes.extend_from_slice(&(x as f32).to_le_bytes())),
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            dtype,
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        schema_version: SCHEMA_VERSION,
        kind,
        config,
        layers,
        tensors,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|source| FlatError::Json {
        path: path.clone(),
        source,
    })?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            FlatError::MissingFile {
                path: path.clone(),
                tensor: MANIFEST.to_string(),
            }
        } else {
            FlatError::Io {
                path: path.clone(),
                source,
            }
        }
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| FlatError::Json { path, source })?;
    if manifest.format != FORMAT_NAME {
        return Err(FlatError::format(
            "manifest",
            format!("unknown format {:?}", manifest.format),
        ));
    }
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(FlatError::format(
            "manifest",
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    Ok(manifest)
}

/// Tensor reader bound to one container directory.
struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Reader<'_> {
    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FlatError::format("manifest", format!("no tensor entry for {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.manifest.tensors.iter().any(|t| t.name == name)
    }

    fn raw(&self, name: &str, expected: &[usize]) -> Result<Vec<f64>> {
        let entry = self.entry(name)?;
        if entry.shape != expected {
            return Err(FlatError::ShapeMismatch {
                tensor: name.to_string(),
                expected: expected.to_vec(),
                found: entry.shape.clone(),
            });
        }
        let path: PathBuf = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                FlatError::MissingFile {
                    path: path.clone(),
                    tensor: name.to_string(),
                }
            } else {
                FlatError::Io {
                    path: path.clone(),
                    source,
                }
            }
        })?;
        let count: usize = expected.iter().product();
        let size = entry.dtype.size();
        if bytes.len() != count * size {
            return Err(FlatError::ShapeMismatch {
                tensor: name.to_string(),
                expected: expected.to_vec(),
                found: vec![bytes.len() / size, bytes.len() % size],
            });
        }
        let data: Vec<f64> = match entry.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect(),
        };
        check_finite(name, &data)?;
        Ok(data)
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let data = self.raw(name, &[rows, cols])?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn vector(&self, name: &str, len: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.raw(name, &[len])?))
    }

    /// Matrix whose shape is taken from the manifest.
    fn matrix_any(&self, name: &str) -> Result<DMatrix<f64>> {
        let shape = self.entry(name)?.shape.clone();
        if shape.len() != 2 {
            return Err(FlatError::ShapeMismatch {
                tensor: name.to_string(),
                expected: vec![0, 0],
                found: shape,
            });
        }
        self.matrix(name, shape[0], shape[1])
    }
}

fn tensor_name(layer: usize, t: &str) -> String {
    format!("layers.{layer}.{t}")
}

pub fn save_checkpoint(model: &Model, dir: &Path, dtype: Dtype) -> Result<()> {
    model.validate()?;
    let mut staged = Vec::new();
    for (l, w) in model.layers.iter().enumerate() {
        staged.push(stage_matrix(tensor_name(l, "w_q"), &w.w_q));
        staged.push(stage_matrix(tensor_name(l, "w_k"), &w.w_k));
        staged.push(stage_matrix(tensor_name(l, "w_v"), &w.w_v));
        staged.push(stage_matrix(tensor_name(l, "w_o"), &w.w_o));
        staged.push(stage_matrix(tensor_name(l, "w_up"), &w.w_up));
        staged.push(stage_matrix(tensor_name(l, "w_down"), &w.w_down));
        staged.push(stage_vector(tensor_name(l, "rms_attn"), &w.rms_attn));
        staged.push(stage_vector(tensor_name(l, "rms_mlp"), &w.rms_mlp));
    }
    write_container(
        dir,
        CheckpointKind::Dense,
        Some(model.config),
        None,
        staged,
        dtype,
    )
}

pub fn save_compressed(model: &CompressedModel, dir: &Path, dtype: Dtype) -> Result<()> {
    model.validate()?;
    let mut staged = Vec::new();
    let mut metas = Vec::new();
    for (l, w) in model.layers.iter().enumerate() {
        staged.push(stage_matrix(tensor_name(l, "w_q"), &w.w_q));
        staged.push(stage_matrix(tensor_name(l, "w_k"), &w.w_k));
        if let Some(b) = &w.qk_bases {
            staged.push(stage_matrix(tensor_name(l, "q_basis"), &b.q));
            staged.push(stage_matrix(tensor_name(l, "k_basis"), &b.k));
        }
        staged.push(stage_matrix(tensor_name(l, "w_v"), &w.w_v));
        staged.push(stage_matrix(tensor_name(l, "w_o"), &w.w_o));
        staged.push(stage_matrix(tensor_name(l, "w_up"), &w.w_up));
        staged.push(stage_matrix(tensor_name(l, "w_down"), &w.w_down));
        staged.push(stage_vector(tensor_name(l, "rms_attn"), &w.rms_attn));
        staged.push(stage_vector(tensor_name(l, "rms_mlp"), &w.rms_mlp));
        metas.push(LayerMeta {
            retained_rank: w.retained_rank,
            retained_mlp: w.retained_mlp,
            qk_compressed: w.qk_bases.is_some(),
            mlp_indices: w.mlp_indices.clone(),
        });
    }
    write_container(
        dir,
        CheckpointKind::Compressed,
        Some(model.config),
        Some(metas),
        staged,
        dtype,
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let config = manifest
        .config
        .ok_or_else(|| FlatError::format("manifest", "missing config"))?;
    config.validate()?;
    let rd = Reader {
        dir,
        manifest: &manifest,
    };
    let c = config;
    match manifest.kind {
        CheckpointKind::Dense => {
            let layers = (0..c.n_layers)
                .map(|l| -> Result<DecoderWeights> {
                    Ok(DecoderWeights {
                        w_q: rd.matrix(&tensor_name(l, "w_q"), c.n_q_heads * c.d_head, c.d_hid)?,
                        w_k: rd.matrix(&tensor_name(l, "w_k"), c.kv_dim(), c.d_hid)?,
                        w_v: rd.matrix(&tensor_name(l, "w_v"), c.kv_dim(), c.d_hid)?,
                        w_o: rd.matrix(&tensor_name(l, "w_o"), c.d_hid, c.n_q_heads * c.d_head)?,
                        w_up: rd.matrix(&tensor_name(l, "w_up"), c.d_int, c.d_hid)?,
                        w_down: rd.matrix(&tensor_name(l, "w_down"), c.d_hid, c.d_int)?,
                        rms_attn: rd.vector(&tensor_name(l, "rms_attn"), c.d_hid)?,
                        rms_mlp: rd.vector(&tensor_name(l, "rms_mlp"), c.d_hid)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Checkpoint::Dense(Model::new(config, layers)?))
        }
        CheckpointKind::Compressed => {
            let metas = manifest
                .layers
                .as_ref()
                .ok_or_else(|| FlatError::format("manifest", "compressed checkpoint without layers"))?;
            if metas.len() != c.n_layers {
                return Err(FlatError::format(
                    "manifest",
                    format!("{} layer entries for n_layers = {}", metas.len(), c.n_layers),
                ));
            }
            let layers = metas
                .iter()
                .enumerate()
                .map(|(l, m)| -> Result<CompressedDecoderWeights> {
                    let r = m.retained_rank;
                    let k = m.retained_mlp;
                    let qk = if m.qk_compressed { r } else { c.d_head };
                    let qk_bases = if m.qk_compressed {
                        Some(QkBases {
                            q: rd.matrix(&tensor_name(l, "q_basis"), c.n_q_heads * c.d_head, r)?,
                            k: rd.matrix(&tensor_name(l, "k_basis"), c.kv_dim(), r)?,
                        })
                    } else if rd.has(&tensor_name(l, "q_basis")) {
                        return Err(FlatError::format(
                            "manifest",
                            format!("layer {l} has qk bases but qk_compressed = false"),
                        ));
                    } else {
                        None
                    };
                    Ok(CompressedDecoderWeights {
                        w_q: rd.matrix(&tensor_name(l, "w_q"), c.n_q_heads * qk, c.d_hid)?,
                        w_k: rd.matrix(&tensor_name(l, "w_k"), c.n_kv_heads * qk, c.d_hid)?,
                        qk_bases,
                        w_v: rd.matrix(&tensor_name(l, "w_v"), c.n_kv_heads * r, c.d_hid)?,
                        w_o: rd.matrix(&tensor_name(l, "w_o"), c.d_hid, c.n_q_heads * r)?,
                        w_up: rd.matrix(&tensor_name(l, "w_up"), k, c.d_hid)?,
                        w_down: rd.matrix(&tensor_name(l, "w_down"), c.d_hid, k)?,
                        rms_attn: rd.vector(&tensor_name(l, "rms_attn"), c.d_hid)?,
                        rms_mlp: rd.vector(&tensor_name(l, "rms_mlp"), c.d_hid)?,
                        retained_rank: r,
                        retained_mlp: k,
                        mlp_indices: m.mlp_indices.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let model = CompressedModel { config, layers };
            model.validate()?;
            Ok(Checkpoint::Compressed(model))
        }
        CheckpointKind::Calibration => Err(FlatError::format(
            "manifest",
            "calibration container is not a model checkpoint",
        )),
    }
}

/// Loads a checkpoint that must be dense.
pub fn load_model(dir: &Path) -> Result<Model> {
    match load_checkpoint(dir)? {
        Checkpoint::Dense(m) => Ok(m),
        Checkpoint::Compressed(_) => Err(FlatError::format(
            "manifest",
            format!("{} holds a compressed checkpoint; a dense one is required", dir.display()),
        )),
    }
}

/// Writes calibration batches as tensors `batch.0`, `batch.1`, ...
pub fn save_batches(batches: &[DMatrix<f64>], dir: &Path, dtype: Dtype) -> Result<()> {
    let staged = batches
        .iter()
        .enumerate()
        .map(|(i, b)| stage_matrix(format!("batch.{i}"), b))
        .collect();
    write_container(dir, CheckpointKind::Calibration, None, None, staged, dtype)
}

pub fn load_batches(dir: &Path) -> Result<Vec<DMatrix<f64>>> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != CheckpointKind::Calibration {
        return Err(FlatError::format(
            "manifest",
            format!("{} is not a calibration container", dir.display()),
        ));
    }
    let rd = Reader {
        dir,
        manifest: &manifest,
    };
    (0..manifest.tensors.len())
        .map(|i| rd.matrix_any(&format!("batch.{i}")))
        .collect()
}
