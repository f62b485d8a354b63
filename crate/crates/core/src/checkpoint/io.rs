use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{encode_header, parse_header, place, MAX_HEADER_LEN};
use super::{
    Checkpoint, CheckpointError, DType, DTypePolicy, Layout, Tensor, TensorMeta, TensorSpec,
    MODEL_ID_KEY,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Random-access reader. Only the header is held in memory; tensors are read
/// on demand, one at a time.
#[derive(Debug)]
pub struct CheckpointReader {
    path: PathBuf,
    file: File,
    data_start: u64,
    metas: Vec<TensorMeta>,
    metadata: BTreeMap<String, String>,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(io_err(path))?;
        let file_len = file.metadata().map_err(io_err(path))?.len();
        if file_len < 8 {
            return Err(CheckpointError::MalformedHeader(format!(
                "file is {file_len} bytes, shorter than the 8-byte length prefix"
            )));
        }
        let mut prefix = [0u8; 8];
        file.read_exact(&mut prefix).map_err(io_err(path))?;
        let header_len = u64::from_le_bytes(prefix);
        if header_len > MAX_HEADER_LEN || 8 + header_len > file_len {
            return Err(CheckpointError::MalformedHeader(format!(
                "declared header length {header_len} does not fit in a {file_len}-byte file"
            )));
        }
        let mut json = vec![0u8; header_len as usize];
        file.read_exact(&mut json).map_err(io_err(path))?;
        let data_start = 8 + header_len;
        let header = parse_header(&json, file_len - data_start)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            data_start,
            metas: header.metas,
            metadata: header.metadata,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Tensor entries in name order.
    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn layout(&self) -> Layout {
        self.metas
            .iter()
            .map(|m| {
                (
                    m.name.clone(),
                    TensorSpec {
                        dtype: m.dtype,
                        shape: m.shape.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.metas.iter().map(TensorMeta::numel).sum()
    }

    /// `model_id` from the header metadata, falling back to the file stem.
    pub fn model_id(&self) -> String {
        self.metadata
            .get(MODEL_ID_KEY)
            .cloned()
            .unwrap_or_else(|| {
                self.path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.metas
            .binary_search_by(|m| m.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.metas[i])
    }

    pub fn read_tensor(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        let meta = self
            .meta(name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.to_string()))?
            .clone();
        let mut buf = vec![0u8; meta.byte_len() as usize];
        self.file
            .seek(SeekFrom::Start(self.data_start + meta.data_offsets.0))
            .map_err(io_err(&self.path))?;
        self.file.read_exact(&mut buf).map_err(io_err(&self.path))?;
        Tensor::from_bytes(&meta.name, meta.dtype, meta.shape, buf)
    }
}

/// Sequential writer emitting the canonical layout: tensors in lexicographic
/// name order, contiguous offsets, space-padded header.
///
/// Output goes to a `.partial` sibling that is renamed into place by
/// [`CheckpointWriter::finish`], so an interrupted write never leaves a
/// truncated file at the destination.
#[derive(Debug)]
pub struct CheckpointWriter {
    final_path: PathBuf,
    tmp_path: PathBuf,
    out: Option<BufWriter<File>>,
    metas: Vec<TensorMeta>,
    next: usize,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        entries: impl IntoIterator<Item = (String, TensorSpec)>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self, CheckpointError> {
        let final_path = path.as_ref().to_path_buf();
        let mut entries: Vec<(String, TensorSpec)> = entries.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if name.is_empty() {
                return Err(CheckpointError::EmptyName);
            }
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::DuplicateName(name.clone()));
            }
        }
        let metas = place(
            entries
                .into_iter()
                .map(|(name, spec)| (name, spec.dtype, spec.shape))
                .collect(),
        );

        let mut tmp_name = final_path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        tmp_name.push(".partial");
        let tmp_path = final_path.with_file_name(tmp_name);
        let file = File::create(&tmp_path).map_err(io_err(&tmp_path))?;
        let mut out = BufWriter::new(file);
        out.write_all(&encode_header(&metas, metadata))
            .map_err(io_err(&tmp_path))?;
        Ok(Self {
            final_path,
            tmp_path,
            out: Some(out),
            metas,
            next: 0,
        })
    }

    /// Name of the tensor the writer expects next, if any.
    pub fn next_name(&self) -> Option<&str> {
        self.metas.get(self.next).map(|m| m.name.as_str())
    }

    pub fn write(&mut self, name: &str, tensor: &Tensor) -> Result<(), CheckpointError> {
        let meta = self.metas.get(self.next).ok_or_else(|| CheckpointError::WriteOrder {
            expected: "<end of checkpoint>".to_string(),
            got: name.to_string(),
        })?;
        if meta.name != name {
            return Err(CheckpointError::WriteOrder {
                expected: meta.name.clone(),
                got: name.to_string(),
            });
        }
        if meta.dtype != tensor.dtype() || meta.shape != tensor.shape() {
            return Err(CheckpointError::BufferLength {
                name: name.to_string(),
                dtype: meta.dtype,
                shape: meta.shape.clone(),
                expected: meta.byte_len() as usize,
                actual: tensor.bytes().len(),
            });
        }
        let out = self.out.as_mut().expect("writer is open until finish");
        out.write_all(tensor.bytes()).map_err(io_err(&self.tmp_path))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CheckpointError> {
        if self.next < self.metas.len() {
            return Err(CheckpointError::Incomplete(self.metas.len() - self.next));
        }
        let out = self.out.take().expect("writer is open until finish");
        let file = out
            .into_inner()
            .map_err(|e| CheckpointError::Io {
                path: self.tmp_path.clone(),
                source: e.into_error(),
            })?;
        file.sync_all().map_err(io_err(&self.tmp_path))?;
        drop(file);
        fs::rename(&self.tmp_path, &self.final_path).map_err(io_err(&self.final_path))
    }
}

impl Drop for CheckpointWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.tmp_path);
        }
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let mut reader = CheckpointReader::open(path)?;
    let names: Vec<String> = reader.metas().iter().map(|m| m.name.clone()).collect();
    let mut ckpt = Checkpoint::new();
    for name in names {
        let tensor = reader.read_tensor(&name)?;
        ckpt.insert(name, tensor);
    }
    ckpt.provenance = reader.metadata().clone();
    Ok(ckpt)
}

pub fn save_checkpoint(
    ckpt: &Checkpoint,
    path: impl AsRef<Path>,
    policy: DTypePolicy,
) -> Result<(), CheckpointError> {
    let entries = ckpt.iter().map(|(name, t)| {
        (
            name.clone(),
            TensorSpec {
                dtype: policy.resolve(t.dtype()),
                shape: t.shape().to_vec(),
            },
        )
    });
    let mut writer = CheckpointWriter::create(path, entries, &ckpt.provenance)?;
    for (name, tensor) in ckpt.iter() {
        let dtype = policy.resolve(tensor.dtype());
        if dtype == tensor.dtype() {
            writer.write(name, tensor)?;
        } else {
            writer.write(name, &tensor.cast(dtype))?;
        }
    }
    writer.finish()
}

/// Streams `src` to `dst` one tensor at a time, applying `policy`.
pub fn transcode(
    src: impl AsRef<Path>,
    dst: impl AsRef<Path>,
    policy: DTypePolicy,
) -> Result<(), CheckpointError> {
    let mut reader = CheckpointReader::open(src)?;
    let entries: Vec<(String, TensorSpec)> = reader
        .metas()
        .iter()
        .map(|m| {
            (
                m.name.clone(),
                TensorSpec {
                    dtype: policy.resolve(m.dtype),
                    shape: m.shape.clone(),
                },
            )
        })
        .collect();
    let metadata = reader.metadata().clone();
    let mut writer = CheckpointWriter::create(dst, entries.clone(), &metadata)?;
    for (name, spec) in entries {
        let tensor = reader.read_tensor(&name)?;
        if tensor.dtype() == spec.dtype {
            writer.write(&name, &tensor)?;
        } else {
            writer.write(&name, &tensor.cast(spec.dtype))?;
        }
    }
    writer.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSummary {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspectSummary {
    pub tensor_count: usize,
    pub param_count: usize,
    pub total_bytes: u64,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorSummary>,
}

/// Header-only summary of a checkpoint file.
pub fn inspect(path: impl AsRef<Path>) -> Result<InspectSummary, CheckpointError> {
    let reader = CheckpointReader::open(path)?;
    let tensors: Vec<TensorSummary> = reader
        .metas()
        .iter()
        .map(|m| TensorSummary {
            name: m.name.clone(),
            dtype: m.dtype,
            shape: m.shape.clone(),
            bytes: m.byte_len(),
        })
        .collect();
    Ok(InspectSummary {
        tensor_count: tensors.len(),
        param_count: reader.param_count(),
        total_bytes: tensors.iter().map(|t| t.bytes).sum(),
        metadata: reader.metadata().clone(),
        tensors,
    })
}
