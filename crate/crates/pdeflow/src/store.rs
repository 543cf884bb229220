//! Bit-exact persistence: flat binary tensor records, dataset manifests,
//! model checkpoints as named tensor bundles, and line-delimited run logs.

use crate::error::{Error, Result};
use crate::grid::{BcTag, Grid, GridField};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const TENSOR_MAGIC: &[u8; 4] = b"PDFL";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDFC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Dtype> {
        match c {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            _ => Err(Error::corrupt(format!("unknown dtype code {c}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A dtype-tagged dense array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl TensorRecord {
    pub fn from_tensor(t: &Tensor, dtype: Dtype) -> TensorRecord {
        let payload = match dtype {
            Dtype::F32 => t
                .data()
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect(),
            Dtype::F64 => t.data().iter().flat_map(|&v| v.to_le_bytes()).collect(),
        };
        TensorRecord { dtype, dims: t.shape().to_vec(), payload }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let n: usize = self.dims.iter().product();
        if self.payload.len() != n * self.dtype.size() {
            return Err(Error::corrupt("tensor record payload length mismatch"));
        }
        let data: Vec<f64> = match self.dtype {
            Dtype::F32 => self
                .payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F64 => self
                .payload
                .chunks_exact(8)
                .map(|b| {
                    f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
                })
                .collect(),
        };
        Tensor::new(self.dims.clone(), data)
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if self.payload.len() != n * self.dtype.size() {
            return Err(Error::corrupt("refusing to write inconsistent tensor record"));
        }
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.dtype.code()])?;
        w.write_all(&[self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&self.payload)?;
        Ok(())
    }

    fn read_from(r: &mut impl Read) -> Result<TensorRecord> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::corrupt("tensor record truncated before magic"))?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::corrupt(format!(
                "bad tensor magic {:?}, expected {:?}",
                magic, TENSOR_MAGIC
            )));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)
            .map_err(|_| Error::corrupt("tensor record truncated in header"))?;
        let version = u16::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::corrupt(format!("unsupported tensor format version {version}")));
        }
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|_| Error::corrupt("tensor record truncated in header"))?;
        let dtype = Dtype::from_code(b[0])?;
        r.read_exact(&mut b)
            .map_err(|_| Error::corrupt("tensor record truncated in header"))?;
        let ndim = b[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut d = [0u8; 8];
            r.read_exact(&mut d)
                .map_err(|_| Error::corrupt("tensor record truncated in dims"))?;
            dims.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; n * dtype.size()];
        r.read_exact(&mut payload)
            .map_err(|_| Error::corrupt("tensor record payload truncated"))?;
        Ok(TensorRecord { dtype, dims, payload })
    }
}

pub fn save_tensor(path: impl AsRef<Path>, record: &TensorRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    record.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorRecord> {
    let mut r = BufReader::new(File::open(path)?);
    let rec = TensorRecord::read_from(&mut r)?;
    // trailing garbage means the file is not a single record
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::corrupt("trailing bytes after tensor record"));
    }
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    State,
    Param,
    Checkpoint,
    Log,
    Report,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub role: Role,
    /// Rng stream the artifact was produced from.
    pub seed: u64,
    pub stream: u64,
}

/// Dataset manifest: enough to regenerate or reread every tensor in a
/// dataset directory deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub problem: String,
    pub dims: Vec<usize>,
    pub time_axis: bool,
    pub extents: Vec<(f64, f64)>,
    pub bc_tag: BcTag,
    pub seed: u64,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub params: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(&self.dims, &self.extents, self.time_axis)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::corrupt(format!("manifest encode: {e}")))?;
        fs::write(dir.as_ref().join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Manifest> {
        let text = fs::read_to_string(dir.as_ref().join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(format!("manifest decode: {e}")))
    }
}

/// Reader over the (state, param) pairs of a dataset directory.
pub struct Dataset {
    dir: PathBuf,
    manifest: Manifest,
    state_names: Vec<String>,
    param_names: Vec<String>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = Manifest::load(&dir)?;
        let mut state_names = Vec::new();
        let mut param_names = Vec::new();
        for e in &manifest.entries {
            match e.role {
                Role::State => state_names.push(e.name.clone()),
                Role::Param => param_names.push(e.name.clone()),
                _ => {}
            }
        }
        if state_names.len() != param_names.len() {
            return Err(Error::corrupt("dataset has unpaired state/param entries"));
        }
        Ok(Dataset { dir, manifest, state_names, param_names })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.state_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state_names.is_empty()
    }

    pub fn state(&self, i: usize) -> Result<GridField> {
        self.field(&self.state_names[i], self.manifest.grid()?)
    }

    /// Ground-truth parameter field (spatial grid even for space-time data).
    pub fn param(&self, i: usize) -> Result<GridField> {
        self.field(&self.param_names[i], self.manifest.grid()?.spatial_grid()?)
    }

    pub fn pair(&self, i: usize) -> Result<(GridField, GridField)> {
        Ok((self.state(i)?, self.param(i)?))
    }

    fn field(&self, name: &str, grid: Grid) -> Result<GridField> {
        let rec = load_tensor(self.dir.join(name))?;
        let t = rec.to_tensor()?;
        GridField::new(grid, t, self.manifest.bc_tag)
    }

    /// Deterministic iteration order; `shuffle_seed` permutes reproducibly.
    pub fn order(&self, shuffle_seed: Option<u64>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            use rand::seq::SliceRandom;
            order.shuffle(&mut crate::rng::seed_rng(seed));
        }
        order
    }
}

/// Model checkpoint: a JSON descriptor plus named tensors in one file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub descriptor: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn kind(&self) -> Option<&str> {
        self.descriptor.get("kind").and_then(|v| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::corrupt(format!("checkpoint missing tensor '{name}'")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        descriptor: &'a serde_json::Value,
        tensor_names: Vec<&'a str>,
    }
    let header = Header {
        descriptor: &ckpt.descriptor,
        tensor_names: ckpt.tensors.iter().map(|(n, _)| n.as_str()).collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::corrupt(format!("checkpoint encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &ckpt.tensors {
        TensorRecord::from_tensor(t, Dtype::F64).write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    #[derive(Deserialize)]
    struct Header {
        descriptor: serde_json::Value,
        tensor_names: Vec<String>,
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::corrupt("checkpoint truncated before magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::corrupt("not a checkpoint file"));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)
        .map_err(|_| Error::corrupt("checkpoint truncated in header"))?;
    if u16::from_le_bytes(v) != FORMAT_VERSION {
        return Err(Error::corrupt("unsupported checkpoint version"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::corrupt("checkpoint truncated in header"))?;
    let json_len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)
        .map_err(|_| Error::corrupt("checkpoint descriptor truncated"))?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::corrupt(format!("checkpoint decode: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensor_names.len());
    for name in header.tensor_names {
        let rec = TensorRecord::read_from(&mut r)?;
        tensors.push((name, rec.to_tensor()?));
    }
    Ok(Checkpoint { descriptor: header.descriptor, tensors })
}

/// Line-delimited JSON log writer for per-epoch scalar records.
pub struct LogWriter {
    w: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<LogWriter> {
        Ok(LogWriter { w: BufWriter::new(File::create(path)?) })
    }

    pub fn record(&mut self, value: &serde_json::Value) -> Result<()> {
        let line = serde_json::to_string(value)
            .map_err(|e| Error::corrupt(format!("log encode: {e}")))?;
        writeln!(self.w, "{line}")?;
        self.w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream_rng};

    #[test]
    fn tensor_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pdfl");
        let t = Tensor::new(vec![3, 4], standard_normal(&mut stream_rng(1, 0), 12)).unwrap();
        for dtype in [Dtype::F32, Dtype::F64] {
            let rec = TensorRecord::from_tensor(&t, dtype);
            save_tensor(&path, &rec).unwrap();
            let back = load_tensor(&path).unwrap();
            assert_eq!(rec, back);
        }
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pdfl");
        let t = Tensor::new(vec![8], standard_normal(&mut stream_rng(2, 0), 8)).unwrap();
        save_tensor(&path, &TensorRecord::from_tensor(&t, Dtype::F64)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_tensor(&path) {
            Err(Error::Corrupt(_)) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        match load_tensor(&path) {
            Err(Error::Corrupt(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint {
            descriptor: serde_json::json!({"kind": "base", "seed": 7}),
            tensors: vec![
                ("w0".into(), Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap()),
                ("b0".into(), Tensor::from_vec(vec![0.5, -0.5])),
            ],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.kind(), Some("base"));
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensor("w0").unwrap(), ckpt.tensor("w0").unwrap());
        assert_eq!(back.tensor("b0").unwrap(), ckpt.tensor("b0").unwrap());
    }
}
