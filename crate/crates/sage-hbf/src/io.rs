//! Binary dataset and parameter files.
//!
//! Datasets (`SAGEHBF1`): magic, then `u32` N_T, N_U, COUNT, an `f64`
//! scale, then every sample user-major as `(re, im)` pairs. Parameters
//! (`SAGEHBP1`): magic, the network configuration, then every tensor as
//! `name, shape, values`. All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use sage_hbf_core::channel::{ChannelMatrix, Dataset};
use sage_hbf_core::model::{ModelParams, NetConfig, TensorSpec};

pub const DATASET_MAGIC: &[u8; 8] = b"SAGEHBF1";
pub const PARAMS_MAGIC: &[u8; 8] = b"SAGEHBP1";
const DATASET_HEADER: usize = 8 + 12 + 8;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: not a {expected} file")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found:?}")]
    Version { found: String },
    #[error("truncated file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("network configuration in file differs from the expected one")]
    ConfigMismatch,
    #[error("malformed file: {0}")]
    Malformed(String),
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

/// Cursor over a byte buffer that reports truncation against the whole file.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).ok_or(IoError::Malformed("length overflow".into()))?;
        if end > self.buf.len() {
            return Err(IoError::Truncated { needed: end, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), IoError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(IoError::TrailingBytes(n)),
        }
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 8], what: &'static str) -> Result<(), IoError> {
    if bytes.len() < 8 {
        return Err(IoError::Truncated { needed: 8, have: bytes.len() });
    }
    if &bytes[..8] == magic {
        return Ok(());
    }
    // Same family, other revision.
    if bytes[..7] == magic[..7] {
        return Err(IoError::Version { found: String::from_utf8_lossy(&bytes[..8]).into_owned() });
    }
    Err(IoError::BadMagic { expected: what })
}

fn to_u32(v: usize, what: &str) -> Result<u32, IoError> {
    u32::try_from(v).map_err(|_| IoError::Dimension(format!("{what} = {v} exceeds u32")))
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>, IoError> {
    let (n_t, n_u) = d.dims().map_err(|e| IoError::Dimension(e.to_string()))?;
    let mut out = Vec::with_capacity(DATASET_HEADER + d.len() * n_t * n_u * 16);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&to_u32(n_t, "N_T")?.to_le_bytes());
    out.extend_from_slice(&to_u32(n_u, "N_U")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d.len(), "COUNT")?.to_le_bytes());
    out.extend_from_slice(&d.scale.to_le_bytes());
    for h in &d.samples {
        // Column-major storage is already user-major.
        for z in h.iter() {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8], label: &str) -> Result<Dataset, IoError> {
    check_magic(bytes, DATASET_MAGIC, "dataset")?;
    let mut r = Reader::new(bytes);
    r.take(8)?;
    let n_t = r.u32()? as usize;
    let n_u = r.u32()? as usize;
    let count = r.u32()? as usize;
    let scale = r.f64()?;
    if n_t == 0 || n_u == 0 || count == 0 {
        return Err(IoError::Dimension(format!("N_T={n_t}, N_U={n_u}, COUNT={count} must all be positive")));
    }
    let needed = DATASET_HEADER + count * n_t * n_u * 16;
    if bytes.len() < needed {
        return Err(IoError::Truncated { needed, have: bytes.len() });
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut vals = Vec::with_capacity(n_t * n_u);
        for _ in 0..n_t * n_u {
            let re = r.f64()?;
            let im = r.f64()?;
            vals.push(Complex64::new(re, im));
        }
        samples.push(ChannelMatrix::from_vec(n_t, n_u, vals));
    }
    r.finish()?;
    Ok(Dataset { samples, label: label.to_string(), scale })
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<(), IoError> {
    write_file(path, &encode_dataset(d)?)
}

/// Reads a dataset; the label becomes the file name.
pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let label = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_dataset(&read_file(path)?, &label)
}

/// [`read_dataset`] plus a check of the per-sample shape.
pub fn read_dataset_with_dims(path: &Path, n_t: usize, n_u: usize) -> Result<Dataset, IoError> {
    let d = read_dataset(path)?;
    let dims = d.samples[0].shape();
    if dims != (n_t, n_u) {
        return Err(IoError::Dimension(format!(
            "{} holds {}x{} samples, expected {n_t}x{n_u}",
            path.display(),
            dims.0,
            dims.1
        )));
    }
    Ok(d)
}

fn encode_config(c: &NetConfig, out: &mut Vec<u8>) -> Result<(), IoError> {
    for (v, what) in [
        (c.n_t, "n_t"),
        (c.n_rf, "n_rf"),
        (c.n_u, "n_u"),
        (c.conv_channels, "conv_channels"),
        (c.conv_layers, "conv_layers"),
        (c.fc_width, "fc_width"),
        (c.fc_layers, "fc_layers"),
        (c.kernel_size, "kernel_size"),
    ] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    out.push(u8::from(c.use_batchnorm));
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    out.extend_from_slice(&c.width_scale.to_le_bytes());
    Ok(())
}

fn decode_config(r: &mut Reader<'_>) -> Result<NetConfig, IoError> {
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let use_batchnorm = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(IoError::Malformed(format!("batch-norm flag {b}"))),
    };
    let [n_t, n_rf, n_u, conv_channels, conv_layers, fc_width, fc_layers, kernel_size] = dims;
    Ok(NetConfig {
        n_t,
        n_rf,
        n_u,
        conv_channels,
        conv_layers,
        fc_width,
        fc_layers,
        kernel_size,
        use_batchnorm,
        dropout_rate: r.f64()?,
        width_scale: r.f64()?,
    })
}

fn encode_tensor(spec: &TensorSpec, values: &[f64], out: &mut Vec<u8>) -> Result<(), IoError> {
    out.extend_from_slice(&to_u32(spec.name.len(), "name length")?.to_le_bytes());
    out.extend_from_slice(spec.name.as_bytes());
    out.extend_from_slice(&to_u32(spec.shape.len(), "rank")?.to_le_bytes());
    for &d in &spec.shape {
        out.extend_from_slice(&to_u32(d, "extent")?.to_le_bytes());
    }
    for v in &values[spec.range()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn decode_tensor(r: &mut Reader<'_>, spec: &TensorSpec, values: &mut [f64]) -> Result<(), IoError> {
    let name_len = r.u32()? as usize;
    let name = r.take(name_len)?;
    if name != spec.name.as_bytes() {
        return Err(IoError::Malformed(format!(
            "expected tensor {}, found {}",
            spec.name,
            String::from_utf8_lossy(name)
        )));
    }
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    if shape != spec.shape {
        return Err(IoError::Dimension(format!("{}: shape {:?}, expected {:?}", spec.name, shape, spec.shape)));
    }
    for v in &mut values[spec.range()] {
        *v = r.f64()?;
    }
    Ok(())
}

/// Trainable tensors first, then the running statistics.
pub fn encode_params(p: &ModelParams) -> Result<Vec<u8>, IoError> {
    p.validate().map_err(|e| IoError::Dimension(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + 8 * (p.values.len() + p.running.len()));
    out.extend_from_slice(PARAMS_MAGIC);
    encode_config(&p.config, &mut out)?;
    let trainable = p.trainable_specs();
    let running = p.running_specs();
    out.extend_from_slice(&to_u32(trainable.len() + running.len(), "tensor count")?.to_le_bytes());
    for s in &trainable {
        encode_tensor(s, &p.values, &mut out)?;
    }
    for s in &running {
        encode_tensor(s, &p.running, &mut out)?;
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams, IoError> {
    check_magic(bytes, PARAMS_MAGIC, "parameter")?;
    let mut r = Reader::new(bytes);
    r.take(8)?;
    let config = decode_config(&mut r)?;
    config.validate().map_err(|e| IoError::Malformed(e.to_string()))?;
    let mut p = ModelParams { config, values: Vec::new(), running: Vec::new() };
    let trainable = p.trainable_specs();
    let running = p.running_specs();
    let count = r.u32()? as usize;
    if count != trainable.len() + running.len() {
        return Err(IoError::Dimension(format!(
            "{count} tensors, configuration declares {}",
            trainable.len() + running.len()
        )));
    }
    p.values = vec![0.0; trainable.iter().map(TensorSpec::len).sum()];
    p.running = vec![0.0; running.iter().map(TensorSpec::len).sum()];
    for s in &trainable {
        decode_tensor(&mut r, s, &mut p.values)?;
    }
    for s in &running {
        decode_tensor(&mut r, s, &mut p.running)?;
    }
    r.finish()?;
    p.validate().map_err(|e| IoError::Malformed(e.to_string()))?;
    Ok(p)
}

pub fn save_params(p: &ModelParams, path: &Path) -> Result<(), IoError> {
    write_file(path, &encode_params(p)?)
}

/// Loads parameters; with `expected`, the stored configuration must match it.
pub fn load_params(path: &Path, expected: Option<&NetConfig>) -> Result<ModelParams, IoError> {
    let p = decode_params(&read_file(path)?)?;
    match expected {
        Some(c) if *c != p.config => Err(IoError::ConfigMismatch),
        _ => Ok(p),
    }
}
