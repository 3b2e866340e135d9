//! Named-tensor checkpoint archive.
//!
//! Layout: a header line `damp-ckpt <version> <tensor-count> <seed>\n`,
//! then per tensor a text line `<name> <rows> <cols>\n` followed by
//! `rows*cols` little-endian f64 values. Round trips are byte-exact.

use super::optim::ParameterStore;
use super::tensor::Tensor;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint while reading tensor `{0}`")]
    Truncated(String),
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<(), CheckpointError> {
    // atomic write: temp file in the same directory, then rename
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        let tensors = store.export();
        writeln!(w, "damp-ckpt {VERSION} {} {}", tensors.len(), store.seed)?;
        for (name, t) in &tensors {
            writeln!(w, "{name} {} {}", t.rows, t.cols)?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore, CheckpointError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let header = read_line(&mut r)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "damp-ckpt" {
        return Err(CheckpointError::BadHeader(header));
    }
    let version: u32 = parts[1]
        .parse()
        .map_err(|_| CheckpointError::BadHeader(header.clone()))?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count: usize = parts[2]
        .parse()
        .map_err(|_| CheckpointError::BadHeader(header.clone()))?;
    let seed: u64 = parts[3]
        .parse()
        .map_err(|_| CheckpointError::BadHeader(header.clone()))?;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(&mut r)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(CheckpointError::BadHeader(line));
        }
        let name = fields[0].to_string();
        let rows: usize = fields[1]
            .parse()
            .map_err(|_| CheckpointError::BadHeader(line.clone()))?;
        let cols: usize = fields[2]
            .parse()
            .map_err(|_| CheckpointError::BadHeader(line.clone()))?;
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| CheckpointError::Truncated(name.clone()))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(ParameterStore::import(seed, tensors))
}

fn read_line<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|e| CheckpointError::BadHeader(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParameterStore::new(42);
        store.insert_uniform("enc1.fw.W", 8, 6, 0.08);
        store.insert_uniform("disc_c.w_d", 1, 4, 0.08);
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.seed, 42);
        for name in ["enc1.fw.W", "disc_c.w_d"] {
            assert_eq!(store.value(name), loaded.value(name));
            assert_eq!(store.accum(name), loaded.accum(name));
        }
        // and the file itself is stable
        save_checkpoint(&loaded, &dir.path().join("again.ckpt")).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("again.ckpt")).unwrap()
        );
    }

    #[test]
    fn corrupt_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint\n").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let mut store = ParameterStore::new(1);
        store.insert_uniform("w", 4, 4, 0.08);
        save_checkpoint(&store, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated(_))
        ));
    }
}
