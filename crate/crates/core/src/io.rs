//! On-disk formats: "TTWT" weight checkpoints, "AFEA" feature files,
//! "ATOK" token files, JSONL manifests, and atomic writes via a
//! ".partial" rename.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TTWT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"AFEA";
pub const FEATURE_VERSION: u32 = 1;
pub const TOKEN_MAGIC: &[u8; 4] = b"ATOK";
pub const TOKEN_VERSION: u32 = 1;

/// Write `bytes` to `path` through a `.partial` sibling so an interrupted
/// run never leaves a final-named half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let partial = partial_path(path);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&partial, bytes)?;
    fs::rename(&partial, path)?;
    Ok(())
}

pub fn partial_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".partial");
    std::path::PathBuf::from(os)
}

fn read_exact_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

// ---- TTWT checkpoints ------------------------------------------------------

/// Serialize a parameter set: magic, version, then per-parameter records of
/// (name length u32, name bytes, rank u32, dims u64…, f32 LE values).
pub fn checkpoint_bytes<S: Real>(params: &ParamSet<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(p.rows as u64).to_le_bytes());
        out.extend_from_slice(&(p.cols as u64).to_le_bytes());
        for &v in &p.values {
            out.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<S: Real>(path: &Path, params: &ParamSet<S>) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(params))
}

/// A raw checkpoint record.
#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

pub fn load_checkpoint_entries(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad checkpoint magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_exact_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            4 => {}
            n => {
                // partial length prefix
                let mut rest = vec![0u8; 4 - n];
                r.read_exact(&mut rest)?;
                return Err(Error::Data(format!(
                    "{}: truncated record header",
                    path.display()
                )));
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Data(format!("{}: non-utf8 parameter name", path.display())))?;
        let rank = read_exact_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_exact_u64(&mut r)?);
        }
        let count = dims.iter().product::<u64>() as usize;
        let mut values = vec![0f32; count];
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            values[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        entries.push(CheckpointEntry { name, dims, values });
    }
    Ok(entries)
}

/// Restore values into an existing parameter set by name; shapes must match.
pub fn load_checkpoint_into<S: Real>(path: &Path, params: &mut ParamSet<S>) -> Result<()> {
    let entries = load_checkpoint_entries(path)?;
    let mut by_name: std::collections::HashMap<&str, &CheckpointEntry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for (_, p) in params.iter_mut() {
        let e = by_name.remove(p.name.as_str()).ok_or_else(|| {
            Error::Data(format!("{}: missing parameter {}", path.display(), p.name))
        })?;
        if e.dims != [p.rows as u64, p.cols as u64] {
            return Err(Error::Data(format!(
                "{}: parameter {} has dims {:?}, expected [{}, {}]",
                path.display(),
                p.name,
                e.dims,
                p.rows,
                p.cols
            )));
        }
        for (v, &f) in p.values.iter_mut().zip(e.values.iter()) {
            *v = S::from_f32(f);
        }
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::Data(format!(
            "{}: checkpoint has extra parameter {name}",
            path.display()
        )));
    }
    Ok(())
}

// ---- AFEA feature files ----------------------------------------------------

pub fn feature_bytes(frames: &[f32], t: usize, dim: usize) -> Vec<u8> {
    debug_assert_eq!(frames.len(), t * dim);
    let mut out = Vec::with_capacity(16 + frames.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_features(path: &Path, frames: &[f32], t: usize, dim: usize) -> Result<()> {
    write_atomic(path, &feature_bytes(frames, t, dim))
}

/// Returns (frames, t, dim).
pub fn load_features(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad feature magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_exact_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported feature version {version}",
            path.display()
        )));
    }
    let t = read_exact_u32(&mut r)? as usize;
    let dim = read_exact_u32(&mut r)? as usize;
    let mut buf = vec![0u8; t * dim * 4];
    r.read_exact(&mut buf)?;
    let frames = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((frames, t, dim))
}

// ---- ATOK token files --------------------------------------------------------

/// Token file: magic, version, n_layers, T, per-layer K values, then
/// n_layers×T u32 indices (layer-major).
pub fn token_bytes(indices: &[Vec<u32>], ks: &[u32]) -> Vec<u8> {
    debug_assert_eq!(indices.len(), ks.len());
    let t = indices.first().map_or(0, |l| l.len());
    let mut out = Vec::new();
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for &k in ks {
        out.extend_from_slice(&k.to_le_bytes());
    }
    for layer in indices {
        debug_assert_eq!(layer.len(), t);
        for &idx in layer {
            out.extend_from_slice(&idx.to_le_bytes());
        }
    }
    out
}

pub fn save_tokens(path: &Path, indices: &[Vec<u32>], ks: &[u32]) -> Result<()> {
    write_atomic(path, &token_bytes(indices, ks))
}

/// Returns (per-layer indices, per-layer K).
pub fn load_tokens(path: &Path) -> Result<(Vec<Vec<u32>>, Vec<u32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TOKEN_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad token magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_exact_u32(&mut r)?;
    if version != TOKEN_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported token version {version}",
            path.display()
        )));
    }
    let n_layers = read_exact_u32(&mut r)? as usize;
    let t = read_exact_u32(&mut r)? as usize;
    let mut ks = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        ks.push(read_exact_u32(&mut r)?);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut buf = vec![0u8; t * 4];
        r.read_exact(&mut buf)?;
        let indices: Vec<u32> = buf
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(&bad) = indices.iter().find(|&&i| i >= ks[layer]) {
            return Err(Error::Data(format!(
                "{}: token {bad} out of range for K={}",
                path.display(),
                ks[layer]
            )));
        }
        layers.push(indices);
    }
    Ok((layers, ks))
}

// ---- JSONL ------------------------------------------------------------------

pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut buf, rec)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufRead::lines(BufReader::new(file)).enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: bad record: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Buffered writer wrapper kept for symmetry with `write_atomic` when
/// streaming large files.
pub fn buffered_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ttwt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("enc.w", 4, 3, Init::Xavier, &mut rng, true);
        ps.add("enc.b", 1, 3, Init::Xavier, &mut rng, false);
        save_checkpoint(&path, &ps).unwrap();

        let mut restored = ps.clone();
        for (_, p) in restored.iter_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        load_checkpoint_into(&path, &mut restored).unwrap();
        for ((_, a), (_, b)) in ps.iter().zip(restored.iter()) {
            assert_eq!(a.values, b.values);
        }
        assert!(!path.with_extension("ttwt.partial").exists());
    }

    #[test]
    fn checkpoint_header_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("w", 2, 2, Init::Ones, &mut rng, true);
        let bytes = checkpoint_bytes(&ps);
        assert_eq!(&bytes[0..4], b"TTWT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        // name length 1, name "w", rank 2, dims 2,2
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'w');
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[25..33].try_into().unwrap()), 2);
    }

    #[test]
    fn feature_round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.afea");
        let frames: Vec<f32> = (0..12).map(|i| i as f32 * 0.5).collect();
        save_features(&path, &frames, 3, 4).unwrap();
        let (loaded, t, d) = load_features(&path).unwrap();
        assert_eq!((t, d), (3, 4));
        assert_eq!(loaded, frames);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"AFEA");
    }

    #[test]
    fn token_round_trip_validates_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.atok");
        let layers = vec![vec![0u32, 3, 1], vec![2u32, 2, 0]];
        save_tokens(&path, &layers, &[4, 3]).unwrap();
        let (loaded, ks) = load_tokens(&path).unwrap();
        assert_eq!(loaded, layers);
        assert_eq!(ks, vec![4, 3]);

        // out-of-range index rejected at load
        save_tokens(&path, &[vec![5u32]], &[4]).unwrap();
        assert!(load_tokens(&path).is_err());
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ttwt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint_entries(&path),
            Err(crate::error::Error::Data(_))
        ));
    }
}
