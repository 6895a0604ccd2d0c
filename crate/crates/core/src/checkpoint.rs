//! Checkpoint directories: `manifest.json` (ordered `{name, shape, dtype}`),
//! `weights.bin` (row-major little-endian `f32` in manifest order) and
//! `artifact.json` (kind, payload hash, producing command).

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use smp_numerics::{Real, Tensor};

use crate::data::Vocab;
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{io_err, Error, Result};
use crate::hash::fnv1a_hex;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const ARTIFACT: &str = "artifact.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Provenance record stored next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub kind: String,
    pub content_hash: String,
    pub command: String,
    pub config_hash: String,
    pub timestamp: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// `SMP_DETERMINISTIC=1` zeroes timestamps and wall-clock fields so
/// repeated runs are byte-identical.
pub fn deterministic() -> bool {
    std::env::var("SMP_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

pub fn now_secs() -> u64 {
    if deterministic() {
        return 0;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl ArtifactManifest {
    pub fn new(kind: &str, content_hash: String, command: &str, config_hash: &str) -> Self {
        ArtifactManifest {
            kind: kind.into(),
            content_hash,
            command: command.into(),
            config_hash: config_hash.into(),
            timestamp: now_secs(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(ARTIFACT), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(ARTIFACT))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable value");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(Error::AlreadyExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Refuses to replace an existing file unless `force`.
pub fn guard_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::AlreadyExists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

/// Writes manifest and payload; returns the payload hash.
pub fn save_tensors<T: Real>(dir: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<String> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest: Vec<ManifestEntry> = tensors
        .iter()
        .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into() })
        .collect();
    let mut bytes = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 4).sum());
    for (_, t) in tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    write_json(&dir.join(MANIFEST), &manifest)?;
    let wpath = dir.join(WEIGHTS);
    fs::write(&wpath, &bytes).map_err(io_err(&wpath))?;
    Ok(fnv1a_hex(&bytes))
}

/// Reads manifest and payload, verifying the payload against
/// `artifact.json` when present. `f32` payloads widen losslessly into
/// `f64` runs.
pub fn load_tensors<T: Real>(dir: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let manifest: Vec<ManifestEntry> = read_json(&dir.join(MANIFEST))?;
    let wpath = dir.join(WEIGHTS);
    let bytes = fs::read(&wpath).map_err(io_err(&wpath))?;
    let apath = dir.join(ARTIFACT);
    if apath.exists() {
        let art = ArtifactManifest::read(dir)?;
        let actual = fnv1a_hex(&bytes);
        if art.content_hash != actual {
            return Err(Error::HashMismatch { path: wpath, expected: art.content_hash, actual });
        }
    }
    let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if total * 4 != bytes.len() {
        return Err(Error::Input(format!(
            "{}: payload has {} bytes, manifest describes {}",
            wpath.display(),
            bytes.len(),
            total * 4
        )));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        if e.dtype != "f32" {
            return Err(Error::Input(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let data = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| T::c(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect();
        offset += 4 * n;
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

/// Hash of a checkpoint's payload as stored on disk.
pub fn payload_hash(dir: &Path) -> Result<String> {
    let wpath = dir.join(WEIGHTS);
    let bytes = fs::read(&wpath).map_err(io_err(&wpath))?;
    Ok(fnv1a_hex(&bytes))
}

/// Hash of a serialisable configuration's canonical JSON.
pub fn config_hash<S: Serialize>(config: &S) -> String {
    fnv1a_hex(serde_json::to_string(config).expect("serialisable value").as_bytes())
}

pub const ENCODER_CONFIG: &str = "encoder_config.json";
pub const VOCAB: &str = "vocab.txt";

/// Saves an encoder checkpoint (with its vocabulary when given) and its
/// artifact record; returns the payload hash.
pub fn save_encoder<T: Real>(
    dir: &Path,
    weights: &EncoderWeights<T>,
    vocab: Option<&Vocab>,
    command: &str,
    config_hash: &str,
) -> Result<String> {
    let hash = save_tensors(dir, &weights.named())?;
    write_json(&dir.join(ENCODER_CONFIG), &weights.config)?;
    if let Some(v) = vocab {
        v.save(&dir.join(VOCAB))?;
    }
    ArtifactManifest::new("encoder", hash.clone(), command, config_hash).write(dir)?;
    Ok(hash)
}

pub fn load_encoder<T: Real>(dir: &Path) -> Result<(EncoderWeights<T>, Option<Vocab>)> {
    let config: EncoderConfig = read_json(&dir.join(ENCODER_CONFIG))?;
    let tensors = load_tensors::<T>(dir)?;
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    let weights = EncoderWeights::from_tensors(&config, tensors.into_iter().map(|(_, t)| t).collect())?;
    let expected: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    if names != expected {
        return Err(Error::Input(format!("{}: tensor names do not match the encoder layout", dir.display())));
    }
    let vpath = dir.join(VOCAB);
    let vocab = if vpath.exists() { Some(Vocab::load(&vpath)?) } else { None };
    Ok((weights, vocab))
}
