//! Checkpoint files: the 8-byte magic `EMUCKPT\0`, a little-endian `u64`
//! manifest length, a JSON manifest, then every parameter tensor as `f64`
//! little-endian values in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ModelParams, ParamSets, ParamTensor};
use crate::data::NormalizationStats;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EMUCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Statistics the model normalizes with.
    pub stats: NormalizationStats,
    /// Names of completed curriculum stages, in order.
    pub provenance: Vec<String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams, stats: NormalizationStats) -> Result<Self> {
        params.check_config(&config)?;
        Ok(Self {
            config,
            params,
            stats,
            provenance: Vec::new(),
        })
    }

    pub fn stats_digest(&self) -> String {
        self.stats.digest()
    }

    /// A warning naming both digests if `stats` differs from the stored statistics.
    pub fn stats_warning(&self, stats: &NormalizationStats) -> Option<String> {
        let (saved, given) = (self.stats_digest(), stats.digest());
        (saved != given).then(|| {
            format!("checkpoint was saved with statistics digest {saved}, but statistics digest {given} were supplied")
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    shapes: Vec<(String, Vec<usize>)>,
    stats: NormalizationStats,
    stats_digest: String,
    provenance: Vec<String>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: ckpt.config.clone(),
        shapes: ckpt.params.sets.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
        stats: ckpt.stats.clone(),
        stats_digest: ckpt.stats_digest(),
        provenance: ckpt.provenance.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for t in &ckpt.params.sets {
        for v in &t.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "file too short for magic bytes"))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad magic bytes (not a checkpoint file)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::format(path, "truncated manifest length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 256 << 20 {
        return Err(Error::format(path, "implausible manifest length"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| Error::format(path, "truncated manifest"))?;
    let m: Manifest =
        serde_json::from_slice(&json).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: m.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let total: usize = m.shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), total * 8),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let sets = m
        .shapes
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            ParamTensor {
                name,
                shape,
                values: values.by_ref().take(n).collect(),
            }
        })
        .collect();
    let params = ParamSets { sets };
    params
        .check_config(&m.config)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let ckpt = Checkpoint {
        config: m.config,
        params,
        stats: m.stats,
        provenance: m.provenance,
    };
    if ckpt.stats_digest() != m.stats_digest {
        return Err(Error::format(path, "embedded statistics do not match their digest"));
    }
    Ok(ckpt)
}

/// Load a checkpoint that will be used with externally supplied statistics,
/// warning (and returning the message) when they differ from the saved ones.
pub fn load_checkpoint_with_stats(path: &Path, stats: &NormalizationStats) -> Result<(Checkpoint, Option<String>)> {
    let ckpt = load_checkpoint(path)?;
    let warning = ckpt.stats_warning(stats);
    if let Some(w) = &warning {
        log::warn!("{}: {w}", path.display());
    }
    Ok((ckpt, warning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::backprop::tests::tiny_problem;
    use crate::emulator::config::Activation;

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, params, stats, _, _) = tiny_problem(1, 1, Activation::Tanh);
        let mut ckpt = Checkpoint::new(cfg, params, stats).unwrap();
        ckpt.provenance = vec!["pretrain".into(), "1a".into()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let bits = |c: &Checkpoint| c.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ckpt));
    }

    #[test]
    fn corrupted_magic_and_digest_warning() {
        let (cfg, params, stats, _, _) = tiny_problem(2, 1, Activation::Tanh);
        let ckpt = Checkpoint::new(cfg, params, stats.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();

        let (_, w) = load_checkpoint_with_stats(&path, &stats).unwrap();
        assert!(w.is_none());
        let mut other = stats.clone();
        other.mean[0] += 1.0;
        let (_, w) = load_checkpoint_with_stats(&path, &other).unwrap();
        let w = w.unwrap();
        assert!(w.contains(&stats.digest()) && w.contains(&other.digest()));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn version_is_checked() {
        let (cfg, params, stats, _, _) = tiny_problem(3, 1, Activation::Tanh);
        let ckpt = Checkpoint::new(cfg, params, stats).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        let patched = json.replacen("\"format_version\":1", "\"format_version\":7", 1);
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }
}
