//! Binary checkpoint layout:
//!
//! ```text
//! "TSTC" | version: u32 LE | header length: u32 LE | header: UTF-8 key=value lines | parameters: f64 LE
//! ```
//!
//! Parameters follow the model's declared order. Loading rejects a bad
//! magic, an unknown version and any mismatch between the payload length
//! and the parameter count implied by the header.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::NormStats;
use crate::model::{AttentionMode, ModelConfig, ModelError, ScaleRatio, TSTransformer};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("cannot store checkpoint: {0}")]
    Unserializable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to resume inference: architecture, input scaling,
/// free-form run metadata and the flat parameter payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub stats: NormStats,
    /// Extra `key=value` pairs, kept in order.
    pub meta: Vec<(String, String)>,
    pub params: Vec<f64>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &TSTransformer<T>, stats: NormStats, meta: Vec<(String, String)>) -> Self {
        Self {
            model_config: model.config().clone(),
            stats,
            meta,
            params: model.flat_parameters().into_iter().map(Scalar::to_f64_lossy).collect(),
        }
    }

    pub fn model<T: Scalar>(&self) -> Result<TSTransformer<T>> {
        let mut model = TSTransformer::zeroed(self.model_config.clone())?;
        let flat: Vec<T> = self.params.iter().map(|&v| T::lit(v)).collect();
        model.load_flat(&flat)?;
        Ok(model)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn header(&self) -> Result<String> {
        let c = &self.model_config;
        let s = &self.stats;
        let mut lines = vec![
            ("model.n_variates".to_string(), c.n_variates.to_string()),
            ("model.lookback".into(), c.lookback.to_string()),
            ("model.horizon".into(), c.horizon.to_string()),
            ("model.width".into(), c.width.to_string()),
            ("model.ratios".into(), join(&c.ratios)),
            ("model.heads".into(), c.heads.to_string()),
            ("model.mode".into(), c.mode.to_string()),
            ("model.eps".into(), c.eps.to_string()),
            ("model.instance_norm".into(), c.instance_norm.to_string()),
            ("norm.names".into(), s.names.join(",")),
            ("norm.mean".into(), join(&s.mean)),
            ("norm.std".into(), join(&s.std)),
            ("norm.flagged".into(), s.flagged.join(",")),
        ];
        lines.extend(self.meta.iter().cloned());
        let mut out = String::new();
        for (k, v) in lines {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Unserializable(format!("header entry {k:?} is not a single key=value line")));
            }
            if k.starts_with("norm.") && k != "norm.flagged" && v.is_empty() {
                return Err(CheckpointError::Unserializable(format!("{k} is empty")));
            }
            out.push_str(&format!("{k}={v}\n"));
        }
        if s.names.iter().chain(&s.flagged).any(|n| n.contains(',')) {
            return Err(CheckpointError::Unserializable("channel names must not contain commas".into()));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header()?;
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let len = u32::try_from(header.len()).map_err(|_| CheckpointError::Unserializable("header too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic (expected \"TSTC\")"));
        }
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| corrupt("truncated fixed header"))
        };
        let version = word(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let header_len = word(8)? as usize;
        let header_bytes = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| corrupt("truncated text header"))?;
        let header = std::str::from_utf8(header_bytes).map_err(|_| corrupt("header is not UTF-8"))?;
        let (model_config, stats, meta) = parse_header(header)?;

        let payload = &bytes[12 + header_len..];
        if payload.len() % 8 != 0 {
            return Err(corrupt(format!("payload of {} bytes is not a whole number of f64 values", payload.len())));
        }
        let expected = model_config.param_count();
        let got = payload.len() / 8;
        if got != expected {
            return Err(corrupt(format!(
                "scalar count mismatch: header configuration requires {expected}, payload holds {got}"
            )));
        }
        let params: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(format!("non-finite parameter at payload index {i}")));
        }
        Ok(Self {
            model_config,
            stats,
            meta,
            params,
        })
    }
}

fn parse_header(text: &str) -> Result<(ModelConfig, NormStats, Vec<(String, String)>)> {
    let mut entries: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("header line {} is not key=value", i + 1)))?;
        entries.push((k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| corrupt(format!("header lacks {key}")))
    };
    fn num<X: std::str::FromStr>(key: &str, v: &str) -> Result<X> {
        v.parse().map_err(|_| corrupt(format!("header value {key}={v} is malformed")))
    }
    let list = |key: &str| -> Result<Vec<f64>> { get(key)?.split(',').map(|x| num(key, x)).collect() };
    let names = |key: &str| -> Result<Vec<String>> {
        let v = get(key)?;
        Ok(if v.is_empty() { Vec::new() } else { v.split(',').map(str::to_string).collect() })
    };

    let model_config = ModelConfig {
        n_variates: num("model.n_variates", get("model.n_variates")?)?,
        lookback: num("model.lookback", get("model.lookback")?)?,
        horizon: num("model.horizon", get("model.horizon")?)?,
        width: num("model.width", get("model.width")?)?,
        ratios: get("model.ratios")?
            .split(',')
            .map(|r| r.parse::<ScaleRatio>().map_err(|e| corrupt(e.to_string())))
            .collect::<Result<_>>()?,
        heads: num("model.heads", get("model.heads")?)?,
        mode: get("model.mode")?.parse::<AttentionMode>().map_err(|e| corrupt(e.to_string()))?,
        eps: num("model.eps", get("model.eps")?)?,
        instance_norm: num("model.instance_norm", get("model.instance_norm")?)?,
    };
    model_config.validate().map_err(|e| corrupt(e.to_string()))?;
    let stats = NormStats {
        names: names("norm.names")?,
        mean: list("norm.mean")?,
        std: list("norm.std")?,
        flagged: names("norm.flagged")?,
    };
    if stats.names.len() != model_config.n_variates || stats.mean.len() != stats.names.len() || stats.std.len() != stats.names.len() {
        return Err(corrupt("normalization statistics do not match the channel count"));
    }
    let meta = entries
        .into_iter()
        .filter(|(k, _)| !k.starts_with("model.") && !k.starts_with("norm."))
        .collect();
    Ok((model_config, stats, meta))
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> (TSTransformer<f64>, Checkpoint) {
        let model = TSTransformer::new(ModelConfig::new(3, 16, 2, 8), 4).unwrap();
        let stats = NormStats {
            names: vec!["Utot_V".into(), "I_A".into(), "k".into()],
            mean: vec![3.3, 70.0, 1.0],
            std: vec![0.01, 0.5, 1.0],
            flagged: vec!["k".into()],
        };
        let ck = Checkpoint::from_model(&model, stats, vec![("train.seed".into(), "7".into())]);
        (model, ck)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tstc");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("train.seed"), Some("7"));
        let restored: TSTransformer<f64> = back.model().unwrap();
        let x = Tensor::new(vec![16, 3], (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (a, b) = (model.forward(&x).unwrap(), restored.forward(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn layout_prefix() {
        let (model, ck) = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TSTC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + h + 8 * model.param_count());
    }

    #[test]
    fn corruption_is_detected() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes().unwrap();
        let msg = |b: &[u8]| Checkpoint::from_bytes(b).unwrap_err().to_string();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(msg(&bad).contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(msg(&bad).contains("version"));
        assert!(msg(&bytes[..bytes.len() - 8]).contains("scalar count"));
        assert!(msg(&bytes[..bytes.len() - 3]).contains("whole number"));
        assert!(msg(&bytes[..20]).contains("truncated"));

        // widen the model in the header without touching the payload
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut patched = bytes[..12].to_vec();
        let header = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap().replace("model.width=8", "model.width=9");
        patched.extend_from_slice(header.as_bytes());
        patched.extend_from_slice(&bytes[12 + header_len..]);
        assert!(msg(&patched).contains("scalar count mismatch"));
    }
}
