//! On-disk formats: JSON checkpoints and training states, a binary patch-set
//! format, loss CSVs and image lists.
//!
//! Every JSON document carries `format` and `version` fields; readers reject
//! files whose version they do not know.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::imaging::PatchPairSet;
use crate::linops::CirculantOp;
use crate::pdnet::{FeatureDesign, LayerParams, NetworkParams};
use crate::trainer::{OptimizerState, TrainConfig, TrainState};

pub const CHECKPOINT_FORMAT: &str = "pdnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TRAIN_STATE_FORMAT: &str = "pdnet-train-state";
pub const TRAIN_STATE_VERSION: u32 = 1;
pub const PATCH_MAGIC: &[u8; 8] = b"PDPATCH1";
pub const PATCH_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    tau: f64,
    sigma: f64,
    rows: usize,
    cols: usize,
    /// Row-major.
    l: Vec<f64>,
    /// `L` is restricted to the design support.
    masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    design: String,
    patch_side: usize,
    /// Degradation kernel, row-major rows.
    kernel: Vec<Vec<f64>>,
    layers: Vec<LayerRecord>,
    #[serde(default)]
    metadata: Value,
}

impl CheckpointFile {
    fn from_net(net: &NetworkParams, metadata: Value) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerRecord {
                tau: l.tau,
                sigma: l.sigma,
                rows: l.rows(),
                cols: l.cols(),
                l: l.l.iter().copied().collect(),
                masked: l.mask.is_some(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            design: net.design.to_string(),
            patch_side: net.patch_side(),
            kernel: net.op.kernel().rows().into_iter().map(|r| r.to_vec()).collect(),
            layers,
            metadata,
        }
    }

    fn into_net(self) -> Result<(NetworkParams, Value)> {
        let bad = |reason: String| Error::Format {
            what: "checkpoint",
            reason,
        };
        let design = FeatureDesign::parse(&self.design, self.patch_side)?;
        let kh = self.kernel.len();
        let kw = self.kernel.first().map_or(0, Vec::len);
        if kh == 0 || self.kernel.iter().any(|r| r.len() != kw) {
            return Err(bad("kernel rows are empty or ragged".into()));
        }
        let kernel = Array2::from_shape_vec((kh, kw), self.kernel.concat()).expect("shape checked");
        let op = CirculantOp::new(kernel, (self.patch_side, self.patch_side))?;
        let support = design.support_mask();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, rec) in self.layers.into_iter().enumerate() {
            let l = Array2::from_shape_vec((rec.rows, rec.cols), rec.l).map_err(|e| bad(format!("layer {k}: {e}")))?;
            let mut layer = LayerParams::new(rec.tau, rec.sigma, l);
            if rec.masked {
                if support.dim() != layer.l.dim() {
                    return Err(bad(format!("layer {k}: operator shape does not match the design")));
                }
                if layer.l.iter().zip(&support).any(|(&v, &m)| !m && v != 0.0) {
                    return Err(bad(format!("layer {k}: nonzero entries outside the support")));
                }
                layer = layer.with_mask(support.clone());
            }
            layers.push(layer);
        }
        Ok((NetworkParams::new(layers, op, design)?, self.metadata))
    }
}

/// Reads `format` and `version` before the body so an unknown version is
/// reported as such rather than as a missing field.
fn check_header(value: &Value, format: &str, what: &'static str, expected: u32) -> Result<()> {
    let found_format = value.get("format").and_then(Value::as_str);
    if found_format != Some(format) {
        return Err(Error::Format {
            what,
            reason: format!("expected format `{format}`, found {found_format:?}"),
        });
    }
    let version = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format {
            what,
            reason: "missing `version`".into(),
        })?;
    if version != u64::from(expected) {
        return Err(Error::Version {
            what,
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected,
        });
    }
    Ok(())
}

pub fn checkpoint_to_json(net: &NetworkParams, metadata: Value) -> String {
    serde_json::to_string_pretty(&CheckpointFile::from_net(net, metadata)).expect("checkpoint serialises")
}

pub fn checkpoint_from_json(text: &str) -> Result<(NetworkParams, Value)> {
    let value: Value = serde_json::from_str(text)?;
    check_header(&value, CHECKPOINT_FORMAT, "checkpoint", CHECKPOINT_VERSION)?;
    let file: CheckpointFile = serde_json::from_value(value)?;
    file.into_net()
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &NetworkParams, metadata: Value) -> Result<()> {
    write_text(path, &checkpoint_to_json(net, metadata))
}

/// Returns the network and its metadata.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkParams, Value)> {
    checkpoint_from_json(&read_text(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainStateFile {
    format: String,
    version: u32,
    config: TrainConfig,
    checkpoint: CheckpointFile,
    step: usize,
    optimizer: OptimizerState,
    loss_history: Vec<f64>,
}

pub fn train_state_to_json(state: &TrainState) -> String {
    let file = TrainStateFile {
        format: TRAIN_STATE_FORMAT.into(),
        version: TRAIN_STATE_VERSION,
        config: state.config.clone(),
        checkpoint: CheckpointFile::from_net(&state.net, Value::Null),
        step: state.step,
        optimizer: state.optimizer.clone(),
        loss_history: state.loss_history.clone(),
    };
    serde_json::to_string(&file).expect("train state serialises")
}

pub fn train_state_from_json(text: &str) -> Result<TrainState> {
    let value: Value = serde_json::from_str(text)?;
    check_header(&value, TRAIN_STATE_FORMAT, "train state", TRAIN_STATE_VERSION)?;
    let file: TrainStateFile = serde_json::from_value(value)?;
    let (net, _) = file.checkpoint.into_net()?;
    Ok(TrainState {
        config: file.config,
        net,
        step: file.step,
        optimizer: file.optimizer,
        loss_history: file.loss_history,
    })
}

pub fn save_train_state(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    write_text(path, &train_state_to_json(state))
}

pub fn load_train_state(path: impl AsRef<Path>) -> Result<TrainState> {
    train_state_from_json(&read_text(path)?)
}

/// Binary layout, little endian: magic, `u32` version, `u32` side, `u64`
/// count, `u32` source length and UTF-8 source, then per pair the clean and
/// degraded patches as `f64`.
pub fn write_patch_set(path: impl AsRef<Path>, set: &PatchPairSet) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(PATCH_MAGIC)?;
    put(&PATCH_VERSION.to_le_bytes())?;
    put(&(set.patch_side as u32).to_le_bytes())?;
    put(&(set.len() as u64).to_le_bytes())?;
    put(&(set.source.len() as u32).to_le_bytes())?;
    put(set.source.as_bytes())?;
    for (c, d) in set.clean.iter().zip(&set.degraded) {
        for v in c.iter().chain(d.iter()) {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_patch_set(path: impl AsRef<Path>) -> Result<PatchPairSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                what: "patch set",
                reason: "truncated file".into(),
            }
        } else {
            Error::io(path, e)
        }
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != PATCH_MAGIC {
        return Err(Error::Format {
            what: "patch set",
            reason: "bad magic".into(),
        });
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(truncated)?;
    let version = u32::from_le_bytes(b4);
    if version != PATCH_VERSION {
        return Err(Error::Version {
            what: "patch set",
            found: version,
            expected: PATCH_VERSION,
        });
    }
    r.read_exact(&mut b4).map_err(truncated)?;
    let side = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8).map_err(truncated)?;
    let count = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4).map_err(truncated)?;
    let mut source = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut source).map_err(truncated)?;
    let source = String::from_utf8(source).map_err(|e| Error::Format {
        what: "patch set",
        reason: e.to_string(),
    })?;

    let n = side * side;
    let mut set = PatchPairSet::new(side, source);
    let mut read_patch = |r: &mut BufReader<fs::File>| -> Result<Array1<f64>> {
        let mut out = Array1::zeros(n);
        for v in out.iter_mut() {
            r.read_exact(&mut b8).map_err(truncated)?;
            *v = f64::from_le_bytes(b8);
        }
        Ok(out)
    };
    for _ in 0..count {
        let clean = read_patch(&mut r)?;
        let degraded = read_patch(&mut r)?;
        set.push(clean, degraded)?;
    }
    if r.read(&mut b8).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format {
            what: "patch set",
            reason: "trailing bytes".into(),
        });
    }
    Ok(set)
}

/// `step,loss` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, curve: &[(usize, f64)]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (s, l) in curve {
        text.push_str(&format!("{s},{l}\n"));
    }
    write_text(path, &text)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    TrainConfig::from_toml(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Paths listed one per line, relative to the list file. Blank lines and
/// `#` comments are skipped.
pub fn read_image_list(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

/// `.pgm` and `.png` files in `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::init_network;

    fn small_net() -> NetworkParams {
        let cfg = TrainConfig {
            layers: 2,
            feature_design: "f3s2n2+f5s5n1".into(),
            patch_side: 5,
            ..TrainConfig::default()
        };
        let op = CirculantOp::uniform(3, (5, 5)).unwrap();
        init_network(&cfg, &cfg.design().unwrap(), &op).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = small_net();
        let json = checkpoint_to_json(&net, serde_json::json!({"note": 1}));
        let (back, meta) = checkpoint_from_json(&json).unwrap();
        assert_eq!(back.layers, net.layers);
        assert_eq!(back.op.kernel(), net.op.kernel());
        assert_eq!(meta["note"], 1);
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let json = checkpoint_to_json(&small_net(), Value::Null);
        let mut v: Value = serde_json::from_str(&json).unwrap();
        v["version"] = 99.into();
        let err = checkpoint_from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 99, .. }));
        v.as_object_mut().unwrap().remove("version");
        assert!(matches!(
            checkpoint_from_json(&v.to_string()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn off_support_entries_are_rejected() {
        let mut net = small_net();
        let (r, c) = net.layers[0]
            .mask
            .as_ref()
            .unwrap()
            .indexed_iter()
            .find(|(_, &m)| !m)
            .unwrap()
            .0;
        net.layers[0].l[[r, c]] = 1.0;
        assert!(checkpoint_from_json(&checkpoint_to_json(&net, Value::Null)).is_err());
    }

    #[test]
    fn patch_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut set = PatchPairSet::new(2, "unit");
        set.push(
            Array1::from(vec![1.0, 2.0, 3.0, 4.5]),
            Array1::from(vec![-0.1, 0.2, 1e300, 0.0]),
        )
        .unwrap();
        write_patch_set(&path, &set).unwrap();
        assert_eq!(read_patch_set(&path).unwrap(), set);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_patch_set(&path), Err(Error::Format { .. })));
    }
}
