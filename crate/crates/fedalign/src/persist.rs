//! On-disk formats: binary model snapshots, JSONL metrics, and the
//! resolved config copy written next to each run.
//!
//! Snapshot layout: an 8-byte little-endian header length, a JSON header
//! carrying the model dimensions and the named parameter layout, then the
//! flat parameter values as little-endian f64s.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::federation::RoundMetrics;
use crate::nn::{flatten, init_model, load, ModelDims, ParamVector, Segment, TwoTowerModel};
use crate::{Error, Result};

const MAGIC: &str = "fedalign-model-v1";

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    magic: String,
    dims: ModelDims,
    layout: Vec<Segment>,
    n_values: usize,
}

pub fn save_model(path: &Path, model: &TwoTowerModel) -> Result<()> {
    let params = flatten(model);
    let header = SnapshotHeader {
        magic: MAGIC.to_string(),
        dims: model.dims,
        layout: params.layout.clone(),
        n_values: params.values.len(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TwoTowerModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 24 {
        return Err(Error::invalid("model snapshot header implausibly large"));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: SnapshotHeader = serde_json::from_slice(&header_bytes)?;
    if header.magic != MAGIC {
        return Err(Error::invalid(format!(
            "not a model snapshot (magic {:?})",
            header.magic
        )));
    }
    let mut values = Vec::with_capacity(header.n_values);
    let mut buf = [0u8; 8];
    for _ in 0..header.n_values {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    // trailing bytes mean a corrupt or mismatched file
    if r.read(&mut buf)? != 0 {
        return Err(Error::invalid("model snapshot has trailing bytes"));
    }
    let mut model = init_model(header.dims, 0)?;
    let params = ParamVector {
        values,
        layout: header.layout,
    };
    load(&mut model, &params)?;
    Ok(model)
}

/// One JSON object per line, in round order.
pub fn write_metrics_jsonl(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<RoundMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// The fully resolved config, so a run directory is self-describing.
pub fn write_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, cfg)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelDims;

    fn dims() -> ModelDims {
        ModelDims {
            x_dim: 4,
            y_dim: 3,
            hidden_dim: 5,
            embed_dim: 2,
            encoder_layers: 2,
            aligner_layers: 1,
        }
    }

    #[test]
    fn model_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = init_model(dims(), 77).unwrap();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
        assert_eq!(flatten(&model).values, flatten(&back).values);
    }

    #[test]
    fn corrupt_snapshot_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = init_model(dims(), 1).unwrap();
        save_model(&path, &model).unwrap();
        // truncate the value section
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_model(&path).is_err());
        // garbage file
        std::fs::write(&path, b"not a snapshot").unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn metrics_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let m = RoundMetrics {
            round: 3,
            client_losses: vec![0.5, 0.25],
            weights: vec![0.6, 0.4],
            stage1_loss_mean: 1.5,
            stage2_loss_mean: 0.75,
            recall_at_1: vec![0.1, 0.2],
            recall_at_5: vec![0.5, 0.6],
            mean_recall_at_1: 0.15,
            worst_recall_at_1: 0.1,
            mean_recall_at_5: 0.55,
            worst_recall_at_5: 0.5,
            pair_similarity: vec![0.3, 0.4],
        };
        write_metrics_jsonl(&path, &[m.clone(), m.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = read_metrics_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].round, 3);
        assert_eq!(back[1].weights, vec![0.6, 0.4]);
        // byte-identical rewrite
        let path2 = dir.path().join("metrics2.jsonl");
        write_metrics_jsonl(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn config_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = ExperimentConfig::default();
        write_config(&path, &cfg).unwrap();
        let back = ExperimentConfig::from_json_file(&path).unwrap();
        assert_eq!(cfg, back);
    }
}
