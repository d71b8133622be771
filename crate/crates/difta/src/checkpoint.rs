//! Versioned checkpoint container shared by the two trainers.
//!
//! Layout: a magic line, one JSON header line (architecture and
//! schedule hyperparameters, training step, seed, payload length, and a
//! SHA-256 checksum), then the parameter tensors as little-endian f32
//! in each network's declared order.

use std::fs;
use std::path::Path;

use difta_core::classifier::ClassifierNet;
use difta_core::denoiser::EpsilonNet;
use difta_core::diffusion::NoiseSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

const MAGIC: &[u8] = b"DIFTA-CKPT v1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub img_channels: usize,
    pub base_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    pub train_step: u64,
    pub seed: u64,
    pub param_count: usize,
    pub payload_bytes: usize,
    pub sha256: String,
}

fn payload_from_params(params: &[&[f64]]) -> Vec<u8> {
    let count: usize = params.iter().map(|p| p.len()).sum();
    let mut bytes = Vec::with_capacity(count * 4);
    for p in params {
        for &v in *p {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn params_from_payload(payload: &[u8], params: Vec<&mut [f64]>) -> Result<(), CliError> {
    let count: usize = params.iter().map(|p| p.len()).sum();
    if payload.len() != count * 4 {
        return Err(CliError::Data(format!(
            "checkpoint payload holds {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    let mut offset = 0;
    for p in params {
        for v in p.iter_mut() {
            let raw: [u8; 4] = payload[offset..offset + 4].try_into().expect("sized chunk");
            *v = f64::from(f32::from_le_bytes(raw));
            offset += 4;
        }
    }
    Ok(())
}

fn write(path: &Path, header: &CheckpointHeader, payload: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    let mut out = Vec::with_capacity(MAGIC.len() + payload.len() + 512);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(
        serde_json::to_string(header)
            .map_err(|e| CliError::Internal(format!("header encode: {e}")))?
            .as_bytes(),
    );
    out.push(b'\n');
    out.extend_from_slice(payload);
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<(CheckpointHeader, Vec<u8>), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if !bytes.starts_with(MAGIC) {
        return Err(CliError::Data(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let rest = &bytes[MAGIC.len()..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::Data(format!("{}: truncated header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..newline])
        .map_err(|e| CliError::Data(format!("{}: header: {e}", path.display())))?;
    let payload = rest[newline + 1..].to_vec();
    if payload.len() != header.payload_bytes {
        return Err(CliError::Data(format!(
            "{}: payload length {} does not match header {}",
            path.display(),
            payload.len(),
            header.payload_bytes
        )));
    }
    let digest = hex(&Sha256::digest(&payload));
    if digest != header.sha256 {
        return Err(CliError::Data(format!(
            "{}: checksum mismatch (payload corrupted)",
            path.display()
        )));
    }
    Ok((header, payload))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build the header + payload for a denoiser and write them.
pub fn save_diffusion(
    net: &EpsilonNet,
    sched: &NoiseSchedule,
    beta_start: f64,
    beta_end: f64,
    train_step: u64,
    seed: u64,
    path: &Path,
) -> Result<(), CliError> {
    let params = net.params();
    let payload = payload_from_params(&params);
    let header = CheckpointHeader {
        kind: "diffusion".into(),
        img_channels: net.img_channels,
        base_width: net.base_width,
        classes: None,
        input_height: None,
        input_width: None,
        timesteps: Some(sched.len()),
        beta_start: Some(beta_start),
        beta_end: Some(beta_end),
        train_step,
        seed,
        param_count: params.iter().map(|p| p.len()).sum(),
        payload_bytes: payload.len(),
        sha256: hex(&Sha256::digest(&payload)),
    };
    write(path, &header, &payload)
}

/// Load a denoiser checkpoint, rebuilding its schedule from the header.
pub fn load_diffusion(path: &Path) -> Result<(EpsilonNet, NoiseSchedule, CheckpointHeader), CliError> {
    let (header, payload) = read(path)?;
    if header.kind != "diffusion" {
        return Err(CliError::Data(format!(
            "{}: checkpoint kind '{}' is not a diffusion model",
            path.display(),
            header.kind
        )));
    }
    let (t, b0, b1) = match (header.timesteps, header.beta_start, header.beta_end) {
        (Some(t), Some(b0), Some(b1)) => (t, b0, b1),
        _ => {
            return Err(CliError::Data(format!(
                "{}: diffusion checkpoint missing schedule fields",
                path.display()
            )))
        }
    };
    let mut net = EpsilonNet::new(header.img_channels, header.base_width, 0);
    params_from_payload(&payload, net.params_mut())?;
    let sched = NoiseSchedule::linear(t, b0, b1).map_err(|e| CliError::Data(e.to_string()))?;
    Ok((net, sched, header))
}

/// Build the header + payload for a classifier and write them.
pub fn save_classifier(
    net: &ClassifierNet,
    train_step: u64,
    seed: u64,
    path: &Path,
) -> Result<(), CliError> {
    let params = net.params();
    let payload = payload_from_params(&params);
    let header = CheckpointHeader {
        kind: "classifier".into(),
        img_channels: net.img_channels,
        base_width: net.base_width,
        classes: Some(net.classes),
        input_height: Some(net.input_height),
        input_width: Some(net.input_width),
        timesteps: None,
        beta_start: None,
        beta_end: None,
        train_step,
        seed,
        param_count: params.iter().map(|p| p.len()).sum(),
        payload_bytes: payload.len(),
        sha256: hex(&Sha256::digest(&payload)),
    };
    write(path, &header, &payload)
}

pub fn load_classifier(path: &Path) -> Result<(ClassifierNet, CheckpointHeader), CliError> {
    let (header, payload) = read(path)?;
    if header.kind != "classifier" {
        return Err(CliError::Data(format!(
            "{}: checkpoint kind '{}' is not a classifier",
            path.display(),
            header.kind
        )));
    }
    let (classes, ih, iw) = match (header.classes, header.input_height, header.input_width) {
        (Some(c), Some(h), Some(w)) => (c, h, w),
        _ => {
            return Err(CliError::Data(format!(
                "{}: classifier checkpoint missing shape fields",
                path.display()
            )))
        }
    };
    let mut net = ClassifierNet::new(header.img_channels, ih, iw, header.base_width, classes, 0);
    params_from_payload(&payload, net.params_mut())?;
    Ok((net, header))
}

/// Write a loss history CSV with (step, loss) rows.
pub fn save_loss_history(history: &[f64], path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["step", "loss"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (i, loss) in history.iter().enumerate() {
        w.write_record([(i + 1).to_string(), loss.to_string()])
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn diffusion_round_trip_preserves_f32_precision() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("eps.ckpt");
        let net = EpsilonNet::new(3, 4, 7);
        let sched = NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap();
        save_diffusion(&net, &sched, 1e-4, 2e-2, 123, 9, &p).unwrap();
        let (loaded, sched2, header) = load_diffusion(&p).unwrap();
        assert_eq!(sched2.len(), 50);
        assert_eq!(header.train_step, 123);
        assert_eq!(header.seed, 9);
        assert_eq!(loaded.param_count(), net.param_count());
        for (a, b) in net.params().iter().zip(loaded.params().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn classifier_round_trip() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("cls.ckpt");
        let net = ClassifierNet::new(3, 32, 32, 4, 5, 3);
        save_classifier(&net, 77, 4, &p).unwrap();
        let (loaded, header) = load_classifier(&p).unwrap();
        assert_eq!(loaded.classes, 5);
        assert_eq!((loaded.input_height, loaded.input_width), (32, 32));
        assert_eq!(header.param_count, net.param_count());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("eps.ckpt");
        let net = EpsilonNet::new(1, 2, 1);
        let sched = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        save_diffusion(&net, &sched, 1e-4, 2e-2, 0, 0, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        fs::write(&p, &bytes).unwrap();
        let err = load_diffusion(&p).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn kind_mismatch_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("cls.ckpt");
        let net = ClassifierNet::new(1, 8, 8, 2, 2, 0);
        save_classifier(&net, 0, 0, &p).unwrap();
        assert!(load_diffusion(&p).is_err());
    }
}
