//! Checkpoint directories: every parameter and batch-norm buffer as an RDT1
//! tensor, plus the experiment config text and a digest file that pins the
//! config, the network wiring, the dataset and the precision.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{digest_hex, load_tensor, save_tensor};
use crate::net::Network;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor4;

/// Metadata stored next to the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config_text: String,
    pub config_digest: String,
    pub network_digest: String,
    pub dataset_digest: String,
    pub precision: Precision,
}

pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    net: &Network<T>,
    config_text: &str,
    dataset_digest: &str,
    precision: Precision,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("params")).map_err(|e| Error::io(dir, e))?;
    std::fs::create_dir_all(dir.join("buffers")).map_err(|e| Error::io(dir, e))?;

    let mut failure: Option<Error> = None;
    net.visit_params(&mut |p| {
        if failure.is_some() {
            return;
        }
        let t = Tensor4::from_vec(p.shape, p.value.to_vec()).expect("param shape is consistent");
        if let Err(e) = save_tensor(&t, dir.join("params").join(format!("{}.rdt", p.name))) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut failure: Option<Error> = None;
    net.visit_buffers(&mut |name, value| {
        if failure.is_some() {
            return;
        }
        let t = Tensor4::from_vec((1, 1, 1, value.len()), value.to_vec()).expect("buffer length > 0");
        if let Err(e) = save_tensor(&t, dir.join("buffers").join(format!("{name}.rdt"))) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let config_path = dir.join("config.txt");
    std::fs::write(&config_path, config_text).map_err(|e| Error::io(&config_path, e))?;

    let digest = format!(
        "config={}\nnetwork={}\ndataset={}\nprecision={}\n",
        digest_hex(config_text.as_bytes()),
        digest_hex(net.config.digest_text().as_bytes()),
        dataset_digest,
        precision,
    );
    let digest_path = dir.join("digest.txt");
    std::fs::write(&digest_path, digest).map_err(|e| Error::io(&digest_path, e))
}

/// Reads the metadata and validates that `config.txt` still matches its
/// recorded digest.
pub fn read_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let dir = dir.as_ref();
    let config_path = dir.join("config.txt");
    let config_text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let digest_path = dir.join("digest.txt");
    let digest_text = std::fs::read_to_string(&digest_path).map_err(|e| Error::io(&digest_path, e))?;

    let mut config_digest = None;
    let mut network_digest = None;
    let mut dataset_digest = None;
    let mut precision = None;
    for line in digest_text.lines() {
        if let Some((key, value)) = line.split_once('=') {
            match key {
                "config" => config_digest = Some(value.to_string()),
                "network" => network_digest = Some(value.to_string()),
                "dataset" => dataset_digest = Some(value.to_string()),
                "precision" => precision = Precision::parse(value),
                _ => {}
            }
        }
    }
    let (config_digest, network_digest, dataset_digest, precision) =
        match (config_digest, network_digest, dataset_digest, precision) {
            (Some(c), Some(n), Some(d), Some(p)) => (c, n, d, p),
            _ => return Err(Error::format(&digest_path, "incomplete digest file")),
        };

    if digest_hex(config_text.as_bytes()) != config_digest {
        return Err(Error::Config(format!(
            "checkpoint config digest mismatch in {}: config.txt was modified",
            dir.display()
        )));
    }
    Ok(CheckpointMeta { config_text, config_digest, network_digest, dataset_digest, precision })
}

/// Loads every parameter and buffer into an already-built network, verifying
/// that the network wiring matches the recorded digest.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>, net: &mut Network<T>) -> Result<()> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let expect = digest_hex(net.config.digest_text().as_bytes());
    if meta.network_digest != expect {
        return Err(Error::Config(format!(
            "checkpoint network digest mismatch in {}: checkpoint {}, config {}",
            dir.display(),
            meta.network_digest,
            expect
        )));
    }

    let mut names = Vec::new();
    net.visit_params(&mut |p| names.push(p.name.clone()));
    let mut loaded: std::collections::HashMap<String, Vec<T>> = std::collections::HashMap::new();
    for name in &names {
        let t: Tensor4<T> = load_tensor(dir.join("params").join(format!("{name}.rdt")))?;
        loaded.insert(name.clone(), t.into_vec());
    }
    let mut failure: Option<String> = None;
    net.visit_params_update(&mut |name, value, _| {
        let v = &loaded[name];
        if v.len() != value.len() {
            failure = Some(format!("parameter {name} has {} values, expected {}", v.len(), value.len()));
        } else {
            value.copy_from_slice(v);
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Config(msg));
    }

    let mut buffer_names = Vec::new();
    net.visit_buffers(&mut |name, _| buffer_names.push(name.to_string()));
    let mut loaded: std::collections::HashMap<String, Vec<T>> = std::collections::HashMap::new();
    for name in &buffer_names {
        let t: Tensor4<T> = load_tensor(dir.join("buffers").join(format!("{name}.rdt")))?;
        loaded.insert(name.clone(), t.into_vec());
    }
    let mut failure: Option<String> = None;
    net.visit_buffers_mut(&mut |name, value| {
        let v = &loaded[name];
        if v.len() != value.len() {
            failure = Some(format!("buffer {name} has {} values, expected {}", v.len(), value.len()));
        } else {
            value.copy_from_slice(v);
        }
    });
    match failure {
        Some(msg) => Err(Error::Config(msg)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, NetworkConfig};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("rdt-ckpt-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_restores_params_and_buffers() {
        let dir = tmpdir("rt");
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let mut net = build_network::<f32>(&config, 77).unwrap();
        // perturb away from init so the load is observable
        net.visit_params_update(&mut |_, value, _| value.iter_mut().for_each(|v| *v += 0.125));
        net.visit_buffers_mut(&mut |_, value| value.iter_mut().for_each(|v| *v += 0.5));
        save_checkpoint(&dir, &net, "k = v\n", "deadbeef", Precision::Compact).unwrap();

        let mut fresh = build_network::<f32>(&config, 1).unwrap();
        load_checkpoint(&dir, &mut fresh).unwrap();
        let mut a = Vec::new();
        net.visit_params(&mut |p| a.extend_from_slice(p.value));
        let mut b = Vec::new();
        fresh.visit_params(&mut |p| b.extend_from_slice(p.value));
        assert_eq!(a, b);

        let meta = read_meta(&dir).unwrap();
        assert_eq!(meta.dataset_digest, "deadbeef");
        assert_eq!(meta.precision, Precision::Compact);
        assert_eq!(meta.config_text, "k = v\n");
    }

    #[test]
    fn edited_config_text_is_rejected() {
        let dir = tmpdir("edit");
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, false).unwrap();
        let net = build_network::<f32>(&config, 7).unwrap();
        save_checkpoint(&dir, &net, "a = 1\n", "d", Precision::Compact).unwrap();
        std::fs::write(dir.join("config.txt"), "a = 2\n").unwrap();
        match read_meta(&dir) {
            Err(Error::Config(msg)) => assert!(msg.contains("digest"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_network_wiring_is_rejected() {
        let dir = tmpdir("wiring");
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let net = build_network::<f32>(&config, 7).unwrap();
        save_checkpoint(&dir, &net, "a = 1\n", "d", Precision::Compact).unwrap();

        let other = NetworkConfig::toy(1.0 / 16.0, 8, false, true).unwrap();
        let mut fresh = build_network::<f32>(&other, 7).unwrap();
        match load_checkpoint(&dir, &mut fresh) {
            Err(Error::Config(msg)) => assert!(msg.contains("network digest"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
