//! Checkpointing: a text manifest plus one binary blob, round-tripping
//! bit-exactly.
//!
//! A checkpoint directory holds two files:
//!
//! * `manifest.txt` — a version line (`otrlab-checkpoint v1`) followed by
//!   one line per tensor: `name shape dtype byte_offset`, where `shape`
//!   is dimensions joined by `x` (a scalar counter is `1`) and `dtype` is
//!   always `f64`.
//! * `params.bin` — the tensors' values as little-endian IEEE-754 64-bit
//!   floats, row-major, concatenated in manifest order.
//!
//! [`save_training_state`] / [`load_training_state`] layer the full
//! resumable picture on top: model parameters under their canonical
//! names, optimizer moments under `opt.m.*` / `opt.v.*`, and the
//! `opt.step`, `trainer.step`, `trainer.epoch`, and `trainer.tokens_seen`
//! counters as single-element tensors.

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamWConfig, AdamWState};
use crate::Result;

const VERSION_LINE: &str = "otrlab-checkpoint v1";
const MANIFEST_FILE: &str = "manifest.txt";
const BLOB_FILE: &str = "params.bin";

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> TensorEntry {
        TensorEntry { name: name.into(), shape, values }
    }

    fn scalar(name: &str, value: f64) -> TensorEntry {
        TensorEntry::new(name, vec![1], vec![value])
    }
}

/// Writes `entries` to `dir` as `manifest.txt` + `params.bin`. The same
/// entries always produce byte-identical files.
pub fn save(dir: &Path, entries: &[TensorEntry]) -> Result<()> {
    let mut manifest = String::from(VERSION_LINE);
    manifest.push('\n');
    let mut blob = Vec::new();
    for e in entries {
        if e.name.is_empty() || e.name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "tensor name {:?} is empty or contains whitespace",
                e.name
            )));
        }
        let count: usize = e.shape.iter().product();
        if e.shape.is_empty() || count != e.values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} declares shape {:?} but holds {} values",
                e.name,
                e.shape,
                e.values.len()
            )));
        }
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} f64 {}\n", e.name, dims.join("x"), blob.len()));
        for v in &e.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::create_dir_all(dir)
        .map_err(|e| Error::Checkpoint(format!("cannot create {}: {e}", dir.display())))?;
    write_file(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    write_file(&dir.join(BLOB_FILE), &blob)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))
}

/// Reads a checkpoint directory back into its tensors, validating the
/// version line, the manifest layout, and the blob length.
pub fn load(dir: &Path) -> Result<Vec<TensorEntry>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", blob_path.display())))?;

    let mut lines = manifest.lines();
    match lines.next() {
        Some(VERSION_LINE) => {}
        Some(other) => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {other:?} (expected {VERSION_LINE:?})"
            )))
        }
        None => return Err(Error::Checkpoint("empty checkpoint manifest".into())),
    }

    let mut entries = Vec::new();
    let mut expected_offset = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape_s, dtype, offset_s] = fields.as_slice() else {
            return Err(Error::Checkpoint(format!(
                "manifest line {line_no} has {} fields, expected `name shape dtype offset`",
                fields.len()
            )));
        };
        if *dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has unsupported dtype {dtype:?}"
            )));
        }
        let shape: Vec<usize> = shape_s
            .split('x')
            .map(|d| {
                d.parse::<usize>().map_err(|_| {
                    Error::Checkpoint(format!(
                        "tensor {name} has malformed shape {shape_s:?} on line {line_no}"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let offset: usize = offset_s.parse().map_err(|_| {
            Error::Checkpoint(format!(
                "tensor {name} has malformed offset {offset_s:?} on line {line_no}"
            ))
        })?;
        if offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {name} declares offset {offset} but the previous tensors \
                 end at {expected_offset}"
            )));
        }
        let count: usize = shape.iter().product();
        let bytes = count * 8;
        if offset + bytes > blob.len() {
            return Err(Error::Checkpoint(format!(
                "{BLOB_FILE} truncated in tensor {name}: need {bytes} bytes at \
                 offset {offset}, file holds {}",
                blob.len()
            )));
        }
        let values: Vec<f64> = blob[offset..offset + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push(TensorEntry { name: name.to_string(), shape, values });
        expected_offset += bytes;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "{BLOB_FILE} holds {} bytes but the manifest accounts for {expected_offset}",
            blob.len()
        )));
    }
    Ok(entries)
}

/// Everything needed to resume a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub model: Model,
    pub opt: AdamWState,
    pub step: u64,
    pub epoch: u64,
    pub tokens_seen: u64,
}

/// Saves model parameters, optimizer state, and trainer counters to `dir`.
pub fn save_training_state(
    dir: &Path,
    model: &Model,
    opt: &AdamWState,
    step: u64,
    epoch: u64,
    tokens_seen: u64,
) -> Result<()> {
    let mut entries = Vec::new();
    for p in model.parameters() {
        entries.push(TensorEntry::new(p.name.clone(), p.shape.clone(), p.values.clone()));
    }
    for (p, m) in model.parameters().iter().zip(opt.first_moments()) {
        entries.push(TensorEntry::new(format!("opt.m.{}", p.name), p.shape.clone(), m.clone()));
    }
    for (p, v) in model.parameters().iter().zip(opt.second_moments()) {
        entries.push(TensorEntry::new(format!("opt.v.{}", p.name), p.shape.clone(), v.clone()));
    }
    entries.push(TensorEntry::scalar("opt.step", opt.step() as f64));
    entries.push(TensorEntry::scalar("trainer.step", step as f64));
    entries.push(TensorEntry::scalar("trainer.epoch", epoch as f64));
    entries.push(TensorEntry::scalar("trainer.tokens_seen", tokens_seen as f64));
    save(dir, &entries)
}

/// Loads a training checkpoint written by [`save_training_state`],
/// validating every tensor name and shape against the configs.
pub fn load_training_state(
    dir: &Path,
    model_config: &ModelConfig,
    opt_config: &AdamWConfig,
) -> Result<TrainingState> {
    let entries = load(dir)?;
    let mut by_name: std::collections::HashMap<String, TensorEntry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let e = by_name
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor {name}")))?;
        if e.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?} but the configuration expects {:?}",
                e.shape, shape
            )));
        }
        Ok(e.values)
    };

    let mut model = Model::init(model_config)?;
    let mut m = Vec::with_capacity(model.parameters().len());
    let mut v = Vec::with_capacity(model.parameters().len());
    let specs: Vec<(String, Vec<usize>)> = model
        .parameters()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone()))
        .collect();
    for (name, shape) in &specs {
        let values = take(name, shape)?;
        let p = model
            .parameters_mut()
            .iter_mut()
            .find(|p| &p.name == name)
            .expect("canonical parameter");
        p.values = values;
        m.push(take(&format!("opt.m.{name}"), shape)?);
        v.push(take(&format!("opt.v.{name}"), shape)?);
    }
    let opt_step = take_counter(&mut take, "opt.step")?;
    let step = take_counter(&mut take, "trainer.step")?;
    let epoch = take_counter(&mut take, "trainer.epoch")?;
    let tokens_seen = take_counter(&mut take, "trainer.tokens_seen")?;
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds unexpected tensor {name}"
        )));
    }
    let opt = AdamWState::restore(*opt_config, opt_step, m, v)?;
    Ok(TrainingState { model, opt, step, epoch, tokens_seen })
}

fn take_counter(
    take: &mut impl FnMut(&str, &[usize]) -> Result<Vec<f64>>,
    name: &str,
) -> Result<u64> {
    let values = take(name, &[1])?;
    let x = values[0];
    if !x.is_finite() || x < 0.0 || x.fract() != 0.0 {
        return Err(Error::Checkpoint(format!(
            "counter {name} holds {x}, expected a non-negative integer"
        )));
    }
    Ok(x as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    fn entries() -> Vec<TensorEntry> {
        vec![
            TensorEntry::new("alpha", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]),
            TensorEntry::new("beta", vec![3], vec![-2.5, 0.125, 1e300]),
            TensorEntry::scalar("count", 17.0),
        ]
    }

    fn small_model_config() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Bigram,
            vocab_size: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &entries()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in entries().iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.values), bits(&b.values));
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let first = tempfile::tempdir().unwrap();
        let second = tempfile::tempdir().unwrap();
        save(first.path(), &entries()).unwrap();
        let loaded = load(first.path()).unwrap();
        save(second.path(), &loaded).unwrap();
        for file in ["manifest.txt", "params.bin"] {
            let a = fs::read(first.path().join(file)).unwrap();
            let b = fs::read(second.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs");
        }
    }

    #[test]
    fn truncated_blob_names_the_offending_tensor() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &entries()).unwrap();
        let blob_path = dir.path().join("params.bin");
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 20]).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("truncated in tensor"), "got: {err}");
        assert!(err.to_string().contains("count") || err.to_string().contains("beta"));
    }

    #[test]
    fn oversized_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &entries()).unwrap();
        let blob_path = dir.path().join("params.bin");
        let mut blob = fs::read(&blob_path).unwrap();
        blob.extend_from_slice(&[0u8; 8]);
        fs::write(&blob_path, &blob).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("accounts for"), "got: {err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &entries()).unwrap();
        let manifest_path = dir.path().join("manifest.txt");
        let manifest = fs::read_to_string(&manifest_path).unwrap();
        let tampered = manifest.replace("otrlab-checkpoint v1", "otrlab-checkpoint v9");
        fs::write(&manifest_path, tampered).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"), "got: {err}");
    }

    #[test]
    fn malformed_manifest_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path()).unwrap();
        fs::write(
            dir.path().join("manifest.txt"),
            "otrlab-checkpoint v1\nalpha 2x2 f64\n",
        )
        .unwrap();
        fs::write(dir.path().join("params.bin"), [0u8; 32]).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn inconsistent_offsets_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.txt"),
            "otrlab-checkpoint v1\na 1 f64 0\nb 1 f64 16\n",
        )
        .unwrap();
        fs::write(dir.path().join("params.bin"), [0u8; 24]).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("offset 16"), "got: {err}");
    }

    #[test]
    fn shape_value_disagreement_fails_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let bad = vec![TensorEntry::new("a", vec![3], vec![1.0])];
        assert!(save(dir.path(), &bad).is_err());
        let spaced = vec![TensorEntry::new("a b", vec![1], vec![1.0])];
        assert!(save(dir.path(), &spaced).is_err());
    }

    #[test]
    fn training_state_round_trips_exactly() {
        let cfg = small_model_config();
        let mut model = Model::init(&cfg).unwrap();
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.values.len()).collect();
        let mut opt = AdamWState::new(AdamWConfig::default(), &sizes).unwrap();
        let grads: Vec<Vec<f64>> =
            sizes.iter().map(|&n| (0..n).map(|i| 0.01 * i as f64 - 0.2).collect()).collect();
        opt.apply(model.parameters_mut(), &grads, 0.05).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_training_state(dir.path(), &model, &opt, 42, 3, 1234).unwrap();
        let state = load_training_state(dir.path(), &cfg, &AdamWConfig::default()).unwrap();

        assert_eq!(state.step, 42);
        assert_eq!(state.epoch, 3);
        assert_eq!(state.tokens_seen, 1234);
        assert_eq!(state.opt.step(), 1);
        assert_eq!(state.model.checksum(), model.checksum());
        for (a, b) in opt.first_moments().iter().zip(state.opt.first_moments()) {
            assert_eq!(a, b);
        }

        // Saving the loaded state reproduces the files byte for byte.
        let again = tempfile::tempdir().unwrap();
        save_training_state(
            again.path(),
            &state.model,
            &state.opt,
            state.step,
            state.epoch,
            state.tokens_seen,
        )
        .unwrap();
        for file in ["manifest.txt", "params.bin"] {
            assert_eq!(
                fs::read(dir.path().join(file)).unwrap(),
                fs::read(again.path().join(file)).unwrap(),
                "{file} differs"
            );
        }
    }

    #[test]
    fn config_mismatch_names_the_bad_tensor() {
        let cfg = small_model_config();
        let model = Model::init(&cfg).unwrap();
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.values.len()).collect();
        let opt = AdamWState::new(AdamWConfig::default(), &sizes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_training_state(dir.path(), &model, &opt, 1, 0, 10).unwrap();

        let bigger = ModelConfig { vocab_size: 9, ..cfg };
        let err = load_training_state(dir.path(), &bigger, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("table"), "got: {err}");
    }

    #[test]
    fn unexpected_tensors_are_rejected() {
        let cfg = small_model_config();
        let model = Model::init(&cfg).unwrap();
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.values.len()).collect();
        let opt = AdamWState::new(AdamWConfig::default(), &sizes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_training_state(dir.path(), &model, &opt, 1, 0, 10).unwrap();

        let mut entries = load(dir.path()).unwrap();
        entries.push(TensorEntry::scalar("mystery", 7.0));
        save(dir.path(), &entries).unwrap();
        let err = load_training_state(dir.path(), &cfg, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("mystery"), "got: {err}");
    }
}
