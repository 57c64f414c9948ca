//! Run configuration: one JSON document capturing a full experiment.
//!
//! Every section falls back to its defaults, unknown keys are rejected at
//! any depth, and [`RunConfig::resolve`] materializes the derived values
//! (today: the schedule length) so the written copy replays the run
//! exactly. A `schedule.total_steps` of `0` means "derive from the corpus
//! and epoch count"; any other value must already agree with them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{TaskKind, Vocab};
use crate::data::TaskSpec;
use crate::error::Error;
use crate::loss::LossSpec;
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, ScheduleConfig};
use crate::train::TrainerConfig;
use crate::Result;

/// File name of the resolved copy written next to run outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// Full experiment description as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "schedule_section")]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainerConfig,
    /// Default output directory; a command-line `--out` wins over it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// In a config file the schedule length defaults to "derive it".
fn schedule_section() -> ScheduleConfig {
    ScheduleConfig { total_steps: 0, ..ScheduleConfig::default() }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossSpec::default(),
            optimizer: AdamWConfig::default(),
            schedule: schedule_section(),
            task: TaskSpec::default(),
            train: TrainerConfig::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Reads and parses a config file; errors name the path.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::from_json(&text, &path.display().to_string())
    }

    /// Parses config JSON; `origin` names the source in error messages.
    pub fn from_json(text: &str, origin: &str) -> Result<RunConfig> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config {origin}: {e}")))
    }

    /// Pretty-printed JSON with a trailing newline, for writing back out.
    pub fn to_json(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(self).expect("config serialization cannot fail");
        text.push('\n');
        text
    }

    /// The vocabulary the configured task runs over.
    pub fn vocab(&self) -> Vocab {
        Vocab::default_task()
    }

    /// Training steps per epoch with partial batches dropped.
    pub fn steps_per_epoch(&self) -> u64 {
        (self.task.train_size / self.train.batch_size) as u64
    }

    /// Token length of the longest example either split can produce.
    fn worst_example_len(&self) -> usize {
        let digits = |x: u64| x.to_string().len();
        match self.task.kind {
            TaskKind::AddMod => {
                let operand = digits(self.task.operand_max.max(self.task.ood_operand_max));
                let answer = digits(self.task.modulus.saturating_sub(1));
                // BOS "{a}+{b}=" then "{answer}" EOS.
                1 + 2 * operand + 2 + answer + 1
            }
            TaskKind::Copy | TaskKind::Reverse => {
                let len = self.task.max_len.max(self.task.ood_max_len);
                // BOS "{s}|" then the response of equal length, EOS.
                1 + len + 1 + len + 1
            }
        }
    }

    /// Validates every section and the cross-section constraints, and
    /// returns a copy with all derived values filled in. Resolving a
    /// resolved config is the identity.
    pub fn resolve(&self) -> Result<RunConfig> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.task.validate()?;
        self.train.validate()?;

        let vocab_size = self.vocab().size();
        if self.model.vocab_size < vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} is smaller than the task vocabulary of {vocab_size} symbols",
                self.model.vocab_size
            )));
        }
        let worst = self.worst_example_len();
        if worst > self.model.context_len {
            return Err(Error::Config(format!(
                "model.context_len {} cannot hold the longest task example of {worst} tokens",
                self.model.context_len
            )));
        }
        if self.task.train_size < self.train.batch_size {
            return Err(Error::Config(format!(
                "task.train_size {} cannot fill train.batch_size {}",
                self.task.train_size, self.train.batch_size
            )));
        }

        let total = self.train.epochs * self.steps_per_epoch();
        let mut resolved = self.clone();
        if resolved.schedule.total_steps == 0 {
            resolved.schedule.total_steps = total;
        } else if resolved.schedule.total_steps != total {
            return Err(Error::Config(format!(
                "schedule.total_steps is {} but {} epochs of {} steps require {total}; \
                 set it to {total} or 0 to derive it",
                resolved.schedule.total_steps,
                self.train.epochs,
                self.steps_per_epoch()
            )));
        }
        resolved.schedule.validate()?;
        Ok(resolved)
    }

    /// Writes the resolved copy into `dir` as [`RESOLVED_CONFIG_FILE`].
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json()).map_err(|e| {
            Error::Config(format!("cannot write resolved config {}: {e}", path.display()))
        })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Objective;

    #[test]
    fn default_config_resolves_and_derives_schedule() {
        let resolved = RunConfig::default().resolve().unwrap();
        // 2000 examples / 64 per batch = 31 steps, times 2 epochs.
        assert_eq!(resolved.schedule.total_steps, 62);
        // Resolving again is the identity.
        assert_eq!(resolved.resolve().unwrap(), resolved);
    }

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_json("{}", "inline").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.loss.objective, Objective::Sft);
        assert_eq!(cfg.schedule.total_steps, 0);
    }

    #[test]
    fn unknown_keys_are_rejected_at_both_depths() {
        let top = RunConfig::from_json(r#"{"modle": {}}"#, "inline").unwrap_err();
        assert!(top.to_string().contains("modle"), "{top}");
        let nested =
            RunConfig::from_json(r#"{"loss": {"kapa": 2.0}}"#, "inline").unwrap_err();
        assert!(nested.to_string().contains("kapa"), "{nested}");
    }

    #[test]
    fn explicit_schedule_length_must_match() {
        let mut cfg = RunConfig::default();
        cfg.schedule.total_steps = 10;
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("62"), "{err}");
        cfg.schedule.total_steps = 62;
        assert_eq!(cfg.resolve().unwrap().schedule.total_steps, 62);
    }

    #[test]
    fn cross_section_checks_name_the_fields() {
        let mut cfg = RunConfig::default();
        cfg.model.vocab_size = 8;
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("model.vocab_size"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.model.context_len = 4;
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("model.context_len"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.task.train_size = 10;
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("train.batch_size"), "{err}");
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let mut cfg = RunConfig::default();
        cfg.loss.objective = Objective::Otr;
        cfg.loss.beta = 0.01;
        cfg.train.seed = 99;
        cfg.out_dir = Some(PathBuf::from("/tmp/run"));
        let back = RunConfig::from_json(&cfg.to_json(), "inline").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = RunConfig::load(Path::new("/no/such/config.json")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("/no/such/config.json"), "{err}");
    }

    #[test]
    fn resolved_copy_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let resolved = RunConfig::default().resolve().unwrap();
        let path = resolved.write_resolved(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), RESOLVED_CONFIG_FILE);
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, resolved);
        assert_eq!(back.resolve().unwrap(), resolved);
    }

    #[test]
    fn worst_case_lengths_cover_both_task_families() {
        // add_mod: OOD operands up to 999 -> "999+999=" is 8 symbols, the
        // answer at most 2 digits, plus BOS and EOS.
        let cfg = RunConfig::default();
        assert_eq!(cfg.worst_example_len(), 1 + 8 + 2 + 1);

        let mut copy = RunConfig::default();
        copy.task.kind = TaskKind::Copy;
        // OOD strings up to 10 letters: BOS + "aaaaaaaaaa|" + response + EOS.
        assert_eq!(copy.worst_example_len(), 1 + 11 + 10 + 1);
    }
}
