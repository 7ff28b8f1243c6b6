use std::path::{Path, PathBuf};

use mmlq::model::{parse_kv, ModelConfig};
use mmlq::optim::StepSchedule;
use mmlq::train::TrainConfig;
use mmlq::Error;

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "MMLQ_OUTPUT_DIR";

/// Everything a training or evaluation run needs, settable as flat
/// `key=value` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    pub output_dir: PathBuf,
    pub run_id: String,
    /// Write measured wall time to the metrics CSV (otherwise 0, keeping
    /// reruns byte-identical).
    pub timing: bool,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let model = ModelConfig::preset(name)?;
        let train = match name {
            // Small data and small widths: a larger step and smaller batches
            // so ten epochs are enough to converge.
            "desk" => TrainConfig {
                schedule: StepSchedule { base_lr: 1e-3, ..StepSchedule::default() },
                batch_size: 32,
                shuffle_seed: 0,
                eval_batch_size: 256,
            },
            _ => TrainConfig::default(),
        };
        Ok(RunConfig {
            model,
            train,
            manifest: None,
            train_split: "train".into(),
            test_split: "test".into(),
            output_dir: PathBuf::from("runs"),
            run_id: "run".into(),
            timing: false,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N, CliError> {
            v.parse().map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")).into())
        }
        if key == "preset" {
            *self = Self::preset(value)?;
            return Ok(());
        }
        if self.model.set(key, value)? {
            return Ok(());
        }
        let s = &mut self.train.schedule;
        match key {
            "base_lr" => s.base_lr = num(key, value)?,
            "decay_factor" => s.decay_factor = num(key, value)?,
            "decay_every" => s.decay_every = num(key, value)?,
            "first_decay_epoch" => s.first_decay_epoch = num(key, value)?,
            "epochs" => s.total_epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "eval_batch_size" => self.train.eval_batch_size = num(key, value)?,
            "shuffle_seed" => self.train.shuffle_seed = num(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "train_split" => self.train_split = value.to_string(),
            "test_split" => self.test_split = value.to_string(),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "run_id" => self.run_id = value.to_string(),
            "timing" => self.timing = num(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines; relative paths are taken relative to `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<(), CliError> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
            if let (Some(base), "manifest" | "output_dir") = (base, k.as_str()) {
                let p = PathBuf::from(&v);
                if p.is_relative() {
                    let joined = base.join(p);
                    if k == "manifest" {
                        self.manifest = Some(joined);
                    } else {
                        self.output_dir = joined;
                    }
                }
            }
        }
        Ok(())
    }

    /// Parse a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.schedule.validate()?;
        if self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be at least 1".into()).into());
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n']) {
            return Err(Error::InvalidConfig(format!("run_id {:?} must be non-empty without commas", self.run_id)).into());
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = self.model.to_kv_string();
        let t = &self.train;
        let mut push = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        push("base_lr", t.schedule.base_lr.to_string());
        push("decay_factor", t.schedule.decay_factor.to_string());
        push("decay_every", t.schedule.decay_every.to_string());
        push("first_decay_epoch", t.schedule.first_decay_epoch.to_string());
        push("epochs", t.schedule.total_epochs.to_string());
        push("batch_size", t.batch_size.to_string());
        push("eval_batch_size", t.eval_batch_size.to_string());
        push("shuffle_seed", t.shuffle_seed.to_string());
        if let Some(m) = &self.manifest {
            push("manifest", m.display().to_string());
        }
        push("train_split", self.train_split.clone());
        push("test_split", self.test_split.clone());
        push("output_dir", self.output_dir.display().to_string());
        push("run_id", self.run_id.clone());
        push("timing", self.timing.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_values() {
        let c = RunConfig::preset("desk").unwrap();
        assert_eq!(c.model, ModelConfig::desk());
        assert_eq!(c.train.batch_size, 32);
        let p = RunConfig::preset("full").unwrap();
        assert_eq!(p.train.batch_size, 128);
        assert_eq!(p.train.schedule.base_lr, 3e-5);
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn overrides_and_round_trip() {
        let mut c = RunConfig::preset("desk").unwrap();
        c.apply_override("sa_mode=separate").unwrap();
        c.apply_override("epochs = 3").unwrap();
        c.apply_override("run_id=abc").unwrap();
        assert_eq!(c.model.sa_mode, mmlq::model::ShareMode::Separate);
        assert_eq!(c.train.schedule.total_epochs, 3);
        let mut d = RunConfig::preset("desk").unwrap();
        d.apply_text(&c.to_kv_string(), None).unwrap();
        assert_eq!(c, d);
        assert!(matches!(c.apply_override("nope=1"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_override("novalue"), Err(CliError::Usage(_))));
        assert!(c.apply_override("epochs=x").is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let mut c = RunConfig::preset("desk").unwrap();
        c.apply_text("manifest = data/m.txt\noutput_dir=/abs/out\n", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(c.manifest.as_deref(), Some(Path::new("/cfg/data/m.txt")));
        assert_eq!(c.output_dir, PathBuf::from("/abs/out"));
    }

    #[test]
    fn preset_key_resets() {
        let mut c = RunConfig::preset("desk").unwrap();
        c.apply_text("n_blocks=5\npreset=full\n", None).unwrap();
        assert_eq!(c.model, ModelConfig::full());
    }
}
