//! Training loop and dataset evaluation.

use std::fmt::Write as _;

use crate::data::{batch_order, sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::loss::emd_loss;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Mmlq;
use crate::nn::ParamTree;
use crate::optim::{Adam, StepSchedule};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: StepSchedule,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { schedule: StepSchedule::default(), batch_size: 128, shuffle_seed: 0, eval_batch_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub test: Option<MetricsReport>,
}

pub struct Trainer {
    pub model: Mmlq<f32>,
    pub adam: Adam<f32>,
    pub cfg: TrainConfig,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Mmlq<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.schedule.validate()?;
        if cfg.batch_size == 0 || cfg.eval_batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be at least 1".into()));
        }
        let adam = Adam::for_params(model.params());
        Ok(Trainer { model, adam, cfg, steps: Vec::new(), epochs: Vec::new() })
    }

    /// One optimizer step on the given records; returns the batch loss.
    pub fn step(&mut self, data: &Dataset, indices: &[usize], lr: f64) -> Result<f64> {
        let batch = data.batch::<f32>(indices)?;
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape)?;
        let v = tape.constant(batch.visual)?;
        let t = tape.constant(batch.textual)?;
        let y = tape.constant(batch.target)?;
        let pred = params.forward(self.model.config(), &mut tape, v, t, Some(&batch.valid_tokens))?;
        let loss = emd_loss(&mut tape, y, pred)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        tape.backward(loss)?;
        let mut grads = Vec::new();
        params.map_params("", &mut |_, &v| {
            let shape = tape.shape(v).to_vec();
            grads.push(tape.grad(v).unwrap_or_else(|| Tensor::zeros(&shape)));
        });
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        Ok(value)
    }

    /// Run one epoch and, when given, evaluate on `test`.
    pub fn epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<&EpochLog> {
        let epoch = self.epochs.len();
        let lr = self.cfg.schedule.lr_at_epoch(epoch)?;
        let batches = batch_order(train.len(), self.cfg.batch_size, self.cfg.shuffle_seed, epoch as u64)?;
        let mut total = 0.0;
        for idx in &batches {
            let loss = self.step(train, idx, lr)?;
            total += loss;
            self.steps.push(StepLog { step: self.steps.len() + 1, epoch, lr, loss });
        }
        let test = test.map(|ds| evaluate_model(&self.model, ds, self.cfg.eval_batch_size)).transpose()?;
        self.epochs.push(EpochLog { epoch, lr, train_loss: total / batches.len() as f64, test });
        Ok(self.epochs.last().expect("just pushed"))
    }

    /// Train for every epoch of the schedule.
    pub fn run(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<()> {
        train.check_model(self.model.config())?;
        if let Some(t) = test {
            t.check_model(self.model.config())?;
        }
        while self.epochs.len() < self.cfg.schedule.total_epochs {
            self.epoch(train, test)?;
        }
        Ok(())
    }
}

/// Predicted distributions for every record, row-major `[n, k_bins]`.
pub fn predict_dataset(model: &Mmlq<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    data.check_model(model.config())?;
    let mut out = Vec::with_capacity(data.len() * data.dims.k_bins);
    for idx in sequential_batches(data.len(), batch_size)? {
        let b = data.batch::<f32>(&idx)?;
        let y = model.predict(&b.visual, &b.textual, Some(&b.valid_tokens))?;
        out.extend(y.data().iter().map(|&x| x as f64));
    }
    Ok(out)
}

pub fn evaluate_model(model: &Mmlq<f32>, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let pred = predict_dataset(model, data, batch_size)?;
    let gt: Vec<f64> = data.records.iter().flat_map(|r| r.gt_dos.iter().copied()).collect();
    evaluate(&pred, &gt, data.dims.k_bins)
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,train_loss,test_srcc,test_plcc,test_acc,test_mse,test_emd";
pub const CURVE_HEADER: &str = "step,epoch,lr,loss";

/// Per-epoch log as CSV. Test columns are empty when no test set was used.
pub fn train_log_csv(epochs: &[EpochLog]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for e in epochs {
        write!(s, "{},{:e},{:.6}", e.epoch, e.lr, e.train_loss).unwrap();
        match &e.test {
            Some(m) => writeln!(s, ",{:.6},{:.6},{:.2},{:.6},{:.6}", m.srcc, m.plcc, m.acc_percent, m.mse, m.emd),
            None => writeln!(s, ",,,,,"),
        }
        .unwrap();
    }
    s
}

pub fn curve_csv(steps: &[StepLog]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for st in steps {
        writeln!(s, "{},{},{:e},{:.6}", st.step, st.epoch, st.lr, st.loss).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::model::{ModelConfig, ShareMode};

    fn setup() -> (Mmlq<f32>, Dataset) {
        let cfg = ModelConfig {
            h_q: 8,
            n_heads: 2,
            head_dim: 4,
            n_blocks: 1,
            sa_mode: ShareMode::Shared,
            h_v: 4,
            h_t: 3,
            n_p: 3,
            n_w: 4,
            ..ModelConfig::desk()
        };
        let synth = SynthConfig { n_samples: 10, n_visual: 3, h_v: 4, n_w: 4, h_t: 3, ..SynthConfig::desk(1) };
        (Mmlq::new(cfg).unwrap(), gen_synthetic(&synth, 0).unwrap())
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            schedule: StepSchedule { base_lr: 1e-2, total_epochs: 3, ..Default::default() },
            batch_size: 4,
            shuffle_seed: 2,
            eval_batch_size: 3,
        }
    }

    #[test]
    fn logs_follow_schedule() {
        let (model, ds) = setup();
        let mut tr = Trainer::new(model, train_cfg()).unwrap();
        tr.run(&ds, Some(&ds)).unwrap();
        assert_eq!(tr.epochs.len(), 3);
        assert_eq!(tr.steps.len(), 9);
        for e in &tr.epochs {
            assert_eq!(e.lr, tr.cfg.schedule.lr_at_epoch(e.epoch).unwrap());
            assert!(e.test.is_some());
        }
        assert_eq!(tr.adam.t, 9);
        let log = train_log_csv(&tr.epochs);
        assert_eq!(log.lines().count(), 4);
        assert_eq!(curve_csv(&tr.steps).lines().count(), 10);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let (model, ds) = setup();
            let mut tr = Trainer::new(model, train_cfg()).unwrap();
            tr.run(&ds, Some(&ds)).unwrap();
            (tr.model, train_log_csv(&tr.epochs), curve_csv(&tr.steps))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_is_batch_size_independent() {
        let (model, ds) = setup();
        let a = predict_dataset(&model, &ds, 1).unwrap();
        let b = predict_dataset(&model, &ds, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_on_repeated_batch() {
        let (model, ds) = setup();
        let mut tr = Trainer::new(model, train_cfg()).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let first = tr.step(&ds, &idx, 1e-2).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = tr.step(&ds, &idx, 1e-2).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn rejects_mismatched_data() {
        let (model, _) = setup();
        let other = gen_synthetic(&SynthConfig { n_samples: 3, ..SynthConfig::desk(0) }, 0).unwrap();
        let mut tr = Trainer::new(model, train_cfg()).unwrap();
        assert!(matches!(tr.run(&other, None), Err(Error::Validation(_))));
    }
}
