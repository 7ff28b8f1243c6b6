//! Finite-difference check of the full model gradient.
//!
//! The model is built in f64 and the loss is the EMD between its predictions
//! and random target distributions. For every named parameter tensor a
//! sample of coordinates is perturbed by `±step` and the central difference
//! is compared with the reverse-mode gradient.

use std::fmt::Write as _;

use crate::error::Result;
use crate::loss::emd_loss;
use crate::model::{Mmlq, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{OpKind, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, for gradients near zero.
    pub abs_floor: f64,
    pub seed: u64,
    /// Scale the backward rule of one op kind (used to test the checker).
    pub fault: Option<(OpKind, f64)>,
}

impl GradcheckConfig {
    pub fn new(model: ModelConfig) -> Self {
        GradcheckConfig {
            model,
            batch: 2,
            coords_per_tensor: 12,
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| g.max_rel_err >= self.tolerance).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
        writeln!(s, "{:width$}  {:>7}  {:>12}  status", "group", "checked", "max_rel_err").unwrap();
        for g in &self.groups {
            let status = if g.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(s, "{:width$}  {:>7}  {:>12.3e}  {status}", g.name, g.checked, g.max_rel_err).unwrap();
        }
        writeln!(
            s,
            "{} groups, max relative error {:.3e}, tolerance {:.0e}: {}",
            self.groups.len(),
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
        s
    }
}

struct Problem {
    visual: Tensor<f64>,
    textual: Tensor<f64>,
    valid: Vec<usize>,
    target: Tensor<f64>,
}

fn loss_value(model: &Mmlq<f64>, p: &Problem) -> Result<f64> {
    let mut tape = Tape::new();
    tape.set_check_finite(true);
    let params = model.bind_frozen(&mut tape)?;
    let v = tape.constant(p.visual.clone())?;
    let t = tape.constant(p.textual.clone())?;
    let y = tape.constant(p.target.clone())?;
    let pred = params.forward(model.config(), &mut tape, v, t, Some(&p.valid))?;
    let loss = emd_loss(&mut tape, y, pred)?;
    Ok(tape.value(loss).data()[0])
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mc = &cfg.model;
    let model = Mmlq::<f64>::new(mc.clone())?;
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let b = cfg.batch.max(1);
    let mut normal = |n: usize| (0..n).map(|_| rng.normal()).collect::<Vec<f64>>();
    let visual = Tensor::new(&[b, mc.n_p, mc.h_v], normal(b * mc.n_p * mc.h_v))?;
    let textual = Tensor::new(&[b, mc.n_w, mc.h_t], normal(b * mc.n_w * mc.h_t))?;
    let logits = normal(b * mc.k_bins);
    let mut target = Vec::with_capacity(logits.len());
    for row in logits.chunks(mc.k_bins) {
        let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        target.extend(e.iter().map(|x| x / s));
    }
    let problem = Problem {
        visual,
        textual,
        valid: (0..b).map(|i| mc.n_w - i % mc.n_w).collect(),
        target: Tensor::new(&[b, mc.k_bins], target)?,
    };

    // Reverse-mode gradients.
    let mut tape = Tape::new();
    tape.set_check_finite(true);
    if let Some((kind, factor)) = cfg.fault {
        tape.set_backward_fault(kind, factor);
    }
    let params = model.bind(&mut tape)?;
    let v = tape.constant(problem.visual.clone())?;
    let t = tape.constant(problem.textual.clone())?;
    let y = tape.constant(problem.target.clone())?;
    let pred = params.forward(mc, &mut tape, v, t, Some(&problem.valid))?;
    let loss = emd_loss(&mut tape, y, pred)?;
    tape.backward(loss)?;
    let mut vars = Vec::new();
    crate::nn::ParamTree::map_params(&params, "", &mut |_, v| vars.push(*v));
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(model.named_parameters())
        .map(|(&v, (_, p))| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let names: Vec<(String, usize)> = model.named_parameters().into_iter().map(|(n, p)| (n, p.numel())).collect();
    let mut pick = Rng::with_stream(cfg.seed, 2);
    let mut groups = Vec::with_capacity(names.len());
    let mut probe = model.clone();
    for (gi, (name, numel)) in names.into_iter().enumerate() {
        let coords: Vec<usize> = if numel <= cfg.coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = pick.permutation(numel)[..cfg.coords_per_tensor].to_vec();
            c.sort_unstable();
            c
        };
        let mut worst = (0.0, 0.0);
        let mut max_rel = 0.0f64;
        for &c in &coords {
            let orig = model.named_parameters()[gi].1.data()[c];
            let set = |m: &mut Mmlq<f64>, x: f64| {
                let mut k = 0;
                m.visit_parameters_mut(|p| {
                    if k == gi {
                        p.data_mut()[c] = x;
                    }
                    k += 1;
                });
            };
            set(&mut probe, orig + cfg.step);
            let up = loss_value(&probe, &problem)?;
            set(&mut probe, orig - cfg.step);
            let down = loss_value(&probe, &problem)?;
            set(&mut probe, orig);
            let numeric = (up - down) / (2.0 * cfg.step);
            let analytic = grads[gi].data()[c];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
            if rel >= max_rel {
                max_rel = rel;
                worst = (analytic, numeric);
            }
        }
        groups.push(GroupResult { name, checked: coords.len(), max_rel_err: max_rel, worst });
    }
    Ok(GradcheckReport { groups, tolerance: cfg.tolerance })
}
