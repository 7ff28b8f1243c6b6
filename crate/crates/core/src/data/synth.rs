//! Planted-signal synthetic features.
//!
//! Each sample draws a latent `z ~ N(0, 1)`. Its mean score is
//! `μ = clamp(c + 1.5·(K−1)/9·z, 1, K)` with `c = (K+1)/2` (5.5 + 1.5z for
//! K = 10), and its distribution is a Gaussian of width `dos_sigma` centred
//! on `μ`, discretized over bins `1..=K`. Every visual token row is
//! `signal_v·z·P_v + noise_std·ε`, and every valid textual row
//! `signal_t·z·P_t + noise_std·ε`, with fixed patterns `P_v`, `P_t` and
//! i.i.d. standard normal `ε`. Padding rows are zero.
//!
//! Randomness comes from ChaCha8 (see [`crate::rng`]): the patterns use
//! stream 0 of `seed`, split `s` uses stream `s + 1`, so splits generated
//! with one seed share their patterns. All values are rounded to f32.

use super::{Dataset, FeatureDims, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_visual: usize,
    pub h_v: usize,
    pub n_w: usize,
    pub h_t: usize,
    pub k_bins: usize,
    pub signal_v: f64,
    pub signal_t: f64,
    pub noise_std: f64,
    pub dos_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Desk-size dims with both signals at 0.8.
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            n_samples: 1000,
            n_visual: 17,
            h_v: 48,
            n_w: 33,
            h_t: 32,
            k_bins: 10,
            signal_v: 0.8,
            signal_t: 0.8,
            noise_std: 1.0,
            dos_sigma: 1.2,
            seed,
        }
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims { n_visual: self.n_visual, h_v: self.h_v, n_w: self.n_w, h_t: self.h_t, k_bins: self.k_bins }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (name, s) in [("signal_v", self.signal_v), ("signal_t", self.signal_t)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {s}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.dos_sigma >= 0.0 && self.dos_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("dos_sigma must be >= 0, got {}", self.dos_sigma)));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Mean score for latent `z`.
    pub fn mean_score(&self, z: f64) -> f64 {
        let k = self.k_bins as f64;
        ((k + 1.0) / 2.0 + 1.5 * (k - 1.0) / 9.0 * z).clamp(1.0, k)
    }

    /// Discretized Gaussian over bins `1..=K`; one-hot at `round(μ)` when
    /// `dos_sigma` is 0.
    pub fn dos(&self, mu: f64) -> Vec<f64> {
        let k = self.k_bins;
        if self.dos_sigma == 0.0 {
            let mut d = vec![0.0; k];
            d[(mu.round() as usize).clamp(1, k) - 1] = 1.0;
            return d;
        }
        let logits: Vec<f64> = (1..=k)
            .map(|b| {
                let t = (b as f64 - mu) / self.dos_sigma;
                -0.5 * t * t
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

/// Generate split `split` of the dataset described by `cfg`.
pub fn gen_synthetic(cfg: &SynthConfig, split: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut prng = Rng::with_stream(cfg.seed, 0);
    let p_v: Vec<f64> = (0..cfg.h_v).map(|_| prng.normal()).collect();
    let p_t: Vec<f64> = (0..cfg.h_t).map(|_| prng.normal()).collect();

    let mut rng = Rng::with_stream(cfg.seed, split + 1);
    let min_valid = cfg.n_w.div_ceil(4).max(1);
    let mut records = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let z = rng.normal();
        let valid = min_valid + rng.below((cfg.n_w - min_valid + 1) as u64) as usize;
        let mut visual = Vec::with_capacity(cfg.n_visual * cfg.h_v);
        for _ in 0..cfg.n_visual {
            for &p in &p_v {
                visual.push(round32(cfg.signal_v * z * p + cfg.noise_std * rng.normal()));
            }
        }
        let mut textual = vec![0.0; cfg.n_w * cfg.h_t];
        for row in textual.chunks_exact_mut(cfg.h_t).take(valid) {
            for (x, &p) in row.iter_mut().zip(&p_t) {
                *x = round32(cfg.signal_t * z * p + cfg.noise_std * rng.normal());
            }
        }
        let gt_dos = cfg.dos(cfg.mean_score(z)).into_iter().map(round32).collect();
        records.push(SampleRecord {
            sample_id: (split << 32) | i as u64,
            visual,
            textual,
            gt_dos,
            valid_token_count: valid as u32,
        });
    }
    let ds = Dataset { dims: cfg.dims(), wide: false, records };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{mos_from_dos, srcc};

    #[test]
    fn deterministic_and_split_dependent() {
        let cfg = SynthConfig { n_samples: 5, ..SynthConfig::desk(3) };
        let a = gen_synthetic(&cfg, 0).unwrap();
        assert_eq!(a, gen_synthetic(&cfg, 0).unwrap());
        let b = gen_synthetic(&cfg, 1).unwrap();
        assert_ne!(a.records[0].visual, b.records[0].visual);
        assert_eq!(b.records[2].sample_id, (1 << 32) | 2);
    }

    #[test]
    fn padding_rows_are_zero() {
        let cfg = SynthConfig { n_samples: 20, ..SynthConfig::desk(1) };
        let ds = gen_synthetic(&cfg, 0).unwrap();
        for r in &ds.records {
            let v = r.valid_token_count as usize;
            assert!((9..=33).contains(&v));
            assert!(r.textual[v * cfg.h_t..].iter().all(|&x| x == 0.0));
            assert!(r.textual[..v * cfg.h_t].iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn zero_sigma_is_one_hot() {
        let cfg = SynthConfig { dos_sigma: 0.0, ..SynthConfig::desk(0) };
        assert_eq!(cfg.dos(6.6), [0., 0., 0., 0., 0., 0., 1., 0., 0., 0.]);
        assert_eq!(cfg.dos(1.0)[0], 1.0);
        // narrow widths approach the same one-hot
        let narrow = SynthConfig { dos_sigma: 0.05, ..cfg.clone() };
        assert!(narrow.dos(6.6)[6] > 1.0 - 1e-6);
    }

    #[test]
    fn mean_score_mapping() {
        let cfg = SynthConfig::desk(0);
        assert_eq!(cfg.mean_score(0.0), 5.5);
        assert_eq!(cfg.mean_score(1.0), 7.0);
        assert_eq!(cfg.mean_score(10.0), 10.0);
        assert_eq!(cfg.mean_score(-10.0), 1.0);
    }

    #[test]
    fn generated_mos_tracks_latent() {
        let cfg = SynthConfig::desk(21);
        let ds = gen_synthetic(&cfg, 0).unwrap();
        // Recover z as the projection of the mean visual row onto P_v.
        let mut prng = Rng::with_stream(cfg.seed, 0);
        let p_v: Vec<f64> = (0..cfg.h_v).map(|_| prng.normal()).collect();
        let norm: f64 = p_v.iter().map(|p| p * p).sum();
        let mut rng = Rng::with_stream(cfg.seed, 1);
        let mut mu = Vec::new();
        let mut mos = Vec::new();
        for r in &ds.records {
            let z = rng.normal();
            // replay the draws of this sample so `rng` stays aligned
            let min_valid = cfg.n_w.div_ceil(4);
            let valid = min_valid + rng.below((cfg.n_w - min_valid + 1) as u64) as usize;
            assert_eq!(valid, r.valid_token_count as usize);
            for _ in 0..cfg.n_visual * cfg.h_v + valid * cfg.h_t {
                rng.normal();
            }
            mu.push(cfg.mean_score(z));
            mos.push(mos_from_dos(&r.gt_dos).unwrap());
            let proj: f64 = r.visual[..cfg.h_v].iter().zip(&p_v).map(|(x, p)| x * p).sum::<f64>() / norm;
            assert!((proj - cfg.signal_v * z).abs() < 1.5, "projection {proj} vs {z}");
        }
        assert!(srcc(&mos, &mu).unwrap() > 0.99);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { signal_v: 1.5, ..SynthConfig::desk(0) }.validate().is_err());
        assert!(SynthConfig { noise_std: -1.0, ..SynthConfig::desk(0) }.validate().is_err());
        assert!(SynthConfig { k_bins: 1, ..SynthConfig::desk(0) }.validate().is_err());
        assert!(SynthConfig { n_samples: 0, ..SynthConfig::desk(0) }.validate().is_err());
    }
}
