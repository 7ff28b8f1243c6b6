//! Samples, datasets and batching.

mod format;
mod manifest;
mod synth;

pub use format::{read_dataset, write_dataset, FORMAT_VERSION, HEADER_LEN, MAGIC};
pub use manifest::{Manifest, ManifestEntry};
pub use synth::{gen_synthetic, SynthConfig};

use crate::error::{Error, Result};
use crate::loss::check_distributions;
use crate::model::ModelConfig;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Per-sample tensor extents shared by every record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDims {
    /// Visual token rows, class token included.
    pub n_visual: usize,
    pub h_v: usize,
    /// Textual token rows (padded length).
    pub n_w: usize,
    pub h_t: usize,
    pub k_bins: usize,
}

impl FeatureDims {
    pub fn of_model(cfg: &ModelConfig) -> Self {
        FeatureDims { n_visual: cfg.n_p, h_v: cfg.h_v, n_w: cfg.n_w, h_t: cfg.h_t, k_bins: cfg.k_bins }
    }

    pub fn visual_len(&self) -> usize {
        self.n_visual * self.h_v
    }

    pub fn textual_len(&self) -> usize {
        self.n_w * self.h_t
    }

    fn validate(&self) -> Result<()> {
        let all = [self.n_visual, self.h_v, self.n_w, self.h_t, self.k_bins];
        if all.contains(&0) {
            return Err(Error::Validation(format!("feature dims must be positive: {self:?}")));
        }
        if self.k_bins < 2 {
            return Err(Error::Validation(format!("k_bins must be at least 2, got {}", self.k_bins)));
        }
        Ok(())
    }
}

/// One image: frozen visual tokens, frozen textual tokens, and the
/// ground-truth score distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    /// Row-major `[n_visual, h_v]`.
    pub visual: Vec<f64>,
    /// Row-major `[n_w, h_t]`; rows from `valid_token_count` on are padding.
    pub textual: Vec<f64>,
    pub gt_dos: Vec<f64>,
    pub valid_token_count: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: FeatureDims,
    /// Store floats as 64-bit on disk.
    pub wide: bool,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Check every record against the dims and content invariants.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = &self.dims;
        for (i, r) in self.records.iter().enumerate() {
            let ctx = |msg: String| Error::Validation(format!("record {i} (id {}): {msg}", r.sample_id));
            if r.visual.len() != d.visual_len() {
                return Err(ctx(format!("{} visual values, expected {}", r.visual.len(), d.visual_len())));
            }
            if r.textual.len() != d.textual_len() {
                return Err(ctx(format!("{} textual values, expected {}", r.textual.len(), d.textual_len())));
            }
            if r.gt_dos.len() != d.k_bins {
                return Err(ctx(format!("{} dos bins, expected {}", r.gt_dos.len(), d.k_bins)));
            }
            if r.valid_token_count as usize > d.n_w || r.valid_token_count == 0 {
                return Err(ctx(format!("valid_token_count {} outside 1..={}", r.valid_token_count, d.n_w)));
            }
            if !r.visual.iter().chain(&r.textual).chain(&r.gt_dos).all(|x| x.is_finite()) {
                return Err(ctx("non-finite value".into()));
            }
            check_distributions(&r.gt_dos, d.k_bins, "gt_dos").map_err(|e| ctx(e.to_string()))?;
        }
        Ok(())
    }

    /// Error unless the dataset's dims are what `cfg` consumes.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        let want = FeatureDims::of_model(cfg);
        if self.dims != want {
            return Err(Error::Validation(format!("dataset dims {:?} do not match model dims {want:?}", self.dims)));
        }
        Ok(())
    }

    /// Gather the given records into batch tensors.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<Batch<T>> {
        if indices.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let d = &self.dims;
        let b = indices.len();
        let mut visual = Vec::with_capacity(b * d.visual_len());
        let mut textual = Vec::with_capacity(b * d.textual_len());
        let mut target = Vec::with_capacity(b * d.k_bins);
        let mut ids = Vec::with_capacity(b);
        let mut valid = Vec::with_capacity(b);
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| Error::Usage(format!("record {i} out of range ({})", self.len())))?;
            visual.extend(r.visual.iter().map(|&x| T::from_f64(x)));
            textual.extend(r.textual.iter().map(|&x| T::from_f64(x)));
            target.extend(r.gt_dos.iter().map(|&x| T::from_f64(x)));
            ids.push(r.sample_id);
            valid.push(r.valid_token_count as usize);
        }
        Ok(Batch {
            ids,
            visual: Tensor::new(&[b, d.n_visual, d.h_v], visual)?,
            textual: Tensor::new(&[b, d.n_w, d.h_t], textual)?,
            valid_tokens: valid,
            target: Tensor::new(&[b, d.k_bins], target)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub ids: Vec<u64>,
    /// `[B, n_visual, h_v]`
    pub visual: Tensor<T>,
    /// `[B, n_w, h_t]`
    pub textual: Tensor<T>,
    pub valid_tokens: Vec<usize>,
    /// `[B, k_bins]`
    pub target: Tensor<T>,
}

/// Shuffled partition of `0..n` into batches for one epoch. The order is a
/// pure function of `(seed, epoch)`; the last batch may be short.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Usage("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let order = Rng::with_stream(seed, epoch).permutation(n);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Unshuffled partition of `0..n`.
pub fn sequential_batches(n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Usage("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    Ok((0..n).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect())
}
