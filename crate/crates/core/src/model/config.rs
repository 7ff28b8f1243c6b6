use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How a replaceable sublayer (self-attention or feed-forward) is laid out
/// across the two query streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShareMode {
    /// Sublayer omitted.
    None,
    /// One weight set applied to both modalities.
    Shared,
    /// Independent weights per modality.
    Separate,
}

impl ShareMode {
    pub const ALL: [ShareMode; 3] = [ShareMode::None, ShareMode::Shared, ShareMode::Separate];

    pub fn as_str(self) -> &'static str {
        match self {
            ShareMode::None => "none",
            ShareMode::Shared => "shared",
            ShareMode::Separate => "separate",
        }
    }
}

impl fmt::Display for ShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShareMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShareMode::None),
            "shared" => Ok(ShareMode::Shared),
            "separate" => Ok(ShareMode::Separate),
            _ => Err(Error::InvalidConfig(format!("share mode {s:?} (none|shared|separate)"))),
        }
    }
}

/// Which query streams exist. Single-modality models drop the other
/// stream's queries, cross-attention and encoder input entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Both,
    Visual,
    Textual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }

    pub fn has_visual(self) -> bool {
        self != Modality::Textual
    }

    pub fn has_textual(self) -> bool {
        self != Modality::Visual
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Modality::Both),
            "visual" => Ok(Modality::Visual),
            "textual" => Ok(Modality::Textual),
            _ => Err(Error::InvalidConfig(format!("modality {s:?} (both|visual|textual)"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Query embedding width.
    pub h_q: usize,
    /// Number of visual queries.
    pub n_v: usize,
    /// Number of textual queries.
    pub n_t: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Number of interaction blocks.
    pub n_blocks: usize,
    pub sa_mode: ShareMode,
    pub ff_mode: ShareMode,
    /// Visual token width.
    pub h_v: usize,
    /// Textual token width.
    pub h_t: usize,
    /// Visual token rows per sample, class token included.
    pub n_p: usize,
    /// Textual token rows per sample (padded length).
    pub n_w: usize,
    pub k_bins: usize,
    pub modality: Modality,
    /// Exclude padded text rows from cross-attention. Off by default.
    pub mask_text_padding: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration for fast experiments on synthetic features.
    pub fn desk() -> Self {
        ModelConfig {
            h_q: 64,
            n_v: 2,
            n_t: 2,
            n_heads: 4,
            head_dim: 16,
            n_blocks: 2,
            sa_mode: ShareMode::None,
            ff_mode: ShareMode::Shared,
            h_v: 48,
            h_t: 32,
            n_p: 17,
            n_w: 33,
            k_bins: 10,
            modality: Modality::Both,
            mask_text_padding: false,
            seed: 0,
        }
    }

    /// Full-size configuration: ViT-L/14 patch tokens at 224px and BERT-base
    /// comment tokens.
    pub fn full() -> Self {
        ModelConfig {
            h_q: 768,
            n_v: 2,
            n_t: 2,
            n_heads: 12,
            head_dim: 64,
            n_blocks: 6,
            sa_mode: ShareMode::None,
            ff_mode: ShareMode::Shared,
            h_v: 1024,
            h_t: 768,
            n_p: 257,
            n_w: 512,
            k_bins: 10,
            modality: Modality::Both,
            mask_text_padding: false,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::InvalidConfig(format!("unknown preset {name:?} (desk|full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("h_q", self.h_q),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("n_blocks", self.n_blocks),
            ("h_v", self.h_v),
            ("h_t", self.h_t),
            ("n_p", self.n_p),
            ("n_w", self.n_w),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_v == 0 || self.n_t == 0 {
            return Err(Error::InvalidConfig("n_v and n_t must be at least 1".into()));
        }
        if self.k_bins < 2 {
            return Err(Error::InvalidConfig(format!("k_bins must be at least 2, got {}", self.k_bins)));
        }
        Ok(())
    }

    /// Queries per stream after the modality selection (0 for a dropped stream).
    pub fn visual_queries(&self) -> usize {
        if self.modality.has_visual() {
            self.n_v
        } else {
            0
        }
    }

    pub fn textual_queries(&self) -> usize {
        if self.modality.has_textual() {
            self.n_t
        } else {
            0
        }
    }

    /// Set one field from its key=value spelling. Returns `Ok(false)` for an
    /// unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "h_q" => self.h_q = num(key, value)?,
            "n_v" => self.n_v = num(key, value)?,
            "n_t" => self.n_t = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "head_dim" => self.head_dim = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "sa_mode" => self.sa_mode = value.parse()?,
            "ff_mode" => self.ff_mode = value.parse()?,
            "h_v" => self.h_v = num(key, value)?,
            "h_t" => self.h_t = num(key, value)?,
            "n_p" => self.n_p = num(key, value)?,
            "n_w" => self.n_w = num(key, value)?,
            "k_bins" => self.k_bins = num(key, value)?,
            "modality" => self.modality = value.parse()?,
            "mask_text_padding" => self.mask_text_padding = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("h_q", self.h_q.to_string()),
            ("n_v", self.n_v.to_string()),
            ("n_t", self.n_t.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("sa_mode", self.sa_mode.to_string()),
            ("ff_mode", self.ff_mode.to_string()),
            ("h_v", self.h_v.to_string()),
            ("h_t", self.h_t.to_string()),
            ("n_p", self.n_p.to_string()),
            ("n_w", self.n_w.to_string()),
            ("k_bins", self.k_bins.to_string()),
            ("modality", self.modality.to_string()),
            ("mask_text_padding", self.mask_text_padding.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// `key=value` lines.
    pub fn to_kv_string(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parse `key=value` lines on top of the desk preset. Unknown keys are
    /// an error.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (key, value) in parse_kv(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::InvalidConfig(format!("unknown model key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse flat `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_head_dims_are_consistent() {
        let p = ModelConfig::full();
        assert_eq!(p.n_heads * p.head_dim, p.h_q);
        assert_eq!((p.n_heads, p.head_dim, p.h_q), (12, 64, 768));
        let d = ModelConfig::desk();
        assert_eq!(d.n_heads * d.head_dim, d.h_q);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.sa_mode = ShareMode::Separate;
        cfg.modality = Modality::Textual;
        cfg.seed = 99;
        let back = ModelConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::desk();
        c.k_bins = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.n_v = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.head_dim = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_kv_str("bogus=1").is_err());
        assert!(ModelConfig::from_kv_str("sa_mode=sometimes").is_err());
        assert!(ModelConfig::from_kv_str("n_v").is_err());
    }

    #[test]
    fn kv_comments_and_whitespace() {
        let c = ModelConfig::from_kv_str("# comment\n n_blocks = 3 # trailing\n\nff_mode=separate\n").unwrap();
        assert_eq!(c.n_blocks, 3);
        assert_eq!(c.ff_mode, ShareMode::Separate);
    }
}
