//! Engine configuration and its flat `key=value` text form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-level clustering parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    /// Tokens per coarse (level-1) centroid.
    pub coarse_ratio: usize,
    /// Tokens per fine (level-2) centroid.
    pub fine_ratio: usize,
    /// Fraction of clustered tokens whose coarse clusters are refined at the fine level.
    pub promote_fraction: f64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            coarse_ratio: 64,
            fine_ratio: 8,
            promote_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Clustering block size `W`.
    pub block_size: usize,
    /// Minimum final-block length `alpha`; the final block is split once it reaches `W + alpha`.
    pub alpha: usize,
    /// Local buffer granularity `L`: the trailing `L..2L` tokens stay unclustered.
    pub local_buffer: usize,
    pub sink_tokens: usize,
    /// Token budget `B` of clustered tokens that receive exact attention.
    pub token_budget: usize,
    /// Tokens per centroid `r` for flat clustering.
    pub tokens_per_centroid: usize,
    pub prefill_kmeans_iters: usize,
    pub refine_kmeans_iters: usize,
    /// Upper bound on Lloyd rounds per k-means call, counting the fixed iterations.
    /// Rounds past the fixed count only run while assignments still change.
    pub max_kmeans_rounds: usize,
    pub hierarchy: Option<HierarchyConfig>,
    pub rope_theta: f64,
    /// Fixed query position `delta` used for centroid lookup.
    pub window_offset: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            block_size: 8192,
            alpha: 4096,
            local_buffer: 128,
            sink_tokens: 10,
            token_budget: 128,
            tokens_per_centroid: 16,
            prefill_kmeans_iters: 10,
            refine_kmeans_iters: 3,
            max_kmeans_rounds: 300,
            hierarchy: None,
            rope_theta: 10000.0,
            window_offset: 64,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "block_size",
    "alpha",
    "local_buffer",
    "sink_tokens",
    "token_budget",
    "tokens_per_centroid",
    "prefill_kmeans_iters",
    "refine_kmeans_iters",
    "max_kmeans_rounds",
    "hierarchy",
    "coarse_ratio",
    "fine_ratio",
    "promote_fraction",
    "rope_theta",
    "window_offset",
    "seed",
];

impl EngineConfig {
    /// Tokens per centroid at the finest clustering level.
    pub fn fine_ratio(&self) -> usize {
        match &self.hierarchy {
            Some(h) => h.fine_ratio,
            None => self.tokens_per_centroid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.block_size == 0 {
            return bad("block_size must be >= 1".into());
        }
        if self.alpha == 0 || self.alpha > self.block_size {
            return bad(format!(
                "alpha must lie in [1, block_size], got {} (block_size {})",
                self.alpha, self.block_size
            ));
        }
        if self.local_buffer == 0 {
            return bad("local_buffer must be >= 1".into());
        }
        if self.tokens_per_centroid == 0 {
            return bad("tokens_per_centroid must be >= 1".into());
        }
        if self.max_kmeans_rounds < self.prefill_kmeans_iters.max(self.refine_kmeans_iters) {
            return bad("max_kmeans_rounds must cover the fixed k-means iterations".into());
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return bad(format!("rope_theta must be positive, got {}", self.rope_theta));
        }
        if let Some(h) = &self.hierarchy {
            if h.fine_ratio == 0 || h.coarse_ratio <= h.fine_ratio {
                return bad(format!(
                    "hierarchy needs coarse_ratio > fine_ratio >= 1, got {} / {}",
                    h.coarse_ratio, h.fine_ratio
                ));
            }
            if h.coarse_ratio % h.fine_ratio != 0 {
                return bad("coarse_ratio must be a multiple of fine_ratio".into());
            }
            if !(h.promote_fraction > 0.0 && h.promote_fraction <= 1.0) {
                return bad(format!(
                    "promote_fraction must lie in (0, 1], got {}",
                    h.promote_fraction
                ));
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form. Short aliases (`W`, `L`, `B`, `r`, `r1`, `r2`,
    /// `p`, `delta`, `theta`) are accepted. Setting any hierarchy field enables the hierarchy.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
        }
        match key.trim() {
            "block_size" | "W" => self.block_size = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "local_buffer" | "L" => self.local_buffer = num(key, value)?,
            "sink_tokens" | "sinks" => self.sink_tokens = num(key, value)?,
            "token_budget" | "B" => self.token_budget = num(key, value)?,
            "tokens_per_centroid" | "r" => self.tokens_per_centroid = num(key, value)?,
            "prefill_kmeans_iters" => self.prefill_kmeans_iters = num(key, value)?,
            "refine_kmeans_iters" => self.refine_kmeans_iters = num(key, value)?,
            "max_kmeans_rounds" => self.max_kmeans_rounds = num(key, value)?,
            "hierarchy" => match value.trim() {
                "off" | "none" | "flat" => self.hierarchy = None,
                "two-level" | "on" => {
                    self.hierarchy.get_or_insert_with(HierarchyConfig::default);
                }
                other => return Err(Error::Config(format!("unknown hierarchy mode `{other}`"))),
            },
            "coarse_ratio" | "r1" => {
                self.hierarchy.get_or_insert_with(HierarchyConfig::default).coarse_ratio =
                    num(key, value)?
            }
            "fine_ratio" | "r2" => {
                self.hierarchy.get_or_insert_with(HierarchyConfig::default).fine_ratio =
                    num(key, value)?
            }
            "promote_fraction" | "p" => {
                self.hierarchy.get_or_insert_with(HierarchyConfig::default).promote_fraction =
                    num(key, value)?
            }
            "rope_theta" | "theta" => self.rope_theta = num(key, value)?,
            "window_offset" | "delta" => self.window_offset = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a flat `key=value` document on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Renders every field as `key=value` lines; `parse_kv` reads it back unchanged.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "block_size={}", self.block_size);
        let _ = writeln!(out, "alpha={}", self.alpha);
        let _ = writeln!(out, "local_buffer={}", self.local_buffer);
        let _ = writeln!(out, "sink_tokens={}", self.sink_tokens);
        let _ = writeln!(out, "token_budget={}", self.token_budget);
        let _ = writeln!(out, "tokens_per_centroid={}", self.tokens_per_centroid);
        let _ = writeln!(out, "prefill_kmeans_iters={}", self.prefill_kmeans_iters);
        let _ = writeln!(out, "refine_kmeans_iters={}", self.refine_kmeans_iters);
        let _ = writeln!(out, "max_kmeans_rounds={}", self.max_kmeans_rounds);
        match &self.hierarchy {
            None => {
                let _ = writeln!(out, "hierarchy=off");
            }
            Some(h) => {
                let _ = writeln!(out, "hierarchy=two-level");
                let _ = writeln!(out, "coarse_ratio={}", h.coarse_ratio);
                let _ = writeln!(out, "fine_ratio={}", h.fine_ratio);
                let _ = writeln!(out, "promote_fraction={}", h.promote_fraction);
            }
        }
        let _ = writeln!(out, "rope_theta={}", self.rope_theta);
        let _ = writeln!(out, "window_offset={}", self.window_offset);
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = EngineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.block_size, 8192);
        assert_eq!(cfg.alpha, cfg.block_size / 2);
        assert_eq!(cfg.local_buffer, 128);
        assert_eq!(cfg.sink_tokens, 10);
        assert_eq!(cfg.tokens_per_centroid, 16);
        assert_eq!((cfg.prefill_kmeans_iters, cfg.refine_kmeans_iters), (10, 3));
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = EngineConfig::default();
        cfg.set("W", "64").unwrap();
        cfg.set("alpha", "32").unwrap();
        cfg.set("r1", "32").unwrap();
        cfg.set("p", "0.5").unwrap();
        cfg.set("theta", "1000000").unwrap();
        let back = EngineConfig::parse_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fine_ratio(), 8);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(EngineConfig::parse_kv("bogus=1").is_err());
        assert!(EngineConfig::parse_kv("block_size=abc").is_err());
        assert!(EngineConfig::parse_kv("nonsense").is_err());
        let cfg = EngineConfig::parse_kv("block_size=8\nalpha=9").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = EngineConfig::parse_kv("r1=12\nr2=8").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = EngineConfig::parse_kv("hierarchy=on\np=0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = EngineConfig::parse_kv("# budget\n\nB = 512\nhierarchy=off\n").unwrap();
        assert_eq!(cfg.token_budget, 512);
        assert!(cfg.hierarchy.is_none());
    }
}
