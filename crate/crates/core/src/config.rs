//! Tracker configuration and its flat key=value file format.

use std::path::Path;

use crate::error::{Error, Result};

/// All tunables of the association engine. Distances and scales are in
/// feature-grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Detection threshold applied on ingestion.
    pub tau_det: f64,
    /// High-confidence split for the first association stage.
    pub conf_high: f64,
    /// Floor for low-confidence detections used in the second stage.
    pub conf_low: f64,
    /// Gaussian scale of the appearance-motion consistency cost.
    pub sigma: f64,
    /// Center-agreement gate for track continuation.
    pub lambda_mtc: f64,
    /// Max admissible unified cost in stage 1.
    pub gate_stage1: f64,
    /// Max admissible IoU cost in stage 2.
    pub gate_stage2: f64,
    /// Tracks unmatched longer than this are removed.
    pub max_lost_frames: u32,
    /// FIFO length of per-track state buffers.
    pub buffer_len: usize,
    /// Min consecutive buffered states for reactivation candidacy.
    pub mtc_min_consecutive: usize,
    /// Max IoU with any same-class detection for a reactivation to fire.
    pub mtc_overlap_gate: f64,
    /// Cap on consecutive detection-free reactivations.
    pub reactivation_cap: u32,
    /// EMA momentum for track embeddings.
    pub embed_momentum: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau_det: 0.4,
            conf_high: 0.5,
            conf_low: 0.1,
            sigma: 5.0,
            lambda_mtc: 3.0,
            gate_stage1: 0.8,
            gate_stage2: 0.5,
            max_lost_frames: 30,
            buffer_len: 20,
            mtc_min_consecutive: 3,
            mtc_overlap_gate: 0.5,
            reactivation_cap: 5,
            embed_momentum: 0.9,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_low)
            || !(0.0..=1.0).contains(&self.conf_high)
            || self.conf_low >= self.conf_high
        {
            return Err(Error::invalid(
                "config",
                format!(
                    "need 0 <= conf_low < conf_high <= 1, got conf_low={} conf_high={}",
                    self.conf_low, self.conf_high
                ),
            ));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid("config", "sigma must be > 0"));
        }
        if self.lambda_mtc <= 0.0 {
            return Err(Error::invalid("config", "lambda_mtc must be > 0"));
        }
        for (name, v) in [
            ("tau_det", self.tau_det),
            ("gate_stage1", self.gate_stage1),
            ("gate_stage2", self.gate_stage2),
            ("mtc_overlap_gate", self.mtc_overlap_gate),
            ("embed_momentum", self.embed_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(
                    "config",
                    format!("{name}={v} outside [0, 1]"),
                ));
            }
        }
        if self.buffer_len == 0 || self.mtc_min_consecutive == 0 {
            return Err(Error::invalid(
                "config",
                "buffer_len and mtc_min_consecutive must be >= 1",
            ));
        }
        Ok(())
    }

    /// Parse a flat key=value file. Every key is optional and defaults to the
    /// values above; unknown keys are an error. `#` starts a comment.
    pub fn from_str_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_kv_lines(text)? {
            cfg.apply(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_kv(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn f64_of(key: &str, value: &str) -> Result<f64> {
            value.parse().map_err(|_| Error::BadKey {
                key: key.to_string(),
                why: format!("`{value}` is not a number"),
            })
        }
        fn int_of<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::BadKey {
                key: key.to_string(),
                why: format!("`{value}` is not an integer"),
            })
        }
        match key {
            "tau_det" => self.tau_det = f64_of(key, value)?,
            "conf_high" => self.conf_high = f64_of(key, value)?,
            "conf_low" => self.conf_low = f64_of(key, value)?,
            "sigma" => self.sigma = f64_of(key, value)?,
            "lambda_mtc" => self.lambda_mtc = f64_of(key, value)?,
            "gate_stage1" => self.gate_stage1 = f64_of(key, value)?,
            "gate_stage2" => self.gate_stage2 = f64_of(key, value)?,
            "max_lost_frames" => self.max_lost_frames = int_of(key, value)?,
            "buffer_len" => self.buffer_len = int_of(key, value)?,
            "mtc_min_consecutive" => self.mtc_min_consecutive = int_of(key, value)?,
            "mtc_overlap_gate" => self.mtc_overlap_gate = f64_of(key, value)?,
            "reactivation_cap" => self.reactivation_cap = int_of(key, value)?,
            "embed_momentum" => self.embed_momentum = f64_of(key, value)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }
}

/// Split `key=value` lines, skipping blanks and `#` comments.
pub(crate) fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: "<config>".into(),
                line: i + 1,
                why: format!("expected key=value, got `{line}`"),
            });
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = TrackerConfig::default();
        assert_eq!(c.tau_det, 0.4);
        assert_eq!(c.conf_high, 0.5);
        assert_eq!(c.conf_low, 0.1);
        assert_eq!(c.sigma, 5.0);
        assert_eq!(c.lambda_mtc, 3.0);
        assert_eq!(c.gate_stage1, 0.8);
        assert_eq!(c.gate_stage2, 0.5);
        assert_eq!(c.max_lost_frames, 30);
        assert_eq!(c.buffer_len, 20);
        assert_eq!(c.mtc_min_consecutive, 3);
        assert_eq!(c.mtc_overlap_gate, 0.5);
        assert_eq!(c.reactivation_cap, 5);
        assert_eq!(c.embed_momentum, 0.9);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parse_overrides_and_keeps_defaults() {
        let c = TrackerConfig::from_str_kv("sigma = 2.5\n# comment\nmax_lost_frames=10\n").unwrap();
        assert_eq!(c.sigma, 2.5);
        assert_eq!(c.max_lost_frames, 10);
        assert_eq!(c.lambda_mtc, 3.0);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrackerConfig::from_str_kv("sigm=2.5\n").unwrap_err();
        assert!(matches!(err, Error::UnknownKey(k) if k == "sigm"));
    }

    #[test]
    fn bad_value_names_key() {
        let err = TrackerConfig::from_str_kv("sigma=abc\n").unwrap_err();
        assert!(matches!(err, Error::BadKey { key, .. } if key == "sigma"));
    }

    #[test]
    fn validation_rejects_inverted_confidence_split() {
        let err = TrackerConfig::from_str_kv("conf_low=0.7\nconf_high=0.6\n").unwrap_err();
        assert!(err.to_string().contains("conf_low"));
    }
}
