//! Key=value configuration shared by the CLI subcommands: a config file
//! provides defaults, `--set key=value` flags override it, unknown keys are
//! rejected.

use crate::client::{ClientConfig, RedirectSet, RingPolicy};
use crate::latency::LatencyModel;
use crate::predictor::{CheckpointMode, PredictorConfig};
use crate::provider::{ProviderConfig, Strategy, VarianceEstimator};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: expected key=value, got {got:?}")]
    Malformed { line: usize, got: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the replay subcommand produces latency samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayLatency {
    Measured,
    Model,
}

#[derive(Debug, Clone)]
pub struct Settings {
    // client
    pub server_addr: Option<String>,
    pub block_size: usize,
    pub pool_capacity: usize,
    pub cache_pages: usize,
    pub workers: usize,
    pub ring_capacity: usize,
    pub redirect_names: Vec<String>,
    pub latency: ReplayLatency,
    // predictor
    pub seg_max: u16,
    pub match_checkpoints: CheckpointMode,
    pub first_segment_matches: u8,
    pub construction_window_us: u64,
    pub session_idle_timeout_us: u64,
    // provider
    pub prefetch_strategy: Strategy,
    pub variance_threshold: f64,
    pub prefetch_window: usize,
    pub variance_estimator: VarianceEstimator,
    pub memcache_capacity: usize,
    // latency model
    pub lat: LatencyModel,
}

impl Default for Settings {
    fn default() -> Self {
        let predictor = PredictorConfig::default();
        let provider = ProviderConfig::default();
        let client = ClientConfig::default();
        Settings {
            server_addr: None,
            block_size: client.block_size,
            pool_capacity: client.pool_capacity,
            cache_pages: client.cache_pages,
            workers: client.workers,
            ring_capacity: client.ring_capacity,
            redirect_names: Vec::new(),
            latency: ReplayLatency::Measured,
            seg_max: predictor.seg_max,
            match_checkpoints: predictor.checkpoint_mode,
            first_segment_matches: predictor.first_segment_matches,
            construction_window_us: predictor.construction_window_us,
            session_idle_timeout_us: predictor.session_idle_timeout_us,
            prefetch_strategy: provider.strategy,
            variance_threshold: provider.variance_threshold,
            prefetch_window: provider.prefetch_window,
            variance_estimator: provider.estimator,
            memcache_capacity: provider.memcache_capacity,
            lat: LatencyModel::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

impl Settings {
    /// Apply `key=value` lines from a config file. `#` comments and blank
    /// lines are ignored.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: idx + 1,
                got: raw.to_string(),
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one override. Unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "server_addr" => self.server_addr = Some(value.to_string()),
            "block_size" => self.block_size = parse(key, value)?,
            "pool_capacity" => self.pool_capacity = parse(key, value)?,
            "cache_pages" => self.cache_pages = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "ring_capacity" => self.ring_capacity = parse(key, value)?,
            "redirect_names" => {
                self.redirect_names = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
            }
            "latency" => {
                self.latency = match value {
                    "measured" => ReplayLatency::Measured,
                    "model" => ReplayLatency::Model,
                    _ => return Err(bad(key, value, "expected measured|model")),
                }
            }
            "seg_max" => self.seg_max = parse(key, value)?,
            "match_checkpoints" => {
                self.match_checkpoints = CheckpointMode::parse(value)
                    .ok_or_else(|| bad(key, value, "expected figure|prose"))?;
            }
            "first_segment_matches" => self.first_segment_matches = parse(key, value)?,
            "construction_window_us" => self.construction_window_us = parse(key, value)?,
            "session_idle_timeout_us" => self.session_idle_timeout_us = parse(key, value)?,
            "prefetch_strategy" => {
                self.prefetch_strategy = Strategy::parse(value)
                    .ok_or_else(|| bad(key, value, "expected none|full|norm_var|nv_async"))?;
            }
            "variance_threshold" => self.variance_threshold = parse(key, value)?,
            "prefetch_window" => self.prefetch_window = parse(key, value)?,
            "variance_estimator" => {
                self.variance_estimator = VarianceEstimator::parse(value)
                    .ok_or_else(|| bad(key, value, "expected mean|sum"))?;
            }
            "memcache_capacity" => self.memcache_capacity = parse(key, value)?,
            "lat.net_rtt" => self.lat.net_rtt_us = parse(key, value)?,
            "lat.net_per_block" => self.lat.net_per_block_us = parse(key, value)?,
            "lat.disk_read" => self.lat.disk_read_us = parse(key, value)?,
            "lat.mem_read" => self.lat.mem_read_us = parse(key, value)?,
            "lat.loss_rate" => {
                self.lat.loss_rate = parse(key, value)?;
                if !(0.0..=1.0).contains(&self.lat.loss_rate) {
                    return Err(bad(key, value, "loss rate outside [0, 1]"));
                }
            }
            "lat.retransmit_penalty_us" => self.lat.retransmit_penalty_us = parse(key, value)?,
            "lat.seed" => self.lat.seed = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Apply a `--set KEY=VALUE` style argument.
    pub fn apply_set(&mut self, arg: &str) -> Result<(), ConfigError> {
        let (key, value) = arg.split_once('=').ok_or_else(|| ConfigError::Malformed {
            line: 0,
            got: arg.to_string(),
        })?;
        self.apply_kv(key.trim(), value.trim())
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            block_size: self.block_size,
            pool_capacity: self.pool_capacity,
            cache_pages: self.cache_pages,
            workers: self.workers,
            ring_capacity: self.ring_capacity,
            ring_policy: RingPolicy::Block,
            redirect: RedirectSet::from_names(self.redirect_names.iter().cloned()),
            token: None,
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            seg_max: self.seg_max,
            checkpoint_mode: self.match_checkpoints,
            first_segment_matches: self.first_segment_matches,
            construction_window_us: self.construction_window_us,
            session_idle_timeout_us: self.session_idle_timeout_us,
        }
    }

    pub fn provider_config(&self) -> ProviderConfig {
        ProviderConfig {
            strategy: self.prefetch_strategy,
            variance_threshold: self.variance_threshold,
            prefetch_window: self.prefetch_window,
            estimator: self.variance_estimator,
            memcache_capacity: self.memcache_capacity,
        }
    }

    pub fn latency_model(&self) -> LatencyModel {
        self.lat.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_component_defaults() {
        let s = Settings::default();
        assert_eq!(s.block_size, 4096);
        assert_eq!(s.pool_capacity, 256);
        assert_eq!(s.workers, 1);
        assert_eq!(s.seg_max, 32);
        assert_eq!(s.prefetch_strategy, Strategy::NvAsync);
        assert_eq!(s.variance_threshold, 0.1);
        assert_eq!(s.prefetch_window, 3);
        assert_eq!(s.lat.net_rtt_us, 200);
    }

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::default();
        s.apply_file("# comment\nblock_size=512\nredirect_names=python3, perl\n\nlat.seed=9\n")
            .unwrap();
        assert_eq!(s.block_size, 512);
        assert_eq!(s.redirect_names, vec!["python3", "perl"]);
        assert_eq!(s.lat.seed, 9);
        s.apply_set("block_size=1024").unwrap();
        assert_eq!(s.block_size, 1024);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut s = Settings::default();
        assert!(matches!(
            s.apply_kv("no_such_key", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn bad_values_rejected() {
        let mut s = Settings::default();
        assert!(s.apply_kv("block_size", "four").is_err());
        assert!(s.apply_kv("prefetch_strategy", "psychic").is_err());
        assert!(s.apply_kv("lat.loss_rate", "1.5").is_err());
        assert!(s.apply_kv("match_checkpoints", "vibes").is_err());
    }

    #[test]
    fn malformed_file_line_reports_number() {
        let mut s = Settings::default();
        let err = s.apply_file("block_size=512\nnot a pair\n").unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 2, .. }));
    }
}
