//! Plain-text `key=value` cluster configuration.
//!
//! ```text
//! # 2 machines x 4 nodes, shared-memory parallel backend
//! machines = 2
//! nodes_per_machine = 4
//! workers_per_node = 4
//! backend = smp
//! transport = inproc
//! worker_cap = 1000
//! max_chunk_bytes = 60000
//! connect_timeout_ms = 5000
//! endpoints = 127.0.0.1:7000,127.0.0.1:7001
//! ```

use std::path::Path;
use std::time::Duration;

use crate::transport::TransportConfig;
use crate::types::{Backend, ClusterSpec, ConfigError, TransportKind};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub cluster: ClusterSpec,
    pub transport: TransportConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            cluster: ClusterSpec::new(1, 1, Backend::Actor),
            transport: TransportConfig::default(),
        }
    }
}

fn num(key: &str, value: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
    })
}

impl ClusterConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (key, value) = (key.trim(), value.trim());
        match key {
            "machines" => self.cluster.machines = num(key, value)?,
            "nodes_per_machine" => self.cluster.nodes_per_machine = num(key, value)?,
            "workers_per_node" => self.cluster.workers_per_node = num(key, value)?,
            "worker_cap" => self.cluster.worker_cap = num(key, value)?,
            "backend" => self.cluster.backend = value.parse()?,
            "transport" => self.cluster.transport = value.parse()?,
            "max_chunk_bytes" => self.transport.max_chunk_bytes = num(key, value)?,
            "reassembly_cap" => self.transport.reassembly_cap = num(key, value)?,
            "connect_timeout_ms" => {
                self.transport.connect_timeout = Duration::from_millis(num(key, value)? as u64)
            }
            "endpoints" => {
                self.transport.endpoints = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ClusterConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(self) -> Result<Self, ConfigError> {
        let cluster = self.cluster.validate()?;
        if self.transport.max_chunk_bytes == 0 {
            return Err(ConfigError::Zero("max_chunk_bytes"));
        }
        if cluster.transport == TransportKind::Tcp
            && !self.transport.endpoints.is_empty()
            && self.transport.endpoints.len() != cluster.n_nodes()
        {
            return Err(ConfigError::Endpoints {
                expected: cluster.n_nodes(),
                got: self.transport.endpoints.len(),
            });
        }
        Ok(ClusterConfig {
            cluster,
            transport: self.transport,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let cfg = ClusterConfig::parse(
            "# comment\nmachines=2\nnodes_per_machine = 4\nworkers_per_node=3\nbackend=sms\n\
             transport=tcp\nworker_cap=8\nmax_chunk_bytes=16\nconnect_timeout_ms=250\n\
             endpoints=127.0.0.1:1,127.0.0.1:2\n",
        )
        .unwrap();
        assert_eq!(cfg.cluster.n_nodes(), 8);
        assert_eq!(cfg.cluster.backend, Backend::SharedMemorySequential);
        assert_eq!(cfg.cluster.transport, TransportKind::Tcp);
        assert_eq!(cfg.cluster.worker_cap, 8);
        assert_eq!(cfg.transport.max_chunk_bytes, 16);
        assert_eq!(cfg.transport.connect_timeout, Duration::from_millis(250));
        assert_eq!(cfg.transport.endpoints.len(), 2);
        assert_eq!(
            cfg.validate(),
            Err(ConfigError::Endpoints {
                expected: 8,
                got: 2
            })
        );
    }

    #[test]
    fn defaults_mirror_documented_values() {
        let cfg = ClusterConfig::parse("").unwrap();
        assert_eq!(cfg.cluster.worker_cap, 1000);
        assert_eq!(cfg.transport.max_chunk_bytes, 60_000);
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(
            ClusterConfig::parse("machines").unwrap_err(),
            ConfigError::Syntax { line: 1 }
        );
        assert!(matches!(
            ClusterConfig::parse("colour=blue"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ClusterConfig::parse("machines=two"),
            Err(ConfigError::Invalid { .. })
        ));
    }
}
