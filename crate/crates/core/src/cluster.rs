use std::sync::Arc;

use thiserror::Error;

use crate::config::ClusterConfig;
use crate::transport::{self, Transport, TransportConfig, TransportError};
use crate::types::{ClusterSpec, ConfigError, NodeId};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// A started cluster: validated shape plus one transport endpoint per node.
///
/// Engines build their runtime (actor systems or places) on top of these
/// endpoints for the duration of one run.
pub struct Cluster {
    spec: ClusterSpec,
    transport_config: TransportConfig,
    endpoints: Vec<Arc<dyn Transport>>,
}

impl Cluster {
    pub fn start(spec: ClusterSpec, transport_config: TransportConfig) -> Result<Self, ClusterError> {
        let cfg = ClusterConfig {
            cluster: spec,
            transport: transport_config,
        }
        .validate()?;
        let endpoints =
            transport::start_network(cfg.cluster.transport, cfg.cluster.n_nodes(), &cfg.transport)?;
        Ok(Cluster {
            spec: cfg.cluster,
            transport_config: cfg.transport,
            endpoints,
        })
    }

    pub fn from_config(cfg: ClusterConfig) -> Result<Self, ClusterError> {
        Self::start(cfg.cluster, cfg.transport)
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn transport_config(&self) -> &TransportConfig {
        &self.transport_config
    }

    pub fn n_nodes(&self) -> usize {
        self.endpoints.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n_nodes()).map(NodeId::from)
    }

    pub fn endpoint(&self, node: NodeId) -> &Arc<dyn Transport> {
        &self.endpoints[node.index()]
    }

    pub fn endpoints(&self) -> &[Arc<dyn Transport>] {
        &self.endpoints
    }

    pub fn shutdown(&self) {
        for e in &self.endpoints {
            e.shutdown();
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}
