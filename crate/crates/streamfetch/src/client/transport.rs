//! How the networker reaches a server: a persistent TCP connection for the
//! live daemon, or a direct in-process call for simulations. Both paths go
//! through the wire codec so the frame layout is always exercised.

use crate::provider::BlockSource;
use crate::server::Server;
use crate::time::VirtualTime;
use crate::wire::{self, RequestFrame, ResponseFrame, WireError};
use std::io::Write;
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connect {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("connection lost and reconnect failed: {0}")]
    ReconnectFailed(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("server error: {0}")]
    Server(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A response plus, when the server runs in-process, the per-block source
/// tags the latency model prices.
#[derive(Debug)]
pub struct Reply {
    pub response: ResponseFrame,
    pub sources: Option<Vec<BlockSource>>,
}

pub trait Transport: Send {
    /// One request, one response. Exactly one in flight per transport.
    fn round_trip(
        &mut self,
        frame: &RequestFrame,
        now: VirtualTime,
    ) -> Result<Reply, TransportError>;

    /// Connections established so far (1 for a healthy persistent link).
    fn connection_count(&self) -> u64 {
        1
    }
}

/// Persistent TCP connection. Established once at client start; on a lost
/// connection it reconnects a single time and retries the request, then
/// surfaces the failure.
pub struct TcpTransport {
    addr: String,
    block_size: usize,
    stream: TcpStream,
    connects: u64,
}

impl TcpTransport {
    pub fn connect(addr: &str, block_size: usize) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr).map_err(|source| TransportError::Connect {
            addr: addr.to_string(),
            source,
        })?;
        stream.set_nodelay(true).ok();
        Ok(TcpTransport {
            addr: addr.to_string(),
            block_size,
            stream,
            connects: 1,
        })
    }

    fn exchange(&mut self, encoded: &[u8]) -> Result<ResponseFrame, WireError> {
        self.stream.write_all(encoded)?;
        self.stream.flush()?;
        wire::read_response(&mut self.stream, self.block_size)
    }
}

impl Transport for TcpTransport {
    fn round_trip(
        &mut self,
        frame: &RequestFrame,
        _now: VirtualTime,
    ) -> Result<Reply, TransportError> {
        let encoded = wire::encode_request(frame)?;
        match self.exchange(&encoded) {
            Ok(response) => Ok(Reply {
                response,
                sources: None,
            }),
            Err(WireError::Io(_)) => {
                // Reconnect once, retry once.
                self.stream = TcpStream::connect(&self.addr)
                    .map_err(|e| TransportError::ReconnectFailed(format!("{}: {e}", self.addr)))?;
                self.stream.set_nodelay(true).ok();
                self.connects += 1;
                let response = self
                    .exchange(&encoded)
                    .map_err(|e| TransportError::ReconnectFailed(e.to_string()))?;
                Ok(Reply {
                    response,
                    sources: None,
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn connection_count(&self) -> u64 {
        self.connects
    }
}

/// Direct call into an in-process [`Server`]. Frames are still encoded and
/// decoded. After each response the prefetch queue is drained, modeling
/// background reads that complete while the client executes the blocks it
/// just received.
pub struct InProcessTransport {
    server: Arc<Mutex<Server>>,
    drain_after_reply: bool,
}

impl InProcessTransport {
    pub fn new(server: Arc<Mutex<Server>>) -> Self {
        InProcessTransport {
            server,
            drain_after_reply: true,
        }
    }

    pub fn without_drain(server: Arc<Mutex<Server>>) -> Self {
        InProcessTransport {
            server,
            drain_after_reply: false,
        }
    }
}

impl Transport for InProcessTransport {
    fn round_trip(
        &mut self,
        frame: &RequestFrame,
        now: VirtualTime,
    ) -> Result<Reply, TransportError> {
        let encoded = wire::encode_request(frame)?;
        let (decoded, _) = wire::decode_request(&encoded)?;
        let mut server = self.server.lock().unwrap();
        let served = server
            .handle_frame(&decoded, now)
            .map_err(|e| TransportError::Server(e.to_string()))?;
        // Round-trip the response through the codec too.
        let block_size = server.provider().block_size();
        let encoded_response = wire::encode_response(&served.response, block_size)?;
        if self.drain_after_reply {
            server.drain_prefetch();
        }
        drop(server);
        let (response, _) = wire::decode_response(&encoded_response, block_size)?;
        Ok(Reply {
            response,
            sources: Some(served.sources),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{blocks, ActionKind, ActionStore};
    use crate::predictor::PredictorConfig;
    use crate::provider::{ExecutableImage, Provider, ProviderConfig};
    use crate::wire::Token;

    #[test]
    fn in_process_round_trip_through_codec() {
        let mut store = ActionStore::new(4);
        store
            .append_stream("app", ActionKind::Workload, &blocks(&[1, 3, 8, 9]))
            .unwrap();
        let mut provider = Provider::new(32, ProviderConfig::default());
        provider
            .add_image(ExecutableImage::synthetic("app", 16, 32))
            .unwrap();
        let server = Server::new(
            provider,
            store,
            PredictorConfig {
                seg_max: 4,
                ..Default::default()
            },
        )
        .unwrap();

        let mut transport = InProcessTransport::new(Arc::new(Mutex::new(server)));
        let frame = RequestFrame {
            token: Token([2; 16]),
            executable: "app".into(),
            block: 1u32.into(),
        };
        let reply = transport.round_trip(&frame, VirtualTime(0)).unwrap();
        let indices: Vec<u32> = reply.response.blocks.iter().map(|(b, _)| b.0).collect();
        assert_eq!(indices, vec![1, 3]);
        assert_eq!(reply.sources.as_ref().unwrap().len(), 2);
    }
}
