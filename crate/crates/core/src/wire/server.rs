use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use super::frame::{
    read_message, write_message, ErrorCode, ErrorMsg, Message, OffloadRequest, OffloadResponse,
    RequestBody,
};
use crate::error::{Error, Result};
use crate::partition::{enumerate_expert_domains, PartitionMap};
use crate::router::{refine, ExpertBackend, RefineMode, SampleRef};

/// Read-only state shared by every connection.
pub struct NearEdgeServer<B> {
    backend: B,
    pm: PartitionMap,
    k: usize,
    mode: RefineMode,
}

impl<B: ExpertBackend> NearEdgeServer<B> {
    /// Checks that the backend covers every routable domain.
    pub fn new(backend: B, pm: PartitionMap, k: usize) -> Result<Self> {
        if backend.num_classes() != pm.num_classes() {
            return Err(Error::validation(format!(
                "backend has {} classes, partition map {}",
                backend.num_classes(),
                pm.num_classes()
            )));
        }
        for d in enumerate_expert_domains(pm.num_partitions(), k)? {
            if !backend.has_expert(&d) {
                return Err(Error::MissingExpert(d.to_string()));
            }
        }
        Ok(NearEdgeServer {
            backend,
            pm,
            k,
            mode: RefineMode::Full,
        })
    }

    pub fn with_refine_mode(mut self, mode: RefineMode) -> Self {
        self.mode = mode;
        self
    }

    /// Answers one request. Depends only on the request and immutable state.
    pub fn handle(&self, req: &OffloadRequest) -> Message {
        let start = Instant::now();
        let fail = |code, message: String| {
            Message::Error(ErrorMsg {
                request_id: req.request_id,
                code,
                message,
            })
        };
        let n = self.pm.num_classes();
        if let Some(&c) = req.topk.iter().find(|&&c| c as usize >= n) {
            return fail(ErrorCode::BadFrame, format!("top-k class {c} out of range [0, {n})"));
        }
        let topk: Vec<usize> = req.topk.iter().map(|&c| c as usize).collect();
        let domain = match self.pm.domain_of_topk(&topk) {
            Ok(d) => d,
            Err(e) => return fail(ErrorCode::BadFrame, e.to_string()),
        };
        if domain.len() > self.k || !self.backend.has_expert(&domain) {
            return fail(ErrorCode::NoExpert, format!("no expert for domain {domain}"));
        }
        let sample = match &req.body {
            RequestBody::TraceIndex(i) => SampleRef::Index(*i),
            RequestBody::Payload(bytes) => SampleRef::Payload(bytes),
        };
        let row = match self.backend.expert_logits(&domain, sample) {
            Ok(row) => row,
            Err(e) => {
                let code = match req.body {
                    RequestBody::TraceIndex(_) => ErrorCode::UnknownSample,
                    RequestBody::Payload(_) => ErrorCode::Internal,
                };
                return fail(code, e.to_string());
            }
        };
        match refine(&row, &domain, &self.pm, self.mode) {
            Ok(predicted) => Message::Response(OffloadResponse {
                request_id: req.request_id,
                predicted_class: predicted as u32,
                domain,
                server_latency_us: start.elapsed().as_micros().min(u32::MAX as u128) as u32,
            }),
            Err(e) => fail(ErrorCode::Internal, e.to_string()),
        }
    }

    fn serve_connection(&self, stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        loop {
            let msg = match read_message(&mut reader) {
                Ok(Some(m)) => m,
                Ok(None) => return Ok(()),
                Err(Error::Io(e)) => return Err(Error::Io(e)),
                Err(e) => {
                    // framing is lost; report and drop the connection
                    let reply = Message::Error(ErrorMsg {
                        request_id: 0,
                        code: ErrorCode::BadFrame,
                        message: e.to_string(),
                    });
                    write_message(&mut writer, &reply)?;
                    writer.flush()?;
                    return Err(e);
                }
            };
            let reply = match msg {
                Message::Request(req) => self.handle(&req),
                other => Message::Error(ErrorMsg {
                    request_id: other.request_id(),
                    code: ErrorCode::BadFrame,
                    message: "server accepts only offload requests".into(),
                }),
            };
            write_message(&mut writer, &reply)?;
            // flush when no further request is already buffered
            if reader.buffer().is_empty() {
                writer.flush()?;
            }
        }
    }
}

/// Running server; dropping the handle does not stop it, call [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Binds and serves on a background thread, one thread per connection.
pub fn serve_near_edge<B>(addr: impl ToSocketAddrs, server: NearEdgeServer<B>) -> Result<ServerHandle>
where
    B: ExpertBackend + 'static,
{
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let state = Arc::new(server);
    let stop_flag = Arc::clone(&stop);
    let accept = thread::Builder::new()
        .name("covi-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let state = Arc::clone(&state);
                let _ = thread::Builder::new()
                    .name("covi-conn".into())
                    .spawn(move || {
                        let _ = state.serve_connection(stream);
                    });
            }
        })?;
    Ok(ServerHandle {
        addr: local,
        stop,
        accept: Some(accept),
    })
}
