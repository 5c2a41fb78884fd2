use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::frame::{read_message, write_message, Message, OffloadRequest, RequestBody};
use crate::error::{Error, Result};
use crate::partition::PartitionMap;
use crate::router::{route_sample, CollabOutcome, RoutingDecision};
use crate::trace::PredictionTrace;

#[derive(Debug, Clone, Copy)]
pub struct ClientConfig {
    /// Reconnect attempts after the first failure.
    pub retries: u32,
    pub retry_backoff: Duration,
    pub connect_timeout: Duration,
    pub read_timeout: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            retries: 3,
            retry_backoff: Duration::from_millis(100),
            connect_timeout: Duration::from_secs(5),
            read_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientStats {
    pub requests: usize,
    pub reconnects: u32,
    /// Client-observed send-to-response time per request, in request order.
    pub round_trips_ms: Vec<f64>,
    pub server_latency_us: Vec<u32>,
}

impl ClientStats {
    pub fn mean_round_trip_ms(&self) -> Option<f64> {
        if self.round_trips_ms.is_empty() {
            None
        } else {
            Some(self.round_trips_ms.iter().sum::<f64>() / self.round_trips_ms.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientRun {
    pub outcome: CollabOutcome,
    pub stats: ClientStats,
}

struct Pending {
    sample: usize,
    request: OffloadRequest,
}

fn connect(addr: &[SocketAddr], cfg: &ClientConfig) -> Result<TcpStream> {
    let mut last = None;
    for a in addr {
        match TcpStream::connect_timeout(a, cfg.connect_timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                s.set_read_timeout(Some(cfg.read_timeout))?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last
        .map(Error::Io)
        .unwrap_or_else(|| Error::validation("server address resolved to nothing")))
}

/// Sends the outstanding requests over one connection and collects replies
/// until every one is answered or the connection fails.
fn exchange(
    stream: TcpStream,
    outstanding: &[&Pending],
    answered: &mut HashMap<u64, (usize, f64, u32)>,
) -> Result<()> {
    let writer_stream = stream.try_clone()?;
    let (tx, rx) = mpsc::channel::<(u64, Instant)>();
    let requests: Vec<OffloadRequest> = outstanding.iter().map(|p| p.request.clone()).collect();
    let writer = thread::spawn(move || -> Result<()> {
        let mut w = BufWriter::new(writer_stream);
        for r in &requests {
            // timestamp before the bytes can reach the server
            let _ = tx.send((r.request_id, Instant::now()));
            write_message(&mut w, &Message::Request(r.clone()))?;
        }
        w.flush()?;
        Ok(())
    });
    let mut sent_at: HashMap<u64, Instant> = HashMap::new();
    let mut reader = BufReader::new(stream);
    let mut remaining = outstanding.len();
    let result = (|| -> Result<()> {
        while remaining > 0 {
            let msg = read_message(&mut reader)?.ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "server closed the connection",
                ))
            })?;
            let now = Instant::now();
            while let Ok((id, t)) = rx.try_recv() {
                sent_at.insert(id, t);
            }
            match msg {
                Message::Response(r) => {
                    let rtt = sent_at
                        .get(&r.request_id)
                        .map(|t| now.duration_since(*t).as_secs_f64() * 1e3)
                        .unwrap_or(0.0);
                    if answered
                        .insert(r.request_id, (r.predicted_class as usize, rtt, r.server_latency_us))
                        .is_none()
                    {
                        remaining -= 1;
                    }
                }
                Message::Error(e) => {
                    return Err(Error::Remote {
                        code: e.code as u16,
                        message: format!("request {}: {}", e.request_id, e.message),
                    })
                }
                Message::Request(_) => {
                    return Err(Error::Frame {
                        offset: 4,
                        reason: "server sent a request frame".into(),
                    })
                }
            }
        }
        Ok(())
    })();
    let _ = reader.get_ref().shutdown(std::net::Shutdown::Both);
    let wrote = writer.join().unwrap_or_else(|_| Err(Error::validation("writer thread panicked")));
    result?;
    wrote
}

/// Gates every edge row locally and offloads the uncertain ones, one request
/// per sample, pipelined on a single connection. Transport failures trigger a
/// reconnect that resends only unanswered requests; after `retries` such
/// attempts the run fails. Error replies from the server fail immediately.
pub fn run_edge_client(
    server: impl ToSocketAddrs,
    edge: &PredictionTrace,
    tau: f64,
    k: usize,
    pm: &PartitionMap,
    cfg: &ClientConfig,
) -> Result<ClientRun> {
    let addrs: Vec<SocketAddr> = server.to_socket_addrs()?.collect();
    let mut decisions = Vec::with_capacity(edge.num_samples());
    let mut predictions = vec![usize::MAX; edge.num_samples()];
    let mut pending = Vec::new();
    for (i, row) in edge.rows().enumerate() {
        let d = route_sample(row, tau, k, pm)?;
        match &d {
            RoutingDecision::Local { predicted, .. } => predictions[i] = *predicted,
            RoutingDecision::Offload { topk, .. } => pending.push(Pending {
                sample: i,
                request: OffloadRequest {
                    request_id: pending.len() as u64 + 1,
                    body: RequestBody::TraceIndex(i as u64),
                    topk: topk.iter().map(|&c| c as u32).collect(),
                },
            }),
        }
        decisions.push(d);
    }

    let mut stats = ClientStats {
        requests: pending.len(),
        ..Default::default()
    };
    let mut answered: HashMap<u64, (usize, f64, u32)> = HashMap::with_capacity(pending.len());
    let mut attempt = 0u32;
    while answered.len() < pending.len() {
        let outstanding: Vec<&Pending> = pending
            .iter()
            .filter(|p| !answered.contains_key(&p.request.request_id))
            .collect();
        let res = connect(&addrs, cfg).and_then(|s| exchange(s, &outstanding, &mut answered));
        match res {
            Ok(()) => {}
            Err(e @ Error::Remote { .. }) => return Err(e),
            Err(e) => {
                if attempt >= cfg.retries {
                    return Err(e);
                }
                attempt += 1;
                stats.reconnects = attempt;
                thread::sleep(cfg.retry_backoff);
            }
        }
    }

    for p in &pending {
        let (class, rtt, server_us) = answered[&p.request.request_id];
        predictions[p.sample] = class;
        stats.round_trips_ms.push(rtt);
        stats.server_latency_us.push(server_us);
    }
    Ok(ClientRun {
        outcome: CollabOutcome::from_parts(predictions, decisions, edge.labels()),
        stats,
    })
}
