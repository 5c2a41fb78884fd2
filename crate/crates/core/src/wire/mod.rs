//! Binary framed offload protocol and the two network roles.
//!
//! The edge client gates samples locally and sends each uncertain one as an
//! [`OffloadRequest`] carrying its top-k classes. The near-edge server derives
//! the expert domain from those classes itself, refines, and answers with an
//! [`OffloadResponse`]. One request per sample; replies are matched by id.

mod client;
mod frame;
mod proxy;
mod server;

pub use client::{run_edge_client, ClientConfig, ClientRun, ClientStats};
pub use frame::{
    decode, decode_header, decode_payload, encode, read_message, write_message, ErrorCode,
    ErrorMsg, Message, OffloadRequest, OffloadResponse, RequestBody, HEADER_LEN, MAGIC,
    MAX_PAYLOAD, MSG_ERROR, MSG_REQUEST, MSG_RESPONSE,
};
pub use proxy::DelayProxy;
pub use server::{serve_near_edge, NearEdgeServer, ServerHandle};
