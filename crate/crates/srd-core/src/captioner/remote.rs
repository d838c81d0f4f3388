//! TCP client for an external captioner service.
//!
//! Protocol version 1, over a length-prefixed byte stream: each frame is a
//! big-endian `u32` byte length followed by that many bytes of UTF-8 JSON.
//! Request: `{"v":1,"prompt":...,"width":...,"height":...,"pixels_b64":...}`
//! with `pixels_b64` the base64 of the raw RGB24 buffer. Response:
//! `{"v":1,"caption":...}`. The caption is lowercased and split on
//! whitespace before being returned.
//!
//! Failure classes: connection/timeout problems surface as
//! [`Error::Transport`] and are retried up to the configured budget; a
//! response that arrives but does not match the schema surfaces as
//! [`Error::Protocol`] with the raw payload attached and is never retried.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::image::RasterImage;
use crate::error::{Error, Result};

use super::{AttentionMap, CaptionerBackend};

pub const PROTOCOL_VERSION: u32 = 1;

/// Ceiling on a single frame; a 224x224 RGB image is ~200 KiB base64, so
/// anything near this limit is a corrupt or hostile peer.
pub const MAX_FRAME_BYTES: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// `host:port` of the captioner service.
    pub endpoint: String,
    #[serde(default = "default_connect_timeout_ms")]
    pub connect_timeout_ms: u64,
    #[serde(default = "default_io_timeout_ms")]
    pub io_timeout_ms: u64,
    /// Extra attempts after the first transport failure. Protocol errors
    /// are never retried.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_connect_timeout_ms() -> u64 {
    2_000
}

fn default_io_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            connect_timeout_ms: default_connect_timeout_ms(),
            io_timeout_ms: default_io_timeout_ms(),
            retries: default_retries(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CaptionRequest {
    v: u32,
    prompt: String,
    width: u32,
    height: u32,
    pixels_b64: String,
}

#[derive(Serialize, Deserialize)]
struct CaptionResponse {
    v: u32,
    caption: String,
}

/// Write one length-prefixed frame. Public so test fixtures and server
/// implementations can speak the same protocol.
pub fn write_frame(stream: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| std::io::Error::other("frame exceeds u32 length"))?;
    stream.write_all(&len.to_be_bytes())?;
    stream.write_all(payload)?;
    stream.flush()
}

/// Read one length-prefixed frame, enforcing [`MAX_FRAME_BYTES`].
pub fn read_frame(stream: &mut impl Read) -> Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    stream
        .read_exact(&mut len_bytes)
        .map_err(|e| Error::Transport(format!("reading frame length: {e}")))?;
    let len = u32::from_be_bytes(len_bytes);
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol {
            detail: format!("frame of {len} bytes exceeds the {MAX_FRAME_BYTES}-byte limit"),
            raw: String::new(),
        });
    }
    let mut payload = vec![0u8; len as usize];
    stream
        .read_exact(&mut payload)
        .map_err(|e| Error::Transport(format!("reading {len}-byte frame: {e}")))?;
    Ok(payload)
}

/// One request/response exchange on a fresh connection.
fn exchange_once(config: &RemoteConfig, request_bytes: &[u8]) -> Result<Vec<u8>> {
    let addr = config
        .endpoint
        .to_socket_addrs()
        .map_err(|e| Error::Transport(format!("resolving {}: {e}", config.endpoint)))?
        .next()
        .ok_or_else(|| Error::Transport(format!("{} resolves to no address", config.endpoint)))?;
    let mut stream = TcpStream::connect_timeout(&addr, Duration::from_millis(config.connect_timeout_ms))
        .map_err(|e| Error::Transport(format!("connecting to {addr}: {e}")))?;
    let io_timeout = Some(Duration::from_millis(config.io_timeout_ms));
    stream
        .set_read_timeout(io_timeout)
        .and_then(|_| stream.set_write_timeout(io_timeout))
        .map_err(|e| Error::Transport(format!("configuring socket timeouts: {e}")))?;
    write_frame(&mut stream, request_bytes)
        .map_err(|e| Error::Transport(format!("sending request: {e}")))?;
    read_frame(&mut stream)
}

/// Ask a remote captioner to caption `image`, retrying transport failures.
pub fn remote_caption(
    config: &RemoteConfig,
    image: &RasterImage,
    prompt: &[String],
) -> Result<Vec<String>> {
    let request = CaptionRequest {
        v: PROTOCOL_VERSION,
        prompt: prompt.join(" "),
        width: image.width(),
        height: image.height(),
        pixels_b64: BASE64.encode(image.pixels()),
    };
    let request_bytes = serde_json::to_vec(&request)
        .map_err(|e| Error::Transport(format!("encoding request: {e}")))?;

    let mut last_err = None;
    for _attempt in 0..=config.retries {
        match exchange_once(config, &request_bytes) {
            Ok(payload) => return parse_response(&payload),
            Err(e @ Error::Transport(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt ran"))
}

fn parse_response(payload: &[u8]) -> Result<Vec<String>> {
    let raw = || String::from_utf8_lossy(payload).into_owned();
    let response: CaptionResponse = serde_json::from_slice(payload).map_err(|e| Error::Protocol {
        detail: format!("response is not a valid caption object: {e}"),
        raw: raw(),
    })?;
    if response.v != PROTOCOL_VERSION {
        return Err(Error::Protocol {
            detail: format!(
                "unsupported protocol version {} (expected {PROTOCOL_VERSION})",
                response.v
            ),
            raw: raw(),
        });
    }
    Ok(response
        .caption
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect())
}

/// [`CaptionerBackend`] adapter over [`remote_caption`]. Remote services
/// expose no attention map, so `attention_map` reports none.
#[derive(Debug, Clone)]
pub struct RemoteCaptioner {
    pub config: RemoteConfig,
}

impl RemoteCaptioner {
    pub fn new(config: RemoteConfig) -> Self {
        RemoteCaptioner { config }
    }
}

impl CaptionerBackend for RemoteCaptioner {
    fn caption(&self, image: &RasterImage, prompt: &[String]) -> Result<Vec<String>> {
        remote_caption(&self.config, image, prompt)
    }

    fn attention_map(&self, _image: &RasterImage) -> Result<Option<AttentionMap>> {
        Ok(None)
    }
}
