//! External-process segment model speaking a line-delimited JSON protocol
//! over the child's stdin/stdout.
//!
//! One request record out, one response record back, one request in flight
//! per adapter instance. The protocol is versioned (`protocol_version: 1`);
//! unknown response fields are ignored for forward compatibility. The
//! `prompt` bbox/roi variants are reserved fields transported opaquely.
//!
//! Request record (one line):
//!
//! ```json
//! {"protocol_version":1,"segment_id":0,"clip_id":"straight_0000",
//!  "frame":{"center":{"t":0.0,"x":0.0,"y":0.0,"theta":0.0},
//!           "width_bins":224,"height_bins":224,"bin_size":0.1,"overlap_ratio":0.1},
//!  "poses":[[112,0,128],[112,25,128]],
//!  "image_paths":["images/clip/0.0.jpg"],
//!  "cache_tokens":"[lane] u112 v0 u112 v22 [/lane] [none]",
//!  "prompt":{"kind":"coord","u":640,"v":360}}
//! ```
//!
//! Response record (one line):
//!
//! ```json
//! {"protocol_version":1,"segment_id":0,
//!  "tokens":"[lane] u112 v0 u112 v224 [/lane] [none] [eos]",
//!  "model_info":{"name":"my-model"}}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::geometry::SegmentFrame;
use crate::models::{ModelCapabilities, ModelError, Prompt, SegmentModel, SegmentRequest};
use crate::TokenSequence;

pub const PROTOCOL_VERSION: u32 = 1;

/// On-the-wire request record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest {
    pub protocol_version: u32,
    pub segment_id: u64,
    pub clip_id: String,
    pub frame: SegmentFrame,
    /// Quantized (u, v, heading-bin) pose triples.
    pub poses: Vec<(u32, u32, u32)>,
    pub image_paths: Vec<String>,
    /// Canonical token text of the map-rule cache block (may be empty).
    pub cache_tokens: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Prompt>,
}

/// On-the-wire response record. Unknown fields are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(default = "default_protocol_version")]
    pub protocol_version: u32,
    pub segment_id: u64,
    /// Canonical token text of the segment output.
    pub tokens: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_info: Option<serde_json::Value>,
}

fn default_protocol_version() -> u32 {
    PROTOCOL_VERSION
}

/// How to reach and treat the external process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Command line, split on whitespace (no shell quoting).
    pub command: String,
    /// Per-segment response deadline, seconds.
    pub timeout_secs: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            timeout_secs: 60.0,
        }
    }
}

/// A spawned adapter process plus its line-oriented channel.
pub struct ProcessAdapter {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: mpsc::Receiver<std::io::Result<String>>,
    timeout: Duration,
    codec: Arc<Codec>,
    /// Set after a timeout or transport failure; the stream can no longer be
    /// trusted to pair requests with responses.
    poisoned: bool,
}

impl ProcessAdapter {
    /// Spawn the adapter process. Stderr passes through for diagnostics.
    pub fn spawn(config: &AdapterConfig, codec: Arc<Codec>) -> std::io::Result<Self> {
        let mut parts = config.command.split_whitespace();
        let program = parts.next().ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty adapter command")
        })?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                let failed = line.is_err();
                if tx.send(line).is_err() || failed {
                    break;
                }
            }
        });

        Ok(Self {
            child,
            stdin: Some(stdin),
            lines: rx,
            timeout: Duration::from_secs_f64(config.timeout_secs),
            codec,
            poisoned: false,
        })
    }

    fn write_request(&mut self, record: &WireRequest) -> Result<(), ModelError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| ModelError::ProcessExit("adapter stdin closed".into()))?;
        let mut line = serde_json::to_string(record)
            .map_err(|e| ModelError::Protocol(format!("request serialization: {e}")))?;
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| ModelError::ProcessExit(format!("write to adapter failed: {e}")))
    }

    fn read_response(&mut self) -> Result<WireResponse, ModelError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => serde_json::from_str(&line)
                .map_err(|e| ModelError::Protocol(format!("bad response record: {e}"))),
            Ok(Err(e)) => Err(ModelError::ProcessExit(format!("adapter stdout: {e}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(ModelError::Timeout {
                seconds: self.timeout.as_secs_f64(),
            }),
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                Err(ModelError::ProcessExit("adapter closed stdout".into()))
            }
        }
    }
}

impl SegmentModel for ProcessAdapter {
    fn capabilities(&self) -> ModelCapabilities {
        ModelCapabilities {
            supports_images: true,
            supports_prompt: true,
        }
    }

    fn generate(&mut self, request: &SegmentRequest) -> Result<TokenSequence, ModelError> {
        if self.poisoned {
            return Err(ModelError::ProcessExit(
                "adapter stream unusable after earlier failure".into(),
            ));
        }
        let record = WireRequest {
            protocol_version: PROTOCOL_VERSION,
            segment_id: request.segment_id,
            clip_id: request.clip_id.clone(),
            frame: request.frame,
            poses: request.poses.clone(),
            image_paths: request.image_paths.clone(),
            cache_tokens: self.codec.render(&request.cache_tokens),
            prompt: request.prompt.clone(),
        };
        let result = self.write_request(&record).and_then(|_| {
            let response = self.read_response()?;
            if response.protocol_version != PROTOCOL_VERSION {
                return Err(ModelError::Protocol(format!(
                    "protocol_version {} != {PROTOCOL_VERSION}",
                    response.protocol_version
                )));
            }
            if response.segment_id != request.segment_id {
                return Err(ModelError::Protocol(format!(
                    "response segment_id {} != request {}",
                    response.segment_id, request.segment_id
                )));
            }
            self.codec
                .parse_text(&response.tokens)
                .map_err(|e| ModelError::Protocol(format!("unparseable tokens: {e}")))
        });
        if result.is_err() {
            // A failed exchange leaves request/response pairing undefined.
            self.poisoned = true;
        }
        result
    }
}

impl Drop for ProcessAdapter {
    fn drop(&mut self) {
        self.stdin.take(); // EOF lets well-behaved adapters exit
        if matches!(self.child.try_wait(), Ok(None)) {
            std::thread::sleep(Duration::from_millis(50));
        }
        if matches!(self.child.try_wait(), Ok(None)) {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}
