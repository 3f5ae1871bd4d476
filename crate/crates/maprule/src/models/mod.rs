//! The segment-model contract and its backends.
//!
//! A [`SegmentModel`] answers one request — "what lanes and rules are in
//! this window?" — with a token sequence in the output grammar. Three
//! backends ship here: a ground-truth oracle and a visibility-limited noisy
//! oracle (both answer from clip ground truth, making the non-neural
//! pipeline verifiable end to end), and an external-process adapter that
//! speaks a line-delimited JSON protocol so any ML runtime can plug in.

mod adapter;
mod synthetic;

pub use adapter::{AdapterConfig, ProcessAdapter, WireRequest, WireResponse, PROTOCOL_VERSION};
pub use synthetic::{ground_truth_slice, SyntheticModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Token, TokenSequence};
use crate::geometry::SegmentFrame;

/// What a backend can make use of. Purely informational: requests always
/// carry every field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCapabilities {
    pub supports_images: bool,
    pub supports_prompt: bool,
}

/// An interactive prompt directing the model at one traffic sign.
///
/// Only the coordinate variant is interpreted by the built-in backends; the
/// bounding-box and ROI variants are reserved wire fields transported
/// opaquely for external models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    /// Discretized sign coordinates projected onto the PV image.
    Coord { u: u32, v: u32 },
    /// Reserved: bounding box drawn on the input image.
    Bbox { value: serde_json::Value },
    /// Reserved: path to a cropped region-of-interest image.
    Roi { path: String },
}

/// One segment request. `input_tokens` is the unified serialized input
/// stream; the structured fields carry the same content for transports and
/// backends that want it pre-split.
#[derive(Debug, Clone)]
pub struct SegmentRequest {
    pub segment_id: u64,
    pub clip_id: String,
    pub frame: SegmentFrame,
    /// Quantized (u, v, heading-bin) triples, one per sampled pose.
    pub poses: Vec<(u32, u32, u32)>,
    pub image_paths: Vec<String>,
    /// The previous segment's boundary cache, already projected into this
    /// frame; empty on the first segment or when caching is disabled.
    pub cache_tokens: Vec<Token>,
    pub prompt: Option<Prompt>,
    /// Full interleaved input stream (images, poses, cache, prompt).
    pub input_tokens: Vec<Token>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model timed out after {seconds:.1}s")]
    Timeout { seconds: f64 },
    #[error("model process exited: {0}")]
    ProcessExit(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl ModelError {
    /// Whether this failure is a wire-protocol violation (distinct exit
    /// code at the CLI surface).
    pub fn is_protocol_violation(&self) -> bool {
        matches!(self, ModelError::Protocol(_))
    }
}

/// The segment-model contract: given identical request content and seed,
/// responses must be identical.
pub trait SegmentModel: Send {
    fn capabilities(&self) -> ModelCapabilities;

    /// Answer one segment request with output-grammar tokens.
    fn generate(&mut self, request: &SegmentRequest) -> Result<TokenSequence, ModelError>;
}

/// Controlled degradation for the noisy oracle. All-default means "behave
/// exactly like the ground-truth oracle".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Per-point Gaussian jitter, meters.
    pub point_jitter_sigma: f64,
    /// Probability of dropping each lane fragment.
    pub lane_drop_prob: f64,
    /// Probability of dropping each rule emission.
    pub rule_drop_prob: f64,
    /// When set to `k`, a rule whose sign sits at world position `s` is
    /// emitted from ground truth only in segments whose anchor lies within
    /// `k/2` advance distances of `s` — the k segments nearest the sign.
    /// Everywhere else it is emitted only if the incoming cache carries it.
    pub sign_visibility_segments: Option<u32>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            point_jitter_sigma: 0.0,
            lane_drop_prob: 0.0,
            rule_drop_prob: 0.0,
            sign_visibility_segments: None,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.point_jitter_sigma < 0.0 {
            return Err("point_jitter_sigma must be >= 0".into());
        }
        for (name, p) in [
            ("lane_drop_prob", self.lane_drop_prob),
            ("rule_drop_prob", self.rule_drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.point_jitter_sigma == 0.0
            && self.lane_drop_prob == 0.0
            && self.rule_drop_prob == 0.0
            && self.sign_visibility_segments.is_none()
    }
}
