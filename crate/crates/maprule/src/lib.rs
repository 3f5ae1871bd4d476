//! maprule — a toolkit for segmented lane/rule HD-map construction around a
//! pluggable segment model.
//!
//! The pipeline slides a fixed-size ego-aligned window along a driving
//! trajectory. For each segment it serializes trajectory poses, image
//! references and the previous segment's boundary cache into a token stream,
//! asks a segment model for the lane/rule tokens of that window, parses the
//! answer with a deterministic grammar parser, and hands lane stubs plus
//! their rule payloads forward so rules stay in force after their signs
//! leave view. Per-segment graphs are stitched into one continuous
//! world-frame map, and the evaluation suite scores lane geometry
//! (rasterized IoU), rule extraction and holistic (rule, lane) association
//! accuracy.
//!
//! Modules:
//! - [`map_model`] — clips, trajectories, graphs, validation.
//! - [`geometry`] — frames, transforms, quantization, rasterization, IoU.
//! - [`codec`] — the token grammar, serializer and deterministic parser.
//! - [`pipeline`] — segment planning, map-rule cache, stitching.
//! - [`models`] — segment-model contract plus oracle, noisy and
//!   external-process backends.
//! - [`eval`] — lane matching, F_vec, rule extraction and HMA metrics.
//! - [`synth`] — deterministic synthetic clip generator.
//! - [`files`] — on-disk clip / map / report formats.
//! - [`render`] — SVG map rendering.

pub mod codec;
pub mod eval;
pub mod files;
pub mod geometry;
pub mod map_model;
pub mod models;
pub mod pipeline;
pub mod render;
pub mod synth;

pub use codec::{Codec, CodecError, ParseMode, ParsedSegment, RuleVocabulary, Token, TokenSequence};
pub use geometry::{FrameSpec, GeometryError, SegmentFrame};
pub use map_model::{
    graph_equal, validate_clip, Clip, Finding, Lane, LaneId, LaneKind, MapGraph, Point2, Pose,
    Rule, RuleId, Severity, Trajectory,
};
