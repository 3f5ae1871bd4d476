//! Segment scheduling, the map-rule cache between segments, model
//! invocation, and stitching of per-segment outputs into one continuous
//! world-frame map.
//!
//! Segments are anchored by arc length, not timestamp: anchors sit at
//! multiples of the advance distance `(1 - overlap) * frame height`, so
//! consecutive windows share exactly the configured overlap strip on
//! straight trajectories (and approximately on curves). Within a clip the
//! segment loop is strictly sequential — the cache is an autoregressive
//! dependency — while different clips parallelize freely.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Codec, CodecError, ParseDiagnostic, ParseMode, Token};
use crate::geometry::{clip_polyline_halfplane, FrameSpec, GeometryError, SegmentFrame};
use crate::map_model::{
    normalize_angle, Clip, Lane, LaneId, LaneKind, MapGraph, Point2, Rule, RuleId, Trajectory,
};
use crate::models::{ModelError, Prompt, SegmentModel, SegmentRequest};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("trajectory too short: {length:.1} m, needs at least {required:.1} m")]
    TrajectoryTooShort { length: f64, required: f64 },
    #[error("got {graphs} segment graphs for a plan of {segments} segments")]
    PlanMismatch { graphs: usize, segments: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// The segment schedule for one clip: ego-anchored frames at arc-length
/// intervals, the final one always covering the trajectory end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub frames: Vec<SegmentFrame>,
    /// Arc length of each anchor along the trajectory.
    pub anchor_arcs: Vec<f64>,
    /// Nominal spacing between anchors.
    pub advance_distance: f64,
    /// Total trajectory arc length.
    pub trajectory_length: f64,
}

impl SegmentPlan {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Forward depth of segment `i` that survives stitching: geometry beyond
    /// this local `y` belongs to the succeeding segment. The last segment
    /// keeps its full depth.
    pub fn cut_depth(&self, i: usize) -> f64 {
        let frame = &self.frames[i];
        if i + 1 >= self.frames.len() {
            return frame.height();
        }
        let spacing = self.anchor_arcs[i + 1] - self.anchor_arcs[i];
        frame.spec.advance_distance().min(spacing)
    }
}

/// Place segment anchors along the trajectory at advance-distance intervals
/// starting at the first pose, with heading interpolated from the
/// trajectory. Fails if the trajectory does not fill a single frame.
pub fn plan_segments(trajectory: &Trajectory, spec: &FrameSpec) -> Result<SegmentPlan, PipelineError> {
    spec.validate()?;
    let length = trajectory.arc_length();
    let height = spec.height();
    if length + 1e-9 < height {
        return Err(PipelineError::TrajectoryTooShort {
            length,
            required: height,
        });
    }
    let advance = spec.advance_distance();
    let mut anchor_arcs = Vec::new();
    let mut s = 0.0;
    loop {
        anchor_arcs.push(s);
        if s + height >= length - 1e-9 {
            break;
        }
        s += advance;
    }
    let frames = anchor_arcs
        .iter()
        .map(|&s| spec.at(trajectory.pose_at_arc(s)))
        .collect();
    Ok(SegmentPlan {
        frames,
        anchor_arcs,
        advance_distance: advance,
        trajectory_length: length,
    })
}

/// One boundary lane stub: the tail of a lane inside the overlap strip,
/// already projected into the next segment's frame, carrying its full rule
/// payloads so persistence survives the hand-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStub {
    /// Polyline fragment in the NEXT frame's local coordinates.
    pub points: Vec<Point2>,
    pub kind: LaneKind,
    /// Full kv payloads, not references.
    pub rules: Vec<Vec<(String, String)>>,
}

/// The map-rule cache handed from one segment to the next.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapRuleCache {
    pub stubs: Vec<CacheStub>,
}

impl MapRuleCache {
    pub fn is_empty(&self) -> bool {
        self.stubs.is_empty()
    }

    /// Serialize the stubs as a lane-block token sequence (no terminator) in
    /// the next frame's coordinates, ready to splice into the next input.
    pub fn to_tokens(&self, codec: &Codec, next_frame: &SegmentFrame) -> Result<Vec<Token>, CodecError> {
        let mut graph = MapGraph::default();
        for (i, stub) in self.stubs.iter().enumerate() {
            let lane_id = LaneId(format!("cache_{i}"));
            graph.lanes.push(Lane {
                id: lane_id.clone(),
                kind: stub.kind,
                points: stub.points.clone(),
            });
            for kv in &stub.rules {
                let existing = graph
                    .rules
                    .iter()
                    .find(|r| r.kv_set().into_iter().collect::<Vec<_>>() == *kv)
                    .map(|r| r.id.clone());
                let rule_id = existing.unwrap_or_else(|| {
                    let id = RuleId(format!("cache_r{}", graph.rules.len()));
                    graph.rules.push(Rule {
                        id: id.clone(),
                        kv: kv.clone(),
                        sign_position: None,
                    });
                    id
                });
                graph.associations.insert((rule_id, lane_id.clone()));
            }
        }
        let mut tokens = codec.serialize_segment(&graph, next_frame)?;
        debug_assert_eq!(tokens.last(), Some(&Token::EndOfSequence));
        tokens.pop();
        Ok(tokens)
    }
}

/// Extract the map-rule cache from one segment's output: clip every lane to
/// the overlap strip at the leading boundary, project the fragments into
/// the next frame, and attach each lane's full rule payloads. An empty
/// cache is valid.
pub fn extract_cache(
    segment_graph: &MapGraph,
    current: &SegmentFrame,
    next: &SegmentFrame,
) -> MapRuleCache {
    let strip_start = current.height() - current.spec.overlap_depth();
    let mut stubs = Vec::new();
    for lane in &segment_graph.lanes {
        let payloads: Vec<Vec<(String, String)>> = segment_graph
            .rules_of(&lane.id)
            .iter()
            .map(|r| r.kv_set().into_iter().collect())
            .collect();
        for piece in clip_polyline_halfplane(&lane.points, |p| p.y - strip_start) {
            let world: Vec<Point2> = piece.iter().map(|p| current.from_segment(*p)).collect();
            for projected in next.clip_world_polyline(&world) {
                if polyline_length(&projected) < next.spec.bin_size {
                    continue;
                }
                stubs.push(CacheStub {
                    points: projected,
                    kind: lane.kind,
                    rules: payloads.clone(),
                });
            }
        }
    }
    MapRuleCache { stubs }
}

fn polyline_length(points: &[Point2]) -> f64 {
    points.windows(2).map(|w| w[0].dist(&w[1])).sum()
}

/// Outcome of one segment: the parsed local graph plus diagnostics. A model
/// failure yields an empty graph and the error message; the pipeline keeps
/// going.
#[derive(Debug, Clone)]
pub struct SegmentResult {
    pub index: usize,
    pub frame: SegmentFrame,
    /// Segment-local output graph (empty on model failure).
    pub graph: MapGraph,
    pub parse_diagnostics: Vec<ParseDiagnostic>,
    pub model_error: Option<String>,
    pub protocol_violation: bool,
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub duration: std::time::Duration,
}

/// Pipeline knobs; defaults are the standard configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunParams {
    pub frame: FrameSpec,
    /// Images (and pose samples) per segment.
    pub images_per_segment: usize,
    pub angle_bins: u32,
    pub cache_enabled: bool,
    /// Distance gate for joining fragments across segments, meters.
    pub join_epsilon: f64,
    /// Heading gate for joining fragments, degrees.
    pub heading_gate_deg: f64,
    /// Target one sign: only its rules are requested (coordinate prompt).
    pub prompt_rule: Option<RuleId>,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            frame: FrameSpec::default(),
            images_per_segment: 10,
            angle_bins: 256,
            cache_enabled: true,
            join_epsilon: 0.5,
            heading_gate_deg: 30.0,
            prompt_rule: None,
        }
    }
}

/// Run one segment: serialize the input, invoke the model, parse the output
/// in recovery mode. Model failures are recorded, not raised.
#[allow(clippy::too_many_arguments)]
pub fn run_segment(
    model: &mut dyn SegmentModel,
    codec: &Codec,
    clip_id: &str,
    index: usize,
    frame: &SegmentFrame,
    poses: &[crate::map_model::Pose],
    image_paths: Vec<String>,
    cache_tokens: Vec<Token>,
    prompt: Option<Prompt>,
    params: &RunParams,
) -> Result<SegmentResult, PipelineError> {
    let start = std::time::Instant::now();
    let input_tokens = codec.serialize_input(
        poses,
        frame,
        params.angle_bins,
        image_paths.len(),
        &cache_tokens,
        match prompt {
            Some(Prompt::Coord { u, v }) => Some((u, v)),
            _ => None,
        },
    )?;
    let mut quantized = Vec::with_capacity(poses.len());
    for pose in poses {
        quantized.push(frame.quantize_pose(pose, params.angle_bins)?);
    }
    let request = SegmentRequest {
        segment_id: index as u64,
        clip_id: clip_id.to_owned(),
        frame: *frame,
        poses: quantized,
        image_paths,
        cache_tokens,
        prompt,
        input_tokens: input_tokens.clone(),
    };

    let mut result = SegmentResult {
        index,
        frame: *frame,
        graph: MapGraph::default(),
        parse_diagnostics: Vec::new(),
        model_error: None,
        protocol_violation: false,
        input_tokens: input_tokens.len(),
        output_tokens: 0,
        duration: std::time::Duration::ZERO,
    };
    match model.generate(&request) {
        Ok(tokens) => {
            result.output_tokens = tokens.len();
            let parsed = codec.parse(&tokens, frame, ParseMode::Recover)?;
            result.graph = parsed.graph;
            result.parse_diagnostics = parsed.diagnostics;
        }
        Err(err) => {
            result.protocol_violation = err.is_protocol_violation();
            result.model_error = Some(err.to_string());
        }
    }
    result.duration = start.elapsed();
    Ok(result)
}

/// Per-lane stitch provenance: which segments contributed which point
/// ranges of the final polyline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceSpan {
    pub segment: usize,
    /// Point index range `[start, end)` into the stitched lane.
    pub start: usize,
    pub end: usize,
}

/// A stitch discontinuity: two chains that look like the same lane but were
/// too far apart to join (typically a failed segment in between).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDiagnostic {
    pub from_lane: usize,
    pub to_lane: usize,
    pub distance: f64,
}

/// The stitched, world-frame map with provenance and gap diagnostics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StitchedMap {
    pub graph: MapGraph,
    /// Per-lane contributing spans, parallel to `graph.lanes`.
    pub provenance: Vec<Vec<ProvenanceSpan>>,
    pub gaps: Vec<GapDiagnostic>,
}

struct Fragment {
    points: Vec<Point2>,
    kind: LaneKind,
    rules: Vec<Vec<(String, String)>>,
    segment: usize,
}

struct Chain {
    points: Vec<Point2>,
    kind: LaneKind,
    rules: Vec<Vec<(String, String)>>,
    spans: Vec<ProvenanceSpan>,
}

fn end_heading(points: &[Point2]) -> Option<f64> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let (a, b) = (points[n - 2], points[n - 1]);
    Some((b.y - a.y).atan2(b.x - a.x))
}

fn start_heading(points: &[Point2]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let (a, b) = (points[0], points[1]);
    Some((b.y - a.y).atan2(b.x - a.x))
}

fn headings_compatible(a: Option<f64>, b: Option<f64>, gate_rad: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => normalize_angle(a - b).abs() <= gate_rad,
        _ => false,
    }
}

/// Stitch per-segment local graphs into one world-frame map.
///
/// Inside each overlap the succeeding segment wins: segment `i` keeps only
/// its local depth up to [`SegmentPlan::cut_depth`]. Fragments whose
/// endpoints meet within `join_epsilon` with compatible headings merge into
/// one lane and pool their rule payloads; rules deduplicate by kv equality
/// and associations are rebuilt.
pub fn stitch(
    segment_graphs: &[MapGraph],
    plan: &SegmentPlan,
    params: &RunParams,
) -> Result<StitchedMap, PipelineError> {
    if segment_graphs.len() != plan.frames.len() {
        return Err(PipelineError::PlanMismatch {
            graphs: segment_graphs.len(),
            segments: plan.frames.len(),
        });
    }
    let gate_rad = params.heading_gate_deg.to_radians();

    // Collect world-frame fragments, preceding side clipped out of overlaps.
    let mut fragments: Vec<Fragment> = Vec::new();
    for (i, graph) in segment_graphs.iter().enumerate() {
        let frame = &plan.frames[i];
        let cut = plan.cut_depth(i);
        for lane in &graph.lanes {
            let rules: Vec<Vec<(String, String)>> = graph
                .rules_of(&lane.id)
                .iter()
                .map(|r| r.kv_set().into_iter().collect())
                .collect();
            for piece in clip_polyline_halfplane(&lane.points, |p| cut - p.y) {
                fragments.push(Fragment {
                    points: piece.iter().map(|p| frame.from_segment(*p)).collect(),
                    kind: lane.kind,
                    rules: rules.clone(),
                    segment: i,
                });
            }
        }
    }

    // Grow chains in travel order.
    let mut chains: Vec<Chain> = Vec::new();
    for frag in fragments {
        let frag_start_heading = start_heading(&frag.points);
        let mut best: Option<(usize, f64)> = None;
        for (ci, chain) in chains.iter().enumerate() {
            let Some(last) = chain.points.last() else { continue };
            let d = last.dist(&frag.points[0]);
            if d > params.join_epsilon {
                continue;
            }
            if !headings_compatible(end_heading(&chain.points), frag_start_heading, gate_rad) {
                continue;
            }
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((ci, d));
            }
        }
        match best {
            Some((ci, d)) => {
                let chain = &mut chains[ci];
                let mut pts = frag.points;
                if d < 1e-6 {
                    pts.remove(0);
                }
                let start = chain.points.len();
                chain.points.extend(pts);
                chain.spans.push(ProvenanceSpan {
                    segment: frag.segment,
                    start,
                    end: chain.points.len(),
                });
                for kv in frag.rules {
                    if !chain.rules.contains(&kv) {
                        chain.rules.push(kv);
                    }
                }
            }
            None => {
                let end = frag.points.len();
                chains.push(Chain {
                    points: frag.points,
                    kind: frag.kind,
                    rules: frag.rules,
                    spans: vec![ProvenanceSpan {
                        segment: frag.segment,
                        start: 0,
                        end,
                    }],
                });
            }
        }
    }

    // Gap diagnostics: chain ends that point at another chain's start but
    // were too far apart to join.
    let mut gaps = Vec::new();
    for (ai, a) in chains.iter().enumerate() {
        for (bi, b) in chains.iter().enumerate() {
            if ai == bi {
                continue;
            }
            let (Some(&a_end), Some(&b_start)) = (a.points.last(), b.points.first()) else {
                continue;
            };
            let d = a_end.dist(&b_start);
            if d <= params.join_epsilon || d > 2.0 * plan.frames[0].height() {
                continue;
            }
            let (Some(ha), Some(hb)) = (end_heading(&a.points), start_heading(&b.points)) else {
                continue;
            };
            if normalize_angle(ha - hb).abs() > gate_rad {
                continue;
            }
            // b must lie ahead of a's end, close to a's exit line
            let dir = Point2::new(ha.cos(), ha.sin());
            let forward = (b_start.x - a_end.x) * dir.x + (b_start.y - a_end.y) * dir.y;
            let lateral = ((b_start.x - a_end.x) * dir.y - (b_start.y - a_end.y) * dir.x).abs();
            if forward > 0.0 && lateral <= 1.0 {
                gaps.push(GapDiagnostic {
                    from_lane: ai,
                    to_lane: bi,
                    distance: d,
                });
            }
        }
    }

    // Materialize the graph: lanes from chains, rules deduped by kv.
    let mut graph = MapGraph::default();
    let mut provenance = Vec::with_capacity(chains.len());
    for (i, chain) in chains.into_iter().enumerate() {
        let lane_id = LaneId(format!("lane_{i}"));
        graph.lanes.push(Lane {
            id: lane_id.clone(),
            kind: chain.kind,
            points: chain.points,
        });
        provenance.push(chain.spans);
        for kv in chain.rules {
            let existing = graph
                .rules
                .iter()
                .find(|r| r.kv_set().into_iter().collect::<Vec<_>>() == kv)
                .map(|r| r.id.clone());
            let rule_id = existing.unwrap_or_else(|| {
                let id = RuleId(format!("rule_{}", graph.rules.len()));
                graph.rules.push(Rule {
                    id: id.clone(),
                    kv,
                    sign_position: None,
                });
                id
            });
            graph.associations.insert((rule_id, lane_id.clone()));
        }
    }

    Ok(StitchedMap {
        graph,
        provenance,
        gaps,
    })
}

/// Everything one clip produced: the plan, per-segment results, and the
/// stitched map.
#[derive(Debug)]
pub struct ClipRunResult {
    pub clip_id: String,
    pub plan: SegmentPlan,
    pub segments: Vec<SegmentResult>,
    pub stitched: StitchedMap,
    /// Any segment hit a model failure.
    pub flagged: bool,
    /// Any segment hit a wire-protocol violation.
    pub protocol_violation: bool,
}

/// Drive the full per-clip loop: plan, then for each segment serialize the
/// input, invoke the model, parse in recovery mode and hand the boundary
/// cache forward; finally stitch. Model failures flag the clip but do not
/// abort it.
pub fn run_clip(
    clip: &Clip,
    model: &mut dyn SegmentModel,
    codec: &Codec,
    params: &RunParams,
) -> Result<ClipRunResult, PipelineError> {
    let plan = plan_segments(&clip.trajectory, &params.frame)?;
    let prompt = resolve_prompt(clip, params);

    let mut segments: Vec<SegmentResult> = Vec::with_capacity(plan.len());
    let mut cache_tokens: Vec<Token> = Vec::new();
    for (i, frame) in plan.frames.iter().enumerate() {
        let poses = sample_segment_poses(
            &clip.trajectory,
            plan.anchor_arcs[i],
            frame.height(),
            params.images_per_segment.max(1),
        );
        let image_paths = segment_images(clip, &poses, params.images_per_segment);
        let result = run_segment(
            model,
            codec,
            &clip.clip_id,
            i,
            frame,
            &poses,
            image_paths,
            std::mem::take(&mut cache_tokens),
            prompt.clone(),
            params,
        )?;
        if params.cache_enabled && i + 1 < plan.len() {
            let cache = extract_cache(&result.graph, frame, &plan.frames[i + 1]);
            cache_tokens = cache.to_tokens(codec, &plan.frames[i + 1])?;
        }
        segments.push(result);
    }

    let graphs: Vec<MapGraph> = segments.iter().map(|s| s.graph.clone()).collect();
    let stitched = stitch(&graphs, &plan, params)?;
    let flagged = segments.iter().any(|s| s.model_error.is_some());
    let protocol_violation = segments.iter().any(|s| s.protocol_violation);
    Ok(ClipRunResult {
        clip_id: clip.clip_id.clone(),
        plan,
        segments,
        stitched,
        flagged,
        protocol_violation,
    })
}

/// Sample `n` poses evenly over the trajectory stretch covered by a segment.
fn sample_segment_poses(
    trajectory: &Trajectory,
    anchor_arc: f64,
    frame_height: f64,
    n: usize,
) -> Vec<crate::map_model::Pose> {
    let total = trajectory.arc_length();
    let end = (anchor_arc + frame_height).min(total);
    if n == 1 {
        return vec![trajectory.pose_at_arc(anchor_arc)];
    }
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            trajectory.pose_at_arc(anchor_arc + f * (end - anchor_arc))
        })
        .collect()
}

/// Pick the clip images whose timestamps fall inside the sampled pose range,
/// uniformly subsampled to at most `n`.
fn segment_images(clip: &Clip, poses: &[crate::map_model::Pose], n: usize) -> Vec<String> {
    let Some(images) = &clip.images else {
        return Vec::new();
    };
    let (Some(first), Some(last)) = (poses.first(), poses.last()) else {
        return Vec::new();
    };
    let in_range: Vec<&(f64, std::path::PathBuf)> = images
        .iter()
        .filter(|(t, _)| *t >= first.t && *t <= last.t)
        .collect();
    if in_range.is_empty() || n == 0 {
        return Vec::new();
    }
    let take = n.min(in_range.len());
    (0..take)
        .map(|i| {
            let idx = if take == 1 {
                0
            } else {
                i * (in_range.len() - 1) / (take - 1)
            };
            in_range[idx].1.to_string_lossy().into_owned()
        })
        .collect()
}

fn resolve_prompt(clip: &Clip, params: &RunParams) -> Option<Prompt> {
    let target = params.prompt_rule.as_ref()?;
    let prompts = clip.sign_prompts.as_deref()?;
    prompts
        .iter()
        .find(|(id, _)| id == target)
        .map(|(_, (u, v))| Prompt::Coord { u: *u, v: *v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_model::Pose;

    fn straight_trajectory(length: f64) -> Trajectory {
        let n = (length as usize) + 1;
        Trajectory::new(
            (0..n)
                .map(|i| Pose::new(i as f64 * 0.1, 0.0, i as f64, 0.0))
                .collect(),
        )
    }

    #[test]
    fn plan_60m_gives_three_segments() {
        let plan = plan_segments(&straight_trajectory(60.0), &FrameSpec::default()).unwrap();
        assert_eq!(plan.len(), 3);
        assert!((plan.anchor_arcs[1] - 20.16).abs() < 1e-9);
        assert!((plan.anchor_arcs[2] - 40.32).abs() < 1e-9);
        // last segment covers the end
        assert!(plan.anchor_arcs[2] + 22.4 >= 60.0);
        assert!((plan.advance_distance - 20.16).abs() < 1e-9);
    }

    #[test]
    fn plan_exact_frame_height_is_one_segment() {
        let plan = plan_segments(&straight_trajectory(22.4), &FrameSpec::default()).unwrap();
        assert_eq!(plan.len(), 1);
    }

    #[test]
    fn plan_rejects_short_trajectory() {
        let err = plan_segments(&straight_trajectory(10.0), &FrameSpec::default()).unwrap_err();
        assert!(matches!(err, PipelineError::TrajectoryTooShort { .. }));
    }

    #[test]
    fn plan_rejects_bad_overlap() {
        let spec = FrameSpec {
            overlap_ratio: 0.5,
            ..FrameSpec::default()
        };
        assert!(plan_segments(&straight_trajectory(60.0), &spec).is_err());
    }

    fn frame_at(y: f64) -> SegmentFrame {
        FrameSpec::default().at(Pose::new(0.0, 0.0, y, 0.0))
    }

    #[test]
    fn extract_cache_clips_and_projects() {
        // lane spanning the full frame along travel direction
        let graph = MapGraph {
            lanes: vec![Lane::new(
                "l0",
                LaneKind::Divider,
                vec![Point2::new(11.2, 0.0), Point2::new(11.2, 22.4)],
            )],
            rules: vec![],
            associations: Default::default(),
        };
        let current = frame_at(0.0);
        let next = frame_at(20.16);
        let cache = extract_cache(&graph, &current, &next);
        assert_eq!(cache.stubs.len(), 1);
        let stub = &cache.stubs[0];
        // old local y in [20.16, 22.4] maps to new local y in [0, 2.24]
        assert!((stub.points.first().unwrap().y - 0.0).abs() < 1e-9);
        assert!((stub.points.last().unwrap().y - 2.24).abs() < 1e-9);
        assert!((stub.points[0].x - 11.2).abs() < 1e-9);
    }

    #[test]
    fn extract_cache_skips_lane_ending_before_boundary() {
        let graph = MapGraph {
            lanes: vec![Lane::new(
                "l0",
                LaneKind::Divider,
                vec![Point2::new(11.2, 0.0), Point2::new(11.2, 15.0)],
            )],
            rules: vec![],
            associations: Default::default(),
        };
        let cache = extract_cache(&graph, &frame_at(0.0), &frame_at(20.16));
        assert!(cache.is_empty());
    }

    #[test]
    fn extract_cache_carries_rule_payload_verbatim() {
        let mut graph = MapGraph {
            lanes: vec![Lane::new(
                "l0",
                LaneKind::Divider,
                vec![Point2::new(11.2, 0.0), Point2::new(11.2, 22.4)],
            )],
            rules: vec![Rule::new("r0", vec![("rule_type", "bus_lane")])],
            associations: Default::default(),
        };
        graph
            .associations
            .insert((RuleId::from("r0"), LaneId::from("l0")));
        let cache = extract_cache(&graph, &frame_at(0.0), &frame_at(20.16));
        assert_eq!(
            cache.stubs[0].rules,
            vec![vec![("rule_type".to_owned(), "bus_lane".to_owned())]]
        );
    }

    #[test]
    fn cache_tokens_round_trip_through_codec() {
        let codec = Codec::default();
        let next = frame_at(20.16);
        let cache = MapRuleCache {
            stubs: vec![CacheStub {
                points: vec![Point2::new(11.2, 0.0), Point2::new(11.2, 2.2)],
                kind: LaneKind::Divider,
                rules: vec![vec![("rule_type".to_owned(), "bus_lane".to_owned())]],
            }],
        };
        let mut tokens = cache.to_tokens(&codec, &next).unwrap();
        assert_ne!(tokens.last(), Some(&Token::EndOfSequence));
        tokens.push(Token::EndOfSequence);
        let parsed = codec.parse(&tokens, &next, ParseMode::Strict).unwrap();
        assert_eq!(parsed.graph.lanes.len(), 1);
        assert_eq!(parsed.graph.rules.len(), 1);
    }

    #[test]
    fn stitch_rejects_plan_mismatch() {
        let plan = plan_segments(&straight_trajectory(60.0), &FrameSpec::default()).unwrap();
        let err = stitch(&[MapGraph::default()], &plan, &RunParams::default()).unwrap_err();
        assert!(matches!(err, PipelineError::PlanMismatch { .. }));
    }
}
