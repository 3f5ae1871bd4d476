//! Domain types for clips, trajectories, map graphs, lanes, rules and their
//! associations — the vocabulary shared by every other module.
//!
//! All types are plain immutable data: construct them, validate them with
//! [`validate_clip`], then share them freely across threads. Validation is
//! data, not control flow — a [`Finding`] list is returned instead of an
//! error so that callers can render every problem at once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// A 2D point in meters. The frame (world vs. segment-local) is carried by
/// context, not by the type; function signatures say which one they expect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Euclidean distance to another point.
    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Chebyshev (max-coordinate) distance to another point.
    pub fn dist_inf(&self, other: &Point2) -> f64 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

impl From<Point2> for (f64, f64) {
    fn from(p: Point2) -> Self {
        (p.x, p.y)
    }
}

/// Normalize an angle into `[-pi, pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let a = (theta + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    // rem_euclid can return exactly 2*pi for inputs just below -pi due to rounding
    if a >= std::f64::consts::PI {
        a - two_pi
    } else {
        a
    }
}

/// A timestamped ego pose.
///
/// Heading `theta` is in radians in `[-pi, pi)`, measured counterclockwise
/// with `theta = 0` pointing along world `+y`. Segment frames are aligned so
/// that frame-forward (`+y` local) is the heading direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Timestamp in seconds, monotone within a clip.
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Heading in radians, normalized to `[-pi, pi)`.
    pub theta: f64,
}

impl Pose {
    /// Build a pose, normalizing `theta` into `[-pi, pi)`.
    pub fn new(t: f64, x: f64, y: f64, theta: f64) -> Self {
        Self {
            t,
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Unit heading direction in world coordinates.
    pub fn heading_dir(&self) -> Point2 {
        Point2::new(-self.theta.sin(), self.theta.cos())
    }
}

/// Ordered ego poses along a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Self { poses }
    }

    /// Total arc length of the pose polyline, in meters.
    pub fn arc_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| w[0].position().dist(&w[1].position()))
            .sum()
    }

    /// Pose at a given arc length along the trajectory, clamped to its ends.
    /// Position is linearly interpolated; heading is interpolated along the
    /// shortest angular path between the bracketing poses.
    pub fn pose_at_arc(&self, s: f64) -> Pose {
        assert!(!self.poses.is_empty(), "trajectory has no poses");
        if self.poses.len() == 1 || s <= 0.0 {
            return self.poses[0];
        }
        let mut acc = 0.0;
        for w in self.poses.windows(2) {
            let (a, b) = (w[0], w[1]);
            let seg = a.position().dist(&b.position());
            if acc + seg >= s && seg > 0.0 {
                let f = (s - acc) / seg;
                let dtheta = normalize_angle(b.theta - a.theta);
                return Pose::new(
                    a.t + f * (b.t - a.t),
                    a.x + f * (b.x - a.x),
                    a.y + f * (b.y - a.y),
                    a.theta + f * dtheta,
                );
            }
            acc += seg;
        }
        *self.poses.last().unwrap()
    }
}

/// Unique lane identifier within a clip.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneId(pub String);

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LaneId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Unique rule identifier within a clip.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub String);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RuleId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Lane polylines come in exactly two flavors; anything richer is a config
/// concern layered on top, not a third enum variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Divider,
    Borderline,
}

/// A lane vector: an ordered polyline in world meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub kind: LaneKind,
    pub points: Vec<Point2>,
}

impl Lane {
    pub fn new(id: impl Into<String>, kind: LaneKind, points: Vec<Point2>) -> Self {
        Self {
            id: LaneId(id.into()),
            kind,
            points,
        }
    }
}

/// A traffic rule: ordered key-value pairs plus the governing sign's world
/// position when known. Two rules are the same rule iff their kv sets are
/// equal (order-insensitive, ids ignored) — see [`Rule::kv_set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: RuleId,
    pub kv: Vec<(String, String)>,
    /// World (x, y, z) of the governing sign, meters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign_position: Option<[f64; 3]>,
}

impl Rule {
    pub fn new(id: impl Into<String>, kv: Vec<(&str, &str)>) -> Self {
        Self {
            id: RuleId(id.into()),
            kv: kv
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .collect(),
            sign_position: None,
        }
    }

    pub fn with_sign(mut self, x: f64, y: f64, z: f64) -> Self {
        self.sign_position = Some([x, y, z]);
        self
    }

    /// Canonical order-insensitive view of the kv pairs; the identity of the
    /// rule for matching, deduplication and equality purposes.
    pub fn kv_set(&self) -> BTreeMap<String, String> {
        self.kv.iter().cloned().collect()
    }

    /// Rule identity: kv-set equality, ids ignored.
    pub fn same_kv(&self, other: &Rule) -> bool {
        self.kv_set() == other.kv_set()
    }
}

/// The map artifact: lanes, rules and (rule, lane) association pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapGraph {
    pub lanes: Vec<Lane>,
    pub rules: Vec<Rule>,
    pub associations: BTreeSet<(RuleId, LaneId)>,
}

impl MapGraph {
    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty() && self.rules.is_empty()
    }

    pub fn lane(&self, id: &LaneId) -> Option<&Lane> {
        self.lanes.iter().find(|l| &l.id == id)
    }

    pub fn rule(&self, id: &RuleId) -> Option<&Rule> {
        self.rules.iter().find(|r| &r.id == id)
    }

    /// Rules associated with a lane, in rule-list order.
    pub fn rules_of(&self, lane: &LaneId) -> Vec<&Rule> {
        self.rules
            .iter()
            .filter(|r| self.associations.contains(&(r.id.clone(), lane.clone())))
            .collect()
    }
}

/// A driving clip: trajectory, ground-truth graph, and optional image / sign
/// prompt side channels. Images travel by path reference only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: String,
    pub trajectory: Trajectory,
    pub ground_truth: MapGraph,
    /// (timestamp, image path) pairs; timestamps must match trajectory poses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<(f64, PathBuf)>>,
    /// Per-rule projected sign coordinates (u, v) in image pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign_prompts: Option<Vec<(RuleId, (u32, u32))>>,
}

/// Severity of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

/// One validation problem: where it is and what is wrong.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    /// Dotted path into the clip, e.g. `trajectory`, `lanes[lane_3]`.
    pub location: String,
    pub message: String,
}

impl Finding {
    fn error(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            location: location.into(),
            message: message.into(),
        }
    }

    fn warning(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.location, self.message)
    }
}

/// Maximum allowed distance between consecutive trajectory poses, meters.
pub const MAX_POSE_STEP: f64 = 5.0;

/// Validate every type invariant of a clip. Returns an empty list iff the
/// clip is well formed. Deterministic and side-effect free; findings carry
/// severity and location so callers can report everything at once.
pub fn validate_clip(clip: &Clip, rule_keys: &[String]) -> Vec<Finding> {
    let mut findings = Vec::new();

    let poses = &clip.trajectory.poses;
    if poses.len() < 2 {
        findings.push(Finding::error("trajectory", "trajectory too short: needs at least 2 poses"));
    }
    for (i, p) in poses.iter().enumerate() {
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&p.theta) {
            findings.push(Finding::error(
                format!("trajectory[{i}]"),
                format!("heading {} outside [-pi, pi)", p.theta),
            ));
        }
        if !p.t.is_finite() || !p.x.is_finite() || !p.y.is_finite() {
            findings.push(Finding::error(format!("trajectory[{i}]"), "non-finite pose field"));
        }
    }
    for (i, w) in poses.windows(2).enumerate() {
        if w[1].t <= w[0].t {
            findings.push(Finding::error(
                format!("trajectory[{}]", i + 1),
                "timestamps not strictly increasing",
            ));
        }
        let step = w[0].position().dist(&w[1].position());
        if step > MAX_POSE_STEP {
            findings.push(Finding::error(
                format!("trajectory[{}]", i + 1),
                format!("consecutive poses {step:.2} m apart, max {MAX_POSE_STEP} m"),
            ));
        }
    }

    let mut lane_ids = BTreeSet::new();
    for lane in &clip.ground_truth.lanes {
        let loc = format!("lanes[{}]", lane.id);
        if !lane_ids.insert(lane.id.clone()) {
            findings.push(Finding::error(&loc, "duplicate lane id"));
        }
        if lane.points.len() < 2 {
            findings.push(Finding::error(&loc, "lane needs at least 2 points"));
        }
        if lane.points.windows(2).any(|w| w[0] == w[1]) {
            findings.push(Finding::error(&loc, "consecutive identical points"));
        }
        if lane.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            findings.push(Finding::error(&loc, "non-finite lane point"));
        }
        if polyline_self_intersects(&lane.points) {
            // Real roads can come close to this with sloppy annotation, so it
            // does not reject the clip outright.
            findings.push(Finding::warning(&loc, "polyline self-intersects"));
        }
    }

    let mut rule_ids = BTreeSet::new();
    for rule in &clip.ground_truth.rules {
        let loc = format!("rules[{}]", rule.id);
        if !rule_ids.insert(rule.id.clone()) {
            findings.push(Finding::error(&loc, "duplicate rule id"));
        }
        let mut keys = BTreeSet::new();
        for (k, _) in &rule.kv {
            if !keys.insert(k.clone()) {
                findings.push(Finding::error(&loc, format!("duplicate key '{k}'")));
            }
            if !rule_keys.iter().any(|v| v == k) {
                findings.push(Finding::error(&loc, format!("key '{k}' not in rule-key vocabulary")));
            }
        }
    }

    for (rule_id, lane_id) in &clip.ground_truth.associations {
        if !rule_ids.contains(rule_id) {
            findings.push(Finding::error(
                format!("associations[{rule_id},{lane_id}]"),
                "association references missing rule",
            ));
        }
        if !lane_ids.contains(lane_id) {
            findings.push(Finding::error(
                format!("associations[{rule_id},{lane_id}]"),
                "association references missing lane",
            ));
        }
    }

    if let Some(images) = &clip.images {
        for (i, (t, _)) in images.iter().enumerate() {
            if !poses.iter().any(|p| p.t == *t) {
                findings.push(Finding::error(
                    format!("images[{i}]"),
                    format!("image timestamp {t} matches no trajectory pose"),
                ));
            }
        }
    }

    if let Some(prompts) = &clip.sign_prompts {
        for (i, (rule_id, _)) in prompts.iter().enumerate() {
            if !rule_ids.contains(rule_id) {
                findings.push(Finding::error(
                    format!("sign_prompts[{i}]"),
                    format!("prompt references missing rule {rule_id}"),
                ));
            }
        }
    }

    findings
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    fn orient(p: Point2, q: Point2, r: Point2) -> f64 {
        (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x)
    }
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// Proper self-intersection check; shared endpoints of adjacent segments do
/// not count.
fn polyline_self_intersects(points: &[Point2]) -> bool {
    for i in 0..points.len().saturating_sub(1) {
        for j in (i + 2)..points.len().saturating_sub(1) {
            if segments_intersect(points[i], points[i + 1], points[j], points[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Deviation between two polylines.
///
/// With equal vertex counts this is the pointwise Chebyshev maximum, taking
/// the smaller of forward and reversed orientation — exact for codec
/// round-trips where quantization moves each vertex at most half a bin per
/// axis. With unequal counts (clipping or stitching changed the vertex
/// structure) it falls back to the symmetric vertex-to-polyline Hausdorff
/// distance.
pub fn polyline_deviation(a: &[Point2], b: &[Point2]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    if a.len() == b.len() {
        let fwd = a
            .iter()
            .zip(b.iter())
            .map(|(p, q)| p.dist_inf(q))
            .fold(0.0f64, f64::max);
        let rev = a
            .iter()
            .zip(b.iter().rev())
            .map(|(p, q)| p.dist_inf(q))
            .fold(0.0f64, f64::max);
        fwd.min(rev)
    } else {
        let d_ab = a
            .iter()
            .map(|p| point_to_polyline_dist(*p, b))
            .fold(0.0f64, f64::max);
        let d_ba = b
            .iter()
            .map(|p| point_to_polyline_dist(*p, a))
            .fold(0.0f64, f64::max);
        d_ab.max(d_ba)
    }
}

/// Euclidean distance from a point to a polyline.
pub fn point_to_polyline_dist(p: Point2, line: &[Point2]) -> f64 {
    if line.is_empty() {
        return f64::INFINITY;
    }
    if line.len() == 1 {
        return p.dist(&line[0]);
    }
    line.windows(2)
        .map(|w| point_to_segment_dist(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Euclidean distance from a point to a segment.
pub fn point_to_segment_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(&a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(&Point2::new(a.x + t * dx, a.y + t * dy))
}

/// Id-agnostic graph equality up to a geometric tolerance.
///
/// True iff lanes pair one-to-one with deviation at most `tol` (pairing
/// chosen greedily by minimal deviation), rule kv sets match as multisets,
/// and the association structure is isomorphic under those pairings.
/// Reflexive and symmetric for any fixed `tol >= 0`.
pub fn graph_equal(a: &MapGraph, b: &MapGraph, tol: f64) -> bool {
    assert!(tol >= 0.0, "tolerance must be non-negative");
    if a.lanes.len() != b.lanes.len() || a.rules.len() != b.rules.len() {
        return false;
    }

    // Lane pairing: greedy over ascending deviation. Kind is deliberately
    // ignored: the token grammar carries no kind channel, so parsed lanes
    // cannot preserve it.
    let n = a.lanes.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for (i, la) in a.lanes.iter().enumerate() {
        for (j, lb) in b.lanes.iter().enumerate() {
            let dev = polyline_deviation(&la.points, &lb.points);
            if dev <= tol {
                pairs.push((dev, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut a_to_b: Vec<Option<usize>> = vec![None; n];
    let mut b_used = vec![false; n];
    for (_, i, j) in pairs {
        if a_to_b[i].is_none() && !b_used[j] {
            a_to_b[i] = Some(j);
            b_used[j] = true;
        }
    }
    if a_to_b.iter().any(Option::is_none) {
        return false;
    }

    // Rule multiset equality over canonical kv sets.
    let kv_multiset = |g: &MapGraph| {
        let mut m: BTreeMap<Vec<(String, String)>, usize> = BTreeMap::new();
        for r in &g.rules {
            let canon: Vec<_> = r.kv_set().into_iter().collect();
            *m.entry(canon).or_insert(0) += 1;
        }
        m
    };
    if kv_multiset(a) != kv_multiset(b) {
        return false;
    }

    // Association isomorphism, expressed over (kv set, paired lane index) so
    // it is independent of which bijection we pick among identical-kv rules.
    let assoc_multiset = |g: &MapGraph, lane_index: &dyn Fn(usize) -> usize| {
        let mut m: BTreeMap<(Vec<(String, String)>, usize), usize> = BTreeMap::new();
        for (rule_id, lane_id) in &g.associations {
            let Some(rule) = g.rule(rule_id) else { return None };
            let Some(lane_pos) = g.lanes.iter().position(|l| &l.id == lane_id) else {
                return None;
            };
            let canon: Vec<_> = rule.kv_set().into_iter().collect();
            *m.entry((canon, lane_index(lane_pos))).or_insert(0) += 1;
        }
        Some(m)
    };
    let a_assoc = assoc_multiset(a, &|i| a_to_b[i].unwrap());
    let b_assoc = assoc_multiset(b, &|j| j);
    match (a_assoc, b_assoc) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

/// The default rule-key vocabulary. Not ground truth — a configuration
/// starting point; override via [`crate::codec::RuleVocabulary`].
pub fn default_rule_keys() -> Vec<String> {
    ["rule_type", "vehicle_category", "time_window", "speed_limit", "direction"]
        .into_iter()
        .map(String::from)
        .collect()
}
