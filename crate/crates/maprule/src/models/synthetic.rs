//! Ground-truth-backed segment models: the exact oracle and its noisy,
//! visibility-limited variant.
//!
//! Both answer a request by slicing the clip's ground truth to the request
//! frame and serializing it through the codec, so the whole pipeline —
//! input serialization, model transport, parsing, cache hand-off, stitching
//! — can be verified end to end without a neural network. The noisy variant
//! layers deterministic, seeded degradation on top and can restrict rule
//! emission to the segments where the governing sign is "visible",
//! re-attaching rules from the incoming cache everywhere else. That is the
//! mechanism behind cache-ablation studies.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Codec, ParseMode, Token, TokenSequence};
use crate::geometry::SegmentFrame;
use crate::map_model::{Clip, Lane, LaneId, LaneKind, MapGraph, Point2, Rule, RuleId};
use crate::models::{ModelCapabilities, ModelError, NoiseSpec, Prompt, SegmentModel, SegmentRequest};

/// How close (meters, directed Hausdorff) a cache stub must lie to a lane
/// fragment to hand its rules over. Generous against quantization and
/// jitter, small against the ~3.5 m spacing of neighboring lanes.
const CACHE_MATCH_TOLERANCE: f64 = 0.75;

/// Slice a clip's ground truth to one segment frame.
///
/// Lanes are clipped to the window and returned in segment-local
/// coordinates, split into pieces where they leave and re-enter. Pieces
/// below quantization resolution are dropped — the codec could not carry
/// them anyway. Every piece inherits all rules of its source lane.
pub fn ground_truth_slice(clip: &Clip, frame: &SegmentFrame) -> MapGraph {
    let gt = &clip.ground_truth;
    let mut out = MapGraph::default();
    for lane in &gt.lanes {
        let rules = gt.rules_of(&lane.id);
        for (piece_idx, piece) in frame.clip_world_polyline(&lane.points).into_iter().enumerate() {
            if distinct_bins(frame, &piece) < 2 {
                continue;
            }
            let piece_id = LaneId(format!("{}#{piece_idx}", lane.id));
            out.lanes.push(Lane {
                id: piece_id.clone(),
                kind: lane.kind,
                points: piece,
            });
            for rule in &rules {
                if out.rule(&rule.id).is_none() {
                    out.rules.push((*rule).clone());
                }
                out.associations.insert((rule.id.clone(), piece_id.clone()));
            }
        }
    }
    out
}

fn distinct_bins(frame: &SegmentFrame, points: &[Point2]) -> usize {
    let mut count = 0;
    let mut last = None;
    for p in points {
        if let Ok(q) = frame.quantize(*p) {
            let bin = (q.u, q.v);
            if last != Some(bin) {
                count += 1;
                last = Some(bin);
            }
        }
    }
    count
}

/// Ground-truth-backed segment model, exact or degraded per [`NoiseSpec`].
pub struct SyntheticModel {
    clip: Arc<Clip>,
    codec: Arc<Codec>,
    noise: NoiseSpec,
    seed: u64,
}

impl SyntheticModel {
    /// Exact oracle: answers every request with the ground truth visible in
    /// the frame. The cache is ignored for geometry; ground truth is
    /// authoritative.
    pub fn oracle(clip: Arc<Clip>, codec: Arc<Codec>) -> Self {
        Self::noisy(clip, codec, NoiseSpec::default(), 0)
    }

    /// Degraded oracle. With an all-default [`NoiseSpec`] this is identical
    /// to [`SyntheticModel::oracle`].
    pub fn noisy(clip: Arc<Clip>, codec: Arc<Codec>, noise: NoiseSpec, seed: u64) -> Self {
        Self {
            clip,
            codec,
            noise,
            seed,
        }
    }

    /// Whether a sign at `sign_xy` is visible from the segment anchored at
    /// `frame`: the anchor must be one of the `k` anchors nearest the sign,
    /// i.e. within `k/2` advance distances of it.
    fn sign_visible(&self, frame: &SegmentFrame, sign_xy: Point2) -> bool {
        match self.noise.sign_visibility_segments {
            None => true,
            Some(k) => {
                let reach = k as f64 * frame.spec.advance_distance() / 2.0;
                frame.center.position().dist(&sign_xy) <= reach
            }
        }
    }

    /// Rule kv payloads carried by cache stubs that geometrically continue
    /// into `piece`.
    fn cache_rules_for(
        cache_graph: &MapGraph,
        piece: &[Point2],
    ) -> Vec<Vec<(String, String)>> {
        let mut payloads = Vec::new();
        for stub in &cache_graph.lanes {
            let continues = stub.points.iter().all(|p| {
                crate::map_model::point_to_polyline_dist(*p, piece) <= CACHE_MATCH_TOLERANCE
            });
            if !continues {
                continue;
            }
            for rule in cache_graph.rules_of(&stub.id) {
                let canon: Vec<(String, String)> = rule.kv_set().into_iter().collect();
                if !payloads.contains(&canon) {
                    payloads.push(canon);
                }
            }
        }
        payloads
    }
}

impl SegmentModel for SyntheticModel {
    fn capabilities(&self) -> ModelCapabilities {
        ModelCapabilities {
            supports_images: false,
            supports_prompt: true,
        }
    }

    fn generate(&mut self, request: &SegmentRequest) -> Result<TokenSequence, ModelError> {
        let frame = &request.frame;
        let sliced = ground_truth_slice(&self.clip, frame);

        // The incoming cache, parsed back into stubs-with-rules. Only needed
        // when visibility filtering can strip rules from ground truth.
        let cache_graph = if self.noise.sign_visibility_segments.is_some()
            && !request.cache_tokens.is_empty()
        {
            let mut tokens = request.cache_tokens.clone();
            tokens.push(Token::EndOfSequence);
            self.codec
                .parse(&tokens, frame, ParseMode::Recover)
                .map(|p| p.graph)
                .unwrap_or_default()
        } else {
            MapGraph::default()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(request_seed(
            self.seed,
            &request.clip_id,
            request.segment_id,
        ));

        let mut out = MapGraph::default();
        let mut rule_counter = 0usize;
        for lane in &sliced.lanes {
            if self.noise.lane_drop_prob > 0.0 && rng.gen::<f64>() < self.noise.lane_drop_prob {
                continue;
            }

            let mut pieces = vec![lane.points.clone()];
            if self.noise.point_jitter_sigma > 0.0 {
                let jittered: Vec<Point2> = lane
                    .points
                    .iter()
                    .map(|p| {
                        Point2::new(
                            p.x + gaussian(&mut rng) * self.noise.point_jitter_sigma,
                            p.y + gaussian(&mut rng) * self.noise.point_jitter_sigma,
                        )
                    })
                    .collect();
                // jitter can push points out of the window; re-clip
                pieces = frame.clip_local_polyline(&jittered);
            }

            // Rule payloads this lane will carry out.
            let mut payloads: Vec<Vec<(String, String)>> = Vec::new();
            for rule in sliced.rules_of(&lane.id) {
                let visible = match rule.sign_position {
                    Some([sx, sy, _]) => self.sign_visible(frame, Point2::new(sx, sy)),
                    None => true,
                };
                if !visible {
                    continue;
                }
                if self.noise.rule_drop_prob > 0.0 && rng.gen::<f64>() < self.noise.rule_drop_prob {
                    continue;
                }
                if let Some(prompt_rule_ids) = prompted_rules(&self.clip, &request.prompt) {
                    if !prompt_rule_ids.contains(&rule.id) {
                        continue;
                    }
                }
                let canon: Vec<(String, String)> = rule.kv_set().into_iter().collect();
                if !payloads.contains(&canon) {
                    payloads.push(canon);
                }
            }
            if self.noise.sign_visibility_segments.is_some() {
                for canon in Self::cache_rules_for(&cache_graph, &lane.points) {
                    if !payloads.contains(&canon) {
                        payloads.push(canon);
                    }
                }
            }

            for piece in pieces {
                if distinct_bins(frame, &piece) < 2 {
                    continue;
                }
                let lane_id = LaneId(format!("out_{}", out.lanes.len()));
                out.lanes.push(Lane {
                    id: lane_id.clone(),
                    kind: lane.kind,
                    points: piece,
                });
                for canon in &payloads {
                    let existing = out
                        .rules
                        .iter()
                        .find(|r| {
                            r.kv_set().into_iter().collect::<Vec<_>>() == *canon
                        })
                        .map(|r| r.id.clone());
                    let rule_id = existing.unwrap_or_else(|| {
                        let id = RuleId(format!("outr_{rule_counter}"));
                        rule_counter += 1;
                        out.rules.push(Rule {
                            id: id.clone(),
                            kv: canon.clone(),
                            sign_position: None,
                        });
                        id
                    });
                    out.associations.insert((rule_id, lane_id.clone()));
                }
            }
        }

        self.codec
            .serialize_segment(&out, frame)
            .map_err(|e| ModelError::Protocol(format!("oracle serialization failed: {e}")))
    }
}

/// Resolve a prompt to the set of rule ids whose projected sign coordinates
/// match it exactly. `None` means "no filtering" (no prompt, or a reserved
/// prompt kind the built-ins do not interpret).
fn prompted_rules(clip: &Clip, prompt: &Option<Prompt>) -> Option<Vec<RuleId>> {
    let Some(Prompt::Coord { u, v }) = prompt else {
        return None;
    };
    let prompts = clip.sign_prompts.as_deref()?;
    Some(
        prompts
            .iter()
            .filter(|(_, (pu, pv))| pu == u && pv == v)
            .map(|(id, _)| id.clone())
            .collect(),
    )
}

/// Standard normal draw via Box-Muller; two uniform draws per sample keeps
/// the stream layout simple and reproducible.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Mix the run seed, clip id and segment index into one RNG seed so every
/// request draws from its own deterministic stream.
fn request_seed(seed: u64, clip_id: &str, segment_id: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64; // FNV-1a
    for b in clip_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= seed.rotate_left(17);
    h = h.wrapping_mul(0x100000001b3);
    h ^= segment_id;
    h.wrapping_mul(0x100000001b3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameSpec;
    use crate::map_model::{graph_equal, Pose, Trajectory};
    use std::collections::BTreeSet;

    fn test_clip() -> Arc<Clip> {
        let poses = (0..30)
            .map(|i| Pose::new(i as f64 * 0.2, 0.0, i as f64, 0.0))
            .collect();
        let lanes = vec![
            Lane::new(
                "gt_left",
                LaneKind::Borderline,
                vec![Point2::new(-3.5, 0.0), Point2::new(-3.5, 29.0)],
            ),
            Lane::new(
                "gt_right",
                LaneKind::Divider,
                vec![Point2::new(1.75, 0.0), Point2::new(1.75, 29.0)],
            ),
        ];
        let rules = vec![
            Rule::new("r_bus", vec![("rule_type", "bus_lane")]).with_sign(5.0, 10.0, 2.5),
            Rule::new("r_speed", vec![("speed_limit", "60")]).with_sign(5.0, 20.0, 2.5),
        ];
        let associations: BTreeSet<_> = [
            (RuleId::from("r_bus"), LaneId::from("gt_right")),
            (RuleId::from("r_speed"), LaneId::from("gt_left")),
        ]
        .into();
        Arc::new(Clip {
            clip_id: "model_test".into(),
            trajectory: Trajectory::new(poses),
            ground_truth: MapGraph {
                lanes,
                rules,
                associations,
            },
            images: None,
            sign_prompts: Some(vec![
                (RuleId::from("r_bus"), (640, 360)),
                (RuleId::from("r_speed"), (990, 410)),
            ]),
        })
    }

    fn request(frame: SegmentFrame, prompt: Option<Prompt>) -> SegmentRequest {
        SegmentRequest {
            segment_id: 0,
            clip_id: "model_test".into(),
            frame,
            poses: vec![],
            image_paths: vec![],
            cache_tokens: vec![],
            prompt,
            input_tokens: vec![],
        }
    }

    fn parse_output(codec: &Codec, frame: &SegmentFrame, tokens: &[Token]) -> MapGraph {
        codec
            .parse(tokens, frame, ParseMode::Strict)
            .expect("oracle output must be grammar-clean")
            .graph
    }

    #[test]
    fn oracle_reproduces_ground_truth_slice() {
        let clip = test_clip();
        let codec = Arc::new(Codec::default());
        let frame = FrameSpec::default().at(Pose::new(0.0, 0.0, 0.0, 0.0));
        let mut model = SyntheticModel::oracle(clip.clone(), codec.clone());
        let tokens = model.generate(&request(frame, None)).unwrap();
        let parsed = parse_output(&codec, &frame, &tokens);
        let slice = ground_truth_slice(&clip, &frame);
        assert!(graph_equal(&parsed, &slice, 0.05));
    }

    #[test]
    fn empty_frame_yields_bare_eos() {
        let clip = test_clip();
        let codec = Arc::new(Codec::default());
        // anchor far away from all geometry
        let frame = FrameSpec::default().at(Pose::new(0.0, 500.0, 500.0, 0.0));
        let mut model = SyntheticModel::oracle(clip, codec);
        let tokens = model.generate(&request(frame, None)).unwrap();
        assert_eq!(tokens, vec![Token::EndOfSequence]);
    }

    #[test]
    fn prompt_filters_to_one_sign() {
        let clip = test_clip();
        let codec = Arc::new(Codec::default());
        let frame = FrameSpec::default().at(Pose::new(0.0, 0.0, 0.0, 0.0));
        let mut model = SyntheticModel::oracle(clip, codec.clone());
        let tokens = model
            .generate(&request(frame, Some(Prompt::Coord { u: 640, v: 360 })))
            .unwrap();
        let parsed = parse_output(&codec, &frame, &tokens);
        assert_eq!(parsed.rules.len(), 1);
        assert_eq!(parsed.rules[0].kv, vec![("rule_type".to_owned(), "bus_lane".to_owned())]);
    }

    #[test]
    fn zero_noise_equals_oracle() {
        let clip = test_clip();
        let codec = Arc::new(Codec::default());
        let frame = FrameSpec::default().at(Pose::new(0.0, 0.0, 0.0, 0.0));
        let mut oracle = SyntheticModel::oracle(clip.clone(), codec.clone());
        let mut noisy = SyntheticModel::noisy(clip, codec, NoiseSpec::default(), 99);
        assert_eq!(
            oracle.generate(&request(frame, None)).unwrap(),
            noisy.generate(&request(frame, None)).unwrap()
        );
    }

    #[test]
    fn full_lane_drop_yields_bare_eos() {
        let clip = test_clip();
        let codec = Arc::new(Codec::default());
        let frame = FrameSpec::default().at(Pose::new(0.0, 0.0, 0.0, 0.0));
        let noise = NoiseSpec {
            lane_drop_prob: 1.0,
            ..NoiseSpec::default()
        };
        let mut model = SyntheticModel::noisy(clip, codec, noise, 7);
        assert_eq!(
            model.generate(&request(frame, None)).unwrap(),
            vec![Token::EndOfSequence]
        );
    }

    #[test]
    fn noisy_is_deterministic_per_seed() {
        let clip = test_clip();
        let codec = Arc::new(Codec::default());
        let frame = FrameSpec::default().at(Pose::new(0.0, 0.0, 0.0, 0.0));
        let noise = NoiseSpec {
            point_jitter_sigma: 0.1,
            lane_drop_prob: 0.3,
            rule_drop_prob: 0.3,
            sign_visibility_segments: None,
        };
        let mut a = SyntheticModel::noisy(clip.clone(), codec.clone(), noise.clone(), 5);
        let mut b = SyntheticModel::noisy(clip.clone(), codec.clone(), noise.clone(), 5);
        let mut c = SyntheticModel::noisy(clip, codec, noise, 6);
        let req = request(FrameSpec::default().at(Pose::new(0.0, 0.0, 0.0, 0.0)), None);
        let ta = a.generate(&req).unwrap();
        assert_eq!(ta, b.generate(&req).unwrap());
        assert_ne!(ta, c.generate(&req).unwrap());
    }

    #[test]
    fn visibility_filter_drops_rule_without_cache() {
        let clip = test_clip();
        let codec = Arc::new(Codec::default());
        // anchor ~18 m behind the bus sign at y=10: farther than 1*advance/2
        let frame = FrameSpec::default().at(Pose::new(0.0, 0.0, 28.0, 0.0));
        let noise = NoiseSpec {
            sign_visibility_segments: Some(1),
            ..NoiseSpec::default()
        };
        let mut model = SyntheticModel::noisy(clip, codec.clone(), noise, 0);
        let tokens = model.generate(&request(frame, None)).unwrap();
        let parsed = parse_output(&codec, &frame, &tokens);
        assert!(parsed.rules.is_empty(), "sign out of reach, no cache: no rules");
    }

    #[test]
    fn visibility_filter_restores_rule_from_cache() {
        let clip = test_clip();
        let codec = Arc::new(Codec::default());
        let frame = FrameSpec::default().at(Pose::new(0.0, 0.0, 28.0, 0.0));
        let noise = NoiseSpec {
            sign_visibility_segments: Some(1),
            ..NoiseSpec::default()
        };
        // fabricate a cache stub lying on gt_right (local x = 1.75 + 11.2)
        let stub = MapGraph {
            lanes: vec![Lane::new(
                "stub",
                LaneKind::Divider,
                vec![Point2::new(12.95, 0.1), Point2::new(12.95, 0.9)],
            )],
            rules: vec![Rule::new("cr", vec![("rule_type", "bus_lane")])],
            associations: [(RuleId::from("cr"), LaneId::from("stub"))].into(),
        };
        let mut cache_tokens = codec.serialize_segment(&stub, &frame).unwrap();
        assert_eq!(cache_tokens.pop(), Some(Token::EndOfSequence));

        let mut model = SyntheticModel::noisy(clip, codec.clone(), noise, 0);
        let mut req = request(frame, None);
        req.cache_tokens = cache_tokens;
        let tokens = model.generate(&req).unwrap();
        let parsed = parse_output(&codec, &frame, &tokens);
        assert_eq!(parsed.rules.len(), 1, "cache must persist the bus rule");
        assert_eq!(parsed.rules[0].kv[0].1, "bus_lane");
    }
}
