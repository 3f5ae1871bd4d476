//! Segment frames, world<->segment rigid transforms, coordinate and pose
//! quantization, polyline rasterization and mask IoU.
//!
//! Everything here is a pure function over immutable inputs. The segment
//! frame is ego-aligned: frame `+y` points along the anchor heading, `+x` to
//! the ego's right, and the ego sits at `(width/2, 0)` on the rear edge, so
//! the window extends forward of the anchor pose.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_model::{normalize_angle, Point2, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point ({x:.3}, {y:.3}) outside frame extent {w:.1} x {h:.1} m")]
    OutOfFrame { x: f64, y: f64, w: f64, h: f64 },
    #[error("degenerate raster extent")]
    EmptyExtent,
    #[error("masks have different extent or resolution")]
    ExtentMismatch,
    #[error("IoU undefined: union of masks is empty")]
    EmptyUnion,
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

/// Frame shape shared by every segment of a run: bin counts, bin size and
/// the overlap ratio between consecutive segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub width_bins: u32,
    pub height_bins: u32,
    /// Meters per bin.
    pub bin_size: f64,
    /// Fraction of the frame depth shared with the next segment, in (0, 0.5).
    pub overlap_ratio: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            width_bins: 224,
            height_bins: 224,
            bin_size: 0.1,
            overlap_ratio: 0.10,
        }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width_bins == 0 || self.height_bins == 0 {
            return Err(GeometryError::InvalidFrame("bin counts must be positive".into()));
        }
        if !(self.bin_size > 0.0) {
            return Err(GeometryError::InvalidFrame("bin_size must be positive".into()));
        }
        if !(self.overlap_ratio > 0.0 && self.overlap_ratio < 0.5) {
            return Err(GeometryError::InvalidFrame(format!(
                "overlap_ratio {} outside (0, 0.5)",
                self.overlap_ratio
            )));
        }
        Ok(())
    }

    /// Physical width in meters.
    pub fn width(&self) -> f64 {
        self.width_bins as f64 * self.bin_size
    }

    /// Physical height (forward depth) in meters.
    pub fn height(&self) -> f64 {
        self.height_bins as f64 * self.bin_size
    }

    /// Forward distance between consecutive segment anchors.
    pub fn advance_distance(&self) -> f64 {
        self.height() * (1.0 - self.overlap_ratio)
    }

    /// Depth of the overlap strip shared with the next segment.
    pub fn overlap_depth(&self) -> f64 {
        self.height() * self.overlap_ratio
    }

    /// Anchor this spec at an ego pose.
    pub fn at(&self, center: Pose) -> SegmentFrame {
        SegmentFrame {
            center,
            spec: *self,
        }
    }
}

/// An ego-anchored spatial window: a [`FrameSpec`] placed at a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFrame {
    /// Ego pose defining the frame.
    pub center: Pose,
    #[serde(flatten)]
    pub spec: FrameSpec,
}

impl SegmentFrame {
    pub fn width(&self) -> f64 {
        self.spec.width()
    }

    pub fn height(&self) -> f64 {
        self.spec.height()
    }

    /// World -> segment-local. Rigid: translate by `-center`, rotate by
    /// `-theta`, then shift so the ego sits at `(width/2, 0)`. Out-of-bounds
    /// points are returned unclamped; check with [`SegmentFrame::in_bounds`].
    pub fn to_segment(&self, p: Point2) -> Point2 {
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        let (sin, cos) = self.center.theta.sin_cos();
        Point2::new(
            cos * dx + sin * dy + self.width() / 2.0,
            -sin * dx + cos * dy,
        )
    }

    /// Segment-local -> world; exact inverse of [`SegmentFrame::to_segment`].
    pub fn from_segment(&self, p: Point2) -> Point2 {
        let lx = p.x - self.width() / 2.0;
        let ly = p.y;
        let (sin, cos) = self.center.theta.sin_cos();
        Point2::new(
            cos * lx - sin * ly + self.center.x,
            sin * lx + cos * ly + self.center.y,
        )
    }

    /// Whether a segment-local point lies in the half-open window
    /// `[0, W) x [0, H)`.
    pub fn in_bounds(&self, local: Point2) -> bool {
        local.x >= 0.0 && local.x < self.width() && local.y >= 0.0 && local.y < self.height()
    }

    fn check_in_closed_bounds(&self, p: Point2) -> Result<(), GeometryError> {
        // Closed upper edge: clipped geometry lands exactly on W or H and
        // must still quantize (into the last bin).
        if p.x < 0.0 || p.x > self.width() || p.y < 0.0 || p.y > self.height() {
            return Err(GeometryError::OutOfFrame {
                x: p.x,
                y: p.y,
                w: self.width(),
                h: self.height(),
            });
        }
        Ok(())
    }

    /// Quantize a segment-local point to bin indices.
    pub fn quantize(&self, p: Point2) -> Result<QuantizedPoint, GeometryError> {
        self.check_in_closed_bounds(p)?;
        let u = ((p.x / self.spec.bin_size).floor() as i64).clamp(0, self.spec.width_bins as i64 - 1);
        let v = ((p.y / self.spec.bin_size).floor() as i64).clamp(0, self.spec.height_bins as i64 - 1);
        Ok(QuantizedPoint {
            u: u as u32,
            v: v as u32,
        })
    }

    /// Bin center of a quantized point, in segment-local meters.
    pub fn dequantize(&self, q: QuantizedPoint) -> Point2 {
        Point2::new(
            (q.u as f64 + 0.5) * self.spec.bin_size,
            (q.v as f64 + 0.5) * self.spec.bin_size,
        )
    }

    /// Quantize a world pose into `(u, v, a)`: position bins plus a heading
    /// bin. The heading is taken relative to the frame so `a` encodes the
    /// pose direction as the model sees it.
    pub fn quantize_pose(
        &self,
        pose: &Pose,
        angle_bins: u32,
    ) -> Result<(u32, u32, u32), GeometryError> {
        let local = self.to_segment(pose.position());
        let q = self.quantize(local)?;
        let theta = normalize_angle(pose.theta - self.center.theta);
        let a = quantize_heading(theta, angle_bins);
        Ok((q.u, q.v, a))
    }

    /// Clip a world polyline to this frame, returning segment-local pieces.
    /// The window is treated as closed on its far edges so cut points on the
    /// boundary survive quantization.
    pub fn clip_world_polyline(&self, points: &[Point2]) -> Vec<Vec<Point2>> {
        let local: Vec<Point2> = points.iter().map(|p| self.to_segment(*p)).collect();
        self.clip_local_polyline(&local)
    }

    /// Clip a segment-local polyline to the frame window.
    pub fn clip_local_polyline(&self, points: &[Point2]) -> Vec<Vec<Point2>> {
        clip_polyline_rect(points, 0.0, 0.0, self.width(), self.height())
    }
}

/// Quantize a heading in `[-pi, pi)` to a bin index in `[0, angle_bins)`.
pub fn quantize_heading(theta: f64, angle_bins: u32) -> u32 {
    let theta = normalize_angle(theta);
    let frac = (theta + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
    ((frac * angle_bins as f64).floor() as i64).rem_euclid(angle_bins as i64) as u32
}

/// Heading bin center in radians.
pub fn dequantize_heading(a: u32, angle_bins: u32) -> f64 {
    -std::f64::consts::PI + (a as f64 + 0.5) * 2.0 * std::f64::consts::PI / angle_bins as f64
}

/// Integer bin coordinates within a segment frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedPoint {
    pub u: u32,
    pub v: u32,
}

/// Clip a polyline to the half-plane `inside(p) >= 0`, splitting it into the
/// pieces that remain. `inside` must be a signed linear distance.
pub fn clip_polyline_halfplane(
    points: &[Point2],
    inside: impl Fn(Point2) -> f64,
) -> Vec<Vec<Point2>> {
    let mut pieces = Vec::new();
    let mut current: Vec<Point2> = Vec::new();
    let mut flush = |piece: &mut Vec<Point2>, out: &mut Vec<Vec<Point2>>| {
        dedup_consecutive(piece);
        if piece.len() >= 2 {
            out.push(std::mem::take(piece));
        } else {
            piece.clear();
        }
    };

    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fb) = (inside(a), inside(b));
        match (fa >= 0.0, fb >= 0.0) {
            (true, true) => {
                if current.is_empty() {
                    current.push(a);
                }
                current.push(b);
            }
            (true, false) => {
                if current.is_empty() {
                    current.push(a);
                }
                current.push(lerp_crossing(a, b, fa, fb));
                flush(&mut current, &mut pieces);
            }
            (false, true) => {
                current.push(lerp_crossing(a, b, fa, fb));
                current.push(b);
            }
            (false, false) => {}
        }
    }
    flush(&mut current, &mut pieces);
    pieces
}

fn lerp_crossing(a: Point2, b: Point2, fa: f64, fb: f64) -> Point2 {
    let t = fa / (fa - fb);
    Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
}

fn dedup_consecutive(points: &mut Vec<Point2>) {
    points.dedup_by(|a, b| a.dist(b) < 1e-12);
}

/// Clip a polyline to the closed rectangle `[x0, x1] x [y0, y1]`.
pub fn clip_polyline_rect(
    points: &[Point2],
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
) -> Vec<Vec<Point2>> {
    let planes: [Box<dyn Fn(Point2) -> f64>; 4] = [
        Box::new(move |p: Point2| p.x - x0),
        Box::new(move |p: Point2| x1 - p.x),
        Box::new(move |p: Point2| p.y - y0),
        Box::new(move |p: Point2| y1 - p.y),
    ];
    let mut pieces = vec![points.to_vec()];
    for plane in &planes {
        pieces = pieces
            .iter()
            .flat_map(|piece| clip_polyline_halfplane(piece, plane))
            .collect();
    }
    pieces
}

/// World-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: Point2,
    pub max: Point2,
}

impl Extent {
    pub fn new(min: Point2, max: Point2) -> Self {
        Self { min, max }
    }

    /// Smallest extent covering a point set, or `None` for an empty set.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point2>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut ext = Extent::new(first, first);
        for p in it {
            ext.min.x = ext.min.x.min(p.x);
            ext.min.y = ext.min.y.min(p.y);
            ext.max.x = ext.max.x.max(p.x);
            ext.max.y = ext.max.y.max(p.y);
        }
        Some(ext)
    }

    pub fn inflate(&self, margin: f64) -> Self {
        Extent::new(
            Point2::new(self.min.x - margin, self.min.y - margin),
            Point2::new(self.max.x + margin, self.max.y + margin),
        )
    }

    pub fn union(&self, other: &Extent) -> Self {
        Extent::new(
            Point2::new(self.min.x.min(other.min.x), self.min.y.min(other.min.y)),
            Point2::new(self.max.x.max(other.max.x), self.max.y.max(other.max.y)),
        )
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.max.x > self.min.x && self.max.y > self.min.y)
    }
}

/// Binary raster of one lane's expanded polyline. Bits are row-major over a
/// grid anchored at `extent.min` with square pixels of side `resolution`.
#[derive(Debug, Clone)]
pub struct LaneMask {
    pub extent: Extent,
    /// Meters per pixel.
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    bits: Vec<u64>,
}

impl LaneMask {
    fn empty(extent: Extent, resolution: f64) -> Result<Self, GeometryError> {
        if extent.is_degenerate() || !(resolution > 0.0) {
            return Err(GeometryError::EmptyExtent);
        }
        let width = ((extent.max.x - extent.min.x) / resolution).ceil() as usize;
        let height = ((extent.max.y - extent.min.y) / resolution).ceil() as usize;
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyExtent);
        }
        let words = (width * height).div_ceil(64);
        Ok(Self {
            extent,
            resolution,
            width,
            height,
            bits: vec![0; words],
        })
    }

    #[inline]
    fn set(&mut self, col: usize, row: usize) {
        let idx = row * self.width + col;
        self.bits[idx / 64] |= 1 << (idx % 64);
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> bool {
        let idx = row * self.width + col;
        self.bits[idx / 64] & (1 << (idx % 64)) != 0
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Covered area in square meters.
    pub fn area(&self) -> f64 {
        self.count() as f64 * self.resolution * self.resolution
    }

    fn same_grid(&self, other: &LaneMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.resolution == other.resolution
            && self.extent == other.extent
    }
}

/// Rasterize a lane polyline into a binary mask: a pixel is set iff its
/// center lies within `half_width` of the polyline, with flat (rectangular)
/// end caps on every segment.
pub fn rasterize_lane(
    points: &[Point2],
    half_width: f64,
    resolution: f64,
    extent: Extent,
) -> Result<LaneMask, GeometryError> {
    let mut mask = LaneMask::empty(extent, resolution)?;
    let LaneMask { width, height, .. } = mask;

    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (sx, sy) = (b.x - a.x, b.y - a.y);
        let len2 = sx * sx + sy * sy;
        if len2 == 0.0 {
            continue;
        }
        let len = len2.sqrt();

        // Only sweep the pixels under this segment's inflated bounding box.
        let lo_x = a.x.min(b.x) - half_width;
        let hi_x = a.x.max(b.x) + half_width;
        let lo_y = a.y.min(b.y) - half_width;
        let hi_y = a.y.max(b.y) + half_width;
        let col0 = (((lo_x - extent.min.x) / resolution).floor().max(0.0)) as usize;
        let row0 = (((lo_y - extent.min.y) / resolution).floor().max(0.0)) as usize;
        let col1 = ((((hi_x - extent.min.x) / resolution).ceil()) as usize).min(width);
        let row1 = ((((hi_y - extent.min.y) / resolution).ceil()) as usize).min(height);

        for row in row0..row1 {
            let py = extent.min.y + (row as f64 + 0.5) * resolution;
            for col in col0..col1 {
                let px = extent.min.x + (col as f64 + 0.5) * resolution;
                let (dx, dy) = (px - a.x, py - a.y);
                let t = (dx * sx + dy * sy) / len2;
                if !(0.0..=1.0).contains(&t) {
                    continue;
                }
                let perp = (dx * sy - dy * sx).abs() / len;
                if perp <= half_width {
                    mask.set(col, row);
                }
            }
        }
    }
    Ok(mask)
}

/// Intersection-over-union of two masks on the same grid.
pub fn mask_iou(a: &LaneMask, b: &LaneMask) -> Result<f64, GeometryError> {
    if !a.same_grid(b) {
        return Err(GeometryError::ExtentMismatch);
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (wa, wb) in a.bits.iter().zip(&b.bits) {
        inter += (wa & wb).count_ones() as u64;
        union += (wa | wb).count_ones() as u64;
    }
    if union == 0 {
        return Err(GeometryError::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_frame(center: Pose) -> SegmentFrame {
        FrameSpec::default().at(center)
    }

    #[test]
    fn to_segment_matches_rigid_transform_arithmetic() {
        let frame = default_frame(Pose::new(0.0, 0.0, 0.0, 0.0));
        let p = frame.to_segment(Point2::new(1.0, 2.0));
        assert!((p.x - 12.2).abs() < 1e-12);
        assert!((p.y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ego_maps_to_frame_anchor() {
        let frame = default_frame(Pose::new(0.0, 5.0, 5.0, std::f64::consts::FRAC_PI_2));
        let p = frame.to_segment(Point2::new(5.0, 5.0));
        assert!((p.x - 11.2).abs() < 1e-12);
        assert!(p.y.abs() < 1e-12);
    }

    #[test]
    fn transform_round_trip_and_rigidity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame = default_frame(Pose::new(0.0, 13.7, -4.2, 2.31));
        let mut prev: Option<(Point2, Point2)> = None;
        for _ in 0..1000 {
            let p = Point2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let local = frame.to_segment(p);
            let back = frame.from_segment(local);
            assert!(back.dist(&p) <= 1e-9);
            if let Some((q, ql)) = prev {
                // rigid: pairwise distances preserved
                assert!((local.dist(&ql) - p.dist(&q)).abs() < 1e-9);
            }
            prev = Some((p, local));
        }
    }

    #[test]
    fn quantize_examples() {
        let frame = default_frame(Pose::new(0.0, 0.0, 0.0, 0.0));
        let q = frame.quantize(Point2::new(11.2, 11.2)).unwrap();
        assert_eq!((q.u, q.v), (112, 112));

        let q0 = frame.quantize(Point2::new(0.0, 0.0)).unwrap();
        assert_eq!((q0.u, q0.v), (0, 0));
        let d = frame.dequantize(q0);
        assert!((d.x - 0.05).abs() < 1e-12 && (d.y - 0.05).abs() < 1e-12);

        assert!(matches!(
            frame.quantize(Point2::new(-0.1, 3.0)),
            Err(GeometryError::OutOfFrame { .. })
        ));
    }

    #[test]
    fn quantization_error_bound() {
        let frame = default_frame(Pose::new(0.0, 0.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let p = Point2::new(rng.gen_range(0.0..22.4), rng.gen_range(0.0..22.4));
            let d = frame.dequantize(frame.quantize(p).unwrap());
            assert!(d.dist_inf(&p) <= 0.05 + 1e-12, "p={p:?} d={d:?}");
        }
    }

    #[test]
    fn heading_quantization() {
        assert_eq!(quantize_heading(0.0, 256), 128);
        assert_eq!(quantize_heading(-std::f64::consts::PI, 256), 0);
        for a in 0..256 {
            let theta = dequantize_heading(a, 256);
            assert_eq!(quantize_heading(theta, 256), a);
            // bin-center bound
            let err = (theta - dequantize_heading(quantize_heading(theta, 256), 256)).abs();
            assert!(err <= std::f64::consts::PI / 256.0);
        }
    }

    #[test]
    fn pose_quantization_uses_frame_relative_heading() {
        let frame = default_frame(Pose::new(0.0, 0.0, 0.0, 1.0));
        let pose = Pose::new(0.0, 0.0, 0.0, 1.0);
        let (_, _, a) = frame.quantize_pose(&pose, 256).unwrap();
        assert_eq!(a, 128); // aligned with the frame => relative heading 0
    }

    #[test]
    fn rasterized_area_matches_rectangle() {
        let extent = Extent::new(Point2::new(-5.0, -5.0), Point2::new(15.0, 5.0));
        let mask = rasterize_lane(
            &[Point2::new(0.0, 0.0), Point2::new(10.0, 0.0)],
            3.0,
            0.1,
            extent,
        )
        .unwrap();
        let area = mask.area();
        assert!((area - 60.0).abs() <= 60.0 * 0.02, "area {area}");
    }

    #[test]
    fn rasterization_direction_free() {
        let extent = Extent::new(Point2::new(-5.0, -5.0), Point2::new(15.0, 8.0));
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(6.0, 1.0), Point2::new(10.0, 3.0)];
        let rev: Vec<_> = pts.iter().rev().copied().collect();
        let a = rasterize_lane(&pts, 3.0, 0.1, extent).unwrap();
        let b = rasterize_lane(&rev, 3.0, 0.1, extent).unwrap();
        assert_eq!(a.bits, b.bits);
    }

    fn parallel_iou(offset: f64) -> f64 {
        let extent = Extent::new(Point2::new(-7.0, -7.0), Point2::new(27.0, 13.0));
        let a = rasterize_lane(
            &[Point2::new(0.0, 0.0), Point2::new(20.0, 0.0)],
            3.0,
            0.1,
            extent,
        )
        .unwrap();
        let b = rasterize_lane(
            &[Point2::new(0.0, offset), Point2::new(20.0, offset)],
            3.0,
            0.1,
            extent,
        )
        .unwrap();
        mask_iou(&a, &b).unwrap()
    }

    #[test]
    fn iou_matches_rectangle_formula() {
        for d in [0.0, 1.0, 2.0, 3.0, 5.0, 6.0] {
            let expect = (6.0 - d) / (6.0 + d);
            let got = parallel_iou(d);
            assert!(
                (got - expect).abs() <= 0.02,
                "offset {d}: raster {got} vs analytic {expect}"
            );
        }
        // monotone nonincreasing in offset
        let vals: Vec<f64> = [0.0, 1.0, 2.0, 3.0, 5.0, 6.0].iter().map(|d| parallel_iou(*d)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn iou_error_paths() {
        let e1 = Extent::new(Point2::new(0.0, 0.0), Point2::new(10.0, 10.0));
        let e2 = Extent::new(Point2::new(0.0, 0.0), Point2::new(12.0, 10.0));
        let a = rasterize_lane(&[Point2::new(1.0, 1.0), Point2::new(9.0, 1.0)], 1.0, 0.1, e1).unwrap();
        let b = rasterize_lane(&[Point2::new(1.0, 1.0), Point2::new(9.0, 1.0)], 1.0, 0.1, e2).unwrap();
        assert_eq!(mask_iou(&a, &b), Err(GeometryError::ExtentMismatch));

        let empty1 = LaneMask::empty(e1, 0.1).unwrap();
        let empty2 = LaneMask::empty(e1, 0.1).unwrap();
        assert_eq!(mask_iou(&empty1, &empty2), Err(GeometryError::EmptyUnion));

        let degenerate = Extent::new(Point2::new(3.0, 3.0), Point2::new(3.0, 9.0));
        assert!(matches!(
            rasterize_lane(&[Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)], 1.0, 0.1, degenerate),
            Err(GeometryError::EmptyExtent)
        ));
    }

    #[test]
    fn mask_pixels_stay_near_polyline() {
        let extent = Extent::new(Point2::new(-5.0, -5.0), Point2::new(15.0, 10.0));
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(7.0, 2.0), Point2::new(10.0, 5.0)];
        let mask = rasterize_lane(&pts, 3.0, 0.1, extent).unwrap();
        for row in 0..mask.height {
            for col in 0..mask.width {
                if mask.get(col, row) {
                    let p = Point2::new(
                        extent.min.x + (col as f64 + 0.5) * 0.1,
                        extent.min.y + (row as f64 + 0.5) * 0.1,
                    );
                    let d = crate::map_model::point_to_polyline_dist(p, &pts);
                    assert!(d <= 3.0 + 0.1, "pixel at {p:?} is {d} m away");
                }
            }
        }
    }

    #[test]
    fn clip_rect_splits_into_pieces() {
        // zig-zag leaving and re-entering the window
        let pts = vec![
            Point2::new(1.0, 1.0),
            Point2::new(5.0, 1.0),
            Point2::new(5.0, -2.0),
            Point2::new(8.0, -2.0),
            Point2::new(8.0, 2.0),
        ];
        let pieces = clip_polyline_rect(&pts, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(pieces.len(), 2);
        for piece in &pieces {
            assert!(piece.len() >= 2);
            for p in piece {
                assert!(p.x >= -1e-9 && p.x <= 10.0 + 1e-9);
                assert!(p.y >= -1e-9 && p.y <= 10.0 + 1e-9);
            }
        }
    }

    #[test]
    fn frame_spec_rejects_bad_overlap() {
        let mut spec = FrameSpec::default();
        spec.overlap_ratio = 0.5;
        assert!(spec.validate().is_err());
        spec.overlap_ratio = 0.0;
        assert!(spec.validate().is_err());
        spec.overlap_ratio = 0.49;
        assert!(spec.validate().is_ok());
    }
}
