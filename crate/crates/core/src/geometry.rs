//! Vector math, planar tessellation and segment/box occlusion.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum overlap, as a fraction of the segment length, for a segment to
/// count as passing through a box. Grazing contacts fall below it.
const OVERLAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);
    pub const DOWN: Vec3 = Vec3::new(0.0, 0.0, -1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_unit(self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, axis: usize) -> &f64 {
        match axis {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceTag {
    WallNorth,
    WallSouth,
    WallEast,
    WallWest,
    Floor,
    HumanTop,
    HumanSideUpper,
    HumanSideLower,
}

impl SurfaceTag {
    pub fn is_human(self) -> bool {
        matches!(
            self,
            SurfaceTag::HumanTop | SurfaceTag::HumanSideUpper | SurfaceTag::HumanSideLower
        )
    }
}

/// A planar patch of a diffuse surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSegment {
    pub centroid: Vec3,
    pub normal: Vec3,
    /// m²
    pub area: f64,
    pub reflectance: f64,
    pub tag: SurfaceTag,
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub min: Vec3,
    pub max: Vec3,
}

impl Cuboid {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::Config(format!(
                "cuboid corners not ordered: {min:?} / {max:?}"
            )));
        }
        Ok(Cuboid { min, max })
    }

    /// True when the open segment (a, b) passes through the interior.
    ///
    /// Slab test against the open box. Touching a face, edge or corner, or
    /// running along a face, does not block.
    #[inline]
    pub fn blocks(&self, a: Vec3, b: Vec3) -> bool {
        let d = b - a;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for axis in 0..3 {
            let (o, di, lo, hi) = (a[axis], d[axis], self.min[axis], self.max[axis]);
            if di == 0.0 {
                if o <= lo || o >= hi {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / di;
            let (mut ta, mut tb) = ((lo - o) * inv, (hi - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t1 - t0 <= OVERLAP_EPS {
                return false;
            }
        }
        true
    }

    /// Cheap rejection: both points strictly outside the same slab face.
    #[inline]
    pub fn trivially_misses(&self, a: Vec3, b: Vec3) -> bool {
        (a.x <= self.min.x && b.x <= self.min.x)
            || (a.x >= self.max.x && b.x >= self.max.x)
            || (a.y <= self.min.y && b.y <= self.min.y)
            || (a.y >= self.max.y && b.y >= self.max.y)
            || (a.z <= self.min.z && b.z <= self.min.z)
            || (a.z >= self.max.z && b.z >= self.max.z)
    }
}

/// Line-of-sight test between two points.
pub fn segment_visible(a: Vec3, b: Vec3, occluders: &[Cuboid]) -> Result<bool> {
    if a == b {
        return Err(Error::Config(format!(
            "visibility query with coincident endpoints {a:?}"
        )));
    }
    Ok(clear_path(a, b, occluders))
}

/// Unchecked variant of [`segment_visible`] for hot loops.
#[inline]
pub fn clear_path(a: Vec3, b: Vec3, occluders: &[Cuboid]) -> bool {
    occluders.iter().all(|c| !c.blocks(a, b))
}

/// One tile along an edge: (center offset, length).
fn cells(len: f64, resolution: f64, even: bool) -> Vec<(f64, f64)> {
    let n = ((len / resolution) - 1e-9).ceil().max(1.0) as usize;
    if even {
        let size = len / n as f64;
        return (0..n).map(|i| ((i as f64 + 0.5) * size, size)).collect();
    }
    (0..n)
        .map(|i| {
            let start = i as f64 * resolution;
            let size = if i + 1 == n { len - start } else { resolution };
            (start + 0.5 * size, size)
        })
        .collect()
}

fn check_rect(edge_u: Vec3, edge_v: Vec3, normal: Vec3, rho: f64, resolution: f64) -> Result<()> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::Config(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    let (lu, lv) = (edge_u.norm(), edge_v.norm());
    if !(lu > 0.0 && lv > 0.0) {
        return Err(Error::Config("rectangle edge has zero length".into()));
    }
    if edge_u.dot(edge_v).abs() > 1e-9 * lu * lv {
        return Err(Error::Config(format!(
            "rectangle edges not orthogonal: {edge_u:?}, {edge_v:?}"
        )));
    }
    if !normal.is_unit(1e-9) {
        return Err(Error::Config(format!("normal not unit length: {normal:?}")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("reflectance {rho} outside [0, 1]")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn tessellate(
    origin: Vec3,
    edge_u: Vec3,
    edge_v: Vec3,
    normal: Vec3,
    reflectance: f64,
    resolution: f64,
    tag: SurfaceTag,
    even: bool,
) -> Result<Vec<SurfaceSegment>> {
    check_rect(edge_u, edge_v, normal, reflectance, resolution)?;
    let (lu, lv) = (edge_u.norm(), edge_v.norm());
    let (du, dv) = (edge_u * (1.0 / lu), edge_v * (1.0 / lv));
    let cu = cells(lu, resolution, even);
    let cv = cells(lv, resolution, even);
    let mut out = Vec::with_capacity(cu.len() * cv.len());
    for &(sv, hv) in &cv {
        for &(su, hu) in &cu {
            out.push(SurfaceSegment {
                centroid: origin + du * su + dv * sv,
                normal,
                area: hu * hv,
                reflectance,
                tag,
            });
        }
    }
    Ok(out)
}

/// Tiles the rectangle `origin + s·edge_u + t·edge_v`, s, t ∈ [0, 1], with
/// squares of side `resolution`; the last row and column take the remainder.
pub fn tessellate_rect(
    origin: Vec3,
    edge_u: Vec3,
    edge_v: Vec3,
    normal: Vec3,
    reflectance: f64,
    resolution: f64,
    tag: SurfaceTag,
) -> Result<Vec<SurfaceSegment>> {
    tessellate(
        origin,
        edge_u,
        edge_v,
        normal,
        reflectance,
        resolution,
        tag,
        false,
    )
}

/// Like [`tessellate_rect`] but splits each edge into equal tiles no longer
/// than `resolution`, so the tiling is symmetric about the rectangle center.
pub fn tessellate_rect_even(
    origin: Vec3,
    edge_u: Vec3,
    edge_v: Vec3,
    normal: Vec3,
    reflectance: f64,
    resolution: f64,
    tag: SurfaceTag,
) -> Result<Vec<SurfaceSegment>> {
    tessellate(
        origin,
        edge_u,
        edge_v,
        normal,
        reflectance,
        resolution,
        tag,
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn total_area(s: &[SurfaceSegment]) -> f64 {
        s.iter().map(|s| s.area).sum()
    }

    #[test]
    fn wall_5x3_at_quarter_meter() {
        let segs = tessellate_rect(
            Vec3::ZERO,
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::new(0.0, 1.0, 0.0),
            0.8,
            0.25,
            SurfaceTag::WallSouth,
        )
        .unwrap();
        assert_eq!(segs.len(), 240);
        assert!(segs.iter().all(|s| s.area == 0.0625));
    }

    #[test]
    fn unit_square_single_tile() {
        let segs = tessellate_rect(
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::UP,
            0.45,
            1.0,
            SurfaceTag::Floor,
        )
        .unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].area, 1.0);
        assert_eq!(segs[0].centroid, Vec3::new(0.5, 0.5, 0.0));
    }

    #[test]
    fn floor_5x5() {
        let segs = tessellate_rect(
            Vec3::ZERO,
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(0.0, 5.0, 0.0),
            Vec3::UP,
            0.45,
            0.25,
            SurfaceTag::Floor,
        )
        .unwrap();
        assert_eq!(segs.len(), 400);
        assert!((total_area(&segs) - 25.0).abs() < 1e-9);
    }

    #[test]
    fn remainder_tiles_sit_at_the_end() {
        let segs = tessellate_rect(
            Vec3::ZERO,
            Vec3::new(0.4, 0.0, 0.0),
            Vec3::new(0.0, 0.25, 0.0),
            Vec3::UP,
            0.5,
            0.25,
            SurfaceTag::Floor,
        )
        .unwrap();
        assert_eq!(segs.len(), 2);
        assert!((segs[0].area - 0.0625).abs() < 1e-15);
        assert!((segs[1].area - 0.15 * 0.25).abs() < 1e-15);
        let even = tessellate_rect_even(
            Vec3::ZERO,
            Vec3::new(0.4, 0.0, 0.0),
            Vec3::new(0.0, 0.25, 0.0),
            Vec3::UP,
            0.5,
            0.25,
            SurfaceTag::Floor,
        )
        .unwrap();
        assert_eq!(even.len(), 2);
        assert!((even[0].area - even[1].area).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_rectangles() {
        let skew = tessellate_rect(
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::UP,
            0.5,
            0.25,
            SurfaceTag::Floor,
        );
        assert!(matches!(skew, Err(Error::Config(_))));
        for res in [0.0, -0.1, f64::NAN] {
            let r = tessellate_rect(
                Vec3::ZERO,
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::UP,
                0.5,
                res,
                SurfaceTag::Floor,
            );
            assert!(matches!(r, Err(Error::Config(_))), "resolution {res}");
        }
    }

    #[test]
    fn visibility_examples() {
        let body = Cuboid::new(Vec3::new(2.0, 2.0, 0.0), Vec3::new(3.0, 3.0, 2.0)).unwrap();
        assert!(
            !segment_visible(Vec3::new(0.0, 0.0, 1.0), Vec3::new(5.0, 5.0, 1.0), &[body]).unwrap()
        );

        let short = Cuboid::new(Vec3::new(2.0, 2.0, 0.0), Vec3::new(3.0, 3.0, 1.8)).unwrap();
        assert!(
            segment_visible(Vec3::new(0.0, 0.0, 2.9), Vec3::new(5.0, 0.0, 2.9), &[short]).unwrap()
        );

        assert!(segment_visible(Vec3::ZERO, Vec3::new(1.0, 2.0, 3.0), &[]).unwrap());
        assert!(segment_visible(Vec3::ZERO, Vec3::ZERO, &[]).is_err());
    }

    #[test]
    fn face_points_see_outward_not_inward() {
        let body = Cuboid::new(Vec3::new(2.0, 2.0, 0.0), Vec3::new(3.0, 3.0, 2.0)).unwrap();
        let on_face = Vec3::new(3.0, 2.5, 1.0);
        assert!(!body.blocks(on_face, Vec3::new(5.0, 2.5, 1.5)));
        assert!(body.blocks(on_face, Vec3::new(0.0, 2.5, 1.0)));
        // Running along the top face.
        assert!(!body.blocks(Vec3::new(1.0, 2.5, 2.0), Vec3::new(4.0, 2.5, 2.0)));
        // Through an edge only.
        assert!(!body.blocks(Vec3::new(2.0, 1.0, 1.0), Vec3::new(4.0, 3.0, 1.0)));
    }

    fn arb_point() -> impl Strategy<Value = Vec3> {
        (0.0..5.0f64, 0.0..5.0f64, 0.0..3.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn arb_box() -> impl Strategy<Value = Cuboid> {
        (
            0.2..4.8f64,
            0.2..4.8f64,
            0.05..0.6f64,
            0.05..0.6f64,
            0.3..2.5f64,
        )
            .prop_map(|(cx, cy, hx, hy, h)| {
                Cuboid::new(
                    Vec3::new(cx - hx, cy - hy, 0.0),
                    Vec3::new(cx + hx, cy + hy, h),
                )
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn visibility_is_symmetric(a in arb_point(), b in arb_point(), boxes in prop::collection::vec(arb_box(), 0..3)) {
            prop_assume!(a != b);
            prop_assert_eq!(
                segment_visible(a, b, &boxes).unwrap(),
                segment_visible(b, a, &boxes).unwrap()
            );
        }

        #[test]
        fn adding_occluders_never_unblocks(a in arb_point(), b in arb_point(), boxes in prop::collection::vec(arb_box(), 1..4), extra in arb_box()) {
            prop_assume!(a != b);
            let before = segment_visible(a, b, &boxes).unwrap();
            let mut more = boxes.clone();
            more.push(extra);
            let after = segment_visible(a, b, &more).unwrap();
            prop_assert!(before || !after);
        }

        #[test]
        fn trivial_miss_implies_no_block(a in arb_point(), b in arb_point(), c in arb_box()) {
            if c.trivially_misses(a, b) {
                prop_assert!(!c.blocks(a, b));
            }
        }

        #[test]
        fn tessellation_conserves_area(w in 0.05..7.0f64, h in 0.05..4.0f64, res in 0.03..1.5f64, even in any::<bool>()) {
            let f = if even { tessellate_rect_even } else { tessellate_rect };
            let segs = f(
                Vec3::new(1.0, -2.0, 0.5),
                Vec3::new(0.0, w, 0.0),
                Vec3::new(0.0, 0.0, h),
                Vec3::new(1.0, 0.0, 0.0),
                0.8,
                res,
                SurfaceTag::WallWest,
            ).unwrap();
            let total: f64 = segs.iter().map(|s| s.area).sum();
            prop_assert!((total - w * h).abs() <= 1e-9 * w * h);
            prop_assert!(segs.iter().all(|s| s.area > 0.0));
        }
    }
}
