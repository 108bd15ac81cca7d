//! Oriented 3D boxes with yaw-only rotation, and their overlap.
//!
//! Boxes are gravity aligned: the only rotation is `yaw` about the vertical
//! (`z`) axis. Volumetric IoU is the bird's-eye-view polygon intersection
//! times the vertical overlap.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

/// Areas and volumes below this are treated as zero.
pub const AREA_EPS: f64 = 1e-12;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if !angle.is_finite() {
        return angle;
    }
    let mut a = angle.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    // rem_euclid can return TAU itself for tiny negative inputs.
    if a <= -PI {
        a += TAU;
    }
    a
}

/// A 7-DoF box: center, dimensions and yaw.
///
/// `l` runs along the heading direction, `w` across it and `h` is vertical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct OrientedBox3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl From<[f64; 7]> for OrientedBox3D {
    fn from(v: [f64; 7]) -> Self {
        OrientedBox3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }
}

impl From<OrientedBox3D> for [f64; 7] {
    fn from(b: OrientedBox3D) -> Self {
        b.to_array()
    }
}

impl OrientedBox3D {
    /// Builds a box, normalizing `yaw` into `(-pi, pi]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, yaw: f64) -> Self {
        OrientedBox3D {
            x,
            y,
            z,
            l,
            w,
            h,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.yaw]
    }

    /// True when all dimensions are strictly positive and every field is finite.
    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.l > 0.0 && self.w > 0.0 && self.h > 0.0
    }

    pub fn volume(&self) -> f64 {
        let v = self.l.max(0.0) * self.w.max(0.0) * self.h.max(0.0);
        if v < AREA_EPS {
            0.0
        } else {
            v
        }
    }

    pub fn bottom(&self) -> f64 {
        self.z - 0.5 * self.h
    }

    pub fn top(&self) -> f64 {
        self.z + 0.5 * self.h
    }

    /// Footprint corners in the x-y plane, counter-clockwise viewed from
    /// above, starting at the local `(+l/2, +w/2)` corner.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        self.bev_corners_relative(0.0, 0.0)
    }

    /// Footprint corners expressed relative to `(ox, oy)`.
    fn bev_corners_relative(&self, ox: f64, oy: f64) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        let cx = self.x - ox;
        let cy = self.y - oy;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [cx + c * u - s * v, cy + s * u + c * v])
    }

    /// The 8 corners: bottom face (counter-clockwise from above, starting at
    /// local `(+l/2, +w/2)`), then the top face in the same order.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let (zb, zt) = (self.bottom(), self.top());
        let mut out = [[0.0; 3]; 8];
        for (k, [px, py]) in bev.iter().enumerate() {
            out[k] = [*px, *py, zb];
            out[k + 4] = [*px, *py, zt];
        }
        out
    }

    /// Point-in-box test, boundary inclusive.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= 0.5 * self.l && v.abs() <= 0.5 * self.w && (p[2] - self.z).abs() <= 0.5 * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        OrientedBox3D {
            x: self.x + dx,
            y: self.y + dy,
            z: self.z + dz,
            ..*self
        }
    }
}

/// Signed area by the shoelace formula (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`
/// (Sutherland-Hodgman). Points on a clip edge count as inside.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let d_cur = cross(e0, e1, cur);
            let d_prev = cross(e0, e1, prev);
            let cur_in = d_cur >= 0.0;
            let prev_in = d_prev >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(edge_intersection(prev, cur, d_prev, d_cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(edge_intersection(prev, cur, d_prev, d_cur));
            }
        }
    }
    output
}

fn edge_intersection(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn rect_area(b: &OrientedBox3D) -> f64 {
    let a = b.l.max(0.0) * b.w.max(0.0);
    if a < AREA_EPS {
        0.0
    } else {
        a
    }
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection_area(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    if rect_area(a) == 0.0 || rect_area(b) == 0.0 {
        return 0.0;
    }
    // Work relative to the midpoint of the two centers so the result only
    // depends on the relative placement of the boxes.
    let ox = 0.5 * (a.x + b.x);
    let oy = 0.5 * (a.y + b.y);
    let pa = a.bev_corners_relative(ox, oy);
    let pb = b.bev_corners_relative(ox, oy);
    // Quick reject on circumscribed circles.
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.x - b.x).hypot(a.y - b.y) > ra + rb {
        return 0.0;
    }
    let area = polygon_area(&clip_convex(&pa, &pb)).abs();
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// Bird's-eye-view IoU of the two footprints.
pub fn iou_bev(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    if same_footprint(a, b) {
        return if rect_area(a) > 0.0 { 1.0 } else { 0.0 };
    }
    let inter = sym_min(bev_intersection_area(a, b), bev_intersection_area(b, a));
    let union = rect_area(a) + rect_area(b) - inter;
    if inter == 0.0 || union < AREA_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn vertical_overlap(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0)
}

/// Volumetric IoU of two gravity-aligned boxes.
pub fn iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let dz = vertical_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    if same_footprint(a, b) && a.z == b.z && a.h == b.h {
        return if a.volume() > 0.0 { 1.0 } else { 0.0 };
    }
    let area = sym_min(bev_intersection_area(a, b), bev_intersection_area(b, a));
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if inter < AREA_EPS || union < AREA_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

// Clipping a polygon against itself loses a few ulps of area.
fn same_footprint(a: &OrientedBox3D, b: &OrientedBox3D) -> bool {
    a.x == b.x && a.y == b.y && a.l == b.l && a.w == b.w && a.yaw == b.yaw
}

// Clipping A by B and B by A agree up to rounding; taking the smaller of the
// two makes the result exactly symmetric in its arguments.
fn sym_min(x: f64, y: f64) -> f64 {
    x.min(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;
    use std::f64::consts::FRAC_PI_4;

    fn sorted(mut v: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-6.0) - (TAU - 6.0)).abs() < 1e-15);
        for k in -50..50 {
            let a = wrap_angle(k as f64 * 0.37);
            assert!(a > -PI && a <= PI);
        }
    }

    #[test]
    fn unit_cube_corners() {
        let b = OrientedBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let c = b.corners();
        assert_eq!(c[0], [0.5, 0.5, -0.5]);
        assert_eq!(c[1], [-0.5, 0.5, -0.5]);
        assert_eq!(c[2], [-0.5, -0.5, -0.5]);
        assert_eq!(c[3], [0.5, -0.5, -0.5]);
        assert_eq!(c[4], [0.5, 0.5, 0.5]);
        for p in c {
            assert!(p.iter().all(|v| v.abs() == 0.5));
        }
    }

    #[test]
    fn unit_cube_quarter_turn_same_corner_set() {
        let a = OrientedBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = OrientedBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, FRAC_PI_2);
        let round = |v: [f64; 3]| v.map(|c| (c * 1e9).round() / 1e9);
        let ca = sorted(a.corners().iter().map(|p| round(*p)).collect());
        let cb = sorted(b.corners().iter().map(|p| round(*p)).collect());
        assert_eq!(ca, cb);
    }

    #[test]
    fn rotated_corners_match_affine_oracle() {
        // Homogeneous 4x4 transform: translate(x,y,z) * rotz(yaw).
        let b = OrientedBox3D::new(0.3, -1.2, 0.7, 2.0, 1.0, 1.0, FRAC_PI_4);
        let (s, c) = FRAC_PI_4.sin_cos();
        let m = [
            [c, -s, 0.0, 0.3],
            [s, c, 0.0, -1.2],
            [0.0, 0.0, 1.0, 0.7],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let local = [
            [1.0, 0.5, -0.5],
            [-1.0, 0.5, -0.5],
            [-1.0, -0.5, -0.5],
            [1.0, -0.5, -0.5],
            [1.0, 0.5, 0.5],
            [-1.0, 0.5, 0.5],
            [-1.0, -0.5, 0.5],
            [1.0, -0.5, 0.5],
        ];
        for (k, p) in local.iter().enumerate() {
            let h = [p[0], p[1], p[2], 1.0];
            let mut q = [0.0; 3];
            for r in 0..3 {
                q[r] = (0..4).map(|j| m[r][j] * h[j]).sum();
            }
            let got = b.corners()[k];
            for r in 0..3 {
                assert!((got[r] - q[r]).abs() < 1e-12, "corner {k}: {got:?} vs {q:?}");
            }
        }
    }

    #[test]
    fn bev_identity_and_shift() {
        let a = OrientedBox3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert_eq!(iou_bev(&a, &a), 1.0);
        let b = OrientedBox3D::new(1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert!((iou_bev(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rectangle_is_zero() {
        let a = OrientedBox3D::new(0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0);
        let b = OrientedBox3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert_eq!(iou_bev(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &a), 0.0);
    }

    #[test]
    fn iou3d_identity_and_touching() {
        let a = OrientedBox3D::new(1.0, 2.0, 3.0, 4.0, 2.0, 1.5, 0.3);
        assert_eq!(iou_3d(&a, &a), 1.0);
        let u = OrientedBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let v = OrientedBox3D::new(0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(iou_3d(&u, &v), 0.0);
    }

    #[test]
    fn square_rotated_45_matches_analytic_octagon() {
        // Intersection of a 2x2 square with itself rotated by 45 degrees is a
        // regular octagon with inradius 1: area 8 (sqrt 2 - 1).
        let a = OrientedBox3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        let b = OrientedBox3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, FRAC_PI_4);
        let oct = 8.0 * (2f64.sqrt() - 1.0);
        let expect = oct / (8.0 - oct);
        assert!((iou_bev(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn contains_respects_yaw() {
        let b = OrientedBox3D::new(0.0, 0.0, 0.0, 4.0, 1.0, 1.0, FRAC_PI_2);
        assert!(b.contains([0.0, 1.9, 0.0]));
        assert!(!b.contains([1.9, 0.0, 0.0]));
    }
}
