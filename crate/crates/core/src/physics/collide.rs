//! Contact generation: box-box by reference-face clipping, box-ground from
//! the two lowest corners. At most two points per pair.

use super::vec2::Vec2;

/// Oriented square.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Obb {
    pub center: Vec2,
    /// Local x and y axes in world space.
    pub axes: [Vec2; 2],
    pub half: f64,
}

impl Obb {
    pub fn new(center: Vec2, theta: f64, half: f64) -> Self {
        let u = Vec2::from_angle(theta);
        Self {
            center,
            axes: [u, u.perp()],
            half,
        }
    }

    /// Outward face normals in order +x, +y, -x, -y.
    fn face_normal(&self, face: usize) -> Vec2 {
        match face {
            0 => self.axes[0],
            1 => self.axes[1],
            2 => -self.axes[0],
            _ => -self.axes[1],
        }
    }

    /// Corners in counter-clockwise order starting at (+,+).
    pub fn corners(&self) -> [Vec2; 4] {
        let (u, v) = (self.axes[0] * self.half, self.axes[1] * self.half);
        let c = self.center;
        [c + u + v, c - u + v, c - u - v, c + u - v]
    }

    /// Half-width of the projection onto `n`.
    fn radius_along(&self, n: Vec2) -> f64 {
        self.half * (self.axes[0].dot(n).abs() + self.axes[1].dot(n).abs())
    }

    /// End points of face `face`, ordered so the edge runs counter-clockwise.
    fn face_edge(&self, face: usize) -> [Vec2; 2] {
        let n = self.face_normal(face);
        let t = n.perp() * self.half;
        let mid = self.center + n * self.half;
        [mid - t, mid + t]
    }
}

/// One contact point. `normal` points from body A to body B and
/// `separation` is negative when the bodies overlap.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ContactPoint {
    pub position: Vec2,
    pub normal: Vec2,
    pub separation: f64,
    /// Geometric feature key used to carry accumulated impulses across steps.
    pub feature: u32,
}

#[derive(Debug, Clone, Copy)]
struct ClipVertex {
    v: Vec2,
    id: u32,
}

/// Keeps the part of the segment with `n·p <= offset`.
fn clip_segment(input: [ClipVertex; 2], n: Vec2, offset: f64, clip_id: u32) -> Option<[ClipVertex; 2]> {
    let d0 = n.dot(input[0].v) - offset;
    let d1 = n.dot(input[1].v) - offset;
    let mut out = Vec::with_capacity(2);
    if d0 <= 0.0 {
        out.push(input[0]);
    }
    if d1 <= 0.0 {
        out.push(input[1]);
    }
    if d0 * d1 < 0.0 {
        let t = d0 / (d0 - d1);
        let v = input[0].v + (input[1].v - input[0].v) * t;
        let id = if d0 > 0.0 { input[0].id } else { input[1].id } | clip_id;
        out.push(ClipVertex { v, id });
    }
    if out.len() < 2 {
        return None;
    }
    Some([out[0], out[1]])
}

/// Face of `b` whose normal is most anti-parallel to `n`.
fn incident_face(b: &Obb, n: Vec2) -> usize {
    let mut best = 0;
    let mut best_dot = f64::INFINITY;
    for face in 0..4 {
        let d = b.face_normal(face).dot(n);
        if d < best_dot {
            best_dot = d;
            best = face;
        }
    }
    best
}

/// Least-penetration face axis of `a` against `b`: (separation, face index).
fn best_face(a: &Obb, b: &Obb) -> (f64, usize) {
    let d = b.center - a.center;
    let mut best = (f64::NEG_INFINITY, 0);
    for axis in 0..2 {
        let n = a.axes[axis];
        let along = d.dot(n);
        let sep = along.abs() - a.half - b.radius_along(n);
        let face = if along >= 0.0 { axis } else { axis + 2 };
        if sep > best.0 {
            best = (sep, face);
        }
    }
    best
}

pub(crate) fn box_box(a: &Obb, b: &Obb) -> Vec<ContactPoint> {
    let (sep_a, face_a) = best_face(a, b);
    if sep_a > 0.0 {
        return Vec::new();
    }
    let (sep_b, face_b) = best_face(b, a);
    if sep_b > 0.0 {
        return Vec::new();
    }
    // Prefer A's face unless B's is clearly better; stops the reference face
    // flipping between steps for near-equal separations.
    const REL_TOL: f64 = 0.95;
    const ABS_TOL: f64 = 0.01;
    let flip = sep_b > REL_TOL * sep_a + ABS_TOL * a.half;
    let (reference, incident, ref_face) = if flip { (b, a, face_b) } else { (a, b, face_a) };

    let front = reference.face_normal(ref_face);
    let inc_face = incident_face(incident, front);
    let edge = incident.face_edge(inc_face);
    let seg = [
        ClipVertex { v: edge[0], id: 0 },
        ClipVertex { v: edge[1], id: 1 },
    ];

    let side = front.perp();
    let side_offset = side.dot(reference.center);
    let Some(seg) = clip_segment(seg, side, side_offset + reference.half, 2) else {
        return Vec::new();
    };
    let Some(seg) = clip_segment(seg, -side, -side_offset + reference.half, 4) else {
        return Vec::new();
    };

    let front_offset = front.dot(reference.center) + reference.half;
    let normal = if flip { -front } else { front };
    let base = ((flip as u32) << 8) | ((ref_face as u32) << 6) | ((inc_face as u32) << 3);
    seg.iter()
        .filter_map(|cv| {
            let separation = front.dot(cv.v) - front_offset;
            (separation <= 0.0).then(|| ContactPoint {
                // Slide the point onto the reference face.
                position: cv.v - front * separation,
                normal,
                separation,
                feature: base | cv.id,
            })
        })
        .collect()
}

/// Contacts against the ground half-plane y >= 0; A is the ground.
pub(crate) fn box_ground(b: &Obb) -> Vec<ContactPoint> {
    let corners = b.corners();
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| corners[i].y.total_cmp(&corners[j].y).then(i.cmp(&j)));
    order[..2]
        .iter()
        .filter(|&&i| corners[i].y <= 0.0)
        .map(|&i| ContactPoint {
            position: Vec2::new(corners[i].x, 0.0),
            normal: Vec2::new(0.0, 1.0),
            separation: corners[i].y,
            feature: i as u32,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacked_boxes_touching_give_two_points_at_overlap_edges() {
        let a = Obb::new(Vec2::new(0.0, 0.5), 0.0, 0.5);
        let b = Obb::new(Vec2::new(0.3, 1.49), 0.0, 0.5);
        let cs = box_box(&a, &b);
        assert_eq!(cs.len(), 2);
        let mut xs: Vec<f64> = cs.iter().map(|c| c.position.x).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 0.2).abs() < 1e-12, "{xs:?}");
        assert!((xs[1] - 0.5).abs() < 1e-12, "{xs:?}");
        for c in &cs {
            assert!((c.normal.y - 1.0).abs() < 1e-12);
            assert!((c.separation + 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_boxes_have_no_contact() {
        let a = Obb::new(Vec2::new(0.0, 0.5), 0.0, 0.5);
        let b = Obb::new(Vec2::new(0.0, 1.6), 0.0, 0.5);
        assert!(box_box(&a, &b).is_empty());
        let c = Obb::new(Vec2::new(1.2, 0.5), 0.3, 0.5);
        assert!(box_box(&a, &c).is_empty());
    }

    #[test]
    fn normal_points_from_a_to_b_either_way_round() {
        let a = Obb::new(Vec2::new(0.0, 0.5), 0.0, 0.5);
        let b = Obb::new(Vec2::new(0.0, 1.49), 0.0, 0.5);
        for c in box_box(&b, &a) {
            assert!(c.normal.y < -0.99);
        }
        for c in box_box(&a, &b) {
            assert!(c.normal.y > 0.99);
        }
    }

    #[test]
    fn tilted_box_touches_ground_with_one_corner() {
        let b = Obb::new(Vec2::new(0.0, 0.6), 0.3, 0.5);
        let low = b.corners().iter().map(|c| c.y).fold(f64::INFINITY, f64::min);
        let b = Obb::new(Vec2::new(0.0, 0.6 - low - 0.001), 0.3, 0.5);
        let cs = box_ground(&b);
        assert_eq!(cs.len(), 1);
        assert!((cs[0].separation + 0.001).abs() < 1e-12);
    }

    #[test]
    fn flat_box_on_ground_uses_two_lowest_corners() {
        let b = Obb::new(Vec2::new(0.0, 0.5), 0.0, 0.5);
        let cs = box_ground(&b);
        assert_eq!(cs.len(), 2);
        assert!(cs.iter().all(|c| c.separation.abs() < 1e-12));
    }
}
