//! Sequential-impulse contact solver and the fixed-step integrator.

use super::collide::{box_box, box_ground, ContactPoint, Obb};
use super::vec2::{cross_sv, Vec2};
use super::{BlockPose, PhysicsError, PhysicsParams, TowerScene, Trajectory, DEFAULT_CAPTURE_HZ};

#[derive(Debug, Clone, Copy)]
struct Body {
    pos: Vec2,
    theta: f64,
    vel: Vec2,
    omega: f64,
}

impl Body {
    fn from_pose(p: &BlockPose) -> Self {
        Self {
            pos: Vec2::new(p.x, p.y),
            theta: p.theta,
            vel: Vec2::new(p.vx, p.vy),
            omega: p.omega,
        }
    }

    fn pose(&self) -> BlockPose {
        BlockPose {
            x: self.pos.x,
            y: self.pos.y,
            theta: self.theta,
            vx: self.vel.x,
            vy: self.vel.y,
            omega: self.omega,
        }
    }
}

/// `None` is the static ground.
type BodyRef = Option<usize>;

#[derive(Debug, Clone, Copy)]
struct Contact {
    a: BodyRef,
    b: usize,
    point: ContactPoint,
    r_a: Vec2,
    r_b: Vec2,
    mass_normal: f64,
    mass_tangent: f64,
    bias: f64,
    impulse_normal: f64,
    impulse_tangent: f64,
}

struct World<'p> {
    params: &'p PhysicsParams,
    bodies: Vec<Body>,
    contacts: Vec<Contact>,
    inv_mass: f64,
    inv_inertia: f64,
}

impl<'p> World<'p> {
    fn new(poses: &[BlockPose], params: &'p PhysicsParams) -> Self {
        Self {
            params,
            bodies: poses.iter().map(Body::from_pose).collect(),
            contacts: Vec::new(),
            inv_mass: 1.0 / params.mass,
            inv_inertia: 1.0 / params.inertia(),
        }
    }

    fn obb(&self, i: usize) -> Obb {
        let b = &self.bodies[i];
        Obb::new(b.pos, b.theta, self.params.side / 2.0)
    }

    /// Rebuilds the contact set, carrying accumulated impulses over for
    /// contacts whose geometric feature persists.
    fn collide(&mut self) {
        let mut fresh = Vec::with_capacity(self.contacts.len().max(8));
        let n = self.bodies.len();
        for b in 0..n {
            for point in box_ground(&self.obb(b)) {
                fresh.push(self.new_contact(None, b, point));
            }
        }
        for a in 0..n {
            let oa = self.obb(a);
            for b in a + 1..n {
                for point in box_box(&oa, &self.obb(b)) {
                    fresh.push(self.new_contact(Some(a), b, point));
                }
            }
        }
        for c in fresh.iter_mut() {
            if let Some(old) = self
                .contacts
                .iter()
                .find(|o| o.a == c.a && o.b == c.b && o.point.feature == c.point.feature)
            {
                c.impulse_normal = old.impulse_normal;
                c.impulse_tangent = old.impulse_tangent;
            }
        }
        self.contacts = fresh;
    }

    fn new_contact(&self, a: BodyRef, b: usize, point: ContactPoint) -> Contact {
        Contact {
            a,
            b,
            point,
            r_a: Vec2::ZERO,
            r_b: Vec2::ZERO,
            mass_normal: 0.0,
            mass_tangent: 0.0,
            bias: 0.0,
            impulse_normal: 0.0,
            impulse_tangent: 0.0,
        }
    }

    fn velocity_at(&self, body: BodyRef, r: Vec2) -> Vec2 {
        match body {
            Some(i) => {
                let b = &self.bodies[i];
                b.vel + cross_sv(b.omega, r)
            }
            None => Vec2::ZERO,
        }
    }

    fn apply_impulse(&mut self, body: BodyRef, r: Vec2, impulse: Vec2) {
        if let Some(i) = body {
            let b = &mut self.bodies[i];
            b.vel += impulse * self.inv_mass;
            b.omega += self.inv_inertia * r.cross(impulse);
        }
    }

    fn inv_mass_of(&self, body: BodyRef) -> (f64, f64) {
        match body {
            Some(_) => (self.inv_mass, self.inv_inertia),
            None => (0.0, 0.0),
        }
    }

    fn pre_step(&mut self) {
        let p = self.params;
        let inv_dt = 1.0 / p.dt;
        for k in 0..self.contacts.len() {
            let mut c = self.contacts[k];
            let n = c.point.normal;
            let t = -n.perp();
            let (im_a, ii_a) = self.inv_mass_of(c.a);
            let (im_b, ii_b) = self.inv_mass_of(Some(c.b));
            c.r_a = match c.a {
                Some(i) => c.point.position - self.bodies[i].pos,
                None => Vec2::ZERO,
            };
            c.r_b = c.point.position - self.bodies[c.b].pos;

            let rn_a = c.r_a.cross(n);
            let rn_b = c.r_b.cross(n);
            c.mass_normal = 1.0 / (im_a + im_b + ii_a * rn_a * rn_a + ii_b * rn_b * rn_b);
            let rt_a = c.r_a.cross(t);
            let rt_b = c.r_b.cross(t);
            c.mass_tangent = 1.0 / (im_a + im_b + ii_a * rt_a * rt_a + ii_b * rt_b * rt_b);

            let penetration = -c.point.separation;
            c.bias = p.baumgarte_beta * inv_dt * (penetration - p.slop).max(0.0);
            if p.restitution > 0.0 {
                let dv = self.velocity_at(Some(c.b), c.r_b) - self.velocity_at(c.a, c.r_a);
                let vn = dv.dot(n);
                if vn < 0.0 {
                    c.bias = c.bias.max(-p.restitution * vn);
                }
            }

            // Warm start.
            let impulse = n * c.impulse_normal + t * c.impulse_tangent;
            self.apply_impulse(c.a, c.r_a, -impulse);
            self.apply_impulse(Some(c.b), c.r_b, impulse);
            self.contacts[k] = c;
        }
    }

    fn solve_velocities(&mut self) {
        let mu = self.params.friction_mu;
        for k in 0..self.contacts.len() {
            let mut c = self.contacts[k];
            let n = c.point.normal;
            let t = -n.perp();

            let dv = self.velocity_at(Some(c.b), c.r_b) - self.velocity_at(c.a, c.r_a);
            let vn = dv.dot(n);
            let d_pn = c.mass_normal * (-vn + c.bias);
            let old = c.impulse_normal;
            c.impulse_normal = (old + d_pn).max(0.0);
            let d_pn = c.impulse_normal - old;
            let pn = n * d_pn;
            self.apply_impulse(c.a, c.r_a, -pn);
            self.apply_impulse(Some(c.b), c.r_b, pn);

            let dv = self.velocity_at(Some(c.b), c.r_b) - self.velocity_at(c.a, c.r_a);
            let vt = dv.dot(t);
            let d_pt = c.mass_tangent * (-vt);
            let max_t = mu * c.impulse_normal;
            let old = c.impulse_tangent;
            c.impulse_tangent = (old + d_pt).clamp(-max_t, max_t);
            let d_pt = c.impulse_tangent - old;
            let pt = t * d_pt;
            self.apply_impulse(c.a, c.r_a, -pt);
            self.apply_impulse(Some(c.b), c.r_b, pt);

            self.contacts[k] = c;
        }
    }

    fn step(&mut self) {
        self.collide();
        let dt = self.params.dt;
        let g = Vec2::new(0.0, -self.params.gravity);
        for b in self.bodies.iter_mut() {
            b.vel += g * dt;
        }
        self.pre_step();
        for _ in 0..self.params.solver_iters {
            self.solve_velocities();
        }
        for b in self.bodies.iter_mut() {
            b.pos += b.vel * dt;
            b.theta += b.omega * dt;
        }
    }

    fn poses(&self) -> Vec<BlockPose> {
        self.bodies.iter().map(Body::pose).collect()
    }

    fn is_finite(&self) -> bool {
        self.bodies.iter().all(|b| b.pose().is_finite())
    }
}

/// Simulates a tower for `params.sim_duration` seconds, capturing poses at
/// the default 8 Hz.
pub fn simulate(scene: &TowerScene) -> Result<Trajectory, PhysicsError> {
    simulate_with_rate(scene.blocks(), scene.params(), DEFAULT_CAPTURE_HZ)
}

/// Simulates arbitrary initial poses (any number of blocks) and captures
/// them every `1 / capture_hz` seconds. Frame 0 is the initial state.
pub fn simulate_with_rate(
    poses: &[BlockPose],
    params: &PhysicsParams,
    capture_hz: f64,
) -> Result<Trajectory, PhysicsError> {
    params.validate()?;
    if !(capture_hz.is_finite() && capture_hz > 0.0) {
        return Err(PhysicsError::InvalidParams("capture_hz must be > 0".into()));
    }
    let n_frames = Trajectory::frame_count(params.sim_duration, capture_hz);
    let mut world = World::new(poses, params);
    let mut frames = Vec::with_capacity(n_frames);
    frames.push(world.poses());
    let mut step = 0usize;
    for f in 1..n_frames {
        let target = (f as f64 / (capture_hz * params.dt)).round() as usize;
        while step < target {
            world.step();
            step += 1;
            if !world.is_finite() {
                return Err(PhysicsError::DivergedSimulation { step });
            }
        }
        frames.push(world.poses());
    }
    Ok(Trajectory {
        capture_hz,
        duration: params.sim_duration,
        frames,
    })
}

/// Kinetic plus gravitational potential energy (ground at y = 0).
pub fn total_energy(poses: &[BlockPose], params: &PhysicsParams) -> f64 {
    let inertia = params.inertia();
    poses
        .iter()
        .map(|p| {
            0.5 * params.mass * (p.vx * p.vx + p.vy * p.vy)
                + 0.5 * inertia * p.omega * p.omega
                + params.mass * params.gravity * p.y
        })
        .sum()
}
