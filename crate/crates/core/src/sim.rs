//! Deterministic 2D rigid-body simulator for the four motion families.
//!
//! The world is the unit square with solid walls. Free bodies (collision and
//! free-fall scenes) integrate with semi-implicit Euler; pendulum bodies are
//! integrated on their swing angle; rolling bodies move along a straight
//! incline track. Every function here is pure over value types.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::Vec2;
use crate::rng;

/// Body slots per scene.
pub const MAX_BODIES: usize = 2;

/// Iterations of the contact fixpoint per substep.
const CONTACT_ITERATIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionType {
    Collision,
    Pendulum,
    FreeFall,
    Rolling,
}

impl MotionType {
    pub const ALL: [MotionType; 4] = [
        MotionType::Collision,
        MotionType::Pendulum,
        MotionType::FreeFall,
        MotionType::Rolling,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionType::Collision => "collision",
            MotionType::Pendulum => "pendulum",
            MotionType::FreeFall => "free_fall",
            MotionType::Rolling => "rolling",
        }
    }

    /// Active bodies in a scene of this family.
    pub fn body_count(self) -> usize {
        match self {
            MotionType::Collision => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for MotionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "collision" => Ok(MotionType::Collision),
            "pendulum" => Ok(MotionType::Pendulum),
            "free_fall" | "free-fall" | "freefall" => Ok(MotionType::FreeFall),
            "rolling" => Ok(MotionType::Rolling),
            other => Err(invalid(format!("unknown motion family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
    pub mass: f64,
    pub restitution: f64,
}

impl Body {
    fn placeholder() -> Body {
        Body {
            position: Vec2::ZERO,
            velocity: Vec2::ZERO,
            radius: 0.05,
            mass: 1.0,
            restitution: 1.0,
        }
    }

    pub fn momentum(&self) -> Vec2 {
        self.velocity * self.mass
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.mass * self.velocity.norm_sq()
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.mass > 0.0 && (0.0..=1.0).contains(&self.restitution)) {
            return Err(invalid(format!("bad body parameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bodies: [Body; MAX_BODIES],
    pub active: [bool; MAX_BODIES],
    pub motion_type: MotionType,
    pub gravity: Vec2,
    /// Pendulum anchor.
    pub pivot: Option<Vec2>,
    /// Track angle for rolling scenes. Positive descends to the right.
    pub incline_angle: Option<f64>,
    pub fps: f64,
}

impl Scene {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn active_bodies(&self) -> impl Iterator<Item = &Body> {
        self.bodies.iter().zip(self.active).filter(|(_, a)| *a).map(|(b, _)| b)
    }

    pub fn total_momentum(&self) -> Vec2 {
        self.active_bodies().fold(Vec2::ZERO, |acc, b| acc + b.momentum())
    }

    pub fn validate(&self) -> Result<()> {
        if self.active_count() != self.motion_type.body_count() {
            return Err(invalid(format!(
                "{} scene needs {} active bodies",
                self.motion_type,
                self.motion_type.body_count()
            )));
        }
        if self.motion_type == MotionType::Pendulum && self.pivot.is_none() {
            return Err(invalid("pendulum scene without pivot"));
        }
        if self.motion_type == MotionType::Rolling && self.incline_angle.is_none() {
            return Err(invalid("rolling scene without incline angle"));
        }
        if !(self.fps > 0.0) {
            return Err(invalid("fps must be positive"));
        }
        for b in self.active_bodies() {
            b.validate()?;
        }
        Ok(())
    }
}

/// Closed sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Span { min, max }
    }

    fn sample(&self, rng: &mut rng::Rng) -> f64 {
        if self.max == self.min {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

/// Ranges from which [`make_scene`] draws scene parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub radius: Span,
    pub mass: Span,
    /// Gravity magnitude in world units per second squared.
    pub gravity: Span,
    pub fps: f64,
    pub drop_height: Span,
    pub drop_vertical_speed: Span,
    pub floor_restitution: f64,
    pub collision_gap: Span,
    pub collision_speed: Span,
    pub collision_target_speed: Span,
    pub collision_heading: Span,
    pub collision_restitution: f64,
    pub pendulum_length: Span,
    pub pendulum_angle: Span,
    pub pendulum_angular_speed: Span,
    /// Cap on the swing amplitude implied by the initial energy.
    pub pendulum_max_amplitude: f64,
    pub incline_angle: Span,
    pub rolling_speed: Span,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            radius: Span::new(0.04, 0.065),
            mass: Span::new(0.5, 2.0),
            gravity: Span::new(1.5, 2.5),
            fps: 30.0,
            drop_height: Span::new(0.28, 0.55),
            drop_vertical_speed: Span::new(0.0, 0.1),
            floor_restitution: 0.6,
            collision_gap: Span::new(0.2, 0.35),
            collision_speed: Span::new(0.6, 1.0),
            collision_target_speed: Span::new(-0.2, 0.2),
            collision_heading: Span::new(-0.3, 0.3),
            collision_restitution: 1.0,
            pendulum_length: Span::new(0.3, 0.42),
            pendulum_angle: Span::new(-0.7, 0.7),
            pendulum_angular_speed: Span::new(-1.0, 1.0),
            pendulum_max_amplitude: 0.9,
            incline_angle: Span::new(0.1, 0.35),
            rolling_speed: Span::new(0.1, 0.5),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let spans = [
            ("radius", self.radius),
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("drop_height", self.drop_height),
            ("drop_vertical_speed", self.drop_vertical_speed),
            ("collision_gap", self.collision_gap),
            ("collision_speed", self.collision_speed),
            ("collision_target_speed", self.collision_target_speed),
            ("collision_heading", self.collision_heading),
            ("pendulum_length", self.pendulum_length),
            ("pendulum_angle", self.pendulum_angle),
            ("pendulum_angular_speed", self.pendulum_angular_speed),
            ("incline_angle", self.incline_angle),
            ("rolling_speed", self.rolling_speed),
        ];
        for (name, s) in spans {
            if !(s.min <= s.max) {
                return Err(invalid(format!("range `{name}` has min > max")));
            }
        }
        if !(self.radius.min > 0.0 && self.mass.min > 0.0) {
            return Err(invalid("radius and mass ranges must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(invalid("fps must be positive"));
        }
        Ok(())
    }
}

fn clamp_inside(p: Vec2, r: f64) -> Vec2 {
    Vec2::new(p.x.clamp(r, 1.0 - r), p.y.clamp(r, 1.0 - r))
}

/// Samples a scene of the given family. Identical inputs give identical scenes.
pub fn make_scene(motion_type: MotionType, seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = rng::stream(seed, &[0x5CE_u64, motion_type.index() as u64]);
    let g = params.gravity.sample(&mut rng);
    let mut bodies = [Body::placeholder(); MAX_BODIES];
    let mut active = [false; MAX_BODIES];
    let mut pivot = None;
    let mut incline_angle = None;
    let mut gravity = Vec2::new(0.0, -g);

    match motion_type {
        MotionType::FreeFall => {
            let r = params.radius.sample(&mut rng);
            let x = rng.random_range(0.2..=0.8);
            let y = r + params.drop_height.sample(&mut rng);
            bodies[0] = Body {
                position: clamp_inside(Vec2::new(x, y), r),
                velocity: Vec2::new(0.0, params.drop_vertical_speed.sample(&mut rng)),
                radius: r,
                mass: params.mass.sample(&mut rng),
                restitution: params.floor_restitution,
            };
            active[0] = true;
        }
        MotionType::Collision => {
            // Top-down view: no gravity, A moves onto B along the heading.
            gravity = Vec2::ZERO;
            let ra = params.radius.sample(&mut rng);
            let rb = params.radius.sample(&mut rng);
            let heading = params.collision_heading.sample(&mut rng);
            let dir = Vec2::new(heading.cos(), heading.sin());
            let pa = Vec2::new(rng.random_range(0.12..=0.28), rng.random_range(0.35..=0.65));
            let gap = params.collision_gap.sample(&mut rng);
            let lateral = rng.random_range(-0.5..=0.5) * (ra + rb);
            let pb = pa + dir * (ra + rb + gap) + dir.perp() * lateral;
            let va = params.collision_speed.sample(&mut rng);
            let vb = params.collision_target_speed.sample(&mut rng);
            bodies[0] = Body {
                position: clamp_inside(pa, ra),
                velocity: dir * va,
                radius: ra,
                mass: params.mass.sample(&mut rng),
                restitution: params.collision_restitution,
            };
            bodies[1] = Body {
                position: clamp_inside(pb, rb),
                velocity: dir * vb,
                radius: rb,
                mass: params.mass.sample(&mut rng),
                restitution: params.collision_restitution,
            };
            active = [true, true];
        }
        MotionType::Pendulum => {
            let r = params.radius.sample(&mut rng);
            let anchor = Vec2::new(rng.random_range(0.45..=0.55), rng.random_range(0.8..=0.9));
            let len = params.pendulum_length.sample(&mut rng);
            let theta = params.pendulum_angle.sample(&mut rng);
            let mut omega = params.pendulum_angular_speed.sample(&mut rng);
            // Keep the implied amplitude under the cap: 1 - cos(A) >= 1 - cos(theta) + L w^2 / 2g.
            let amp_max = params.pendulum_max_amplitude.max(theta.abs());
            let budget = (theta.cos() - amp_max.cos()).max(0.0);
            let needed = len * omega * omega / (2.0 * g);
            if needed > budget {
                omega *= (budget / needed).sqrt();
            }
            let (s, c) = theta.sin_cos();
            bodies[0] = Body {
                position: anchor + Vec2::new(s, -c) * len,
                velocity: Vec2::new(c, s) * (len * omega),
                radius: r,
                mass: params.mass.sample(&mut rng),
                restitution: 1.0,
            };
            active[0] = true;
            pivot = Some(anchor);
        }
        MotionType::Rolling => {
            let r = params.radius.sample(&mut rng);
            let mut alpha = params.incline_angle.sample(&mut rng);
            let rightward = rng.random_bool(0.5);
            if !rightward {
                alpha = -alpha;
            }
            let x = if rightward {
                rng.random_range(0.15..=0.45)
            } else {
                rng.random_range(0.55..=0.85)
            };
            let y = rng.random_range(0.45..=0.7);
            let track = Vec2::new(alpha.cos(), -alpha.sin());
            // Start moving downhill.
            let speed = params.rolling_speed.sample(&mut rng) * alpha.signum();
            bodies[0] = Body {
                position: clamp_inside(Vec2::new(x, y), r),
                velocity: track * speed,
                radius: r,
                mass: params.mass.sample(&mut rng),
                restitution: 1.0,
            };
            active[0] = true;
            incline_angle = Some(alpha);
        }
    }

    let scene = Scene {
        bodies,
        active,
        motion_type,
        gravity,
        pivot,
        incline_angle,
        fps: params.fps,
    };
    scene.validate()?;
    Ok(scene)
}

/// Contact resolved during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactKind {
    Wall { slot: usize },
    Bodies,
}

/// Impulse exchange between two touching bodies.
///
/// The impulse acts along the center normal with restitution
/// `min(e_a, e_b)`; tangential velocity is untouched. Overlap is removed by
/// moving each body along the normal in proportion to the other's mass.
/// Coincident centers use the +x axis as normal.
pub fn resolve_collision(a: Body, b: Body) -> (Body, Body) {
    let (a, b, _) = resolve_pair(a, b);
    (a, b)
}

fn resolve_pair(mut a: Body, mut b: Body) -> (Body, Body, bool) {
    let delta = b.position - a.position;
    let dist = delta.norm();
    let normal = if dist > 0.0 { delta * (1.0 / dist) } else { Vec2::new(1.0, 0.0) };
    let overlap = a.radius + b.radius - dist;
    if overlap > 0.0 {
        let total = a.mass + b.mass;
        a.position -= normal * (overlap * b.mass / total);
        b.position += normal * (overlap * a.mass / total);
    }
    let closing = (a.velocity - b.velocity).dot(normal);
    if closing <= 0.0 {
        return (a, b, false);
    }
    let e = a.restitution.min(b.restitution);
    let j = (1.0 + e) * closing / (1.0 / a.mass + 1.0 / b.mass);
    a.velocity -= normal * (j / a.mass);
    b.velocity += normal * (j / b.mass);
    (a, b, true)
}

/// Reflects a free body off the walls. Returns whether an impact happened.
fn wall_contact(body: &mut Body) -> bool {
    let r = body.radius;
    let e = body.restitution;
    let mut hit = false;
    let (lo, hi) = (r, 1.0 - r);
    if body.position.x < lo {
        body.position.x = lo;
        if body.velocity.x < 0.0 {
            body.velocity.x *= -e;
            hit = true;
        }
    } else if body.position.x > hi {
        body.position.x = hi;
        if body.velocity.x > 0.0 {
            body.velocity.x *= -e;
            hit = true;
        }
    }
    if body.position.y < lo {
        body.position.y = lo;
        if body.velocity.y < 0.0 {
            body.velocity.y *= -e;
            hit = true;
        }
    } else if body.position.y > hi {
        body.position.y = hi;
        if body.velocity.y > 0.0 {
            body.velocity.y *= -e;
            hit = true;
        }
    }
    hit
}

fn step_pendulum(body: &mut Body, pivot: Vec2, g: f64, dt: f64) {
    let arm = body.position - pivot;
    let len = arm.norm();
    if len == 0.0 {
        return;
    }
    let theta = arm.x.atan2(-arm.y);
    let (s, c) = theta.sin_cos();
    let mut omega = body.velocity.dot(Vec2::new(c, s)) / len;
    omega += -(g / len) * s * dt;
    let theta = theta + omega * dt;
    let (s, c) = theta.sin_cos();
    body.position = pivot + Vec2::new(s, -c) * len;
    body.velocity = Vec2::new(c, s) * (len * omega);
}

/// Advances a rolling body along its track; walls reverse it along the track.
fn step_rolling(body: &mut Body, alpha: f64, g: f64, dt: f64) -> bool {
    let track = Vec2::new(alpha.cos(), -alpha.sin());
    let mut speed = body.velocity.dot(track);
    speed += g * alpha.sin() * dt;
    body.position += track * (speed * dt);
    let r = body.radius;
    let mut hit = false;
    // Signed distance along the track by which the body overshot a wall.
    let mut excess: f64 = 0.0;
    for (coord, dir) in [(body.position.x, track.x), (body.position.y, track.y)] {
        if dir == 0.0 {
            continue;
        }
        if coord < r {
            let d = (coord - r) / dir;
            if d.abs() > excess.abs() {
                excess = d;
            }
            if (speed * dir) < 0.0 {
                hit = true;
            }
        } else if coord > 1.0 - r {
            let d = (coord - (1.0 - r)) / dir;
            if d.abs() > excess.abs() {
                excess = d;
            }
            if (speed * dir) > 0.0 {
                hit = true;
            }
        }
    }
    body.position -= track * excess;
    body.position = clamp_inside(body.position, r);
    if hit {
        speed *= -body.restitution;
    }
    body.velocity = track * speed;
    hit
}

fn step_logged(scene: &mut Scene, dt: f64, contacts: &mut Vec<ContactKind>) {
    let g = scene.gravity.norm();
    match scene.motion_type {
        MotionType::Pendulum => {
            let pivot = scene.pivot.expect("validated pendulum scene");
            step_pendulum(&mut scene.bodies[0], pivot, g, dt);
        }
        MotionType::Rolling => {
            let alpha = scene.incline_angle.expect("validated rolling scene");
            if step_rolling(&mut scene.bodies[0], alpha, g, dt) {
                contacts.push(ContactKind::Wall { slot: 0 });
            }
        }
        MotionType::FreeFall | MotionType::Collision => {
            for (body, _) in scene.bodies.iter_mut().zip(scene.active).filter(|(_, a)| *a) {
                body.velocity += scene.gravity * dt;
                body.position += body.velocity * dt;
            }
            for _ in 0..CONTACT_ITERATIONS {
                let mut any = false;
                if scene.active[0] && scene.active[1] {
                    let (a, b) = (scene.bodies[0], scene.bodies[1]);
                    if (b.position - a.position).norm() <= a.radius + b.radius {
                        let (a, b, impulse) = resolve_pair(a, b);
                        scene.bodies[0] = a;
                        scene.bodies[1] = b;
                        if impulse {
                            contacts.push(ContactKind::Bodies);
                            any = true;
                        }
                    }
                }
                for slot in 0..MAX_BODIES {
                    if scene.active[slot] && wall_contact(&mut scene.bodies[slot]) {
                        contacts.push(ContactKind::Wall { slot });
                        any = true;
                    }
                }
                if !any {
                    break;
                }
            }
        }
    }
}

/// One integration step of length `dt`.
pub fn step(scene: &Scene, dt: f64) -> Result<Scene> {
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    let mut next = scene.clone();
    step_logged(&mut next, dt, &mut Vec::new());
    Ok(next)
}

/// Frame sampling for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub frames: usize,
    pub observed: usize,
    pub substeps: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            frames: 30,
            observed: 5,
            substeps: 8,
        }
    }
}

impl SimSettings {
    pub fn predicted(&self) -> usize {
        self.frames - self.observed
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed < 1 || self.frames < self.observed + 1 {
            return Err(invalid("need at least one observed and one predicted frame"));
        }
        if self.substeps < 1 {
            return Err(invalid("substeps must be >= 1"));
        }
        Ok(())
    }
}

/// Per-frame body centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<[Vec2; MAX_BODIES]>,
    pub active: [bool; MAX_BODIES],
    pub fps: f64,
    pub observed: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps
    }

    /// Positions of one slot over all frames.
    pub fn track(&self, slot: usize) -> Vec<Vec2> {
        self.frames.iter().map(|f| f[slot]).collect()
    }
}

/// A contact and the first recorded frame that reflects it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContactEvent {
    pub frame: usize,
    pub kind: ContactKind,
}

/// Simulates `settings.frames` frames, recording centers once per frame.
pub fn simulate(scene: &Scene, settings: &SimSettings) -> Result<Trajectory> {
    simulate_logged(scene, settings).map(|(t, _)| t)
}

/// Like [`simulate`], also returning every resolved contact.
pub fn simulate_logged(scene: &Scene, settings: &SimSettings) -> Result<(Trajectory, Vec<ContactEvent>)> {
    settings.validate()?;
    scene.validate()?;
    let dt = 1.0 / (scene.fps * settings.substeps as f64);
    let mut state = scene.clone();
    let mut frames = Vec::with_capacity(settings.frames);
    let mut events = Vec::new();
    let mut contacts = Vec::new();
    let snapshot = |s: &Scene| {
        let mut f = [Vec2::ZERO; MAX_BODIES];
        for slot in 0..MAX_BODIES {
            if s.active[slot] {
                f[slot] = s.bodies[slot].position;
            }
        }
        f
    };
    frames.push(snapshot(&state));
    for frame in 1..settings.frames {
        for _ in 0..settings.substeps {
            contacts.clear();
            step_logged(&mut state, dt, &mut contacts);
            events.extend(contacts.iter().map(|&kind| ContactEvent { frame, kind }));
        }
        frames.push(snapshot(&state));
    }
    Ok((
        Trajectory {
            frames,
            active: scene.active,
            fps: scene.fps,
            observed: settings.observed,
        },
        events,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(x: f64, vx: f64, mass: f64, e: f64) -> Body {
        Body {
            position: Vec2::new(x, 0.5),
            velocity: Vec2::new(vx, 0.0),
            radius: 0.05,
            mass,
            restitution: e,
        }
    }

    #[test]
    fn unknown_family_is_rejected() {
        assert!("spinning".parse::<MotionType>().is_err());
        assert_eq!("free_fall".parse::<MotionType>().unwrap(), MotionType::FreeFall);
    }

    #[test]
    fn degenerate_ranges_are_rejected() {
        let mut p = SceneParams::default();
        p.gravity = Span::new(3.0, 1.0);
        assert!(make_scene(MotionType::FreeFall, 1, &p).is_err());
    }

    #[test]
    fn free_fall_scene_shape() {
        let s = make_scene(MotionType::FreeFall, 7, &SceneParams::default()).unwrap();
        assert_eq!(s.active_count(), 1);
        assert_eq!(s.bodies[0].velocity.x, 0.0);
        assert_eq!(s.gravity.x, 0.0);
        assert!(s.gravity.y < 0.0);
    }

    #[test]
    fn collision_scene_is_closing() {
        let s = make_scene(MotionType::Collision, 3, &SceneParams::default()).unwrap();
        assert_eq!(s.active_count(), 2);
        let [a, b] = s.bodies;
        assert!((a.velocity - b.velocity).dot(b.position - a.position) > 0.0);
        let (_, events) = simulate_logged(&s, &SimSettings::default()).unwrap();
        assert!(events.iter().any(|e| e.kind == ContactKind::Bodies));
    }

    #[test]
    fn pendulum_scene_respects_rod_length() {
        let s = make_scene(MotionType::Pendulum, 1, &SceneParams::default()).unwrap();
        let pivot = s.pivot.unwrap();
        let len = (s.bodies[0].position - pivot).norm();
        let p = SceneParams::default().pendulum_length;
        assert!(len >= p.min - 1e-12 && len <= p.max + 1e-12);
        // Velocity is tangential.
        assert!((s.bodies[0].position - pivot).dot(s.bodies[0].velocity).abs() < 1e-12);
    }

    #[test]
    fn make_scene_is_deterministic() {
        for f in MotionType::ALL {
            let a = make_scene(f, 11, &SceneParams::default()).unwrap();
            let b = make_scene(f, 11, &SceneParams::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn free_fall_tracks_closed_form() {
        let g = 1.0;
        let dt = 0.01;
        let mut s = Scene {
            bodies: [
                Body {
                    position: Vec2::new(0.5, 0.9),
                    velocity: Vec2::ZERO,
                    radius: 0.05,
                    mass: 1.0,
                    restitution: 0.6,
                },
                Body::placeholder(),
            ],
            active: [true, false],
            motion_type: MotionType::FreeFall,
            gravity: Vec2::new(0.0, -g),
            pivot: None,
            incline_angle: None,
            fps: 30.0,
        };
        for k in 1..=50 {
            s = step(&s, dt).unwrap();
            let t = k as f64 * dt;
            let drop = 0.9 - s.bodies[0].position.y;
            assert!((drop - 0.5 * g * t * t).abs() <= g * dt * t + 1e-12, "k={k}");
        }
    }

    #[test]
    fn resting_body_without_gravity_is_fixed() {
        let s = Scene {
            bodies: [
                Body {
                    position: Vec2::new(0.5, 0.05),
                    velocity: Vec2::ZERO,
                    radius: 0.05,
                    mass: 1.0,
                    restitution: 0.6,
                },
                Body::placeholder(),
            ],
            active: [true, false],
            motion_type: MotionType::FreeFall,
            gravity: Vec2::ZERO,
            pivot: None,
            incline_angle: None,
            fps: 30.0,
        };
        assert_eq!(step(&s, 0.01).unwrap(), s);
    }

    #[test]
    fn pendulum_equilibrium_is_fixed() {
        let pivot = Vec2::new(0.5, 0.9);
        let s = Scene {
            bodies: [
                Body {
                    position: Vec2::new(0.5, 0.5),
                    velocity: Vec2::ZERO,
                    radius: 0.05,
                    mass: 1.0,
                    restitution: 1.0,
                },
                Body::placeholder(),
            ],
            active: [true, false],
            motion_type: MotionType::Pendulum,
            gravity: Vec2::new(0.0, -2.0),
            pivot: Some(pivot),
            incline_angle: None,
            fps: 30.0,
        };
        let next = step(&s, 0.01).unwrap();
        assert_eq!(next.bodies[0].position, s.bodies[0].position);
        assert_eq!(next.bodies[0].velocity, Vec2::ZERO);
    }

    #[test]
    fn elastic_equal_mass_head_on_swaps_velocities() {
        let a = ball(0.45, 1.0, 1.0, 1.0);
        let b = ball(0.55, -0.5, 1.0, 1.0);
        let (a2, b2) = resolve_collision(a, b);
        assert_eq!(a2.velocity, Vec2::new(-0.5, 0.0));
        assert_eq!(b2.velocity, Vec2::new(1.0, 0.0));
        // Conservation oracle.
        let p0 = a.momentum() + b.momentum();
        let p1 = a2.momentum() + b2.momentum();
        assert!((p0 - p1).norm() <= 1e-12);
        let e0 = a.kinetic_energy() + b.kinetic_energy();
        let e1 = a2.kinetic_energy() + b2.kinetic_energy();
        assert!((e0 - e1).abs() <= 1e-12);
    }

    #[test]
    fn separating_or_static_pair_keeps_velocities() {
        let a = ball(0.45, 0.0, 1.0, 1.0);
        let b = ball(0.55, 0.0, 2.0, 1.0);
        let (a2, b2) = resolve_collision(a, b);
        assert_eq!(a2.velocity, a.velocity);
        assert_eq!(b2.velocity, b.velocity);
    }

    #[test]
    fn inelastic_head_on_stops_normal_motion() {
        let a = ball(0.45, 0.7, 1.0, 0.0);
        let b = ball(0.55, -0.7, 1.0, 0.0);
        let (a2, b2) = resolve_collision(a, b);
        assert!(a2.velocity.x.abs() < 1e-15);
        assert!(b2.velocity.x.abs() < 1e-15);
        let p0 = a.momentum() + b.momentum();
        let p1 = a2.momentum() + b2.momentum();
        assert!((p0 - p1).norm() <= 1e-12);
    }

    #[test]
    fn coincident_centers_use_x_normal() {
        let a = ball(0.5, 1.0, 1.0, 1.0);
        let b = ball(0.5, 0.0, 1.0, 1.0);
        let (a2, b2) = resolve_collision(a, b);
        assert!(a2.position.x < b2.position.x);
        assert_eq!(b2.velocity.x, 1.0);
        assert_eq!(a2.position.y, 0.5);
    }

    #[test]
    fn tangential_velocity_is_preserved() {
        let mut a = ball(0.45, 1.0, 1.0, 1.0);
        a.velocity.y = 0.3;
        let b = ball(0.55, 0.0, 1.5, 1.0);
        let (a2, _) = resolve_collision(a, b);
        assert_eq!(a2.velocity.y, 0.3);
    }

    #[test]
    fn simulate_has_requested_length() {
        let settings = SimSettings::default();
        for f in MotionType::ALL {
            let s = make_scene(f, 5, &SceneParams::default()).unwrap();
            let t = simulate(&s, &settings).unwrap();
            assert_eq!(t.len(), settings.frames);
            assert_eq!(t.frames[0][0], s.bodies[0].position);
        }
    }

    #[test]
    fn simulate_rejects_bad_settings() {
        let s = make_scene(MotionType::FreeFall, 5, &SceneParams::default()).unwrap();
        let bad = SimSettings { frames: 5, observed: 5, substeps: 8 };
        assert!(simulate(&s, &bad).is_err());
        let bad = SimSettings { frames: 30, observed: 5, substeps: 0 };
        assert!(simulate(&s, &bad).is_err());
    }

    #[test]
    fn free_fall_descends_until_floor_contact() {
        for seed in 0..20 {
            let s = make_scene(MotionType::FreeFall, seed, &SceneParams::default()).unwrap();
            let (t, events) = simulate_logged(&s, &SimSettings::default()).unwrap();
            let contact = events.first().map(|e| e.frame).unwrap_or(t.len());
            // Until the apex (vy0 >= 0) the ball may rise; afterwards y strictly decreases.
            let ys: Vec<f64> = t.track(0).iter().map(|p| p.y).collect();
            let apex = ys[..contact]
                .iter()
                .enumerate()
                .fold(0, |best, (i, y)| if *y > ys[best] { i } else { best });
            for k in apex + 1..contact {
                assert!(ys[k] < ys[k - 1], "seed {seed} frame {k}");
            }
        }
    }

    #[test]
    fn collision_conserves_momentum_across_contact() {
        let settings = SimSettings::default();
        for seed in 0..20 {
            let scene = make_scene(MotionType::Collision, seed, &SceneParams::default()).unwrap();
            let dt = 1.0 / (scene.fps * settings.substeps as f64);
            let mut s = scene.clone();
            let mut checked = false;
            for _ in 0..settings.frames * settings.substeps {
                let mut contacts = Vec::new();
                let before = s.total_momentum();
                step_logged(&mut s, dt, &mut contacts);
                if contacts == [ContactKind::Bodies] {
                    let after = s.total_momentum();
                    assert!((before - after).norm() <= 1e-9 * before.norm(), "seed {seed}");
                    checked = true;
                }
            }
            assert!(checked, "seed {seed} had no clean body contact");
        }
    }

    #[test]
    fn pendulum_energy_drift_is_small() {
        let settings = SimSettings::default();
        for seed in 0..20 {
            let s = make_scene(MotionType::Pendulum, seed, &SceneParams::default()).unwrap();
            let g = s.gravity.norm();
            let dt = 1.0 / (s.fps * settings.substeps as f64);
            let energy = |s: &Scene| 0.5 * s.bodies[0].velocity.norm_sq() + g * s.bodies[0].position.y;
            let e0 = energy(&s);
            let mut cur = s.clone();
            for _ in 0..settings.frames * settings.substeps {
                cur = step(&cur, dt).unwrap();
                assert!((energy(&cur) - e0).abs() < 0.01 * e0.abs(), "seed {seed}");
            }
        }
    }

    #[test]
    fn all_positions_stay_in_world() {
        let settings = SimSettings::default();
        for f in MotionType::ALL {
            for seed in 0..50 {
                let s = make_scene(f, seed, &SceneParams::default()).unwrap();
                let t = simulate(&s, &settings).unwrap();
                for frame in &t.frames {
                    for slot in 0..MAX_BODIES {
                        if t.active[slot] {
                            let p = frame[slot];
                            let r = s.bodies[slot].radius;
                            assert!(p.is_finite() && p.in_unit_square(), "{f} seed {seed}");
                            assert!(p.x >= r - 1e-12 && p.x <= 1.0 - r + 1e-12, "{f} seed {seed}");
                            assert!(p.y >= r - 1e-12 && p.y <= 1.0 - r + 1e-12, "{f} seed {seed}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn simulation_is_bit_deterministic() {
        let settings = SimSettings::default();
        for f in MotionType::ALL {
            let s = make_scene(f, 9, &SceneParams::default()).unwrap();
            assert_eq!(simulate(&s, &settings).unwrap(), simulate(&s, &settings).unwrap());
        }
    }
}
