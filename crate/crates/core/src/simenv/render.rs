//! Rasterizes a [`WorldState`] into three grayscale views.

use super::catalog::Zone;
use super::world::{FixtureKind, Grasp, WorldState, BASE_POSE};
use super::{Observation, RobotState, View, VIEW_PIXELS, VIEW_SIDE};

const SUPERSAMPLE: usize = 3;
const HAND_HALF_WIDTH: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Camera {
    Left,
    Right,
    Hand,
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn in_box(p: [f64; 2], c: [f64; 2], hx: f64, hy: f64) -> bool {
    (p[0] - c[0]).abs() <= hx && (p[1] - c[1]).abs() <= hy
}

/// Brightness of an object shape at offset `d` from its center, if covered.
fn object_level(shape: usize, d: [f64; 2]) -> Option<f64> {
    let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let hit = match shape {
        0 => (r <= 0.035).then_some(0.8),
        1 => (in_box(d, [0.0, 0.0], 0.03, 0.03) || in_box(d, [0.04, 0.0], 0.012, 0.012))
            .then_some(0.7),
        2 => (0.022..=0.045).contains(&r).then_some(0.92),
        3 => (r <= 0.025).then_some(1.0),
        _ => in_box(d, [0.0, 0.0], 0.05, 0.022).then_some(0.55),
    };
    hit
}

/// Scene brightness at a table point.
fn intensity(s: &WorldState, p: [f64; 2]) -> f64 {
    if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
        return 0.0;
    }
    let st = &s.style;
    let proj = p[0] * st.stripe_angle.cos() + p[1] * st.stripe_angle.sin();
    let mut v = st.background
        + st.stripe_amp * (std::f64::consts::TAU * st.stripe_freq * proj * 4.0).sin();

    for (zone, rect) in &s.zones {
        if rect.contains(p) {
            v = match zone {
                Zone::Counter => 0.42,
                Zone::Sink => {
                    if dist(p, rect.center) <= 0.025 {
                        0.05
                    } else {
                        0.25
                    }
                }
            };
        }
    }

    if let Some((f, a)) = s.fixture() {
        if f.body.contains(p) {
            v = 0.32;
        }
        match f.kind {
            FixtureKind::Door { hinge, .. } => {
                let h = f.handles(a)[0];
                if seg_dist(p, hinge, h) <= 0.012 {
                    v = 0.68;
                }
                if dist(p, h) <= 0.015 {
                    v = 0.95;
                }
            }
            FixtureKind::DoubleDoor {
                left_hinge,
                right_hinge,
                ..
            } => {
                let hs = f.handles(a);
                if seg_dist(p, left_hinge, hs[0]) <= 0.012 || seg_dist(p, right_hinge, hs[1]) <= 0.012 {
                    v = 0.68;
                }
                if dist(p, hs[0]) <= 0.013 || dist(p, hs[1]) <= 0.013 {
                    v = 0.95;
                }
            }
            FixtureKind::Drawer { closed_handle, .. } => {
                let h = f.handles(a)[0];
                let front = closed_handle[1];
                if h[1] < front && in_box(p, [h[0], (h[1] + front) / 2.0], 0.11, (front - h[1]) / 2.0) {
                    v = 0.6;
                }
                if in_box(p, h, 0.045, 0.011) {
                    v = 0.95;
                }
            }
            FixtureKind::Button { pos, microwave } => {
                if microwave && in_box(p, [f.body.center[0] - 0.04, f.body.center[1]], 0.09, 0.05) {
                    v = 0.12 + 0.3 * a;
                }
                if dist(p, pos) <= 0.02 {
                    v = if a >= 1.0 { 0.55 } else { 0.9 };
                }
            }
            FixtureKind::Knob { pos, burner } => {
                let r = dist(p, burner);
                if r <= 0.05 {
                    v = 0.18 + 0.8 * a * (1.0 - r / 0.1);
                }
                if dist(p, pos) <= 0.026 {
                    v = 0.8;
                    let ang = std::f64::consts::FRAC_PI_2 - a * std::f64::consts::PI;
                    let tip = [pos[0] + 0.024 * ang.cos(), pos[1] + 0.024 * ang.sin()];
                    if seg_dist(p, pos, tip) <= 0.006 {
                        v = 0.15;
                    }
                }
            }
        }
    }

    for o in &s.objects {
        if let Some(l) = object_level(o.shape, [p[0] - o.pose.x, p[1] - o.pose.y]) {
            v = l;
        }
    }

    let e = s.effector_pose.xy();
    let r = dist(p, e);
    let closed = s.gripper_open < 0.5;
    let (r0, r1) = if closed { (0.008, 0.018) } else { (0.02, 0.03) };
    if (r0..=r1).contains(&r) {
        v = if matches!(s.grasp, Some(Grasp::Fixture { .. })) { 0.0 } else { 1.0 };
    }
    v.clamp(0.0, 1.0)
}

/// Normalized image coordinates (col, row in [0,1], row 0 at the top) to table coordinates.
fn camera_to_table(cam: Camera, s: &WorldState, u: f64, t: f64) -> [f64; 2] {
    match cam {
        Camera::Left => [-0.05 + 1.1 * u + 0.15 * (t - 0.5), 1.05 - 1.1 * t],
        Camera::Right => [-0.05 + 1.1 * u - 0.15 * (t - 0.5), 1.02 - 1.04 * t],
        Camera::Hand => {
            let e = s.effector_pose;
            [
                e.x + 2.0 * HAND_HALF_WIDTH * (u - 0.5),
                e.y - 2.0 * HAND_HALF_WIDTH * (t - 0.5),
            ]
        }
    }
}

fn render_view(s: &WorldState, cam: Camera) -> View {
    let mut out = [0u8; VIEW_PIXELS];
    let n = VIEW_SIDE as f64;
    let ss = SUPERSAMPLE as f64;
    for row in 0..VIEW_SIDE {
        for col in 0..VIEW_SIDE {
            let mut acc = 0.0;
            for sr in 0..SUPERSAMPLE {
                for sc in 0..SUPERSAMPLE {
                    let u = (col as f64 + (sc as f64 + 0.5) / ss) / n;
                    let t = (row as f64 + (sr as f64 + 0.5) / ss) / n;
                    acc += intensity(s, camera_to_table(cam, s, u, t));
                }
            }
            let v = acc / (ss * ss);
            out[row * VIEW_SIDE + col] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    View(out)
}

pub fn robot_state(s: &WorldState) -> RobotState {
    let e = s.effector_pose;
    RobotState([
        e.x,
        e.y,
        e.yaw,
        s.gripper_open,
        BASE_POSE[0],
        BASE_POSE[1],
        BASE_POSE[2],
        s.velocity[0],
        s.velocity[1],
        s.velocity[2],
    ])
}

/// Pure function of the state.
pub fn render(s: &WorldState) -> Observation {
    Observation {
        views: [
            render_view(s, Camera::Left),
            render_view(s, Camera::Right),
            render_view(s, Camera::Hand),
        ],
        state: robot_state(s),
    }
}
