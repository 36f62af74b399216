//! Kinematic tabletop world: layout sampling, stepping and success checks.

use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, Predicate, TaskDef, TaskFamily, TaskSpec, Variant, Zone, NUM_OBJECTS};
use super::render::render;
use super::{Action, Observation, SimError};
use crate::tensor::Rng;

pub const MAX_STEP_DISPLACEMENT: f64 = 0.05;
pub const MAX_YAW_STEP: f64 = 0.15;
pub const GRASP_RADIUS: f64 = 0.06;
pub const GRASP_COMMAND: f64 = -0.5;
pub const EPISODE_CAP: usize = 200;
pub const PRESS_RADIUS: f64 = 0.04;
pub const PRESS_STEPS: u32 = 3;
/// Effector yaw (rad) per unit of dial travel.
pub const DIAL_YAW_SPAN: f64 = 1.2;
/// Constant base pose reported in the robot state.
pub const BASE_POSE: [f64; 3] = [0.5, -0.1, std::f64::consts::FRAC_PI_2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub center: [f64; 2],
    pub half: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.half[0] && (p[1] - self.center[1]).abs() <= self.half[1]
    }
}

/// Background texture of a kitchen layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub background: f64,
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub stripe_amp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FixtureKind {
    /// Handle sits at `hinge + radius * (cos phi, sin phi)` with
    /// `phi = closed_angle + articulation * sweep`.
    Door {
        hinge: [f64; 2],
        radius: f64,
        closed_angle: f64,
        sweep: f64,
    },
    /// Two mirrored panels driven by one articulation value.
    DoubleDoor {
        left_hinge: [f64; 2],
        right_hinge: [f64; 2],
        radius: f64,
    },
    /// Handle slides from `closed_handle` toward -y by `travel`.
    Drawer { closed_handle: [f64; 2], travel: f64 },
    Button { pos: [f64; 2], microwave: bool },
    Knob { pos: [f64; 2], burner: [f64; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub kind: FixtureKind,
    pub body: Rect,
}

/// A door or drawer handle: position plus tangent of the handle path.
struct HandlePath {
    pos: [f64; 2],
    /// d(pos)/d(articulation).
    deriv: [f64; 2],
}

impl Fixture {
    /// Grasp points, in preference order.
    pub fn handles(&self, articulation: f64) -> Vec<[f64; 2]> {
        (0..self.num_handles())
            .map(|h| self.handle_path(h, articulation).pos)
            .collect()
    }

    fn num_handles(&self) -> usize {
        match self.kind {
            FixtureKind::DoubleDoor { .. } => 2,
            FixtureKind::Button { .. } => 0,
            _ => 1,
        }
    }

    fn handle_path(&self, which: usize, a: f64) -> HandlePath {
        let arc = |hinge: [f64; 2], radius: f64, closed: f64, sweep: f64| {
            let phi = closed + a * sweep;
            HandlePath {
                pos: [hinge[0] + radius * phi.cos(), hinge[1] + radius * phi.sin()],
                deriv: [-radius * sweep * phi.sin(), radius * sweep * phi.cos()],
            }
        };
        match self.kind {
            FixtureKind::Door {
                hinge,
                radius,
                closed_angle,
                sweep,
            } => arc(hinge, radius, closed_angle, sweep),
            FixtureKind::DoubleDoor {
                left_hinge,
                right_hinge,
                radius,
            } => {
                if which == 0 {
                    arc(left_hinge, radius, 0.0, -std::f64::consts::FRAC_PI_2)
                } else {
                    arc(right_hinge, radius, std::f64::consts::PI, std::f64::consts::FRAC_PI_2)
                }
            }
            FixtureKind::Drawer {
                closed_handle,
                travel,
            } => HandlePath {
                pos: [closed_handle[0], closed_handle[1] - a * travel],
                deriv: [0.0, -travel],
            },
            FixtureKind::Knob { pos, .. } | FixtureKind::Button { pos, .. } => HandlePath {
                pos,
                deriv: [0.0, 0.0],
            },
        }
    }

    /// Unit direction the grasped handle moves for increasing articulation.
    pub fn handle_tangent(&self, which: usize, articulation: f64) -> [f64; 2] {
        let d = self.handle_path(which, articulation).deriv;
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if n == 0.0 {
            [0.0, 0.0]
        } else {
            [d[0] / n, d[1] / n]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub shape: usize,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Grasp {
    Object(usize),
    Fixture { handle: usize, offset: [f64; 2] },
}

/// Full simulator state. Rendering and success are pure functions of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub task: TaskSpec,
    pub style: Style,
    pub zones: Vec<(Zone, Rect)>,
    pub fixtures: Vec<Fixture>,
    pub articulation_angles: Vec<f64>,
    pub objects: Vec<ObjectState>,
    pub effector_pose: Pose,
    pub gripper_open: f64,
    pub velocity: [f64; 3],
    pub held_object: Option<usize>,
    pub grasp: Option<Grasp>,
    pub press_count: u32,
    pub step_index: usize,
}

pub(crate) fn variant_salt(v: Variant) -> u64 {
    v as u64 + 1
}

/// Layout generator for `(layout_seed, variant)`. Open/close siblings share
/// a variant and therefore share geometry.
pub fn layout_rng(layout_seed: u64, variant: Variant) -> Rng {
    Rng::derive(layout_seed, variant_salt(variant))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl WorldState {
    pub fn fixture(&self) -> Option<(&Fixture, f64)> {
        self.fixtures.first().map(|f| (f, self.articulation_angles[0]))
    }

    pub fn zone(&self, z: Zone) -> Option<Rect> {
        self.zones.iter().find(|(k, _)| *k == z).map(|(_, r)| *r)
    }

    pub fn is_grasping_fixture(&self) -> bool {
        matches!(self.grasp, Some(Grasp::Fixture { .. }))
    }

    fn in_bounds(p: [f64; 2]) -> bool {
        (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
    }

    /// Every object and handle lies on the table.
    pub fn check_feasible(&self) -> Result<(), SimError> {
        for (i, o) in self.objects.iter().enumerate() {
            if !Self::in_bounds([o.pose.x, o.pose.y]) {
                return Err(SimError::Infeasible(format!("object {i} off the table")));
            }
        }
        if let Some((f, a)) = self.fixture() {
            if f.handles(a).into_iter().any(|h| !Self::in_bounds(h)) {
                return Err(SimError::Infeasible("handle off the table".into()));
            }
        }
        Ok(())
    }

    pub fn is_success(&self, def: &TaskDef) -> bool {
        match def.predicate {
            Predicate::ObjectInZone { zone } => match (self.zone(zone), self.objects.first()) {
                (Some(r), Some(o)) => self.held_object != Some(0) && r.contains(o.pose.xy()),
                _ => false,
            },
            Predicate::ArticulationAtLeast { threshold } => {
                self.fixture().is_some_and(|(_, a)| a >= threshold)
            }
            Predicate::ArticulationAtMost { threshold } => {
                self.fixture().is_some_and(|(_, a)| a <= threshold)
            }
            Predicate::ButtonPressed => self.fixture().is_some_and(|(_, a)| a >= 1.0),
        }
    }
}

/// Builds the initial world for `task`. Draw order from the layout rng is
/// fixed: style, effector, fixture/zones, then objects.
pub fn initial_state(catalog: &Catalog, task: &TaskSpec) -> Result<WorldState, SimError> {
    let def = catalog.lookup(task.family, task.variant)?;
    if task.object_id >= NUM_OBJECTS {
        return Err(SimError::UnknownObject(task.object_id));
    }
    let mut rng = layout_rng(task.layout_seed, task.variant);
    let style = Style {
        background: rng.uniform_range(0.06, 0.18),
        stripe_freq: rng.uniform_range(1.0, 3.0),
        stripe_angle: rng.uniform_range(0.0, std::f64::consts::PI),
        stripe_amp: rng.uniform_range(0.02, 0.06),
    };
    let effector_pose = Pose {
        x: rng.uniform_range(0.3, 0.7),
        y: rng.uniform_range(0.08, 0.18),
        yaw: rng.uniform_range(-0.2, 0.2),
    };

    let mut zones = Vec::new();
    let mut fixtures = Vec::new();
    let mut objects = Vec::new();
    let cx = rng.uniform_range(0.35, 0.65);
    let jy = rng.uniform_range(-0.03, 0.03);
    match task.variant {
        Variant::CounterToSink | Variant::SinkToCounter => {
            let sink_left = rng.uniform() < 0.5;
            let left = Rect {
                center: [0.25 + rng.uniform_range(-0.04, 0.04), 0.62 + jy],
                half: [0.12, 0.1],
            };
            let right = Rect {
                center: [0.75 + rng.uniform_range(-0.04, 0.04), 0.62 + jy],
                half: [0.12, 0.1],
            };
            let (sink, counter) = if sink_left { (left, right) } else { (right, left) };
            zones.push((Zone::Counter, counter));
            zones.push((Zone::Sink, sink));
            let source = if task.variant == Variant::CounterToSink {
                counter
            } else {
                sink
            };
            let ox = source.center[0] + rng.uniform_range(-0.07, 0.07);
            let oy = source.center[1] + rng.uniform_range(-0.05, 0.05);
            objects.push(ObjectState {
                shape: task.object_id,
                pose: Pose {
                    x: ox,
                    y: oy,
                    yaw: 0.0,
                },
            });
        }
        Variant::SingleDoor => {
            let radius = 0.15;
            fixtures.push(Fixture {
                kind: FixtureKind::Door {
                    hinge: [cx - radius, 0.8 + jy],
                    radius,
                    closed_angle: 0.0,
                    sweep: -std::f64::consts::FRAC_PI_2,
                },
                body: Rect {
                    center: [cx, 0.88 + jy],
                    half: [0.18, 0.07],
                },
            });
        }
        Variant::DoubleDoor => {
            let radius = 0.09;
            fixtures.push(Fixture {
                kind: FixtureKind::DoubleDoor {
                    left_hinge: [cx - 2.0 * radius, 0.8 + jy],
                    right_hinge: [cx + 2.0 * radius, 0.8 + jy],
                    radius,
                },
                body: Rect {
                    center: [cx, 0.88 + jy],
                    half: [0.2, 0.07],
                },
            });
        }
        Variant::Drawer => {
            fixtures.push(Fixture {
                kind: FixtureKind::Drawer {
                    closed_handle: [cx, 0.78 + jy],
                    travel: 0.22,
                },
                body: Rect {
                    center: [cx, 0.87 + jy],
                    half: [0.15, 0.08],
                },
            });
        }
        Variant::CoffeeButton => {
            let bx = rng.uniform_range(-0.04, 0.04);
            fixtures.push(Fixture {
                kind: FixtureKind::Button {
                    pos: [cx + bx, 0.75 + jy],
                    microwave: false,
                },
                body: Rect {
                    center: [cx, 0.85 + jy],
                    half: [0.08, 0.09],
                },
            });
        }
        Variant::MicrowaveButton => {
            fixtures.push(Fixture {
                kind: FixtureKind::Button {
                    pos: [cx + 0.11, 0.77 + jy],
                    microwave: true,
                },
                body: Rect {
                    center: [cx, 0.86 + jy],
                    half: [0.16, 0.08],
                },
            });
        }
        Variant::StoveOn | Variant::StoveOff => {
            fixtures.push(Fixture {
                kind: FixtureKind::Knob {
                    pos: [cx + 0.1, 0.74 + jy],
                    burner: [cx - 0.06, 0.86 + jy],
                },
                body: Rect {
                    center: [cx, 0.85 + jy],
                    half: [0.17, 0.09],
                },
            });
        }
    }
    if def.family != TaskFamily::PickPlace {
        // A distractor between the robot and the fixture.
        let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        objects.push(ObjectState {
            shape: task.object_id,
            pose: Pose {
                x: 0.5 + side * rng.uniform_range(0.2, 0.38),
                y: rng.uniform_range(0.3, 0.45),
                yaw: 0.0,
            },
        });
    }
    let articulation_angles = fixtures.iter().map(|_| def.initial_articulation).collect();
    let state = WorldState {
        task: *task,
        style,
        zones,
        fixtures,
        articulation_angles,
        objects,
        effector_pose,
        gripper_open: 1.0,
        velocity: [0.0; 3],
        held_object: None,
        grasp: None,
        press_count: 0,
        step_index: 0,
    };
    state.check_feasible()?;
    Ok(state)
}

/// Episode reset: initial world, its rendering and the instruction.
pub fn reset(catalog: &Catalog, task: &TaskSpec) -> Result<(WorldState, Observation, String), SimError> {
    let state = initial_state(catalog, task)?;
    let obs = render(&state);
    let instruction = catalog.instruction(task)?;
    Ok((state, obs, instruction))
}

pub struct StepResult {
    pub state: WorldState,
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

/// Advances the world by one action.
pub fn step(catalog: &Catalog, state: &WorldState, action: &Action) -> Result<StepResult, SimError> {
    let def = catalog.lookup(state.task.family, state.task.variant)?;
    let next = advance(state, &action.sanitized());
    let success = next.is_success(def);
    let done = success || next.step_index >= EPISODE_CAP;
    let observation = render(&next);
    Ok(StepResult {
        state: next,
        observation,
        done,
        success,
    })
}

fn advance(state: &WorldState, a: &Action) -> WorldState {
    let mut s = state.clone();
    let mut d = [a.0[0] * MAX_STEP_DISPLACEMENT, a.0[1] * MAX_STEP_DISPLACEMENT];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n > MAX_STEP_DISPLACEMENT {
        d = [d[0] * MAX_STEP_DISPLACEMENT / n, d[1] * MAX_STEP_DISPLACEMENT / n];
    }
    let dyaw = a.0[2] * MAX_YAW_STEP;
    let g = a.0[6];
    let before = s.effector_pose;

    let yaw = (before.yaw + dyaw).clamp(-std::f64::consts::PI, std::f64::consts::PI);
    match s.grasp {
        Some(Grasp::Fixture { handle, offset }) => {
            let (fixture, art) = (s.fixtures[0], s.articulation_angles[0]);
            match fixture.kind {
                FixtureKind::Knob { .. } => {
                    let applied = yaw - before.yaw;
                    s.articulation_angles[0] = (art + applied / DIAL_YAW_SPAN).clamp(0.0, 1.0);
                }
                _ => {
                    let path = fixture.handle_path(handle, art);
                    let speed2 = path.deriv[0].powi(2) + path.deriv[1].powi(2);
                    let da = if speed2 > 0.0 {
                        (path.deriv[0] * d[0] + path.deriv[1] * d[1]) / speed2
                    } else {
                        0.0
                    };
                    let na = (art + da).clamp(0.0, 1.0);
                    s.articulation_angles[0] = na;
                    let h = fixture.handle_path(handle, na).pos;
                    s.effector_pose.x = (h[0] + offset[0]).clamp(0.0, 1.0);
                    s.effector_pose.y = (h[1] + offset[1]).clamp(0.0, 1.0);
                }
            }
        }
        _ => {
            s.effector_pose.x = (before.x + d[0]).clamp(0.0, 1.0);
            s.effector_pose.y = (before.y + d[1]).clamp(0.0, 1.0);
        }
    }
    s.effector_pose.yaw = yaw;
    s.gripper_open = (g + 1.0) / 2.0;
    let eff = s.effector_pose.xy();

    if g > 0.0 {
        s.held_object = None;
        s.grasp = None;
    } else if g < GRASP_COMMAND && s.grasp.is_none() {
        let mut best: Option<(f64, Grasp)> = None;
        for (i, o) in s.objects.iter().enumerate() {
            let dd = dist(eff, o.pose.xy());
            if dd <= GRASP_RADIUS && best.as_ref().is_none_or(|(bd, _)| dd < *bd) {
                best = Some((dd, Grasp::Object(i)));
            }
        }
        if let Some((f, art)) = s.fixture() {
            for (h, pos) in f.handles(art).into_iter().enumerate() {
                let dd = dist(eff, pos);
                if dd <= GRASP_RADIUS && best.as_ref().is_none_or(|(bd, _)| dd < *bd) {
                    best = Some((
                        dd,
                        Grasp::Fixture {
                            handle: h,
                            offset: [eff[0] - pos[0], eff[1] - pos[1]],
                        },
                    ));
                }
            }
        }
        if let Some((_, grasp)) = best {
            s.grasp = Some(grasp);
            if let Grasp::Object(i) = grasp {
                s.held_object = Some(i);
            }
        }
    }

    if let Some(Fixture {
        kind: FixtureKind::Button { pos, .. },
        ..
    }) = s.fixtures.first().copied()
    {
        if s.articulation_angles[0] < 1.0 {
            if g < GRASP_COMMAND && dist(eff, pos) <= PRESS_RADIUS {
                s.press_count += 1;
                if s.press_count >= PRESS_STEPS {
                    s.articulation_angles[0] = 1.0;
                }
            } else {
                s.press_count = 0;
            }
        }
    }

    if let Some(i) = s.held_object {
        s.objects[i].pose = s.effector_pose;
    }
    s.velocity = [
        s.effector_pose.x - before.x,
        s.effector_pose.y - before.y,
        s.effector_pose.yaw - before.yaw,
    ];
    s.step_index += 1;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, seed: u64) -> (Catalog, TaskSpec) {
        let c = Catalog::standard();
        let t = c.by_name(name).unwrap().spec(seed, 0);
        (c, t)
    }

    #[test]
    fn zero_action_only_advances_step() {
        for def in Catalog::standard().tasks {
            let (c, t) = spec(&def.name, 5);
            let (s0, _, _) = reset(&c, &t).unwrap();
            let mut zero = Action::zero();
            zero.0[6] = 0.0;
            let r = step(&c, &s0, &zero).unwrap();
            assert_eq!(r.state.effector_pose, s0.effector_pose);
            assert_eq!(r.state.objects, s0.objects);
            assert_eq!(r.state.articulation_angles, s0.articulation_angles);
            assert_eq!(r.state.step_index, 1);
        }
    }

    #[test]
    fn close_far_from_objects_grasps_nothing() {
        let (c, t) = spec("PnPCounterToSink", 3);
        let (s0, _, _) = reset(&c, &t).unwrap();
        let mut a = Action::zero();
        a.0[6] = -1.0;
        let r = step(&c, &s0, &a).unwrap();
        assert_eq!(r.state.held_object, None);
        assert_eq!(r.state.grasp, None);
    }

    #[test]
    fn grasped_object_tracks_effector() {
        let (c, t) = spec("PnPCounterToSink", 9);
        let (mut s, _, _) = reset(&c, &t).unwrap();
        s.effector_pose.x = s.objects[0].pose.x + 0.03;
        s.effector_pose.y = s.objects[0].pose.y;
        let mut a = Action::zero();
        a.0[6] = -1.0;
        s = step(&c, &s, &a).unwrap().state;
        assert_eq!(s.held_object, Some(0));
        a.0[0] = 0.7;
        a.0[1] = -0.4;
        for _ in 0..5 {
            s = step(&c, &s, &a).unwrap().state;
            assert_eq!(s.objects[0].pose, s.effector_pose);
        }
    }

    #[test]
    fn displacement_capped() {
        let (c, t) = spec("OpenDrawer", 1);
        let (s0, _, _) = reset(&c, &t).unwrap();
        let mut a = Action::zero();
        a.0[0] = 1.0;
        a.0[1] = 1.0;
        let r = step(&c, &s0, &a).unwrap();
        let d = dist(r.state.effector_pose.xy(), s0.effector_pose.xy());
        assert!(d <= MAX_STEP_DISPLACEMENT + 1e-12);
    }

    #[test]
    fn open_and_close_share_initial_scene() {
        let c = Catalog::standard();
        for (a, b) in [
            ("OpenSingleDoor", "CloseSingleDoor"),
            ("OpenDoubleDoor", "CloseDoubleDoor"),
            ("OpenDrawer", "CloseDrawer"),
        ] {
            let ta = c.by_name(a).unwrap().spec(11, 2);
            let tb = c.by_name(b).unwrap().spec(11, 2);
            let (_, oa, _) = reset(&c, &ta).unwrap();
            let (_, ob, _) = reset(&c, &tb).unwrap();
            assert_eq!(oa, ob);
        }
    }

    #[test]
    fn unknown_object_rejected() {
        let c = Catalog::standard();
        let mut t = c.tasks[0].spec(0, 0);
        t.object_id = 99;
        assert!(matches!(reset(&c, &t), Err(SimError::UnknownObject(99))));
    }
}
