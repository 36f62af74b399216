//! Scripted waypoint experts.

use super::catalog::{Catalog, Predicate, TaskFamily};
use super::world::{FixtureKind, Grasp, WorldState, MAX_STEP_DISPLACEMENT};
use super::{Action, SimError};
use crate::tensor::Rng;

/// Distance at which the expert closes the gripper on a target.
pub const CLOSE_DISTANCE: f64 = 0.015;
/// Distance from the zone center at which a carried object is released.
pub const RELEASE_DISTANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Expert {
    pub noise_std: f64,
}

impl Default for Expert {
    fn default() -> Self {
        Self { noise_std: 0.01 }
    }
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    [
        ((to[0] - from[0]) / MAX_STEP_DISPLACEMENT).clamp(-1.0, 1.0),
        ((to[1] - from[1]) / MAX_STEP_DISPLACEMENT).clamp(-1.0, 1.0),
    ]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn out_of_bounds(p: [f64; 2]) -> bool {
    !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1])
}

impl Expert {
    /// Noise-free action for the current phase of the task.
    pub fn plan(&self, catalog: &Catalog, s: &WorldState) -> Result<Action, SimError> {
        let def = catalog.lookup(s.task.family, s.task.variant)?;
        let eff = s.effector_pose.xy();
        let mut a = [0.0; 7];
        let mut set = |mv: [f64; 2], g: f64| {
            a[0] = mv[0];
            a[1] = mv[1];
            a[6] = g;
        };
        match def.family {
            TaskFamily::PickPlace => {
                let obj = s.objects.first().ok_or_else(|| SimError::Infeasible("no object".into()))?;
                if out_of_bounds(obj.pose.xy()) {
                    return Err(SimError::Infeasible("object off the table".into()));
                }
                let Predicate::ObjectInZone { zone } = def.predicate else {
                    return Err(SimError::Infeasible("pick-place without zone".into()));
                };
                let goal = s
                    .zone(zone)
                    .ok_or_else(|| SimError::Infeasible("missing zone".into()))?
                    .center;
                match s.held_object {
                    Some(0) if dist(eff, goal) <= RELEASE_DISTANCE => set(toward(eff, goal), 1.0),
                    Some(0) => set(toward(eff, goal), -1.0),
                    Some(_) => set([0.0, 0.0], 1.0),
                    None if dist(eff, obj.pose.xy()) <= CLOSE_DISTANCE => {
                        set(toward(eff, obj.pose.xy()), -1.0)
                    }
                    None => set(toward(eff, obj.pose.xy()), 1.0),
                }
            }
            TaskFamily::OpenArticulation | TaskFamily::CloseArticulation | TaskFamily::TurnDial => {
                let (f, art) = s
                    .fixture()
                    .ok_or_else(|| SimError::Infeasible("no fixture".into()))?;
                let target = match def.predicate {
                    Predicate::ArticulationAtLeast { .. } => 1.0,
                    _ => 0.0,
                };
                let sign = if target > art { 1.0 } else { -1.0 };
                let handle = f.handles(art)[0];
                match s.grasp {
                    Some(Grasp::Fixture { handle: h, .. }) => {
                        if let FixtureKind::Knob { .. } = f.kind {
                            a[2] = sign;
                            a[6] = -1.0;
                        } else {
                            let t = f.handle_tangent(h, art);
                            set([sign * t[0], sign * t[1]], -1.0);
                        }
                    }
                    Some(Grasp::Object(_)) => set([0.0, 0.0], 1.0),
                    None if dist(eff, handle) <= CLOSE_DISTANCE => set(toward(eff, handle), -1.0),
                    None => set(toward(eff, handle), 1.0),
                }
            }
            TaskFamily::PressButton => {
                let (f, _) = s
                    .fixture()
                    .ok_or_else(|| SimError::Infeasible("no fixture".into()))?;
                let FixtureKind::Button { pos, .. } = f.kind else {
                    return Err(SimError::Infeasible("press task without button".into()));
                };
                if s.held_object.is_some() {
                    set([0.0, 0.0], 1.0);
                } else if dist(eff, pos) <= CLOSE_DISTANCE {
                    set(toward(eff, pos), -1.0);
                } else {
                    set(toward(eff, pos), 1.0);
                }
            }
        }
        Ok(Action(a))
    }

    /// Planned action plus Gaussian noise on the commanded channels.
    pub fn act(&self, catalog: &Catalog, s: &WorldState, rng: &mut Rng) -> Result<Action, SimError> {
        let mut a = self.plan(catalog, s)?;
        if self.noise_std > 0.0 {
            for i in [0, 1, 2, 6] {
                a.0[i] += self.noise_std * rng.normal();
            }
        }
        for v in a.0.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{reset, step, Catalog, EPISODE_CAP};

    fn rollout(c: &Catalog, name: &str, seed: u64, e: &Expert) -> (bool, Vec<[f64; 7]>) {
        let t = c.by_name(name).unwrap().spec(seed, (seed % 5) as usize);
        let (mut s, _, _) = reset(c, &t).unwrap();
        let mut rng = Rng::derive(seed, 77);
        let mut acts = Vec::new();
        for _ in 0..EPISODE_CAP {
            let a = e.act(c, &s, &mut rng).unwrap();
            acts.push(a.0);
            let r = step(c, &s, &a).unwrap();
            s = r.state;
            if r.done {
                return (r.success, acts);
            }
        }
        (false, acts)
    }

    #[test]
    fn closes_gripper_at_grasp_waypoint() {
        let c = Catalog::standard();
        let t = c.by_name("PnPCounterToSink").unwrap().spec(3, 0);
        let (mut s, _, _) = reset(&c, &t).unwrap();
        s.effector_pose.x = s.objects[0].pose.x;
        s.effector_pose.y = s.objects[0].pose.y;
        let a = Expert::default().plan(&c, &s).unwrap();
        assert!(a.gripper() < -0.5);
    }

    #[test]
    fn noiseless_is_repeatable() {
        let c = Catalog::standard();
        let e = Expert { noise_std: 0.0 };
        assert_eq!(rollout(&c, "OpenDrawer", 8, &e), rollout(&c, "OpenDrawer", 8, &e));
    }

    #[test]
    fn reserved_channels_stay_zero() {
        let c = Catalog::standard();
        let (_, acts) = rollout(&c, "TurnOnStove", 2, &Expert::default());
        assert!(acts.iter().all(|a| a[3] == 0.0 && a[4] == 0.0 && a[5] == 0.0));
    }

    #[test]
    fn succeeds_on_every_task() {
        let c = Catalog::standard();
        for def in &c.tasks {
            let wins = (0..100)
                .filter(|&seed| rollout(&c, &def.name, seed, &Expert::default()).0)
                .count();
            assert!(wins >= 99, "{} expert {wins}/100", def.name);
        }
    }
}
