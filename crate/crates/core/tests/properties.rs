use std::collections::BTreeMap;

use dualproc::evalbench::{ResultTable, TaskRow, VariantSet};
use dualproc::lsys2::{ActionTokenizer, LatentFeature, LatentTap, Lsys2, Lsys2Config};
use dualproc::runtime::{amortized_cost, CacheKey, LatentCache, Models, TriggerPolicy};
use dualproc::simenv::{reset, step, Action, Catalog, Observation, EPISODE_CAP};
use dualproc::ssys1::{PolicyInput, Ssys1, Ssys1Config};
use proptest::prelude::*;

use dualproc::simenv::world::MAX_STEP_DISPLACEMENT as CAP;

fn run_actions(task: usize, seed: u64, actions: &[[f64; 7]]) -> Vec<dualproc::simenv::WorldState> {
    let c = Catalog::standard();
    let spec = c.tasks[task].spec(seed, (seed % 5) as usize);
    let (mut s, _, _) = reset(&c, &spec).unwrap();
    let mut out = vec![s.clone()];
    for a in actions {
        let r = step(&c, &s, &Action(*a)).unwrap();
        s = r.state;
        out.push(s.clone());
        if r.done {
            break;
        }
    }
    out
}

fn small_models() -> (Lsys2, Ssys1) {
    let cfg = Lsys2Config {
        d_model: 16,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        ..Lsys2Config::default()
    };
    let l = Lsys2::init(cfg, ActionTokenizer::from_bounds(vec![(-1.0, 1.0); 7]).unwrap(), 3).unwrap();
    let mut s = Ssys1::init(
        Ssys1Config {
            latent_dim: 16,
            d_model: 8,
            heads: 2,
            layers: 1,
            context: 2,
            ..Ssys1Config::default()
        },
        Some(LatentTap::EndOfText),
        4,
    )
    .unwrap();
    s.meta.lsys2_hash = Some(l.checkpoint_hash());
    (l, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn simulator_is_deterministic_and_capped(
        task in 0usize..12,
        seed in 0u64..500,
        actions in prop::collection::vec(prop::array::uniform7(-3.0f64..3.0), 1..60),
    ) {
        let a = run_actions(task, seed, &actions);
        let b = run_actions(task, seed, &actions);
        prop_assert_eq!(&a, &b);
        for w in a.windows(2) {
            let (p, q) = (w[0].effector_pose.xy(), w[1].effector_pose.xy());
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            prop_assert!(d <= CAP + 1e-12, "moved {}", d);
            if let Some(i) = w[1].held_object {
                prop_assert_eq!(w[1].objects[i].pose, w[1].effector_pose);
            }
            prop_assert!(w[1].step_index <= EPISODE_CAP);
        }
    }

    #[test]
    fn overall_is_unweighted_task_mean(
        counts in prop::collection::vec((0usize..60, 1usize..60), 1..12),
    ) {
        let rows: Vec<TaskRow> = counts
            .iter()
            .enumerate()
            .map(|(i, &(s, t))| TaskRow { task: format!("t{i}"), category: "c".into(), successes: s.min(t), trials: t })
            .collect();
        let expect = rows.iter().map(|r| r.successes as f64 / r.trials as f64).sum::<f64>() / rows.len() as f64;
        let table = ResultTable {
            runner: "r".into(),
            variant_set: VariantSet::Unseen,
            protocol_hash: String::new(),
            metadata: BTreeMap::new(),
            rows,
        };
        prop_assert!((table.overall() - expect).abs() < 1e-12);
    }

    #[test]
    fn cache_returns_only_exact_keys(
        stored in prop::collection::vec((0u64..4, 0u64..4), 0..8),
        query in (0u64..4, 0u64..4),
    ) {
        let key = |(i, v): (u64, u64)| CacheKey {
            instruction_hash: i,
            image_hash: v,
            tap: LatentTap::EndOfText,
            checkpoint_hash: "ck".into(),
        };
        let mut cache = LatentCache::default();
        for &(i, v) in &stored {
            let mut f = LatentFeature::zeros(2, LatentTap::EndOfText);
            f.instruction_hash = i;
            f.image_hash = v;
            cache.insert(key((i, v)), f);
        }
        let hit = cache.lookup(&key(query)).cloned();
        match hit {
            Some(f) => prop_assert_eq!((f.instruction_hash, f.image_hash), query),
            None => prop_assert!(!stored.contains(&query)),
        }
        prop_assert_eq!(cache.hits() + cache.misses(), 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn policy_output_stays_in_range(
        scale in prop::sample::select(vec![1e-3, 1.0, 1e3, 1e8]),
        seed in 0u64..1000,
        level in 0u8..=255,
    ) {
        let (_, s) = small_models();
        let c = Catalog::standard();
        let (_, mut obs, _) = reset(&c, &c.tasks[(seed % 12) as usize].spec(seed, 0)).unwrap();
        for v in obs.views.iter_mut() {
            v.0.iter_mut().enumerate().for_each(|(i, p)| *p = level.wrapping_add(i as u8));
        }
        for (i, x) in obs.state.0.iter_mut().enumerate() {
            *x = scale * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let mut latent = LatentFeature::zeros(16, LatentTap::EndOfText);
        latent.vector.iter_mut().enumerate().for_each(|(i, x)| *x = scale * (i as f64 - 7.5));
        let history: Vec<Observation> = vec![obs.clone(); 2];
        let a = s.policy_forward(&PolicyInput { obs_history: &history, latent: &latent }).unwrap();
        prop_assert!(a.0.iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)), "{:?}", a);
    }

    #[test]
    fn large_model_runs_match_trigger_prediction(
        n in 1usize..80,
        changes in prop::collection::btree_set(1usize..80, 0..3),
        trigger in prop::sample::select(TriggerPolicy::ALL.to_vec()),
    ) {
        let (l, s) = small_models();
        let models = Models::dual(&l, &s, LatentTap::EndOfText, false).unwrap();
        let c = Catalog::standard();
        let spec = c.by_name("OpenDrawer").unwrap().spec(3, 0);
        let (mut state, mut obs, _) = reset(&c, &spec).unwrap();
        let v0 = obs.views[0];
        let instructions = ["open the drawer", "close the drawer"];
        let mut session = models.session(trigger);
        session.on_instruction(instructions[0], &v0).unwrap();
        let mut switches = 0u64;
        for t in 0..n {
            if changes.contains(&t) {
                switches += 1;
                session.on_instruction(instructions[switches as usize % 2], &v0).unwrap();
            }
            let a = session.step(&obs).unwrap();
            let r = step(&c, &state, &a).unwrap();
            state = r.state;
            obs = r.observation;
        }
        if trigger == TriggerPolicy::OnInstructionChange {
            prop_assert_eq!(session.cache().hits() + session.cache().misses(), 1 + switches);
        }
        let trace = session.into_trace();
        let expected = match trigger {
            // Returning to an earlier instruction is a cache hit.
            TriggerPolicy::OnInstructionChange => (1 + switches).min(2),
            TriggerPolicy::EveryStep => n as u64,
            TriggerPolicy::Never => 1,
        };
        prop_assert_eq!(trace.lsys2_runs(), expected);
        prop_assert_eq!(trace.ssys1_runs(), n);
    }

    #[test]
    fn caching_never_costs_more_than_recomputing(n in 1usize..60) {
        let (l, s) = small_models();
        let models = Models::dual(&l, &s, LatentTap::EndOfText, false).unwrap();
        let c = Catalog::standard();
        let spec = c.by_name("TurnOnStove").unwrap().spec(8, 0);
        let cost = |trigger| {
            let (mut state, mut obs, instr) = reset(&c, &spec).unwrap();
            let mut session = models.session(trigger);
            session.on_instruction(&instr, &obs.views[0]).unwrap();
            for _ in 0..n {
                let r = step(&c, &state, &session.step(&obs).unwrap()).unwrap();
                state = r.state;
                obs = r.observation;
            }
            amortized_cost(&session.into_trace()).unwrap().mean_flops
        };
        let cached = cost(TriggerPolicy::OnInstructionChange);
        let every = cost(TriggerPolicy::EveryStep);
        if n == 1 {
            prop_assert_eq!(cached, every);
        } else {
            prop_assert!(cached < every);
        }
    }
}
