use std::sync::Arc;

use proptest::prelude::*;
use steer_core::env::{Env, EnvConfig};
use steer_core::render::{preprocess, render, render_state, FrameHistory, RenderConfig, OBS_CHANNELS};
use steer_core::teacher::oracle_drive;
use steer_core::track::{Segment, Track, TrackSpec};
use steer_core::world::{Action, CarState, SimConfig, World};

fn straight_track() -> Arc<Track> {
    Arc::new(
        Track::new(TrackSpec {
            name: "straight".into(),
            segments: vec![Segment::Straight(2000.0)],
            lane_count: 4,
            lane_width: 3.5,
            closed: false,
            lane_marks: true,
        })
        .unwrap(),
    )
}

fn county() -> Arc<Track> {
    Arc::new(Track::bundled("county").unwrap())
}

#[test]
fn straight_no_action_moves_forward_only() {
    let mut w = World::new(straight_track(), SimConfig::default());
    w.set_state(10.0, 0.5, 0.0);
    let ev = w.step(Action::NoAction);
    assert_eq!(w.state().d, 0.5);
    assert!((w.state().s - (10.0 + 13.9 * 0.1)).abs() < 1e-12);
    assert_eq!(ev, Default::default());
}

#[test]
fn consecutive_left_ticks_accumulate_heading() {
    let mut w = World::new(straight_track(), SimConfig::default());
    w.set_state(10.0, 0.0, 0.0);
    for k in 1..=8 {
        w.step(Action::Left);
        assert!((w.state().psi - k as f64 * 0.035).abs() < 1e-12);
    }
}

#[test]
fn off_road_entry_fires_on_first_tick_past_the_edge() {
    let mut w = World::new(straight_track(), SimConfig::default());
    let (d0, psi) = (0.0, 0.2);
    w.set_state(0.0, d0, psi);
    let per_tick = 13.9 * 0.1 * psi.sin();
    let expected = ((7.0 - d0) / per_tick).floor() as usize + 1;
    let mut fired = None;
    for t in 1..=expected + 5 {
        if w.step(Action::NoAction).off_road_entry {
            fired = Some(t);
            break;
        }
    }
    assert_eq!(fired, Some(expected));
}

#[test]
fn restart_rules() {
    let mut w = World::new(county(), SimConfig::default());
    w.set_state(30.0, 0.0, std::f64::consts::FRAC_PI_2 + 0.01);
    let ev = w.check_restart();
    assert!(ev.restart_wrong_direction && !ev.restart_stuck);
    assert_eq!(*w.state(), w.spawn_state());

    w.set_state(30.0, 7.0 + 7.0 + 0.1, 0.0);
    let ev = w.check_restart();
    assert!(ev.restart_stuck && !ev.restart_wrong_direction);
    assert_eq!(*w.state(), w.spawn_state());
    assert_eq!(w.state().d, -1.75);
    assert_eq!(w.state().psi, 0.0);

    w.set_state(30.0, 7.0 + 7.0 - 0.1, 1.5);
    assert!(!w.check_restart().restarted());
}

#[test]
fn probe_examples() {
    let mut w = World::new(county(), SimConfig::default());
    w.set_state(5.0, -1.75, 0.0);
    assert_eq!(w.probe().lane_index, Some(2));
    w.set_state(5.0, 7.1, 0.0);
    assert!(!w.probe().on_road);
    assert_eq!(w.probe().lane_index, None);
    w.set_state(5.0, 0.0, 0.0);
    assert_eq!(w.probe().lane_index, Some(3));
}

#[test]
fn lane_center_table() {
    let t = county();
    for k in 1..=4 {
        let expected = (k as f64 - 1.0 - 2.0 + 0.5) * 3.5;
        assert_eq!(t.lane_center(k), expected);
        assert_eq!(t.lane_index(expected), Some(k));
    }
    assert_eq!(t.lane_center(2), -1.75);
}

#[test]
fn centered_driving_never_restarts_over_a_lap() {
    let track = county();
    let mut w = World::new(track.clone(), SimConfig::default());
    let ticks = (track.length() / (13.9 * 0.1)).ceil() as usize + 5;
    for _ in 0..ticks {
        let a = oracle_drive(&w, 2);
        let ev = w.step(a);
        assert!(!ev.restarted() && !ev.off_road_entry);
    }
}

#[test]
fn oracle_lap_closes_within_one_tick_step() {
    for name in Track::bundled_names() {
        let track = Arc::new(Track::bundled(name).unwrap());
        let mut w = World::new(track.clone(), SimConfig::default());
        let start = w.state().s;
        let mut prev = start;
        let mut in_lane = 0usize;
        let mut ticks = 0usize;
        loop {
            let a = oracle_drive(&w, 2);
            let ev = w.step(a);
            assert!(!ev.off_road_entry && !ev.restarted(), "{name}");
            ticks += 1;
            in_lane += usize::from(w.probe().lane_index == Some(2));
            let s = w.state().s;
            if s < prev {
                assert!((s - start).abs() <= 13.9 * 0.1 + 1e-9, "{name}: lap ended at s={s}");
                break;
            }
            prev = s;
            assert!(ticks < 10_000);
        }
        assert!(in_lane as f64 / ticks as f64 >= 0.95, "{name}: in-lane {in_lane}/{ticks}");
    }
}

#[test]
fn rendering_is_deterministic_and_bounded() {
    let mut w = World::new(county(), SimConfig::default());
    let cfg = RenderConfig::default();
    for a in [Action::Left, Action::Left, Action::NoAction, Action::Right] {
        w.step(a);
    }
    let a = render(&w, &cfg);
    let b = render(&w, &cfg);
    assert_eq!(a, b);
    assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.plane(0).contains(&1.0));
}

#[test]
fn far_off_road_shows_no_road() {
    let track = county();
    let car = CarState {
        s: 120.0,
        d: 40.0,
        psi: 0.0,
        speed: 13.9,
    };
    let f = render_state(&track, &car, &RenderConfig::default());
    assert!(f.plane(0).iter().all(|&v| v == 0.0));
}

/// Independent affine model of the raster: column centers sit at
/// `lateral_m - (c + 0.5) * col_m` relative to the car.
fn oracle_column(cfg: &RenderConfig, lateral: f64) -> f64 {
    (cfg.lateral_m - lateral) / (2.0 * cfg.lateral_m / cfg.width as f64) - 0.5
}

#[test]
fn lane_marks_land_on_oracle_columns() {
    for (h, w) in [(48, 64), (24, 32), (144, 192)] {
        let cfg = RenderConfig::with_size(h, w);
        let track = straight_track();
        let car = CarState {
            s: 100.0,
            d: -1.75,
            psi: 0.0,
            speed: 13.9,
        };
        let f = render_state(&track, &car, &cfg);
        let expected: Vec<f64> = [-7.0, -3.5, 0.0, 3.5, 7.0]
            .iter()
            .map(|m| m - car.d)
            .filter(|l: &f64| l.abs() < cfg.lateral_m)
            .map(|l| oracle_column(&cfg, l))
            .collect();
        for row in [0, h / 2, h - 1] {
            let marked: Vec<usize> = (0..w).filter(|&c| f.at(1, row, c) > 0.0).collect();
            for &e in &expected {
                assert!(
                    marked.iter().any(|&c| (c as f64 - e).abs() <= 1.0),
                    "{h}x{w} row {row}: no mark near column {e:.2}, marked {marked:?}"
                );
            }
            for &c in &marked {
                assert!(
                    expected.iter().any(|&e| (c as f64 - e).abs() <= 1.0),
                    "{h}x{w} row {row}: stray mark at column {c}"
                );
            }
        }
    }
}

#[test]
fn lane_marks_only_on_marked_tracks() {
    let car = CarState {
        s: 100.0,
        d: -1.75,
        psi: 0.0,
        speed: 13.9,
    };
    let cfg = RenderConfig::default();
    let plain = render_state(&Track::bundled("imola").unwrap(), &car, &cfg);
    let marked = render_state(&Track::bundled("county").unwrap(), &car, &cfg);
    let count = |f: &steer_core::render::Frame| f.plane(1).iter().filter(|&&v| v > 0.0).count();
    assert!(count(&marked) > count(&plain));
    assert!(count(&plain) > 0, "road edges are always drawn");
}

#[test]
fn first_observation_stacks_identical_frames() {
    let env = Env::new(county(), &EnvConfig::default());
    let obs = env.observation();
    let half = obs.len() / 2;
    assert_eq!(obs.shape()[0], OBS_CHANNELS);
    assert_eq!(obs.data[..half], obs.data[half..]);
}

#[test]
fn hud_region_is_zeroed() {
    let cfg = RenderConfig::default();
    let w = World::new(county(), SimConfig::default());
    let frame = render(&w, &cfg);
    let (rows, cols) = cfg.hud_region();
    assert!(rows.clone().all(|r| cols.clone().all(|c| frame.at(2, r, c) > 0.0)));
    let mut hist = FrameHistory::new(cfg.gap_ticks);
    hist.push(frame);
    let obs = preprocess(&hist, &cfg);
    let p = cfg.height * cfg.width;
    for ch in 0..OBS_CHANNELS {
        for r in rows.clone() {
            for c in cols.clone() {
                assert_eq!(obs.data[ch * p + r * cfg.width + c], 0);
            }
        }
    }
}

#[test]
fn stacked_frames_are_gap_ticks_apart() {
    let cfg = EnvConfig::default();
    let mut env = Env::new(county(), &cfg);
    let mut recorded = vec![render(env.world(), &cfg.render)];
    let pattern = [Action::Left, Action::NoAction, Action::Right, Action::Right, Action::NoAction];
    for t in 0..20 {
        env.step(pattern[t % pattern.len()]);
        recorded.push(render(env.world(), &cfg.render));
    }
    let mut hist = FrameHistory::new(5);
    for f in &recorded[..=15] {
        hist.push(f.clone());
    }
    let old = preprocess(&hist, &cfg.render);
    let mut hist = FrameHistory::new(5);
    for f in &recorded[..=20] {
        hist.push(f.clone());
    }
    let new = preprocess(&hist, &cfg.render);
    let obs = env.observation();
    let half = obs.len() / 2;
    assert_eq!(obs.data[..half], old.data[half..], "channels 0-2 show tick 15");
    assert_eq!(obs.data[half..], new.data[half..], "channels 3-5 show tick 20");
}

#[test]
fn same_actions_same_trajectory() {
    let run = || {
        let mut env = Env::new(county(), &EnvConfig::with_frame(24, 32));
        let mut out = Vec::new();
        for t in 0..300u64 {
            let a = Action::ALL[((t * 7 + t / 13) % 3) as usize];
            env.step(a);
            out.push((*env.world().state(), env.observation().clone()));
        }
        out
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lanes_tile_the_road(d in -7.0f64..7.0) {
        let t = county();
        let k = t.lane_index(d).expect("on-road offset has a lane");
        let lo = (k as f64 - 1.0 - 2.0) * 3.5;
        prop_assert!(lo <= d && d < lo + 3.5);
        let hits = (1..=4).filter(|&j| {
            let lo = (j as f64 - 3.0) * 3.5;
            lo <= d && d < lo + 3.5
        }).count();
        prop_assert_eq!(hits, 1);
    }

    #[test]
    fn road_events_alternate(seed in 0u64..1000, bias in 0.0f64..0.6) {
        let mut w = World::new(county(), SimConfig::default());
        let mut state = seed;
        let mut on_road = true;
        for _ in 0..3000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 33) as f64 / (1u64 << 31) as f64;
            let a = if u < bias { Action::Left } else if u < 2.0 * bias { Action::Right } else {
                oracle_drive(&w, 2)
            };
            let ev = w.step(a);
            for (flag, entering_road) in [(ev.off_road_entry, false), (ev.on_road_entry, true)] {
                if flag {
                    prop_assert_eq!(on_road, !entering_road, "event repeated without its counterpart");
                    on_road = entering_road;
                }
            }
            prop_assert_eq!(on_road, w.probe().on_road);
        }
    }

    #[test]
    fn observations_stay_in_range(s in 0.0f64..1128.0, d in -16.0f64..16.0, psi in -1.5f64..1.5) {
        let mut env = Env::new(county(), &EnvConfig::with_frame(24, 32));
        env.place(s, d, psi);
        prop_assert_eq!(env.observation().shape(), [6, 24, 32]);
        let f = render(env.world(), &RenderConfig::with_size(24, 32));
        prop_assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
