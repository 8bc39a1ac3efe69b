use std::sync::Arc;

use steer_core::dataset::{Channel, Label};
use steer_core::env::EnvConfig;
use steer_core::teacher::*;
use steer_core::track::Track;
use steer_core::world::{probe_state, Action, CarState, SimConfig, World};
use steer_core::CoreError;

fn county() -> Arc<Track> {
    Arc::new(Track::bundled("county").unwrap())
}

fn small() -> EnvConfig {
    EnvConfig::with_frame(24, 32)
}

fn world_at(d: f64, psi: f64) -> World {
    let mut w = World::new(county(), SimConfig::default());
    w.set_state(20.0, d, psi);
    w
}

#[test]
fn oracle_examples() {
    assert_eq!(oracle_drive(&world_at(-1.75, 0.0), TARGET_LANE), Action::NoAction);
    assert_eq!(oracle_drive(&world_at(-1.75 + 2.0, 0.0), TARGET_LANE), Action::Right);
    assert_eq!(oracle_drive(&world_at(-1.75 - 2.0, 0.0), TARGET_LANE), Action::Left);
    // Heading toward the target already: the lookahead holds the wheel.
    assert_eq!(oracle_drive(&world_at(-1.75 - 0.5, 0.0625), TARGET_LANE), Action::NoAction);
    // Inside the deadband either side.
    assert_eq!(oracle_drive(&world_at(-1.75 + 0.19, 0.0), TARGET_LANE), Action::NoAction);
    assert_eq!(oracle_drive(&world_at(-1.75 - 0.19, 0.0), TARGET_LANE), Action::NoAction);
}

#[test]
fn label_examples() {
    assert_eq!(oracle_reward_label(&world_at(-1.75, 0.0)), Label::Positive);
    assert_eq!(oracle_reward_label(&world_at(1.75, 0.0)), Label::Negative);
    assert_eq!(oracle_reward_label(&world_at(-9.0, 0.0)), Label::Negative);
    assert_eq!(oracle_safety_label(&world_at(0.0, 0.0)), Label::Positive);
    assert_eq!(oracle_safety_label(&world_at(0.0, 2.0)), Label::Negative);
    assert_eq!(oracle_safety_label(&world_at(-9.0, 0.0)), Label::Negative);
}

#[test]
fn labels_depend_only_on_state() {
    let track = county();
    for (s, d, psi) in [(5.0, -1.0, 0.1), (400.0, 3.0, -0.3), (700.0, -7.5, 0.0)] {
        let a = CarState { s, d, psi, speed: 13.9 };
        let b = a;
        for ch in [Channel::Reward, Channel::Safety] {
            assert_eq!(label_for(ch, &probe_state(&track, &a)), label_for(ch, &probe_state(&track, &b)));
        }
    }
}

#[test]
fn reward_implies_safety_only_when_aligned() {
    let track = county();
    for i in 0..200 {
        let d = -7.0 + 14.0 * i as f64 / 199.0;
        let aligned = CarState { s: 100.0, d, psi: 0.4, speed: 13.9 };
        let p = probe_state(&track, &aligned);
        if reward_label(&p) == Label::Positive {
            assert_eq!(safety_label(&p), Label::Positive, "d = {d}");
        }
    }
    // A car in lane 2 facing backwards earns lane reward but is unsafe.
    let backwards = CarState { s: 100.0, d: -1.75, psi: 3.0, speed: 13.9 };
    let p = probe_state(&track, &backwards);
    assert_eq!(reward_label(&p), Label::Positive);
    assert_eq!(safety_label(&p), Label::Negative);
}

#[test]
fn noise_free_demonstrations_match_the_oracle() {
    let d = record_demonstrations_with(county(), &small(), 1000, 0.0, DemoStarts::spawn_only(), 3).unwrap();
    assert_eq!(d.len(), 1000);
    let mut w = World::new(county(), SimConfig::default());
    for &a in &d.targets {
        assert_eq!(a, steer_toward(w.state(), 0.0));
        w.step(a);
    }
}

#[test]
fn episodic_demonstrations_record_the_oracle_action() {
    let d = record_demonstrations(county(), &small(), 600, 0.0, 4).unwrap();
    assert_eq!(d.len(), 600);
    assert_eq!(d.meta.noise_rate, Some(0.0));
    let counts = Action::ALL.map(|a| d.targets.iter().filter(|&&t| t == a).count());
    // Recoveries from perturbed starts need both steering directions.
    assert!(counts.iter().all(|&c| c > 20), "{counts:?}");
}

#[test]
fn full_noise_gives_uniform_action_marginals() {
    let d = record_demonstrations(county(), &small(), 10_000, 1.0, 11).unwrap();
    let mut counts = [0usize; 3];
    for a in &d.targets {
        counts[a.index()] += 1;
    }
    let expected = d.len() as f64 / 3.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Two degrees of freedom: the survival function is exp(-x / 2).
    let p = (-chi2 / 2.0).exp();
    assert!(p > 0.01, "counts {counts:?} chi2 {chi2} p {p}");
}

#[test]
fn noise_rate_fraction_of_actions_differ_from_the_oracle() {
    // Starting in the clean run's footsteps, count disagreements with the
    // oracle decision at the recorded state.
    let d = record_demonstrations_with(county(), &small(), 4000, 0.3, DemoStarts::spawn_only(), 5).unwrap();
    let mut w = World::new(county(), SimConfig::default());
    let mut differ = 0;
    for &a in &d.targets {
        if a != steer_toward(w.state(), 0.0) {
            differ += 1;
        }
        w.step(a);
    }
    // A uniform replacement matches the oracle a third of the time.
    let rate = differ as f64 / d.len() as f64;
    assert!((rate - 0.2).abs() < 0.03, "disagreement {rate}");
}

#[test]
fn demonstrations_are_deterministic() {
    let a = record_demonstrations(county(), &small(), 300, 0.1, 9).unwrap();
    let b = record_demonstrations(county(), &small(), 300, 0.1, 9).unwrap();
    assert_eq!(a.manifest().dataset_sha256, b.manifest().dataset_sha256);
    let c = record_demonstrations(county(), &small(), 300, 0.1, 10).unwrap();
    assert_ne!(a.manifest().dataset_sha256, c.manifest().dataset_sha256);
}

#[test]
fn demonstration_arguments_are_validated() {
    assert!(matches!(record_demonstrations(county(), &small(), 0, 0.0, 1), Err(CoreError::Config(_))));
    assert!(matches!(record_demonstrations(county(), &small(), 10, 1.5, 1), Err(CoreError::Config(_))));
    let wide = DemoStarts { max_offset_m: 8.0, ..DemoStarts::default() };
    assert!(record_demonstrations_with(county(), &small(), 10, 0.0, wide, 1).is_err());
}

#[test]
fn safe_driving_without_excursions_is_single_class() {
    let mut driver = LaneDriver(TARGET_LANE);
    let err = record_labels(county(), &small(), &mut driver, 1500, Channel::Safety, ExcursionConfig::new(0.0), 1)
        .unwrap_err();
    assert!(matches!(err, CoreError::Untrainable(_)), "{err}");
}

#[test]
fn edge_bias_balances_safety_classes() {
    let mut driver = LaneDriver(TARGET_LANE);
    let rec =
        record_labels(county(), &small(), &mut driver, 20_000, Channel::Safety, ExcursionConfig::new(0.5), 7).unwrap();
    let pos = rec.dataset.positive_fraction();
    assert!((0.1..=0.9).contains(&pos), "positive fraction {pos}");
    assert_eq!(rec.dataset.meta.edge_bias, Some(0.5));
    assert_eq!(rec.dataset.meta.channel, Some(Channel::Safety));
}

#[test]
fn reward_labels_track_lane_occupancy() {
    let mut sweep = LaneSweepDriver::new(80, 2);
    let rec =
        record_labels(county(), &small(), &mut sweep, 6000, Channel::Reward, ExcursionConfig::new(0.0), 3).unwrap();
    let occupancy =
        rec.probes.iter().filter(|p| p.lane_index == Some(TARGET_LANE)).count() as f64 / rec.probes.len() as f64;
    assert!((rec.dataset.positive_fraction() - occupancy).abs() < 0.02);
    let lanes: std::collections::BTreeSet<_> = rec.probes.iter().filter_map(|p| p.lane_index).collect();
    assert_eq!(lanes.len(), 4, "sweep visits every lane");
}

#[test]
fn recorded_labels_respect_the_channel_implication() {
    let mut sweep = LaneSweepDriver::new(60, 5);
    let rec =
        record_labels(county(), &small(), &mut sweep, 3000, Channel::Reward, ExcursionConfig::new(0.5), 5).unwrap();
    for p in &rec.probes {
        if reward_label(p) == Label::Positive && p.aligned {
            assert_eq!(safety_label(p), Label::Positive);
        }
    }
}
