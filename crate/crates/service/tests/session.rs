use std::sync::Arc;

use steer_core::dataset::{DatasetMeta, DemoDataset, Label, LabeledDataset};
use steer_core::env::{Env, EnvConfig};
use steer_core::reward::train_reward;
use steer_core::track::Track;
use steer_core::train::{split_dataset, TrainConfig};
use steer_core::world::Action;
use steer_service::session::{Ingest, Mode, Recording, SessionCore, SessionError, SessionLimits};

fn county() -> Arc<Track> {
    Arc::new(Track::bundled("county").unwrap())
}

fn env() -> EnvConfig {
    EnvConfig::with_frame(16, 16)
}

fn session(mode: Mode) -> SessionCore {
    SessionCore::new("t".into(), mode, county(), &env(), 4, SessionLimits::default())
}

fn steps(s: &mut SessionCore, n: usize) -> Vec<Action> {
    (0..n).map(|_| s.step().unwrap().action).collect()
}

fn demo(rec: Recording) -> DemoDataset {
    match rec {
        Recording::Demo(d) => d,
        Recording::Labeled(_) => panic!("expected a demo recording"),
    }
}

fn labeled(rec: Recording) -> LabeledDataset {
    match rec {
        Recording::Labeled(d) => d,
        Recording::Demo(_) => panic!("expected a labeled recording"),
    }
}

#[test]
fn held_key_persists_until_changed() {
    let mut s = session(Mode::Demo);
    steps(&mut s, 3);
    assert_eq!(s.ingest_action(3, Action::Left).unwrap(), Ingest::Queued);
    let applied = steps(&mut s, 6);
    assert_eq!(applied, vec![Action::Left; 6]);
    s.ingest_action(9, Action::NoAction).unwrap();
    assert_eq!(steps(&mut s, 2), vec![Action::NoAction; 2]);
}

#[test]
fn future_action_waits_for_its_tick() {
    let mut s = session(Mode::Demo);
    s.ingest_action(4, Action::Right).unwrap();
    let applied = steps(&mut s, 6);
    assert_eq!(applied[..4], [Action::NoAction; 4]);
    assert_eq!(applied[4..], [Action::Right; 2]);
}

#[test]
fn late_action_applies_at_the_current_tick() {
    let mut s = session(Mode::Demo);
    steps(&mut s, 8);
    assert_eq!(s.ingest_action(2, Action::Left).unwrap(), Ingest::Queued);
    assert_eq!(s.step().unwrap(), s_tick(8, Action::Left));
}

fn s_tick(tick: u64, action: Action) -> steer_service::session::Stepped {
    steer_service::session::Stepped {
        tick,
        action,
        recorded: true,
        events: Default::default(),
    }
}

#[test]
fn stale_inputs_are_counted_and_dropped() {
    let mut s = session(Mode::Demo);
    steps(&mut s, 20);
    assert_eq!(s.ingest_action(9, Action::Left).unwrap(), Ingest::Stale);
    assert_eq!(s.ingest_action(5, Action::Right).unwrap(), Ingest::Stale);
    assert_eq!(s.stale_dropped(), 2);
    assert_eq!(s.ingest_action(10, Action::Left).unwrap(), Ingest::Queued);
    assert_eq!(s.step().unwrap().action, Action::Left);
}

#[test]
fn inputs_must_match_the_mode() {
    let mut label = session(Mode::LabelReward);
    assert_eq!(
        label.ingest_action(0, Action::Left),
        Err(SessionError::WrongMode("action", Mode::LabelReward))
    );
    let mut demo = session(Mode::Demo);
    assert_eq!(demo.ingest_label(0, 1), Err(SessionError::WrongMode("label", Mode::Demo)));
    assert_eq!(label.ingest_label(0, 0), Err(SessionError::BadLabel(0)));
    assert_eq!(label.ingest_label(0, 2), Err(SessionError::BadLabel(2)));
    assert_eq!(label.ingest_label(0, -1).unwrap(), Ingest::Queued);
}

#[test]
fn input_queue_is_bounded() {
    let limits = SessionLimits {
        stale_window: 10,
        queue_limit: 3,
    };
    let mut s = SessionCore::new("q".into(), Mode::Demo, county(), &env(), 0, limits);
    for t in 0..3 {
        s.ingest_action(100 + t, Action::Left).unwrap();
    }
    assert_eq!(s.ingest_action(200, Action::Left), Err(SessionError::QueueFull));
}

#[test]
fn labels_persist_until_changed_and_unlabeled_frames_are_skipped() {
    let mut s = session(Mode::LabelSafety);
    s.ingest_label(100, 1).unwrap();
    s.ingest_label(160, -1).unwrap();
    let mut recorded = Vec::new();
    for _ in 0..200 {
        let st = s.step().unwrap();
        if st.recorded {
            recorded.push(st.tick);
        }
    }
    assert_eq!(recorded, (100..200).collect::<Vec<u64>>());
    s.close();
    let d = labeled(s.recording().unwrap());
    assert_eq!(d.len(), 100);
    assert!(d.targets[..60].iter().all(|&l| l == Label::Positive));
    assert!(d.targets[60..].iter().all(|&l| l == Label::Negative));
    assert_eq!(d.meta.channel, Some(steer_core::dataset::Channel::Safety));
    assert_eq!(d.meta.provenance, "human:t");
}

#[test]
fn export_needs_a_closed_nonempty_session() {
    let mut s = session(Mode::Demo);
    assert_eq!(s.recording().err(), Some(SessionError::NotClosed));
    s.close();
    assert_eq!(s.recording().err(), Some(SessionError::Empty));
    assert_eq!(s.step().err(), Some(SessionError::Closed));
    assert_eq!(s.ingest_action(0, Action::Left), Err(SessionError::Closed));

    let mut l = session(Mode::LabelReward);
    steps(&mut l, 30);
    l.close();
    assert_eq!(l.recording().err(), Some(SessionError::Empty));
}

#[test]
fn thousand_tick_demo_exports_a_thousand_records() {
    let mut s = session(Mode::Demo);
    steps(&mut s, 1000);
    s.close();
    let d = demo(s.recording().unwrap());
    assert_eq!(d.len(), 1000);
    let dir = tempfile::tempdir().unwrap();
    let manifest = d.write(dir.path()).unwrap();
    assert_eq!(manifest.count, 1000);
    assert_eq!(DemoDataset::read(dir.path()).unwrap(), d);
}

/// An action tape: key changes at a handful of ticks, held in between.
fn tape() -> Vec<(u64, Action)> {
    vec![
        (0, Action::NoAction),
        (40, Action::Left),
        (46, Action::NoAction),
        (120, Action::Right),
        (131, Action::NoAction),
        (300, Action::Left),
        (303, Action::NoAction),
        (480, Action::Right),
        (489, Action::NoAction),
    ]
}

fn headless(ticks: usize) -> DemoDataset {
    let mut env = Env::new(county(), &env());
    let changes = tape();
    let mut held = Action::NoAction;
    let (mut obs, mut actions) = (Vec::new(), Vec::new());
    for t in 0..ticks as u64 {
        if let Some(&(_, a)) = changes.iter().find(|(k, _)| *k == t) {
            held = a;
        }
        obs.push(env.observation().clone());
        actions.push(held);
        env.step(held);
    }
    DemoDataset::new(DatasetMeta::default(), obs, actions).unwrap()
}

#[test]
fn replayed_tape_matches_the_headless_run() {
    let ticks = 600;
    let mut s = session(Mode::Demo);
    for (t, a) in tape() {
        s.ingest_action(t, a).unwrap();
    }
    steps(&mut s, ticks);
    s.close();
    let live = demo(s.recording().unwrap()).manifest();
    let reference = headless(ticks).manifest();
    assert_eq!(live.frames_sha256, reference.frames_sha256);
    assert_eq!(live.labels_sha256, reference.labels_sha256);
}

#[test]
fn exported_labels_train_a_reward_net() {
    let mut s = session(Mode::LabelReward);
    // Alternate labels in segments so both classes are present.
    for k in 0..8u64 {
        s.ingest_label(k * 50, if k % 2 == 0 { 1 } else { -1 }).unwrap();
    }
    steps(&mut s, 400);
    s.close();
    let d = labeled(s.recording().unwrap());
    let dir = tempfile::tempdir().unwrap();
    d.write(dir.path()).unwrap();
    let back = LabeledDataset::read(dir.path()).unwrap();
    let (train, val) = split_dataset(&back, 1).unwrap();
    let cfg = TrainConfig {
        max_iterations: 20,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let (_, curve) = train_reward(&train, &val, &cfg, None).unwrap();
    assert_eq!(curve.train_loss.len(), 20);
}

#[test]
fn spectate_sessions_do_not_drive() {
    assert!(!Mode::Spectate.drives());
    assert!(Mode::Demo.drives() && Mode::LabelReward.drives() && Mode::LabelSafety.drives());
    let m: Mode = serde_json::from_str("\"label-reward\"").unwrap();
    assert_eq!(m, Mode::LabelReward);
}
