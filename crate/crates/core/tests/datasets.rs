use std::fs;
use std::sync::Arc;

use steer_core::dataset::*;
use steer_core::env::EnvConfig;
use steer_core::render::Observation;
use steer_core::teacher::*;
use steer_core::track::Track;
use steer_core::world::Action;
use steer_core::CoreError;

fn county() -> Arc<Track> {
    Arc::new(Track::bundled("county").unwrap())
}

fn demos() -> DemoDataset {
    record_demonstrations(county(), &EnvConfig::with_frame(24, 32), 120, 0.2, 3).unwrap()
}

#[test]
fn demo_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = demos();
    let written = d.write(dir.path()).unwrap();
    let back = DemoDataset::read(dir.path()).unwrap();
    assert_eq!(back.observations, d.observations);
    assert_eq!(back.targets, d.targets);
    assert_eq!(back.meta, d.meta);
    assert_eq!(read_manifest(dir.path()).unwrap(), written);
    assert_eq!(back.manifest(), written);
}

#[test]
fn frames_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = demos();
    d.write(dir.path()).unwrap();
    let bytes = fs::read(dir.path().join("frames.bin")).unwrap();
    assert_eq!(&bytes[..8], DATASET_MAGIC);
    let dims: Vec<u32> = (0..4).map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap())).collect();
    assert_eq!(dims, vec![120, 6, 24, 32]);
    assert_eq!(bytes.len(), 24 + 120 * 6 * 24 * 32);
    assert_eq!(&bytes[24..24 + d.observations[0].len()], &d.observations[0].data[..]);
    let labels = fs::read_to_string(dir.path().join("labels.txt")).unwrap();
    let parsed: Vec<usize> = labels.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(parsed, d.targets.iter().map(|a| a.index()).collect::<Vec<_>>());
}

#[test]
fn manifest_records_provenance_and_hashes() {
    let d = demos();
    let m = d.manifest();
    assert_eq!(m.kind, DatasetKind::Demo);
    assert_eq!(m.count, 120);
    assert_eq!((m.channels, m.height, m.width), (6, 24, 32));
    assert_eq!(m.meta.noise_rate, Some(0.2));
    assert_eq!(m.meta.track, "county");
    assert_eq!(m.meta.provenance, "oracle");
    assert_eq!(m.dataset_sha256, sha256_hex(format!("{}{}", m.frames_sha256, m.labels_sha256).as_bytes()));
}

#[test]
fn tampered_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    demos().write(dir.path()).unwrap();
    let path = dir.path().join("labels.txt");
    let mut labels = fs::read_to_string(&path).unwrap();
    labels.replace_range(0..1, if labels.starts_with('0') { "1" } else { "0" });
    fs::write(&path, labels).unwrap();
    assert!(matches!(DemoDataset::read(dir.path()), Err(CoreError::Dataset(_))));
}

#[test]
fn kind_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    demos().write(dir.path()).unwrap();
    assert!(matches!(LabeledDataset::read(dir.path()), Err(CoreError::Dataset(_))));
}

#[test]
fn invalid_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let obs = vec![Observation::new(2, 2, vec![0; 24]); 2];
    let meta = DatasetMeta {
        provenance: "oracle".into(),
        ..DatasetMeta::default()
    };
    let d = LabeledDataset::new(meta, obs, vec![Label::Positive, Label::Negative]).unwrap();
    d.write(dir.path()).unwrap();
    let back = LabeledDataset::read(dir.path()).unwrap();
    assert_eq!(back.targets, vec![Label::Positive, Label::Negative]);
    assert_eq!(fs::read_to_string(dir.path().join("labels.txt")).unwrap(), "1\n-1\n");
    assert_eq!(Label::from_value(0), None);
    assert_eq!(Action::from_index(3), None);
}

#[test]
fn mismatched_lengths_and_shapes_are_rejected() {
    let meta = DatasetMeta::default();
    let one = Observation::new(2, 2, vec![0; 24]);
    assert!(DemoDataset::new(meta.clone(), vec![one.clone()], vec![]).is_err());
    let other = Observation::new(4, 2, vec![0; 48]);
    assert!(DemoDataset::new(meta, vec![one, other], vec![Action::Left, Action::Right]).is_err());
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = DemoDataset::read(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, CoreError::Io { .. }), "{err}");
}

#[test]
fn select_keeps_order_and_meta() {
    let d = demos();
    let s = d.select(&[5, 1, 7]);
    assert_eq!(s.targets, vec![d.targets[5], d.targets[1], d.targets[7]]);
    assert_eq!(s.observations[2], d.observations[7]);
    assert_eq!(s.meta, d.meta);
}
