use emoe_core::checkpoint;
use emoe_core::config::RunConfig;
use emoe_core::eventrep::{generate_fixture, load_sample, CropSettings, Dataset, FixtureOptions};
use emoe_core::model::ForwardOptions;
use emoe_core::trackloop::{evaluate_dataset, track_sequence};
use emoe_core::{Error, Tracker};

fn small_fixture(dir: &std::path::Path) {
    let opts = FixtureOptions { seed: 3, num_sequences: 2, frames_per_seq: 4, image_size: 160, force: false };
    generate_fixture(dir, &opts).unwrap();
}

#[test]
fn fixture_loads_with_truncated_labels() {
    let dir = tempfile::tempdir().unwrap();
    small_fixture(dir.path());
    let full = Dataset::open(dir.path(), 4).unwrap();
    let two = Dataset::open(dir.path(), 2).unwrap();
    assert_eq!(full.sequences.len(), 2);
    for (a, b) in full.sequences.iter().zip(&two.sequences) {
        assert_eq!(a.len(), 4);
        assert_eq!(&a.attributes.bits()[..2], b.attributes.bits());
    }
    assert!(Dataset::open(dir.path(), 5).is_err());
}

#[test]
fn regenerating_without_force_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    small_fixture(dir.path());
    let opts = FixtureOptions { seed: 4, num_sequences: 1, frames_per_seq: 4, image_size: 160, force: false };
    assert!(matches!(generate_fixture(dir.path(), &opts), Err(Error::AlreadyExists(_))));
}

#[test]
fn untrained_tracker_runs_end_to_end_and_survives_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_fixture(dir.path());
    let t = Tracker::new(RunConfig::default()).unwrap();
    let ds = Dataset::open(dir.path(), 4).unwrap();
    let seq = &ds.sequences[0];
    let sample = load_sample(seq, 0, 3, &CropSettings::from_config(&t.cfg), None).unwrap();
    let x = t.pair_inputs(&sample).unwrap();
    let (head, scores) = t.predict(&x, ForwardOptions::default()).unwrap();
    assert!(head.bbox.w > 0.0 && head.bbox.h > 0.0);
    assert_eq!(scores.len(), t.injected_layers().len());
    assert!(scores.iter().flat_map(|s| &s.w).all(|w| *w > 0.0 && *w < 1.0));

    let path = dir.path().join("ckpt").join("t.emoe");
    checkpoint::save(&path, &t).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let (head2, scores2) = back.predict(&x, ForwardOptions::default()).unwrap();
    assert_eq!(head.bbox, head2.bbox);
    assert_eq!(scores, scores2);

    let r = track_sequence(&back, seq).unwrap();
    assert_eq!(r.boxes.len(), seq.len());
    assert_eq!(r.boxes[0], seq.groundtruth[0]);
    let (results, report) = evaluate_dataset(&back, &ds).unwrap();
    assert_eq!(results.len(), 2);
    assert!((0.0..=1.0).contains(&report.overall.sr));
}
