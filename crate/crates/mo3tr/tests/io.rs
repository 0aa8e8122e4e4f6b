use mo3tr::checkpoint::Checkpoint;
use mo3tr::commands::{self, TrackOptions};
use mo3tr::config::RunConfig;
use mo3tr::{dataset, output, CliError};
use mo3tr_core::model::Mo3tr;
use mo3tr_core::motmetrics::{ground_truth_file, write_mot, TrackFile, TrackRow};
use mo3tr_core::synthworld::suite;

#[test]
fn datasets_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let s = suite("occlusion-suite").unwrap();
    let names = commands::gen("occlusion-suite", dir.path()).unwrap();
    let seqs = s.generate().unwrap();
    assert_eq!(names.len(), seqs.len());
    for (seq, spec) in seqs.iter().zip(&s.scenarios) {
        let loaded = dataset::read_sequence(&dir.path().join(&seq.name)).unwrap();
        assert_eq!(&loaded.sequence, seq);
        assert_eq!(loaded.scenario.as_ref(), Some(spec));
        for (a, b) in loaded.sequence.frames.iter().zip(&seq.frames) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let gt = std::fs::read_to_string(dataset::gt_path(dir.path(), &seq.name)).unwrap();
        assert_eq!(gt, write_mot(&ground_truth_file(seq)));
        // rewriting what was read reproduces the same bytes
        let again = tempfile::tempdir().unwrap();
        dataset::write_sequence(again.path(), &loaded.sequence, loaded.scenario.as_ref()).unwrap();
        for p in [dataset::scene_path, dataset::frames_path, dataset::gt_path] {
            assert_eq!(std::fs::read(p(dir.path(), &seq.name)).unwrap(), std::fs::read(p(again.path(), &seq.name)).unwrap());
        }
    }
    assert_eq!(dataset::read_dir(dir.path()).unwrap(), seqs);
}

#[test]
fn truncated_frames_are_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let names = commands::gen("overfit-tiny", dir.path()).unwrap();
    let fp = dataset::frames_path(dir.path(), &names[0]);
    let bytes = std::fs::read(&fp).unwrap();
    std::fs::write(&fp, &bytes[..bytes.len() - 4]).unwrap();
    let err = dataset::read_sequence(&dir.path().join(&names[0])).err().unwrap();
    assert!(matches!(err, CliError::Format { .. }), "{err}");
}

#[test]
fn mot_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for f in 1..5u32 {
        for id in 1..4u64 {
            let mut r = TrackRow::new(f, id, 0.1 * f as f64 + 1.0 / 3.0, 2.0 * id as f64, 3.5, 1.25);
            r.conf = 0.75;
            rows.push(r);
        }
    }
    let file = TrackFile::new(rows).sorted();
    let p = dir.path().join("a.txt");
    output::write_mot_file(&p, &file).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let back = output::read_mot(&p).unwrap();
    let q = dir.path().join("b.txt");
    output::write_mot_file(&q, &back).unwrap();
    assert_eq!(std::fs::read_to_string(&q).unwrap(), text);
    assert_eq!(output::read_mot(&q).unwrap(), back);
}

#[test]
fn checkpoints_restore_every_weight() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(None, &["seed=11".into()]).unwrap();
    let model = Mo3tr::new(cfg.model.clone()).unwrap();
    let p = dir.path().join("m.json");
    Checkpoint::capture(&model, Some(&cfg.train), 0).save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back.training.as_ref(), Some(&cfg.train));
    let restored = back.restore().unwrap();
    assert_eq!(restored.config, model.config);
    for ((na, a), (nb, b)) in model.store.iter().zip(restored.store.iter()) {
        assert_eq!(na, nb);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
    }

    let mut bad = Checkpoint::load(&p).unwrap();
    bad.tensors[0].shape[1] += 1;
    assert!(matches!(bad.restore(), Err(CliError::DimensionMismatch(_))));
    let mut bad = Checkpoint::load(&p).unwrap();
    bad.tensors.pop();
    assert!(matches!(bad.restore(), Err(CliError::DimensionMismatch(_))));
    std::fs::write(&p, "{\"format\":\"other\"}").unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(CliError::Format { .. })));
    assert!(matches!(Checkpoint::load(&dir.path().join("none.json")), Err(CliError::MissingFile { .. })));
}

fn tiny_run(seed: u64) -> RunConfig {
    let sets: Vec<String> = [
        format!("seed={seed}"),
        "model.d_z=16".into(),
        "model.ffn_hidden=32".into(),
        "model.num_queries=6".into(),
        "train.stage1_epochs=2".into(),
        "train.stage2_epochs=1".into(),
    ]
    .into();
    RunConfig::load(None, &sets).unwrap()
}

#[test]
fn the_pipeline_is_reproducible_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    commands::gen("overfit-tiny", &dir.path().join("data")).unwrap();
    let data = dataset::read_dir(&dir.path().join("data")).unwrap();
    let data = &data[..2];
    let run = |name: &str, seed: u64| {
        let ck = dir.path().join(name);
        let (model, curve) = commands::train_run(&tiny_run(seed), data, &ck, |_| {}).unwrap();
        let loaded = commands::load_model(&ck, None).unwrap();
        let (per_seq, agg) = commands::evaluate_suite(&loaded, data, &TrackOptions::default(), 0.5).unwrap();
        let direct = commands::evaluate_suite(&model, data, &TrackOptions::default(), 0.5).unwrap();
        assert_eq!(direct, (per_seq.clone(), agg.clone()));
        (curve, per_seq, agg, std::fs::read_to_string(&ck).unwrap())
    };
    let a = run("a.json", 5);
    let b = run("b.json", 5);
    assert_eq!(a, b);
    let c = run("c.json", 6);
    assert_ne!(a.3, c.3);

    let outs = commands::TrainOutputs::for_checkpoint(&dir.path().join("a.json"));
    assert!(outs.stage1_checkpoint.exists());
    let csv = std::fs::read_to_string(outs.loss_csv).unwrap();
    assert!(csv.starts_with("epoch,stage,loss_total,loss_ce,loss_l1,loss_giou\n"));
    assert_eq!(csv.lines().count(), 1 + 3);
    let echoed = std::fs::read_to_string(outs.config).unwrap();
    assert_eq!(RunConfig::load(Some((&dir.path().join("x"), &echoed)), &[]).unwrap(), tiny_run(5));
}

#[test]
fn mismatched_grids_are_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = suite("overfit-tiny").unwrap().generate().unwrap();
    let mut cfg = tiny_run(1);
    cfg.model.channels = 3;
    let err = commands::train_run(&cfg, &data, &dir.path().join("m.json"), |_| {}).err().unwrap();
    assert!(matches!(err, CliError::DimensionMismatch(_)));
    assert!(!dir.path().join("m.json").exists());
}
