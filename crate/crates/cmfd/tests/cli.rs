use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmfd::dataset::{Manifest, MANIFEST};
use cmfd::detect::{DetectionRecord, RECORD};
use cmfd::io;
use cmfd_core::metrics::pixel_metrics;
use sha2::{Digest, Sha256};

fn cmfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmfd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CMFD_CHECKPOINT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_digest(root: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_str().unwrap().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Small dataset of 128×128 samples with a test split.
fn generate(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join("data");
    ok(&cmfd(&[
        "generate",
        "--procedural",
        "6",
        "--procedural-size",
        "128",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--set",
        "dataset.synth.size=128",
        "--set",
        "dataset.test_fraction=0.5",
        "--out",
        s(&out),
    ]));
    out.join(MANIFEST)
}

const TINY: [&str; 6] = [
    "--set",
    "backbone.extractor=\"tiny\"",
    "--set",
    "input_side=128",
    "--set",
    "backbone.top_t=16",
];

#[test]
fn generate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(a.path(), 4, 7);
    generate(b.path(), 4, 7);
    assert_eq!(tree_digest(&a.path().join("data")), tree_digest(&b.path().join("data")));
    let m = Manifest::read(&a.path().join("data").join(MANIFEST)).unwrap();
    assert_eq!(m.entries.len(), 4);
    for e in &m.entries {
        assert!(m.image_path(e).exists() && m.mask_path(e).exists());
    }
}

#[test]
fn generate_defaults_to_procedural_scenes() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("data");
    ok(&cmfd(&["generate", "--n", "3", "--seed", "7", "--set", "dataset.synth.size=64", "--procedural-size", "64", "--out", s(&out)]));
    assert_eq!(Manifest::read(&out.join(MANIFEST)).unwrap().entries.len(), 3);
}

#[test]
fn generate_zero_samples_writes_an_empty_manifest() {
    let d = tempfile::tempdir().unwrap();
    let m = generate(d.path(), 0, 1);
    assert!(Manifest::read(&m).unwrap().entries.is_empty());
}

#[test]
fn generate_with_missing_corpus_fails_without_a_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("data");
    let r = cmfd(&["generate", "--corpus", s(&d.path().join("nope")), "--n", "3", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope"));
    assert!(!out.join(MANIFEST).exists());
}

#[test]
fn generate_resumes_from_a_partial_run() {
    let d = tempfile::tempdir().unwrap();
    let m = generate(d.path(), 4, 3);
    let full = tree_digest(&d.path().join("data"));
    let manifest = Manifest::read(&m).unwrap();
    fs::remove_file(manifest.image_path(&manifest.entries[2])).unwrap();
    generate(d.path(), 4, 3);
    assert_eq!(tree_digest(&d.path().join("data")), full);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cmfd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cmfd(&["detect", "--set", "fusion.phi=0", "x.png"]).status.code(), Some(1));
    assert_eq!(cmfd(&["--help"]).status.code(), Some(0));
}

#[test]
fn detect_without_checkpoint_or_random_init_aborts() {
    let d = tempfile::tempdir().unwrap();
    let m = Manifest::read(&generate(d.path(), 1, 2)).unwrap();
    let img = m.image_path(&m.entries[0]);
    let r = cmfd(&["detect", s(&img), "--out", s(&d.path().join("out"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("checkpoint"));
}

#[test]
fn stage1_only_emits_scores_but_no_mask() {
    let d = tempfile::tempdir().unwrap();
    let m = Manifest::read(&generate(d.path(), 1, 2)).unwrap();
    let img = m.image_path(&m.entries[0]);
    let out = d.path().join("out");
    let mut args = vec!["detect", s(&img), "--random-init", "--stage1-only", "--out", s(&out)];
    args.extend(TINY);
    ok(&cmfd(&args));
    let dir = out.join(&m.entries[0].id);
    let rec: DetectionRecord = io::read_json(&dir.join(RECORD)).unwrap();
    assert!(rec.mask.is_none() && rec.s_in.is_none());
    assert!(rec.timings.backbone.is_some() && rec.timings.crf.is_none());
    assert!(dir.join("scores.png").exists());
    assert!(!dir.join("mask.png").exists());
    let scores = io::read_scores(&dir.join("scores.png")).unwrap();
    assert_eq!((scores.width(), scores.height()), (128, 128));
}

#[test]
fn unreadable_image_does_not_stop_the_batch() {
    let d = tempfile::tempdir().unwrap();
    let m = Manifest::read(&generate(d.path(), 1, 2)).unwrap();
    let good = m.image_path(&m.entries[0]);
    let bad = d.path().join("broken.png");
    fs::write(&bad, b"not an image").unwrap();
    let out = d.path().join("out");
    let mut args = vec!["detect", s(&bad), s(&good), "--random-init", "--stage1-only", "--out", s(&out)];
    args.extend(TINY);
    let r = cmfd(&args);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("broken.png"));
    assert!(out.join(&m.entries[0].id).join(RECORD).exists());
}

/// Runs the full stage two on the ground-truth mask as the score map.
fn detect_with_truth(dir: &Path, m: &Manifest, i: usize) -> PathBuf {
    let e = &m.entries[i];
    let out = dir.join("out");
    ok(&cmfd(&["detect", s(&m.image_path(e)), "--scores", s(&m.mask_path(e)), "--out", s(&out)]));
    out.join(&e.id)
}

/// Translation-only samples, so the classical matcher can pair the copies.
fn generate_translations(dir: &Path, n: usize, seed: u64) -> Manifest {
    let out = dir.join("data");
    let n = n.to_string();
    let seed = seed.to_string();
    ok(&cmfd(&[
        "generate",
        "--procedural-size",
        "128",
        "--n",
        &n,
        "--seed",
        &seed,
        "--set",
        "dataset.synth.size=128",
        "--set",
        "dataset.ranges.rotation_deg=[0.0, 0.0]",
        "--set",
        "dataset.ranges.scale=[1.0, 1.0]",
        "--set",
        "dataset.ranges.deform_width=[1.0, 1.0]",
        "--set",
        "dataset.ranges.luminance=[-8.0, 8.0]",
        "--out",
        s(&out),
    ]));
    Manifest::read(&out.join(MANIFEST)).unwrap()
}

fn disjoint(a: [usize; 4], b: [usize; 4]) -> bool {
    a[2] <= b[0] || b[2] <= a[0] || a[3] <= b[1] || b[3] <= a[1]
}

#[test]
fn injected_truth_survives_stage_two() {
    let d = tempfile::tempdir().unwrap();
    let m = generate_translations(d.path(), 12, 11);
    let mut f1 = Vec::new();
    for (i, e) in m.entries.iter().enumerate() {
        if !disjoint(e.provenance.source_box, e.provenance.paste_box) {
            continue;
        }
        let dir = detect_with_truth(d.path(), &m, i);
        let rec: DetectionRecord = io::read_json(&dir.join(RECORD)).unwrap();
        let t = &rec.timings;
        assert!(t.selection.is_some() && t.matching.is_some() && t.fusion.is_some() && t.crf.is_some());
        assert!(t.backbone.is_none());
        for p in [&rec.image, &rec.scores]
            .into_iter()
            .chain(rec.proposals.iter())
            .chain(rec.matches.iter())
            .chain(rec.s_sp.iter())
            .chain(rec.s_p.iter())
            .chain(rec.s_in.iter())
            .chain(rec.mask.iter())
        {
            assert!(dir.join(p).exists(), "{}", p.display());
        }
        let pred = io::read_mask(&dir.join("mask.png")).unwrap();
        let gt = io::read_mask(&m.mask_path(e)).unwrap();
        f1.push(pixel_metrics(&pred, &gt).unwrap().f1);
    }
    assert!(f1.len() >= 4, "only {} usable samples", f1.len());
    let mean = f1.iter().sum::<f64>() / f1.len() as f64;
    assert!(mean >= 0.9, "mean F1 {mean} over {f1:?}");
}

#[test]
fn replay_reproduces_the_mask_bit_for_bit() {
    let d = tempfile::tempdir().unwrap();
    let m = Manifest::read(&generate(d.path(), 2, 5)).unwrap();
    for i in 0..2 {
        let dir = detect_with_truth(d.path(), &m, i);
        let replayed = d.path().join(format!("replay{i}.png"));
        ok(&cmfd(&["detect", "--replay", s(&dir.join(RECORD)), "--out", s(&replayed)]));
        assert_eq!(fs::read(&replayed).unwrap(), fs::read(dir.join("mask.png")).unwrap());
        let replayed = d.path().join(format!("replay{i}_nocrf.png"));
        ok(&cmfd(&["detect", "--replay", s(&dir.join(RECORD)), "--no-crf", "--out", s(&replayed)]));
        let s_in = io::read_scores(&dir.join("s_in.png")).unwrap();
        assert_eq!(io::read_mask(&replayed).unwrap(), s_in.threshold(0.5));
    }
}

#[test]
fn detect_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let m = Manifest::read(&generate(d.path(), 1, 9)).unwrap();
    let img = m.image_path(&m.entries[0]);
    let mut digests = Vec::new();
    for k in 0..2 {
        let out = d.path().join(format!("out{k}"));
        let mut args = vec!["detect", s(&img), "--random-init", "--out", s(&out)];
        args.extend(TINY);
        ok(&cmfd(&args));
        let dir = out.join(&m.entries[0].id);
        let t = io::read_json::<DetectionRecord>(&dir.join(RECORD)).unwrap().timings;
        assert!([t.backbone, t.selection, t.matching, t.fusion, t.crf].iter().all(Option::is_some));
        digests.push(["scores.png", "s_in.png", "mask.png", "matches.json"].map(|f| fs::read(dir.join(f)).unwrap()));
    }
    assert_eq!(digests[0], digests[1]);
}

fn copy_truth(m: &Manifest, dir: &Path) {
    for e in &m.entries {
        let p = dir.join(&e.id).join("mask.png");
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::copy(m.mask_path(e), p).unwrap();
    }
}

#[test]
fn perfect_predictions_score_one() {
    let d = tempfile::tempdir().unwrap();
    let mp = generate(d.path(), 4, 4);
    let m = Manifest::read(&mp).unwrap();
    let preds = d.path().join("preds");
    copy_truth(&m, &preds);
    let report = d.path().join("report.json");
    let r = cmfd(&["evaluate", "--manifest", s(&mp), "--predictions", s(&preds), "--out", s(&report)]);
    ok(&r);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let all = &v["aggregate"]["protocol_all"];
    for key in ["precision", "recall", "f1", "iou"] {
        assert_eq!(all[key].as_f64(), Some(1.0), "{key}: {v}");
    }
    assert!(String::from_utf8_lossy(&r.stdout).contains("1.0000"));
}

#[test]
fn f1_column_matches_hand_counts() {
    let d = tempfile::tempdir().unwrap();
    let mp = generate(d.path(), 2, 4);
    let m = Manifest::read(&mp).unwrap();
    let preds = d.path().join("preds");
    copy_truth(&m, &preds);
    // First entry: predict everything, so F1 = 2|gt| / (|gt| + N).
    let gt = io::read_mask(&m.mask_path(&m.entries[0])).unwrap();
    let full = cmfd_core::BinaryMask::from_fn(gt.width(), gt.height(), |_, _| true);
    io::write_mask(&preds.join(&m.entries[0].id).join("mask.png"), &full).unwrap();
    let g = gt.count() as f64;
    let n = (gt.width() * gt.height()) as f64;
    let expected = [2.0 * g / (g + n), 1.0];
    let report = d.path().join("report.json");
    ok(&cmfd(&["evaluate", "--manifest", s(&mp), "--predictions", s(&preds), "--out", s(&report)]));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    for (row, want) in v["images"].as_array().unwrap().iter().zip(expected) {
        assert!((row["metrics"]["f1"].as_f64().unwrap() - want).abs() < 1e-12, "{row}");
    }
    let mean = v["aggregate"]["protocol_all"]["f1"].as_f64().unwrap();
    assert!((mean - (expected[0] + expected[1]) / 2.0).abs() < 1e-12);
}

#[test]
fn missing_prediction_is_reported_by_name() {
    let d = tempfile::tempdir().unwrap();
    let mp = generate(d.path(), 3, 4);
    let m = Manifest::read(&mp).unwrap();
    let preds = d.path().join("preds");
    copy_truth(&m, &preds);
    let victim = &m.entries[1].id;
    fs::remove_dir_all(preds.join(victim)).unwrap();
    let r = cmfd(&["evaluate", "--manifest", s(&mp), "--predictions", s(&preds)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains(victim.as_str()));
    ok(&cmfd(&["evaluate", "--manifest", s(&mp), "--predictions", s(&preds), "--allow-missing"]));
}

#[test]
fn render_is_deterministic_and_keeps_the_size() {
    let d = tempfile::tempdir().unwrap();
    let m = Manifest::read(&generate(d.path(), 1, 8)).unwrap();
    let dir = detect_with_truth(d.path(), &m, 0);
    let a = d.path().join("a.png");
    let b = d.path().join("b.png");
    ok(&cmfd(&["render", s(&dir.join(RECORD)), "--out", s(&a)]));
    ok(&cmfd(&["render", s(&dir.join(RECORD)), "--out", s(&b)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let img = io::read_image(&a).unwrap();
    assert_eq!((img.width(), img.height()), (128, 128));
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let mp = generate(d.path(), 4, 6);
    let ckpt = d.path().join("model.ckpt");
    let mut args = vec![
        "train",
        "--manifest",
        s(&mp),
        "--out",
        s(&ckpt),
        "--set",
        "train.side=64",
        "--set",
        "train.epochs=1",
        "--set",
        "backbone.tiny_width=8",
    ];
    args.extend(TINY);
    ok(&cmfd(&args));
    assert!(cmfd::checkpoint::load(&ckpt).is_ok());
    assert!(ckpt.with_extension("log.json").exists());

    let m = Manifest::read(&mp).unwrap();
    let out = d.path().join("out");
    let img = m.image_path(&m.entries[0]);
    let mut args = vec!["detect", s(&img), "--checkpoint", s(&ckpt), "--stage1-only", "--out", s(&out)];
    args.extend(TINY);
    ok(&cmfd(&args));
}
