//! End-to-end runs of the `pneumonet` binary.

use std::path::Path;
use std::process::{Command, Output};

use pneumonet::checkpoint::save_checkpoint;
use pneumonet::data::{preprocess, synth_dataset, synth_samples};
use pneumonet::layers::Layer;
use pneumonet::train::{Dataset, TrainConfig, Trainer};
use pneumonet::{Model, ModelConfig, SeededRng};

fn pneumonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pneumonet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_checkpoint(model: &Model, path: &Path) {
    let mut buf = Vec::new();
    save_checkpoint(model, &mut buf).unwrap();
    std::fs::write(path, buf).unwrap();
}

/// Small-input model whose output bias is pushed far positive, so every image
/// scores close to 1.
fn confident_model(path: &Path) {
    let cfg = ModelConfig {
        input: [3, 32, 32],
        ..ModelConfig::default()
    };
    let mut model = Model::build(&cfg, &mut SeededRng::new(1)).unwrap();
    let last = model.layers_mut().iter_mut().rev().find_map(|l| match l {
        Layer::Dense(d) => Some(d),
        _ => None,
    });
    last.unwrap().bias.data_mut()[0] = 12.0;
    write_checkpoint(&model, path);
}

#[test]
fn synth_writes_images_and_manifest_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pneumonet(&["synth", "--n", "8", "--seed", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ppm: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    assert_eq!(ppm.len(), 16);
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 16);
    for name in ppm.iter().chain(std::iter::once(&"manifest.csv".to_string())) {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn synth_zero_and_unwritable() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pneumonet(&["synth", "--n", "0", "--out", s(dir.path())]).status.code(), Some(2));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = pneumonet(&["synth", "--n", "1", "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("io:"));
}

#[test]
fn train_smoke_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_dataset(8, 5, &data).unwrap();
    let config = dir.path().join("run.conf");
    std::fs::write(&config, "# smoke\nmanifest = data/manifest.csv\nout = run\nseed = 5\nimage_size = 32\n").unwrap();
    let o = pneumonet(&["train", "--config", s(&config), "--epochs", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6, "{history}");
    assert_eq!(stdout(&o).lines().count(), 6);
    for f in ["model.ckpt", "curves.svg", "train.csv", "val.csv", "test.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    // the written test split is directly usable by evaluate
    let o = pneumonet(&[
        "evaluate",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--manifest",
        s(&run.join("test.csv")),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy:"));
}

#[test]
fn train_missing_manifest_and_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = pneumonet(&["train", "--manifest", s(&dir.path().join("nope.csv")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("data:"), "{}", stderr(&o));

    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "learning_rat = 0.1\n").unwrap();
    let o = pneumonet(&["train", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key"));
}

#[test]
fn evaluate_after_overfit_run() {
    const SEED: u64 = 7;
    let samples = synth_samples(8, SEED, 150).unwrap();
    let images = samples.iter().map(|(_, t)| preprocess(t, 150, 150).unwrap()).collect();
    let data = Dataset::new(images, samples.iter().map(|(r, _)| r.label).collect()).unwrap();
    let model = Model::build(&ModelConfig::default(), &mut SeededRng::new(SEED)).unwrap();
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            seed: SEED,
            max_epochs: 200,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    while trainer.epochs_done() < 200 {
        let (log, _) = trainer.run_epoch(&data, &data).unwrap();
        if log.val_accuracy == 1.0 {
            break;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("overfit.ckpt");
    write_checkpoint(&trainer.into_model(), &ckpt);
    let manifest = synth_dataset(8, SEED, &dir.path().join("data")).unwrap();
    let out = dir.path().join("eval");
    let o = pneumonet(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest.source), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let accuracy: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("accuracy: "))
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(accuracy >= 0.9, "{}", stdout(&o));
    for f in ["metrics.csv", "roc.csv", "predictions.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn evaluate_single_class_and_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    confident_model(&ckpt);
    let data = synth_dataset(2, 1, &dir.path().join("data")).unwrap();
    let single = dir.path().join("data/single.csv");
    let text: String = data.to_text().lines().filter(|l| !l.contains("normal")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&single, text).unwrap();
    let out = dir.path().join("eval");
    let o = pneumonet(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&single), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: ROC omitted"));
    assert!(stdout(&o).contains("recall: 1.0000"), "{}", stdout(&o));
    assert!(out.join("metrics.csv").is_file());
    assert!(!out.join("roc.csv").exists());

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "# nothing\n").unwrap();
    let o = pneumonet(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&empty), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(1, 1, &dir.path().join("data")).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    confident_model(&ckpt);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&ckpt, bytes).unwrap();
    let o = pneumonet(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&data.source), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn diagnose_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    confident_model(&ckpt);
    let data = synth_dataset(1, 2, &dir.path().join("data")).unwrap();
    let image = data.resolve(&data.records[1]);

    let o = pneumonet(&["diagnose", s(&image), "--checkpoint", s(&ckpt), "--meta", "fever=yes", "--age", "30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.contains("trace: R1"), "{report}");
    assert_eq!(report.lines().last(), Some("verdict: Pneumonia detected"));
    let p: f64 = report.lines().find_map(|l| l.strip_prefix("p_cnn: ")).unwrap().parse().unwrap();
    assert!(p > 0.7);

    let o = pneumonet(&["diagnose", s(&image), "--checkpoint", s(&ckpt), "--meta", "fever=no"]);
    assert_eq!(stdout(&o).lines().last(), Some("verdict: Further investigation required"));

    let no_rule = dir.path().join("no_rule.onto");
    let text: String = pneumonet::ontology::DEFAULT_ONTOLOGY
        .lines()
        .filter(|l| !l.starts_with("rule"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&no_rule, text).unwrap();
    let o = pneumonet(&["diagnose", s(&image), "--checkpoint", s(&ckpt), "--ontology", s(&no_rule), "--meta", "fever=yes"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last(), Some("verdict: Further investigation required"));

    let o = pneumonet(&["diagnose", s(&image), "--checkpoint", s(&ckpt), "--meta", "fever=yes", "--threshold", "0.99999999"]);
    assert_eq!(stdout(&o).lines().last(), Some("verdict: Further investigation required"), "{}", stdout(&o));

    let junk = dir.path().join("junk.ppm");
    std::fs::write(&junk, b"not an image").unwrap();
    let o = pneumonet(&["diagnose", s(&junk), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn metrics_reproduces_reported_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("pred.csv");
    let mut text = String::from("p,label\n");
    for (count, line) in [(191, "0.1,0"), (43, "0.9,0"), (13, "0.1,1"), (377, "0.9,1")] {
        for _ in 0..count {
            text.push_str(line);
            text.push('\n');
        }
    }
    std::fs::write(&file, text).unwrap();
    let o = pneumonet(&["metrics", s(&file)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for line in ["tn,fp,fn,tp: 191,43,13,377", "accuracy: 0.9103", "precision: 0.8976", "recall: 0.9667", "f1: 0.9309"] {
        assert!(out.contains(line), "{line} not in {out}");
    }
    let o = pneumonet(&["metrics", s(&file), "--threshold", "1.1"]);
    assert!(stdout(&o).contains("tn,fp,fn,tp: 234,0,390,0"));
}

#[test]
fn help_and_unknown_flags() {
    let o = pneumonet(&["--help"]);
    assert!(o.status.success());
    for cmd in ["train", "evaluate", "diagnose", "metrics", "synth"] {
        assert!(stdout(&o).contains(cmd));
    }
    assert_eq!(pneumonet(&["evaluate", "--nope"]).status.code(), Some(2));
}

#[test]
fn bundled_example_config_matches_defaults() {
    use pneumonet::cli::RunConfig;
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/example.conf");
    let cfg = RunConfig::parse(&std::fs::read_to_string(&path).unwrap(), path.parent().unwrap()).unwrap();
    cfg.validate().unwrap();
    let defaults = RunConfig::default();
    assert_eq!(cfg.train.adam, defaults.train.adam);
    assert_eq!(cfg.train.plateau, defaults.train.plateau);
    assert_eq!(cfg.train.augment, defaults.train.augment);
    assert_eq!(cfg.model, defaults.model);
    assert_eq!(cfg.seed, 42);
}
