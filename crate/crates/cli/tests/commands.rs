use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use grouprefine::model::{write_checkpoint, PredictorModel};
use tempfile::TempDir;

const QUICK_TRAIN: [&str; 4] = ["--train.iterations", "150", "--train.decay_step", "100"];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grouprefine"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = run(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(!err.trim().is_empty(), "nonzero exit without a diagnostic");
    err
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir), "--quiet"];
    args.extend(extra);
    ok(&args);
}

fn train(data: &Path, model: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--model", p(model), "--quiet"];
    args.extend(QUICK_TRAIN);
    args.extend(extra);
    ok(&args);
}

fn refine(model: &Path, data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "refine",
        "--model",
        p(model),
        "--data",
        p(data),
        "--out",
        p(out),
        "--quiet",
    ];
    args.extend(extra);
    ok(&args);
}

fn eval(dets: &Path, data: &Path, extra: &[&str]) -> String {
    let ann = data.join("annotations");
    let images = data.join("test.txt");
    let mut args = vec![
        "eval",
        "--detections",
        p(dets),
        "--annotations",
        p(&ann),
        "--images",
        p(&images),
    ];
    args.extend(extra);
    ok(&args)
}

fn map_line(report: &str) -> String {
    report.lines().find(|l| l.starts_with("map=")).unwrap().to_string()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.push((rel, fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            files.extend(walk(&path));
        } else {
            files.push(path);
        }
    }
    files
}

#[test]
fn synth_writes_every_scene_reproducibly_into_a_new_directory() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("nested/a");
    let b = tmp.path().join("b");
    synth(&a, &[]);
    synth(&b, &[]);
    assert_eq!(fs::read_dir(a.join("annotations")).unwrap().count(), 250);
    assert_eq!(fs::read_to_string(a.join("train.txt")).unwrap().lines().count(), 200);
    assert_eq!(fs::read_to_string(a.join("test.txt")).unwrap().lines().count(), 50);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let c = tmp.path().join("c");
    synth(&c, &["--seed", "5"]);
    assert_ne!(
        fs::read(a.join("proposals.txt")).unwrap(),
        fs::read(c.join("proposals.txt")).unwrap()
    );
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for run_id in ["first", "second"] {
        let root = tmp.path().join(run_id);
        let data = root.join("data");
        synth(&data, &["--seed", "11"]);
        train(&data, &root.join("model.txt"), &[]);
        refine(&root.join("model.txt"), &data, &root.join("out"), &[]);
        let dets = root.join("out/detections.txt");
        eval(&dets, &data, &["--quiet"]);
        outputs.push((
            fs::read(&dets).unwrap(),
            fs::read(root.join("model.txt")).unwrap(),
            fs::read_to_string(root.join("out/eval_report.txt")).unwrap(),
        ));
    }
    assert!(!outputs[0].0.is_empty());
    assert_eq!(outputs[0].0, outputs[1].0);
    assert_eq!(outputs[0].1, outputs[1].1);
    assert_eq!(map_line(&outputs[0].2), map_line(&outputs[1].2));
}

#[test]
fn iteration_count_changes_detections_and_trace_is_opt_in() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model.txt");
    synth(&data, &[]);
    train(&data, &model, &[]);

    let one = tmp.path().join("t1");
    let two = tmp.path().join("t2");
    refine(&model, &data, &one, &["--iterations", "1"]);
    refine(&model, &data, &two, &["--refine.iterations", "2", "--trace"]);
    assert_ne!(
        fs::read(one.join("detections.txt")).unwrap(),
        fs::read(two.join("detections.txt")).unwrap()
    );
    assert!(!one.join("trace.csv").exists());
    assert!(!one.join("per_class").exists());

    let split = tmp.path().join("split");
    refine(&model, &data, &split, &["--per-class"]);
    let unified = fs::read_to_string(split.join("detections.txt")).unwrap();
    let per_class_lines: usize = fs::read_dir(split.join("per_class"))
        .unwrap()
        .map(|e| fs::read_to_string(e.unwrap().path()).unwrap().lines().count())
        .sum();
    assert_eq!(per_class_lines, unified.lines().count());

    let trace = fs::read_to_string(two.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some(grouprefine::io::TRACE_HEADER));
    let proposals = fs::read_to_string(data.join("proposals.txt")).unwrap();
    let test_ids: Vec<String> = fs::read_to_string(data.join("test.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let test_proposals = proposals
        .lines()
        .filter(|l| test_ids.iter().any(|id| l.starts_with(&format!("{id} "))))
        .count();
    assert_eq!(lines.count(), 2 * test_proposals);
}

#[test]
fn background_only_model_writes_no_detections() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--synth.train_scenes", "2", "--synth.test_scenes", "3"]);
    // uniform class probabilities resolve to background
    let model = tmp.path().join("zero.txt");
    fs::write(&model, write_checkpoint(&PredictorModel::zeros(4, 16), 1)).unwrap();
    let out = tmp.path().join("out");
    refine(&model, &data, &out, &[]);
    assert_eq!(fs::read_to_string(out.join("detections.txt")).unwrap(), "");

    let stdout = eval(&out.join("detections.txt"), &data, &[]);
    assert!(stdout.contains("0.0000"), "{stdout}");
    let report = fs::read_to_string(out.join("eval_report.txt")).unwrap();
    assert_eq!(map_line(&report), "map=0.000000");
}

#[test]
fn ground_truth_as_detections_scores_perfectly() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--synth.train_scenes", "1", "--synth.test_scenes", "6"]);
    let mut lines = String::new();
    for id in fs::read_to_string(data.join("test.txt")).unwrap().lines() {
        let xml = fs::read_to_string(data.join("annotations").join(format!("{id}.xml"))).unwrap();
        let record = grouprefine::io::parse_voc_xml(&xml).unwrap();
        for o in record.objects {
            let c = o.corners;
            lines.push_str(&format!(
                "{id} {} 1.0 {} {} {} {}\n",
                o.name, c.xmin, c.ymin, c.xmax, c.ymax
            ));
        }
    }
    let dets = tmp.path().join("gt.txt");
    fs::write(&dets, lines).unwrap();
    let report_path = tmp.path().join("report.txt");
    eval(&dets, &data, &["--mode", "area", "--report", p(&report_path)]);
    let report = fs::read_to_string(&report_path).unwrap();
    assert!(report.contains("mode=area"));
    assert_eq!(map_line(&report), "map=1.000000");

    let ann = data.join("annotations");
    let images = data.join("test.txt");
    let tax = ok(&[
        "diagnose",
        "--detections",
        p(&dets),
        "--annotations",
        p(&ann),
        "--images",
        p(&images),
    ]);
    assert!(tax.contains("Cor") && tax.contains("BG"), "{tax}");
}

#[test]
fn zero_learning_rate_leaves_the_model_at_its_initialization() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--synth.train_scenes", "20", "--synth.test_scenes", "1"]);
    let a = tmp.path().join("a.txt");
    let b = tmp.path().join("b.txt");
    train(&data, &a, &["--train.learning_rate", "0"]);
    train(&data, &b, &["--train.learning_rate", "0", "--train.iterations", "20"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let csv = fs::read_to_string(tmp.path().join("a.txt.loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss"));
    assert_eq!(csv.lines().count(), 151);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--synth.train_scenes", "8", "--synth.test_scenes", "2"]);

    let err = fails_with(&["synth", "--out", p(&tmp.path().join("x")), "--synth.bogus", "1"], 1);
    assert!(err.contains("synth.bogus"), "{err}");
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[refine]\niterations = 0\n").unwrap();
    let err = fails_with(&["synth", "--out", p(&tmp.path().join("y")), "--config", p(&cfg)], 1);
    assert!(err.contains("refine.iterations"), "{err}");
    fails_with(&["frobnicate"], 1);

    let out = p(tmp.path());
    let missing = tmp.path().join("missing.txt");
    fails_with(&["refine", "--model", p(&missing), "--data", p(&data), "--out", out], 1);
    let corrupt = tmp.path().join("corrupt.txt");
    fs::write(&corrupt, "not a model\n").unwrap();
    fails_with(&["refine", "--model", p(&corrupt), "--data", p(&data), "--out", out], 1);

    let model = tmp.path().join("m.txt");
    let err = fails_with(
        &[
            "train",
            "--data",
            p(&data),
            "--model",
            p(&model),
            "--train.learning_rate",
            "1e6",
            "--train.iterations",
            "50",
            "--train.decay_step",
            "50",
        ],
        2,
    );
    assert!(err.contains("step"), "{err}");
    assert!(!model.exists());

    let broken = data.join("annotations/000000.xml");
    fs::write(&broken, "<annotation>\n<size><width>10</width>\n</annotation>").unwrap();
    let err = fails_with(&["train", "--data", p(&data), "--model", p(&model)], 1);
    assert!(err.contains("000000.xml") && err.contains("3"), "{err}");
}
