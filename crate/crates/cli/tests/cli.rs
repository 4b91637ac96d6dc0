use std::fs;
use std::path::Path;
use std::process::Command;

use sam_cli::commands;
use sam_cli::plot::{emit_plot, Metric, PlotKind};
use sam_cli::{parse_config, parse_seed_list, CliError, EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_RUNTIME};
use sam_core::harness::{write_records, ResultRecord, RECORD_SCHEMA};

fn record(learner: &str, buffer: usize, variant: &str, seed: u64, task: usize, tasks: usize, cil: f64) -> ResultRecord {
    ResultRecord {
        schema: RECORD_SCHEMA.into(),
        tag: "t".into(),
        learner: learner.into(),
        buffer,
        variant: variant.into(),
        scheme: "11111".into(),
        seed,
        task_index: task,
        num_tasks: tasks,
        class_il: cil,
        task_il: (cil + 0.5).min(1.0),
        task_class_il: vec![cil; task + 1],
        task_task_il: vec![(cil + 0.5).min(1.0); task + 1],
        saliency_cc: Some(0.5),
        saliency_sim: Some(0.6 + 0.01 * task as f64),
        saliency_kld: Some(1.0),
        seconds: 0.0,
        params_train: 10,
        params_inference: 8,
    }
}

fn write(dir: &Path, name: &str, recs: &[ResultRecord]) -> std::path::PathBuf {
    let p = dir.join(name);
    write_records(&p, recs, false).unwrap();
    p
}

#[test]
fn minimal_config_materializes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.txt");
    fs::write(&p, "# minimal\nbenchmark.classes = 10\nlearner.kind = erace\nlearner.buffer = 200\n").unwrap();
    let c = parse_config(Some(&p), &[]).unwrap();
    assert_eq!(c.learner.buffer_size, 200);
    assert_eq!(c.train.batch, 8);
    assert_eq!(c.benchmark.tasks, 5);
}

#[test]
fn overrides_apply_after_the_file() {
    let c = parse_config(None, &["learner.kind=erace".into(), "buffer=2000".into()]).unwrap();
    assert_eq!(c.learner.buffer_size, 2000);
}

#[test]
fn bad_configs_are_config_errors() {
    let err = parse_config(None, &["sam.scheme=1111".into()]).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
    assert!(err.to_string().contains("length 5"), "{err}");
    let err = parse_config(None, &["learner.nope=1".into()]).unwrap_err();
    assert!(matches!(err, CliError::Config(ref m) if m.contains("learner.nope")));
    assert!(parse_config(None, &["buffer".into()]).is_err());
    assert!(parse_config(Some(Path::new("/nonexistent/cfg.txt")), &[]).is_err());
    assert_eq!(parse_seed_list("0, 1,2").unwrap(), vec![0, 1, 2]);
    assert!(parse_seed_list("a").is_err());
}

#[test]
fn report_of_one_run_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "r.jsonl", &[record("erace", 200, "none", 0, 0, 1, 0.25)]);
    let text = commands::report(&p, true).unwrap();
    assert!(text.contains("25.00 ± 0.00"), "{text}");
}

#[test]
fn report_grid_has_one_cell_per_learner_and_buffer() {
    let dir = tempfile::tempdir().unwrap();
    let mut recs = Vec::new();
    for l in ["erace", "derpp"] {
        for m in [200, 500] {
            recs.push(record(l, m, "none", 0, 0, 1, 0.1));
        }
    }
    let p = write(dir.path(), "r.jsonl", &recs);
    let text = commands::report(&p, true).unwrap();
    for row in ["erace M=200", "erace M=500", "derpp M=200", "derpp M=500"] {
        assert_eq!(text.matches(row).count(), 2, "{row} in\n{text}");
    }
}

#[test]
fn report_cells_match_hand_statistics() {
    let dir = tempfile::tempdir().unwrap();
    // Class-IL 0.2, 0.4, 0.9: mean 0.5, sample std sqrt(0.13) = 0.3606.
    let recs: Vec<ResultRecord> = [0.2, 0.4, 0.9]
        .iter()
        .enumerate()
        .map(|(s, &a)| record("erace", 200, "none", s as u64, 0, 1, a))
        .collect();
    let p = write(dir.path(), "r.jsonl", &recs);
    let text = commands::report(&p, false).unwrap();
    assert!(text.contains("50.00 ± 36.06"), "{text}");
}

#[test]
fn trajectory_over_five_tasks_has_five_ticks() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<ResultRecord> = (0..2)
        .flat_map(|s| (0..5).map(move |t| record("finetune", 0, "sam", s, t, 5, 0.5)))
        .collect();
    let p = write(dir.path(), "r.jsonl", &recs);
    let out = emit_plot(&p, PlotKind::Trajectory, Metric::Sim, &dir.path().join("plots")).unwrap();
    assert_eq!(out.data.x_ticks.len(), 5);
    assert_eq!(out.data.series.len(), 1);
    let svg = fs::read_to_string(&out.svg).unwrap();
    assert_eq!(svg.matches("class=\"xtick\"").count(), 5);
    let csv = fs::read_to_string(&out.csv).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(5).unwrap().contains(",5,5,0.64,0,2"), "{csv}");
    // Same input, same bytes.
    let again = emit_plot(&p, PlotKind::Trajectory, Metric::Sim, &dir.path().join("plots2")).unwrap();
    assert_eq!(fs::read(&again.svg).unwrap(), svg.into_bytes());
}

#[test]
fn trajectory_names_missing_fields() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = record("finetune", 0, "none", 0, 0, 1, 0.5);
    r.saliency_kld = None;
    let p = write(dir.path(), "r.jsonl", &[r]);
    let err = emit_plot(&p, PlotKind::Trajectory, Metric::Kld, &dir.path().join("plots")).unwrap_err();
    assert!(err.to_string().contains("saliency_kld"), "{err}");
    assert!(!dir.path().join("plots").exists());
}

#[test]
fn robustness_curve_has_mean_and_band_per_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rob.csv");
    let mut text = String::from("epsilon,seed,accuracy\n");
    for e in [0, 2, 4, 8] {
        for s in 0..3 {
            text.push_str(&format!("{e},{s},{}\n", 0.9 - 0.1 * f64::from(e) / 2.0 - 0.01 * f64::from(s)));
        }
    }
    fs::write(&csv, text).unwrap();
    let out = emit_plot(&csv, PlotKind::RobustnessCurve, Metric::Sim, &dir.path().join("p")).unwrap();
    let pts = &out.data.series[0].points;
    assert_eq!(pts.len(), 4);
    assert!(pts.iter().all(|p| p.n == 3 && (p.std - 0.01).abs() < 1e-9));
    assert!((pts[0].mean - 0.89).abs() < 1e-9);
    assert!(fs::read_to_string(&out.svg).unwrap().contains("<polygon"));
}

#[test]
fn empty_records_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "r.jsonl", &[]);
    let plots = dir.path().join("plots");
    for kind in [PlotKind::Trajectory, PlotKind::AblationBars] {
        assert!(emit_plot(&p, kind, Metric::ClassIl, &plots).is_err());
    }
    assert!(!plots.exists());
}

#[test]
fn ablation_bars_cover_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<ResultRecord> = ["none", "sam", "sim"]
        .iter()
        .map(|v| record("erace", 200, v, 0, 0, 1, 0.3))
        .collect();
    let p = write(dir.path(), "r.jsonl", &recs);
    let out = emit_plot(&p, PlotKind::AblationBars, Metric::ClassIl, dir.path()).unwrap();
    assert_eq!(out.data.x_ticks.len(), 3);
    assert_eq!(out.data.series.len(), 2);
}

fn sam(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sam"))
        .args(args)
        .env("SAM_OUTPUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn exit_codes_distinguish_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| sam(dir.path(), args).status.code().unwrap();
    assert_eq!(code(&["train", "--set", "bogus.key=1"]), EXIT_CONFIG);
    assert_eq!(code(&["frobnicate"]), EXIT_CONFIG);
    assert_eq!(code(&["report", "--records", "/nonexistent.jsonl"]), EXIT_RUNTIME);

    let mut a = record("erace", 200, "none", 0, 0, 1, 0.1);
    let mut b = a.clone();
    b.learner = "derpp".into();
    b.variant = "sam".into();
    a.variant = "none".into();
    let p = write(dir.path(), "r.jsonl", &[a, b]);
    let p = p.to_str().unwrap();
    assert_eq!(code(&["report", "--records", p]), 0);
    assert_eq!(code(&["report", "--records", p, "--require-complete"]), EXIT_ACCEPTANCE);
}

const TINY: &[&str] = &[
    "--set", "benchmark.classes=4",
    "--set", "benchmark.tasks=2",
    "--set", "benchmark.samples_per_class=10",
    "--set", "benchmark.height=16",
    "--set", "benchmark.width=16",
    "--set", "model.width=4",
    "--set", "model.init=scratch",
    "--set", "pretrain.epochs=0",
    "--set", "tag=tiny",
];

#[test]
fn train_then_eval_round_trips_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let mut args = vec![sub, "--seed-list", "0,1"];
        args.extend_from_slice(TINY);
        let out = sam(dir.path(), &args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run("train");
    let tag = dir.path().join("tiny");
    let recs = sam_core::harness::read_records(&tag.join("records.jsonl")).unwrap();
    assert_eq!(recs.len(), 4);
    assert!(tag.join("models/s1.safetensors").exists());
    assert!(tag.join("config.txt").exists());

    run("eval");
    let eval = fs::read_to_string(tag.join("eval.csv")).unwrap();
    for r in recs.iter().filter(|r| r.is_final()) {
        let mine: Vec<f64> = eval
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{},", r.seed)))
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(mine, r.task_class_il);
    }
}

#[test]
fn attack_writes_a_curve_and_checks_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["attack", "--seed-list", "0", "--eps", "0,8"];
    args.extend_from_slice(TINY);
    let out = sam(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("tiny/robustness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epsilon,seed,accuracy\n"));
}
