//! End-to-end tests of the command-line interface: exit codes, incremental
//! reruns, tamper detection, discovery retries, the noisy-control flow, and
//! configuration precedence. Every test drives the real binary against the
//! scripted mock backend, so runs are fully deterministic.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn fixture(name: &str) -> String {
    fixtures_dir().join(name).to_str().unwrap().to_string()
}

fn run_env(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vpgm"));
    cmd.env_clear();
    for (key, value) in envs {
        cmd.env(key, value);
    }
    cmd.args(args);
    cmd.output().expect("binary runs")
}

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn events(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("events.jsonl"))
        .unwrap()
        .lines()
        .map(|line| serde_json::from_str(line).unwrap())
        .collect()
}

/// Runs the scripted pipeline in `dir`, asserting success.
fn run_pipeline(dir: &Path, extra: &[&str]) {
    let config = fixture("mock-run.toml");
    let mut args = vec!["pipeline", "--config", &config, "--run-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "pipeline failed: {}", stderr_text(&out));
}

#[test]
fn rerunning_a_finished_pipeline_skips_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    let before = fs::read(dir.path().join("report.json")).unwrap();
    let first_run_events = events(dir.path()).len();

    run_pipeline(dir.path(), &[]);
    let after = fs::read(dir.path().join("report.json")).unwrap();
    assert_eq!(before, after, "a skipped rerun must not touch the report");

    let new: Vec<Value> = events(dir.path()).split_off(first_run_events);
    assert!(
        new.iter().all(|e| e["event"] == "stage_skipped" || e["stage"] == "pipeline"),
        "unexpected event in a fully cached rerun: {new:?}"
    );
    assert_eq!(new.iter().filter(|e| e["event"] == "stage_skipped").count(), 7);
    assert_eq!(new.last().unwrap()["event"], "pipeline_completed");
}

#[test]
fn deleting_one_artifact_reruns_only_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    let before = fs::read(dir.path().join("report.json")).unwrap();
    let first_run_events = events(dir.path()).len();

    fs::remove_file(dir.path().join("report.json")).unwrap();
    run_pipeline(dir.path(), &[]);
    assert_eq!(
        before,
        fs::read(dir.path().join("report.json")).unwrap(),
        "the regenerated report must be byte-identical"
    );

    let new: Vec<Value> = events(dir.path()).split_off(first_run_events);
    let started: Vec<&Value> = new.iter().filter(|e| e["event"] == "stage_started").collect();
    assert_eq!(started.len(), 1, "only the stage with the missing output reruns: {new:?}");
    assert_eq!(started[0]["stage"], "evaluate");
    assert_eq!(started[0]["detail"], "output missing; regenerating");
    assert_eq!(new.iter().filter(|e| e["event"] == "stage_skipped").count(), 6);
    assert!(new.iter().any(|e| e["stage"] == "evaluate" && e["event"] == "stage_completed"));
}

#[test]
fn hand_edited_artifacts_are_refused_until_forced() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    let records_path = dir.path().join("records-dev.jsonl");
    let pristine_records = fs::read(&records_path).unwrap();
    let pristine_report = fs::read(dir.path().join("report.json")).unwrap();

    let mut tampered = pristine_records.clone();
    tampered.extend_from_slice(b"{\"question_id\":\"intruder\"}\n");
    fs::write(&records_path, &tampered).unwrap();

    let out = run(&[
        "pipeline",
        "--config",
        &fixture("mock-run.toml"),
        "--run-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "tampering is a validation failure: {}", stderr_text(&out));
    let err = stderr_text(&out);
    assert!(err.contains("records-dev.jsonl"), "error names the file: {err}");
    assert!(err.contains("use --force to rebuild"), "error suggests the way out: {err}");

    run_pipeline(dir.path(), &["--force"]);
    assert_eq!(fs::read(&records_path).unwrap(), pristine_records, "force rebuilds the records");
    assert_eq!(
        fs::read(dir.path().join("report.json")).unwrap(),
        pristine_report,
        "force rebuilds the identical report"
    );
}

#[test]
fn corrupt_input_lines_are_named_in_the_error() {
    // A malformed dataset line is reported with its line number.
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("broken-data.jsonl");
    fs::write(
        &dataset,
        concat!(
            r#"{"question_id": "q1", "body": "Is it on?", "options": ["yes", "no"], "#,
            r#""rationale": "r", "gold_label": "yes"}"#,
            "\n{{{\n"
        ),
    )
    .unwrap();
    let out = run(&[
        "control",
        "--data",
        dataset.to_str().unwrap(),
        "--out",
        dir.path().join("noisy.jsonl").to_str().unwrap(),
        "--run-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "stderr: {}", stderr_text(&out));
    assert!(stderr_text(&out).contains("line 2"), "stderr: {}", stderr_text(&out));

    // Same contract for a malformed aggregated-rows line.
    let rows = dir.path().join("broken-rows.jsonl");
    fs::write(
        &rows,
        concat!(
            r#"{"question_id":"q1","options":["yes","no"],"counts":[3,0],"prior":[0.9,0.1],"#,
            r#""gold":0,"gold_label":"yes","baseline_conf":1.0,"baseline_label":"yes","#,
            r#""chosen_label":"yes","dropped":0}"#,
            "\n{broken\n"
        ),
    )
    .unwrap();
    let out = run(&[
        "fit-lambda",
        "--records",
        rows.to_str().unwrap(),
        "--run-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "stderr: {}", stderr_text(&out));
    let err = stderr_text(&out);
    assert!(err.contains("broken-rows.jsonl") && err.contains("line 2"), "stderr: {err}");
}

#[test]
fn discovered_structure_is_reused_by_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let extra = dir.path().join("copy.json");
    let out = run(&[
        "discover",
        "--run-dir",
        dir.path().to_str().unwrap(),
        "--mock-script",
        &fixture("replies-discover.json"),
        "--task-description",
        "Answer yes/no questions about short evidence passages.",
        "--out",
        extra.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "discover failed: {}", stderr_text(&out));

    let pgm: Value =
        serde_json::from_slice(&fs::read(dir.path().join("pgm.json")).unwrap()).unwrap();
    assert_eq!(pgm["edges"].as_array().unwrap().len(), 9);
    assert_eq!(fs::read(&extra).unwrap(), fs::read(dir.path().join("pgm.json")).unwrap());

    // A later stage in the same run directory picks up pgm.json without any
    // --structure flag.
    let out = run(&[
        "infer",
        "--split",
        "test",
        "--test-data",
        &fixture("test.jsonl"),
        "--mock-script",
        &fixture("replies.json"),
        "--run-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "infer failed: {}", stderr_text(&out));
    let records = fs::read_to_string(dir.path().join("records-test.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 6);
}

#[test]
fn cyclic_discovery_proposals_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "discover",
        "--run-dir",
        dir.path().to_str().unwrap(),
        "--mock-script",
        &fixture("replies-discover-cyclic.json"),
        "--task-description",
        "Answer yes/no questions about short evidence passages.",
    ]);
    assert_eq!(code(&out), 4, "stderr: {}", stderr_text(&out));
    let err = stderr_text(&out);
    assert!(err.contains("cycle"), "rejection explains the cycle: {err}");
    assert!(!dir.path().join("pgm.json").exists(), "no structure is written on rejection");
}

#[test]
fn discovery_retries_once_after_a_rejected_proposal() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "discover",
        "--run-dir",
        dir.path().to_str().unwrap(),
        "--mock-script",
        &fixture("replies-discover-retry.json"),
        "--task-description",
        "Answer yes/no questions about short evidence passages.",
    ]);
    assert!(out.status.success(), "discover failed: {}", stderr_text(&out));
    assert!(
        events(dir.path())
            .iter()
            .any(|e| e["stage"] == "discover" && e["event"] == "stage_retrying"),
        "the rejected first proposal is logged as a retry"
    );
    let pgm: Value =
        serde_json::from_slice(&fs::read(dir.path().join("pgm.json")).unwrap()).unwrap();
    assert_eq!(pgm["edges"].as_array().unwrap().len(), 9);
}

#[test]
fn stage_commands_require_a_run_directory() {
    let out = run(&["pipeline"]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("--run-dir"), "stderr: {}", stderr_text(&out));

    let out = run(&["report"]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("--run-dir"), "stderr: {}", stderr_text(&out));
}

#[test]
fn usage_follows_command_line_conventions() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout_text(&out).contains("pipeline"), "help lists the subcommands");

    let out = run(&["--no-such-flag"]);
    assert_eq!(code(&out), 2, "unknown flags are usage errors");

    // --dataset declares a dependency on --records-out at the parser level.
    let out = run(&["infer", "--dataset", "x.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("--records-out"), "stderr: {}", stderr_text(&out));

    // --records without --dataset cannot resolve options and gold labels.
    let dir = tempfile::tempdir().unwrap();
    let out =
        run(&["aggregate", "--records", "x.jsonl", "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("--dataset"), "stderr: {}", stderr_text(&out));
}

#[test]
fn configuration_precedence_is_flags_over_env_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    fs::write(&config, "seed = 3\n").unwrap();
    let effective = |run_dir: &Path| -> String {
        fs::read_to_string(run_dir.join("effective-config.toml")).unwrap()
    };

    let file_only = dir.path().join("file-only");
    let out = run(&[
        "control",
        "--config",
        config.to_str().unwrap(),
        "--data",
        &fixture("test.jsonl"),
        "--run-dir",
        file_only.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_text(&out));
    assert!(effective(&file_only).contains("seed = 3"), "file value beats the default");

    // The run directory itself arrives via VPGM_RUN_DIR here, covering the
    // environment route for paths as well.
    let env_beats_file = dir.path().join("env-beats-file");
    let out = run_env(
        &["control", "--config", config.to_str().unwrap(), "--data", &fixture("test.jsonl")],
        &[("VPGM_SEED", "5"), ("VPGM_RUN_DIR", env_beats_file.to_str().unwrap())],
    );
    assert!(out.status.success(), "stderr: {}", stderr_text(&out));
    assert!(effective(&env_beats_file).contains("seed = 5"), "environment beats the file");

    let flag_beats_env = dir.path().join("flag-beats-env");
    let out = run_env(
        &[
            "--seed",
            "9",
            "control",
            "--config",
            config.to_str().unwrap(),
            "--data",
            &fixture("test.jsonl"),
            "--run-dir",
            flag_beats_env.to_str().unwrap(),
        ],
        &[("VPGM_SEED", "5")],
    );
    assert!(out.status.success(), "stderr: {}", stderr_text(&out));
    assert!(effective(&flag_beats_env).contains("seed = 9"), "flag beats the environment");
}

#[test]
fn unscripted_scenarios_are_provider_failures() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("unknown.jsonl");
    fs::write(
        &dataset,
        concat!(
            r#"{"question_id": "zz", "body": "Is water wet?", "options": ["yes", "no"], "#,
            r#""rationale": "r", "gold_label": "yes"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = run(&[
        "infer",
        "--dataset",
        dataset.to_str().unwrap(),
        "--records-out",
        dir.path().join("records-zz.jsonl").to_str().unwrap(),
        "--structure",
        &fixture("structure.json"),
        "--mock-script",
        &fixture("replies.json"),
        "--run-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr_text(&out));
    assert!(
        stderr_text(&out).contains("all 3 samples were unusable"),
        "stderr: {}",
        stderr_text(&out)
    );
}

#[test]
fn report_prints_the_saved_table() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    let out = run(&["report", "--run-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "report failed: {}", stderr_text(&out));
    let text = stdout_text(&out);
    assert!(text.contains("bayes posterior"), "stdout: {text}");
    assert!(text.contains("vpgm expectation"), "stdout: {text}");
    assert!(text.contains("consistency baseline"), "stdout: {text}");
    assert!(text.contains("0.8333"), "the accuracy column is rendered: {text}");
    assert!(text.contains("reliability of the bayes posterior"), "stdout: {text}");
}

#[test]
fn noisy_control_flow_flags_the_mismatch_variable() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("mock-run.toml");
    run_pipeline(dir.path(), &[]);

    let out = run(&["control", "--config", &config, "--run-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "control failed: {}", stderr_text(&out));
    let control = fs::read_to_string(dir.path().join("control-dataset.jsonl")).unwrap();
    let original = fs::read_to_string(fixtures_dir().join("test.jsonl")).unwrap();
    let pluck = |text: &str, key: &str| -> Vec<String> {
        text.lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()[key].as_str().unwrap().to_string())
            .collect()
    };
    assert_eq!(pluck(&control, "question_id"), pluck(&original, "question_id"));
    let (mut shuffled, mut sorted) = (pluck(&control, "rationale"), pluck(&original, "rationale"));
    assert!(
        shuffled.iter().zip(sorted.iter()).all(|(a, b)| a != b),
        "no question keeps its rationale"
    );
    shuffled.sort();
    sorted.sort();
    assert_eq!(shuffled, sorted, "the rationale multiset is preserved");

    let out = run(&[
        "infer",
        "--config",
        &config,
        "--dataset",
        dir.path().join("control-dataset.jsonl").to_str().unwrap(),
        "--records-out",
        dir.path().join("records-noisy.jsonl").to_str().unwrap(),
        "--mock-script",
        &fixture("replies-noisy.json"),
        "--run-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "noisy infer failed: {}", stderr_text(&out));

    let out =
        run(&["analyze-latents", "--config", &config, "--run-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "analyze failed: {}", stderr_text(&out));
    let analysis: Value =
        serde_json::from_slice(&fs::read(dir.path().join("latent-analysis.json")).unwrap())
            .unwrap();
    assert_eq!(analysis["mismatch_var"], "Z2");
    assert_eq!(analysis["clean_identification"].as_f64(), Some(1.0));
    assert_eq!(analysis["noisy_identification"].as_f64(), Some(1.0));
    let z2 = analysis["variables"]
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["variable"] == "Z2")
        .expect("the mismatch variable is always analyzed");
    assert!(
        z2["noisy_mean"].as_f64().unwrap() < z2["clean_mean"].as_f64().unwrap(),
        "the evidence-fit latent collapses under deranged rationales: {z2}"
    );
    // Within one subset the per-question means are constant, so the
    // correlation is only defined over the pooled subsets.
    assert!(z2["clean_pcc"].is_null() && z2["noisy_pcc"].is_null(), "got {z2}");
    assert!(z2["combined_pcc"].as_f64().unwrap() > 0.8, "got {z2}");
    assert!(
        events(dir.path())
            .iter()
            .any(|e| e["stage"] == "analyze-latents" && e["event"] == "analysis_finished"),
        "the analysis summary is logged"
    );
}

#[test]
fn stagewise_commands_reproduce_the_pipeline_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("mock-run.toml");
    let run_dir = dir.path().to_str().unwrap();
    for args in [
        vec!["infer", "--split", "both"],
        vec!["aggregate", "--split", "dev"],
        vec!["aggregate", "--split", "test"],
        vec!["fit-lambda"],
        vec!["evaluate"],
    ] {
        let mut full = args.clone();
        full.extend_from_slice(&["--config", &config, "--run-dir", run_dir]);
        let out = run(&full);
        assert!(out.status.success(), "{args:?} failed: {}", stderr_text(&out));
    }
    for name in ["report.json", "report.csv", "reliability.svg"] {
        assert_eq!(
            fs::read(dir.path().join(name)).unwrap(),
            fs::read(fixtures_dir().join("golden").join(name)).unwrap(),
            "{name} differs from the golden copy"
        );
    }

    // Explicit file flags feed the same stages and reproduce the same bytes.
    let out = run(&[
        "evaluate",
        "--config",
        &config,
        "--run-dir",
        run_dir,
        "--records",
        dir.path().join("posteriors-test.jsonl").to_str().unwrap(),
        "--fit",
        dir.path().join("fit.json").to_str().unwrap(),
        "--out",
        dir.path().join("r2.json").to_str().unwrap(),
        "--reliability",
        dir.path().join("r2.csv").to_str().unwrap(),
        "--svg",
        dir.path().join("r2.svg").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "evaluate failed: {}", stderr_text(&out));
    assert_eq!(
        fs::read(dir.path().join("r2.json")).unwrap(),
        fs::read(dir.path().join("report.json")).unwrap()
    );

    // Aggregation with a fit artifact adds the posterior at the fitted λ.
    let out = run(&[
        "aggregate",
        "--config",
        &config,
        "--run-dir",
        run_dir,
        "--records",
        dir.path().join("records-test.jsonl").to_str().unwrap(),
        "--dataset",
        &fixture("test.jsonl"),
        "--fit",
        dir.path().join("fit.json").to_str().unwrap(),
        "--out",
        dir.path().join("p2.jsonl").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "aggregate failed: {}", stderr_text(&out));
    for line in fs::read_to_string(dir.path().join("p2.jsonl")).unwrap().lines() {
        let row: Value = serde_json::from_str(line).unwrap();
        assert_eq!(row["lambda"].as_f64(), Some(1.0));
        let posterior: f64 =
            row["posterior"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((posterior - 1.0).abs() < 1e-12, "posterior sums to one: {row}");
    }
}

#[test]
fn locked_run_directories_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.lock"), "12345\n").unwrap();
    let out = run(&[
        "pipeline",
        "--config",
        &fixture("mock-run.toml"),
        "--run-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr_text(&out));
    assert!(stderr_text(&out).contains("locked"), "stderr: {}", stderr_text(&out));
    assert!(dir.path().join("run.lock").exists(), "a foreign lock is never deleted");
}
