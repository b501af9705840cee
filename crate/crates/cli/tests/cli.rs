//! End-to-end tests of the command-line interface: happy path, exit codes
//! and output formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hekp4nbr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, contents).unwrap();
        p
    }
}

const SPEC: &str = "n_users=24\nn_items=15\nn_baskets_per_user=5\nn_patterns=3\n\
                    pattern_size=4\nnoise_rate=0.1\nkg_attrs_per_item=1\nseed=7\n";

const CONFIG: &str = "epochs=2\nbatch_size=8\nd_model=16\nn_enc_layers=1\nn_dec_layers=1\n\
                      n_heads=2\nffn_mult=2\nd2=8\nd3=4\nn_experts=2\nk_topk=4\nbeam_width=4\n\
                      n_hops=2\ntoken_budget=160\nmax_tokens=160\ndropout=0.0\n\
                      lr_backbone=0.001\nlr_overhead=0.003\nworkers=1\nseed=7\n";

fn synth_into(ws: &Workspace) -> (PathBuf, PathBuf) {
    let spec = ws.write("spec.txt", SPEC);
    let events = ws.path("events.tsv");
    let kg = ws.path("kg.tsv");
    let out = run(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out-events",
        events.to_str().unwrap(),
        "--out-kg",
        kg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "synth failed: {out:?}");
    (events, kg)
}

fn train_into(ws: &Workspace, events: &Path, kg: &Path, extra_cfg: &str) -> (PathBuf, String) {
    let cfg = ws.write("config.txt", &format!("{CONFIG}{extra_cfg}"));
    let ckpt = ws.path("model.ckpt");
    let out = run(&[
        "train",
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {out:?}");
    (ckpt, stdout(&out))
}

#[test]
fn full_pipeline_succeeds_with_exit_zero() {
    let ws = Workspace::new();
    let (events, kg) = synth_into(&ws);
    let (ckpt, log) = train_into(&ws, &events, &kg, "");

    // one JSON object per line: a header then one entry per epoch
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["event"], "start");
    for line in &lines[1..] {
        let entry: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(entry["l_plm"].is_f64());
        assert!(entry["val_hr5"].is_f64());
    }

    let report_path = ws.path("report.json");
    let out = run(&[
        "evaluate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--k",
        "3,5",
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "evaluate failed: {out:?}");
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(report["per_k"]["3"]["ndcg"].is_f64());
    assert!(report["per_k"]["5"]["hr"].is_f64());
    assert_eq!(
        std::fs::read_to_string(&report_path).unwrap().trim(),
        stdout(&out).trim()
    );

    let out = run(&[
        "recommend",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--user",
        "u00",
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--n",
        "4",
    ]);
    assert!(out.status.success(), "recommend failed: {out:?}");
    let lines: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    for (ix, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 3, "rank\\titem\\tscore");
        assert_eq!(fields[0], (ix + 1).to_string());
        assert!(fields[1].starts_with('i'));
        fields[2].parse::<f64>().unwrap();
    }

    // with --exclude-seen, none of u00's historical items may appear
    let seen: std::collections::BTreeSet<String> = std::fs::read_to_string(&events)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("u00\t"))
        .map(|l| l.rsplit('\t').next().unwrap().to_string())
        .collect();
    let out = run(&[
        "recommend",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--user",
        "u00",
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--n",
        "3",
        "--exclude-seen",
    ]);
    assert!(out.status.success(), "exclude-seen failed: {out:?}");
    for line in stdout(&out).lines() {
        let item = line.split('\t').nth(1).unwrap();
        assert!(!seen.contains(item), "recommended already-seen {item}");
    }
}

#[test]
fn identical_config_and_seed_reproduce_checkpoint_and_report() {
    let ws = Workspace::new();
    let (events, kg) = synth_into(&ws);
    let (ckpt_a, _) = train_into(&ws, &events, &kg, "");
    let bytes_a = std::fs::read(&ckpt_a).unwrap();
    std::fs::remove_file(&ckpt_a).unwrap();
    let (ckpt_b, _) = train_into(&ws, &events, &kg, "");
    let bytes_b = std::fs::read(&ckpt_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "checkpoint bytes differ across runs");

    let eval = |tag: &str| {
        let out = run(&[
            "evaluate",
            "--ckpt",
            ckpt_b.to_str().unwrap(),
            "--events",
            events.to_str().unwrap(),
            "--kg",
            kg.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{tag}: {out:?}");
        stdout(&out)
    };
    assert_eq!(eval("first"), eval("second"));
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    // help is not an error
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn missing_checkpoint_exits_two_and_names_the_path() {
    let ws = Workspace::new();
    let (events, kg) = synth_into(&ws);
    let out = run(&[
        "evaluate",
        "--ckpt",
        "/nonexistent/model.ckpt",
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/model.ckpt"), "{err}");
}

#[test]
fn malformed_events_exit_two_with_line_number() {
    let ws = Workspace::new();
    let (_, kg) = synth_into(&ws);
    let bad = ws.write("bad.tsv", "u1\t0\ta\nu1\tnot_a_number\tb\n");
    let cfg = ws.write("config.txt", CONFIG);
    let out = run(&[
        "train",
        "--events",
        bad.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ws.path("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":2"), "line number missing: {err}");
}

#[test]
fn unknown_config_key_exits_two_and_names_the_key() {
    let ws = Workspace::new();
    let (events, kg) = synth_into(&ws);
    let cfg = ws.write("config.txt", "bogus_key=1\n");
    let out = run(&[
        "train",
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ws.path("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn no_ktp_ablation_is_echoed_in_the_start_header() {
    let ws = Workspace::new();
    let (events, kg) = synth_into(&ws);
    let (_, log) = train_into(&ws, &events, &kg, "ablate.no_ktp=true\n");
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["ktp_mode"], "empty-KTP");
    assert_eq!(header["no_ktp"], "true");
}

#[test]
fn custom_templates_are_carried_into_the_checkpoint() {
    let ws = Workspace::new();
    let (events, kg) = synth_into(&ws);
    let tpl = ws.write(
        "templates.tsv",
        "0\theader\tShopper completed {n} trips.\n\
         0\tbasket\tTrip {basket_index} held {items}.\n\
         0\tlast\tTrip {basket_index} should hold {masks}\n",
    );
    let cfg = ws.write("config.txt", CONFIG);
    let ckpt = ws.path("custom.ckpt");
    let out = run(&[
        "train",
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--templates",
        tpl.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train with templates failed: {out:?}");

    // different wording reaches the vocabulary, so the bytes must differ
    // from a default-template run
    let (default_ckpt, _) = train_into(&ws, &events, &kg, "");
    assert_ne!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(&default_ckpt).unwrap()
    );

    // evaluation renders with the stored templates and succeeds
    let out = run(&[
        "evaluate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--k",
        "3",
    ]);
    assert!(out.status.success(), "evaluate failed: {out:?}");
}

#[test]
fn dump_similarity_writes_square_matrices() {
    let ws = Workspace::new();
    let (events, kg) = synth_into(&ws);
    let cfg = ws.write("config.txt", CONFIG);
    let prefix = ws.path("sim");
    let out = run(&[
        "train",
        "--events",
        events.to_str().unwrap(),
        "--kg",
        kg.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ws.path("m.ckpt").to_str().unwrap(),
        "--dump-similarity",
        prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // the catalog may shrink under preprocessing; both dumps must be
    // square over the same surviving item set
    let mut dims = Vec::new();
    for suffix in ["pi", "m"] {
        let text =
            std::fs::read_to_string(ws.path(&format!("sim.{suffix}.tsv"))).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert!(rows.len() > 1, "{suffix}: empty dump");
        assert!(
            rows.iter().all(|r| r.split('\t').count() == rows.len()),
            "{suffix}: matrix is not square"
        );
        dims.push(rows.len());
    }
    assert_eq!(dims[0], dims[1]);
}
