use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn finemoe(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finemoe"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const MODEL: &str = r#"{"n_layers":2,"d_model":16,"d_ffn":32,"n_q_heads":2,"n_kv_heads":1,"d_head":8,"vocab_size":259,"ffn_kind":"dense"}"#;
const PLAN: &str = r#"{"d_expert":8,"n_slices":4,"n_total_experts":8,"replication":2,"scale_mode":"forward_multiplier","lambda":1.5874010519681994,"drop_ratio":0.5,"seed":0,"top_k":4}"#;
const RUN: &str = r#"{"train":{"seq_len":16,"batch_size":2,"schedule":{"warmup_tokens":64,"stages":[{"token_budget":100000,"start_lr":0.003,"end_lr":0.0003,"decay":"linear"}]}},"sources":{"en":"en.txt"}}"#;
const ATLAS: &str = r#"{"sources":{"en":"en.txt","zz":"zz.txt"}}"#;

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("model.json"), MODEL).unwrap();
    std::fs::write(p.join("plan.json"), PLAN).unwrap();
    std::fs::write(p.join("run.json"), RUN).unwrap();
    std::fs::write(p.join("atlas.json"), ATLAS).unwrap();
    let en: Vec<String> = (0..40).map(|i| format!("the cat number {i} sat on the mat")).collect();
    let zz: Vec<String> = (0..40).map(|i| format!("qzx{i} vvk jjq zzx kqv")).collect();
    std::fs::write(p.join("en.txt"), en.join("\n")).unwrap();
    std::fs::write(p.join("zz.txt"), zz.join("\n")).unwrap();
    dir
}

fn bytes(path: PathBuf) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn pipeline_is_deterministic() {
    let dir = workspace();
    let p = dir.path();
    for tag in ["a", "b"] {
        ok(&finemoe(&["init-dense", "--config", "model.json", "--seed", "7", "--out", &format!("d{tag}.ckpt")], p));
        ok(&finemoe(
            &["train", "--in", &format!("d{tag}.ckpt"), "--config", "run.json", "--steps", "3", "--seed", "1", "--out", &format!("t{tag}.ckpt")],
            p,
        ));
        ok(&finemoe(&["upcycle", "--in", &format!("t{tag}.ckpt"), "--plan", "plan.json", "--out", &format!("p{tag}.ckpt")], p));
        ok(&finemoe(
            &["expand", "--in", &format!("p{tag}.ckpt"), "--plan", "plan.json", "--seed", "3", "--out", &format!("e{tag}.ckpt")],
            p,
        ));
    }
    for stem in ["d", "t", "p", "e"] {
        assert_eq!(bytes(p.join(format!("{stem}a.ckpt"))), bytes(p.join(format!("{stem}b.ckpt"))), "{stem}");
    }
    assert_eq!(bytes(p.join("ta.ckpt.metrics.csv")), bytes(p.join("tb.ckpt.metrics.csv")));
}

#[test]
fn verify_equivalence_exit_codes() {
    let dir = workspace();
    let p = dir.path();
    ok(&finemoe(&["init-dense", "--config", "model.json", "--seed", "1", "--out", "d.ckpt"], p));
    ok(&finemoe(&["upcycle", "--in", "d.ckpt", "--plan", "plan.json", "--out", "p.ckpt"], p));
    let out = finemoe(&["verify-equivalence", "--dense", "d.ckpt", "--moe", "p.ckpt", "--probes", "3", "--seed", "0"], p);
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);

    // Weight scaling is inexact under SiLU; the residual is reported and fails the check.
    ok(&finemoe(&["upcycle", "--in", "d.ckpt", "--plan", "plan.json", "--scale-mode", "weight", "--out", "w.ckpt"], p));
    let out = finemoe(&["verify-equivalence", "--dense", "d.ckpt", "--moe", "w.ckpt", "--probes", "3", "--seed", "0"], p);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["logits_max_abs"].as_f64().unwrap() > 0.0);

    // Under ReLU it is exact.
    std::fs::write(p.join("relu.json"), MODEL.replace(r#""ffn_kind""#, r#""activation":"relu","ffn_kind""#)).unwrap();
    ok(&finemoe(&["init-dense", "--config", "relu.json", "--seed", "1", "--precision", "f64", "--out", "r.ckpt"], p));
    ok(&finemoe(&["upcycle", "--in", "r.ckpt", "--plan", "plan.json", "--scale-mode", "weight", "--out", "rw.ckpt"], p));
    ok(&finemoe(&["verify-equivalence", "--dense", "r.ckpt", "--moe", "rw.ckpt", "--probes", "3", "--seed", "0"], p));

    // A differently seeded dense model is not equivalent.
    ok(&finemoe(&["init-dense", "--config", "model.json", "--seed", "2", "--out", "other.ckpt"], p));
    let out = finemoe(&["verify-equivalence", "--dense", "other.ckpt", "--moe", "p.ckpt", "--probes", "3", "--seed", "0"], p);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mixture_plan_reports_four_stages() {
    let dir = workspace();
    let schedule = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/curriculum_mixture.json");
    let out = finemoe(&["mixture-plan", "--schedule", schedule.to_str().unwrap(), "--tokens", "5.1e12"], dir.path());
    ok(&out);
    let spans: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let spans = spans.as_array().unwrap();
    assert_eq!(spans.len(), 4);
    assert_eq!(spans[1]["start_tokens"], 2.4e12);
    assert_eq!(spans[3]["end_tokens"], 5.1e12);
}

#[test]
fn atlas_and_route_log_write_outputs() {
    let dir = workspace();
    let p = dir.path();
    ok(&finemoe(&["init-dense", "--config", "model.json", "--seed", "1", "--out", "d.ckpt"], p));
    ok(&finemoe(&["upcycle", "--in", "d.ckpt", "--plan", "plan.json", "--out", "p.ckpt"], p));
    ok(&finemoe(&["expand", "--in", "p.ckpt", "--plan", "plan.json", "--seed", "3", "--out", "e.ckpt"], p));
    ok(&finemoe(&["route-log", "--in", "e.ckpt", "--corpus", "en.txt", "--seed", "0", "--docs", "4", "--out", "r.jsonl"], p));
    let log = std::fs::read_to_string(p.join("r.jsonl")).unwrap();
    assert!(log.lines().count() > 0);
    ok(&finemoe(&["atlas", "--in", "e.ckpt", "--config", "atlas.json", "--seed", "0", "--docs", "10", "--out", "atlas"], p));
    for f in ["signatures.json", "correlation.csv", "dendrogram.nwk"] {
        assert!(p.join("atlas").join(f).is_file(), "{f}");
    }
    let tree = std::fs::read_to_string(p.join("atlas/dendrogram.nwk")).unwrap();
    assert!(tree.trim_end().ends_with(":0;"));

    // Routing analysis of a dense checkpoint is misuse, a validation failure.
    let out = finemoe(&["route-log", "--in", "d.ckpt", "--corpus", "en.txt", "--seed", "0", "--out", "x.jsonl"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(!p.join("x.jsonl").exists());
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = workspace();
    let p = dir.path();
    assert_eq!(finemoe(&["no-such-command"], p).status.code(), Some(1));
    assert_eq!(finemoe(&["init-dense", "--seed", "1"], p).status.code(), Some(1));
    assert_eq!(finemoe(&["init-dense", "--config", "missing.json", "--seed", "1", "--out", "d.ckpt"], p).status.code(), Some(1));
    std::fs::write(p.join("bad.json"), "{not json").unwrap();
    assert_eq!(finemoe(&["init-dense", "--config", "bad.json", "--seed", "1", "--out", "d.ckpt"], p).status.code(), Some(1));
    assert_eq!(finemoe(&["--help"], p).status.code(), Some(0));
    assert_eq!(finemoe(&["--version"], p).status.code(), Some(0));
}

#[test]
fn diverging_training_exits_two() {
    let dir = workspace();
    let p = dir.path();
    let run = RUN.replace("0.003", "1e30").replace("0.0003", "1e30");
    std::fs::write(p.join("hot.json"), run).unwrap();
    ok(&finemoe(&["init-dense", "--config", "model.json", "--seed", "1", "--out", "d.ckpt"], p));
    let out = finemoe(&["train", "--in", "d.ckpt", "--config", "hot.json", "--steps", "20", "--seed", "1", "--out", "t.ckpt"], p);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!p.join("t.ckpt").exists());
}
