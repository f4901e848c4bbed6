use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ppc_cli::ablate::Variant;
use ppc_cli::commands::{cmd_generate, cmd_pretrain, cmd_train_disc};
use ppc_cli::{ExperimentConfig, Overrides, Session};
use ppc_core::lm::generate_full;

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml")
}

fn session(out: &Path) -> Session {
    let overrides = Overrides {
        seed: None,
        out: Some(out.to_path_buf()),
    };
    Session::new(ExperimentConfig::load(Some(&smoke()), &overrides).unwrap()).unwrap()
}

fn ppc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppc"))
        .args(args)
        .arg("--config")
        .arg(smoke())
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn plain_generation_is_unsteered_decoding() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    cmd_pretrain(&s).unwrap();
    cmd_train_disc(&s).unwrap();
    let topic = s.config.corpus.spec.topic_names()[0].clone();
    let text = cmd_generate(&s, Variant::PlainLm, "<bos>", &topic).unwrap();
    let lm = s.load_lm().unwrap();
    let expected = generate_full(lm.view(), &[ppc_core::corpus::BOS_ID], &s.resolved.decode).unwrap();
    assert_eq!(text, s.data.vocab.detokenize(&expected).unwrap());

    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("generation.json")).unwrap()).unwrap();
    assert_eq!(record["config_hash"], s.config.hash());
    let tokens: Vec<u32> = serde_json::from_value(record["tokens"].clone()).unwrap();
    assert_eq!(tokens, expected);
}

#[test]
fn ablation_table_has_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppc(&["ablate"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "Model,Perplexity,Topic,Dist1,Dist2,Dist3");
    assert_eq!(lines.len(), 1 + Variant::ALL.len());
    for (line, v) in lines[1..].iter().zip(Variant::ALL) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], v.name());
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    let overrides = Overrides {
        seed: None,
        out: Some(dir.path().to_path_buf()),
    };
    let cfg = ExperimentConfig::load(Some(&smoke()), &overrides).unwrap();
    assert_eq!(json["config_hash"], cfg.hash());
}

#[test]
fn failures_print_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppc(&["evaluate", "--variant", "plain-lm"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(line["error"], "io");
    assert!(line["message"].as_str().unwrap().contains("lm.ppck"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[steer]\nm = 5\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ppc"))
        .args(["pretrain", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let line: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(line["error"], "config");
}

#[test]
fn unknown_target_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let err = cmd_generate(&s, Variant::PlainLm, "<bos>", "no-such-topic").unwrap_err();
    assert!(format!("{err:#}").contains("unknown target"));
}
