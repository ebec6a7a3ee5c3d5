use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
seed = 4

[data]
train_utterances = 40
heldout_utterances = 30
lexical_pairs = 10
syntactic_pairs = 10
consistency_pairs = 5

[model]
d_model = 16
n_layers = 1
n_heads = 2
cfm_hidden = 16
cfm_blocks = 1
time_embed_dim = 8

[train]
steps = 4
warmup_steps = 1
batch_utterances = 8
log_every = 1

[generation]
max_frames = 6
solver = { method = "midpoint", nfe = 4 }

[eval]
prompts = 3
continuations_per_prompt = 2

[ablation]
replicates = 1
grid = { input_modes = ["token", "vector"], k_values = [1], cfm_enabled = [false] }
"#;

fn tokflow(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tokflow"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: std::process::Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.toml"), TINY).unwrap();
    let made = ok(tokflow(d.path(), &["make-data"]));
    assert!(made.contains("train_utterances: 40"));
    ok(tokflow(d.path(), &["train", "--plot"]));
    let svg = std::fs::read_to_string(d.path().join("out/train/loss.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    let generated = ok(tokflow(d.path(), &["generate"]));
    assert!(generated.starts_with("6 continuations"));
    let eval = ok(tokflow(d.path(), &["eval"]));
    assert!(eval.contains("lexical_acc") && eval.contains("gen_ppl"));
    let table = ok(tokflow(d.path(), &["ablate", "--plot"]));
    assert_eq!(table.lines().count(), 3);
    assert!(d.path().join("out/ablate/ablation.svg").exists());
    let resolved = std::fs::read_to_string(d.path().join("out/train/config.resolved.toml")).unwrap();
    assert!(resolved.contains("steps = 4") && resolved.contains("lr_peak"));
}

#[test]
fn failures_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.toml"), TINY).unwrap();
    // no data yet
    let out = tokflow(d.path(), &["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
    std::fs::write(d.path().join("run.toml"), "[grammar]\nvocab_size = 1\n").unwrap();
    assert!(!tokflow(d.path(), &["make-data"]).status.success());
    std::fs::write(d.path().join("run.toml"), "no_such_section = 3\n").unwrap();
    assert!(!tokflow(d.path(), &["config"]).status.success());
}

#[test]
fn seed_flag_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.toml"), TINY).unwrap();
    let a = ok(tokflow(d.path(), &["config"]));
    let b = ok(tokflow(d.path(), &["config", "--seed", "5"]));
    assert!(a.contains("seed = 4") && b.contains("seed = 5"));
    assert_ne!(a, b);
}
