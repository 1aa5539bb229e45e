//! The `genicl` binary end to end on a shrunken synthetic task.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genicl::eval::EvalReport;
use genicl::runtime::RunManifest;
use genicl::selector::SelectionManifest;

const SMALL: &str = r#"
[synth]
pool_size = 40
query_count = 12
test_count = 10

[synthetic_corpus]
lines = 200

[pretrain]
batch_size = 4
max_eval_lines = 10

[train]
steps = 2
batch_size = 4
shortlist_n = 8

[select]
shortlist_n = 16

[analysis]
sample_n = 5
order_seeds = [0]

[contrastive]
epochs = 2
shortlist_n = 8

[ablation]
seeds = [0]
"#;

fn genicl(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genicl"))
        .args(args)
        .env("GENICL_CACHE_DIR", cache)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cache: &Path) -> Output {
    let out = genicl(args, cache);
    assert!(
        out.status.success(),
        "genicl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
    task: String,
    pretrained: String,
    cache: PathBuf,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("small.toml");
        std::fs::write(&config, SMALL).unwrap();
        let cache = root.join("cache");
        let config = config.display().to_string();
        let data = root.join("data").display().to_string();
        ok(&["synth", "--config", &config, "--out", &data], &cache);
        let pre = root.join("pre").display().to_string();
        ok(&["pretrain", "--config", &config, "--steps", "5", "--out", &pre], &cache);
        Setup {
            task: format!("{data}/task.toml"),
            pretrained: format!("{pre}/model.ckpt"),
            _dir: dir,
            root,
            config,
            cache,
        }
    }

    fn out(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![cmd, "--config", &self.config, "--task", &self.task, "--out", out];
        args.extend_from_slice(extra);
        genicl(&args, &self.cache)
    }
}

#[test]
fn pipeline_commands_and_artifacts() {
    let s = Setup::new();
    for f in ["pool.jsonl", "queries.jsonl", "test.jsonl", "task.toml", "codes.json", "corpus.txt"] {
        assert!(s.root.join("data").join(f).exists(), "{f}");
    }

    // Zero training steps leave the checkpoint as it was.
    let t0 = s.out("t0");
    assert!(s.run("train", &t0, &["--checkpoint", &s.pretrained, "--steps", "0"]).status.success());
    assert_eq!(std::fs::read(format!("{t0}/model.ckpt")).unwrap(), std::fs::read(&s.pretrained).unwrap());

    let tr = s.out("train");
    let out = s.run("train", &tr, &["--checkpoint", &s.pretrained]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trained = format!("{tr}/model.ckpt");
    assert!(Path::new(&format!("{tr}/train_log.jsonl")).exists());
    assert!(s.root.join("cache/scores.jsonl").exists());

    let zs = s.out("zs");
    let out = s.run("eval", &zs, &["--checkpoint", &trained, "--selector", "zero_shot", "--k", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = EvalReport::read(format!("{zs}/report.json")).unwrap();
    assert_eq!(report.records.len(), 10);
    assert!(report.records.iter().all(|r| r.demo_ids.is_empty()));

    for cmd in ["score", "pairs"] {
        let o = s.out(cmd);
        assert!(s.run(cmd, &o, &["--checkpoint", &s.pretrained]).status.success(), "{cmd}");
    }
    assert!(s.root.join("score/scores.jsonl").exists());
    assert!(s.root.join("pairs/preferences.jsonl").exists());

    let sel = s.out("sel");
    assert!(s.run("select", &sel, &["--checkpoint", &trained, "--k", "3"]).status.success());
    let m = SelectionManifest::read(format!("{sel}/selection.json")).unwrap();
    assert!(m.selections.iter().all(|x| x.demo_ids.len() == 3));

    let an = s.out("an");
    let out = s.run("analyze", &an, &["--checkpoint", &trained, "--k", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["ground_truth.json", "ground_truth.tsv", "order.json", "order.tsv", "useful_ratio.json", "contrastive.json"] {
        assert!(Path::new(&an).join(f).exists(), "{f}");
    }

    let ab = s.out("ab");
    let out = s.run("ablate", &ab, &["--checkpoint", &s.pretrained, "--k", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = std::fs::read_to_string(format!("{ab}/ablation.tsv")).unwrap();
    for v in ["full", "no_nonpreferred", "no_answer_loss", "no_demo_loss"] {
        assert!(tsv.contains(v), "{v}");
    }

    let rep = s.out("rep");
    let zs_report = format!("{zs}/report.json");
    let out = ok(&["report", "--out", &rep, &zs_report], &s.cache);
    assert!(String::from_utf8_lossy(&out.stdout).contains("zero_shot"));

    let manifests = RunManifest::read_all(&tr).unwrap();
    assert_eq!(manifests.len(), 1);
    assert_eq!(manifests[0].command, "train");
    assert!(manifests[0].input_hashes.contains_key("checkpoint"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let s = Setup::new();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let tr = s.out(&format!("train_{name}"));
        // Separate caches so the second run recomputes every score.
        let cache = s.root.join(format!("cache_{name}"));
        let mut args = vec!["train", "--config", &s.config, "--task", &s.task, "--out", &tr];
        args.extend(["--checkpoint", &s.pretrained]);
        ok(&args, &cache);
        let ev = s.out(&format!("eval_{name}"));
        let ckpt = format!("{tr}/model.ckpt");
        ok(
            &["eval", "--config", &s.config, "--task", &s.task, "--out", &ev, "--checkpoint", &ckpt],
            &cache,
        );
        reports.push((
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(format!("{ev}/report.json")).unwrap(),
            std::fs::read(format!("{ev}/selection.json")).unwrap(),
        ));
    }
    assert!(reports[0] == reports[1]);
}

/// The JSON error object, printed last on stderr.
fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = genicl(&["eval", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = genicl(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_errors_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o").display().to_string();
    let out = genicl(&["eval", "--out", &out_dir], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = error_line(&out);
    assert_eq!(err["error"], "validation");

    let missing = dir.path().join("missing.toml").display().to_string();
    let out = genicl(&["eval", "--out", &out_dir, "--task", &missing], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = error_line(&out);
    assert_eq!(err["error"], "io");
}

#[test]
fn unknown_selector_is_a_config_error() {
    let s = Setup::new();
    let o = s.out("x");
    let out = s.run("eval", &o, &["--checkpoint", &s.pretrained, "--selector", "oracle"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = error_line(&out);
    assert_eq!(err["error"], "config");
}
