use std::path::{Path, PathBuf};
use std::process::Command;

use tokenlab::cli::{dispatch, RunConfig};
use tokenlab::model::Checkpoint;
use tokenlab::objectives::shard::Shard;
use tokenlab::trainer::plot::read_metrics;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tokenlab"))
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["tokenlab"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus, vocabulary and packed corpus under `root`.
fn prepare(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = root.join("data");
    assert_eq!(run(&["generate-corpus", "--out", s(&data), "--bytes", "20000", "--seed", "3"]), 0);
    let corpus = data.join("corpus.txt");
    let tok = root.join("tok");
    assert_eq!(run(&["train-tokenizer", "--corpus", s(&corpus), "--vocab-size", "320", "--out", s(&tok)]), 0);
    let vocab = tok.join("vocab.txt");
    let packed = root.join("packed");
    assert_eq!(run(&["pack", "--corpus", s(&corpus), "--vocab", s(&vocab), "--max-len", "24", "--out", s(&packed)]), 0);
    (corpus, vocab, packed.join("corpus.bin"))
}

const SMALL: [&str; 12] =
    ["--layers", "1", "--heads", "2", "--d-hidden", "16", "--d-ff", "32", "--batch-size", "4", "--log-every", "0"];

fn pretrain(corpus: &Path, vocab: &Path, out: &Path, seed: &str, extra: &[&str]) -> i32 {
    let mut args = vec![
        "pretrain",
        "--objective",
        "shuffle_random",
        "--preset",
        "tiny-small",
        "--corpus",
        s(corpus),
        "--vocab",
        s(vocab),
        "--max-len",
        "24",
        "--seed",
        seed,
        "--deterministic",
        "--out",
        s(out),
    ];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn missing_corpus_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["pretrain", "--objective", "mlm", "--corpus", "/no/such/corpus.txt", "--steps", "5", "--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn bad_invocations_have_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "a b c\n").unwrap();
    let err = |args: &[&str]| {
        let o = bin().args(args).output().unwrap();
        assert!(!o.status.success());
        String::from_utf8(o.stderr).unwrap()
    };
    let o = s(&dir.path().join("o")).to_string();
    assert!(err(&["pretrain", "--objective", "nsp", "--corpus", s(&corpus), "--steps", "2", "--out", &o])
        .starts_with("error[objective]"));
    assert!(err(&["pretrain", "--objective", "mlm", "--corpus", s(&corpus), "--out", &o]).starts_with("error[config]"));
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "objective = \"mlm\"\nlearning_rate = 1\n").unwrap();
    assert!(err(&["pretrain", "--config", s(&cfg)]).starts_with("error[config]"));
    assert!(err(&["frobnicate"]).starts_with("error[usage]"));
    let help = bin().args(["pretrain", "--help"]).output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    for flag in ["--objective", "--preset", "--steps", "--warmup-steps", "--grad-clip", "--workers", "--seed"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn same_seed_gives_identical_outputs_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, vocab, packed) = prepare(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let extra = ["--steps", "12", "--warmup-steps", "2", "--checkpoint-every", "6", "--lr-multiplier", "20"];
    assert_eq!(pretrain(&packed, &vocab, &a, "9", &extra), 0);
    assert_eq!(pretrain(&packed, &vocab, &b, "9", &extra), 0);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "metrics.csv"), read(&b, "metrics.csv"));
    for f in ["checkpoints/step-00000006.ckpt", "checkpoints/step-00000012.ckpt"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_eq!(read_metrics(&a.join("metrics.csv")).unwrap().len(), 12);

    // The resolved config reproduces the run on its own.
    let c = dir.path().join("c");
    let rc = RunConfig::load(&a.join("config.toml")).unwrap();
    let mut rc2 = rc.clone();
    rc2.out = Some(c.clone());
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, rc2.to_toml()).unwrap();
    assert_eq!(run(&["pretrain", "--config", s(&cfg), "--log-every", "0"]), 0);
    assert_eq!(read(&a, "checkpoints/step-00000012.ckpt"), read(&c, "checkpoints/step-00000012.ckpt"));

    // Resuming from the midpoint into a fresh directory ends at the same bytes.
    let r = dir.path().join("r");
    let mid = a.join("checkpoints/step-00000006.ckpt");
    let mut args = extra.to_vec();
    args.extend_from_slice(&["--resume", s(&mid)]);
    assert_eq!(pretrain(&packed, &vocab, &r, "9", &args), 0);
    assert_eq!(read(&a, "checkpoints/step-00000012.ckpt"), read(&r, "checkpoints/step-00000012.ckpt"));
    let tail = read_metrics(&r.join("metrics.csv")).unwrap();
    let full = read_metrics(&a.join("metrics.csv")).unwrap();
    assert_eq!(tail, full[6..].to_vec());

    // A different seed changes the run.
    let d = dir.path().join("d");
    assert_eq!(pretrain(&packed, &vocab, &d, "10", &extra), 0);
    assert_ne!(read(&a, "metrics.csv"), read(&d, "metrics.csv"));

    // Text corpus without a vocabulary trains one into the run directory.
    let t = dir.path().join("t");
    let mut args = vec![
        "pretrain", "--objective", "token_type", "--corpus", s(&corpus), "--vocab-size", "300", "--max-len", "16",
        "--steps", "3", "--out", s(&t),
    ];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    assert!(t.join("vocab.txt").is_file());
    let ck = Checkpoint::load(&t.join("checkpoints/step-00000003.ckpt")).unwrap();
    assert_eq!(ck.config.head_classes, 4);
}

#[test]
fn downstream_commands_write_only_into_out() {
    let dir = tempfile::tempdir().unwrap();
    let (_, vocab, packed) = prepare(dir.path());
    let runs = dir.path().join("runs");
    for obj in ["mlm", "shuffle"] {
        let out = runs.join(obj);
        let mut args = vec![
            "pretrain", "--objective", obj, "--preset", "tiny-small", "--corpus", s(&packed), "--vocab", s(&vocab),
            "--max-len", "48", "--steps", "4", "--out", s(&out),
        ];
        args.extend_from_slice(&SMALL);
        assert_eq!(run(&args), 0);
    }
    let before: Vec<_> = walk(dir.path());

    let inspect = dir.path().join("inspect");
    let args = [
        "inspect-batch", "--objective", "shuffle_random", "--corpus", s(&packed), "--vocab", s(&vocab), "--max-len",
        "24", "--batch-size", "3", "--export", "--out", s(&inspect),
    ];
    assert_eq!(run(&args), 0);
    let shard = Shard::load(&inspect.join("batch.shard")).unwrap();
    assert_eq!(shard.rows.len(), 3);
    assert!(std::fs::read_to_string(inspect.join("batch.txt")).unwrap().contains("row 0"));

    let probe = [
        "--n-train", "24", "--n-dev", "16", "--seeds", "2", "--epochs-max", "1", "--lr-multiplier", "10",
    ];
    let ft = dir.path().join("ft");
    let ck = runs.join("mlm/checkpoints/step-00000004.ckpt");
    let mut args = vec!["finetune", "--checkpoint", s(&ck), "--vocab", s(&vocab), "--out", s(&ft)];
    args.extend_from_slice(&probe);
    assert_eq!(run(&args), 0);
    let csv = std::fs::read_to_string(ft.join("finetune.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(ft.join("task.tsv").is_file() && ft.join("summary.txt").is_file());

    let cmp = dir.path().join("cmp");
    let mut args =
        vec!["compare", "--checkpoints", s(&runs), "--vocab", s(&vocab), "--include-random-init", "--out", s(&cmp)];
    args.extend_from_slice(&probe);
    assert_eq!(run(&args), 0);
    let ranking = std::fs::read_to_string(cmp.join("ranking.csv")).unwrap();
    assert_eq!(ranking.lines().count(), 4);
    for name in ["mlm", "shuffle", "random_init"] {
        assert!(ranking.lines().any(|l| l.starts_with(&format!("{name},"))), "{ranking}");
    }

    let svg = dir.path().join("plots/loss.svg");
    let (m1, m2) = (runs.join("mlm/metrics.csv"), runs.join("shuffle/metrics.csv"));
    let args = [
        "plot",
        "--metrics",
        s(&m1),
        s(&m2),
        "--smooth",
        "2",
        "--out",
        s(&svg),
    ];
    assert_eq!(run(&args), 0);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("polyline"));

    let after = walk(dir.path());
    let new: Vec<_> = after.iter().filter(|p| !before.contains(p)).collect();
    for p in new {
        assert!(
            [&inspect, &ft, &cmp, &dir.path().join("plots")].iter().any(|o| p.starts_with(o)),
            "unexpected file {}",
            p.display()
        );
    }
}

fn walk(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out
}
