use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "n_cs = 24\nn_mono_a = 16\nn_mono_b = 16\nn_dev = 4\nn_test = 6\n";
const TINY: [&str; 14] = [
    "--steps", "6", "--batch-size", "4", "--d-model", "8", "--heads", "2", "--d-ff", "16", "--enc-layers", "1", "--dec-layers", "1",
];

fn csattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csattn")).args(args).env_remove("CSATTN_SEED").output().expect("spawn csattn")
}

fn ok(args: &[&str]) -> String {
    let o = csattn(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str) -> PathBuf {
    let conf = dir.join("small.conf");
    std::fs::write(&conf, SMALL).unwrap();
    let out = dir.join(name);
    ok(&["synth", "--out", s(&out), "--seed", "5", "--config", s(&conf)]);
    out
}

fn train(data: &Path, variant: &str, condition: &str, out: &Path) -> String {
    let mut args = vec!["train", "--data", s(data), "--variant", variant, "--condition", condition, "--seed", "3", "--out", s(out)];
    args.extend(TINY);
    ok(&args)
}

#[test]
fn help_on_every_command() {
    for cmd in ["synth", "train", "decode", "score", "grid"] {
        let text = ok(&[cmd, "--help"]);
        assert!(text.contains("Usage"), "{cmd}");
    }
    assert!(ok(&["--help"]).contains("grid"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(csattn(&["synth"]).status.code(), Some(2));
    assert_eq!(csattn(&["train", "--data", "x", "--variant", "fancy", "--condition", "cs", "--out", "y"]).status.code(), Some(2));
    assert_eq!(csattn(&["train", "--data", "x", "--variant", "baseline", "--condition", "mono", "--out", "y"]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let t = tempfile::tempdir().unwrap();
    let o = csattn(&["train", "--data", s(&t.path().join("none")), "--variant", "baseline", "--condition", "cs", "--out", "m"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("none"));
}

#[test]
fn synth_writes_the_file_set_deterministically() {
    let t = tempfile::tempdir().unwrap();
    let a = synth(t.path(), "a");
    let b = synth(t.path(), "b");
    let mut names: Vec<String> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.starts_with("corpus.")).count(), 8);
    assert_eq!(names.iter().filter(|n| n.ends_with(".tsv")).count(), 5);
    assert!(names.contains(&"vocab.txt".to_string()));
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn seed_env_fallback() {
    let t = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = t.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_csattn")).args(["synth", "--out", s(&out)]).env("CSATTN_SEED", seed).output().unwrap();
        assert!(o.status.success());
        std::fs::read_to_string(out.join("test.tsv")).unwrap()
    };
    assert_eq!(run("x", "9"), run("y", "9"));
    assert_ne!(run("x", "9"), run("z", "10"));
}

#[test]
fn train_is_deterministic_and_logs_bank_isolation() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), "data");
    let first = train(&data, "independent", "cs+a", &t.path().join("m1.ckpt"));
    let second = train(&data, "independent", "cs+a", &t.path().join("m2.ckpt"));
    let loss = |out: &str| out.lines().find(|l| l.starts_with("final_loss=")).unwrap().to_string();
    assert_eq!(loss(&first), loss(&second));

    let log = std::fs::read_to_string(t.path().join("m1.ckpt.log")).unwrap();
    let (mut pure_a, mut touched) = (0, 0);
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 5);
        let norm: f64 = f[4].parse().unwrap();
        if f[3] == "mono_a" {
            assert_eq!(norm, 0.0);
            pure_a += 1;
        } else if norm > 0.0 {
            touched += 1;
        }
    }
    assert!(pure_a > 0 && touched > 0, "{log}");

    let log = {
        train(&data, "baseline", "cs", &t.path().join("b.ckpt"));
        std::fs::read_to_string(t.path().join("b.ckpt.log")).unwrap()
    };
    assert!(log.lines().skip(1).all(|l| l.split('\t').nth(3) == Some("train_cs") && l.ends_with("\t-")));
}

#[test]
fn decode_and_score() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), "data");
    let ckpt = t.path().join("m.ckpt");
    train(&data, "shared", "all", &ckpt);
    let test = data.join("test.tsv");
    let hyp = t.path().join("hyp.tsv");
    ok(&["decode", "--ckpt", s(&ckpt), "--manifest", s(&test), "--beam", "3", "--out", s(&hyp)]);
    let lines = std::fs::read_to_string(&hyp).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let vocab = data.join("vocab.txt");
    let report = ok(&["score", "--ref", s(&test), "--hyp", s(&hyp), "--vocab", s(&vocab)]);
    assert!(report.contains("MER="));

    // The reference itself, in decode format, scores zero.
    let perfect: String = std::fs::read_to_string(&test).unwrap().lines().map(|l| format!("{l}\t0.0\n")).collect();
    let p = t.path().join("perfect.tsv");
    std::fs::write(&p, perfect).unwrap();
    let report = ok(&["score", "--ref", s(&test), "--hyp", s(&p), "--vocab", s(&vocab)]);
    assert!(report.lines().any(|l| l == "MER=0.000000"), "{report}");

    // Missing hypotheses are a data error.
    std::fs::write(&p, "").unwrap();
    assert_eq!(csattn(&["score", "--ref", s(&test), "--hyp", s(&p), "--vocab", s(&vocab)]).status.code(), Some(3));

    // Empty manifest: empty output, success.
    let empty = data.join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let out = t.path().join("empty_hyp.tsv");
    ok(&["decode", "--ckpt", s(&ckpt), "--manifest", s(&empty), "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn decode_rejects_mismatched_vocab() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), "data");
    let ckpt = t.path().join("m.ckpt");
    train(&data, "baseline", "cs", &ckpt);
    let conf = t.path().join("other.conf");
    std::fs::write(&conf, format!("{SMALL}a_symbols = 12\n")).unwrap();
    let other = t.path().join("other");
    ok(&["synth", "--out", s(&other), "--config", s(&conf)]);
    let o = csattn(&["decode", "--ckpt", s(&ckpt), "--manifest", s(&other.join("test.tsv")), "--out", s(&t.path().join("h"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocabulary"));
}

#[test]
fn grid_runs_every_cell_and_resumes() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "data");
    let plan = t.path().join("plan.conf");
    std::fs::write(
        &plan,
        "data = data\nout = runs\nvariants = baseline, independent\nconditions = cs, all\nseeds = 1, 2, 3\n\
         steps = 3\nbatch_size = 4\nbeam = 2\nmax_len = 8\nd_model = 8\nheads = 2\nd_ff = 16\nenc_layers = 1\ndec_layers = 1\n",
    )
    .unwrap();
    let out = ok(&["grid", "--plan", s(&plan)]);
    assert!(out.contains("runs=12"));
    assert_eq!(out.lines().filter(|l| l.ends_with(" trained")).count(), 12);
    let summary = std::fs::read_to_string(t.path().join("runs/summary.txt")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    assert!(summary.lines().nth(1).unwrap().starts_with("baseline"));
    let cells = std::fs::read_dir(t.path().join("runs")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(cells, 12);

    let again = ok(&["grid", "--plan", s(&plan)]);
    assert_eq!(again.lines().filter(|l| l.ends_with("skipped (complete)")).count(), 12);
    assert_eq!(std::fs::read_to_string(t.path().join("runs/summary.txt")).unwrap(), summary);
}
