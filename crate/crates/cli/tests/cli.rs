use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn docnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docnmt")).args(args).output().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    path(dir, name)
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(docnmt(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(docnmt(&["translate", "--passes", "many"]).status.code(), Some(1));
    assert_eq!(docnmt(&["evaluate", "rouge"]).status.code(), Some(1));
    assert_eq!(docnmt(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_two_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let src = write(d, "a.src", "x y\n\nz\n");
    let tgt = write(d, "a.tgt", "x y\nq\nz\n");
    let o = docnmt(&["build-vocab", "--src", &src, "--tgt", &tgt, "--out", &path(d, "o")]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("a.src:2") || stderr(&o).contains("a.tgt:2"), "{}", stderr(&o));

    let cfg = write(d, "c.cfg", "min_freq = 1\nbeam = 3\n");
    let o = docnmt(&["build-vocab", "--config", &cfg, "--src", &src, "--tgt", &tgt]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.cfg:2"), "{}", stderr(&o));

    let o = docnmt(&["evaluate", "bleu", "--cand", &path(d, "missing.txt"), "--ref", &tgt, "--out", &path(d, "o")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "gen.cfg", "# small corpus\nn-docs = 2\nsentences_per_doc = 3\nname = small\nseed = 4\n");
    let o = docnmt(&["gen-synthetic", "--config", &cfg, "--out", &path(d, "a"), "--n-docs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("a/small.src")).unwrap();
    assert_eq!(text.split("\n\n").count(), 3);
    assert_eq!(text.trim_end().split("\n\n").next().unwrap().lines().count(), 3);
    let manifest = std::fs::read_to_string(d.join("a/gen-synthetic.manifest")).unwrap();
    assert!(manifest.contains("\nseed 4\n"), "{manifest}");

    let o = docnmt(&["gen-synthetic", "--config", &cfg, "--out", &path(d, "b"), "--n-docs", "3", "--seed", "9"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(d.join("b/small.src")).unwrap(), text.as_bytes());
}

#[test]
fn manifest_hashes_match_the_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "o");
    assert!(docnmt(&["gen-synthetic", "--n-docs", "4", "--out", &out]).status.success());
    let manifest = std::fs::read_to_string(dir.path().join("o/gen-synthetic.manifest")).unwrap();
    let outputs: Vec<&str> = manifest.lines().filter(|l| l.starts_with("output ")).collect();
    assert_eq!(outputs.len(), 2);
    for line in outputs {
        let f: Vec<&str> = line.split(' ').collect();
        let bytes = std::fs::read(dir.path().join("o").join(f[3])).unwrap();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
        assert_eq!(f[1], hex::encode(h.finalize()));
        assert_eq!(f[2], bytes.len().to_string());
    }
}

#[test]
fn evaluate_scores_text_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = path(d, "o");
    let cand = write(d, "cand.txt", "the the the the the the the\n");
    let reference = write(d, "ref.txt", "the cat is on the mat\n");
    let o = docnmt(&["evaluate", "bleu1", "--cand", &cand, "--ref", &reference, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with(&format!("bleu1\t{:.6}\n", 100.0 * 2.0 / 7.0)), "{text}");
    assert_eq!(std::fs::read_to_string(d.join("o/eval-bleu1.txt")).unwrap(), text);

    let src = write(d, "src.txt", "a x b\nc x\n\nx d\n");
    let cons = write(d, "c.txt", "A X1 B\nC X1\n\nX2 D\n");
    let o = docnmt(&["evaluate", "consistency", "--src", &src, "--cand", &cons, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "consistency\t1.000000\t1/1\n");

    let o = docnmt(&[
        "evaluate",
        "significance",
        "--cand",
        &cand,
        "--cand-b",
        &cand,
        "--ref",
        &reference,
        "--out",
        &out,
        "--resamples",
        "50",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("p_value\t1.000000"));
}

#[test]
fn grad_check_reports_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let o = docnmt(&["grad-check", "--out", &path(dir.path(), "g")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("document loss"));
    let max: f64 = text.lines().last().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(max <= 1e-4);
    let o = docnmt(&["grad-check", "--out", &path(dir.path(), "g"), "--tolerance", "1e-16"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sentence_level_translation_ignores_passes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let o = docnmt(&[args, &["--out", d.to_str().unwrap()]].concat());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    run(&["gen-synthetic", "--n-docs", "4", "--sentences-per-doc", "3", "--name", "t"]);
    run(&["build-vocab", "--src", &path(d, "t.src"), "--tgt", &path(d, "t.tgt"), "--min-freq", "1"]);
    run(&[
        "train-stage1",
        "--train-src",
        &path(d, "t.src"),
        "--train-tgt",
        &path(d, "t.tgt"),
        "--src-vocab",
        &path(d, "src.vocab"),
        "--tgt-vocab",
        &path(d, "tgt.vocab"),
        "--dim",
        "4",
        "--epochs",
        "1",
    ]);
    let translate = |passes: &str, jobs: &str| {
        run(&[
            "translate",
            "--model",
            &path(d, "stage1.ckpt"),
            "--src",
            &path(d, "t.src"),
            "--src-vocab",
            &path(d, "src.vocab"),
            "--tgt-vocab",
            &path(d, "tgt.vocab"),
            "--passes",
            passes,
            "--jobs",
            jobs,
            "--max-len",
            "8",
        ]);
        (
            std::fs::read_to_string(d.join("translations.txt")).unwrap(),
            std::fs::read_to_string(d.join("audit.tsv")).unwrap(),
        )
    };
    let (a, audit) = translate("0", "1");
    let (b, _) = translate("3", "2");
    assert_eq!(a, b);
    assert_eq!(audit.lines().count(), 1);
    assert_eq!(a.split("\n\n").count(), 4);

    let o = docnmt(&[
        "train-stage2",
        "--model",
        &path(d, "stage1.ckpt"),
        "--train-src",
        &path(d, "t.src"),
        "--train-tgt",
        &path(d, "t.tgt"),
        "--src-vocab",
        &path(d, "src.vocab"),
        "--tgt-vocab",
        &path(d, "tgt.vocab"),
        "--out",
        d.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--lm"), "{}", stderr(&o));
}
