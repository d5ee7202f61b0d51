use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bytefuse"))
}

fn run_in(root: &Path, args: &[&str], stdin: Option<&[u8]>) -> Output {
    let mut cmd = bin();
    cmd.args(args)
        .env("BYTEFUSE_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let mut child = cmd.spawn().unwrap();
    {
        let mut pipe = child.stdin.take().unwrap();
        if let Some(bytes) = stdin {
            pipe.write_all(bytes).unwrap();
        }
    }
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    stdout(&o)
}

/// Smallest one-hot model, a handful of steps.
const TINY: &str = r#"
seed = 3

[model]
d_model = 264
ffn_dim = 32
heads = 2
enc_layers = 2
dec_layers = 1
dropout = 0.1
shallow_layers = 1
word_layers = 1

[train]
warmup_steps = 4
peak_lr = 1e-3
token_budget = 120
max_steps = 6
checkpoint_every = 3
"#;

fn tiny_config(dir: &Path, data: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}\n[data]\n{data}\n")).unwrap();
    path
}

#[test]
fn tokenize_ids_specials_and_spans() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ok(run_in(dir.path(), &["tokenize"], Some(b"a\n"))), "97\n");
    assert_eq!(
        ok(run_in(dir.path(), &["tokenize", "--specials"], Some(b"a\n"))),
        "257 97 258\n"
    );
    assert_eq!(
        ok(run_in(dir.path(), &["tokenize", "--spans"], Some(b"ab cd\n"))),
        "0:2:word 2:3:ws 3:5:word\n"
    );
    let out = ok(run_in(dir.path(), &["tokenize"], Some("é\n".as_bytes())));
    assert_eq!(out, "195 169\n");
}

#[test]
fn tokenize_rejects_invalid_utf8_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["tokenize"], Some(b"fine\n\xff\xfe\n"));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn evaluate_identical_text_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("ref.txt");
    fs::write(&r, "the cat sat on the mat .\na b c d e\n").unwrap();
    let r = r.to_str().unwrap();
    let out = ok(run_in(dir.path(), &["evaluate", "--ref", r, "--hyp", r], None));
    assert!(out.starts_with("BLEU = 100.00"), "{out}");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = run_in(dir.path(), &["train", "--config", cfg.to_str().unwrap()], None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn train_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "copy_pairs = 12");
    let cfg = cfg.to_str().unwrap();
    ok(run_in(dir.path(), &["train", "--config", cfg, "--fusion", "ncf"], None));
    ok(run_in(dir.path(), &["train", "--config", cfg, "--fusion", "ncf"], None));
    let a = dir.path().join("ncf-onehot-seed3");
    let b = dir.path().join("ncf-onehot-seed3-2");
    let log_a = fs::read_to_string(a.join("loss.log")).unwrap();
    assert_eq!(log_a.lines().count(), 6);
    assert_eq!(log_a, fs::read_to_string(b.join("loss.log")).unwrap());
    assert!(a.join("checkpoint-3.ckpt").exists());
    assert!(a.join("last.ckpt").exists());

    let echo = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(echo.contains("fusion = \"ncf\""), "{echo}");
    assert!(echo.contains("max_bytes = 800"), "{echo}");
    assert!(echo.contains("label_smoothing"), "{echo}");

    let other = run_in(
        dir.path(),
        &["train", "--config", cfg, "--fusion", "ncf", "--seed", "4"],
        None,
    );
    ok(other);
    let log_c = fs::read_to_string(dir.path().join("ncf-onehot-seed4/loss.log")).unwrap();
    assert_ne!(log_a, log_c);
}

#[test]
fn resume_from_a_checkpoint_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "copy_pairs = 12");
    let cfg = cfg.to_str().unwrap();
    ok(run_in(
        dir.path(),
        &["train", "--config", cfg, "--run-name", "full"],
        None,
    ));
    ok(run_in(
        dir.path(),
        &["train", "--config", cfg, "--run-name", "part"],
        None,
    ));
    let part = dir.path().join("part");
    let log: String = fs::read_to_string(part.join("loss.log"))
        .unwrap()
        .lines()
        .take(3)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(part.join("loss.log"), log).unwrap();
    let ckpt = part.join("checkpoint-3.ckpt");
    ok(run_in(
        dir.path(),
        &["train", "--config", cfg, "--resume", ckpt.to_str().unwrap()],
        None,
    ));
    assert_eq!(
        fs::read_to_string(part.join("loss.log")).unwrap(),
        fs::read_to_string(dir.path().join("full/loss.log")).unwrap()
    );
}

#[test]
fn translate_and_evaluate_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "copy_pairs = 8");
    ok(run_in(
        dir.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--run-name", "t"],
        None,
    ));
    let ckpt = dir.path().join("t/last.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = ok(run_in(
        dir.path(),
        &["translate", "--checkpoint", ckpt, "--beam", "2"],
        Some(b"ab\ncd\n"),
    ));
    assert_eq!(out.lines().count(), 2);

    let src = dir.path().join("src.txt");
    fs::write(&src, "ab\n").unwrap();
    let out = ok(run_in(
        dir.path(),
        &[
            "evaluate",
            "--ref",
            src.to_str().unwrap(),
            "--checkpoint",
            ckpt,
            "--src",
            src.to_str().unwrap(),
        ],
        None,
    ));
    assert!(out.starts_with("BLEU = "), "{out}");
}

#[test]
fn wsf_warns_when_no_sentence_has_two_words() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.txt"), "東京\n大阪\n").unwrap();
    fs::write(dir.path().join("t.txt"), "tokyo\nosaka\n").unwrap();
    let cfg = tiny_config(dir.path(), "train_source = \"s.txt\"\ntrain_target = \"t.txt\"");
    let o = run_in(
        dir.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--fusion", "wsf"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("single attention block"), "{}", stderr(&o));
}

#[test]
fn finetune_on_another_script() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "copy_pairs = 8");
    ok(run_in(
        dir.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--run-name", "base"],
        None,
    ));
    let ckpt = dir.path().join("base/last.ckpt");

    let ft = dir.path().join("ft");
    fs::create_dir(&ft).unwrap();
    fs::write(ft.join("s.txt"), "नमस्ते दुनिया\nधन्यवाद\n").unwrap();
    fs::write(ft.join("t.txt"), "hello world\nthanks\n").unwrap();
    let ft_cfg = ft.join("ft.toml");
    fs::write(
        &ft_cfg,
        "seed = 5\n[train]\nmax_steps = 3\nwarmup_steps = 2\ntoken_budget = 200\n[data]\ntrain_source = \"s.txt\"\ntrain_target = \"t.txt\"\n",
    )
    .unwrap();
    let out = ok(run_in(
        dir.path(),
        &[
            "finetune",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            ft_cfg.to_str().unwrap(),
        ],
        None,
    ));
    assert!(out.contains("steps: 3"), "{out}");
    let log = fs::read_to_string(dir.path().join("finetune-byte-onehot-seed5/loss.log")).unwrap();
    assert_eq!(log.lines().next().unwrap().split('\t').next(), Some("1"));

    // A config that asks for a different architecture is refused.
    let o = run_in(
        dir.path(),
        &[
            "finetune",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            ft_cfg.to_str().unwrap(),
            "--fusion",
            "ncf",
        ],
        None,
    );
    assert!(!o.status.success());
}

#[test]
fn analyze_buckets_conserve_word_counts() {
    let dir = tempfile::tempdir().unwrap();
    let refs = "a bb ccc dddd eeeee ffffff\nthe quick brown fox\n";
    let hyps = "a bb ccc xxxx eeeee\nthe slow brown fox\n";
    fs::write(dir.path().join("r.txt"), refs).unwrap();
    fs::write(dir.path().join("h.txt"), hyps).unwrap();
    let r = dir.path().join("r.txt");
    let h = dir.path().join("h.txt");
    let out = ok(run_in(
        dir.path(),
        &["analyze", "--hyp", h.to_str().unwrap(), "--ref", r.to_str().unwrap()],
        None,
    ));
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 5);
    let words: usize = rows.iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    let matches: usize = rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(words, 10);
    assert_eq!(matches, 7);

    let bpe = dir.path().join("bpe.txt");
    ok(run_in(
        dir.path(),
        &[
            "train-bpe",
            "--merges",
            "0",
            "-o",
            bpe.to_str().unwrap(),
            r.to_str().unwrap(),
        ],
        None,
    ));
    let out = ok(run_in(
        dir.path(),
        &[
            "analyze",
            "--hyp",
            h.to_str().unwrap(),
            "--ref",
            r.to_str().unwrap(),
            "--axis",
            "fertility",
            "--bpe",
            bpe.to_str().unwrap(),
        ],
        None,
    ));
    // With no merges every character is its own piece.
    let first = out.lines().next().unwrap();
    let mean_len = (1 + 2 + 3 + 4 + 5 + 6 + 3 + 5 + 5 + 3) as f64 / 10.0;
    assert_eq!(first, format!("fertility\t{mean_len:.4}\t10 words"));
}

#[test]
fn train_bpe_writes_a_loadable_merge_list() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("c.txt");
    fs::write(&input, "low lower lowest\nnewer wider\n").unwrap();
    let out_path = dir.path().join("m.txt");
    let out = ok(run_in(
        dir.path(),
        &[
            "train-bpe",
            "--merges",
            "5",
            "-o",
            out_path.to_str().unwrap(),
            input.to_str().unwrap(),
        ],
        None,
    ));
    assert!(out.starts_with("5 merges"), "{out}");
    let text = fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().count(), 5);
    // "l o", "w e" and "e r</w>" each occur three times; ties take the smallest pair.
    assert_eq!(text.lines().next(), Some("e r</w>"));
}
