use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const DROPOUT_STACK: &str = "input type=class name=class_input
layer type=projection name=projection_layer input=class_input size=500
layer type=dropout name=dropout_layer_1 input=projection_layer dropout_rate=0.25
layer type=lstm name=hidden_layer_1 input=dropout_layer_1 size=1500
layer type=dropout name=dropout_layer_2 input=hidden_layer_1 dropout_rate=0.25
layer type=tanh name=hidden_layer_2 input=dropout_layer_2 size=1500
layer type=dropout name=dropout_layer_3 input=hidden_layer_2 dropout_rate=0.25
layer type=softmax name=output_layer input=dropout_layer_3
";

const SMALL: &str = "input type=word name=w
layer type=projection name=p input=w size=6
layer type=lstm name=h input=p size=8
layer type=softmax name=o input=h
";

fn nnlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnlm"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> (String, String) {
    let out = nnlm(args);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(out.status.success(), "nnlm {args:?} failed\n{stderr}");
    (stdout, stderr)
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn file(&self, name: &str, contents: &str) -> String {
        let p = self.dir.path().join(name);
        std::fs::write(&p, contents).unwrap();
        p.to_str().unwrap().to_string()
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }
}

fn bigram_corpus(lines: usize, seed: u64) -> String {
    // a small grammar so that classes and training have structure to find
    let words = ["the cat", "a dog", "the dog", "a cat"];
    let verbs = ["runs", "sleeps", "eats fish", "sees the cat"];
    let mut x = seed;
    let mut out = String::new();
    for _ in 0..lines {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let a = words[(x >> 33) as usize % 4];
        let b = verbs[(x >> 40) as usize % 4];
        out.push_str(&format!("{a} {b}\n"));
    }
    out
}

fn train_small(ws: &Workspace, extra: &[&str]) -> (String, String) {
    let train = ws.file("train.txt", &bigram_corpus(200, 1));
    let dev = ws.file("dev.txt", &bigram_corpus(30, 2));
    let arch = ws.file("arch.txt", SMALL);
    let model = ws.path("model.bin");
    let mut args = vec![
        "train",
        "--train",
        &train,
        "--dev",
        &dev,
        "--arch",
        &arch,
        "--output-model",
        &model,
        "--max-epochs",
        "2",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn validation_scales(log: &str) -> Vec<f64> {
    log.lines()
        .filter(|l| l.contains("validation:"))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn classes_trace_is_monotone_and_file_is_complete() {
    let ws = Workspace::new();
    let corpus = ws.file("c.txt", &bigram_corpus(300, 3));
    let out = ws.path("classes.txt");
    let (stdout, _) = ok(&["classes", "--corpus", &corpus, "--num-classes", "3", "--output", &out]);
    let trace: Vec<f64> = stdout
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(trace.len() >= 2);
    assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{trace:?}");
    let text = std::fs::read_to_string(&out).unwrap();
    // nine distinct words plus three reserved tokens
    assert_eq!(text.lines().count(), 12);
}

#[test]
fn single_class_file() {
    let ws = Workspace::new();
    let corpus = ws.file("c.txt", "x y z\nz y\n");
    let out = ws.path("classes.txt");
    ok(&["classes", "--corpus", &corpus, "--num-classes", "1", "--output", &out]);
    let text = std::fs::read_to_string(&out).unwrap();
    let regular: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('<'))
        .map(|l| l.split('\t').nth(1).unwrap())
        .collect();
    assert_eq!(regular.len(), 3);
    assert!(regular.iter().all(|c| *c == regular[0]));
}

#[test]
fn default_class_count_is_documented() {
    let (stdout, _) = ok(&["classes", "--help"]);
    assert!(stdout.contains("[default: 2000]"), "{stdout}");
    let (stdout, _) = ok(&["train", "--help"]);
    assert!(stdout.contains("[default: adagrad]"), "{stdout}");
}

#[test]
fn dropout_stack_architecture_is_accepted() {
    let ws = Workspace::new();
    let corpus = ws.file("c.txt", "a b\nb a\n");
    let classes = ws.path("classes.txt");
    ok(&[
        "classes",
        "--corpus",
        &corpus,
        "--num-classes",
        "1",
        "--output",
        &classes,
    ]);
    let arch = ws.file("stack.txt", DROPOUT_STACK);
    let model = ws.path("m.bin");
    ok(&[
        "train",
        "--train",
        &corpus,
        "--dev",
        &corpus,
        "--arch",
        &arch,
        "--classes",
        &classes,
        "--output-model",
        &model,
        "--max-batches",
        "1",
    ]);
    assert!(Path::new(&model).exists());
}

#[test]
fn invalid_architecture_reports_file_and_line() {
    let ws = Workspace::new();
    let corpus = ws.file("c.txt", "a b\n");
    let arch = ws.file(
        "bad.txt",
        "input type=word name=w\nlayer type=lstm name=h input=w size=4\nlayer type=softmax name=o input=h\n",
    );
    let out = nnlm(&[
        "train",
        "--train",
        &corpus,
        "--dev",
        &corpus,
        "--arch",
        &arch,
        "--output-model",
        &ws.path("m"),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bad.txt:2:"), "{err}");
    assert!(!Path::new(&ws.path("m")).exists());
}

#[test]
fn sgd_anneals_and_adagrad_does_not() {
    // a high learning rate and frequent validation make dev failures likely
    let ws = Workspace::new();
    let (_, sgd) = train_small(
        &ws,
        &[
            "--optimizer",
            "sgd",
            "--learning-rate",
            "3",
            "--validation-interval",
            "2",
            "--patience",
            "100",
        ],
    );
    let sgd_scales = validation_scales(&sgd);
    assert!(sgd_scales.iter().any(|&s| s < 1.0), "{sgd}");

    let (_, ada) = train_small(
        &ws,
        &[
            "--learning-rate",
            "3",
            "--validation-interval",
            "2",
            "--patience",
            "100",
        ],
    );
    let ada_scales = validation_scales(&ada);
    assert!(!ada_scales.is_empty());
    assert!(ada_scales.iter().all(|&s| s == 1.0), "{ada}");
    assert!(
        ada.contains("failures 1") || ada.contains("failures 2"),
        "adagrad never failed a validation:\n{ada}"
    );
}

#[test]
fn training_is_reproducible_and_matches_score() {
    let ws = Workspace::new();
    let (_, first) = train_small(&ws, &["--seed", "7"]);
    let bytes_a = std::fs::read(ws.path("model.bin")).unwrap();
    let (_, second) = train_small(&ws, &["--seed", "7"]);
    let bytes_b = std::fs::read(ws.path("model.bin")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    let best = |log: &str| -> f64 {
        let line = log.lines().rfind(|l| l.contains("best dev perplexity")).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    assert_eq!(best(&first), best(&second));

    let (stdout, _) = ok(&[
        "score",
        "--model",
        &ws.path("model.bin"),
        "--input",
        &ws.path("dev.txt"),
    ]);
    let ppl: f64 = stdout
        .lines()
        .last()
        .unwrap()
        .strip_prefix("perplexity\t")
        .unwrap()
        .parse()
        .unwrap();
    assert!((ppl - best(&first)).abs() < 1e-6 * ppl, "{ppl} vs {}", best(&first));
}

#[test]
fn score_policies_agree_without_unknown_words() {
    let ws = Workspace::new();
    train_small(&ws, &["--max-batches", "5"]);
    let model = ws.path("model.bin");
    let dev = ws.path("dev.txt");
    let (include, _) = ok(&["score", "--model", &model, "--input", &dev]);
    let (exclude, _) = ok(&["score", "--model", &model, "--input", &dev, "--unk-penalty", "0"]);
    assert_eq!(include, exclude);
    assert_eq!(include.lines().count(), 31);

    let oov = ws.file("oov.txt", "the zebra runs\n");
    let (with_unk, _) = ok(&["score", "--model", &model, "--input", &oov]);
    let (without_unk, _) = ok(&["score", "--model", &model, "--input", &oov, "--unk-penalty", "0"]);
    assert!(with_unk.starts_with("1\t") && with_unk.lines().next().unwrap().ends_with("\t4"));
    assert!(without_unk.lines().next().unwrap().ends_with("\t3"));

    let doubled = ws.file("dev2.txt", &(std::fs::read_to_string(&dev).unwrap().repeat(2)));
    let (twice, _) = ok(&["score", "--model", &model, "--input", &doubled]);
    assert_eq!(twice.lines().last(), include.lines().last());

    let out = nnlm(&["score", "--model", &model, "--input", &dev, "--unk-penalty", "-3"]);
    assert!(!out.status.success());
}

#[test]
fn rescore_endpoints() {
    let ws = Workspace::new();
    train_small(&ws, &["--max-batches", "10"]);
    let model = ws.path("model.bin");
    let nbest = ws.file(
        "nbest.txt",
        "u1 -10 -3 the cat runs\nu2 -4 -9 a dog sleeps\nu1 -11 -1 cat the runs\nu2 -5 -2 dog a sleeps\n",
    );
    let (zero, _) = ok(&["rescore", "--model", &model, "--nbest", &nbest, "--lambda", "0"]);
    let order = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| l.split(' ').skip(5).collect::<Vec<_>>().join(" "))
            .collect()
    };
    // acoustic + back-off: u1 -13 vs -12, u2 -13 vs -7
    assert_eq!(
        order(&zero),
        ["cat the runs", "the cat runs", "dog a sleeps", "a dog sleeps"]
    );

    let (one, _) = ok(&[
        "rescore", "--model", &model, "--nbest", &nbest, "--lambda", "1", "--s-nn", "1000",
    ]);
    for utt in ["u1", "u2"] {
        let rows: Vec<Vec<f64>> = one
            .lines()
            .filter(|l| l.starts_with(utt))
            .map(|l| l.split(' ').skip(1).take(4).map(|x| x.parse().unwrap()).collect())
            .collect();
        assert!(rows[0][3] >= rows[1][3], "{one}");
        for r in &rows {
            assert!((r[0] - (r[1] + 1000.0 * r[3])).abs() < 1e-9);
        }
    }
}

#[test]
fn rescore_tuning_prefers_the_network() {
    let ws = Workspace::new();
    train_small(&ws, &["--max-batches", "30"]);
    let model = ws.path("model.bin");
    // the back-off scores favour the scrambled hypotheses
    let nbest = ws.file(
        "nbest.txt",
        "u1 0 -20 the cat runs\nu1 0 -19 runs cat the\nu2 0 -20 a dog sleeps\nu2 0 -19 sleeps dog a\n",
    );
    let refs = ws.file("refs.txt", "u1 the cat runs\nu2 a dog sleeps\n");
    let out = ws.path("out.txt");
    let (_, stderr) = ok(&[
        "rescore",
        "--model",
        &model,
        "--nbest",
        &nbest,
        "--tune",
        "--refs",
        &refs,
        "--output",
        &out,
        "--grid",
        "lambda=0:1:0.25;s_nn=1",
    ]);
    let line = stderr.lines().find(|l| l.starts_with("tuned")).unwrap();
    let lambda: f64 = line
        .split('\t')
        .nth(1)
        .unwrap()
        .strip_prefix("lambda=")
        .unwrap()
        .parse()
        .unwrap();
    assert!(lambda > 0.0, "{line}");
    assert!(line.ends_with("wer=0"), "{line}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().next().unwrap().ends_with("the cat runs"));
}

#[test]
fn malformed_nbest_reports_line() {
    let ws = Workspace::new();
    train_small(&ws, &["--max-batches", "2"]);
    let nbest = ws.file("nb.txt", "u1 -1 -2 a\nu1 -1 oops a\n");
    let out = nnlm(&["rescore", "--model", &ws.path("model.bin"), "--nbest", &nbest]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("nb.txt:2:"), "{err}");
}

#[test]
fn sampling_is_deterministic() {
    let ws = Workspace::new();
    train_small(&ws, &["--max-batches", "20"]);
    let model = ws.path("model.bin");
    let (a, _) = ok(&["sample", "--model", &model, "--count", "5", "--seed", "3"]);
    let (b, _) = ok(&["sample", "--model", &model, "--count", "5", "--seed", "3"]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 5);
    assert!(!a.contains("<s>") && !a.contains("</s>"));
    let (none, _) = ok(&["sample", "--model", &model, "--count", "0"]);
    assert!(none.is_empty());
}

#[test]
fn corrupt_model_is_rejected() {
    let ws = Workspace::new();
    train_small(&ws, &["--max-batches", "2"]);
    let model: PathBuf = ws.path("model.bin").into();
    let mut bytes = std::fs::read(&model).unwrap();
    bytes.truncate(bytes.len() / 2);
    let cut = ws.path("cut.bin");
    std::fs::write(&cut, bytes).unwrap();
    let out = nnlm(&["sample", "--model", &cut]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("truncated"));
}
