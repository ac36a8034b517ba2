use std::path::{Path, PathBuf};

use protoseg::cli::{encode_pgm, run, EXIT_CONFIG, EXIT_GRADCHECK, EXIT_NUMERIC, EXIT_OK};
use protoseg::data::{load_dataset, read_checkpoint, read_grid, Checkpoint};
use protoseg::model::ModelParams;
use protoseg::prompt::export_similarity_map;
use tempfile::TempDir;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn protoseg(args: &[&str]) -> Output {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("protoseg").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A workspace with a config and a generated dataset.
struct Work {
    dir: TempDir,
}

impl Work {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.txt"), config).unwrap();
        let w = Self { dir };
        let o = protoseg(&[
            "gen-data",
            "--config",
            s(&w.config()),
            "--out",
            s(&w.path("data")),
        ]);
        assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
        w
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("config.txt")
    }

    fn train(&self) -> Output {
        protoseg(&[
            "--deterministic-logs",
            "train",
            "--config",
            s(&self.config()),
        ])
    }

    fn eval(&self, ckpt: &str, out: &str) -> Output {
        protoseg(&[
            "eval",
            "--checkpoint",
            s(&self.path(ckpt)),
            "--manifest",
            s(&self.path("data/eval.tsv")),
            "--out",
            s(&self.path(out)),
        ])
    }
}

const SMALL: &str = "samples=12\neval_samples=4\nmax_steps=3\nbatch_size=4\n";

fn metric(csv: &str, name: &str) -> f64 {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .and_then(|rest| rest.split(',').next())
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let w = Work::new("samples=6\neval_samples=2\n");
    let train = load_dataset(w.path("data/train.tsv")).unwrap();
    let eval = load_dataset(w.path("data/eval.tsv")).unwrap();
    assert_eq!((train.len(), eval.len()), (6, 2));
}

#[test]
fn gen_data_summary_counts_samples_classes_and_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "samples=5\neval_samples=1\nclasses=2\n").unwrap();
    let o = protoseg(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.stdout.contains("6 samples, 2 classes"), "{}", o.stdout);
    assert!(o.stdout.contains("bytes"));
}

#[test]
fn unknown_config_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "foo=1\n").unwrap();
    for sub in ["gen-data", "train"] {
        let mut args = vec![sub, "--config", s(&cfg)];
        if sub == "gen-data" {
            args.extend(["--out", "unused"]);
        }
        let o = protoseg(&args);
        assert_eq!(o.code, EXIT_CONFIG);
        assert!(o.stderr.contains("foo"), "{}", o.stderr);
    }
}

#[test]
fn missing_config_and_bad_usage_exit_1() {
    assert_eq!(
        protoseg(&["train", "--config", "/nonexistent/c.txt"]).code,
        EXIT_CONFIG
    );
    assert_eq!(protoseg(&["frobnicate"]).code, EXIT_CONFIG);
    assert_eq!(
        protoseg(&["gradcheck", "--scale", "1,2,3"]).code,
        EXIT_CONFIG
    );
    assert_eq!(protoseg(&["--help"]).code, EXIT_OK);
}

#[test]
fn train_writes_checkpoint_history_and_config_echo() {
    let w = Work::new(SMALL);
    let o = w.train();
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let ck = read_checkpoint(w.path("run/model.ckpt")).unwrap();
    assert_eq!(ck.step, 3);
    let history = std::fs::read_to_string(w.path("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("step,dice,pcl,total,wall_ms\n"));
    let echo = std::fs::read_to_string(w.path("run/config.txt")).unwrap();
    assert!(echo.contains("max_steps=3\n"));
    assert_eq!(
        o.stdout.lines().filter(|l| l.starts_with("step ")).count(),
        3
    );
}

#[test]
fn deterministic_logs_carry_no_timings() {
    let w = Work::new(SMALL);
    let a = w.train();
    let b = w.train();
    assert_eq!(a.code, EXIT_OK);
    assert!(!a.stdout.contains("wall_ms"));
    assert_eq!(a.stdout, b.stdout);
    let history = std::fs::read_to_string(w.path("run/history.csv")).unwrap();
    assert!(history.lines().skip(1).all(|l| l.ends_with(",0.000")));

    let timed = protoseg(&["train", "--config", s(&w.config())]);
    assert!(timed.stdout.contains("wall_ms"));
}

#[test]
fn zero_steps_checkpoint_is_the_initialisation() {
    let w = Work::new("samples=6\neval_samples=2\nmax_steps=0\n");
    assert_eq!(w.train().code, EXIT_OK);
    let ck = read_checkpoint(w.path("run/model.ckpt")).unwrap();
    let cfg = protoseg::config::CliConfig::load(w.config()).unwrap();
    let init = ModelParams::init(&cfg.train.model, cfg.train.seed).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.params, init);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let w = Work::new(SMALL);
    assert_eq!(w.train().code, EXIT_OK);
    let first = std::fs::read(w.path("run/model.ckpt")).unwrap();
    assert_eq!(w.train().code, EXIT_OK);
    assert_eq!(std::fs::read(w.path("run/model.ckpt")).unwrap(), first);
}

#[test]
fn diverging_training_exits_2() {
    let w = Work::new("samples=6\neval_samples=2\nmax_steps=50\nbatch_size=4\nlr=1e30\n");
    let o = w.train();
    assert_eq!(o.code, EXIT_NUMERIC, "{}", o.stderr);
    assert!(o.stderr.contains("numeric-error"));
}

#[test]
fn eval_of_fresh_checkpoint_is_in_range() {
    let w = Work::new("samples=6\neval_samples=4\nmax_steps=0\n");
    assert_eq!(w.train().code, EXIT_OK);
    let o = w.eval("run/model.ckpt", "metrics.csv");
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let csv = std::fs::read_to_string(w.path("metrics.csv")).unwrap();
    assert!(csv.starts_with("name,iou,pairs\nclass_1,"));
    for name in ["challenge_iou", "iou", "mc_iou"] {
        let v = metric(&csv, name);
        assert!((0.0..=1.0).contains(&v), "{name} {v}");
    }
}

#[test]
fn trained_checkpoint_beats_untrained() {
    let w = Work::new("samples=32\neval_samples=8\nmax_steps=150\nbatch_size=16\n");
    let untrained = {
        let cfg = protoseg::config::CliConfig::load(w.config()).unwrap();
        let ck = Checkpoint {
            config: cfg.train.model.clone(),
            step: 0,
            params: ModelParams::init(&cfg.train.model, cfg.train.seed).unwrap(),
        };
        protoseg::data::write_checkpoint(w.path("init.ckpt"), &ck).unwrap();
        assert_eq!(w.eval("init.ckpt", "init.csv").code, EXIT_OK);
        metric(
            &std::fs::read_to_string(w.path("init.csv")).unwrap(),
            "challenge_iou",
        )
    };
    assert_eq!(w.train().code, EXIT_OK);
    assert_eq!(w.eval("run/model.ckpt", "trained.csv").code, EXIT_OK);
    let trained = metric(
        &std::fs::read_to_string(w.path("trained.csv")).unwrap(),
        "challenge_iou",
    );
    assert!(trained >= untrained, "{trained} < {untrained}");
}

#[test]
fn eval_with_missing_checkpoint_exits_1() {
    let w = Work::new("samples=4\neval_samples=2\n");
    let o = w.eval("nope.ckpt", "m.csv");
    assert_eq!(o.code, EXIT_CONFIG);
    assert!(o.stderr.contains("io-error"));
}

#[test]
fn gradcheck_default_passes_and_lists_trainable_groups() {
    let o = protoseg(&["gradcheck"]);
    assert_eq!(o.code, EXIT_OK, "{}{}", o.stdout, o.stderr);
    let groups: Vec<&str> = o
        .stdout
        .lines()
        .filter(|l| l.contains("max_rel_err"))
        .map(|l| l.split(' ').next().unwrap())
        .collect();
    assert_eq!(
        groups,
        [
            "prototypes",
            "dense_mlp",
            "sparse_mlp",
            "decoder",
            "output_tokens"
        ]
    );
    assert!(o.stdout.contains("polarity gradient zero"));
}

#[test]
fn gradcheck_with_injected_fault_exits_3_naming_groups() {
    let o = protoseg(&["gradcheck", "--inject-bad-grad"]);
    assert_eq!(o.code, EXIT_GRADCHECK);
    let failed = o.stdout.lines().find(|l| l.starts_with("FAILED:")).unwrap();
    assert!(failed.contains("decoder"), "{failed}");
}

#[test]
fn export_sim_writes_a_grid_and_graymap_per_sample() {
    let w = Work::new("samples=4\neval_samples=3\nmax_steps=0\n");
    assert_eq!(w.train().code, EXIT_OK);
    let out = w.path("sim");
    let o = protoseg(&[
        "export-sim",
        "--checkpoint",
        s(&w.path("run/model.ckpt")),
        "--manifest",
        s(&w.path("data/eval.tsv")),
        "--class",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let data = load_dataset(w.path("data/eval.tsv")).unwrap();
    let ck = read_checkpoint(w.path("run/model.ckpt")).unwrap();
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 2 * data.len());
    for sample in &data.samples {
        let want =
            export_similarity_map(&ck.params.similarity(&sample.embedding).unwrap(), 2).unwrap();
        let got = read_grid(out.join(format!("{}.grid", sample.id))).unwrap();
        assert_eq!(got.shape(), want.shape());
        assert!(got
            .data()
            .iter()
            .zip(want.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let pgm = std::fs::read(out.join(format!("{}.pgm", sample.id))).unwrap();
        assert_eq!(pgm, encode_pgm(&want));
    }
}

#[test]
fn export_sim_rejects_background_and_out_of_range_classes() {
    let w = Work::new("samples=4\neval_samples=1\nmax_steps=0\n");
    assert_eq!(w.train().code, EXIT_OK);
    for class in ["0", "4"] {
        let o = protoseg(&[
            "export-sim",
            "--checkpoint",
            s(&w.path("run/model.ckpt")),
            "--manifest",
            s(&w.path("data/eval.tsv")),
            "--class",
            class,
            "--out",
            s(&w.path("sim")),
        ]);
        assert_eq!(o.code, EXIT_CONFIG, "class {class}");
        assert!(o.stderr.contains("class-error"));
    }
}

#[test]
fn graymap_scales_to_bytes() {
    let map = protoseg::tensor::Tensor::new(&[1, 3], vec![0.0f32, 0.5, 1.0]).unwrap();
    let pgm = encode_pgm(&map);
    assert_eq!(pgm, b"P5\n3 1\n255\n\x00\x80\xff");
}
