use std::path::Path;
use std::process::Command;

use mmlq::checkpoint;
use mmlq::data::{read_dataset, Manifest};
use mmlq::metrics::CSV_HEADER;
use mmlq::optim::StepSchedule;

fn run(args: &[&str]) -> Result<String, mmlq_cli::CliError> {
    let mut out = Vec::new();
    let mut full = vec!["mmlq"];
    full.extend_from_slice(args);
    mmlq_cli::run(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-synth", "--n-train", "64", "--n-test", "40", "--seed", "7", "--output-dir", path(dir)];
    args.extend_from_slice(extra);
    run(&args).unwrap();
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mmlq"));
    c.env_remove(mmlq_cli::OUTPUT_DIR_ENV);
    c
}

#[test]
fn gen_synth_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = run(&["gen-synth", "--n-train", "2000", "--n-test", "500", "--seed", "7", "--output-dir", path(&a)]).unwrap();
    assert!(out.contains("2000 samples") && out.contains("500 samples"), "{out}");
    run(&["gen-synth", "--n-train", "2000", "--n-test", "500", "--seed", "7", "--output-dir", path(&b)]).unwrap();

    let m = Manifest::load(a.join("manifest.txt")).unwrap();
    assert_eq!(m.get("train").unwrap().count, 2000);
    assert_eq!(read_dataset(m.resolve("train").unwrap()).unwrap().len(), 2000);
    assert_eq!(read_dataset(m.resolve("test").unwrap()).unwrap().len(), 500);
    for f in ["train.feat", "test.feat", "manifest.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_synth_flag_plumbing() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), &["--signal-v", "0", "--signal-t", "0.9", "--wide", "--set", "n_w=9"]);
    let ds = read_dataset(tmp.path().join("train.feat")).unwrap();
    assert!(ds.wide);
    assert_eq!(ds.dims.n_w, 9);
    assert!(run(&["gen-synth", "--signal-v", "2", "--output-dir", path(tmp.path())]).is_err());
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out_dir = tmp.path().join("run");
    gen(&data, &[]);
    let manifest = data.join("manifest.txt");
    let log = run(&[
        "train",
        "--manifest",
        path(&manifest),
        "--output-dir",
        path(&out_dir),
        "--set",
        "epochs=4",
        "--set",
        "batch_size=16",
    ])
    .unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 4);

    // lr column follows the schedule.
    let schedule = StepSchedule { base_lr: 1e-3, total_epochs: 4, ..StepSchedule::default() };
    let train_log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    let rows: Vec<Vec<&str>> = train_log.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (e, row) in rows.iter().enumerate() {
        let lr: f64 = row[1].parse().unwrap();
        assert_eq!(lr, schedule.lr_at_epoch(e).unwrap());
    }
    let curve = std::fs::read_to_string(out_dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4 * 4);

    // Eval reproduces the final logged test metrics exactly, twice.
    let ckpt = out_dir.join("model.ckpt");
    let before = std::fs::read(&ckpt).unwrap();
    run(&["eval", "--checkpoint", path(&ckpt), "--manifest", path(&manifest)]).unwrap();
    run(&["eval", "--checkpoint", path(&ckpt), "--manifest", path(&manifest)]).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), before, "eval must not touch the checkpoint");
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 4);
    let tail = |l: &str| l.split_once(',').unwrap().1.to_string();
    assert_eq!(tail(lines[1]), tail(lines[2]));
    assert_eq!(lines[2], lines[3]);
    let last = rows.last().unwrap();
    let fields: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(&fields[6..11], &last[3..8]);

    // The checkpoint carries the optimizer state of every step.
    let (_, adam) = checkpoint::load(&ckpt).unwrap();
    assert_eq!(adam.unwrap().t, 16);
    let config = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(config.contains("epochs=4\n") && config.contains("batch_size=16\n"));
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &[]);
    let manifest = data.join("manifest.txt");
    for d in ["r1", "r2"] {
        let o = tmp.path().join(d);
        run(&["train", "--manifest", path(&manifest), "--output-dir", path(&o), "--set", "epochs=2"]).unwrap();
    }
    for f in ["model.ckpt", "metrics.csv", "train_log.csv", "curve.csv", "config.txt"] {
        let a = std::fs::read(tmp.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("r2").join(f)).unwrap();
        // config.txt records the output dir, which differs by construction.
        if f == "config.txt" {
            let strip = |x: Vec<u8>| String::from_utf8(x).unwrap().lines().filter(|l| !l.starts_with("output_dir=")).collect::<Vec<_>>().join("\n");
            assert_eq!(strip(a), strip(b));
        } else {
            assert_eq!(a, b, "{f}");
        }
    }
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    gen(&tmp.path().join("data"), &[]);
    std::fs::write(
        tmp.path().join("run.cfg"),
        "# relative paths follow this file\nmanifest = data/manifest.txt\noutput_dir = out\nepochs = 1\nrun_id = fromfile\nsa_mode = separate\n",
    )
    .unwrap();
    let cfg = tmp.path().join("run.cfg");
    run(&["train", "--config", path(&cfg), "--set", "ff_mode=none"]).unwrap();
    let metrics = std::fs::read_to_string(tmp.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("fromfile,separate,none,"), "{metrics}");

    let other = tmp.path().join("flag");
    run(&["train", "--config", path(&cfg), "--output-dir", path(&other), "--run-id", "flag"]).unwrap();
    assert!(other.join("metrics.csv").exists());
}

#[test]
fn ablate_axes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &["--set", "n_p=5", "--set", "n_w=6"]);
    let manifest = data.join("manifest.txt");
    let base = [
        "ablate",
        "--manifest",
        path(&manifest),
        "--output-dir",
        path(tmp.path()),
        "--set",
        "n_p=5",
        "--set",
        "n_w=6",
        "--set",
        "epochs=1",
        "--run-id",
        "abl",
    ];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        run(&a)
    };
    let read = |axis: &str| std::fs::read_to_string(tmp.path().join(format!("ablate-{axis}.csv"))).unwrap();

    with(&["--axis", "mmib-design"]).unwrap();
    let csv = read("mmib-design");
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 9);
    assert_eq!(ids[0], "abl-mmib-design-none-none");
    assert_eq!(ids[8], "abl-mmib-design-separate-separate");

    with(&["--axis", "n-queries"]).unwrap();
    let nq: Vec<String> = read("n-queries").lines().skip(1).map(|l| l.split(',').skip(4).take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(nq, ["1,1", "2,2", "4,4", "8,8"]);

    with(&["--axis", "modality"]).unwrap();
    let m: Vec<String> = read("modality").lines().skip(1).map(|l| l.split(',').skip(4).take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(m, ["2,0", "0,2", "2,2"]);

    with(&["--axis", "n-blocks", "--values", "1,3"]).unwrap();
    assert_eq!(read("n-blocks").lines().count(), 3);
    assert!(matches!(with(&["--axis", "modality", "--values", "2"]), Err(mmlq_cli::CliError::Usage(_))));
}

#[test]
fn gradcheck_reports_every_group_and_detects_faults() {
    let small = ["gradcheck", "--set", "n_blocks=1", "--set", "h_q=16", "--set", "n_heads=2", "--set", "head_dim=8"];
    let out = run(&small).unwrap();
    let last = out.lines().last().unwrap();
    assert!(last.ends_with("PASS"), "{out}");
    let names: Vec<&str> = out.lines().skip(1).filter(|l| l.ends_with(" ok") || l.ends_with("FAIL")).map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut uniq = names.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), names.len());

    let mut faulty = small.to_vec();
    faulty.extend_from_slice(&["--inject-fault", "softmax:1.3"]);
    let err = run(&faulty).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |c: &mut Command| c.output().unwrap().status.code().unwrap();
    assert_eq!(code(bin().arg("--help")), 0);
    assert_eq!(code(bin().arg("frobnicate")), 1);
    assert_eq!(code(bin().args(["train", "--set", "nokey=1"])), 1);
    assert_eq!(code(bin().args(["train"])), 1);
    // Missing manifest file is an I/O problem.
    assert_eq!(code(bin().args(["train", "--manifest", path(&tmp.path().join("none.txt"))])), 2);
    // Invalid config value.
    assert_eq!(code(bin().args(["gradcheck", "--set", "n_heads=0"])), 2);
    assert_eq!(code(bin().args(["gradcheck", "--set", "n_blocks=1", "--inject-fault", "gelu:2"])), 3);

    // Checkpoint dims disagree with the features.
    let data = tmp.path().join("data");
    gen(&data, &[]);
    let small = tmp.path().join("small");
    gen(&small, &["--set", "n_w=5"]);
    run(&["train", "--manifest", path(&data.join("manifest.txt")), "--output-dir", path(&tmp.path().join("r")), "--set", "epochs=1"]).unwrap();
    let ckpt = tmp.path().join("r/model.ckpt");
    assert_eq!(code(bin().args(["eval", "--checkpoint", path(&ckpt), "--manifest", path(&small.join("manifest.txt"))])), 2);
}

#[test]
fn output_dir_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("env");
    let flag_dir = tmp.path().join("flag");
    let status = bin()
        .args(["gen-synth", "--n-train", "4", "--n-test", "4"])
        .env(mmlq_cli::OUTPUT_DIR_ENV, &env_dir)
        .current_dir(tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(env_dir.join("manifest.txt").exists());
    let status = bin()
        .args(["gen-synth", "--n-train", "4", "--n-test", "4", "--output-dir", path(&flag_dir)])
        .env(mmlq_cli::OUTPUT_DIR_ENV, &env_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(flag_dir.join("manifest.txt").exists());
}
