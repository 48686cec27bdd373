//! End-to-end runs of the binary's subcommands through `cli::run`.

use std::fs;
use std::path::Path;

use int2int::cli::logparse::read_metrics_table;

fn run(args: &[&str]) -> i32 {
    int2int::cli::run(std::iter::once("int2int").chain(args.iter().copied()))
}

fn train_flags<'a>(dump: &'a str, data: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let train = data.join("data.train");
    let evals = format!(
        "{},{}",
        data.join("data.valid").display(),
        data.join("data.test").display()
    );
    let mut f: Vec<String> = [
        "train",
        "--operation",
        "data",
        "--dump_path",
        dump,
        "--exp_name",
        "files",
        "--exp_id",
        "run",
        "--n_enc_layers",
        "1",
        "--n_dec_layers",
        "1",
        "--enc_emb_dim",
        "32",
        "--dec_emb_dim",
        "32",
        "--n_enc_heads",
        "2",
        "--n_dec_heads",
        "2",
        "--epoch_size",
        "256",
        "--batch_size",
        "32",
        "--eval_size",
        "50",
        "--max_output_len",
        "8",
        "--deterministic",
        "true",
        "--env_base_seed",
        "3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    f.extend(["--train_data".to_string(), train.display().to_string()]);
    f.extend(["--eval_data".to_string(), evals]);
    f.extend(extra.iter().map(|s| s.to_string()));
    f
}

#[test]
fn datagen_train_resume_and_logparse() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let code = run(&[
        "datagen",
        "pipeline",
        "--operation",
        "gcd",
        "--base",
        "10",
        "--maxint",
        "100",
        "--count",
        "1500",
        "--env_base_seed",
        "1",
        "--valid_size",
        "100",
        "--test_size",
        "100",
        "--output_dir",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    for name in ["data.valid", "data.test"] {
        assert_eq!(
            fs::read_to_string(data.join(name)).unwrap().lines().count(),
            100
        );
    }

    let dump = dir.path().join("runs");
    let dump = dump.to_str().unwrap();
    let flags = train_flags(dump, &data, &["--max_epoch", "1"]);
    assert_eq!(
        run(&flags.iter().map(String::as_str).collect::<Vec<_>>()),
        0
    );
    let exp = dir.path().join("runs/files/run");
    assert!(exp.join("checkpoint").exists());
    assert!(exp.join("params.txt").exists());

    // Same directory, higher epoch cap: picks up where the first run stopped.
    let flags = train_flags(dump, &data, &["--max_epoch", "2"]);
    assert_eq!(
        run(&flags.iter().map(String::as_str).collect::<Vec<_>>()),
        0
    );
    let log = fs::read_to_string(exp.join("train.log")).unwrap();
    assert!(log.contains("Resuming at epoch 1"));

    let csv = dir.path().join("metrics.csv");
    assert_eq!(
        run(&[
            "logparse",
            exp.to_str().unwrap(),
            "--output",
            csv.to_str().unwrap()
        ]),
        0
    );
    let table = read_metrics_table(&fs::read_to_string(&csv).unwrap());
    let epochs: Vec<i64> = table
        .keys()
        .map(|(id, e)| {
            assert_eq!(id, "run");
            *e
        })
        .collect();
    assert_eq!(epochs, [0, 1]);
    for metrics in table.values() {
        for p in ["valid", "test"] {
            let acc = metrics[&format!("{p}_arithmetic_acc")];
            assert!((0.0..=100.0).contains(&acc));
            assert!(metrics[&format!("{p}_arithmetic_perfect")] <= acc);
        }
    }
}

#[test]
fn bad_flags_exit_nonzero() {
    assert_ne!(run(&["train", "--operation", "nope"]), 0);
    assert_ne!(run(&["frobnicate"]), 0);
    assert_eq!(run(&["--help"]), 0);
}
