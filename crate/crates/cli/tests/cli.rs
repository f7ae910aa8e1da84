use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msr_cli::artifacts::{checkpoint_path, read_metrics, ranks_path, LOCK_FILE};
use msr_cli::ranks::RANKS_HEADER;
use msr_core::derive::Genotype;
use msr_core::rank_table::RankTable;
use msr_core::supernet::Network;

fn msr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msr"))
        .args(args)
        .env("MSR_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single `error[...]` line.
fn failure(out: Output) -> (i32, String) {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    (out.status.code().unwrap(), lines[0].to_string())
}

const TINY: &str = r#"
seed = 3
supernet.cells = 3
supernet.nodes = 5
supernet.channels = 4
train.epochs = 3
train.batch_size = 16
train.initial_lr = 0.05
dataset.synth.samples_per_class = 12
dataset.synth.test_samples_per_class = 6
dataset.synth.height = 8
dataset.synth.width = 8
eval.cells = 3
eval.channels = 4
eval.epochs = 2
eval.batch_size = 16
"#;

/// Writes `TINY` with the keys set in `extra` replaced.
fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let base: String = TINY
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, format!("output_dir = \"{name}\"\n{base}{extra}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tiny_pipeline_artifacts_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run", "");
    let run = tmp.path().join("run");
    assert_eq!(ok(msr(&["search", "--config", s(&cfg)])).trim(), s(&run));

    let metrics = read_metrics(&run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(!run.join(LOCK_FILE).exists());
    for epoch in [None, Some(0), Some(1), Some(2)] {
        let table_text = std::fs::read_to_string(ranks_path(&run, epoch)).unwrap();
        let table = RankTable::from_json(&table_text, "t").unwrap();
        assert_eq!(table.epoch, epoch);
        assert_eq!(table.to_json(), table_text);
        let net = Network::load_supernet_checkpoint(&checkpoint_path(&run, epoch)).unwrap();
        assert_eq!(net.epoch, epoch.map_or(0, |e| e + 1));
        let again = tmp.path().join("again.msrn");
        net.save_checkpoint(&again).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(checkpoint_path(&run, epoch)).unwrap());
    }

    let g1 = ok(msr(&["derive", "--run", s(&run)]));
    let first = std::fs::read(g1.trim()).unwrap();
    ok(msr(&["derive", "--run", s(&run)]));
    assert_eq!(std::fs::read(g1.trim()).unwrap(), first);
    let g = Genotype::from_json(std::str::from_utf8(&first).unwrap(), "g").unwrap();
    assert_eq!(g.to_json().as_bytes(), first);

    let fixed = tmp.path().join("fixed.json");
    ok(msr(&["derive", "--run", s(&run), "--epoch", "1", "--mode", "max", "--out", s(&fixed)]));
    let table = RankTable::from_json(&std::fs::read_to_string(ranks_path(&run, Some(1))).unwrap(), "t").unwrap();
    let expect = msr_core::derive::derive_genotype(&table, msr_core::derive::SelectionMode::MaxStableRank).unwrap();
    assert_eq!(std::fs::read_to_string(&fixed).unwrap(), expect.to_json());

    let out = ok(msr(&["eval", "--genotype", g1.trim(), "--config", s(&cfg)]));
    assert!(out.starts_with("test_loss="), "{out}");
    let eval_dir = run.join("eval_genotype_min");
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["epochs"], 2);
    let eval_metrics = read_metrics(&eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(eval_metrics.len(), 2);
    assert_eq!(result["test_loss"].as_f64().unwrap(), eval_metrics[1].heldout_loss);
}

#[test]
fn zero_epochs_emit_initialization_artifacts_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "init", "train.epochs = 0\n");
    ok(msr(&["search", "--config", s(&cfg)]));
    let run = tmp.path().join("init");
    assert!(checkpoint_path(&run, None).exists() && ranks_path(&run, None).exists());
    assert!(!checkpoint_path(&run, Some(0)).exists());
    assert!(read_metrics(&run.join("metrics.csv")).unwrap().is_empty());
    // derive falls back to the initialization table
    let g = ok(msr(&["derive", "--run", s(&run)]));
    let table = RankTable::from_json(&std::fs::read_to_string(ranks_path(&run, None)).unwrap(), "t").unwrap();
    let expect = msr_core::derive::derive_genotype(&table, msr_core::derive::SelectionMode::MinStableRank).unwrap();
    assert_eq!(std::fs::read_to_string(g.trim()).unwrap(), expect.to_json());
    let (code, line) = failure(msr(&["derive", "--run", s(&run), "--epoch", "0"]));
    assert_eq!(code, 2);
    assert!(line.starts_with("error[argument]:"), "{line}");
}

#[test]
fn ranks_dump_counts_rows_and_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "seven",
        "train.epochs = 0\nsupernet.nodes = 7\nsupernet.channels = 2\n",
    );
    ok(msr(&["search", "--config", s(&cfg)]));
    let ckpt = checkpoint_path(&tmp.path().join("seven"), None);
    let a = ok(msr(&["ranks", "--checkpoint", s(&ckpt)]));
    let b = ok(msr(&["ranks", "--checkpoint", s(&ckpt)]));
    assert_eq!(a, b);
    let rows: Vec<&str> = a.lines().filter(|l| !l.starts_with('#') && *l != RANKS_HEADER).collect();
    assert_eq!(rows.len(), 112);
    assert!(a.lines().last().unwrap().starts_with("# totals: entries=112 flagged=0"));
    // every sigma column of a freshly normalized net sits at the target norm
    for row in rows {
        let sigmas = row.split('\t').nth(5).unwrap();
        for pair in sigmas.split(',') {
            let v: f64 = pair.split(':').nth(1).unwrap().parse().unwrap();
            assert!((v - 1.0).abs() <= 0.01, "{row}");
        }
    }
    let out = tmp.path().join("dump.tsv");
    ok(msr(&["ranks", "--checkpoint", s(&ckpt), "--out", s(&out)]));
    assert_eq!(std::fs::read_to_string(out).unwrap(), a);
}

#[test]
fn failures_report_one_categorized_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "r", "train.epochs = 0\n");
    ok(msr(&["search", "--config", s(&cfg)]));
    let run = tmp.path().join("r");

    let (code, line) = failure(msr(&["search", "--config", s(&cfg)]));
    assert_eq!((code, line.starts_with("error[argument]:")), (2, true), "{line}");

    std::fs::write(run.join(LOCK_FILE), "999\n").unwrap();
    let other = write_config(tmp.path(), "r", "train.epochs = 0\n");
    let (code, line) = failure(msr(&["search", "--config", s(&other)]));
    assert_eq!((code, line.starts_with("error[lock]:")), (12, true), "{line}");
    std::fs::remove_file(run.join(LOCK_FILE)).unwrap();

    let bytes = std::fs::read(checkpoint_path(&run, None)).unwrap();
    let bad = tmp.path().join("bad.msrn");
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let (code, line) = failure(msr(&["ranks", "--checkpoint", s(&bad)]));
    assert_eq!((code, line.starts_with("error[format]:")), (3, true), "{line}");

    let typo = tmp.path().join("typo.toml");
    std::fs::write(&typo, "output_dir = \"t\"\ntrain.intial_lr = 0.1\n").unwrap();
    let (code, line) = failure(msr(&["search", "--config", s(&typo)]));
    assert_eq!(code, 11);
    assert!(line.starts_with("error[config]:") && line.contains("intial_lr"), "{line}");

    // a 5-node genotype against a 7-node config
    let g = ok(msr(&["derive", "--run", s(&run)]));
    let seven = write_config(tmp.path(), "seven", "supernet.nodes = 7\n");
    let (code, line) = failure(msr(&["eval", "--genotype", g.trim(), "--config", s(&seven)]));
    assert_eq!((code, line.starts_with("error[argument]:")), (2, true), "{line}");

    let (code, line) = failure(msr(&["derive"]));
    assert_eq!(code, 2);
    assert!(line.contains("--run"), "{line}");

    let out = Command::new(env!("CARGO_BIN_EXE_msr"))
        .args(["ranks", "--checkpoint", s(&bad)])
        .env("MSR_THREADS", "zero")
        .output()
        .unwrap();
    let (code, line) = failure(out);
    assert_eq!(code, 2);
    assert!(line.contains("MSR_THREADS"), "{line}");
}

#[test]
fn single_operator_genotype_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "single", "");
    for op in ["sep3", "sep5", "dil3", "dil5"] {
        let pair = format!("[[\"{op}\",0],[\"{op}\",1]]");
        let later = format!("[[\"{op}\",2],[\"{op}\",0]]");
        let text = format!("{{\"mode\":\"min\",\"normal\":[{pair},{later}],\"reduce\":[{pair},{later}]}}\n");
        let path = tmp.path().join(format!("{op}.json"));
        std::fs::write(&path, text).unwrap();
        let out = ok(msr(&["eval", "--genotype", s(&path), "--config", s(&cfg)]));
        let loss: f64 = out.split_whitespace().next().unwrap().trim_start_matches("test_loss=").parse().unwrap();
        assert!(loss.is_finite());
    }
}
