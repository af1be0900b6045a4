use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_engagetag");

const BEATLES_KB: &str = "Something\tThe Beatles\tAbbey Road\n\
Yesterday\tThe Beatles\tHelp!\n\
Something\tSparklehorse\t\n\
Train in Vain\tThe Clash\tLondon Calling\n";

// fgeer, fgeer_kb, activation rate, and both errors on activated utterances
const FINE_METRIC_COUNT: usize = 5;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .env("ENGAGETAG_LOG", "off")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = "[hyper]\nepochs = 6\n[synth]\nn_human = 400\nn_engagement = 400\nn_test = 40\n";

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["--config", cfg, "--seed", "3", "synth", "--out", "a"]);
    ok(tmp.path(), &["--config", cfg, "--seed", "3", "synth", "--out", "b"]);
    ok(tmp.path(), &["--config", cfg, "--seed", "4", "synth", "--out", "c"]);
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6);
    let mut differs = false;
    for name in &names {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("b").join(name)).unwrap(), "{name:?}");
        differs |= a != fs::read(tmp.path().join("c").join(name)).unwrap();
    }
    assert!(differs, "a different seed should change the output");
}

#[test]
fn rerank_demo_picks_the_valid_beatles_reading() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("kb.tsv"), BEATLES_KB).unwrap();
    let cfg = write_config(d, SMALL);
    let cfg = cfg.to_str().unwrap();
    ok(d, &["--config", cfg, "--kb", "kb.tsv", "synth", "--out", "data"]);
    assert!(!d.join("data/kb.tsv").exists());
    let harvested = ok(d, &["harvest", "--events", "data/events.jsonl", "--out", "pairs.jsonl"]);
    assert!(harvested.starts_with("harvested 400 pairs"), "{harvested}");
    ok(d, &["--config", cfg, "--kb", "kb.tsv", "project", "--pairs", "pairs.jsonl", "--out", "fg.jsonl"]);
    ok(
        d,
        &["--config", cfg, "train", "--cg", "data/human_cg.jsonl", "--fg", "fg.jsonl", "--out", "model.json"],
    );
    let report = ok(
        d,
        &[
            "--kb", "kb.tsv", "eval", "--checkpoint", "model.json", "--test-cg", "data/test_cg.jsonl", "--test-fg",
            "data/test_fg.jsonl",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["n_fg"], 40);

    let demo = ok(d, &["--kb", "kb.tsv", "rerank-demo", "--checkpoint", "model.json", "Play Something by The Beatles"]);
    let lines: Vec<&str> = demo.lines().collect();
    assert_eq!(lines[0], "rank\tscore\tstatus\tchosen\tentities");
    assert_eq!(lines.len(), 6);
    let chosen: Vec<&str> = lines.iter().copied().filter(|l| l.split('\t').nth(3) == Some("*")).collect();
    assert_eq!(chosen.len(), 1);
    let cols: Vec<&str> = chosen[0].split('\t').collect();
    assert_eq!(cols[2], "valid");
    assert_eq!(cols[4], "musicTitle=something; musicArtist=the beatles");
}

#[test]
fn grid_tsv_has_one_row_per_cell_metric() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = write_config(
        d,
        "[hyper]\nepochs = 2\nembed_dim = 8\nhidden = 8\n\
         [generator]\nn_artists = 10\n\
         [grid]\nhuman_sizes = [40, 80]\nengagement_multipliers = [0, 1, 2]\nengagement_unit_size = 40\n\
         n_seeds = 2\ntest_size = 40\n",
    );
    ok(d, &["--config", cfg.to_str().unwrap(), "grid", "--out", "grid.tsv"]);
    let tsv = fs::read_to_string(d.join("grid.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = tsv.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    // per human size: cgeer at 0x, then cgeer plus every fine metric per multiplier
    let expected = 2 * (1 + 2 * (1 + FINE_METRIC_COUNT));
    assert_eq!(rows.len(), expected, "{tsv}");
    assert!(rows.iter().all(|r| r.len() == 6));
    assert!(rows.iter().filter(|r| r[1] == "0").all(|r| r[2] == "cgeer"));
    for r in &rows {
        // only the activated-subset errors can lack a seed
        if r[2].ends_with("_activated") {
            assert!(r[5].parse::<usize>().unwrap() <= 2);
        } else {
            assert_eq!(r[5], "2", "{r:?}");
        }
    }

    // flags narrow the grid to one cell
    let one = ok(
        d,
        &["--config", cfg.to_str().unwrap(), "--human-size", "40", "--engagement-mult", "0", "grid"],
    );
    assert_eq!(one.lines().count(), 2, "{one}");
}

#[test]
fn missing_input_fails_with_one_line() {
    let tmp = TempDir::new().unwrap();
    for args in [
        vec!["eval", "--checkpoint", "nope.json", "--test-fg", "x.jsonl"],
        vec!["harvest", "--events", "missing.jsonl", "--out", "p.jsonl"],
        vec!["train", "--out", "m.json"],
        vec!["--config", "absent.toml", "synth", "--out", "d"],
    ] {
        let out = run(tmp.path(), &args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
}

#[test]
fn unknown_config_keys_are_an_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[hyper]\nepoch = 3\n");
    let out = run(tmp.path(), &["--config", cfg.to_str().unwrap(), "synth", "--out", "d"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}
