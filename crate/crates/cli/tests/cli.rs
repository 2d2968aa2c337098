//! End-to-end tests of the `amot` binary: command behavior, exit codes, and
//! byte-reproducibility of every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn amot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_amot"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn amot");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const PERFECT_SPEC: &str = "\
seed=42
num_objects=3
num_frames=10
grid_height=32
grid_width=48
embed_dim=8
stride=4
motion=constant-velocity
speed_min=0.4
speed_max=1.0
conf_min=0.85
conf_max=0.95
";

fn write_spec(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("spec.txt");
    std::fs::write(&path, text).unwrap();
    path
}

fn dir_checksums(dir: &Path) -> BTreeMap<String, u64> {
    fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<String, u64>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                // FNV-1a, good enough to compare artifacts.
                let mut hash: u64 = 0xcbf29ce484222325;
                for b in bytes {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hash);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn parse_kv(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[test]
fn simulate_writes_manifest_echoing_every_spec_field() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), PERFECT_SPEC);
    let bundle = tmp.path().join("bundle");
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&bundle));

    // The manifest must parse back into exactly the spec that generated it.
    let manifest_text = std::fs::read_to_string(bundle.join("manifest.txt")).unwrap();
    let spec_lines: String = manifest_text
        .lines()
        .filter(|l| !l.starts_with("format_version=") && !l.starts_with("overlap_cells="))
        .map(|l| format!("{l}\n"))
        .collect();
    let echoed = amot_core::simgen::ScenarioSpec::from_str_kv(&spec_lines).unwrap();
    let expected = amot_core::simgen::ScenarioSpec::from_str_kv(PERFECT_SPEC).unwrap();
    assert_eq!(echoed, expected);

    let manifest = parse_kv(&bundle.join("manifest.txt"));
    assert!(manifest.contains_key("format_version"));
    assert!(bundle.join("gt.txt").exists());
    assert!(bundle.join("det.txt").exists());
    assert!(bundle.join("emb.bin").exists());
    assert!(bundle.join("fm").join("fm_000001.bin").exists());
}

#[test]
fn simulate_missing_seed_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), "num_objects=2\nnum_frames=5\n");
    let out = amot()
        .arg("simulate")
        .arg(&spec)
        .arg("--out")
        .arg(tmp.path().join("b"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("seed"), "stderr was: {stderr}");
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), PERFECT_SPEC);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&a));
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&b));
    assert_eq!(dir_checksums(&a), dir_checksums(&b));
}

#[test]
fn track_then_eval_is_perfect_on_clean_scenario() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), PERFECT_SPEC);
    let bundle = tmp.path().join("bundle");
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&bundle));

    let results = tmp.path().join("results.txt");
    run_ok(amot().arg("track").arg(&bundle).arg("--out").arg(&results));

    let kv = tmp.path().join("metrics.kv");
    let out = run_ok(
        amot()
            .arg("eval")
            .arg(bundle.join("gt.txt"))
            .arg(&results)
            .arg("--kv")
            .arg(&kv),
    );
    let metrics = parse_kv(&kv);
    assert_eq!(metrics.get("idf1").unwrap(), "1.000000");
    assert_eq!(metrics.get("mota").unwrap(), "1.000000");
    assert_eq!(metrics.get("ids").unwrap(), "0");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("IDF1"), "stdout: {stdout}");
}

#[test]
fn track_is_byte_reproducible_and_flags_commute() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), PERFECT_SPEC);
    let bundle = tmp.path().join("bundle");
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&bundle));

    let r1 = tmp.path().join("r1.txt");
    let r2 = tmp.path().join("r2.txt");
    run_ok(amot().arg("track").arg(&bundle).arg("--out").arg(&r1));
    run_ok(amot().arg("track").arg(&bundle).arg("--out").arg(&r2));
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());

    // Flag order must not matter.
    let a = tmp.path().join("a.txt");
    let b = tmp.path().join("b.txt");
    run_ok(
        amot()
            .arg("track")
            .arg(&bundle)
            .arg("--no-amc")
            .arg("--no-mtc")
            .arg("--out")
            .arg(&a),
    );
    run_ok(
        amot()
            .arg("track")
            .arg(&bundle)
            .arg("--no-mtc")
            .arg("--no-amc")
            .arg("--out")
            .arg(&b),
    );
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn track_empty_directory_writes_empty_results() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let results = tmp.path().join("results.txt");
    run_ok(amot().arg("track").arg(&empty).arg("--out").arg(&results));
    assert_eq!(std::fs::read_to_string(&results).unwrap(), "");
}

#[test]
fn eval_of_gt_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), PERFECT_SPEC);
    let bundle = tmp.path().join("bundle");
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&bundle));
    let kv = tmp.path().join("m.kv");
    run_ok(
        amot()
            .arg("eval")
            .arg(bundle.join("gt.txt"))
            .arg(bundle.join("gt.txt"))
            .arg("--kv")
            .arg(&kv),
    );
    let metrics = parse_kv(&kv);
    assert_eq!(metrics.get("mota").unwrap(), "1.000000");
    assert_eq!(metrics.get("idf1").unwrap(), "1.000000");
}

#[test]
fn eval_reports_malformed_line_number() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt.txt");
    std::fs::write(&gt, "1,1,0,0,10,10,1,0,1\n2,1,zero,0,10,10,1,0,1\n").unwrap();
    let out = amot().arg("eval").arg(&gt).arg(&gt).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(":2:"), "stderr: {stderr}");
}

#[test]
fn eval_empty_ground_truth_fails() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt.txt");
    std::fs::write(&gt, "").unwrap();
    let out = amot().arg("eval").arg(&gt).arg(&gt).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = amot().arg("track").arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_variant_name_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), PERFECT_SPEC);
    let bundle = tmp.path().join("bundle");
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&bundle));
    let out = amot()
        .arg("sweep")
        .arg(&bundle)
        .arg("--out")
        .arg(tmp.path().join("sweep"))
        .arg("--variants")
        .arg("warp-drive")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_perfect_fixture_single_cell() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), PERFECT_SPEC);
    let bundle = tmp.path().join("bundle");
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&bundle));
    let sweep = tmp.path().join("sweep");
    run_ok(
        amot()
            .arg("sweep")
            .arg(&bundle)
            .arg("--out")
            .arg(&sweep)
            .arg("--intervals")
            .arg("1")
            .arg("--variants")
            .arg("amc+mtc"),
    );
    let csv = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "variant,k,idf1,mota,ids,fp,fn,mt,ml,fps");
    let row = lines.next().unwrap();
    assert!(row.starts_with("amc+mtc,1,1.0000,1.0000,0,"), "row: {row}");
    assert!(lines.next().is_none());
}

#[test]
fn sweep_is_byte_reproducible_even_with_jobs() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), PERFECT_SPEC);
    let bundle = tmp.path().join("bundle");
    run_ok(amot().arg("simulate").arg(&spec).arg("--out").arg(&bundle));
    let a = tmp.path().join("sa");
    let b = tmp.path().join("sb");
    for (out, jobs) in [(&a, "1"), (&b, "3")] {
        run_ok(
            amot()
                .arg("sweep")
                .arg(&bundle)
                .arg("--out")
                .arg(out)
                .arg("--intervals")
                .arg("1,2")
                .arg("--variants")
                .arg("iou-only,amc+mtc")
                .arg("--jobs")
                .arg(jobs),
        );
    }
    assert_eq!(dir_checksums(&a), dir_checksums(&b));
}
