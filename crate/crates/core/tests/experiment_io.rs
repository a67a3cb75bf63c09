use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rankjump::experiment::{
    csv_header, detect_jump_in, load_config, one_way_audit, read_ratios_csv, run_experiment, ExperimentConfig,
    Manifest,
};
use rankjump::Error;

const SMALL: &str = r#"
name = "small"
seeds = [0, 1]
record_every = 5
decay_convention = "unhalved"
diagnostics_every = 2

[problem]
kind = "two_by_two"
epsilon = 0.25

[arch]
depth = 3
width = 8

[init]
scale = 0.5

[[schedule]]
end = 100
eta = 0.03
lambda = 0.1

[[schedule]]
end = 400
eta = 0.2
lambda = 0.1

[absorbing]
r = 1
eps1 = 0.05
eps2 = 0.4
alpha = 0.01
cap_c = 100.0

[offshoots]
branch_steps = [0, 200, 400]
eta = 0.02
lambda = 0.001
steps = 50

[jump]
threshold = 0.05
sustain = 5
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(SMALL).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn identical_invocations_write_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&small(), a.path()).unwrap();
    run_experiment(&small(), b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    assert_eq!(ta, tb);
    // 2 seeds x (main + 3 offshoots) + summary + manifest.
    assert_eq!(ta.len(), 10);
}

#[test]
fn zero_seeds_write_only_the_manifest() {
    let mut cfg = small();
    cfg.seeds.clear();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&cfg, dir.path()).unwrap();
    assert!(summary.runs.is_empty());
    assert_eq!(tree(dir.path()).keys().collect::<Vec<_>>(), vec!["manifest.json"]);
}

#[test]
fn artifacts_follow_the_contract() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&cfg, dir.path()).unwrap();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.seeds, vec![0, 1]);
    let on_disk: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk, serde_json::to_value(&summary).unwrap());

    for run in &summary.runs {
        let path = dir.path().join(&run.csv);
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, csv_header(2));
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 400 / 5 + 1);
        // Diagnostics on every second recorded row; no sample before the first step.
        assert!(!rows[0][9].is_empty() && rows[1][9].is_empty() && !rows[2][9].is_empty());
        assert!(rows[0][13].is_empty() && !rows[1][13].is_empty());
        let ratios = read_ratios_csv(&path).unwrap();
        assert_eq!(detect_jump_in(&ratios, cfg.jump.threshold, cfg.jump.sustain), run.jump_step);
        assert_eq!(run.offshoots.len(), 3);
        for o in &run.offshoots {
            let r = read_ratios_csv(&dir.path().join(&o.csv)).unwrap();
            assert_eq!(r.first().unwrap().0, o.branch_step);
            assert_eq!(r.last().unwrap().0, o.branch_step + 50);
            assert_eq!(o.final_missing.len(), 1);
            assert_eq!(o.final_missing[0].target, 4.0);
        }
    }
}

#[test]
fn divergent_seeds_are_recorded() {
    let mut cfg = small();
    cfg.schedule[1].eta = 50.0;
    cfg.offshoots = None;
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(summary.runs.len(), 2);
    assert!(summary.runs.iter().all(|r| r.diverged.is_some()));
    assert!(summary.runs.iter().all(|r| r.final_numeric_rank.is_none()));
    assert_eq!(summary.cells[0].diverged, 2);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn audit_matches_stored_runs() {
    let mut cfg = small();
    cfg.offshoots = None;
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&cfg, dir.path()).unwrap();
    let audit = one_way_audit(&cfg).unwrap();
    for (a, r) in audit.iter().zip(&summary.runs) {
        assert_eq!((a.seed, a.jump_step, a.reverse_jump_step), (r.seed, r.jump_step, r.reverse_jump_step));
    }
}

#[test]
fn grid_cells_get_their_own_directories() {
    let src = SMALL.replace("[jump]", "[grid]\ndepths = [2, 3]\n\n[jump]");
    let mut cfg = ExperimentConfig::from_toml_str(&src).unwrap();
    cfg.offshoots = None;
    cfg.seeds = vec![3];
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(summary.cells.len(), 2);
    assert!(dir.path().join("depth2/seed3.csv").exists());
    assert!(dir.path().join("depth3/seed3.csv").exists());
}

#[test]
fn config_files_load_and_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    fs::write(&good, SMALL).unwrap();
    assert_eq!(load_config(&good).unwrap(), small());
    assert!(matches!(load_config(&dir.path().join("absent.toml")), Err(Error::Io { .. })));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, SMALL.replace("sustain = 5", "sustain = 5\nwindow = 3")).unwrap();
    let msg = load_config(&bad).unwrap_err().to_string();
    assert!(msg.contains("window") && msg.contains("line 45"), "{msg}");
}
