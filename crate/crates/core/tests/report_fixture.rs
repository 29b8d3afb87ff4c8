use std::fs;
use std::path::PathBuf;

use hsvseg::experiments::{
    read_comparison_csv, render_table, report, COMPARISON_FILE, EVAL_DIR, TABLE_FILE,
};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Copies the published scores into a scratch results directory and renders it.
fn render_published() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let eval = dir.path().join(EVAL_DIR);
    fs::create_dir_all(&eval).unwrap();
    fs::copy(
        fixtures().join("published/eval").join(COMPARISON_FILE),
        eval.join(COMPARISON_FILE),
    )
    .unwrap();
    let out = report(dir.path()).unwrap();
    let text = fs::read_to_string(out.table).unwrap();
    (dir, text)
}

#[test]
fn published_table_matches_checked_in_rendering() {
    let (_dir, rendered) = render_published();
    let expected_path = fixtures().join(TABLE_FILE);
    if std::env::var_os("HSVSEG_BLESS").is_some() {
        fs::write(&expected_path, &rendered).unwrap();
    }
    let expected = fs::read_to_string(&expected_path).unwrap();
    assert_eq!(rendered, expected);
}

#[test]
fn published_table_carries_all_24_values() {
    let (_dir, rendered) = render_published();
    let values = [
        "0.5619", "0.7191", "0.0620", "0.1165", "0.1894", "0.3143", "0.7244", "0.8400", "0.5721",
        "0.7278", "0.7997", "0.8885", "0.7547", "0.8602", "0.6702", "0.8025", "0.8317", "0.9080",
        "0.7815", "0.8773", "0.6464", "0.7852", "0.8384", "0.9120",
    ];
    for v in values {
        assert_eq!(rendered.matches(v).count(), 1, "{v}");
    }
    let water = rendered.lines().find(|l| l.starts_with("Water")).unwrap();
    assert!(water.contains("U-Net") && water.contains("0.5619*") && water.contains("0.7191*"));
    let argon_tuned = rendered
        .lines()
        .skip_while(|l| !l.starts_with("Argon"))
        .nth(2)
        .unwrap();
    assert!(
        argon_tuned.contains("Fine-tuned")
            && argon_tuned.contains("0.8384*")
            && argon_tuned.contains("0.9120*")
    );
}

#[test]
fn published_rows_round_trip() {
    let rows =
        read_comparison_csv(&fixtures().join("published/eval").join(COMPARISON_FILE)).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(
        render_table(&rows),
        render_table(&rows.iter().rev().cloned().collect::<Vec<_>>())
    );
}
