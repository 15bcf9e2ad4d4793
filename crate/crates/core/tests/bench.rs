use dossier_core::bench::{grid, sweep, BenchConfig, CSV_HEADER};

fn base() -> BenchConfig {
    BenchConfig { repeats: 1, pbkdf2_iterations: 10, ..Default::default() }
}

fn run_sweep() -> String {
    let mut out = Vec::new();
    sweep(&grid(&[50, 100, 200], &[20, 40], &base()), &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

/// Columns whose values are measured times.
fn timing_columns() -> Vec<usize> {
    CSV_HEADER.iter().enumerate().filter(|(_, h)| h.ends_with("_ms") || **h == "overhead_pct").map(|(i, _)| i).collect()
}

#[test]
fn sweep_has_one_row_per_configuration() {
    let csv = run_sweep();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == CSV_HEADER.len()));
}

#[test]
fn same_seed_gives_the_same_table_apart_from_timings() {
    let timing = timing_columns();
    assert!(!timing.is_empty());
    let strip = |csv: String| -> Vec<Vec<String>> {
        csv.lines()
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| !timing.contains(i))
                    .map(|(_, v)| v.to_string())
                    .collect()
            })
            .collect()
    };
    assert_eq!(strip(run_sweep()), strip(run_sweep()));
}
