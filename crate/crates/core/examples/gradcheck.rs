//! Central finite differences at f64 against the analytic gradients of every
//! differentiable operation.
//!
//! cargo run --release --example gradcheck -- [seeds]

use dekr::gradsuite::{run_suite, TOLERANCE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: usize = std::env::args().nth(1).map_or(Ok(20), |s| s.parse())?;
    let rows = run_suite(seeds, 0)?;
    println!("{:<16} {:>12}  per-input worst relative error", "op", "max rel err");
    for r in &rows {
        let per: Vec<String> = r.per_input.iter().map(|e| format!("{e:.1e}")).collect();
        println!("{:<16} {:>12.2e}  [{}] {}", r.op, r.max_rel_error, per.join(", "), if r.passed { "ok" } else { "FAIL" });
    }
    let ok = rows.iter().all(|r| r.passed);
    println!("{} ops, {seeds} seeds each, tolerance {TOLERANCE:e}: {}", rows.len(), if ok { "all pass" } else { "failures" });
    Ok(())
}
