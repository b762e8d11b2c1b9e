//! Throughput of adaptive convolution against plain convolution, written as
//! CSV to stdout.
//!
//! cargo run --release --example bench -- [reps]

use dekr::eval::{run_bench, write_bench_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reps: usize = std::env::args().nth(1).map_or(Ok(5), |s| s.parse())?;
    let rows = run_bench(reps, 0)?;
    write_bench_csv(&mut std::io::stdout().lock(), &rows)?;
    Ok(())
}
