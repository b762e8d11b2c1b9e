//! Train baseline, aa, sr and dekr heads under identical settings and print
//! the AP and error-analysis table.
//!
//! cargo run --release --example ablation -- [out_dir] [epochs] [n_train] [seeds]
//!
//! Finished runs in `out_dir` are reused, so an interrupted ablation resumes.

use dekr::trainer::{desk_datasets, run_ablation, AblationConfig, TrainData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or("ablation_out", String::as_str);
    let epochs: usize = args.get(1).map_or(Ok(3), |s| s.parse())?;
    let n_train: usize = args.get(2).map_or(Ok(300), |s| s.parse())?;
    let seeds: u64 = args.get(3).map_or(Ok(1), |s| s.parse())?;

    let (train_set, val) = desk_datasets(n_train, 100, 0)?;
    let data = TrainData::from_dataset(&train_set);
    let mut cfg = AblationConfig { seeds: (0..seeds).collect(), ..AblationConfig::default() };
    cfg.train.total_epochs = epochs;
    let report = run_ablation(&data, &val, &cfg, Some(out.as_ref()))?;

    println!("{:<9} {:>6} {:>6} {:>7} {:>6} {:>9} {:>6} {:>9}", "variant", "AP", "AP50", "jitter", "miss", "inversion", "swap", "final l_p");
    for r in &report.rows {
        println!(
            "{:<9} {:>6.1} {:>6.1} {:>7.1} {:>6.1} {:>9.1} {:>6.1} {:>9.4}",
            r.variant.name(),
            r.ap,
            r.ap50,
            r.jitter,
            r.miss,
            r.inversion,
            r.swap,
            r.final_l_p
        );
    }
    Ok(())
}
