//! Train the dekr variant on the desk protocol (64x64 mini7 scenes), fit the
//! pose-scoring net and report validation AP.
//!
//! cargo run --release --example train_desk -- [out_dir] [epochs] [n_train]
//!
//! The full protocol is 40 epochs on 2000 images (about 25 minutes on one
//! core); the defaults here finish in a couple of minutes.

use dekr::decoder::DecodeConfig;
use dekr::trainer::{desk_datasets, evaluate_model, fit_scoring_net, scoring_pairs, train, ScoringFitConfig, TrainConfig, TrainData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or("train_out", String::as_str);
    let epochs: usize = args.get(1).map_or(Ok(4), |s| s.parse())?;
    let n_train: usize = args.get(2).map_or(Ok(400), |s| s.parse())?;

    let (train_set, val) = desk_datasets(n_train, 100, 0)?;
    let data = TrainData::from_dataset(&train_set);
    let cfg = TrainConfig { total_epochs: epochs, ..TrainConfig::default() };
    println!("lr milestones at epochs {:?}", cfg.milestone_epochs());
    let run = train(&data, &cfg, Some(out.as_ref()), true)?;
    println!("{} steps in {:.0} s, last total loss {:.5}", run.steps, run.seconds, run.log.last().map_or(f64::NAN, |e| e.total));

    let decode = DecodeConfig::default();
    let pairs = scoring_pairs(&cfg.network, &run.params, &data, &decode)?;
    let (scoring, fit) = fit_scoring_net(&pairs, &data.skeleton, &ScoringFitConfig::default())?;
    println!(
        "scoring net on {} pairs: held-out MSE {:.4} vs constant {:.4}",
        fit.train_pairs, fit.heldout_mse, fit.constant_mse
    );
    scoring.save(std::path::Path::new(out).join("scoring"))?;

    let report = evaluate_model(&cfg.network, &run.params, &val, &decode, Some(&scoring), false)?;
    println!("validation: AP {:.1}, AP50 {:.1}, AP75 {:.1}, AR {:.1}", report.ap, report.ap50, report.ap75, report.ar);
    Ok(())
}
