//! Trains the convolutional encoder to regress the state from a single frame
//! and reports validation error before and after.

use dvsmc::eval::tracking_error;
use dvsmc::models::{ModelConfig, SupervisedEncoder};
use dvsmc::ssm::{Dataset, LorenzSystem, NoiseSettings};
use dvsmc::training::{train_supervised, Checkpoint, TrainConfig};

fn main() -> dvsmc::Result<()> {
    let system = LorenzSystem::default();
    let noise = [NoiseSettings::noise(0.1)];
    let train_set = Dataset::generate(&system, 128, 8, &noise, 1)?;
    let val_set = Dataset::generate(&system, 8, 32, &noise, 2)?;

    let config = ModelConfig {
        width: 64,
        hidden_layers: 2,
        encoding: 64,
        base_channels: 4,
        ..Default::default()
    };
    let (net, store) = SupervisedEncoder::new(config, 0)?;
    let val_error = |params: &dvsmc::autodiff::ParamStore| -> dvsmc::Result<f64> {
        let mut errs = Vec::new();
        for t in &val_set.trajectories {
            let pred: Vec<Vec<f64>> = net.predict(params, &t.frames)?.iter().map(|p| p.to_vec()).collect();
            errs.extend(tracking_error(&pred, &t.states)?);
        }
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    };
    println!("untrained validation error {:.2}", val_error(&store)?);

    let train_cfg = TrainConfig {
        epochs: 8,
        batch_size: 16,
        curriculum: vec![(0, 8)],
        ..Default::default()
    };
    let start = Checkpoint::new("supervised", store, train_cfg.optimizer, serde_json::Value::Null);
    let (_, report) = train_supervised(&net, start, &train_set, &train_cfg, val_error)?;
    for e in &report.epochs {
        println!("epoch {}: loss {:.3}, validation error {:.2}", e.epoch, e.objective, e.val_error);
    }
    Ok(())
}
