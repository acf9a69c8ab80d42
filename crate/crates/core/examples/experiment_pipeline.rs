//! Runs simulate, train, evaluate and plot on a deliberately tiny configuration,
//! the same code path as the `dvsmc` binary, and prints the aggregate table.
//!
//! Pass an output directory as the first argument (default: a temporary one).

use dvsmc::cli::{self, ExperimentConfig};

const CONFIG: &str = r#"
seed = 3
regimes = ["noise", "partial"]
methods = ["dpf", "bpf", "bpf10x", "ekf", "supervised"]
seeds = [0, 1]
noise_grid = [0.1, 0.5]
partial_grid = [0.4, 1.0]

[data]
train_sequences = 8
train_steps = 4
val_sequences = 2
val_steps = 16

[model]
width = 16
hidden_layers = 1
encoding = 16
base_channels = 2

[train]
epochs = 2
batch_size = 4
particles = 8
curriculum = [[0, 2], [1, 4]]

[supervised]
epochs = 2
batch_size = 4
curriculum = [[0, 4]]

[filter]
particles = 8
bpf10x_particles = 80

[prior]
length = 10000

[eval]
mc_samples = 16
monitor_sequences = 1
monitor_steps = 8
"#;

fn main() -> dvsmc::Result<()> {
    let tmp;
    let out = match std::env::args().nth(1) {
        Some(dir) => std::path::PathBuf::from(dir),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let mut cfg = ExperimentConfig::from_toml(CONFIG)?;
    cfg.out = out.clone();

    let written = cli::simulate(&cfg)?;
    println!("simulated {} datasets", written.len());
    cli::train(&cfg, false)?;
    for report in cli::evaluate(&cfg)? {
        for row in report.aggregate()? {
            println!(
                "{:>10} {:>7} {:4.2} {:>12} {:10.3} [{:.3}, {:.3}]",
                row.method, row.regime, row.condition, row.metric, row.mean, row.ci_low, row.ci_high
            );
        }
    }
    let plots = cli::plot(&cfg)?;
    for path in plots.all() {
        println!("wrote {}", path.display());
    }
    println!("outputs under {}", out.display());
    Ok(())
}
