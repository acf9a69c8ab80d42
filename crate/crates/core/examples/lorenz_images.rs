//! Simulates one Lorenz trajectory and prints a few rendered frames as ASCII.
//!
//! Run with `cargo run --example lorenz_images -- 0.3` to pick the pixel noise.

use dvsmc::ssm::{project, simulate_trajectory, LorenzSystem, NoiseSettings, IMAGE_SIZE};

fn main() -> dvsmc::Result<()> {
    let sigma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let system = LorenzSystem::default();
    let traj = simulate_trajectory(&system, 40, NoiseSettings::noise(sigma), 7, 0)?;

    for t in [0, 20, 39] {
        let s = traj.states[t];
        println!(
            "t={t:2}  state ({:6.2}, {:6.2}, {:6.2})  blob at pixel ({:.1}, {:.1})",
            s[0],
            s[1],
            s[2],
            project(s[0]),
            project(s[1])
        );
        let frame = &traj.frames[t];
        for row in 0..IMAGE_SIZE {
            let line: String = (0..IMAGE_SIZE)
                .map(|col| {
                    let v = frame.pixels[row * IMAGE_SIZE + col];
                    match v {
                        v if v > 0.6 => '#',
                        v if v > 0.3 => '+',
                        v if v > 0.1 => '.',
                        _ => ' ',
                    }
                })
                .collect();
            println!("|{line}|");
        }
    }
    Ok(())
}
