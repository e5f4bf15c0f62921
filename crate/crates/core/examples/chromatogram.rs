//! Prints the outlet chromatogram of one reference experiment as CSV.
//!
//! Usage: `cargo run --example chromatogram -- [experiment 1-6]`

use adrfit::chroma::{chromatography_semidiscrete, ColumnConfig, Discretization, ProcessProgram, SmaParameters};
use adrfit::esdirk::{integrate, IntegratorConfig};

fn main() -> adrfit::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let column = ColumnConfig::default();
    let program = ProcessProgram::reference_experiments()[k.clamp(1, 6) - 1];
    let sd = chromatography_semidiscrete(&column, &program, Discretization::default())?;
    let p = match std::env::var("SMA_PARAMS") {
        Ok(list) => list.split(',').map(|v| v.trim().parse().expect("numeric parameter")).collect(),
        Err(_) => SmaParameters::ground_truth().to_vec(),
    };
    let t_end = program.duration_s(&column);
    let n_out = 400;
    let cfg = IntegratorConfig {
        output_times: (0..=n_out).map(|i| t_end * i as f64 / n_out as f64).collect(),
        stop_times: sd.system().inlet.breakpoints().to_vec(),
        ..IntegratorConfig::with_tolerances(1e-6, 1e-12)
    };
    let start = std::time::Instant::now();
    let traj = integrate(&sd.with_params(&p), &sd.initial_state(), (0.0, t_end), &cfg)?;
    eprintln!("{:?} in {:?}", traj.stats, start.elapsed());
    println!("time_s,salt,A1,A2,M");
    for (t, x) in traj.output_times.iter().zip(&traj.states) {
        let c = sd.evaluate_outlet(x)?;
        println!("{t:.1},{:.6e},{:.6e},{:.6e},{:.6e}", c[0], c[1], c[2], c[3]);
    }
    Ok(())
}
