//! Rate-distortion sweep over lambda, written to CSV.
//!
//! Usage: `rd_sweep [out.csv]`

use octolatent::codec::EncodeConfig;
use octolatent::metrics::{sweep, write_sweep_csv};
use octolatent::synthetic::voxel_sphere;
use octolatent::trainer::TrainConfig;
use std::path::PathBuf;

fn main() -> octolatent::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("rd_sweep.csv"));
    let model = voxel_sphere(5, 7);
    let base = EncodeConfig {
        depth: 5,
        train: TrainConfig {
            iterations: 400,
            ..TrainConfig::default()
        },
        attrs: vec![1, 17],
        vq_size: 64,
    };
    let lambdas = [1e-5, 1e-4, 1e-3, 1e-2];
    let rows = sweep(&model, &base, &lambdas);
    for r in &rows {
        println!(
            "lambda {:>7.0e}: {:>6} bytes  {:.3} bpp  mean nmse {:.3e}  ({:.1}s)",
            r.lambda, r.bytes, r.bpp, r.mean_nmse, r.seconds
        );
    }
    write_sweep_csv(&out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}
