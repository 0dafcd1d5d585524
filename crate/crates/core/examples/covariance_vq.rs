//! Vector quantization of (log-scale, quaternion) covariance rows.

use octolatent::synthetic::toy_sphere;
use octolatent::vq::{covariance_row, vq_encode, vq_error, vq_train, CovRow};

fn main() -> octolatent::Result<()> {
    let model = toy_sphere(3000, 2);
    let rows: Vec<CovRow> = model
        .scales
        .iter()
        .zip(&model.rotations)
        .map(|(&s, &r)| covariance_row(s, r))
        .collect();
    for k in [1, 16, 256, 4096] {
        let cb = vq_train(&rows, k, 0)?;
        let idx = vq_encode(&rows, &cb)?;
        println!(
            "K = {k:>4} ({:>4} used): {:>2} bits/index, mean squared error {:.3e}, first index {}",
            cb.len(),
            cb.index_bits(),
            vq_error(&rows, &cb) / rows.len() as f64,
            idx[0]
        );
    }
    Ok(())
}
