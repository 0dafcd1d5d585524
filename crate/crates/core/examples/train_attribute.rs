//! Train the latent codec of one attribute and print its learning curve.
//!
//! Usage: `train_attribute [attr_id] [iterations] [lambda]`

use octolatent::gaussian::{attribute_name, merge_attributes};
use octolatent::geometry::voxelize;
use octolatent::synthetic::voxel_sphere;
use octolatent::trainer::{train_attribute, TrainConfig};

fn main() -> octolatent::Result<()> {
    let mut args = std::env::args().skip(1);
    let attr: u8 = args.next().and_then(|a| a.parse().ok()).unwrap_or(17);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let lambda = args.next().and_then(|a| a.parse().ok()).unwrap_or(1e-4);

    let model = voxel_sphere(5, 7);
    let vox = voxelize(&model.positions, 5)?;
    let h = vox.hierarchy(5)?;
    let merged = merge_attributes(&model, &vox)?;
    let cfg = TrainConfig {
        lambda,
        iterations,
        ..TrainConfig::default()
    };
    println!(
        "training {} on {} voxels, levels {:?}",
        attribute_name(attr),
        h.len(),
        h.level_sizes()
    );
    let t = train_attribute(merged.attribute(attr), &h, &cfg)?;
    for row in t.log.iter().step_by((iterations / 10).max(1)) {
        println!(
            "it {:>6}  D {:.3e}  bits {:>9.1}  loss {:.3e}",
            row.iteration, row.distortion, row.bits, row.loss
        );
    }
    println!(
        "final (rounded latents): D {:.3e} ({:.2} dB), {:.3} bits/voxel, decoder {} params, ARM {} params",
        t.report.distortion,
        -10.0 * t.report.distortion.log10(),
        t.report.bits / h.len() as f64,
        t.decoder.count_params(),
        t.arm.count_params()
    );
    Ok(())
}
