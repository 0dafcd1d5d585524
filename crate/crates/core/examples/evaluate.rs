//! Attribute-domain PSNR against a reference, checked on uniform
//! quantization noise where the answer is known in closed form.

use octolatent::metrics::eval;
use octolatent::synthetic::voxel_sphere;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> octolatent::Result<()> {
    let reference = voxel_sphere(5, 1);
    let exact = eval(&reference, &reference, 5)?;
    println!(
        "self comparison exact for all attributes: {}",
        exact.attributes.iter().all(|a| a.exact)
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let range = {
        let v: Vec<f32> = reference.opacities.clone();
        v.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
            - v.iter().cloned().fold(f32::INFINITY, f32::min)
    } as f64;
    for step in [0.001f32, 0.01, 0.1] {
        let mut noisy = reference.clone();
        for o in &mut noisy.opacities {
            *o += step * (rng.random::<f32>() - 0.5);
        }
        let m = eval(&reference, &noisy, 5)?;
        let expect = 10.0 * (range * range / (step as f64 * step as f64 / 12.0)).log10();
        println!(
            "step {step}: opacity PSNR {:.3} dB, closed form {:.3} dB",
            m.attribute(17).unwrap().psnr.unwrap(),
            expect
        );
    }
    Ok(())
}
