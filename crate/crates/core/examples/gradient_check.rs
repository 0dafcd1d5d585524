//! Build a small graph on the tape, run it forward and backward, and compare
//! the gradients with central finite differences.

use octolatent::autodiff::{backward, fd_check, forward, Tape};
use octolatent::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, r: usize, c: usize) -> Mat<f32> {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> octolatent::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, w, h) = (64, 6, 8);

    // A latent column fed to a tiny ARM: bits of each value given its past.
    let mut tape = Tape::new();
    let y = tape.param(0, n, 1)?;
    let w1 = tape.param(1, w, h)?;
    let b1 = tape.param(2, 1, h)?;
    let w2 = tape.param(3, h, 2)?;
    let b2 = tape.param(4, 1, 2)?;
    let ctx = tape.causal_context(y, w)?;
    let hid = tape.affine(ctx, w1, b1)?;
    let hid = tape.relu(hid)?;
    let raw = tape.affine(hid, w2, b2)?;
    let bits = tape.laplace_bits(y, raw)?;
    let total = tape.sum(bits)?;

    let params = vec![
        random(&mut rng, n, 1),
        random(&mut rng, w, h),
        random(&mut rng, 1, h),
        random(&mut rng, h, 2),
        random(&mut rng, 1, 2),
    ];
    let vals = forward::<f32>(&tape, &params, &[])?;
    let grads = backward(&tape, &vals, total, &Mat::scalar(1.0))?;
    println!("rate of {n} latents: {:.2} bits", vals.scalar(total));
    println!(
        "gradient norm per tensor: {:?}",
        grads
            .params
            .iter()
            .map(|g| g.data.iter().map(|v| v * v).sum::<f32>().sqrt())
            .collect::<Vec<_>>()
    );
    let err = fd_check(&tape, total, &params, &[], 1e-4, 40, 7)?;
    println!("max relative error over 40 probes: {err:.2e}");
    Ok(())
}
