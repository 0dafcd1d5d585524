//! Range coding integers under per-symbol Laplace models.

use octolatent::range_coder::{laplace_integer_cdf, range_decode, range_encode, Cdf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> octolatent::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (lo, hi) = (-20, 20);
    let n = 50_000;
    // Each symbol has its own location; the coder sees the same sequence of CDFs.
    let mus: Vec<f32> = (0..n).map(|i| 3.0 * (i as f32 * 0.01).sin()).collect();
    let b = 1.5f32;
    let symbols: Vec<usize> = mus
        .iter()
        .map(|&mu| {
            let u: f64 = rng.random::<f64>() - 0.5;
            let x = mu as f64 - b as f64 * u.signum() * (1.0 - 2.0 * u.abs()).ln();
            (x.round().clamp(lo as f64, hi as f64) as i32 - lo) as usize
        })
        .collect();

    let mut provider =
        |i: usize, _: &[usize]| -> octolatent::Result<Cdf> { laplace_integer_cdf(mus[i], b, lo, hi) };
    let bytes = range_encode(&symbols, &mut provider)?;
    let back = range_decode(&bytes, n, &mut provider)?;
    assert_eq!(back, symbols);

    let mut ideal = 0.0;
    for (i, &s) in symbols.iter().enumerate() {
        ideal -= laplace_integer_cdf(mus[i], b, lo, hi)?.probability(s).log2();
    }
    println!(
        "{n} symbols: {} bytes, model entropy {:.0} bytes, overhead {:.3}%",
        bytes.len(),
        ideal / 8.0,
        100.0 * (bytes.len() as f64 * 8.0 / ideal - 1.0)
    );
    Ok(())
}
