//! Full round trip: encode a scene, list the stream sections, decode and
//! evaluate against the input.
//!
//! Usage: `encode_decode [input.ply] [depth]`; a synthetic scene is used
//! without arguments.

use octolatent::codec::{decode, encode, inspect, EncodeConfig};
use octolatent::metrics::eval;
use octolatent::ply::load_ply;
use octolatent::synthetic::voxel_sphere;
use octolatent::trainer::TrainConfig;

fn main() -> octolatent::Result<()> {
    let mut args = std::env::args().skip(1);
    let (model, depth) = match args.next() {
        Some(p) => (
            load_ply(&std::fs::read(p)?)?,
            args.next().and_then(|d| d.parse().ok()).unwrap_or(10),
        ),
        None => (voxel_sphere(5, 7), 5),
    };
    let cfg = EncodeConfig {
        depth,
        train: TrainConfig {
            lambda: 1e-4,
            iterations: 300,
            ..TrainConfig::default()
        },
        attrs: vec![1, 2, 17],
        vq_size: 256,
    };
    let enc = encode(&model, &cfg)?;
    println!("{} bytes for {} voxels", enc.bytes.len(), enc.num_voxels);
    for part in inspect(&enc.bytes)?.parts {
        let id = part.attr_id.map(|a| a.to_string()).unwrap_or_default();
        println!("  {:<10} {:>3} {:>7} bytes", part.name, id, part.bytes);
    }
    let decoded = decode(&enc.bytes)?;
    println!(
        "decoded matches encoder reconstruction: {}",
        decoded == enc.reconstruction
    );
    let m = eval(&model, &decoded, depth)?.with_stream(&enc.bytes)?;
    for a in &cfg.attrs {
        let p = m.attribute(*a).unwrap();
        println!("  attr {a:>2}: {:.2} dB", p.psnr.unwrap_or(f64::INFINITY));
    }
    println!("{:.3} bits per point", m.bpp.unwrap());
    Ok(())
}
