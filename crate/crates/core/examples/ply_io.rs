//! Write a 3DGS PLY, read it back and merge co-located Gaussians.
//!
//! Pass a path to inspect an existing file instead.

use octolatent::gaussian::{attribute_name, merge_attributes};
use octolatent::geometry::voxelize;
use octolatent::ply::{load_ply, save_ply};
use octolatent::synthetic::toy_sphere;

fn main() -> octolatent::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_ply(&std::fs::read(path)?)?,
        None => {
            let m = toy_sphere(1000, 5);
            let bytes = save_ply(&m)?;
            println!("wrote {} bytes of binary PLY", bytes.len());
            let back = load_ply(&bytes)?;
            assert_eq!(back, m);
            back
        }
    };
    println!("{} Gaussians", model.len());
    let vox = voxelize(&model.positions, 5)?;
    let merged = merge_attributes(&model, &vox)?;
    for a in [1u8, 2, 16, 17] {
        let m = merged.attribute(a);
        let (lo, hi) = m
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        println!(
            "{:>8}: {} voxels x {} channels, values in [{lo:.3}, {hi:.3}]",
            attribute_name(a),
            m.rows(),
            m.channels
        );
    }
    Ok(())
}
