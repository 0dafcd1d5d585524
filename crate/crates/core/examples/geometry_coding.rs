//! Lossless occupancy coding of a voxelized scene.

use octolatent::geometry::voxelize;
use octolatent::occupancy::{decode_occupancy, encode_occupancy, occupancy_octets};
use octolatent::synthetic::toy_sphere;

fn main() -> octolatent::Result<()> {
    let model = toy_sphere(20_000, 3);
    for depth in [5, 7, 9] {
        let vox = voxelize(&model.positions, depth)?;
        let octets = occupancy_octets(&vox.voxels, depth).len();
        let stream = encode_occupancy(&vox.voxels, depth)?;
        let back = decode_occupancy(&stream)?;
        assert_eq!(back, vox.voxels);
        println!(
            "depth {depth}: {:>6} voxels, {:>6} octets -> {:>6} bytes ({:.3} bits/voxel)",
            vox.len(),
            octets,
            stream.bytes.len(),
            8.0 * stream.bytes.len() as f64 / vox.len() as f64
        );
    }
    Ok(())
}
