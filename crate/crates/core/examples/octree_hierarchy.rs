//! Voxelize a synthetic scene, build the latent hierarchy and show that
//! Morton order is the breadth-first order of the octree.

use octolatent::geometry::{morton_decode, voxelize};
use octolatent::synthetic::toy_sphere;

fn main() -> octolatent::Result<()> {
    let model = toy_sphere(5000, 1);
    let depth = 6;
    let vox = voxelize(&model.positions, depth)?;
    println!(
        "{} Gaussians -> {} voxels at depth {depth} (cube side {:.3})",
        model.len(),
        vox.len(),
        vox.grid.side
    );
    let largest = vox.merge_groups.iter().map(Vec::len).max().unwrap_or(0);
    println!("largest merge group: {largest}");

    let h = vox.hierarchy(5)?;
    for (j, level) in h.levels.iter().enumerate() {
        println!(
            "level {j} (resolution {}): {} voxels",
            depth - j as u32,
            level.len()
        );
    }

    // Breadth-first walk: a child exists if some finest voxel descends from it.
    let finest: Vec<u64> = h.finest().iter().map(|c| c.0).collect();
    let mut frontier = vec![0u64];
    for d in 1..=depth {
        let shift = 3 * (depth - d);
        let mut next = Vec::new();
        for &node in &frontier {
            for child in 0..8 {
                let c = node << 3 | child;
                let lo = finest.partition_point(|&f| f >> shift < c);
                if lo < finest.len() && finest[lo] >> shift == c {
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    println!("breadth-first order equals Morton order: {}", frontier == finest);

    let first = morton_decode(h.finest()[0], depth)?;
    println!(
        "first voxel {:?} centred at {:?}",
        first,
        h.grid.voxel_center(first)
    );
    Ok(())
}
