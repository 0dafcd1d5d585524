//! Voxel grids, Morton ordering and the multi-resolution octree hierarchy.
//!
//! Every attribute codec shares one [`OctreeHierarchy`]: level `j` holds the
//! occupied voxels at resolution `L - j`, sorted by Morton code, and
//! `parent_map[j][i]` points each finest voxel `i` at its ancestor in level `j`.
//! Because a coarse Morton code is just the fine code shifted right by `3j`
//! bits, sorting by code at the finest level also sorts every ancestor list.

use crate::error::{Error, Result};

/// Deepest grid a 64-bit Morton code can address (3 * 21 = 63 bits).
pub const MAX_DEPTH: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    /// Ancestor coordinates `levels` octree levels up.
    pub const fn shr(self, levels: u32) -> Self {
        Self::new(self.x >> levels, self.y >> levels, self.z >> levels)
    }
}

/// Bit-interleaved voxel index. Bit `b` of x lands at bit `3b + 2`, y at
/// `3b + 1`, z at `3b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MortonCode(pub u64);

impl MortonCode {
    /// Code of the ancestor `levels` levels up.
    #[inline]
    pub const fn parent(self, levels: u32) -> Self {
        MortonCode(self.0 >> (3 * levels))
    }

    /// Octant of this code inside its parent (x bit most significant).
    #[inline]
    pub const fn child_index(self) -> u8 {
        (self.0 & 7) as u8
    }
}

#[inline]
fn spread3(v: u32) -> u64 {
    let mut x = (v as u64) & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact3(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

pub(crate) fn check_depth(depth: u32) -> Result<()> {
    if depth > MAX_DEPTH {
        return Err(Error::Range(format!("depth {depth} exceeds {MAX_DEPTH}")));
    }
    Ok(())
}

pub fn morton_encode(v: VoxelCoord, depth: u32) -> Result<MortonCode> {
    check_depth(depth)?;
    let limit = 1u64 << depth;
    if v.x as u64 >= limit || v.y as u64 >= limit || v.z as u64 >= limit {
        return Err(Error::Range(format!(
            "voxel ({}, {}, {}) outside a 2^{depth} grid",
            v.x, v.y, v.z
        )));
    }
    Ok(MortonCode(
        (spread3(v.x) << 2) | (spread3(v.y) << 1) | spread3(v.z),
    ))
}

pub fn morton_decode(c: MortonCode, depth: u32) -> Result<VoxelCoord> {
    check_depth(depth)?;
    if depth < MAX_DEPTH && c.0 >= 1u64 << (3 * depth) {
        return Err(Error::Range(format!(
            "morton code {} outside a depth-{depth} grid",
            c.0
        )));
    }
    Ok(VoxelCoord::new(
        compact3(c.0 >> 2),
        compact3(c.0 >> 1),
        compact3(c.0),
    ))
}

/// Cubic voxel grid anchored at the per-axis minimum of a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub depth: u32,
    pub bbox_min: [f32; 3],
    /// Side length `W` of the bounding cube, in scene units.
    pub side: f32,
}

impl Grid {
    /// Smallest cube containing `positions`. A zero extent gets `W = 1`.
    pub fn fit(positions: &[[f32; 3]], depth: u32) -> Result<Self> {
        check_depth(depth)?;
        let first = positions.first().ok_or(Error::EmptyInput("positions"))?;
        let mut lo = *first;
        let mut hi = *first;
        for (i, p) in positions.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data {
                    index: i,
                    message: "non-finite position".into(),
                });
            }
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f32, f32::max);
        let side = if side > 0.0 && side.is_finite() {
            side
        } else {
            1.0
        };
        Ok(Grid {
            depth,
            bbox_min: lo,
            side,
        })
    }

    pub fn cells_per_axis(&self) -> u32 {
        1u32 << self.depth
    }

    /// Voxel containing `p`; points outside the cube clamp to the border cells.
    pub fn voxel_of(&self, p: [f32; 3]) -> VoxelCoord {
        let n = self.cells_per_axis() as f64;
        let idx = |a: usize| -> u32 {
            let t = (p[a] as f64 - self.bbox_min[a] as f64) / self.side as f64 * n;
            t.floor().clamp(0.0, n - 1.0) as u32
        };
        VoxelCoord::new(idx(0), idx(1), idx(2))
    }

    /// Centre of a finest-level voxel in scene units.
    pub fn voxel_center(&self, v: VoxelCoord) -> [f32; 3] {
        let cell = self.side as f64 / self.cells_per_axis() as f64;
        let c = |a: usize, i: u32| (self.bbox_min[a] as f64 + (i as f64 + 0.5) * cell) as f32;
        [c(0, v.x), c(1, v.y), c(2, v.z)]
    }
}

/// Output of [`voxelize`]: the Morton-sorted occupied voxels and, for each,
/// the source points that landed in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelization {
    pub grid: Grid,
    pub voxels: Vec<MortonCode>,
    /// `merge_groups[i]` lists the input indices merged into `voxels[i]`,
    /// in ascending order.
    pub merge_groups: Vec<Vec<usize>>,
}

impl Voxelization {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn hierarchy(&self, levels: usize) -> Result<OctreeHierarchy> {
        build_hierarchy(&self.voxels, self.grid, levels)
    }
}

pub fn voxelize(positions: &[[f32; 3]], depth: u32) -> Result<Voxelization> {
    let grid = Grid::fit(positions, depth)?;
    voxelize_on(positions, grid)
}

/// Voxelize onto an existing grid (used to compare decoded clouds against a
/// reference grid).
pub fn voxelize_on(positions: &[[f32; 3]], grid: Grid) -> Result<Voxelization> {
    if positions.is_empty() {
        return Err(Error::EmptyInput("positions"));
    }
    let mut keyed: Vec<(MortonCode, usize)> = positions
        .iter()
        .enumerate()
        .map(|(i, &p)| Ok((morton_encode(grid.voxel_of(p), grid.depth)?, i)))
        .collect::<Result<_>>()?;
    keyed.sort_unstable();

    let mut voxels = Vec::new();
    let mut merge_groups: Vec<Vec<usize>> = Vec::new();
    for (code, idx) in keyed {
        if voxels.last() == Some(&code) {
            merge_groups.last_mut().unwrap().push(idx);
        } else {
            voxels.push(code);
            merge_groups.push(vec![idx]);
        }
    }
    Ok(Voxelization {
        grid,
        voxels,
        merge_groups,
    })
}

/// Multi-resolution octree over the occupied finest voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct OctreeHierarchy {
    pub grid: Grid,
    /// `levels[j]` holds the occupied voxels at resolution `L - j`.
    pub levels: Vec<Vec<MortonCode>>,
    /// `parent_map[j][i]` is the index in `levels[j]` of finest voxel `i`'s ancestor.
    pub parent_map: Vec<Vec<u32>>,
}

impl OctreeHierarchy {
    pub fn depth(&self) -> u32 {
        self.grid.depth
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Number of finest voxels `M`.
    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    pub fn finest(&self) -> &[MortonCode] {
        &self.levels[0]
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn coord(&self, fine_idx: usize) -> VoxelCoord {
        morton_decode(self.levels[0][fine_idx], self.grid.depth).expect("codes validated at build")
    }
}

pub fn build_hierarchy(
    finest: &[MortonCode],
    grid: Grid,
    levels: usize,
) -> Result<OctreeHierarchy> {
    let depth = grid.depth;
    check_depth(depth)?;
    if levels == 0 || levels > depth as usize + 1 {
        return Err(Error::Config(format!(
            "{levels} latent levels need 1 <= k <= L + 1 = {}",
            depth + 1
        )));
    }
    if finest.is_empty() {
        return Err(Error::EmptyInput("finest voxel list"));
    }
    for w in finest.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Config(
                "finest voxel list must be strictly increasing in Morton order".into(),
            ));
        }
    }
    if depth < MAX_DEPTH && finest.last().unwrap().0 >= 1u64 << (3 * depth) {
        return Err(Error::Range("finest voxel outside the grid".into()));
    }

    let mut level_lists = Vec::with_capacity(levels);
    let mut parent_map = Vec::with_capacity(levels);
    for j in 0..levels as u32 {
        let mut list: Vec<MortonCode> = Vec::new();
        let mut parents = Vec::with_capacity(finest.len());
        for &c in finest {
            let p = c.parent(j);
            if list.last() != Some(&p) {
                list.push(p);
            }
            parents.push((list.len() - 1) as u32);
        }
        level_lists.push(list);
        parent_map.push(parents);
    }
    Ok(OctreeHierarchy {
        grid,
        levels: level_lists,
        parent_map,
    })
}

/// Position of finest voxel `fine_idx`'s ancestor in level `j`.
pub fn parent_index(fine_idx: usize, j: usize, h: &OctreeHierarchy) -> Result<usize> {
    let map = h
        .parent_map
        .get(j)
        .ok_or_else(|| Error::Range(format!("level offset {j} >= {}", h.num_levels())))?;
    map.get(fine_idx)
        .map(|&p| p as usize)
        .ok_or_else(|| Error::Range(format!("voxel index {fine_idx} >= {}", map.len())))
}
