//! Latent pyramids, copy upsampling and the per-attribute decoder network.

use crate::autodiff::{affine_fwd, conv_fwd, relu_fwd, upsample_fwd, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{morton_decode, morton_encode, MortonCode, OctreeHierarchy, VoxelCoord};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// One real latent per occupied voxel at each of `k` resolutions.
/// `levels[j]` is aligned with `OctreeHierarchy::levels[j]` (level 0 finest).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPyramid {
    pub attr_id: u8,
    pub levels: Vec<Vec<f32>>,
}

impl LatentPyramid {
    pub fn zeros(attr_id: u8, h: &OctreeHierarchy) -> Self {
        Self {
            attr_id,
            levels: h.levels.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }

    pub fn num_symbols(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn check(&self, h: &OctreeHierarchy) -> Result<()> {
        if self.levels.len() != h.num_levels() {
            return Err(Error::shape(format!(
                "pyramid has {} levels, hierarchy {}",
                self.levels.len(),
                h.num_levels()
            )));
        }
        for (j, (l, hl)) in self.levels.iter().zip(&h.levels).enumerate() {
            if l.len() != hl.len() {
                return Err(Error::shape(format!(
                    "level {j}: {} latents for {} voxels",
                    l.len(),
                    hl.len()
                )));
            }
        }
        Ok(())
    }
}

/// `M x k` matrix; column `j` holds each finest voxel's level-`j` ancestor latent.
pub type UpsampledFeatures = Mat<f32>;

pub fn upsample_copy(p: &LatentPyramid, h: &OctreeHierarchy) -> Result<UpsampledFeatures> {
    p.check(h)?;
    let levels: Vec<Mat<f32>> = p
        .levels
        .iter()
        .map(|l| Mat::column_vector(l.clone()))
        .collect();
    let refs: Vec<&Mat<f32>> = levels.iter().collect();
    Ok(upsample_fwd(&refs, &h.parent_map))
}

/// Index of tap `(dx, dy, dz)`, each in `-1..=1`.
pub const fn tap_index(dx: i32, dy: i32, dz: i32) -> usize {
    ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
}

pub const CENTER_TAP: usize = tap_index(0, 0, 0);

/// Occupied 3x3x3 neighbours of every finest voxel, as `(tap, index)` pairs in
/// ascending tap order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    offsets: Vec<u32>,
    entries: Vec<(u8, u32)>,
}

impl NeighborTable {
    pub fn new(h: &OctreeHierarchy) -> Self {
        Self::from_codes(h.finest(), h.depth())
    }

    /// `codes` must be sorted; lookups are binary searches.
    pub fn from_codes(codes: &[MortonCode], depth: u32) -> Self {
        let side = 1i64 << depth;
        let mut offsets = Vec::with_capacity(codes.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for &c in codes {
            let v = morton_decode(c, depth).expect("valid code");
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let (x, y, z) = (v.x as i64 + dx, v.y as i64 + dy, v.z as i64 + dz);
                        if [x, y, z].iter().any(|&a| a < 0 || a >= side) {
                            continue;
                        }
                        let n = morton_encode(VoxelCoord::new(x as u32, y as u32, z as u32), depth)
                            .expect("inside grid");
                        if let Ok(j) = codes.binary_search(&n) {
                            entries
                                .push((tap_index(dx as i32, dy as i32, dz as i32) as u8, j as u32));
                        }
                    }
                }
            }
            offsets.push(entries.len() as u32);
        }
        Self { offsets, entries }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[(u8, u32)] {
        &self.entries[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn total_entries(&self) -> usize {
        self.entries.len()
    }
}

/// Sparse 3x3x3 convolution; missing neighbours contribute zero.
/// `kernel` is `(27 * c_in) x c_out`, row `tap * c_in + ci`.
pub fn sparse_conv3(
    features: &Mat<f32>,
    nbr: &NeighborTable,
    kernel: &Mat<f32>,
    bias: &Mat<f32>,
) -> Result<Mat<f32>> {
    if features.rows != nbr.len()
        || kernel.rows != 27 * features.cols
        || bias.shape() != (1, kernel.cols)
    {
        return Err(Error::shape(format!(
            "sparse conv: features {:?}, kernel {:?}, bias {:?}, {} voxels",
            features.shape(),
            kernel.shape(),
            bias.shape(),
            nbr.len()
        )));
    }
    Ok(conv_fwd(features, kernel, bias, nbr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub conv_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            conv_hidden: 8,
        }
    }
}

/// Two pointwise affine layers, then two sparse convolutions over the finest
/// voxels. ReLU after the first three layers, identity at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNet {
    pub in_width: usize,
    pub config: DecoderConfig,
    pub out_channels: usize,
    /// `W1 b1 W2 b2 K3 b3 K4 b4`.
    pub tensors: Vec<Mat<f32>>,
}

pub fn count_params(tensors: &[Mat<f32>]) -> usize {
    tensors.iter().map(Mat::len).sum()
}

/// Uniform init in `+-1/sqrt(fan_in)` for weights and biases alike.
pub(crate) fn init_tensors(shapes: &[(usize, usize)], rng: &mut impl Rng) -> Vec<Mat<f32>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut fan_in = 1;
    for (t, &(r, c)) in shapes.iter().enumerate() {
        if t % 2 == 0 {
            fan_in = r;
        }
        let a = 1.0 / (fan_in as f32).sqrt();
        out.push(Mat {
            rows: r,
            cols: c,
            data: (0..r * c).map(|_| rng.random_range(-a..a)).collect(),
        });
    }
    out
}

pub(crate) fn check_tensors(
    tensors: &[Mat<f32>],
    shapes: &[(usize, usize)],
    what: &str,
) -> Result<()> {
    if tensors.len() != shapes.len() {
        return Err(Error::shape(format!(
            "{what}: {} tensors, expected {}",
            tensors.len(),
            shapes.len()
        )));
    }
    for (i, (t, &s)) in tensors.iter().zip(shapes).enumerate() {
        if t.shape() != s {
            return Err(Error::shape(format!(
                "{what} tensor {i}: {:?}, expected {s:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

impl DecoderNet {
    pub fn shapes(
        in_width: usize,
        config: DecoderConfig,
        out_channels: usize,
    ) -> Vec<(usize, usize)> {
        let (h, ch) = (config.hidden, config.conv_hidden);
        vec![
            (in_width, h),
            (1, h),
            (h, h),
            (1, h),
            (27 * h, ch),
            (1, ch),
            (27 * ch, out_channels),
            (1, out_channels),
        ]
    }

    pub fn zeros(in_width: usize, config: DecoderConfig, out_channels: usize) -> Self {
        let tensors = Self::shapes(in_width, config, out_channels)
            .into_iter()
            .map(|(r, c)| Mat::zeros(r, c))
            .collect();
        Self {
            in_width,
            config,
            out_channels,
            tensors,
        }
    }

    pub fn init(
        in_width: usize,
        config: DecoderConfig,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let tensors = init_tensors(&Self::shapes(in_width, config, out_channels), rng);
        Self {
            in_width,
            config,
            out_channels,
            tensors,
        }
    }

    pub fn from_tensors(
        in_width: usize,
        config: DecoderConfig,
        out_channels: usize,
        tensors: Vec<Mat<f32>>,
    ) -> Result<Self> {
        check_tensors(
            &tensors,
            &Self::shapes(in_width, config, out_channels),
            "decoder",
        )?;
        Ok(Self {
            in_width,
            config,
            out_channels,
            tensors,
        })
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.tensors)
    }

    /// Records the decoder on `tape`, reading its tensors from parameter
    /// slots `first_slot..first_slot + 8`.
    pub fn record(
        tape: &mut Tape,
        feats: NodeId,
        in_width: usize,
        config: DecoderConfig,
        out_channels: usize,
        nbr: Arc<NeighborTable>,
        first_slot: usize,
    ) -> Result<NodeId> {
        let shapes = Self::shapes(in_width, config, out_channels);
        let mut p = Vec::with_capacity(8);
        for (i, &(r, c)) in shapes.iter().enumerate() {
            p.push(tape.param(first_slot + i, r, c)?);
        }
        let h = tape.affine(feats, p[0], p[1])?;
        let h = tape.relu(h)?;
        let h = tape.affine(h, p[2], p[3])?;
        let h = tape.relu(h)?;
        let h = tape.sparse_conv(h, p[4], p[5], nbr.clone())?;
        let h = tape.relu(h)?;
        tape.sparse_conv(h, p[6], p[7], nbr)
    }
}

/// Reconstruction in the normalized attribute domain, `M x c`.
pub fn decoder_forward(
    feats: &UpsampledFeatures,
    net: &DecoderNet,
    nbr: &NeighborTable,
) -> Result<Mat<f32>> {
    if feats.cols != net.in_width {
        return Err(Error::shape(format!(
            "features have width {}, decoder expects {}",
            feats.cols, net.in_width
        )));
    }
    if feats.rows != nbr.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} voxels",
            feats.rows,
            nbr.len()
        )));
    }
    check_tensors(
        &net.tensors,
        &DecoderNet::shapes(net.in_width, net.config, net.out_channels),
        "decoder",
    )?;
    let t = &net.tensors;
    let h = relu_fwd(&affine_fwd(feats, &t[0], &t[1]));
    let h = relu_fwd(&affine_fwd(&h, &t[2], &t[3]));
    let h = relu_fwd(&conv_fwd(&h, &t[4], &t[5], nbr));
    Ok(conv_fwd(&h, &t[6], &t[7], nbr))
}
