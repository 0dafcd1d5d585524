//! Lossless octree occupancy coding.
//!
//! The tree is walked breadth first from the root; every internal node emits
//! one octet whose bit `i` marks child octant `i` as occupied. Octets are range
//! coded bit by bit (most significant first) with an adaptive binary model per
//! bit-tree prefix, so 255 contexts in total.

use crate::error::{Error, Result};
use crate::geometry::{check_depth, MortonCode, MAX_DEPTH};
use crate::range_coder::{AdaptiveBit, RangeDecoder, RangeEncoder};

/// Entropy-coded occupancy octets for a depth-`L` octree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyStream {
    pub depth: u32,
    pub bytes: Vec<u8>,
}

impl OccupancyStream {
    /// Serialized form: depth byte followed by the coded octets.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bytes.len() + 1);
        out.push(self.depth as u8);
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let (&depth, rest) = data
            .split_first()
            .ok_or_else(|| Error::bitstream("empty occupancy stream"))?;
        if depth as u32 > MAX_DEPTH {
            return Err(Error::bitstream(format!(
                "occupancy depth {depth} too large"
            )));
        }
        Ok(Self {
            depth: depth as u32,
            bytes: rest.to_vec(),
        })
    }
}

/// Breadth-first occupancy octets of the octree over `finest` (sorted,
/// deduplicated codes at `depth`).
pub fn occupancy_octets(finest: &[MortonCode], depth: u32) -> Vec<u8> {
    let mut out = Vec::new();
    // Nodes at tree level d (root is d = 0) are the finest codes shifted by 3(L - d).
    for d in 0..depth {
        let shift = depth - d - 1;
        let mut current: Option<u64> = None;
        let mut octet = 0u8;
        for &c in finest {
            let child = c.parent(shift).0;
            let node = child >> 3;
            if current != Some(node) {
                if current.is_some() {
                    out.push(octet);
                }
                current = Some(node);
                octet = 0;
            }
            octet |= 1 << (child & 7);
        }
        if current.is_some() {
            out.push(octet);
        }
    }
    out
}

struct OctetModel {
    ctx: Vec<AdaptiveBit>,
}

impl OctetModel {
    fn new() -> Self {
        Self {
            ctx: vec![AdaptiveBit::default(); 256],
        }
    }

    fn encode(&mut self, enc: &mut RangeEncoder, octet: u8) {
        let mut node = 1usize;
        for i in (0..8).rev() {
            let bit = (octet >> i) & 1 == 1;
            // A nonzero octet whose top 7 bits are clear must end in 1.
            if i == 0 && node == 1 << 7 {
                break;
            }
            enc.encode_bit(&mut self.ctx[node], bit);
            node = (node << 1) | bit as usize;
        }
    }

    fn decode(&mut self, dec: &mut RangeDecoder) -> Result<u8> {
        let mut node = 1usize;
        for i in (0..8).rev() {
            if i == 0 && node == 1 << 7 {
                node = (node << 1) | 1;
                break;
            }
            let bit = dec.decode_bit(&mut self.ctx[node])?;
            node = (node << 1) | bit as usize;
        }
        Ok((node & 0xff) as u8)
    }
}

/// Encode the finest voxel set of a depth-`depth` octree.
pub fn encode_occupancy(finest: &[MortonCode], depth: u32) -> Result<OccupancyStream> {
    check_depth(depth)?;
    if finest.is_empty() {
        return Err(Error::EmptyInput("finest voxel list"));
    }
    let mut enc = RangeEncoder::new();
    let mut model = OctetModel::new();
    for octet in occupancy_octets(finest, depth) {
        model.encode(&mut enc, octet);
    }
    Ok(OccupancyStream {
        depth,
        bytes: enc.finish(),
    })
}

/// Rebuild the Morton-sorted finest voxel list.
pub fn decode_occupancy(s: &OccupancyStream) -> Result<Vec<MortonCode>> {
    check_depth(s.depth).map_err(|e| Error::bitstream(e.to_string()))?;
    let mut dec = RangeDecoder::new(&s.bytes);
    let mut model = OctetModel::new();
    let mut nodes = vec![0u64];
    for _ in 0..s.depth {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for &n in &nodes {
            let octet = model.decode(&mut dec)?;
            for i in 0..8 {
                if octet >> i & 1 == 1 {
                    next.push((n << 3) | i as u64);
                }
            }
        }
        nodes = next;
    }
    Ok(nodes.into_iter().map(MortonCode).collect())
}
