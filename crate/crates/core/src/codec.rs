//! Whole-model encode and decode.
//!
//! Encoding voxelizes the scene, codes the occupancy losslessly, vector
//! quantizes the covariances, trains one latent codec per attribute, then
//! quantizes and range codes the latents and networks. Decoding mirrors the
//! last steps and places one Gaussian at every occupied voxel centre.

use crate::arm::{arm_forward, build_context, estimate_rate, ArmNet};
use crate::bitstream::{
    pack_bits, unpack_bits, AttrHeader, ByteReader, ByteWriter, Container, Section, SectionTag,
    StreamHeader,
};
use crate::error::{Error, Result, StageExt};
use crate::gaussian::{
    attribute_channels, denormalize, normalize, AttributeMatrix, GaussianModel,
    NormalizationParams, NUM_ATTRIBUTES, OPACITY_ATTR, SH_COEFFS,
};
use crate::geometry::{
    build_hierarchy, morton_decode, voxelize, Grid, MortonCode, OctreeHierarchy, MAX_DEPTH,
};
use crate::latent::{
    decoder_forward, upsample_copy, DecoderConfig, DecoderNet, LatentPyramid, NeighborTable,
};
use crate::occupancy::{decode_occupancy, encode_occupancy, OccupancyStream};
use crate::quant::{
    quantize_latents, quantize_net, weight_cdf, QuantizedLevel, QuantizedNet, QuantizedPyramid,
    QuantizedTensor, MAX_WEIGHT_INT,
};
use crate::range_coder::{laplace_integer_cdf, RangeDecoder, RangeEncoder};
use crate::tensor::Mat;
use crate::trainer::{rd_loss, train_model, LossReport, TrainConfig, TrainedAttribute};
use crate::vq::COV_DIM;
use crate::vq::{covariance_row, index_bits, vq_decode, vq_encode, vq_train, CovCodebook, CovRow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeConfig {
    pub depth: u32,
    pub train: TrainConfig,
    /// Attribute ids to code. Attributes left out decode as zero.
    pub attrs: Vec<u8>,
    pub vq_size: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            depth: 10,
            train: TrainConfig::default(),
            attrs: (1..=NUM_ATTRIBUTES as u8).collect(),
            vq_size: crate::vq::DEFAULT_CODEBOOK_SIZE,
        }
    }
}

impl EncodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(Error::Config(format!(
                "depth must lie in 1..={MAX_DEPTH}, got {}",
                self.depth
            )));
        }
        if self.attrs.is_empty() {
            return Err(Error::Config("no attributes selected".into()));
        }
        let mut seen = [false; NUM_ATTRIBUTES + 1];
        for &a in &self.attrs {
            if a == 0 || a as usize > NUM_ATTRIBUTES {
                return Err(Error::Config(format!("unknown attribute id {a}")));
            }
            if std::mem::replace(&mut seen[a as usize], true) {
                return Err(Error::Config(format!("attribute {a} listed twice")));
            }
        }
        if self.vq_size == 0 {
            return Err(Error::Config("codebook size must be at least 1".into()));
        }
        let t = &self.train;
        let widths = [
            t.levels,
            t.context,
            t.arm_hidden,
            t.decoder.hidden,
            t.decoder.conv_hidden,
        ];
        if widths.iter().any(|&w| w > u8::MAX as usize) {
            return Err(Error::Config("architecture widths must be <= 255".into()));
        }
        Ok(())
    }
}

/// Encoder-side figures for one coded attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrStats {
    pub attr_id: u8,
    pub net_bytes: usize,
    pub latent_bytes: usize,
    /// Range-coded part of the latent section, framing excluded.
    pub latent_coded_bytes: usize,
    /// Modeled latent codelength of the integer latents under the quantized ARM.
    pub estimated_latent_bits: f64,
    /// Training loss of the real-valued state, latents rounded.
    pub trained: LossReport,
    /// Normalized-domain MSE of the coded reconstruction.
    pub distortion: f64,
    pub restarted: bool,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    /// What [`decode`] returns for `bytes`.
    pub reconstruction: GaussianModel,
    pub num_voxels: usize,
    pub attrs: Vec<AttrStats>,
    pub trained: Vec<TrainedAttribute>,
}

pub fn encode(model: &GaussianModel, cfg: &EncodeConfig) -> Result<Encoded> {
    cfg.validate().stage("config")?;
    model.validate().stage("input")?;
    let tc = &cfg.train;

    let vox = voxelize(&model.positions, cfg.depth).stage("voxelize")?;
    let h = vox.hierarchy(tc.levels).stage("hierarchy")?;
    let merged = crate::gaussian::merge_attributes(model, &vox).stage("merge")?;
    let m = h.len();

    let occupancy = encode_occupancy(h.finest(), cfg.depth).stage("geometry")?;

    let rows: Vec<CovRow> = merged
        .scales
        .iter()
        .zip(&merged.rotations)
        .map(|(&s, &r)| covariance_row(s, r))
        .collect();
    let codebook = vq_train(&rows, cfg.vq_size, tc.seed).stage("covariance")?;
    let indices = vq_encode(&rows, &codebook).stage("covariance")?;
    let cov = vq_decode(&indices, &codebook).stage("covariance")?;

    let targets: Vec<AttributeMatrix> = cfg
        .attrs
        .iter()
        .map(|&a| merged.attribute(a).clone())
        .collect();
    let trained = train_model(&targets, &h, tc).stage("train")?;

    let nbr = NeighborTable::new(&h);
    let coded: Vec<CodedAttribute> = trained
        .par_iter()
        .zip(&targets)
        .map(|(t, target)| {
            code_attribute(t, target, &h, &nbr, tc).map_err(|e| Error::Attribute {
                attr: t.attr_id,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()
        .stage("quantize")?;

    let header = StreamHeader {
        depth: cfg.depth as u8,
        levels: tc.levels as u8,
        context: tc.context as u8,
        arm_hidden: tc.arm_hidden as u8,
        decoder_hidden: tc.decoder.hidden as u8,
        decoder_conv_hidden: tc.decoder.conv_hidden as u8,
        num_voxels: m as u32,
        lambda: tc.lambda,
        bbox_min: vox.grid.bbox_min,
        side: vox.grid.side,
        level_sizes: h.level_sizes().iter().map(|&s| s as u32).collect(),
        attributes: coded
            .iter()
            .map(|c| AttrHeader {
                attr_id: c.attr_id,
                norm: c.norm.clone(),
                decoder_params: c.decoder_params as u32,
                arm_params: c.arm_params as u32,
            })
            .collect(),
    };
    let mut sections = vec![
        Section {
            tag: SectionTag::Geometry,
            id: 0,
            payload: occupancy.to_bytes(),
        },
        Section {
            tag: SectionTag::Covariance,
            id: 0,
            payload: covariance_payload(&codebook, &indices),
        },
    ];
    for c in &coded {
        sections.push(Section {
            tag: SectionTag::AttrNets,
            id: c.attr_id,
            payload: c.nets.clone(),
        });
        sections.push(Section {
            tag: SectionTag::AttrLatents,
            id: c.attr_id,
            payload: c.latents.clone(),
        });
    }
    let bytes = Container { header, sections }.to_bytes();

    let recon: Vec<AttributeMatrix> = coded.iter().map(|c| c.reconstruction.clone()).collect();
    let reconstruction = assemble_model(&vox.grid, h.finest(), &cov, &recon)?;
    let attrs = coded
        .iter()
        .zip(&trained)
        .map(|(c, t)| AttrStats {
            attr_id: c.attr_id,
            net_bytes: c.nets.len(),
            latent_bytes: c.latents.len(),
            latent_coded_bytes: c.latent_coded_bytes,
            estimated_latent_bits: c.estimated_latent_bits,
            trained: t.report,
            distortion: c.distortion,
            restarted: t.restarted,
        })
        .collect();
    Ok(Encoded {
        bytes,
        reconstruction,
        num_voxels: m,
        attrs,
        trained,
    })
}

struct CodedAttribute {
    attr_id: u8,
    norm: NormalizationParams,
    decoder_params: usize,
    arm_params: usize,
    nets: Vec<u8>,
    latents: Vec<u8>,
    latent_coded_bytes: usize,
    estimated_latent_bits: f64,
    distortion: f64,
    reconstruction: AttributeMatrix,
}

fn code_attribute(
    t: &TrainedAttribute,
    target: &AttributeMatrix,
    h: &OctreeHierarchy,
    nbr: &NeighborTable,
    tc: &TrainConfig,
) -> Result<CodedAttribute> {
    let (target_n, norm) = normalize(target);
    let q = quantize_latents(&t.pyramid)?;
    let y = q.dequantize();
    let lambda = tc.lambda;
    let bits_weight = lambda / h.len() as f64;
    let (cfg, c) = (t.decoder.config, t.decoder.out_channels);

    let qdec = quantize_net(&t.decoder.tensors, bits_weight, |ts| {
        let dec = DecoderNet::from_tensors(h.num_levels(), cfg, c, ts.to_vec())?;
        Ok(rd_loss(&target_n, h, nbr, &y, &dec, &t.arm, lambda)?.loss)
    })?;
    let decoder = DecoderNet::from_tensors(h.num_levels(), cfg, c, qdec.dequantize())?;
    let qarm = quantize_net(&t.arm.tensors, bits_weight, |ts| {
        let arm = ArmNet::from_tensors(tc.context, tc.arm_hidden, ts.to_vec())?;
        Ok(rd_loss(&target_n, h, nbr, &y, &decoder, &arm, lambda)?.loss)
    })?;
    let arm = ArmNet::from_tensors(tc.context, tc.arm_hidden, qarm.dequantize())?;

    let nets = nets_payload(&[&qdec, &qarm])?;
    let (latents, latent_coded_bytes) = latents_payload(&q, &arm)?;
    let estimated_latent_bits = estimate_rate(&y, &arm)?;
    let rec_n = decoder_forward(&upsample_copy(&y, h)?, &decoder, nbr)?;
    let distortion = rec_n
        .data
        .iter()
        .zip(&target_n.values)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / rec_n.len() as f64;
    let reconstruction = denormalize(&AttributeMatrix::new(t.attr_id, c, rec_n.data)?, &norm);
    Ok(CodedAttribute {
        attr_id: t.attr_id,
        norm,
        decoder_params: decoder.count_params(),
        arm_params: arm.count_params(),
        nets,
        latents,
        latent_coded_bytes,
        estimated_latent_bits,
        distortion,
        reconstruction,
    })
}

fn covariance_payload(codebook: &CovCodebook, indices: &[u32]) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u32(codebook.len() as u32);
    for c in &codebook.codewords {
        for &v in c {
            w.f32(v);
        }
    }
    w.bytes(&pack_bits(indices, codebook.index_bits()));
    w.into_inner()
}

fn parse_covariance(payload: &[u8], m: usize) -> Result<Vec<CovRow>> {
    let mut r = ByteReader::new(payload);
    let k = r.u32()? as usize;
    if k == 0 {
        return Err(Error::bitstream("empty covariance codebook"));
    }
    if k > payload.len() / (4 * COV_DIM) {
        return Err(Error::bitstream("codebook larger than its section"));
    }
    let mut codewords = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c = [0.0f32; COV_DIM];
        for v in &mut c {
            *v = r.f32()?;
        }
        codewords.push(c);
    }
    let bits = index_bits(k);
    let packed = r.take((m * bits as usize).div_ceil(8))?;
    if !r.is_empty() {
        return Err(Error::bitstream("trailing bytes in covariance section"));
    }
    vq_decode(&unpack_bits(packed, m, bits)?, &CovCodebook { codewords })
}

/// Per tensor `shift, max_abs, scale`, then one range-coded blob holding every
/// weight in tensor order.
fn nets_payload(nets: &[&QuantizedNet]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    let mut enc = RangeEncoder::new();
    for t in nets.iter().flat_map(|n| &n.tensors) {
        let m = t.max_abs();
        let scale = t.scale();
        w.u8(t.shift);
        w.u16(m as u16);
        w.f32(scale);
        if m > 0 {
            let cdf = weight_cdf(m, scale)?;
            for &v in &t.values {
                enc.encode(&cdf, (v + m) as usize);
            }
        }
    }
    w.blob(&enc.finish());
    Ok(w.into_inner())
}

fn parse_nets(payload: &[u8], shapes: &[(usize, usize)]) -> Result<Vec<QuantizedTensor>> {
    let mut r = ByteReader::new(payload);
    let mut heads = Vec::with_capacity(shapes.len());
    for _ in shapes {
        let shift = r.u8()?;
        let m = r.u16()? as i32;
        let scale = r.f32()?;
        if !crate::quant::STEP_SHIFTS.contains(&shift) || m > MAX_WEIGHT_INT {
            return Err(Error::bitstream("weight step or range out of bounds"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::bitstream("bad weight scale"));
        }
        heads.push((shift, m, scale));
    }
    let blob = r.blob()?;
    if !r.is_empty() {
        return Err(Error::bitstream("trailing bytes in net section"));
    }
    let mut dec = RangeDecoder::new(blob);
    let mut out = Vec::with_capacity(shapes.len());
    for (&(rows, cols), &(shift, m, scale)) in shapes.iter().zip(&heads) {
        let mut values = vec![0i32; rows * cols];
        if m > 0 {
            let cdf = weight_cdf(m, scale)?;
            for v in &mut values {
                *v = dec.decode(&cdf)? as i32 - m;
            }
        }
        out.push(QuantizedTensor {
            rows,
            cols,
            shift,
            values,
        });
    }
    Ok(out)
}

/// Levels coarse to fine, each `lo, hi` and a range-coded blob (empty when
/// the level holds a single value). Also returns the total blob length.
fn latents_payload(q: &QuantizedPyramid, arm: &ArmNet) -> Result<(Vec<u8>, usize)> {
    let mut w = ByteWriter::default();
    let mut coded = 0;
    for level in q.levels.iter().rev() {
        w.i32(level.lo);
        w.i32(level.hi);
        if level.lo == level.hi {
            w.blob(&[]);
            continue;
        }
        let vals: Vec<f32> = level.values.iter().map(|&v| v as f32).collect();
        let params = arm.params_for_level(&vals)?;
        let mut enc = RangeEncoder::new();
        for (&v, p) in level.values.iter().zip(&params) {
            let cdf = laplace_integer_cdf(p.mu, p.b, level.lo, level.hi)?;
            enc.encode(&cdf, (v - level.lo) as usize);
        }
        let blob = enc.finish();
        coded += blob.len();
        w.blob(&blob);
    }
    Ok((w.into_inner(), coded))
}

fn parse_latents(
    payload: &[u8],
    attr_id: u8,
    sizes: &[usize],
    arm: &ArmNet,
) -> Result<QuantizedPyramid> {
    let mut r = ByteReader::new(payload);
    let mut levels = vec![QuantizedLevel::from_values(Vec::new()); sizes.len()];
    for j in (0..sizes.len()).rev() {
        let lo = r.i32()?;
        let hi = r.i32()?;
        if hi < lo || hi as i64 - lo as i64 >= crate::range_coder::PROB_TOTAL as i64 {
            return Err(Error::bitstream(format!("bad latent range [{lo}, {hi}]")));
        }
        let blob = r.blob()?;
        let n = sizes[j];
        let values = if lo == hi {
            vec![lo; n]
        } else {
            let mut dec = RangeDecoder::new(blob);
            let mut vals: Vec<f32> = Vec::with_capacity(n);
            let mut ints = Vec::with_capacity(n);
            for i in 0..n {
                let p = arm_forward(&build_context(&vals, i, arm.context), arm)?;
                let cdf = laplace_integer_cdf(p.mu, p.b, lo, hi)?;
                let v = dec.decode(&cdf)? as i32 + lo;
                ints.push(v);
                vals.push(v as f32);
            }
            ints
        };
        levels[j] = QuantizedLevel { lo, hi, values };
    }
    if !r.is_empty() {
        return Err(Error::bitstream("trailing bytes in latent section"));
    }
    Ok(QuantizedPyramid { attr_id, levels })
}

/// One Gaussian per voxel centre. Uncoded attributes are zero.
fn assemble_model(
    grid: &Grid,
    finest: &[MortonCode],
    cov: &[CovRow],
    attrs: &[AttributeMatrix],
) -> Result<GaussianModel> {
    let m = finest.len();
    let mut model = GaussianModel {
        positions: Vec::with_capacity(m),
        scales: Vec::with_capacity(m),
        rotations: Vec::with_capacity(m),
        sh: vec![[[0.0; 3]; SH_COEFFS]; m],
        opacities: vec![0.0; m],
    };
    for (&code, row) in finest.iter().zip(cov) {
        model
            .positions
            .push(grid.voxel_center(morton_decode(code, grid.depth)?));
        model.scales.push([row[0], row[1], row[2]]);
        model.rotations.push([row[3], row[4], row[5], row[6]]);
    }
    for a in attrs {
        if a.rows() != m || a.channels != attribute_channels(a.attr_id) {
            return Err(Error::shape(format!("attribute {} shape", a.attr_id)));
        }
        for i in 0..m {
            if a.attr_id == OPACITY_ATTR {
                model.opacities[i] = a.values[i];
            } else {
                let k = (a.attr_id - 1) as usize;
                model.sh[i][k].copy_from_slice(a.row(i));
            }
        }
    }
    Ok(model)
}

/// Parsed and validated stream, short of the per-attribute payloads.
struct Frame {
    container: Container,
    grid: Grid,
    h: OctreeHierarchy,
    cov: Vec<CovRow>,
}

fn open(bytes: &[u8]) -> Result<Frame> {
    let container = Container::from_bytes(bytes).stage("container")?;
    let hd = &container.header;
    let depth = hd.depth as u32;
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::bitstream(format!("bad depth {depth}"))).stage("container");
    }
    if !(hd.side > 0.0 && hd.side.is_finite()) || hd.bbox_min.iter().any(|v| !v.is_finite()) {
        return Err(Error::bitstream("bad grid")).stage("container");
    }
    let grid = Grid {
        depth,
        bbox_min: hd.bbox_min,
        side: hd.side,
    };

    let geo = container.find(SectionTag::Geometry, 0).stage("geometry")?;
    let occ = OccupancyStream::from_bytes(&geo.payload).stage("geometry")?;
    if occ.depth != depth {
        return Err(Error::bitstream("geometry depth differs from header")).stage("geometry");
    }
    let finest = decode_occupancy(&occ).stage("geometry")?;
    if finest.len() != hd.num_voxels as usize {
        return Err(Error::bitstream(format!(
            "geometry holds {} voxels, header declares {}",
            finest.len(),
            hd.num_voxels
        )))
        .stage("geometry");
    }
    let h = build_hierarchy(&finest, grid, hd.levels as usize)
        .map_err(|e| Error::bitstream(e.to_string()))
        .stage("geometry")?;
    let sizes: Vec<u32> = h.level_sizes().iter().map(|&s| s as u32).collect();
    if sizes != hd.level_sizes {
        return Err(Error::bitstream("level sizes differ from header")).stage("geometry");
    }

    let cov_s = container
        .find(SectionTag::Covariance, 0)
        .stage("covariance")?;
    let cov = parse_covariance(&cov_s.payload, finest.len()).stage("covariance")?;
    Ok(Frame {
        container,
        grid,
        h,
        cov,
    })
}

fn decode_attribute(frame: &Frame, nbr: &NeighborTable, a: &AttrHeader) -> Result<AttributeMatrix> {
    let hd = &frame.container.header;
    if a.attr_id == 0 || a.attr_id as usize > NUM_ATTRIBUTES {
        return Err(Error::bitstream("unknown attribute id"));
    }
    let c = attribute_channels(a.attr_id);
    if a.channels() != c {
        return Err(Error::bitstream("channel count differs from attribute"));
    }
    let k = hd.levels as usize;
    let dcfg = DecoderConfig {
        hidden: hd.decoder_hidden as usize,
        conv_hidden: hd.decoder_conv_hidden as usize,
    };
    let (w, ah) = (hd.context as usize, hd.arm_hidden as usize);
    let dshapes = DecoderNet::shapes(k, dcfg, c);
    let ashapes = ArmNet::shapes(w, ah);
    let count = |s: &[(usize, usize)]| s.iter().map(|(r, c)| r * c).sum::<usize>();
    if count(&dshapes) != a.decoder_params as usize || count(&ashapes) != a.arm_params as usize {
        return Err(Error::bitstream(
            "parameter counts differ from architecture",
        ));
    }

    let nets = frame.container.find(SectionTag::AttrNets, a.attr_id)?;
    let all: Vec<(usize, usize)> = dshapes.iter().chain(&ashapes).copied().collect();
    let mut tensors: Vec<Mat<f32>> = parse_nets(&nets.payload, &all)?
        .iter()
        .map(QuantizedTensor::dequantize)
        .collect();
    let arm_t = tensors.split_off(dshapes.len());
    let decoder = DecoderNet::from_tensors(k, dcfg, c, tensors)?;
    let arm = ArmNet::from_tensors(w, ah, arm_t)?;

    let lat = frame.container.find(SectionTag::AttrLatents, a.attr_id)?;
    let q = parse_latents(&lat.payload, a.attr_id, &frame.h.level_sizes(), &arm)?;
    reconstruct(&q.dequantize(), &frame.h, nbr, &decoder, &a.norm)
}

fn reconstruct(
    y: &LatentPyramid,
    h: &OctreeHierarchy,
    nbr: &NeighborTable,
    decoder: &DecoderNet,
    norm: &NormalizationParams,
) -> Result<AttributeMatrix> {
    let rec = decoder_forward(&upsample_copy(y, h)?, decoder, nbr)?;
    Ok(denormalize(
        &AttributeMatrix::new(y.attr_id, decoder.out_channels, rec.data)?,
        norm,
    ))
}

pub fn decode(bytes: &[u8]) -> Result<GaussianModel> {
    let frame = open(bytes)?;
    let hd = &frame.container.header;
    let mut ids: Vec<u8> = hd.attributes.iter().map(|a| a.attr_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::bitstream("duplicate attribute")).stage("container");
    }
    let nbr = NeighborTable::new(&frame.h);
    let attrs: Vec<AttributeMatrix> = hd
        .attributes
        .par_iter()
        .map(|a| {
            decode_attribute(&frame, &nbr, a).map_err(|e| Error::Attribute {
                attr: a.attr_id,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()
        .stage("attributes")?;
    assemble_model(&frame.grid, frame.h.finest(), &frame.cov, &attrs)
}

/// Size of one stream part, framing included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionSize {
    pub name: String,
    pub attr_id: Option<u8>,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamInfo {
    pub header: StreamHeader,
    /// Header first, then every section in stream order. Sums to the stream size.
    pub parts: Vec<SectionSize>,
}

pub fn inspect(bytes: &[u8]) -> Result<StreamInfo> {
    let c = Container::from_bytes(bytes)?;
    let mut parts = vec![SectionSize {
        name: "header".into(),
        attr_id: None,
        bytes: c.header_len(),
    }];
    for s in &c.sections {
        let per_attr = matches!(s.tag, SectionTag::AttrNets | SectionTag::AttrLatents);
        parts.push(SectionSize {
            name: s.tag.name(),
            attr_id: per_attr.then_some(s.id),
            bytes: s.framed_len(),
        });
    }
    Ok(StreamInfo {
        header: c.header,
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{toy_sphere, voxel_sphere};

    fn quick(depth: u32, iterations: usize, attrs: Vec<u8>) -> EncodeConfig {
        EncodeConfig {
            depth,
            train: TrainConfig {
                iterations,
                lambda: 1e-3,
                levels: 3,
                seed: 5,
                ..TrainConfig::default()
            },
            attrs,
            vq_size: 64,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_deterministic() {
        let m = toy_sphere(400, 2);
        let cfg = quick(4, 40, vec![1, 9, 17]);
        let a = encode(&m, &cfg).unwrap();
        let b = encode(&m, &cfg).unwrap();
        assert_eq!(a.bytes, b.bytes);
        let d = decode(&a.bytes).unwrap();
        assert_eq!(d, a.reconstruction);
        assert_eq!(d.len(), a.num_voxels);
        // Uncoded attributes decode as zero.
        assert!(d.sh.iter().all(|r| r[5] == [0.0; 3]));
    }

    #[test]
    fn sections_sum_to_stream_size() {
        let m = voxel_sphere(4, 1);
        let e = encode(&m, &quick(4, 20, vec![17])).unwrap();
        let info = inspect(&e.bytes).unwrap();
        assert_eq!(
            info.parts.iter().map(|p| p.bytes).sum::<usize>(),
            e.bytes.len()
        );
        let attr_sections: Vec<_> = info.parts.iter().filter(|p| p.attr_id.is_some()).collect();
        assert_eq!(attr_sections.len(), 2);
        assert!(attr_sections.iter().all(|p| p.attr_id == Some(17)));
        let lat = e.attrs[0].latent_bytes + crate::bitstream::SECTION_OVERHEAD;
        assert!(info
            .parts
            .iter()
            .any(|p| p.name == "latents" && p.bytes == lat));
    }

    #[test]
    fn single_gaussian_model() {
        let m = toy_sphere(1, 4);
        let e = encode(&m, &quick(3, 5, (1..=17).collect())).unwrap();
        let d = decode(&e.bytes).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d, e.reconstruction);
    }

    #[test]
    fn corrupt_streams_are_rejected() {
        let m = toy_sphere(200, 3);
        let e = encode(&m, &quick(4, 10, vec![1])).unwrap();
        let mut bad = e.bytes.clone();
        bad[8] ^= 1;
        assert!(decode(&bad).is_err());
        for cut in [3, 20, e.bytes.len() / 2, e.bytes.len() - 1] {
            assert!(decode(&e.bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn config_errors() {
        let m = toy_sphere(50, 1);
        let mut cfg = quick(4, 5, vec![1, 1]);
        assert!(matches!(encode(&m, &cfg), Err(Error::Stage { .. })));
        cfg.attrs = vec![18];
        assert!(encode(&m, &cfg).is_err());
        cfg.attrs = vec![1];
        cfg.train.levels = 9;
        assert!(encode(&m, &cfg).is_err());
    }
}
