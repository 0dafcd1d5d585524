//! The container: magic, versioned header, then tagged length-prefixed
//! sections, all little-endian. See `FORMAT.md` for the byte layout.

use crate::error::{Error, Result};
use crate::gaussian::NormalizationParams;

pub const MAGIC: [u8; 4] = *b"RLHE";
pub const VERSION: u16 = 1;
/// Bytes before the header body: magic, version, header length.
pub const PREAMBLE_LEN: usize = 4 + 2 + 4;
/// Per-section framing: tag, id, length, CRC.
pub const SECTION_OVERHEAD: usize = 1 + 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SectionTag {
    Geometry,
    Covariance,
    AttrNets,
    AttrLatents,
    Unknown(u8),
}

impl SectionTag {
    pub fn code(self) -> u8 {
        match self {
            SectionTag::Geometry => 1,
            SectionTag::Covariance => 2,
            SectionTag::AttrNets => 3,
            SectionTag::AttrLatents => 4,
            SectionTag::Unknown(c) => c,
        }
    }

    pub fn from_code(c: u8) -> Self {
        match c {
            1 => SectionTag::Geometry,
            2 => SectionTag::Covariance,
            3 => SectionTag::AttrNets,
            4 => SectionTag::AttrLatents,
            c => SectionTag::Unknown(c),
        }
    }

    pub fn name(self) -> String {
        match self {
            SectionTag::Geometry => "geometry".into(),
            SectionTag::Covariance => "covariance".into(),
            SectionTag::AttrNets => "nets".into(),
            SectionTag::AttrLatents => "latents".into(),
            SectionTag::Unknown(c) => format!("unknown_{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: SectionTag,
    /// Attribute id for per-attribute sections, zero otherwise.
    pub id: u8,
    pub payload: Vec<u8>,
}

impl Section {
    pub fn framed_len(&self) -> usize {
        self.payload.len() + SECTION_OVERHEAD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttrHeader {
    pub attr_id: u8,
    pub norm: NormalizationParams,
    pub decoder_params: u32,
    pub arm_params: u32,
}

impl AttrHeader {
    pub fn channels(&self) -> usize {
        self.norm.offset.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub depth: u8,
    pub levels: u8,
    pub context: u8,
    pub arm_hidden: u8,
    pub decoder_hidden: u8,
    pub decoder_conv_hidden: u8,
    pub num_voxels: u32,
    pub lambda: f64,
    pub bbox_min: [f32; 3],
    pub side: f32,
    pub level_sizes: Vec<u32>,
    pub attributes: Vec<AttrHeader>,
}

impl StreamHeader {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u8(self.depth);
        w.u8(self.levels);
        w.u8(self.context);
        w.u8(self.arm_hidden);
        w.u8(self.decoder_hidden);
        w.u8(self.decoder_conv_hidden);
        w.u32(self.num_voxels);
        w.f64(self.lambda);
        for v in self.bbox_min {
            w.f32(v);
        }
        w.f32(self.side);
        for &s in &self.level_sizes {
            w.u32(s);
        }
        w.u8(self.attributes.len() as u8);
        for a in &self.attributes {
            w.u8(a.attr_id);
            w.u8(a.channels() as u8);
            for c in 0..a.channels() {
                w.f32(a.norm.offset[c]);
                w.f32(a.norm.scale[c]);
            }
            w.u32(a.decoder_params);
            w.u32(a.arm_params);
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data);
        let depth = r.u8()?;
        let levels = r.u8()?;
        let context = r.u8()?;
        let arm_hidden = r.u8()?;
        let decoder_hidden = r.u8()?;
        let decoder_conv_hidden = r.u8()?;
        if levels == 0 || context == 0 || arm_hidden == 0 || decoder_hidden == 0 {
            return Err(Error::bitstream("zero architecture width in header"));
        }
        if decoder_conv_hidden == 0 {
            return Err(Error::bitstream("zero decoder width in header"));
        }
        let num_voxels = r.u32()?;
        let lambda = r.f64()?;
        let bbox_min = [r.f32()?, r.f32()?, r.f32()?];
        let side = r.f32()?;
        let level_sizes = (0..levels).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count = r.u8()?;
        let mut attributes = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let attr_id = r.u8()?;
            let channels = r.u8()? as usize;
            if channels == 0 {
                return Err(Error::bitstream("attribute with zero channels"));
            }
            let mut norm = NormalizationParams::identity(channels);
            for c in 0..channels {
                norm.offset[c] = r.f32()?;
                norm.scale[c] = r.f32()?;
            }
            attributes.push(AttrHeader {
                attr_id,
                norm,
                decoder_params: r.u32()?,
                arm_params: r.u32()?,
            });
        }
        if !r.is_empty() {
            return Err(Error::bitstream("trailing bytes in header"));
        }
        Ok(Self {
            depth,
            levels,
            context,
            arm_hidden,
            decoder_hidden,
            decoder_conv_hidden,
            num_voxels,
            lambda,
            bbox_min,
            side,
            level_sizes,
            attributes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: StreamHeader,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header.to_bytes();
        let mut w = ByteWriter::default();
        w.bytes(&MAGIC);
        w.u16(VERSION);
        w.u32(header.len() as u32);
        w.bytes(&header);
        w.u32(crc32fast::hash(&header));
        for s in &self.sections {
            let start = w.len();
            w.u8(s.tag.code());
            w.u8(s.id);
            w.u32(s.payload.len() as u32);
            w.bytes(&s.payload);
            let crc = crc32fast::hash(&w.buf[start..]);
            w.u32(crc);
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data);
        if r.take(4)? != MAGIC {
            return Err(Error::bitstream("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::bitstream(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let hbytes = r.take(hlen)?;
        if r.u32()? != crc32fast::hash(hbytes) {
            return Err(Error::bitstream("header checksum mismatch"));
        }
        let header = StreamHeader::from_bytes(hbytes)?;
        let mut sections = Vec::new();
        while !r.is_empty() {
            let start = r.pos;
            let tag = SectionTag::from_code(r.u8()?);
            let id = r.u8()?;
            let len = r.u32()? as usize;
            let payload = r.take(len)?.to_vec();
            let crc = crc32fast::hash(&data[start..r.pos]);
            if r.u32()? != crc {
                return Err(Error::bitstream(format!(
                    "checksum mismatch in {} section {id}",
                    tag.name()
                )));
            }
            sections.push(Section { tag, id, payload });
        }
        Ok(Self { header, sections })
    }

    pub fn header_len(&self) -> usize {
        PREAMBLE_LEN + self.header.to_bytes().len() + 4
    }

    pub fn find(&self, tag: SectionTag, id: u8) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.tag == tag && s.id == id)
            .ok_or_else(|| Error::bitstream(format!("missing {} section {id}", tag.name())))
    }
}

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// `u32` length followed by the bytes.
    pub fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| {
                Error::bitstream(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.data.len() - self.pos
                ))
            })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Packs `values` at `bits` bits each, least significant bit first.
pub fn pack_bits(values: &[u32], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; (values.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &v in values {
        for b in 0..bits {
            if (v >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_bits(data: &[u8], count: usize, bits: u32) -> Result<Vec<u32>> {
    let need = (count * bits as usize).div_ceil(8);
    if data.len() < need {
        return Err(Error::bitstream(format!(
            "packed indices: {} bytes, need {need}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for b in 0..bits {
            if (data[pos / 8] >> (pos % 8)) & 1 == 1 {
                v |= 1 << b;
            }
            pos += 1;
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut norm = NormalizationParams::identity(3);
        norm.offset = vec![-1.0, 0.5, 2.0];
        norm.scale = vec![2.0, 3.0, 0.25];
        Container {
            header: StreamHeader {
                depth: 6,
                levels: 3,
                context: 16,
                arm_hidden: 16,
                decoder_hidden: 16,
                decoder_conv_hidden: 8,
                num_voxels: 100,
                lambda: 1e-3,
                bbox_min: [-1.0, -2.0, 0.5],
                side: 4.0,
                level_sizes: vec![100, 30, 5],
                attributes: vec![AttrHeader {
                    attr_id: 1,
                    norm,
                    decoder_params: 4483,
                    arm_params: 578,
                }],
            },
            sections: vec![
                Section {
                    tag: SectionTag::Geometry,
                    id: 0,
                    payload: vec![1, 2, 3],
                },
                Section {
                    tag: SectionTag::AttrLatents,
                    id: 1,
                    payload: vec![],
                },
            ],
        }
    }

    #[test]
    fn container_round_trip_and_size() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"RLHE");
        let sizes: usize = c.sections.iter().map(Section::framed_len).sum();
        assert_eq!(bytes.len(), c.header_len() + sizes);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn unknown_sections_are_kept_and_skippable() {
        let mut c = sample();
        c.sections.push(Section {
            tag: SectionTag::Unknown(200),
            id: 7,
            payload: vec![9; 10],
        });
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.sections[2].tag, SectionTag::Unknown(200));
        assert!(back.find(SectionTag::Geometry, 0).is_ok());
        assert!(back.find(SectionTag::Covariance, 0).is_err());
    }

    #[test]
    fn every_flipped_byte_is_rejected() {
        let bytes = sample().to_bytes();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(Container::from_bytes(&b).is_err(), "flip at {i} accepted");
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        let header_end = sample().header_len();
        for n in 0..bytes.len() {
            let r = Container::from_bytes(&bytes[..n]);
            // Cutting exactly between sections leaves a valid shorter stream.
            let boundary = n == header_end || n == header_end + 3 + SECTION_OVERHEAD;
            assert_eq!(r.is_ok(), boundary, "cut at {n}");
        }
    }

    #[test]
    fn bit_packing_examples() {
        assert_eq!(pack_bits(&[1, 2, 3], 2), vec![0b0011_1001]);
        assert_eq!(unpack_bits(&[0b0011_1001], 3, 2).unwrap(), vec![1, 2, 3]);
        assert!(pack_bits(&[0, 0, 0], 0).is_empty());
        assert_eq!(unpack_bits(&[], 3, 0).unwrap(), vec![0, 0, 0]);
        assert!(unpack_bits(&[0], 3, 4).is_err());
    }

    proptest! {
        #[test]
        fn packing_round_trips(bits in 0u32..=16, raw in prop::collection::vec(any::<u32>(), 0..300)) {
            let mask = if bits == 0 { 0 } else { (1u64 << bits) as u32 - 1 };
            let values: Vec<u32> = raw.iter().map(|v| v & mask).collect();
            let packed = pack_bits(&values, bits);
            prop_assert_eq!(packed.len(), (values.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(unpack_bits(&packed, values.len(), bits).unwrap(), values);
        }
    }
}
