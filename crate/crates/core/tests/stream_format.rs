//! Walks an encoded stream by hand, following the documented layout.

use octolatent::codec::{decode, encode, EncodeConfig};
use octolatent::synthetic::voxel_sphere;
use octolatent::trainer::TrainConfig;

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take(2).try_into().unwrap())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn config() -> EncodeConfig {
    EncodeConfig {
        depth: 4,
        train: TrainConfig {
            lambda: 1e-3,
            iterations: 60,
            levels: 3,
            ..TrainConfig::default()
        },
        attrs: vec![17, 1],
        vq_size: 16,
    }
}

#[test]
fn layout_matches_documentation() {
    let model = voxel_sphere(4, 5);
    let cfg = config();
    let enc = encode(&model, &cfg).unwrap();
    let mut c = Cursor {
        data: &enc.bytes,
        pos: 0,
    };

    assert_eq!(c.take(4), b"RLHE");
    assert_eq!(c.u16(), 1);
    let hlen = c.u32() as usize;
    let header = c.take(hlen);
    assert_eq!(c.u32(), crc32fast::hash(header));

    let mut h = Cursor {
        data: header,
        pos: 0,
    };
    assert_eq!(
        [h.u8(), h.u8(), h.u8(), h.u8(), h.u8(), h.u8()],
        [4, 3, 16, 16, 16, 8]
    );
    let m = h.u32() as usize;
    assert_eq!(m, enc.num_voxels);
    assert_eq!(h.f64(), 1e-3);
    let _bbox = [h.f32(), h.f32(), h.f32()];
    assert!(h.f32() > 0.0);
    let sizes: Vec<usize> = (0..3).map(|_| h.u32() as usize).collect();
    assert_eq!(sizes[0], m);
    assert!(sizes[1] <= sizes[0] && sizes[2] <= sizes[1]);
    assert_eq!(h.u8(), 2);
    let mut ids = Vec::new();
    for expect_ch in [1u8, 3] {
        ids.push(h.u8());
        let ch = h.u8();
        assert_eq!(ch, expect_ch);
        for _ in 0..ch {
            let (_offset, scale) = (h.f32(), h.f32());
            assert!(scale > 0.0);
        }
        let (dp, ap) = (h.u32(), h.u32());
        assert_eq!(ap, 578);
        // 3->16, 16->16, 27*16->8, 27*8->ch
        let expect = 3 * 16 + 16 + 16 * 16 + 16 + 27 * 16 * 8 + 8 + 27 * 8 * ch as u32 + ch as u32;
        assert_eq!(dp, expect);
    }
    assert_eq!(ids, [17, 1]);
    assert!(h.done());

    let mut sections = Vec::new();
    while !c.done() {
        let start = c.pos;
        let tag = c.u8();
        let id = c.u8();
        let len = c.u32() as usize;
        let payload = c.take(len);
        let crc = crc32fast::hash(&enc.bytes[start..c.pos]);
        assert_eq!(c.u32(), crc);
        sections.push((tag, id, payload));
    }
    let order: Vec<(u8, u8)> = sections.iter().map(|s| (s.0, s.1)).collect();
    assert_eq!(order, [(1, 0), (2, 0), (3, 17), (4, 17), (3, 1), (4, 1)]);

    // geometry: depth byte first
    assert_eq!(sections[0].2[0], 4);

    // covariance: K, K codewords of 7 floats, then ceil(log2 K)-bit indices
    let mut cv = Cursor {
        data: sections[1].2,
        pos: 0,
    };
    let k = cv.u32() as usize;
    assert!(k >= 1 && k <= 16);
    let words: Vec<[f32; 7]> = (0..k)
        .map(|_| std::array::from_fn(|_| cv.f32()))
        .collect();
    let bits = if k <= 1 { 0 } else { usize::BITS - (k - 1).leading_zeros() } as usize;
    let packed = cv.take((m * bits).div_ceil(8));
    assert!(cv.done());
    let index = |i: usize| -> usize {
        (0..bits)
            .map(|b| {
                let p = i * bits + b;
                ((packed[p / 8] >> (p % 8)) as usize & 1) << b
            })
            .sum()
    };
    let decoded = decode(&enc.bytes).unwrap();
    for i in 0..m {
        let w = words[index(i)];
        assert_eq!(decoded.scales[i], [w[0], w[1], w[2]]);
        assert_eq!(decoded.rotations[i], [w[3], w[4], w[5], w[6]]);
    }

    // nets: 14 tensor heads, then one length-prefixed blob
    for &(_, _, p) in sections.iter().filter(|s| s.0 == 3) {
        let mut n = Cursor { data: p, pos: 0 };
        for _ in 0..14 {
            let shift = n.u8();
            assert!((4..=12).contains(&shift));
            assert!(n.u16() <= 2047);
            assert!(n.f32() >= 0.05);
        }
        let blob = n.u32() as usize;
        n.take(blob);
        assert!(n.done());
    }

    // latents: per level coarse to fine, lo, hi and a blob
    for (stats, &(_, _, p)) in enc.attrs.iter().zip(sections.iter().filter(|s| s.0 == 4)) {
        let mut l = Cursor { data: p, pos: 0 };
        let mut coded = 0;
        for _ in 0..3 {
            let (lo, hi) = (l.i32(), l.i32());
            assert!(lo <= hi);
            let blob = l.u32() as usize;
            if lo == hi {
                assert_eq!(blob, 0);
            }
            l.take(blob);
            coded += blob;
        }
        assert!(l.done());
        assert_eq!(coded, stats.latent_coded_bytes);
    }
}

#[test]
fn unknown_sections_are_skipped() {
    let model = voxel_sphere(4, 5);
    let enc = encode(&model, &config()).unwrap();
    let mut bytes = enc.bytes.clone();
    let payload = b"future data";
    let start = bytes.len();
    bytes.push(200);
    bytes.push(3);
    bytes.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    bytes.extend_from_slice(payload);
    let crc = crc32fast::hash(&bytes[start..]);
    bytes.extend_from_slice(&crc.to_le_bytes());
    assert_eq!(decode(&bytes).unwrap(), decode(&enc.bytes).unwrap());
}
