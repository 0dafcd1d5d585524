//! Gaussian splat model and the per-attribute matrices the codec trains on.
//!
//! Attribute ids follow the coding order used throughout the crate:
//! ids `1..=16` are the sixteen SH coefficient triplets (id 1 is the DC term),
//! id `17` is the opacity logit.

use crate::error::{Error, Result};
use crate::geometry::Voxelization;

pub const SH_COEFFS: usize = 16;
pub const NUM_ATTRIBUTES: usize = 17;
pub const OPACITY_ATTR: u8 = 17;

/// Channel count of an attribute id (3 for SH triplets, 1 for opacity).
pub fn attribute_channels(attr_id: u8) -> usize {
    if attr_id == OPACITY_ATTR {
        1
    } else {
        3
    }
}

pub fn attribute_name(attr_id: u8) -> String {
    if attr_id == OPACITY_ATTR {
        "opacity".to_string()
    } else {
        format!("sh{}", attr_id - 1)
    }
}

/// Parses `opacity`, `sh0`..`sh15`, a bare id, or `all`/`sh` groups.
pub fn parse_attribute_list(spec: &str) -> Result<Vec<u8>> {
    let mut ids = Vec::new();
    for tok in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match tok {
            "all" => ids.extend(1..=NUM_ATTRIBUTES as u8),
            "sh" => ids.extend(1..=SH_COEFFS as u8),
            "opacity" => ids.push(OPACITY_ATTR),
            t => {
                let id = if let Some(n) = t.strip_prefix("sh") {
                    n.parse::<u8>()
                        .ok()
                        .filter(|&n| (n as usize) < SH_COEFFS)
                        .map(|n| n + 1)
                } else {
                    t.parse::<u8>().ok()
                };
                match id {
                    Some(id) if (1..=NUM_ATTRIBUTES as u8).contains(&id) => ids.push(id),
                    _ => return Err(Error::Config(format!("unknown attribute '{t}'"))),
                }
            }
        }
    }
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Config("empty attribute list".into()));
    }
    Ok(ids)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// A 3DGS scene: per-Gaussian position, log-scales, unit quaternion
/// (w, x, y, z), 16 SH triplets and opacity logit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianModel {
    pub positions: Vec<[f32; 3]>,
    pub scales: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub sh: Vec<[[f32; 3]; SH_COEFFS]>,
    pub opacities: Vec<f32>,
}

impl GaussianModel {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks the N >= 1, consistent-length and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::EmptyInput("gaussian model"));
        }
        if self.scales.len() != n
            || self.rotations.len() != n
            || self.sh.len() != n
            || self.opacities.len() != n
        {
            return Err(Error::shape("gaussian model field lengths differ"));
        }
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.scales[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.sh[i].iter().flatten().all(|v| v.is_finite())
                && self.opacities[i].is_finite();
            if !finite {
                return Err(Error::Data {
                    index: i,
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }

    /// Values of attribute `attr_id` for Gaussian `i`.
    pub fn attribute_row(&self, attr_id: u8, i: usize) -> Vec<f32> {
        if attr_id == OPACITY_ATTR {
            vec![self.opacities[i]]
        } else {
            self.sh[i][(attr_id - 1) as usize].to_vec()
        }
    }
}

/// Renormalizes a quaternion whose norm is off by more than 1e-6.
pub fn normalize_quaternion(q: [f32; 4]) -> Option<[f32; 4]> {
    let n2: f64 = q.iter().map(|&v| v as f64 * v as f64).sum();
    let n = n2.sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    if (n - 1.0).abs() <= 1e-6 {
        return Some(q);
    }
    Some(q.map(|v| (v as f64 / n) as f32))
}

/// One attribute over the finest voxels, rows in Morton order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMatrix {
    pub attr_id: u8,
    pub channels: usize,
    /// Row-major `rows x channels`.
    pub values: Vec<f32>,
}

impl AttributeMatrix {
    pub fn new(attr_id: u8, channels: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || values.len() % channels != 0 {
            return Err(Error::shape(format!(
                "{} values do not split into {channels} channels",
                values.len()
            )));
        }
        Ok(Self {
            attr_id,
            channels,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().skip(c).step_by(self.channels).copied()
    }
}

/// Voxel-merged model: attribute matrices plus the merged covariance factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedAttributes {
    /// Seventeen matrices, index `n - 1` holds attribute id `n`.
    pub attributes: Vec<AttributeMatrix>,
    pub scales: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub opacities: Vec<f32>,
}

impl MergedAttributes {
    pub fn attribute(&self, attr_id: u8) -> &AttributeMatrix {
        &self.attributes[(attr_id - 1) as usize]
    }
}

/// Merges the Gaussians of each voxel.
///
/// SH coefficients are averaged with sigmoid(opacity) weights, the opacity
/// logit takes the group maximum and scale/rotation come from the most opaque
/// member (lowest index on ties). Singletons pass through untouched.
pub fn merge_attributes(model: &GaussianModel, vox: &Voxelization) -> Result<MergedAttributes> {
    let n = model.len();
    let m = vox.merge_groups.len();
    let mut sh_rows: Vec<[[f32; 3]; SH_COEFFS]> = Vec::with_capacity(m);
    let mut scales = Vec::with_capacity(m);
    let mut rotations = Vec::with_capacity(m);
    let mut opacities = Vec::with_capacity(m);

    for group in &vox.merge_groups {
        if group.is_empty() || group.iter().any(|&g| g >= n) {
            return Err(Error::shape("merge group references a missing Gaussian"));
        }
        let best = *group
            .iter()
            .max_by(|&&a, &&b| {
                model.opacities[a]
                    .partial_cmp(&model.opacities[b])
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        scales.push(model.scales[best]);
        rotations.push(model.rotations[best]);
        opacities.push(model.opacities[best]);

        if let [only] = group.as_slice() {
            sh_rows.push(model.sh[*only]);
            continue;
        }
        let mut acc = [[0f64; 3]; SH_COEFFS];
        let mut wsum = 0f64;
        for &g in group {
            let w = sigmoid(model.opacities[g]) as f64;
            wsum += w;
            for (a, s) in acc.iter_mut().zip(&model.sh[g]) {
                for c in 0..3 {
                    a[c] += w * s[c] as f64;
                }
            }
        }
        let mut row = [[0f32; 3]; SH_COEFFS];
        for (r, a) in row.iter_mut().zip(&acc) {
            for c in 0..3 {
                r[c] = (a[c] / wsum) as f32;
            }
        }
        sh_rows.push(row);
    }

    let mut attributes = Vec::with_capacity(NUM_ATTRIBUTES);
    for k in 0..SH_COEFFS {
        let values = sh_rows.iter().flat_map(|r| r[k]).collect();
        attributes.push(AttributeMatrix::new(k as u8 + 1, 3, values)?);
    }
    attributes.push(AttributeMatrix::new(OPACITY_ATTR, 1, opacities.clone())?);
    Ok(MergedAttributes {
        attributes,
        scales,
        rotations,
        opacities,
    })
}

/// Per-channel affine map `normalized = (x - offset) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationParams {
    pub offset: Vec<f32>,
    pub scale: Vec<f32>,
}

impl NormalizationParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            offset: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    pub fn denormalize_value(&self, c: usize, v: f32) -> f32 {
        v * self.scale[c] + self.offset[c]
    }
}

/// Maps each channel onto [0, 1]; constant channels map to 0.5 with scale 1.
pub fn normalize(attr: &AttributeMatrix) -> (AttributeMatrix, NormalizationParams) {
    let ch = attr.channels;
    let mut params = NormalizationParams::identity(ch);
    for c in 0..ch {
        let (lo, hi) = attr
            .column(c)
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        if range > 0.0 && range.is_finite() {
            params.offset[c] = lo;
            params.scale[c] = range;
        } else {
            params.offset[c] = if lo.is_finite() { lo - 0.5 } else { 0.0 };
            params.scale[c] = 1.0;
        }
    }
    let values = attr
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % ch;
            ((v as f64 - params.offset[c] as f64) / params.scale[c] as f64) as f32
        })
        .collect();
    (
        AttributeMatrix {
            attr_id: attr.attr_id,
            channels: ch,
            values,
        },
        params,
    )
}

pub fn denormalize(attr: &AttributeMatrix, params: &NormalizationParams) -> AttributeMatrix {
    let ch = attr.channels;
    let values = attr
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| params.denormalize_value(i % ch, v))
        .collect();
    AttributeMatrix {
        attr_id: attr.attr_id,
        channels: ch,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::voxelize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_model(rng: &mut impl Rng, n: usize) -> GaussianModel {
        let mut m = GaussianModel::default();
        for _ in 0..n {
            m.positions.push([rng.random(), rng.random(), rng.random()]);
            m.scales.push([rng.random_range(-5.0..-1.0); 3]);
            let q = normalize_quaternion([
                rng.random_range(0.1..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ])
            .unwrap();
            m.rotations.push(q);
            let mut sh = [[0f32; 3]; SH_COEFFS];
            for row in sh.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
            m.sh.push(sh);
            m.opacities.push(rng.random_range(-4.0..4.0));
        }
        m
    }

    #[test]
    fn attribute_list_parsing() {
        assert_eq!(parse_attribute_list("opacity").unwrap(), vec![17]);
        assert_eq!(parse_attribute_list("sh0,sh15").unwrap(), vec![1, 16]);
        assert_eq!(parse_attribute_list("all").unwrap().len(), 17);
        assert!(parse_attribute_list("sh16").is_err());
        assert!(parse_attribute_list("").is_err());
    }

    #[test]
    fn singletons_pass_through_in_morton_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 20);
        let vox = voxelize(&model.positions, 10).unwrap();
        assert_eq!(vox.len(), 20);
        let merged = merge_attributes(&model, &vox).unwrap();
        for (row, group) in vox.merge_groups.iter().enumerate() {
            let src = group[0];
            for id in 1..=17u8 {
                assert_eq!(
                    merged.attribute(id).row(row),
                    model.attribute_row(id, src).as_slice()
                );
            }
            assert_eq!(merged.scales[row], model.scales[src]);
        }
    }

    #[test]
    fn equal_opacity_pair_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = random_model(&mut rng, 2);
        model.positions = vec![[0.0; 3], [0.0; 3]];
        model.opacities = vec![0.3, 0.3];
        let vox = voxelize(&model.positions, 3).unwrap();
        let merged = merge_attributes(&model, &vox).unwrap();
        let a = model.sh[0][4];
        let b = model.sh[1][4];
        let got = merged.attribute(5).row(0);
        for c in 0..3 {
            assert!((got[c] - (a[c] + b[c]) / 2.0).abs() < 1e-6);
        }
        // Tie on opacity: first member wins the covariance.
        assert_eq!(merged.scales[0], model.scales[0]);
    }

    #[test]
    fn merge_matches_group_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 50);
        let vox = voxelize(&model.positions, 2).unwrap();
        assert!(vox.len() < 50);
        let merged = merge_attributes(&model, &vox).unwrap();
        for (row, group) in vox.merge_groups.iter().enumerate() {
            let mut best = group[0];
            let mut max_logit = f32::NEG_INFINITY;
            for &g in group {
                if model.opacities[g] > max_logit {
                    max_logit = model.opacities[g];
                    best = g;
                }
            }
            assert_eq!(merged.opacities[row], max_logit);
            assert_eq!(merged.rotations[row], model.rotations[best]);
            for k in 0..16 {
                for c in 0..3 {
                    let num: f64 = group
                        .iter()
                        .map(|&g| {
                            (1.0 / (1.0 + (-model.opacities[g] as f64).exp()))
                                * model.sh[g][k][c] as f64
                        })
                        .sum();
                    let den: f64 = group
                        .iter()
                        .map(|&g| 1.0 / (1.0 + (-model.opacities[g] as f64).exp()))
                        .sum();
                    let got = merged.attribute(k as u8 + 1).row(row)[c] as f64;
                    assert!((got - num / den).abs() < 1e-5, "{got} vs {}", num / den);
                }
            }
        }
    }

    #[test]
    fn merge_is_idempotent_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 60);
        let vox = voxelize(&model.positions, 3).unwrap();
        let merged = merge_attributes(&model, &vox).unwrap();

        let mut perm: Vec<usize> = (0..60).collect();
        perm.reverse();
        let permuted = GaussianModel {
            positions: perm.iter().map(|&i| model.positions[i]).collect(),
            scales: perm.iter().map(|&i| model.scales[i]).collect(),
            rotations: perm.iter().map(|&i| model.rotations[i]).collect(),
            sh: perm.iter().map(|&i| model.sh[i]).collect(),
            opacities: perm.iter().map(|&i| model.opacities[i]).collect(),
        };
        let vox_p = voxelize(&permuted.positions, 3).unwrap();
        assert_eq!(vox_p.voxels, vox.voxels);
        let merged_p = merge_attributes(&permuted, &vox_p).unwrap();
        for id in 1..=17u8 {
            let a = merged.attribute(id);
            let b = merged_p.attribute(id);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-6);
            }
        }

        // Re-merging a voxelized model on the same grid changes nothing.
        let centers: Vec<[f32; 3]> = vox
            .voxels
            .iter()
            .map(|&c| {
                vox.grid
                    .voxel_center(crate::geometry::morton_decode(c, 3).unwrap())
            })
            .collect();
        let remodel = GaussianModel {
            positions: centers,
            scales: merged.scales.clone(),
            rotations: merged.rotations.clone(),
            sh: (0..vox.len())
                .map(|r| {
                    let mut s = [[0f32; 3]; 16];
                    for k in 0..16 {
                        s[k].copy_from_slice(merged.attribute(k as u8 + 1).row(r));
                    }
                    s
                })
                .collect(),
            opacities: merged.opacities.clone(),
        };
        let revox = crate::geometry::voxelize_on(&remodel.positions, vox.grid).unwrap();
        assert_eq!(revox.voxels, vox.voxels);
        let remerged = merge_attributes(&remodel, &revox).unwrap();
        assert_eq!(remerged, merged);
    }

    #[test]
    fn normalize_examples() {
        let a = AttributeMatrix::new(17, 1, vec![0.0, 1.0]).unwrap();
        let (n, p) = normalize(&a);
        assert_eq!(n.values, vec![0.0, 1.0]);
        assert_eq!((p.offset[0], p.scale[0]), (0.0, 1.0));

        let a = AttributeMatrix::new(17, 1, vec![3.5, 3.5, 3.5]).unwrap();
        let (n, p) = normalize(&a);
        assert_eq!(n.values, vec![0.5; 3]);
        assert_eq!(p.scale[0], 1.0);
        assert_eq!(denormalize(&n, &p).values, a.values);
    }

    #[test]
    fn normalize_random_spans_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f32> = (0..300).map(|_| rng.random_range(-7.0..9.0)).collect();
        let a = AttributeMatrix::new(3, 3, vals).unwrap();
        let (n, p) = normalize(&a);
        for c in 0..3 {
            let lo = n.column(c).fold(f32::INFINITY, f32::min);
            let hi = n.column(c).fold(f32::NEG_INFINITY, f32::max);
            assert!(lo.abs() < 1e-6 && (hi - 1.0).abs() < 1e-6);
        }
        let back = denormalize(&n, &p);
        for (x, y) in back.values.iter().zip(&a.values) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }
}
