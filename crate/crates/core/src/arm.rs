//! Autoregressive Laplace model over latents in Morton order.
//!
//! Each latent is predicted from the `w` latents before it in the same level
//! (most recent first, zero-padded at the start of the level). One network is
//! shared by all levels of an attribute.

use crate::autodiff::{
    affine_fwd, context_fwd, laplace_bits_grad, relu_fwd, scale_from_raw, NodeId, Tape,
};
use crate::error::{Error, Result};
use crate::latent::{check_tensors, count_params, init_tensors, LatentPyramid};
use crate::tensor::Mat;
use rand::Rng;

pub use crate::autodiff::{B_MIN, MAX_SYMBOL_BITS};

pub const DEFAULT_CONTEXT: usize = 16;
pub const DEFAULT_ARM_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceParams {
    pub mu: f32,
    pub b: f32,
}

impl LaplaceParams {
    pub fn from_raw(raw_mu: f32, raw_scale: f32) -> Self {
        Self {
            mu: raw_mu,
            b: scale_from_raw(raw_scale as f64).0 as f32,
        }
    }
}

/// `w -> h -> h -> 2` MLP with ReLU on the hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmNet {
    pub context: usize,
    pub hidden: usize,
    /// `W1 b1 W2 b2 W3 b3`.
    pub tensors: Vec<Mat<f32>>,
}

impl ArmNet {
    pub fn shapes(context: usize, hidden: usize) -> Vec<(usize, usize)> {
        vec![
            (context, hidden),
            (1, hidden),
            (hidden, hidden),
            (1, hidden),
            (hidden, 2),
            (1, 2),
        ]
    }

    pub fn zeros(context: usize, hidden: usize) -> Self {
        Self {
            context,
            hidden,
            tensors: Self::shapes(context, hidden)
                .into_iter()
                .map(|(r, c)| Mat::zeros(r, c))
                .collect(),
        }
    }

    pub fn init(context: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            context,
            hidden,
            tensors: init_tensors(&Self::shapes(context, hidden), rng),
        }
    }

    pub fn from_tensors(context: usize, hidden: usize, tensors: Vec<Mat<f32>>) -> Result<Self> {
        check_tensors(&tensors, &Self::shapes(context, hidden), "ARM")?;
        Ok(Self {
            context,
            hidden,
            tensors,
        })
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.tensors)
    }

    /// Raw `(mu, scale logit)` rows for a batch of contexts.
    pub fn raw(&self, ctx: &Mat<f32>) -> Result<Mat<f32>> {
        if ctx.cols != self.context {
            return Err(Error::shape(format!(
                "context width {} for an ARM of width {}",
                ctx.cols, self.context
            )));
        }
        check_tensors(
            &self.tensors,
            &Self::shapes(self.context, self.hidden),
            "ARM",
        )?;
        let t = &self.tensors;
        let h = relu_fwd(&affine_fwd(ctx, &t[0], &t[1]));
        let h = relu_fwd(&affine_fwd(&h, &t[2], &t[3]));
        Ok(affine_fwd(&h, &t[4], &t[5]))
    }

    pub fn params_for_level(&self, level: &[f32]) -> Result<Vec<LaplaceParams>> {
        let raw = self.raw(&context_fwd(level, self.context))?;
        Ok((0..raw.rows)
            .map(|i| LaplaceParams::from_raw(raw.get(i, 0), raw.get(i, 1)))
            .collect())
    }

    /// Records the rate of `levels` on `tape` (parameter slots
    /// `first_slot..first_slot + 6`). Returns the per-symbol bits column.
    pub fn record(
        tape: &mut Tape,
        levels: &[NodeId],
        context: usize,
        hidden: usize,
        first_slot: usize,
    ) -> Result<NodeId> {
        let mut p = Vec::with_capacity(6);
        for (i, &(r, c)) in Self::shapes(context, hidden).iter().enumerate() {
            p.push(tape.param(first_slot + i, r, c)?);
        }
        let mut ctxs = Vec::with_capacity(levels.len());
        for &l in levels {
            ctxs.push(tape.causal_context(l, context)?);
        }
        let ctx = tape.concat_rows(ctxs)?;
        let values = tape.concat_rows(levels.to_vec())?;
        let h = tape.affine(ctx, p[0], p[1])?;
        let h = tape.relu(h)?;
        let h = tape.affine(h, p[2], p[3])?;
        let h = tape.relu(h)?;
        let raw = tape.affine(h, p[4], p[5])?;
        tape.laplace_bits(values, raw)
    }
}

/// The `w` values before position `i`, most recent first, zero-padded.
pub fn build_context(level: &[f32], i: usize, w: usize) -> Vec<f32> {
    (0..w)
        .map(|m| if m < i { level[i - 1 - m] } else { 0.0 })
        .collect()
}

pub fn arm_forward(ctx: &[f32], net: &ArmNet) -> Result<LaplaceParams> {
    let raw = net.raw(&Mat::from_vec(1, ctx.len(), ctx.to_vec())?)?;
    Ok(LaplaceParams::from_raw(raw.data[0], raw.data[1]))
}

/// `-log2 P(value)` for the unit bin around `value`, capped at 32 bits.
pub fn laplace_bits(value: f64, p: LaplaceParams) -> f64 {
    laplace_bits_grad(value, p.mu as f64, p.b as f64).0
}

/// Modeled codelength of a whole pyramid, in bits.
pub fn estimate_rate(pyramid: &LatentPyramid, net: &ArmNet) -> Result<f64> {
    let mut total = 0.0;
    for level in &pyramid.levels {
        if level.is_empty() {
            continue;
        }
        let params = net.params_for_level(level)?;
        total += level
            .iter()
            .zip(&params)
            .map(|(&v, &p)| laplace_bits(v as f64, p))
            .sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check, forward};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_level(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-4i32..=4) as f32).collect()
    }

    #[test]
    fn default_parameter_count() {
        assert_eq!(
            ArmNet::zeros(DEFAULT_CONTEXT, DEFAULT_ARM_HIDDEN).count_params(),
            578
        );
        assert_eq!(16 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2, 578);
    }

    #[test]
    fn context_examples() {
        let l = [5.0, 7.0, 9.0, 11.0];
        assert_eq!(build_context(&l, 0, 3), vec![0.0; 3]);
        assert_eq!(build_context(&l, 2, 4), vec![7.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn context_matches_slice_and_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_level(&mut rng, 60);
        let batch = context_fwd(&l, 16);
        for i in 0..l.len() {
            let mut window: Vec<f32> = l[i.saturating_sub(16)..i].to_vec();
            window.reverse();
            window.resize(16, 0.0);
            assert_eq!(build_context(&l, i, 16), window);
            assert_eq!(batch.row(i), &window[..]);
        }
    }

    #[test]
    fn zero_net_gives_softplus_zero() {
        let p = arm_forward(&[1.0; 16], &ArmNet::zeros(16, 16)).unwrap();
        assert_eq!(p.mu, 0.0);
        assert_eq!(p.b, std::f64::consts::LN_2 as f32);
    }

    #[test]
    fn scale_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ArmNet::init(4, 8, &mut rng);
        net.tensors[5].data[1] = -1e4;
        for _ in 0..50 {
            let ctx: Vec<f32> = (0..4).map(|_| rng.random_range(-100.0..100.0)).collect();
            assert!(arm_forward(&ctx, &net).unwrap().b >= 1e-3);
        }
    }

    #[test]
    fn only_w_previous_values_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ArmNet::init(8, 16, &mut rng);
        let mut a = random_level(&mut rng, 30);
        let pa = net.params_for_level(&a).unwrap();
        a[5] += 3.0;
        let pb = net.params_for_level(&a).unwrap();
        for i in 0..30 {
            let affected = i > 5 && i <= 5 + 8;
            assert_eq!(pa[i] == pb[i], !affected, "position {i}");
        }
    }

    #[test]
    fn causality_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ArmNet::init(4, 8, &mut rng);
        let base = random_level(&mut rng, 12);
        let p0 = net.params_for_level(&base).unwrap();
        for i in 0..base.len() {
            let mut l = base.clone();
            l[i] += 1.5;
            let p = net.params_for_level(&l).unwrap();
            assert!(p[..=i] == p0[..=i]);
        }
    }

    #[test]
    fn laplace_bits_examples() {
        let p = LaplaceParams { mu: 0.0, b: 1.0 };
        assert_relative_eq!(
            laplace_bits(0.0, p),
            -(1.0 - (-0.5f64).exp()).log2(),
            epsilon = 1e-12
        );
        assert_relative_eq!(laplace_bits(0.0, p), 1.3457, epsilon = 1e-4);
        let tight = LaplaceParams { mu: 0.0, b: 1e-3 };
        assert!(laplace_bits(0.0, tight) < 1e-9);
        assert!(laplace_bits(7.0, p) >= laplace_bits(1.0, p));
    }

    #[test]
    fn rate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ArmNet::init(4, 8, &mut rng);
        let empty = LatentPyramid {
            attr_id: 0,
            levels: vec![],
        };
        assert_eq!(estimate_rate(&empty, &net).unwrap(), 0.0);
        let one = LatentPyramid {
            attr_id: 0,
            levels: vec![vec![2.0]],
        };
        let p = arm_forward(&[0.0; 4], &net).unwrap();
        assert_eq!(estimate_rate(&one, &net).unwrap(), laplace_bits(2.0, p));

        let pyr = LatentPyramid {
            attr_id: 0,
            levels: vec![
                random_level(&mut rng, 40),
                random_level(&mut rng, 9),
                random_level(&mut rng, 2),
            ],
        };
        let mut oracle = 0.0;
        for l in &pyr.levels {
            for i in 0..l.len() {
                oracle += laplace_bits(
                    l[i] as f64,
                    arm_forward(&build_context(l, i, 4), &net).unwrap(),
                );
            }
        }
        assert_relative_eq!(
            estimate_rate(&pyr, &net).unwrap(),
            oracle,
            max_relative = 1e-12
        );
    }

    #[test]
    fn recorded_rate_matches_and_passes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = ArmNet::init(16, 16, &mut rng);
        let levels = [
            (0..70)
                .map(|_| rng.random_range(-3.0f32..3.0))
                .collect::<Vec<_>>(),
            (0..20)
                .map(|_| rng.random_range(-3.0f32..3.0))
                .collect::<Vec<_>>(),
        ];
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = levels
            .iter()
            .enumerate()
            .map(|(j, l)| tape.param(6 + j, l.len(), 1).unwrap())
            .collect();
        let bits = ArmNet::record(&mut tape, &nodes, 16, 16, 0).unwrap();
        let total = tape.sum(bits).unwrap();
        let mut params = net.tensors.clone();
        params.extend(levels.iter().map(|l| Mat::column_vector(l.clone())));
        let v = forward(&tape, &params, &[]).unwrap();
        let pyr = LatentPyramid {
            attr_id: 0,
            levels: levels.to_vec(),
        };
        assert_relative_eq!(
            v.scalar(total) as f64,
            estimate_rate(&pyr, &net).unwrap(),
            max_relative = 1e-5
        );
        let e = fd_check(&tape, total, &params, &[], 1e-5, 40, 2).unwrap();
        assert!(e < 1e-3, "{e}");
    }
}
