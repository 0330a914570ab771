//! Multi-head cross-attention, feed-forward, and pre-norm encoder blocks.

use crate::error::{Error, Result};
use crate::param_group;
use crate::params::LinearW;
use crate::tensor::{ops, Tensor};
use rand::Rng;

pub const RMS_EPS: f64 = 1e-6;

/// Attention geometry. `embed_dim` must be divisible by `heads`.
#[derive(Clone, Copy, Debug)]
pub struct AttnConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl AttnConfig {
    pub fn new(embed_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || embed_dim % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {embed_dim} not divisible by {heads} heads"
            )));
        }
        Ok(AttnConfig {
            embed_dim,
            heads,
            ffn_hidden: 4 * embed_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Projections of one multi-head cross-attention.
pub struct MhcaWeights {
    pub wq: LinearW,
    pub wk: LinearW,
    pub wv: LinearW,
    pub wo: LinearW,
}

param_group!(MhcaWeights { wq, wk, wv, wo });

impl MhcaWeights {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        MhcaWeights {
            wq: LinearW::init(d, d, rng),
            wk: LinearW::init(d, d, rng),
            wv: LinearW::init(d, d, rng),
            wo: LinearW::init(d, d, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        MhcaWeights {
            wq: LinearW::zeros(d, d),
            wk: LinearW::zeros(d, d),
            wv: LinearW::zeros(d, d),
            wo: LinearW::zeros(d, d),
        }
    }

    /// Identity projections; useful for oracle tests against the plain
    /// softmax(QK^T/sqrt(d))V formula.
    pub fn identity(d: usize) -> Self {
        MhcaWeights {
            wq: LinearW {
                w: Tensor::eye(d),
                b: Tensor::zeros([d]),
            },
            wk: LinearW {
                w: Tensor::eye(d),
                b: Tensor::zeros([d]),
            },
            wv: LinearW {
                w: Tensor::eye(d),
                b: Tensor::zeros([d]),
            },
            wo: LinearW {
                w: Tensor::eye(d),
                b: Tensor::zeros([d]),
            },
        }
    }
}

/// Two-layer feed-forward with SiLU between; the caller applies residuals.
pub struct FfnWeights {
    pub w1: LinearW,
    pub w2: LinearW,
}

param_group!(FfnWeights { w1, w2 });

impl FfnWeights {
    pub fn init(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FfnWeights {
            w1: LinearW::init(d, hidden, rng),
            w2: LinearW::init(hidden, d, rng),
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        FfnWeights {
            w1: LinearW::zeros(d, hidden),
            w2: LinearW::zeros(hidden, d),
        }
    }
}

/// Pre-norm self-attention + FFN block.
pub struct EncoderBlockWeights {
    pub norm_attn: Tensor,
    pub attn: MhcaWeights,
    pub norm_ffn: Tensor,
    pub ffn: FfnWeights,
}

param_group!(EncoderBlockWeights {
    norm_attn,
    attn,
    norm_ffn,
    ffn
});

impl EncoderBlockWeights {
    pub fn init(cfg: &AttnConfig, rng: &mut impl Rng) -> Self {
        EncoderBlockWeights {
            norm_attn: Tensor::full([cfg.embed_dim], 1.0),
            attn: MhcaWeights::init(cfg.embed_dim, rng),
            norm_ffn: Tensor::full([cfg.embed_dim], 1.0),
            ffn: FfnWeights::init(cfg.embed_dim, cfg.ffn_hidden, rng),
        }
    }
}

/// Scaled dot-product cross-attention with output projection. Queries come
/// from `q_seq`, keys/values from `kv_seq`; the output has `q_seq`'s length.
pub fn mhca(
    q_seq: &Tensor,
    kv_seq: &Tensor,
    cfg: &AttnConfig,
    w: &MhcaWeights,
) -> Result<Tensor> {
    let d = cfg.embed_dim;
    if q_seq.shape().len() != 2 || q_seq.shape()[1] != d {
        return Err(Error::Dim {
            op: "mhca",
            lhs: q_seq.shape().to_vec(),
            rhs: vec![0, d],
        });
    }
    if kv_seq.shape().len() != 2 || kv_seq.shape()[1] != d {
        return Err(Error::Dim {
            op: "mhca",
            lhs: kv_seq.shape().to_vec(),
            rhs: vec![0, d],
        });
    }
    let q = w.wq.apply(q_seq)?;
    let k = w.wk.apply(kv_seq)?;
    let v = w.wv.apply(kv_seq)?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (c0, c1) = (h * hd, (h + 1) * hd);
        let qh = ops::slice_cols(&q, c0, c1)?;
        let kh = ops::slice_cols(&k, c0, c1)?;
        let vh = ops::slice_cols(&v, c0, c1)?;
        let logits = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, scale)?;
        let weights = ops::softmax_rows(&logits)?;
        head_outs.push(ops::matmul(&weights, &vh)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let merged = ops::concat_cols(&refs)?;
    w.wo.apply(&merged)
}

/// linear -> SiLU -> linear. No residual inside.
pub fn ffn(x: &Tensor, w: &FfnWeights) -> Result<Tensor> {
    w.w2.apply(&ops::silu(&w.w1.apply(x)?)?)
}

/// Pre-norm transformer encoder block:
/// `y = x + attn(rms(x)); z = y + ffn(rms(y))`.
pub fn encoder_block(x: &Tensor, cfg: &AttnConfig, w: &EncoderBlockWeights) -> Result<Tensor> {
    let normed = ops::rms_norm(x, &w.norm_attn, RMS_EPS)?;
    let attended = mhca(&normed, &normed, cfg, &w.attn)?;
    let y = ops::add(x, &attended)?;
    let normed2 = ops::rms_norm(&y, &w.norm_ffn, RMS_EPS)?;
    ops::add(&y, &ffn(&normed2, &w.ffn)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn cfg1() -> AttnConfig {
        AttnConfig::new(4, 1).unwrap()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(AttnConfig::new(6, 4).is_err());
        assert!(AttnConfig::new(8, 4).is_ok());
    }

    #[test]
    fn single_key_dominates_output() {
        // With one kv row, attention weights are 1 regardless of queries.
        let mut rng = crate::rng(2);
        let cfg = cfg1();
        let w = MhcaWeights::init(4, &mut rng);
        let kv = Tensor::rand_uniform([1, 4], -1.0, 1.0, &mut rng);
        let q1 = Tensor::rand_uniform([3, 4], -1.0, 1.0, &mut rng);
        let out = mhca(&q1, &kv, &cfg, &w).unwrap();
        for r in 1..3 {
            for c in 0..4 {
                assert!((out.get2(r, c) - out.get2(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut rng = crate::rng(3);
        let cfg = cfg1();
        let w = MhcaWeights::identity(4);
        let row: Vec<f64> = (0..4).map(|i| 0.3 * i as f64).collect();
        let kv = Tensor::from_rows(&[&row, &row, &row]);
        let q = Tensor::rand_uniform([2, 4], -1.0, 1.0, &mut rng);
        let out = mhca(&q, &kv, &cfg, &w).unwrap();
        // Mean of identical values is the value itself.
        for r in 0..2 {
            for c in 0..4 {
                assert!((out.get2(r, c) - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_identity_matches_plain_formula() {
        let mut rng = crate::rng(4);
        let cfg = cfg1();
        let w = MhcaWeights::identity(4);
        let q = Tensor::rand_uniform([2, 4], -1.0, 1.0, &mut rng);
        let kv = Tensor::rand_uniform([3, 4], -1.0, 1.0, &mut rng);
        let got = mhca(&q, &kv, &cfg, &w).unwrap();

        // Standalone softmax(QK^T/sqrt(D))V.
        let scale = 1.0 / 2.0; // sqrt(4)
        let mut want = vec![0.0; 2 * 4];
        for i in 0..2 {
            let mut logits = [0.0; 3];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..4 {
                    dot += q.get2(i, c) * kv.get2(j, c);
                }
                *logit = dot * scale;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..4 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += exps[j] / sum * kv.get2(j, c);
                }
                want[i * 4 + c] = acc;
            }
        }
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kv_permutation_invariance() {
        let mut rng = crate::rng(5);
        let cfg = AttnConfig::new(8, 2).unwrap();
        let w = MhcaWeights::init(8, &mut rng);
        let q = Tensor::rand_uniform([3, 8], -1.0, 1.0, &mut rng);
        let kv = Tensor::rand_uniform([4, 8], -1.0, 1.0, &mut rng);
        let out = mhca(&q, &kv, &cfg, &w).unwrap();

        // Permute kv rows 0..4 -> [2, 0, 3, 1]
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|r| kv.data()[r * 8..(r + 1) * 8].to_vec())
            .collect();
        let permuted = Tensor::from_rows(&[&rows[2], &rows[0], &rows[3], &rows[1]]);
        let out_p = mhca(&q, &permuted, &cfg, &w).unwrap();
        assert!(out.max_abs_diff(&out_p) < 1e-12);
    }

    #[test]
    fn ffn_zero_cases_and_hand_computation() {
        let z = ffn(
            &Tensor::from_rows(&[&[1.0, 2.0]]),
            &FfnWeights::zeros(2, 4),
        )
        .unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let mut rng = crate::rng(6);
        let w = FfnWeights::init(2, 4, &mut rng);
        let zero_in = ffn(&Tensor::zeros([1, 2]), &w).unwrap();
        // Zero input with zero biases -> silu(0)=0 -> w2 bias (zero) = 0.
        assert!(zero_in.data().iter().all(|&v| v == 0.0));

        // Hand-set weights on a 1x2 input.
        let w1 = Tensor::from_rows(&[&[1.0, 0.0, 0.5, -1.0], &[0.0, 1.0, 0.5, 1.0]]);
        let w2t = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.5, -0.5]]);
        let hand = FfnWeights {
            w1: LinearW {
                w: w1.clone(),
                b: Tensor::zeros([4]),
            },
            w2: LinearW {
                w: w2t.clone(),
                b: Tensor::zeros([2]),
            },
        };
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        let got = ffn(&x, &hand).unwrap();
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let hidden = [silu(1.0), silu(2.0), silu(1.5), silu(1.0)];
        let want = [
            hidden[0] + hidden[2] + 0.5 * hidden[3],
            hidden[1] + hidden[2] - 0.5 * hidden[3],
        ];
        assert!((got.data()[0] - want[0]).abs() < 1e-12);
        assert!((got.data()[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn encoder_block_with_zero_weights_is_identity() {
        let cfg = AttnConfig::new(4, 2).unwrap();
        let w = EncoderBlockWeights {
            norm_attn: Tensor::full([4], 1.0),
            attn: MhcaWeights::zeros(4),
            norm_ffn: Tensor::full([4], 1.0),
            ffn: FfnWeights::zeros(4, 16),
        };
        let mut rng = crate::rng(7);
        let x = Tensor::rand_uniform([3, 4], -1.0, 1.0, &mut rng);
        let y = encoder_block(&x, &cfg, &w).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn encoder_block_matches_manual_composition() {
        let mut rng = crate::rng(8);
        let cfg = AttnConfig::new(8, 4).unwrap();
        let w = EncoderBlockWeights::init(&cfg, &mut rng);
        let x = Tensor::rand_uniform([3, 8], -1.0, 1.0, &mut rng);
        let got = encoder_block(&x, &cfg, &w).unwrap();

        let n1 = ops::rms_norm(&x, &w.norm_attn, RMS_EPS).unwrap();
        let y = ops::add(&x, &mhca(&n1, &n1, &cfg, &w.attn).unwrap()).unwrap();
        let n2 = ops::rms_norm(&y, &w.norm_ffn, RMS_EPS).unwrap();
        let want = ops::add(&y, &ffn(&n2, &w.ffn).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want) == 0.0);
    }

    #[test]
    fn single_token_self_attention_matches_mhca() {
        let mut rng = crate::rng(9);
        let cfg = AttnConfig::new(4, 2).unwrap();
        let w = MhcaWeights::init(4, &mut rng);
        let x = Tensor::rand_uniform([1, 4], -1.0, 1.0, &mut rng);
        let self_attn = mhca(&x, &x, &cfg, &w).unwrap();
        // With one token the attention weight is 1: output is wo(wv(x)).
        let v = w.wv.apply(&x).unwrap();
        let want = w.wo.apply(&v).unwrap();
        assert!(self_attn.max_abs_diff(&want) < 1e-12);
    }
}
