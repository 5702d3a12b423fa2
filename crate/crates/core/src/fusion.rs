//! Fusion of the two feature branches. The default path projects each branch
//! to queries/keys/values, runs a pair of cross-attentions with the queries
//! exchanged between branches, and mixes the concatenated results with a
//! linear layer. Simpler variants (key exchange, joint self-attention, plain
//! concatenation) are kept for comparison runs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::linear_init;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    /// Attn(q_s, k_w, v_w) beside Attn(q_w, k_s, v_s); queries cross over.
    SwapQ,
    /// Attn(q_w, k_s, v_w) beside Attn(q_s, k_w, v_s); keys cross over.
    SwapK,
    /// One self-attention over the channel-concatenated pair.
    PlainAttention,
    /// Linear(Concat(f_s, f_w)) with no attention at all.
    LinearConcat,
}

impl FusionVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "swap_q" => Ok(FusionVariant::SwapQ),
            "swap_k" => Ok(FusionVariant::SwapK),
            "plain_attention" => Ok(FusionVariant::PlainAttention),
            "linear_concat" => Ok(FusionVariant::LinearConcat),
            other => Err(Error::config(format!(
                "unknown fusion variant {other:?}; expected swap_q, swap_k, \
                 plain_attention, or linear_concat"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionVariant::SwapQ => "swap_q",
            FusionVariant::SwapK => "swap_k",
            FusionVariant::PlainAttention => "plain_attention",
            FusionVariant::LinearConcat => "linear_concat",
        }
    }
}

pub struct FusionParams<T: Scalar> {
    /// [dim, 3 * dim]: spatial-branch q/k/v projection, concatenated.
    pub qkv_s: Tensor<T>,
    /// [dim, 3 * dim]: wavelet-branch q/k/v projection, concatenated.
    pub qkv_w: Tensor<T>,
    /// [2 * dim, dim]: mixes the concatenated pair back to model width.
    pub out_w: Tensor<T>,
    pub heads: usize,
    pub dim: usize,
    pub variant: FusionVariant,
}

impl<T: Scalar> FusionParams<T> {
    pub fn init(
        dim: usize,
        heads: usize,
        variant: FusionVariant,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument {
                op: "fusion_init",
                detail: format!("width {dim} is not divisible by {heads} heads"),
            });
        }
        Ok(FusionParams {
            qkv_s: linear_init(dim, &[dim, 3 * dim], rng)?,
            qkv_w: linear_init(dim, &[dim, 3 * dim], rng)?,
            out_w: linear_init(2 * dim, &[2 * dim, dim], rng)?,
            heads,
            dim,
            variant,
        })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.qkv_s"), self.qkv_s.clone()));
        out.push((format!("{prefix}.qkv_w"), self.qkv_w.clone()));
        out.push((format!("{prefix}.out_w"), self.out_w.clone()));
    }
}

/// Scaled dot-product attention over the trailing two axes [.., len, width],
/// split into `heads` independent slices of the channel axis. Every query
/// attends to every key (no masking).
pub fn multihead_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let shape = q.shape().to_vec();
    if k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "multihead_attention",
            lhs: shape,
            rhs: if k.shape() != q.shape() {
                k.shape().to_vec()
            } else {
                v.shape().to_vec()
            },
        });
    }
    let n = shape.len();
    if n < 2 {
        return Err(Error::InvalidShape {
            op: "multihead_attention",
            shape,
            detail: "need at least [len, width]".into(),
        });
    }
    let width = shape[n - 1];
    if heads == 0 || width % heads != 0 {
        return Err(Error::InvalidArgument {
            op: "multihead_attention",
            detail: format!("width {width} is not divisible by {heads} heads"),
        });
    }
    let dh = width / heads;

    // [.., len, width] -> [.., heads, len, dh]
    let mut split = shape[..n - 1].to_vec();
    split.extend([heads, dh]);
    let to_heads = |x: &Tensor<T>| -> Result<Tensor<T>> {
        x.reshape(&split)?.transpose(n - 2, n - 1)
    };
    let qh = to_heads(q)?;
    let kh = to_heads(k)?;
    let vh = to_heads(v)?;

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let scores = qh.matmul(&kh.transpose(n - 1, n)?)?.scale(scale)?;
    let weights = scores.softmax_last()?;
    let ctx = weights.matmul(&vh)?; // [.., heads, len, dh]
    ctx.transpose(n - 2, n - 1)?.reshape(&shape)
}

fn split_qkv<T: Scalar>(qkv: &Tensor<T>, dim: usize) -> Result<[Tensor<T>; 3]> {
    let last = qkv.rank() - 1;
    Ok([
        qkv.narrow(last, 0, dim)?,
        qkv.narrow(last, dim, dim)?,
        qkv.narrow(last, 2 * dim, dim)?,
    ])
}

/// Combine same-shaped branch features [.., len, dim] into one stream.
pub fn fuse<T: Scalar>(
    f_s: &Tensor<T>,
    f_w: &Tensor<T>,
    p: &FusionParams<T>,
) -> Result<Tensor<T>> {
    if f_s.shape() != f_w.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: f_s.shape().to_vec(),
            rhs: f_w.shape().to_vec(),
        });
    }
    let last = f_s.rank() - 1;
    if f_s.shape()[last] != p.dim {
        return Err(Error::InvalidShape {
            op: "fuse",
            shape: f_s.shape().to_vec(),
            detail: format!("channel extent must equal fusion width {}", p.dim),
        });
    }
    let [q_s, k_s, v_s] = split_qkv(&f_s.matmul(&p.qkv_s)?, p.dim)?;
    let [q_w, k_w, v_w] = split_qkv(&f_w.matmul(&p.qkv_w)?, p.dim)?;
    let pair = match p.variant {
        FusionVariant::SwapQ => {
            let a = multihead_attention(&q_s, &k_w, &v_w, p.heads)?;
            let b = multihead_attention(&q_w, &k_s, &v_s, p.heads)?;
            Tensor::concat(&[a, b], last)?
        }
        FusionVariant::SwapK => {
            let a = multihead_attention(&q_w, &k_s, &v_w, p.heads)?;
            let b = multihead_attention(&q_s, &k_w, &v_s, p.heads)?;
            Tensor::concat(&[a, b], last)?
        }
        FusionVariant::PlainAttention => {
            let q = Tensor::concat(&[q_s, q_w], last)?;
            let k = Tensor::concat(&[k_s, k_w], last)?;
            let v = Tensor::concat(&[v_s, v_w], last)?;
            multihead_attention(&q, &k, &v, p.heads)?
        }
        FusionVariant::LinearConcat => Tensor::concat(&[f_s.clone(), f_w.clone()], last)?,
    };
    pair.matmul(&p.out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape, 0.0, 1.0, r)
    }

    #[test]
    fn single_position_attention_returns_the_value() {
        let mut r = rng(1);
        let q = randn(&[1, 1, 4], &mut r);
        let k = randn(&[1, 1, 4], &mut r);
        let v = randn(&[1, 1, 4], &mut r);
        let out = multihead_attention(&q, &k, &v, 2).unwrap().to_vec();
        for (o, want) in out.iter().zip(v.to_vec()) {
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_average_the_values() {
        let mut r = rng(2);
        let (len, width) = (3, 4);
        let q = randn(&[1, len, width], &mut r);
        let key_row: Vec<f64> = (0..width).map(|_| f64::standard_normal(&mut r)).collect();
        let k = Tensor::from_vec(key_row.repeat(len), &[1, len, width]).unwrap();
        let v = randn(&[1, len, width], &mut r);
        let out = multihead_attention(&q, &k, &v, 2).unwrap().to_vec();
        let vd = v.to_vec();
        for l in 0..len {
            for c in 0..width {
                let mean: f64 =
                    (0..len).map(|j| vd[j * width + c]).sum::<f64>() / len as f64;
                assert!((out[l * width + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_queries_average_the_values() {
        let mut r = rng(3);
        let (len, width) = (3, 4);
        let q = Tensor::zeros(&[1, len, width]);
        let k = randn(&[1, len, width], &mut r);
        let v = randn(&[1, len, width], &mut r);
        let out = multihead_attention(&q, &k, &v, 1).unwrap().to_vec();
        let vd = v.to_vec();
        for l in 0..len {
            for c in 0..width {
                let mean: f64 =
                    (0..len).map(|j| vd[j * width + c]).sum::<f64>() / len as f64;
                assert!((out[l * width + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_normalize_per_query() {
        // All-ones values turn each output into the row sum of the attention
        // weights, which must be one for every head and query.
        let mut r = rng(4);
        let q = randn(&[2, 5, 6], &mut r);
        let k = randn(&[2, 5, 6], &mut r);
        let v = Tensor::from_vec(vec![1.0; 2 * 5 * 6], &[2, 5, 6]).unwrap();
        let out = multihead_attention(&q, &k, &v, 3).unwrap().to_vec();
        for o in out {
            assert!((o - 1.0).abs() < 1e-12, "row sum {o}");
        }
    }

    #[test]
    fn rejects_width_not_divisible_by_heads() {
        let mut r = rng(5);
        let x = randn(&[1, 2, 5], &mut r);
        assert!(multihead_attention(&x, &x, &x, 2).is_err());
        assert!(FusionParams::<f64>::init(5, 2, FusionVariant::SwapQ, &mut r).is_err());
    }

    #[test]
    fn fuse_rejects_mismatched_token_counts() {
        let mut r = rng(6);
        let p = FusionParams::<f64>::init(4, 2, FusionVariant::SwapQ, &mut r).unwrap();
        let a = randn(&[1, 4, 4], &mut r);
        let b = randn(&[1, 3, 4], &mut r);
        assert!(fuse(&a, &b, &p).is_err());
    }

    #[test]
    fn shared_weights_collapse_to_self_attention() {
        // With one branch fed to both inputs and one shared projection, both
        // attention halves are the same self-attention a, so the output is
        // Linear(Concat(a, a)) and the q-swap equals the k-swap.
        let mut r = rng(7);
        let mut p = FusionParams::<f64>::init(4, 2, FusionVariant::SwapQ, &mut r).unwrap();
        p.qkv_w = p.qkv_s.clone();
        let f = randn(&[1, 5, 4], &mut r);
        let got = fuse(&f, &f, &p).unwrap().to_vec();

        let [q, k, v] = split_qkv(&f.matmul(&p.qkv_s).unwrap(), 4).unwrap();
        let a = multihead_attention(&q, &k, &v, 2).unwrap();
        let want = Tensor::concat(&[a.clone(), a], 2)
            .unwrap()
            .matmul(&p.out_w)
            .unwrap()
            .to_vec();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        p.variant = FusionVariant::SwapK;
        let swapped = fuse(&f, &f, &p).unwrap().to_vec();
        for (g, s) in got.iter().zip(&swapped) {
            assert!((g - s).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_concat_with_identity_projection_passes_first_branch() {
        let mut r = rng(8);
        let dim = 4;
        let mut p =
            FusionParams::<f64>::init(dim, 2, FusionVariant::LinearConcat, &mut r).unwrap();
        let mut eye_zero = vec![0.0; 2 * dim * dim];
        for i in 0..dim {
            eye_zero[i * dim + i] = 1.0;
        }
        p.out_w = Tensor::from_vec(eye_zero, &[2 * dim, dim]).unwrap();
        let f_s = randn(&[1, 3, dim], &mut r);
        let f_w = randn(&[1, 3, dim], &mut r);
        let out = fuse(&f_s, &f_w, &p).unwrap().to_vec();
        for (o, want) in out.iter().zip(f_s.to_vec()) {
            assert!((o - want).abs() < 1e-14);
        }
    }

    #[test]
    fn query_swap_and_key_swap_disagree_on_generic_inputs() {
        for seed in 0..5u64 {
            let mut r = rng(100 + seed);
            let mut p = FusionParams::<f64>::init(4, 2, FusionVariant::SwapQ, &mut r).unwrap();
            let f_s = randn(&[1, 6, 4], &mut r);
            let f_w = randn(&[1, 6, 4], &mut r);
            let a = fuse(&f_s, &f_w, &p).unwrap().to_vec();
            p.variant = FusionVariant::SwapK;
            let b = fuse(&f_s, &f_w, &p).unwrap().to_vec();
            let gap = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(gap > 1e-3, "seed {seed}: variants nearly equal, gap {gap}");
        }
    }

    #[test]
    fn fusion_commutes_with_token_permutation() {
        // No positional term inside the layer, so permuting both inputs
        // permutes the output the same way.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let variants = [
            FusionVariant::SwapQ,
            FusionVariant::SwapK,
            FusionVariant::PlainAttention,
            FusionVariant::LinearConcat,
        ];
        for (i, variant) in variants.into_iter().enumerate() {
            let mut r = rng(20 + i as u64);
            let p = FusionParams::<f64>::init(4, 2, variant, &mut r).unwrap();
            let f_s = randn(&[1, 6, 4], &mut r);
            let f_w = randn(&[1, 6, 4], &mut r);
            let permuted_out = fuse(&f_s, &f_w, &p)
                .unwrap()
                .gather(1, &perm)
                .unwrap()
                .to_vec();
            let out_of_permuted = fuse(
                &f_s.gather(1, &perm).unwrap(),
                &f_w.gather(1, &perm).unwrap(),
                &p,
            )
            .unwrap()
            .to_vec();
            for (a, b) in permuted_out.iter().zip(&out_of_permuted) {
                assert!((a - b).abs() < 1e-12, "{variant:?}");
            }
        }
    }

    #[test]
    fn every_variant_passes_a_gradient_check() {
        let variants = [
            FusionVariant::SwapQ,
            FusionVariant::SwapK,
            FusionVariant::PlainAttention,
            FusionVariant::LinearConcat,
        ];
        for (i, variant) in variants.into_iter().enumerate() {
            let mut r = rng(30 + i as u64);
            let p = FusionParams::<f64>::init(4, 2, variant, &mut r).unwrap();
            let f_s = randn(&[1, 3, 4], &mut r);
            let f_w = randn(&[1, 3, 4], &mut r);
            let params = [p.qkv_s.clone(), p.qkv_w.clone(), p.out_w.clone()];
            let err = crate::tensor::finite_diff_check(
                move || fuse(&f_s, &f_w, &p)?.sum_all(),
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{variant:?}: relative error {err}");
        }
    }
}
