//! The full network: patch embedding with learned positions, conditioning
//! embeddings, a stack of residual blocks that run a spatial selective-scan
//! branch beside a wavelet-domain branch and fuse them with cross-attention,
//! a transformer block inserted at a fixed interval (optionally one shared
//! parameter set for every insertion), and the projection back to pixels.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fusion::{fuse, multihead_attention, FusionParams};
use crate::scalar::Scalar;
use crate::scan::{make_order, wavelet_window_order, ScanKind, ScanOrder, WindowDirection};
use crate::ssm::{linear_init, zero_param, DirectionalMamba};
use crate::tensor::Tensor;
use crate::wavelet::{decompose, reconstruct, WaveletStack};

const LN_EPS: f64 = 1e-5;
const TIME_SCALE: f64 = 1000.0;

fn randn_param<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(f64::standard_normal(rng) * std))
        .collect();
    Tensor::param(data, shape)
}

/// [batch, dim] sinusoidal features of the scalar times.
pub fn time_features<T: Scalar>(t: &[f64], dim: usize) -> Result<Tensor<T>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "time_features",
            detail: format!("feature width {dim} must be even"),
        });
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::from_f64((tv * TIME_SCALE * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::from_f64((tv * TIME_SCALE * freq).sin()));
        }
    }
    Tensor::from_vec(data, &[t.len(), dim])
}

/// Cut p x p patches, flatten each as [channel, row, col], project to model
/// width, and add the learned position table.
pub fn patchify<T: Scalar>(
    x: &Tensor<T>,
    patch: usize,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pos: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: s,
            detail: "expected [batch, channels, height, width]".into(),
        });
    }
    let (bsz, chan, h, wd) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || wd % patch != 0 {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: s,
            detail: format!("extents not divisible by patch {patch}"),
        });
    }
    let (gh, gw) = (h / patch, wd / patch);
    let cells = x
        .reshape(&[bsz, chan, gh, patch, gw, patch])?
        .transpose(1, 2)? // [b, gh, c, p, gw, p]
        .transpose(2, 4)? // [b, gh, gw, p, c, p]
        .transpose(3, 4)? // [b, gh, gw, c, p, p]
        .reshape(&[bsz, gh * gw, chan * patch * patch])?;
    cells.matmul(w)?.add(b)?.add(pos)
}

/// Exact inverse of the patch layout, after projecting tokens back to
/// per-patch pixel blocks.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    channels: usize,
    patch: usize,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = tokens.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            shape: s,
            detail: "expected [batch, tokens, width]".into(),
        });
    }
    let (bsz, count) = (s[0], s[1]);
    let grid = (count as f64).sqrt().round() as usize;
    if grid * grid != count {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            shape: s,
            detail: format!("token count {count} is not a square"),
        });
    }
    let px = tokens.matmul(w)?.add(b)?;
    px.reshape(&[bsz, grid, grid, channels, patch, patch])?
        .transpose(3, 4)? // [b, gh, gw, p, c, p]
        .transpose(2, 4)? // [b, gh, c, p, gw, p]
        .transpose(1, 2)? // [b, c, gh, p, gw, p]
        .reshape(&[bsz, channels, grid * patch, grid * patch])
}

/// SiLU then a projection of the condition vector, cut into equal parts.
fn modulation<T: Scalar>(
    cond: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    parts: usize,
) -> Result<Vec<Tensor<T>>> {
    let all = cond.silu()?.matmul(w)?.add(b)?;
    let dim = all.shape()[1] / parts;
    (0..parts).map(|i| all.narrow(1, i * dim, dim)).collect()
}

/// [batch, width] -> [batch, len, width] by repetition.
fn over_tokens<T: Scalar>(m: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let s = m.shape().to_vec();
    m.reshape(&[s[0], 1, s[1]])?.repeat_axis(1, len)
}

/// x * (1 + scale) + shift, with per-sample modulation vectors.
fn modulate<T: Scalar>(
    x: &Tensor<T>,
    shift: &Tensor<T>,
    scale: &Tensor<T>,
) -> Result<Tensor<T>> {
    let len = x.shape()[1];
    let gain = over_tokens(&scale.affine(T::one(), T::one())?, len)?;
    x.mul(&gain)?.add(&over_tokens(shift, len)?)
}

/// [batch, len, width] -> [batch, width, grid, grid] (row-major tokens).
fn tokens_to_grid<T: Scalar>(x: &Tensor<T>, grid: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    x.reshape(&[s[0], grid, grid, s[2]])?
        .transpose(2, 3)? // [b, g, d, g]
        .transpose(1, 2) // [b, d, g, g]
}

fn grid_to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    x.transpose(1, 2)? // [b, g, d, g]
        .transpose(2, 3)? // [b, g, g, d]
        .reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Condition pathway: sinusoidal time features through a two-layer MLP, plus
/// a class table whose final row is the learned unconditional token.
pub struct ConditionEmbedding<T: Scalar> {
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    /// [class_count + 1, width]
    pub table: Tensor<T>,
    pub class_count: usize,
    pub width: usize,
}

impl<T: Scalar> ConditionEmbedding<T> {
    pub fn init(width: usize, class_count: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ConditionEmbedding {
            mlp_w1: linear_init(width, &[width, width], rng)?,
            mlp_b1: zero_param(&[width])?,
            mlp_w2: linear_init(width, &[width, width], rng)?,
            mlp_b2: zero_param(&[width])?,
            table: randn_param(&[class_count + 1, width], 0.02, rng)?,
            class_count,
            width,
        })
    }

    /// Class ids above the table (`> class_count`) are rejected; the id
    /// `class_count` itself selects the unconditional row, as does `None`.
    pub fn embed(&self, t: &[f64], labels: Option<&[usize]>) -> Result<Tensor<T>> {
        let ids: Vec<usize> = match labels {
            Some(l) => {
                if l.len() != t.len() {
                    return Err(Error::InvalidArgument {
                        op: "condition_embed",
                        detail: format!("{} labels for {} times", l.len(), t.len()),
                    });
                }
                for &id in l {
                    if id > self.class_count {
                        return Err(Error::IndexOutOfBounds {
                            op: "condition_embed",
                            index: id,
                            extent: self.class_count,
                        });
                    }
                }
                l.to_vec()
            }
            None => vec![self.class_count; t.len()],
        };
        let tf = time_features::<T>(t, self.width)?;
        let hidden = tf.matmul(&self.mlp_w1)?.add(&self.mlp_b1)?.silu()?;
        let temb = hidden.matmul(&self.mlp_w2)?.add(&self.mlp_b2)?;
        let cemb = self.table.gather(0, &ids)?;
        temb.add(&cemb)
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<T>)>) {
        out.push(("cond.mlp_w1".into(), self.mlp_w1.clone()));
        out.push(("cond.mlp_b1".into(), self.mlp_b1.clone()));
        out.push(("cond.mlp_w2".into(), self.mlp_w2.clone()));
        out.push(("cond.mlp_b2".into(), self.mlp_b2.clone()));
        out.push(("cond.table".into(), self.table.clone()));
    }
}

/// One residual block: shared entry norm, then a spatial scan branch and a
/// wavelet-domain scan branch (each with its own shift/scale modulation),
/// cross-attention fusion, and a zero-initialized gate on the residual.
pub struct DimBlockParams<T: Scalar> {
    /// [width, 5 * width] -> shift_s, scale_s, shift_w, scale_w, gate.
    pub mod_w: Tensor<T>,
    pub mod_b: Tensor<T>,
    pub spatial: DirectionalMamba<T>,
    pub wavelet: Option<(DirectionalMamba<T>, FusionParams<T>)>,
}

impl<T: Scalar> DimBlockParams<T> {
    pub fn init(cfg: &Config, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.width;
        let wavelet = if cfg.level > 0 {
            let mamba = DirectionalMamba::init(2, d, cfg.expand, cfg.state, d, rng)?;
            let fusion = FusionParams::init(d, cfg.heads, cfg.fusion_variant()?, rng)?;
            Some((mamba, fusion))
        } else {
            None
        };
        Ok(DimBlockParams {
            mod_w: zero_param(&[d, 5 * d])?,
            mod_b: zero_param(&[5 * d])?,
            spatial: DirectionalMamba::init(1, d, cfg.expand, cfg.state, d, rng)?,
            wavelet,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        cond: &Tensor<T>,
        spatial_order: &ScanOrder,
        wavelet_orders: &[ScanOrder],
        grid: usize,
        level: usize,
    ) -> Result<Tensor<T>> {
        let len = x.shape()[1];
        let mods = modulation(cond, &self.mod_w, &self.mod_b, 5)?;
        let entry = x.layer_norm(T::from_f64(LN_EPS))?;

        let hs = modulate(&entry, &mods[0], &mods[1])?;
        let spatial = self
            .spatial
            .forward(&hs, std::slice::from_ref(spatial_order), cond)?;

        let fused = if let Some((wmamba, fparams)) = &self.wavelet {
            let hw = modulate(&entry, &mods[2], &mods[3])?;
            let stack = decompose(&tokens_to_grid(&hw, grid)?, level)?;
            let wtokens = stack.to_tokens()?.transpose(1, 2)?;
            let wout = wmamba.forward(&wtokens, wavelet_orders, cond)?;
            let restored = reconstruct(&WaveletStack::from_tokens(
                &wout.transpose(1, 2)?,
                level,
                grid,
                grid,
            )?)?;
            fuse(&spatial, &grid_to_tokens(&restored)?, fparams)?
        } else {
            spatial
        };

        x.add(&over_tokens(&mods[4], len)?.mul(&fused)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.mod_w"), self.mod_w.clone()));
        out.push((format!("{prefix}.mod_b"), self.mod_b.clone()));
        self.spatial.collect_params(&format!("{prefix}.spatial"), out);
        if let Some((wmamba, fparams)) = &self.wavelet {
            wmamba.collect_params(&format!("{prefix}.wavelet"), out);
            fparams.collect_params(&format!("{prefix}.fusion"), out);
        }
    }
}

/// Pre-norm attention + gated MLP with its own modulation head; one
/// parameter set may serve several insertion points.
pub struct TransformerBlockParams<T: Scalar> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub qkv: Tensor<T>,
    pub attn_out: Tensor<T>,
    pub mlp_a: Tensor<T>,
    pub mlp_g: Tensor<T>,
    pub mlp_down: Tensor<T>,
    /// [width, 6 * width] -> shift/scale/gate for each of the two sublayers.
    pub mod_w: Tensor<T>,
    pub mod_b: Tensor<T>,
    pub heads: usize,
}

const MLP_RATIO: usize = 4;

impl<T: Scalar> TransformerBlockParams<T> {
    pub fn init(width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = MLP_RATIO * width;
        Ok(TransformerBlockParams {
            ln1_g: Tensor::param(vec![T::one(); width], &[width])?,
            ln1_b: zero_param(&[width])?,
            ln2_g: Tensor::param(vec![T::one(); width], &[width])?,
            ln2_b: zero_param(&[width])?,
            qkv: linear_init(width, &[width, 3 * width], rng)?,
            attn_out: linear_init(width, &[width, width], rng)?,
            mlp_a: linear_init(width, &[width, hidden], rng)?,
            mlp_g: linear_init(width, &[width, hidden], rng)?,
            mlp_down: linear_init(hidden, &[hidden, width], rng)?,
            mod_w: zero_param(&[width, 6 * width])?,
            mod_b: zero_param(&[6 * width])?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let len = x.shape()[1];
        let width = x.shape()[2];
        let m = modulation(cond, &self.mod_w, &self.mod_b, 6)?;

        let h1 = x
            .layer_norm(T::from_f64(LN_EPS))?
            .mul(&self.ln1_g)?
            .add(&self.ln1_b)?;
        let h1 = modulate(&h1, &m[0], &m[1])?;
        let qkv = h1.matmul(&self.qkv)?;
        let q = qkv.narrow(2, 0, width)?;
        let k = qkv.narrow(2, width, width)?;
        let v = qkv.narrow(2, 2 * width, width)?;
        let attn = multihead_attention(&q, &k, &v, self.heads)?.matmul(&self.attn_out)?;
        let x = x.add(&over_tokens(&m[2], len)?.mul(&attn)?)?;

        let h2 = x
            .layer_norm(T::from_f64(LN_EPS))?
            .mul(&self.ln2_g)?
            .add(&self.ln2_b)?;
        let h2 = modulate(&h2, &m[3], &m[4])?;
        let mlp = h2
            .matmul(&self.mlp_a)?
            .silu()?
            .mul(&h2.matmul(&self.mlp_g)?)?
            .matmul(&self.mlp_down)?;
        x.add(&over_tokens(&m[5], len)?.mul(&mlp)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.ln1_g"), self.ln1_g.clone()));
        out.push((format!("{prefix}.ln1_b"), self.ln1_b.clone()));
        out.push((format!("{prefix}.ln2_g"), self.ln2_g.clone()));
        out.push((format!("{prefix}.ln2_b"), self.ln2_b.clone()));
        out.push((format!("{prefix}.qkv"), self.qkv.clone()));
        out.push((format!("{prefix}.attn_out"), self.attn_out.clone()));
        out.push((format!("{prefix}.mlp_a"), self.mlp_a.clone()));
        out.push((format!("{prefix}.mlp_g"), self.mlp_g.clone()));
        out.push((format!("{prefix}.mlp_down"), self.mlp_down.clone()));
        out.push((format!("{prefix}.mod_w"), self.mod_w.clone()));
        out.push((format!("{prefix}.mod_b"), self.mod_b.clone()));
    }

    pub fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.collect_params("x", &mut v);
        v.iter().map(|(_, p)| p.numel()).sum()
    }
}

pub struct Model<T: Scalar> {
    pub cfg: Config,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos: Tensor<T>,
    pub cond: ConditionEmbedding<T>,
    pub blocks: Vec<DimBlockParams<T>>,
    /// One entry per insertion point; entries alias one set when shared.
    pub transformers: Vec<Rc<TransformerBlockParams<T>>>,
    pub final_mod_w: Tensor<T>,
    pub final_mod_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
    spatial_orders: Vec<ScanOrder>,
    wavelet_orders: Vec<ScanOrder>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: &Config, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let grid = cfg.grid();
        let in_dim = cfg.channels * cfg.patch * cfg.patch;
        let kind = cfg.scan_kind()?;

        let mut spatial_orders = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let dir = i % kind.num_directions();
            let order = if kind == ScanKind::WaveletWindow {
                // raw-space window scan: same local windows, no transform
                let wd = if dir == 0 {
                    WindowDirection::LeftRight
                } else {
                    WindowDirection::TopBottom
                };
                wavelet_window_order(0, grid, grid, wd)?
            } else {
                make_order(kind, dir, grid, grid)?
            };
            spatial_orders.push(order);
        }
        let wavelet_orders = if cfg.level > 0 {
            vec![
                wavelet_window_order(cfg.level, grid, grid, WindowDirection::LeftRight)?,
                wavelet_window_order(cfg.level, grid, grid, WindowDirection::TopBottom)?,
            ]
        } else {
            Vec::new()
        };

        let blocks = (0..cfg.depth)
            .map(|_| DimBlockParams::init(cfg, rng))
            .collect::<Result<Vec<_>>>()?;

        let insertions = cfg.depth / cfg.attn_every;
        let transformers = if cfg.shared_transformer {
            let shared = Rc::new(TransformerBlockParams::init(d, cfg.heads, rng)?);
            vec![shared; insertions]
        } else {
            (0..insertions)
                .map(|_| Ok(Rc::new(TransformerBlockParams::init(d, cfg.heads, rng)?)))
                .collect::<Result<Vec<_>>>()?
        };

        Ok(Model {
            cfg: cfg.clone(),
            patch_w: linear_init(in_dim, &[in_dim, d], rng)?,
            patch_b: zero_param(&[d])?,
            pos: randn_param(&[grid * grid, d], 0.02, rng)?,
            cond: ConditionEmbedding::init(d, cfg.class_count, rng)?,
            blocks,
            transformers,
            final_mod_w: zero_param(&[d, 2 * d])?,
            final_mod_b: zero_param(&[2 * d])?,
            out_w: zero_param(&[d, in_dim])?,
            out_b: zero_param(&[in_dim])?,
            spatial_orders,
            wavelet_orders,
        })
    }

    /// The id that selects the unconditional table row.
    pub fn null_class(&self) -> usize {
        self.cfg.class_count
    }

    /// Token stream through every block (without the patch/output stages).
    pub fn run_blocks(&self, tokens: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = tokens.clone();
        let mut next_xform = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(
                &x,
                cond,
                &self.spatial_orders[i],
                &self.wavelet_orders,
                self.cfg.grid(),
                self.cfg.level,
            )?;
            if (i + 1) % self.cfg.attn_every == 0 {
                x = self.transformers[next_xform].forward(&x, cond)?;
                next_xform += 1;
            }
        }
        Ok(x)
    }

    /// Velocity estimate for `x` at times `t` (one per batch item).
    pub fn forward(
        &self,
        x: &Tensor<T>,
        t: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        let want = [s[0], self.cfg.channels, self.cfg.image, self.cfg.image];
        if s.len() != 4 || s[1..] != want[1..] {
            return Err(Error::InvalidShape {
                op: "model_forward",
                shape: s,
                detail: format!(
                    "expected [batch, {}, {}, {}]",
                    self.cfg.channels, self.cfg.image, self.cfg.image
                ),
            });
        }
        if t.len() != s[0] {
            return Err(Error::InvalidArgument {
                op: "model_forward",
                detail: format!("{} times for a batch of {}", t.len(), s[0]),
            });
        }
        let mut clamped = Vec::with_capacity(t.len());
        for &tv in t {
            if !(-1e-9..=1.0 + 1e-9).contains(&tv) {
                return Err(Error::InvalidArgument {
                    op: "model_forward",
                    detail: format!("time {tv} outside [0, 1]"),
                });
            }
            clamped.push(tv.clamp(0.0, 1.0));
        }

        let cond = self.cond.embed(&clamped, labels)?;
        let tokens = patchify(x, self.cfg.patch, &self.patch_w, &self.patch_b, &self.pos)?;
        let tokens = self.run_blocks(&tokens, &cond)?;

        let m = modulation(&cond, &self.final_mod_w, &self.final_mod_b, 2)?;
        let normed = tokens.layer_norm(T::from_f64(LN_EPS))?;
        let out_tokens = modulate(&normed, &m[0], &m[1])?;
        unpatchify(
            &out_tokens,
            self.cfg.channels,
            self.cfg.patch,
            &self.out_w,
            &self.out_b,
        )
    }

    pub fn collect_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("patch.w".into(), self.patch_w.clone()));
        out.push(("patch.b".into(), self.patch_b.clone()));
        out.push(("patch.pos".into(), self.pos.clone()));
        self.cond.collect_params(&mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("block{i}"), &mut out);
        }
        let mut seen: Vec<&Rc<TransformerBlockParams<T>>> = Vec::new();
        for tb in &self.transformers {
            if seen.iter().any(|s| Rc::ptr_eq(s, tb)) {
                continue;
            }
            tb.collect_params(&format!("xform{}", seen.len()), &mut out);
            seen.push(tb);
        }
        out.push(("final.mod_w".into(), self.final_mod_w.clone()));
        out.push(("final.mod_b".into(), self.final_mod_b.clone()));
        out.push(("final.out_w".into(), self.out_w.clone()));
        out.push(("final.out_b".into(), self.out_b.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.collect_params().iter().map(|(_, p)| p.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Small enough for fast tests, still exercising every component.
    fn tiny_config() -> Config {
        Config {
            channels: 1,
            image: 8,
            patch: 2,
            width: 8,
            depth: 4,
            attn_every: 4,
            level: 1,
            heads: 2,
            state: 2,
            expand: 2,
            class_count: 2,
            ..Config::default()
        }
    }

    #[test]
    fn patch_counts_follow_the_grid() {
        let mut r = rng(1);
        let d = 4;
        let w = Tensor::<f64>::randn(&[4, d], 0.0, 1.0, &mut r);
        let b = Tensor::zeros(&[d]);
        let x8 = Tensor::randn(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
        let pos16 = Tensor::zeros(&[16, d]);
        assert_eq!(patchify(&x8, 2, &w, &b, &pos16).unwrap().shape(), &[1, 16, d]);
        let x32 = Tensor::randn(&[1, 1, 32, 32], 0.0, 1.0, &mut r);
        let pos256 = Tensor::zeros(&[256, d]);
        assert_eq!(
            patchify(&x32, 2, &w, &b, &pos256).unwrap().shape(),
            &[1, 256, d]
        );
        assert!(patchify(&x8, 3, &w, &b, &pos16).is_err());
    }

    #[test]
    fn patch_layout_inverts_exactly_under_identity_projections() {
        let mut r = rng(2);
        let eye = {
            let mut v = vec![0.0; 16];
            for i in 0..4 {
                v[i * 4 + i] = 1.0;
            }
            Tensor::<f64>::from_vec(v, &[4, 4]).unwrap()
        };
        let zero4 = Tensor::zeros(&[4]);
        let pos = Tensor::zeros(&[4, 4]);
        let x = Tensor::randn(&[2, 1, 4, 4], 0.0, 1.0, &mut r);
        let tokens = patchify(&x, 2, &eye, &zero4, &pos).unwrap();
        let back = unpatchify(&tokens, 1, 2, &eye, &zero4).unwrap();
        assert_eq!(back.shape(), x.shape());
        for (a, b) in back.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() == 0.0);
        }
    }

    #[test]
    fn blocks_are_the_identity_at_initialization() {
        let cfg = tiny_config();
        let mut r = rng(3);
        let model = Model::<f64>::init(&cfg, &mut r).unwrap();
        let tokens = Tensor::randn(&[2, 16, 8], 0.0, 1.0, &mut r);
        let cond = Tensor::randn(&[2, 8], 0.0, 1.0, &mut r);
        let out = model.run_blocks(&tokens, &cond).unwrap();
        for (a, b) in out.to_vec().iter().zip(tokens.to_vec()) {
            assert!((a - b).abs() == 0.0);
        }
    }

    #[test]
    fn fresh_model_outputs_zero_velocity() {
        // zero-initialized gates and output projection: the whole network
        // reduces to unpatchify(norm(patchify(x))) with a zero projection
        let cfg = tiny_config();
        let mut r = rng(4);
        let model = Model::<f32>::init(&cfg, &mut r).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
        let out = model.forward(&x, &[0.3, 0.9], Some(&[0, 1])).unwrap();
        assert_eq!(out.shape(), x.shape());
        for v in out.to_vec() {
            assert!(v == 0.0);
        }
    }

    #[test]
    fn level_zero_runs_without_a_wavelet_branch() {
        let mut cfg = tiny_config();
        cfg.level = 0;
        let mut r = rng(5);
        let model = Model::<f32>::init(&cfg, &mut r).unwrap();
        let names: Vec<String> = model.collect_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.contains("fusion") && !n.contains("wavelet")));
        let x = Tensor::randn(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
        model.forward(&x, &[0.5], None).unwrap();
    }

    #[test]
    fn four_sweep_blocks_use_four_distinct_orders() {
        let cfg = tiny_config();
        let mut r = rng(6);
        let model = Model::<f32>::init(&cfg, &mut r).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(
                    model.spatial_orders[i].perm(),
                    model.spatial_orders[j].perm(),
                    "blocks {i} and {j} share an order"
                );
            }
        }
    }

    #[test]
    fn shared_transformer_saves_exactly_the_duplicate_parameters() {
        let mut cfg = tiny_config();
        cfg.depth = 8;
        let mut r = rng(7);
        let shared = Model::<f32>::init(&cfg, &mut r).unwrap();
        assert!(Rc::ptr_eq(&shared.transformers[0], &shared.transformers[1]));

        cfg.shared_transformer = false;
        let mut r2 = rng(7);
        let indep = Model::<f32>::init(&cfg, &mut r2).unwrap();
        assert!(!Rc::ptr_eq(&indep.transformers[0], &indep.transformers[1]));

        let per_block = indep.transformers[0].param_count();
        assert_eq!(
            indep.param_count() - shared.param_count(),
            per_block,
            "two insertion points should differ by one transformer block"
        );

        let names = |m: &Model<f32>| -> Vec<String> {
            m.collect_params().into_iter().map(|(n, _)| n).collect()
        };
        assert!(names(&shared).iter().any(|n| n.starts_with("xform0.")));
        assert!(!names(&shared).iter().any(|n| n.starts_with("xform1.")));
        assert!(names(&indep).iter().any(|n| n.starts_with("xform1.")));
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let cfg = tiny_config();
        let mut r = rng(8);
        let model = Model::<f32>::init(&cfg, &mut r).unwrap();
        // break the zero initialization so the whole stack participates
        for (_, p) in model.collect_params() {
            let mut d = p.data_mut();
            for (i, v) in d.iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = 0.01 * ((i % 7) as f32 - 3.0);
                }
            }
        }
        let x = Tensor::randn(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
        let a = model.forward(&x, &[0.2, 0.7], Some(&[0, 2])).unwrap();
        let b = model.forward(&x, &[0.2, 0.7], Some(&[0, 2])).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(a.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn absent_labels_select_the_unconditional_row() {
        let cfg = tiny_config();
        let mut r = rng(9);
        let model = Model::<f32>::init(&cfg, &mut r).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
        let null = model.null_class();
        let a = model.forward(&x, &[0.4, 0.6], None).unwrap();
        let b = model.forward(&x, &[0.4, 0.6], Some(&[null, null])).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let cfg = tiny_config();
        let mut r = rng(10);
        let model = Model::<f32>::init(&cfg, &mut r).unwrap();
        let x = Tensor::randn(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
        assert!(model.forward(&x, &[0.5], Some(&[3])).is_err()); // id > null
        assert!(model.forward(&x, &[0.5], Some(&[2])).is_ok()); // null id
        assert!(model.forward(&x, &[1.5], None).is_err()); // t out of range
        assert!(model.forward(&x, &[0.1, 0.2], None).is_err()); // t count
        let bad = Tensor::randn(&[1, 1, 4, 4], 0.0, 1.0, &mut r);
        assert!(model.forward(&bad, &[0.5], None).is_err()); // wrong extent
    }

    #[test]
    fn whole_network_passes_a_gradient_check() {
        let cfg = tiny_config();
        let mut r = rng(11);
        let model = Model::<f64>::init(&cfg, &mut r).unwrap();
        let params = model.collect_params();
        // randomize every parameter (gates included) so no path is silenced
        let mut pr = rng(12);
        for (_, p) in &params {
            let fresh = Tensor::<f64>::randn(p.shape(), 0.0, 0.3, &mut pr);
            p.data_mut().copy_from_slice(&fresh.to_vec());
        }
        let x = Tensor::randn(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
        let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
        let err = crate::tensor::finite_diff_check(
            move || model.forward(&x, &[0.37], Some(&[1]))?.square()?.sum_all(),
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }
}
