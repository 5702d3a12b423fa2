//! Orthonormal Haar transform over the trailing two axes, with a recursive
//! multi-level decomposition that splits *every* subband at each level (not
//! just the low-pass one), so a level-L stack holds 4^L equally-sized maps.
//! Subbands are kept in depth-first order with the low-frequency child first.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The four 2x2 analysis kernels, flattened [top-left, top-right,
/// bottom-left, bottom-right]. First letter = vertical axis, so "LH" is
/// low-pass down the columns and high-pass along the rows... of the filter
/// named by (vertical, horizontal) response.
fn kernel<T: Scalar>(which: usize) -> [T; 4] {
    let h = T::from_f64(0.5);
    let n = -h;
    match which {
        0 => [h, h, h, h], // LL
        1 => [n, h, n, h], // LH
        2 => [n, n, h, h], // HL
        3 => [h, n, n, h], // HH
        _ => unreachable!(),
    }
}

/// Single-level forward transform: four half-resolution subbands
/// (LL, LH, HL, HH), each a stride-2 correlation of `x`.
pub fn dwt2d<T: Scalar>(x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 2] % 2 != 0 || s[s.len() - 1] % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "dwt2d",
            shape: s.to_vec(),
            detail: "trailing two axes must be even".into(),
        });
    }
    Ok([
        x.corr2x2_down(kernel(0))?,
        x.corr2x2_down(kernel(1))?,
        x.corr2x2_down(kernel(2))?,
        x.corr2x2_down(kernel(3))?,
    ])
}

/// Single-level inverse: exact left inverse of [`dwt2d`] (the kernels form an
/// orthonormal basis of each 2x2 block, so synthesis is the adjoint).
pub fn idwt2d<T: Scalar>(subbands: &[Tensor<T>; 4]) -> Result<Tensor<T>> {
    let shape = subbands[0].shape().to_vec();
    for sb in subbands.iter().skip(1) {
        if sb.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "idwt2d",
                lhs: shape,
                rhs: sb.shape().to_vec(),
            });
        }
    }
    let mut acc = subbands[0].tcorr2x2_up(kernel(0))?;
    for (i, sb) in subbands.iter().enumerate().skip(1) {
        acc = acc.add(&sb.tcorr2x2_up(kernel(i))?)?;
    }
    Ok(acc)
}

/// Full-subband multi-level decomposition.
pub struct WaveletStack<T: Scalar> {
    level: usize,
    /// 4^level maps in depth-first, low-frequency-first order.
    subbands: Vec<Tensor<T>>,
}

pub const MAX_LEVEL: usize = 3;

impl<T: Scalar> WaveletStack<T> {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn subbands(&self) -> &[Tensor<T>] {
        &self.subbands
    }

    /// Assemble a stack from explicit subband maps (depth-first,
    /// low-frequency-first order), e.g. to synthesize a signal with energy
    /// placed in chosen bands.
    pub fn from_subbands(level: usize, subbands: Vec<Tensor<T>>) -> Result<Self> {
        let expected = 1usize << (2 * level);
        if level == 0 || level > MAX_LEVEL || subbands.len() != expected {
            return Err(Error::InvalidArgument {
                op: "wavelet_from_subbands",
                detail: format!(
                    "level {level} requires {expected} subbands, found {}",
                    subbands.len()
                ),
            });
        }
        let shape = subbands[0].shape().to_vec();
        for sb in &subbands[1..] {
            if sb.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "wavelet_from_subbands",
                    lhs: shape,
                    rhs: sb.shape().to_vec(),
                });
            }
        }
        Ok(WaveletStack { level, subbands })
    }

    /// Flatten every subband over its trailing two axes and lay them end to
    /// end along a new trailing axis, preserving the canonical order. For an
    /// input [.., H, W] the result is [.., H*W].
    pub fn to_tokens(&self) -> Result<Tensor<T>> {
        let flat: Vec<Tensor<T>> = self
            .subbands
            .iter()
            .map(|sb| {
                let s = sb.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ns = s[..s.len() - 2].to_vec();
                ns.push(h * w);
                sb.reshape(&ns)
            })
            .collect::<Result<_>>()?;
        let axis = flat[0].rank() - 1;
        Tensor::concat(&flat, axis)
    }

    /// Inverse of [`WaveletStack::to_tokens`]: split a [.., H*W] token axis
    /// back into 4^level subbands of [.., H/2^level, W/2^level].
    pub fn from_tokens(tokens: &Tensor<T>, level: usize, h: usize, w: usize) -> Result<Self> {
        check_level_and_extents("wavelet_from_tokens", level, h, w)?;
        let s = tokens.shape();
        if s.is_empty() || s[s.len() - 1] != h * w {
            return Err(Error::InvalidShape {
                op: "wavelet_from_tokens",
                shape: s.to_vec(),
                detail: format!("trailing axis must be H*W = {}", h * w),
            });
        }
        let count = 1usize << (2 * level);
        let (sh, sw) = (h >> level, w >> level);
        let parts = tokens.chunk(s.len() - 1, count)?;
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(sh);
        shape.push(sw);
        let subbands = parts
            .into_iter()
            .map(|p| p.reshape(&shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(WaveletStack { level, subbands })
    }
}

fn check_level_and_extents(op: &'static str, level: usize, h: usize, w: usize) -> Result<()> {
    if level == 0 || level > MAX_LEVEL {
        return Err(Error::InvalidArgument {
            op,
            detail: format!("level {level} outside supported range 1..={MAX_LEVEL}"),
        });
    }
    let div = 1usize << level;
    if h % div != 0 || w % div != 0 {
        return Err(Error::InvalidShape {
            op,
            shape: vec![h, w],
            detail: format!("trailing extents must be divisible by 2^level = {div}"),
        });
    }
    Ok(())
}

/// Decompose `x` ([.., H, W]) into a level-`level` stack by recursively
/// transforming all four children of every subband. Emission order is
/// depth-first with children visited (LL, LH, HL, HH), which puts the
/// lowest-frequency subband first.
pub fn decompose<T: Scalar>(x: &Tensor<T>, level: usize) -> Result<WaveletStack<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape {
            op: "wavelet_decompose",
            shape: s.to_vec(),
            detail: "needs at least two axes".into(),
        });
    }
    check_level_and_extents("wavelet_decompose", level, s[s.len() - 2], s[s.len() - 1])?;
    let mut subbands = Vec::with_capacity(1 << (2 * level));
    fn go<T: Scalar>(x: &Tensor<T>, depth: usize, out: &mut Vec<Tensor<T>>) -> Result<()> {
        if depth == 0 {
            out.push(x.clone());
            return Ok(());
        }
        for child in dwt2d(x)? {
            go(&child, depth - 1, out)?;
        }
        Ok(())
    }
    go(x, level, &mut subbands)?;
    Ok(WaveletStack { level, subbands })
}

/// Invert [`decompose`]: apply the single-level inverse `level` times in the
/// reverse recursion order.
pub fn reconstruct<T: Scalar>(stack: &WaveletStack<T>) -> Result<Tensor<T>> {
    let expected = 1usize << (2 * stack.level);
    if stack.level == 0 || stack.level > MAX_LEVEL || stack.subbands.len() != expected {
        return Err(Error::InvalidArgument {
            op: "wavelet_reconstruct",
            detail: format!(
                "stack with level {} must hold {} subbands, found {}",
                stack.level,
                expected,
                stack.subbands.len()
            ),
        });
    }
    fn go<T: Scalar>(subbands: &[Tensor<T>], depth: usize) -> Result<Tensor<T>> {
        if depth == 1 {
            let four: &[Tensor<T>; 4] = subbands.try_into().map_err(|_| Error::InvalidArgument {
                op: "wavelet_reconstruct",
                detail: "subband group is not a multiple of four".into(),
            })?;
            return idwt2d(four);
        }
        let quarter = subbands.len() / 4;
        let children = [
            go(&subbands[..quarter], depth - 1)?,
            go(&subbands[quarter..2 * quarter], depth - 1)?,
            go(&subbands[2 * quarter..3 * quarter], depth - 1)?,
            go(&subbands[3 * quarter..], depth - 1)?,
        ];
        idwt2d(&children)
    }
    go(&stack.subbands, stack.level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect(), shape).unwrap()
    }

    #[test]
    fn hand_computed_two_by_two() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let [ll, lh, hl, hh] = dwt2d(&x).unwrap();
        assert_eq!(ll.to_vec(), vec![5.0]);
        assert_eq!(lh.to_vec(), vec![1.0]);
        assert_eq!(hl.to_vec(), vec![2.0]);
        assert_eq!(hh.to_vec(), vec![0.0]);
    }

    #[test]
    fn inverse_of_hand_computed_case() {
        let sb = [
            Tensor::<f64>::from_vec(vec![5.0], &[1, 1]).unwrap(),
            Tensor::<f64>::from_vec(vec![1.0], &[1, 1]).unwrap(),
            Tensor::<f64>::from_vec(vec![2.0], &[1, 1]).unwrap(),
            Tensor::<f64>::from_vec(vec![0.0], &[1, 1]).unwrap(),
        ];
        let x = idwt2d(&sb).unwrap();
        let v = x.to_vec();
        let expect = [1.0, 2.0, 3.0, 4.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_concentrates_in_low_pass() {
        let c = 3.0;
        let x = Tensor::<f64>::full(&[2, 4, 4], c);
        let [ll, lh, hl, hh] = dwt2d(&x).unwrap();
        for v in ll.to_vec() {
            assert!((v - 2.0 * c).abs() < 1e-12);
        }
        for band in [lh, hl, hh] {
            for v in band.to_vec() {
                assert_eq!(v, 0.0);
            }
        }
        let z = Tensor::<f64>::zeros(&[4, 4]);
        for band in dwt2d(&z).unwrap() {
            assert!(band.to_vec().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn synthesis_of_constant_low_pass() {
        let c = 1.25;
        let sb = [
            Tensor::<f64>::full(&[2, 2], 2.0 * c),
            Tensor::<f64>::zeros(&[2, 2]),
            Tensor::<f64>::zeros(&[2, 2]),
            Tensor::<f64>::zeros(&[2, 2]),
        ];
        for v in idwt2d(&sb).unwrap().to_vec() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn kernels_are_orthonormal() {
        let rows: Vec<[f64; 4]> = (0..4).map(kernel).collect();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-15, "rows {i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn single_level_round_trip_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::from_vec(
            (0..4 * 8 * 8).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect(),
            &[4, 8, 8],
        )
        .unwrap();
        let back = idwt2d(&dwt2d(&x).unwrap()).unwrap();
        let worst = x
            .to_vec()
            .iter()
            .zip(back.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-5, "max abs error {worst}");
    }

    #[test]
    fn multi_level_round_trips() {
        for (level, h, w) in [(1, 8, 8), (2, 8, 8), (2, 16, 16), (3, 16, 32), (3, 32, 32)] {
            let x = rand_map(&[3, h, w], level as u64 * 100 + h as u64);
            let stack = decompose(&x, level).unwrap();
            assert_eq!(stack.subbands().len(), 1 << (2 * level));
            for sb in stack.subbands() {
                assert_eq!(sb.shape(), &[3, h >> level, w >> level]);
            }
            let back = reconstruct(&stack).unwrap();
            let worst = x
                .to_vec()
                .iter()
                .zip(back.to_vec())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-10, "level {level} {h}x{w}: max abs error {worst}");
        }
    }

    #[test]
    fn level_one_reconstruct_equals_plain_inverse() {
        let x = rand_map(&[2, 6, 6], 9);
        let a = reconstruct(&decompose(&x, 1).unwrap()).unwrap();
        let b = idwt2d(&dwt2d(&x).unwrap()).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn energy_is_preserved() {
        let x = rand_map(&[2, 16, 16], 21);
        let direct: f64 = x.to_vec().iter().map(|v| v * v).sum();
        let stack = decompose(&x, 2).unwrap();
        let in_bands: f64 = stack
            .subbands()
            .iter()
            .flat_map(|sb| sb.to_vec())
            .map(|v| v * v)
            .sum();
        assert!(
            (direct - in_bands).abs() / direct.max(1.0) < 1e-4,
            "direct {direct} vs stack {in_bands}"
        );
    }

    #[test]
    fn linearity() {
        let x = rand_map(&[4, 4], 31);
        let y = rand_map(&[4, 4], 32);
        let combo = x.scale(2.0).unwrap().add(&y.scale(-0.5).unwrap()).unwrap();
        let lhs = dwt2d(&combo).unwrap();
        let xs = dwt2d(&x).unwrap();
        let ys = dwt2d(&y).unwrap();
        for i in 0..4 {
            let rhs = xs[i].scale(2.0).unwrap().add(&ys[i].scale(-0.5).unwrap()).unwrap();
            for (a, b) in lhs[i].to_vec().iter().zip(rhs.to_vec()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_extents_and_levels() {
        let odd = Tensor::<f64>::zeros(&[3, 4]);
        assert!(dwt2d(&odd).is_err());
        let x = Tensor::<f64>::zeros(&[8, 8]);
        assert!(decompose(&x, 0).is_err());
        assert!(decompose(&x, 4).is_err());
        // 4x4 cannot host level 3 (extents must divide by 2^3)
        let small = Tensor::<f64>::zeros(&[4, 4]);
        assert!(decompose(&small, 3).is_err());
        let mismatched = [
            Tensor::<f64>::zeros(&[2, 2]),
            Tensor::<f64>::zeros(&[2, 2]),
            Tensor::<f64>::zeros(&[2, 2]),
            Tensor::<f64>::zeros(&[2, 4]),
        ];
        assert!(idwt2d(&mismatched).is_err());
    }

    #[test]
    fn token_layout_is_subband_major_and_invertible() {
        let x = rand_map(&[2, 3, 8, 8], 41);
        let stack = decompose(&x, 1).unwrap();
        let tokens = stack.to_tokens().unwrap();
        assert_eq!(tokens.shape(), &[2, 3, 64]);
        // first 16 entries along the token axis are exactly the LL subband
        let ll_flat = stack.subbands()[0].reshape(&[2, 3, 16]).unwrap();
        assert_eq!(tokens.narrow(2, 0, 16).unwrap().to_vec(), ll_flat.to_vec());
        let rebuilt = WaveletStack::from_tokens(&tokens, 1, 8, 8).unwrap();
        let back = reconstruct(&rebuilt).unwrap();
        let worst = x
            .to_vec()
            .iter()
            .zip(back.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-10);
    }

    #[test]
    fn decompose_is_differentiable() {
        let x = Tensor::<f64>::param(rand_map(&[1, 4, 4], 51).to_vec(), &[1, 4, 4]).unwrap();
        let xc = x.clone();
        let err = crate::tensor::finite_diff_check(
            move || decompose(&xc, 2)?.to_tokens()?.square()?.sum_all(),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
