//! Token-sequence orderings for state-space scanning: bidirectional row
//! sweeps, four/eight-direction sweeps, serpentine and JPEG-style diagonal
//! traversals (eight dihedral variants each), and the windowed order over
//! wavelet subband tokens.
//!
//! Convention: `perm[i]` is the source index, i.e. reordered[i] = x[perm[i]].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanKind {
    Bi,
    Sweep4,
    Sweep8,
    Zigzag8,
    Jpeg8,
    WaveletWindow,
}

impl ScanKind {
    pub fn num_directions(self) -> usize {
        match self {
            ScanKind::Bi | ScanKind::WaveletWindow => 2,
            ScanKind::Sweep4 => 4,
            ScanKind::Sweep8 | ScanKind::Zigzag8 | ScanKind::Jpeg8 => 8,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "bi" => Some(ScanKind::Bi),
            "sweep4" => Some(ScanKind::Sweep4),
            "sweep8" => Some(ScanKind::Sweep8),
            "zigzag8" => Some(ScanKind::Zigzag8),
            "jpeg8" => Some(ScanKind::Jpeg8),
            "window" => Some(ScanKind::WaveletWindow),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanKind::Bi => "bi",
            ScanKind::Sweep4 => "sweep4",
            ScanKind::Sweep8 => "sweep8",
            ScanKind::Zigzag8 => "zigzag8",
            ScanKind::Jpeg8 => "jpeg8",
            ScanKind::WaveletWindow => "window",
        }
    }
}

/// Window-scan direction: raster of 2x2 windows read row-major (LR) or the
/// transposed traversal (TB). There are deliberately no reversed variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowDirection {
    LeftRight,
    TopBottom,
}

#[derive(Debug, Clone)]
pub struct ScanOrder {
    kind: ScanKind,
    direction: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

impl ScanOrder {
    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn direction(&self) -> usize {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    /// Reorder along the token axis (second-to-last): out[.., i, :] =
    /// x[.., perm[i], :]. Differentiable via gather.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_perm(x, &self.perm)
    }

    /// Inverse reordering; `apply_inverse(apply(x)) == x`.
    pub fn apply_inverse<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_perm(x, &self.inv_perm)
    }

    fn apply_perm<T: Scalar>(&self, x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = x.rank();
        if rank < 2 {
            return Err(Error::InvalidShape {
                op: "scan_apply",
                shape: x.shape().to_vec(),
                detail: "expected [.., tokens, channels]".into(),
            });
        }
        let axis = rank - 2;
        if x.shape()[axis] != perm.len() {
            return Err(Error::InvalidShape {
                op: "scan_apply",
                shape: x.shape().to_vec(),
                detail: format!("token axis must have extent {}", perm.len()),
            });
        }
        x.gather(axis, perm)
    }
}

fn build(kind: ScanKind, direction: usize, cells: Vec<usize>, t: usize) -> ScanOrder {
    debug_assert_eq!(cells.len(), t);
    let mut inv = vec![0usize; t];
    for (i, &src) in cells.iter().enumerate() {
        inv[src] = i;
    }
    ScanOrder {
        kind,
        direction,
        perm: cells,
        inv_perm: inv,
    }
}

/// Row-major or column-major full-grid reads with optional pre-flips.
fn sweep_cells(h: usize, w: usize, col_major: bool, hflip: bool, vflip: bool, reverse: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    if col_major {
        for c in 0..w {
            for r in 0..h {
                out.push(cell_id(r, c, h, w, hflip, vflip));
            }
        }
    } else {
        for r in 0..h {
            for c in 0..w {
                out.push(cell_id(r, c, h, w, hflip, vflip));
            }
        }
    }
    if reverse {
        out.reverse();
    }
    out
}

fn cell_id(r: usize, c: usize, h: usize, w: usize, hflip: bool, vflip: bool) -> usize {
    let rr = if vflip { h - 1 - r } else { r };
    let cc = if hflip { w - 1 - c } else { c };
    rr * w + cc
}

/// Serpentine rows: row 0 left-to-right, row 1 right-to-left, ...
fn serpentine_cells(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        if r % 2 == 0 {
            for c in 0..w {
                out.push((r, c));
            }
        } else {
            for c in (0..w).rev() {
                out.push((r, c));
            }
        }
    }
    out
}

/// JPEG-style anti-diagonal traversal: diagonal d = r + c, odd diagonals read
/// downward-left, even ones upward-right, starting at (0, 0).
fn jpeg_cells(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    for d in 0..h + w - 1 {
        let r_lo = d.saturating_sub(w - 1);
        let r_hi = d.min(h - 1);
        if d % 2 == 1 {
            for r in r_lo..=r_hi {
                out.push((r, d - r));
            }
        } else {
            for r in (r_lo..=r_hi).rev() {
                out.push((r, d - r));
            }
        }
    }
    out
}

/// Eight dihedral images of a base traversal: variant bit 0 = horizontal
/// flip, bit 1 = vertical flip, bit 2 = transpose (applied first).
fn dihedral_cells(
    h: usize,
    w: usize,
    variant: usize,
    base: impl Fn(usize, usize) -> Vec<(usize, usize)>,
) -> Vec<usize> {
    let transpose = variant & 4 != 0;
    let vflip = variant & 2 != 0;
    let hflip = variant & 1 != 0;
    let (bh, bw) = if transpose { (w, h) } else { (h, w) };
    base(bh, bw)
        .into_iter()
        .map(|(i, j)| {
            let (r, c) = if transpose { (j, i) } else { (i, j) };
            cell_id(r, c, h, w, hflip, vflip)
        })
        .collect()
}

/// Construct a grid scanning order. `WaveletWindow` carries a wavelet level
/// and lives in [`wavelet_window_order`]; requesting it here is an error.
pub fn make_order(kind: ScanKind, direction: usize, h: usize, w: usize) -> Result<ScanOrder> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            op: "make_order",
            shape: vec![h, w],
            detail: "grid extents must be positive".into(),
        });
    }
    if direction >= kind.num_directions() {
        return Err(Error::InvalidArgument {
            op: "make_order",
            detail: format!(
                "direction {direction} out of range for {} ({} directions)",
                kind.name(),
                kind.num_directions()
            ),
        });
    }
    let t = h * w;
    let cells = match kind {
        ScanKind::Bi | ScanKind::Sweep4 | ScanKind::Sweep8 => match direction {
            0 => sweep_cells(h, w, false, false, false, false),
            1 => sweep_cells(h, w, false, false, false, true),
            2 => sweep_cells(h, w, true, false, false, false),
            3 => sweep_cells(h, w, true, false, false, true),
            4 => sweep_cells(h, w, false, true, false, false),
            5 => sweep_cells(h, w, false, false, true, false),
            6 => sweep_cells(h, w, true, true, false, false),
            7 => sweep_cells(h, w, true, false, true, false),
            _ => unreachable!(),
        },
        ScanKind::Zigzag8 => dihedral_cells(h, w, direction, serpentine_cells),
        ScanKind::Jpeg8 => dihedral_cells(h, w, direction, jpeg_cells),
        ScanKind::WaveletWindow => {
            return Err(Error::InvalidArgument {
                op: "make_order",
                detail: "window orders carry a wavelet level; use wavelet_window_order".into(),
            })
        }
    };
    Ok(build(kind, direction, cells, t))
}

/// Windowed order over the canonical wavelet token sequence. Tokens are
/// subband pixels, subbands visited lowest-frequency first; inside each
/// subband a 2x2 window slides in raster order and its four pixels are read
/// row-major (LR), or everything transposed (TB). `level = 0` treats the
/// whole grid as one subband, giving a plain local-window scan of raw space.
pub fn wavelet_window_order(
    level: usize,
    h: usize,
    w: usize,
    direction: WindowDirection,
) -> Result<ScanOrder> {
    let div = 1usize << level;
    if level > crate::wavelet::MAX_LEVEL || h % div != 0 || w % div != 0 {
        return Err(Error::InvalidArgument {
            op: "wavelet_window_order",
            detail: format!("grid {h}x{w} not divisible for level {level}"),
        });
    }
    let (sh, sw) = (h / div, w / div);
    if sh < 2 || sw < 2 || sh % 2 != 0 || sw % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "wavelet_window_order",
            detail: format!("subband {sh}x{sw} cannot tile 2x2 windows"),
        });
    }
    let nsub = div * div;
    let mut cells = Vec::with_capacity(h * w);
    for sb in 0..nsub {
        let base = sb * sh * sw;
        match direction {
            WindowDirection::LeftRight => {
                for wr in 0..sh / 2 {
                    for wc in 0..sw / 2 {
                        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            cells.push(base + (2 * wr + dr) * sw + (2 * wc + dc));
                        }
                    }
                }
            }
            WindowDirection::TopBottom => {
                for wc in 0..sw / 2 {
                    for wr in 0..sh / 2 {
                        for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            cells.push(base + (2 * wr + dr) * sw + (2 * wc + dc));
                        }
                    }
                }
            }
        }
    }
    let dir_index = match direction {
        WindowDirection::LeftRight => 0,
        WindowDirection::TopBottom => 1,
    };
    Ok(build(ScanKind::WaveletWindow, dir_index, cells, h * w))
}
