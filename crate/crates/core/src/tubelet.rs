//! Tubelet tokens, tube masks and the masked reconstruction loss.
//!
//! Tokens are ordered temporal-major, then row, then column: token
//! `(t, h, w)` sits at index `(t * H_g + h) * W_g + w`. Within a token the
//! pixels are ordered `(c, dt, dh, dw)`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TubeletGrid {
    pub channels: usize,
    /// Tubelet extent in frames, rows and columns.
    pub tubelet: [usize; 3],
    /// Number of tubelets along time, rows and columns.
    pub counts: [usize; 3],
}

impl TubeletGrid {
    /// Grid for frames shaped `[C, T, H, W]`.
    pub fn new(frame_shape: [usize; 4], tubelet: [usize; 3]) -> Result<Self> {
        let [c, t, h, w] = frame_shape;
        if frame_shape.contains(&0) || tubelet.contains(&0) {
            return Err(Error::dim(format!(
                "frames {frame_shape:?} and tubelet {tubelet:?} must be positive"
            )));
        }
        for (axis, (&n, &p)) in ["time", "height", "width"]
            .iter()
            .zip([t, h, w].iter().zip(&tubelet))
        {
            if n % p != 0 {
                return Err(Error::dim(format!(
                    "{axis} extent {n} is not divisible by tubelet size {p}"
                )));
            }
        }
        Ok(Self {
            channels: c,
            tubelet,
            counts: [t / tubelet[0], h / tubelet[1], w / tubelet[2]],
        })
    }

    pub fn frame_shape(&self) -> [usize; 4] {
        [
            self.channels,
            self.counts[0] * self.tubelet[0],
            self.counts[1] * self.tubelet[1],
            self.counts[2] * self.tubelet[2],
        ]
    }

    pub fn num_tokens(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn spatial_cells(&self) -> usize {
        self.counts[1] * self.counts[2]
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.tubelet.iter().product::<usize>()
    }

    /// Grid coordinates `(t, h, w)` of token `i`.
    pub fn position(&self, i: usize) -> (usize, usize, usize) {
        let [_, hg, wg] = self.counts;
        (i / (hg * wg), (i / wg) % hg, i % wg)
    }

    /// Flat pixel offset for token `i`, token element `j`.
    fn pixel_offset(&self, i: usize, j: usize) -> usize {
        let [_, t, h, w] = self.frame_shape();
        let [pt, ph, pw] = self.tubelet;
        let (gt, gh, gw) = self.position(i);
        let c = j / (pt * ph * pw);
        let dt = (j / (ph * pw)) % pt;
        let dh = (j / pw) % ph;
        let dw = j % pw;
        ((c * t + gt * pt + dt) * h + gh * ph + dh) * w + gw * pw + dw
    }

    fn check_frames(&self, shape: &[usize]) -> Result<()> {
        if shape != self.frame_shape() {
            return Err(Error::dim(format!(
                "frames {shape:?} do not match grid frame shape {:?}",
                self.frame_shape()
            )));
        }
        Ok(())
    }
}

/// Rearranges `[C, T, H, W]` frames into `[N, token_dim]` tokens.
pub fn patchify<T: Scalar>(frames: &Tensor<T>, grid: &TubeletGrid) -> Result<Tensor<T>> {
    grid.check_frames(frames.shape())?;
    let (n, d) = (grid.num_tokens(), grid.token_dim());
    let src = frames.data();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend((0..d).map(|j| src[grid.pixel_offset(i, j)]));
    }
    Tensor::new(vec![n, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, grid: &TubeletGrid) -> Result<Tensor<T>> {
    let (n, d) = tokens.dims2()?;
    if n != grid.num_tokens() || d != grid.token_dim() {
        return Err(Error::dim(format!(
            "tokens {:?} do not match grid ({} x {})",
            tokens.shape(),
            grid.num_tokens(),
            grid.token_dim()
        )));
    }
    let shape = grid.frame_shape();
    let mut out = vec![T::zero(); shape.iter().product()];
    let src = tokens.data();
    for i in 0..n {
        for j in 0..d {
            out[grid.pixel_offset(i, j)] = src[i * d + j];
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Mask list over the token grid; `true` marks a masked token.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeMask {
    bits: Vec<bool>,
    ratio: f64,
    grid: TubeletGrid,
}

/// `round(ratio * cells)` with halves rounded up.
pub fn masked_cell_count(ratio: f64, cells: usize) -> usize {
    ((ratio * cells as f64) + 0.5).floor() as usize
}

impl TubeMask {
    /// Builds a mask from an explicit list, checking the tube property.
    pub fn from_bits(grid: TubeletGrid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.num_tokens() {
            return Err(Error::dim(format!(
                "mask of length {} for {} tokens",
                bits.len(),
                grid.num_tokens()
            )));
        }
        let cells = grid.spatial_cells();
        for t in 1..grid.counts[0] {
            if bits[t * cells..(t + 1) * cells] != bits[..cells] {
                return Err(Error::contract(format!(
                    "mask differs between time index 0 and {t}"
                )));
            }
        }
        let masked = bits[..cells].iter().filter(|&&b| b).count();
        Ok(Self {
            bits,
            ratio: masked as f64 / cells as f64,
            grid,
        })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// The mask as 0/1 values.
    pub fn as_list(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn grid(&self) -> &TubeletGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Grid indices of masked tokens, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Grid indices of visible tokens, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

/// Masks `round(ratio * H_g * W_g)` spatial cells, drawn uniformly without
/// replacement, at every temporal index.
pub fn make_tube_mask(grid: &TubeletGrid, ratio: f64, seed: u64) -> Result<TubeMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let cells = grid.spatial_cells();
    let k = masked_cell_count(ratio, cells);
    let mut rng = seeds::rng(seeds::derive(seed, "tube-mask"));
    let mut spatial = vec![false; cells];
    for c in index::sample(&mut rng, cells, k) {
        spatial[c] = true;
    }
    let bits = spatial.repeat(grid.counts[0]);
    Ok(TubeMask {
        bits,
        ratio,
        grid: *grid,
    })
}

/// Visible tokens in grid order, plus the grid index of each.
pub fn select_visible<T: Scalar>(tokens: &Tensor<T>, mask: &TubeMask) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, d) = tokens.dims2()?;
    if n != mask.len() {
        return Err(Error::dim(format!(
            "{n} tokens against a mask of length {}",
            mask.len()
        )));
    }
    let index_map = mask.visible_indices();
    let mut out = Vec::with_capacity(index_map.len() * d);
    for &i in &index_map {
        out.extend_from_slice(tokens.row(i));
    }
    Ok((Tensor::new(vec![index_map.len(), d], out)?, index_map))
}

/// Writes `rows[k]` into row `index_map[k]` of `base`.
pub fn scatter_rows<T: Scalar>(base: &Tensor<T>, rows: &Tensor<T>, index_map: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = base.dims2()?;
    let (v, d2) = rows.dims2()?;
    if d != d2 || v != index_map.len() {
        return Err(Error::dim(format!(
            "scatter of {:?} into {:?} with {} indices",
            rows.shape(),
            base.shape(),
            index_map.len()
        )));
    }
    let mut out = base.data().to_vec();
    for (k, &i) in index_map.iter().enumerate() {
        if i >= n {
            return Err(Error::Index(format!("row {i} out of range for {n} rows")));
        }
        out[i * d..(i + 1) * d].copy_from_slice(rows.row(k));
    }
    Tensor::new(vec![n, d], out)
}

/// Mean squared error over every element of the masked tokens only.
///
/// `pred` is `[N, d]` on the tape; `target` is `[N, d]`. Target rows at
/// unmasked positions are never read.
pub fn masked_mse<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    mask: &TubeMask,
) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ",
            tape.shape(pred),
            target.shape()
        )));
    }
    let (n, _) = target.dims2()?;
    if n != mask.len() {
        return Err(Error::dim(format!("{n} tokens against a mask of length {}", mask.len())));
    }
    let masked = mask.masked_indices();
    let pred_masked = tape.gather_rows(pred, &masked)?;
    masked_rows_mse(tape, pred_masked, target, &masked)
}

/// Loss for predictions that already cover only the masked rows, in the
/// order given by `masked` (grid indices into `target`).
pub fn masked_rows_mse<T: Scalar>(
    tape: &mut Tape<T>,
    pred_masked: Var,
    target: &Tensor<T>,
    masked: &[usize],
) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::contract(
            "reconstruction loss is undefined when no token is masked",
        ));
    }
    let (n, d) = target.dims2()?;
    let mut rows = Vec::with_capacity(masked.len() * d);
    for &i in masked {
        if i >= n {
            return Err(Error::Index(format!("row {i} out of range for {n} rows")));
        }
        rows.extend_from_slice(target.row(i));
    }
    let target_masked = tape.constant(Tensor::new(vec![masked.len(), d], rows)?);
    tape.mse(pred_masked, target_masked)
}
