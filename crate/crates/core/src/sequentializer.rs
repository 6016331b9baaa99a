//! Image → patch sequence conversion and learned position embeddings.
//!
//! An `H×W×3` image is cut into `(H/P)×(W/P)` non-overlapping patches,
//! each flattened row-major to a vector of length `P·P·3`, linearly
//! projected to `C` channels and offset by a per-location embedding.

use crate::error::{invalid, Error, Result};
use crate::tensor::{bilinear_forward, MapShape, Tape, Tensor, Var};

/// Patch size used by every preset.
pub const DEFAULT_PATCH: usize = 16;

/// A flattened patch grid: `gh·gw` rows of `patch·patch·channels` values.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub gh: usize,
    pub gw: usize,
    pub patch: usize,
    pub channels: usize,
    /// Shape `[gh·gw, patch·patch·channels]`.
    pub rows: Tensor,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.gh * self.gw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks an `[H, W, 3]` image against the patch size.
pub fn check_image(img: &Tensor, patch: usize) -> Result<(usize, usize)> {
    let [h, w, c] = img.shape()[..] else {
        return Err(invalid(format!("expected an H×W×3 image, got shape {:?}", img.shape())));
    };
    if c != 3 {
        return Err(invalid(format!("expected 3 channels, got {c}")));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!("image {h}x{w} is not divisible by patch size {patch}")));
    }
    Ok((h, w))
}

/// Splits an `[H, W, C]` image into its patch grid. Indivisible sizes are
/// rejected rather than padded.
pub fn patchify(img: &Tensor, patch: usize) -> Result<PatchGrid> {
    let [h, w, c] = img.shape()[..] else {
        return Err(invalid(format!("expected an H×W×C image, got shape {:?}", img.shape())));
    };
    let shape = MapShape { n: 1, h, w, c };
    let data = crate::tensor::patchify_data(img.data(), shape, patch)?;
    let (gh, gw) = (h / patch, w / patch);
    Ok(PatchGrid { gh, gw, patch, channels: c, rows: Tensor::new(&[gh * gw, patch * patch * c], data)? })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> Result<Tensor> {
    let (h, w, c) = (grid.gh * grid.patch, grid.gw * grid.patch, grid.channels);
    let mut out = vec![0.0f32; h * w * c];
    crate::tensor::unpatchify_add(grid.rows.data(), MapShape { n: 1, h, w, c }, grid.patch, &mut out);
    Tensor::new(&[h, w, c], out)
}

/// Sequence length for an `h×w` input: `(h/P)·(w/P)`.
pub fn sequence_len(h: usize, w: usize, patch: usize) -> usize {
    (h / patch) * (w / patch)
}

/// Learned per-location embeddings on a `gh×gw` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbedding {
    pub gh: usize,
    pub gw: usize,
    /// Shape `[gh·gw, C]`, row-major over the grid.
    pub table: Tensor,
}

impl PositionEmbedding {
    pub fn new(gh: usize, gw: usize, table: Tensor) -> Result<Self> {
        match table.shape() {
            [l, _] if *l == gh * gw => Ok(Self { gh, gw, table }),
            s => Err(Error::Shape { op: "position_embedding", lhs: vec![gh, gw], rhs: s.to_vec() }),
        }
    }

    pub fn channels(&self) -> usize {
        self.table.shape()[1]
    }

    /// Channel-wise align-corners bilinear resampling onto a new grid.
    pub fn interpolate(&self, new_gh: usize, new_gw: usize) -> Result<Self> {
        if new_gh == 0 || new_gw == 0 {
            return Err(invalid("target grid must be nonempty"));
        }
        let c = self.channels();
        let out = bilinear_forward(self.table.data(), 1, self.gh, self.gw, c, new_gh, new_gw);
        Self::new(new_gh, new_gw, Tensor::new(&[new_gh * new_gw, c], out)?)
    }
}

/// `E = {f(patch_i) + p_i}` on the tape.
///
/// `patches` is `[N, L, P·P·3]` (from [`Tape::patchify`]), `proj_w` is
/// `[P·P·3, C]`, `proj_b` is `[C]` and `pos` is `[L, C]`. Returns `[N, L, C]`.
pub fn embed_sequence(tape: &mut Tape, patches: Var, proj_w: Var, proj_b: Var, pos: Var) -> Result<Var> {
    let (ps, pp) = (tape.shape(patches).to_vec(), tape.shape(pos).to_vec());
    if ps.len() != 3 || pp.len() != 2 || ps[1] != pp[0] {
        return Err(Error::Shape { op: "embed_sequence", lhs: ps, rhs: pp });
    }
    let e = tape.matmul(patches, proj_w)?;
    let e = tape.add_broadcast(e, proj_b)?;
    tape.add_broadcast(e, pos)
}

/// Resizes a position table on the tape so gradients reach the stored table.
pub fn interpolate_pos_var(
    tape: &mut Tape,
    pos: Var,
    gh: usize,
    gw: usize,
    new_gh: usize,
    new_gw: usize,
) -> Result<Var> {
    if (gh, gw) == (new_gh, new_gw) {
        return Ok(pos);
    }
    let c = tape.shape(pos)[1];
    let grid = tape.reshape(pos, &[1, gh, gw, c])?;
    let resized = tape.bilinear_resize(grid, new_gh, new_gw)?;
    tape.reshape(resized, &[new_gh * new_gw, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_sizes() {
        let g = patchify(&Tensor::zeros(&[32, 32, 3]), 16).unwrap();
        assert_eq!((g.gh, g.gw, g.rows.shape()), (2, 2, &[4usize, 768][..]));
        let g = patchify(&Tensor::zeros(&[16, 16, 3]), 16).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(sequence_len(768, 768, 16), 2304);
        assert_eq!(sequence_len(768, 768, 16), 768 * 768 / 256);
    }

    #[test]
    fn indivisible_images_are_rejected() {
        assert!(patchify(&Tensor::zeros(&[24, 32, 3]), 16).is_err());
        assert!(check_image(&Tensor::zeros(&[32, 40, 3]), 16).is_err());
    }

    #[test]
    fn patch_layout_is_row_major() {
        let img = Tensor::from_fn(&[4, 4, 1], |i| i as f32);
        let g = patchify(&img, 2).unwrap();
        assert_eq!(&g.rows.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&g.rows.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&g.rows.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn pos_interpolation_examples() {
        let pos = PositionEmbedding::new(2, 2, Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(pos.interpolate(2, 2).unwrap(), pos);
        let up = pos.interpolate(3, 3).unwrap();
        assert_eq!(up.table.data()[4], 2.5);

        let flat = PositionEmbedding::new(3, 2, Tensor::full(&[6, 4], -0.3)).unwrap();
        let r = flat.interpolate(5, 7).unwrap();
        assert!(r.table.data().iter().all(|&v| v == -0.3));
    }

    #[test]
    fn tape_interpolation_matches_table_interpolation() {
        let table = Tensor::from_fn(&[6, 3], |i| (i as f32 * 0.37).sin());
        let pos = PositionEmbedding::new(2, 3, table.clone()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(table);
        let r = interpolate_pos_var(&mut tape, v, 2, 3, 4, 5).unwrap();
        assert!(tape.value(r).same_values(&pos.interpolate(4, 5).unwrap().table));
    }

    proptest! {
        #[test]
        fn patchify_round_trip_is_bit_exact(gh in 1usize..4, gw in 1usize..4, p in 1usize..5, seed in any::<u32>()) {
            let img = Tensor::from_fn(&[gh * p, gw * p, 3], |i| f32::from_bits(seed.wrapping_add(i as u32 * 977) & 0x3fff_ffff));
            let grid = patchify(&img, p).unwrap();
            prop_assert_eq!(grid.len(), gh * gw);
            prop_assert!(unpatchify(&grid).unwrap().same_values(&img));
        }
    }
}
