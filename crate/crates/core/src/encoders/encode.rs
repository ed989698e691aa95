//! Frozen stand-ins for the 2 FPS image encoder and the 8 FPS grouped video
//! encoder. Both embed every cell through the same fixed feature map, so the
//! 24x24 grid of cell embeddings plays the role of the patch tokens.

use crate::error::{Error, Result};
use crate::rng::{seeded, streams, uniform, SeededRng};
use crate::tensor::Tensor;

use super::scene::{SyntheticFrame, GROUP, SIDE};

pub const N_PATCHES: usize = SIDE * SIDE;
pub const POOL_BLOCK: usize = 8;
pub const POOLED_PER_SIDE: usize = SIDE / POOL_BLOCK;
pub const N_POOLED: usize = POOLED_PER_SIDE * POOLED_PER_SIDE;
/// CLS plus the 3x3 pooled tokens.
pub const FULL_TOKENS: usize = 1 + N_POOLED;

const N_FEAT: usize = 6;
const N_DIFF_FEAT: usize = 4;

fn cell_features(v: f64) -> [f64; N_FEAT] {
    [v, v * v, (3.0 * v).tanh(), (v - 0.3).max(0.0), (0.3 - v).max(0.0), (4.0 * v).sin()]
}

/// Every component vanishes at zero, so a static group adds nothing.
fn diff_features(d: f64) -> [f64; N_DIFF_FEAT] {
    [d, d.abs(), (3.0 * d).tanh(), d * d]
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    (0..rows * cols).map(|_| uniform(rng, -bound, bound)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEncoders {
    enc_dim: usize,
    cell_w: Vec<f64>,
    cell_b: Vec<f64>,
    cls_w: Vec<f64>,
    cls_b: Vec<f64>,
    diff_w: Vec<f64>,
}

impl SyntheticEncoders {
    pub fn new(seed: u64, enc_dim: usize) -> Self {
        let mut rng = seeded(seed, streams::ENCODER);
        let cell_w = random_matrix(&mut rng, N_FEAT, enc_dim);
        let cell_b = (0..enc_dim).map(|_| uniform(&mut rng, -0.1, 0.1)).collect();
        let cls_w = random_matrix(&mut rng, enc_dim, enc_dim);
        let cls_b = (0..enc_dim).map(|_| uniform(&mut rng, -0.1, 0.1)).collect();
        let diff_w = random_matrix(&mut rng, N_DIFF_FEAT, enc_dim);
        Self { enc_dim, cell_w, cell_b, cls_w, cls_b, diff_w }
    }

    pub fn enc_dim(&self) -> usize {
        self.enc_dim
    }

    fn check_field(field: &[f64]) -> Result<()> {
        if field.len() != N_PATCHES {
            return Err(Error::Shape(format!("field has {} cells, expected {SIDE}x{SIDE}", field.len())));
        }
        Ok(())
    }

    /// Per-cell embeddings, `[576 x enc_dim]` in row-major cell order.
    pub fn patch_grid(&self, field: &[f64]) -> Result<Tensor> {
        Self::check_field(field)?;
        let e = self.enc_dim;
        let mut out = Vec::with_capacity(N_PATCHES * e);
        for &v in field {
            let f = cell_features(v);
            for j in 0..e {
                let mut s = self.cell_b[j];
                for (k, fk) in f.iter().enumerate() {
                    s += fk * self.cell_w[k * e + j];
                }
                out.push(s);
            }
        }
        Tensor::new(vec![N_PATCHES, e], out)
    }

    fn diff_grid(&self, diff: &[f64]) -> Vec<f64> {
        let e = self.enc_dim;
        let mut out = Vec::with_capacity(N_PATCHES * e);
        for &d in diff {
            let f = diff_features(d);
            for j in 0..e {
                let mut s = 0.0;
                for (k, fk) in f.iter().enumerate() {
                    s += fk * self.diff_w[k * e + j];
                }
                out.push(s);
            }
        }
        out
    }

    /// CLS token from the mean of all patch rows.
    fn cls(&self, grid: &[f64]) -> Vec<f64> {
        let e = self.enc_dim;
        let mean = mean_rows(grid, e, 0..N_PATCHES);
        let mut out = self.cls_b.clone();
        for (k, m) in mean.iter().enumerate() {
            for j in 0..e {
                out[j] += m * self.cls_w[k * e + j];
            }
        }
        out
    }

    fn tokens_from_grid(&self, grid: &[f64], mode: usize) -> Result<Vec<Vec<f64>>> {
        let mut rows = vec![self.cls(grid)];
        match mode {
            1 => {}
            FULL_TOKENS => rows.extend(pool_blocks(grid, self.enc_dim, SIDE, POOL_BLOCK)),
            m => return Err(Error::Shape(format!("token mode {m} must be 1 or {FULL_TOKENS}"))),
        }
        Ok(rows)
    }

    /// General-view tokens of one frame: CLS, then (mode 10) the nine pooled
    /// 8x8 blocks in row-major block order.
    pub fn encode_general(&self, field: &[f64], mode: usize) -> Result<Tensor> {
        Ok(self.encode_general_with_grid(field, mode)?.0)
    }

    pub fn encode_general_with_grid(&self, field: &[f64], mode: usize) -> Result<(Tensor, Tensor)> {
        let grid = self.patch_grid(field)?;
        let rows = self.tokens_from_grid(grid.data(), mode)?;
        Ok((Tensor::from_rows(&rows)?, grid))
    }

    /// Egocentric tokens of one 4-frame group: the general pooling of the
    /// temporal-mean field plus a pooled embedding of the mean successive
    /// difference.
    pub fn encode_egocentric(&self, group: &[&SyntheticFrame], mode: usize) -> Result<Tensor> {
        if group.len() != GROUP {
            return Err(Error::Grouping(group.len()));
        }
        for f in group {
            Self::check_field(&f.field)?;
        }
        if group.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::Stream("egocentric group timestamps must ascend".into()));
        }
        let (f0, f1, f2, f3) = (&group[0].field, &group[1].field, &group[2].field, &group[3].field);
        let mean: Vec<f64> = (0..N_PATCHES).map(|i| ((f0[i] + f1[i]) + (f2[i] + f3[i])) / 4.0).collect();
        let diff: Vec<f64> =
            (0..N_PATCHES).map(|i| ((f1[i] - f0[i]) + (f2[i] - f1[i]) + (f3[i] - f2[i])) / 3.0).collect();
        let grid = self.patch_grid(&mean)?;
        let mut rows = self.tokens_from_grid(grid.data(), mode)?;
        let motion = self.diff_grid(&diff);
        let mut motion_rows = vec![mean_rows(&motion, self.enc_dim, 0..N_PATCHES)];
        if mode == FULL_TOKENS {
            motion_rows.extend(pool_blocks(&motion, self.enc_dim, SIDE, POOL_BLOCK));
        }
        for (r, m) in rows.iter_mut().zip(&motion_rows) {
            for (a, b) in r.iter_mut().zip(m) {
                *a += b;
            }
        }
        Tensor::from_rows(&rows)
    }
}

/// Mean of the listed rows of a row-major `[n x width]` buffer.
pub fn mean_rows(data: &[f64], width: usize, rows: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(&data[r * width..(r + 1) * width]) {
            *a += v;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Cell indices of block `(br, bc)` of size `block` on a `side`-wide grid,
/// with an origin offset.
pub fn block_cells(side: usize, r0: usize, c0: usize, block: usize) -> impl Iterator<Item = usize> {
    (r0..r0 + block).flat_map(move |r| (c0..c0 + block).map(move |c| r * side + c))
}

/// Means over the disjoint `block x block` tiles of a `side x side` grid,
/// tiles in row-major order.
pub fn pool_blocks(grid: &[f64], width: usize, side: usize, block: usize) -> Vec<Vec<f64>> {
    let per = side / block;
    let mut out = Vec::with_capacity(per * per);
    for br in 0..per {
        for bc in 0..per {
            out.push(mean_rows(grid, width, block_cells(side, br * block, bc * block, block)));
        }
    }
    out
}
