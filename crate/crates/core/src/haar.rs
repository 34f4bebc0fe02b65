//! Haar-distributed column-orthonormal embeddings and hidden subspace blocks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::scalar::{dot, Scalar};

/// Per chain index, an orthonormal block of `width` vectors orthogonal to span(U)
/// and to every other block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMap<S> {
    pub width: usize,
    /// Column-major d × (T·width); block i (0-based) occupies columns `i·width..(i+1)·width`.
    pub cols: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingKind {
    Haar,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationEmbedding<S> {
    pub d: usize,
    pub t: usize,
    pub seed: u64,
    pub kind: EmbeddingKind,
    /// Column-major d × T.
    pub u: Vec<S>,
    pub blocks: Option<BlockMap<S>>,
}

impl<S: Scalar> RotationEmbedding<S> {
    pub fn identity(t: usize) -> Self {
        let mut u = vec![S::zero(); t * t];
        for i in 0..t {
            u[i * t + i] = S::one();
        }
        Self { d: t, t, seed: 0, kind: EmbeddingKind::Identity, u, blocks: None }
    }

    pub fn column(&self, i: usize) -> &[S] {
        &self.u[i * self.d..(i + 1) * self.d]
    }

    pub fn block_vector(&self, level: usize, k: usize) -> Option<&[S]> {
        let b = self.blocks.as_ref()?;
        if k >= b.width || level >= self.t {
            return None;
        }
        let c = level * b.width + k;
        Some(&b.cols[c * self.d..(c + 1) * self.d])
    }

    /// Uᵀx.
    pub fn project(&self, x: &[S]) -> Vec<S> {
        (0..self.t).map(|i| dot(self.column(i), x)).collect()
    }

    /// U·c.
    pub fn lift(&self, c: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.d];
        for (i, &ci) in c.iter().enumerate() {
            if ci != S::zero() {
                for (o, &u) in out.iter_mut().zip(self.column(i)) {
                    *o += ci * u;
                }
            }
        }
        out
    }

    /// max |UᵀU − I|.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.t {
            for j in 0..=i {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.column(i), self.column(j)).to_f64_lossy() - target).abs());
            }
        }
        worst
    }
}

fn gaussian_columns<S: Scalar>(rng: &mut impl Rng, d: usize, count: usize) -> Vec<S> {
    (0..d * count).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Classical Gram–Schmidt with one reorthogonalization pass, in place, against
/// `fixed` first and then the earlier columns of `cols`. The implied R factor has
/// a positive diagonal.
fn orthonormalize<S: Scalar>(fixed: &[S], cols: &mut [S], d: usize) -> Result<()> {
    let nfixed = fixed.len() / d;
    let n = cols.len() / d;
    for j in 0..n {
        let (done, rest) = cols.split_at_mut(j * d);
        let v = &mut rest[..d];
        let scale = dot(v, v).sqrt();
        for _ in 0..2 {
            for q in (0..nfixed).map(|k| &fixed[k * d..(k + 1) * d]).chain((0..j).map(|k| &done[k * d..(k + 1) * d])) {
                let c = dot(q, v);
                for (vi, &qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let r = dot(v, v).sqrt();
        if !(r > scale * S::lit(1e-8)) {
            return Err(Error::InvalidParameter("rank-deficient Gaussian draw".into()));
        }
        for vi in v.iter_mut() {
            *vi = *vi / r;
        }
    }
    Ok(())
}

/// Samples U from the Haar measure on d × T column-orthonormal matrices.
pub fn sample_haar<S: Scalar>(d: usize, t: usize, seed: u64) -> Result<RotationEmbedding<S>> {
    sample_haar_with_blocks(d, t, 0, seed)
}

/// As [`sample_haar`], additionally drawing `block_width` hidden vectors per chain index.
/// U depends only on `(d, T, seed)`: the block columns are drawn after it from the same stream.
pub fn sample_haar_with_blocks<S: Scalar>(
    d: usize,
    t: usize,
    block_width: usize,
    seed: u64,
) -> Result<RotationEmbedding<S>> {
    if t == 0 {
        return Err(Error::InvalidParameter("T must be at least 1".into()));
    }
    let total = t + t * block_width;
    if total > d {
        return Err(Error::DimensionFloor { d, floor: total, what: "embedding with hidden blocks" });
    }
    let mut rng = keyed_rng(seed, "haar", 0);
    let mut u = gaussian_columns::<S>(&mut rng, d, t);
    orthonormalize(&[], &mut u, d)?;
    let blocks = if block_width > 0 {
        let mut cols = gaussian_columns::<S>(&mut rng, d, t * block_width);
        orthonormalize(&u, &mut cols, d)?;
        Some(BlockMap { width: block_width, cols })
    } else {
        None
    };
    Ok(RotationEmbedding { d, t, seed, kind: EmbeddingKind::Haar, u, blocks })
}

/// Draws `count` orthonormal vectors uniformly from the orthogonal complement of `prefix`
/// (column-major, d rows).
pub fn complete_haar<S: Scalar>(prefix: &[S], d: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<S>> {
    if prefix.len() / d + count > d {
        return Err(Error::DimensionFloor { d, floor: prefix.len() / d + count, what: "orthonormal completion" });
    }
    let mut cols = gaussian_columns::<S>(rng, d, count);
    orthonormalize(prefix, &mut cols, d)?;
    Ok(cols)
}
