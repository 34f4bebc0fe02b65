//! The rotated instance f̃(x) = α·f̄_T(Uᵀx/β), its soft-projected variant f̂, and
//! on-disk serialization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haar::{sample_haar_with_blocks, BlockMap, EmbeddingKind, RotationEmbedding};
use crate::kernel::{Kernel, KernelDerivs, KernelParams, Mutation};
use crate::params::{InstanceParams, Setting};
use crate::rng::sha256_hex;
use crate::scalar::{dot, Scalar};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Instance<S> {
    pub params: InstanceParams,
    pub embedding: RotationEmbedding<S>,
    pub kernel: Kernel<S>,
    alpha: S,
    beta: S,
}

/// Derivatives of f̃ at a point. Higher-order tensors stay factored as
/// (α/β^k, kernel tensor, U).
#[derive(Debug, Clone)]
pub struct AmbientDerivs<S> {
    pub value: S,
    pub grad: Vec<S>,
    /// Uᵀx/β.
    pub coords: Vec<S>,
    pub kernel: KernelDerivs<S>,
    pub alpha: S,
    pub beta: S,
}

impl<S: Scalar> AmbientDerivs<S> {
    /// α/β^k, the factor between kernel and ambient order-k tensors.
    pub fn tensor_scale(&self, k: usize) -> S {
        self.alpha / self.beta.powi(k as i32)
    }

    /// ∇²f̃·v = (α/β²)·U·H·Uᵀv.
    pub fn hessian_vec(&self, emb: &RotationEmbedding<S>, v: &[S]) -> Option<Vec<S>> {
        let h = self.kernel.hess.as_ref()?;
        let hv = h.mat_vec(&emb.project(v));
        let scale = self.tensor_scale(2);
        Some(emb.lift(&hv).into_iter().map(|x| x * scale).collect())
    }

    /// Dense d × d Hessian; only for small d.
    pub fn hessian_dense(&self, emb: &RotationEmbedding<S>) -> Option<Vec<Vec<S>>> {
        self.kernel.hess.as_ref()?;
        let d = emb.d;
        let cols: Vec<Vec<S>> = (0..d)
            .map(|j| {
                let mut e = vec![S::zero(); d];
                e[j] = S::one();
                self.hessian_vec(emb, &e).unwrap()
            })
            .collect();
        Some((0..d).map(|i| (0..d).map(|j| cols[j][i]).collect()).collect())
    }
}

impl<S: Scalar> Instance<S> {
    /// Samples U (and hidden blocks for the stochastic settings) from `seed`.
    pub fn generate(params: InstanceParams, seed: u64) -> Result<Self> {
        let width = match params.setting {
            Setting::Deterministic { .. } => 0,
            _ => params.block_width().ok_or(Error::DimensionFloor {
                d: params.d,
                floor: params.t * params.columns,
                what: "hidden subspace blocks of width 𝒯 − 1",
            })?,
        };
        let embedding = sample_haar_with_blocks(params.d, params.t, width, seed)?;
        Self::from_parts(params, embedding)
    }

    /// f̄_T itself as an instance: U = I, α = β = 1.
    pub fn kernel_units(t: usize, eps: f64) -> Result<Self> {
        Self::from_parts(InstanceParams::kernel_units(t, eps)?, RotationEmbedding::identity(t))
    }

    pub fn from_parts(params: InstanceParams, embedding: RotationEmbedding<S>) -> Result<Self> {
        if embedding.t != params.t {
            return Err(Error::DimensionMismatch { expected: params.t, got: embedding.t });
        }
        if embedding.d != params.d {
            return Err(Error::DimensionMismatch { expected: params.d, got: embedding.d });
        }
        let p_max = params.setting.order().max(2);
        let kernel = Kernel::new(KernelParams::new(params.t, p_max)?);
        Ok(Self { alpha: S::lit(params.alpha), beta: S::lit(params.beta), params, embedding, kernel })
    }

    /// Serves derivatives up to `p_max` (at least 2).
    pub fn with_max_order(mut self, p_max: usize) -> Self {
        let m = self.kernel.mutation();
        self.kernel = Kernel::new(KernelParams { t: self.params.t, p_max }).with_mutation(m);
        self
    }

    pub fn with_mutation(mut self, m: Mutation) -> Self {
        self.kernel = self.kernel.with_mutation(m);
        self
    }

    pub fn d(&self) -> usize {
        self.params.d
    }

    pub fn t(&self) -> usize {
        self.params.t
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn beta(&self) -> S {
        self.beta
    }

    /// Uᵀx/β.
    pub fn coords(&self, x: &[S]) -> Result<Vec<S>> {
        self.check_dim(x)?;
        Ok(self.embedding.project(x).into_iter().map(|v| v / self.beta).collect())
    }

    fn check_dim(&self, x: &[S]) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), got: x.len() });
        }
        Ok(())
    }

    pub fn tilde_eval(&self, x: &[S], p: usize) -> Result<AmbientDerivs<S>> {
        let coords = self.coords(x)?;
        let kernel = self.kernel.derivs(&coords, p)?;
        Ok(self.ambient(coords, kernel))
    }

    /// Lifts kernel derivatives at `coords` to ambient value and gradient.
    pub fn ambient(&self, coords: Vec<S>, kernel: KernelDerivs<S>) -> AmbientDerivs<S> {
        let scale = self.alpha / self.beta;
        let grad = if kernel.order >= 1 {
            let g: Vec<S> = kernel.grad.iter().map(|&v| v * scale).collect();
            self.embedding.lift(&g)
        } else {
            Vec::new()
        };
        AmbientDerivs { value: self.alpha * kernel.value, grad, coords, kernel, alpha: self.alpha, beta: self.beta }
    }

    pub fn tilde_value(&self, x: &[S]) -> Result<S> {
        Ok(self.tilde_eval(x, 0)?.value)
    }

    pub fn tilde_grad(&self, x: &[S]) -> Result<Vec<S>> {
        Ok(self.tilde_eval(x, 1)?.grad)
    }

    /// f̂(x) = f̃(χ(x)) + (α/10)∥x∥²/β² and its gradient.
    pub fn hat_eval(&self, x: &[S]) -> Result<(S, Vec<S>)> {
        self.check_dim(x)?;
        let rhat = S::lit(self.params.soft_radius);
        let y = chi(x, rhat);
        let inner = self.tilde_eval(&y, 1)?;
        let b2 = self.beta * self.beta;
        let value = inner.value + self.alpha * dot(x, x) / (S::lit(10.0) * b2);
        // Dχ is symmetric, so the transpose action is the JVP itself.
        let mut grad = chi_jvp(x, &inner.grad, rhat);
        let q = self.alpha / (S::lit(5.0) * b2);
        for (g, &xi) in grad.iter_mut().zip(x) {
            *g += q * xi;
        }
        Ok((value, grad))
    }

    /// Writes the JSON header to `path` and U (plus hidden blocks) to `<path>.u.bin`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<InstanceHeader> {
        self.save_with(path, None)
    }

    /// As [`Instance::save`], recording `provenance` in the header.
    pub fn save_with(&self, path: impl AsRef<Path>, provenance: Option<serde_json::Value>) -> Result<InstanceHeader> {
        let path = path.as_ref();
        let payload_path = payload_path(path);
        let mut bytes = Vec::with_capacity(8 * (self.embedding.u.len()));
        let blocks = self.embedding.blocks.as_ref();
        for v in self.embedding.u.iter().chain(blocks.into_iter().flat_map(|b| b.cols.iter())) {
            bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        let header = InstanceHeader {
            format_version: FORMAT_VERSION,
            seed: self.embedding.seed,
            embedding: self.embedding.kind,
            params: self.params.clone(),
            d: self.embedding.d,
            t: self.embedding.t,
            block_width: blocks.map_or(0, |b| b.width),
            payload: payload_path.file_name().unwrap().to_string_lossy().into_owned(),
            payload_sha256: sha256_hex(&bytes),
            provenance,
        };
        fs::write(&payload_path, &bytes)?;
        fs::write(path, serde_json::to_string_pretty(&header)? + "\n")?;
        Ok(header)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header: InstanceHeader = serde_json::from_str(&fs::read_to_string(path)?)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::InvalidParameter(format!("unsupported format version {}", header.format_version)));
        }
        let payload = path.parent().unwrap_or(Path::new(".")).join(&header.payload);
        let bytes = fs::read(payload)?;
        let expected = 8 * header.d * (header.t + header.t * header.block_width);
        if bytes.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: bytes.len() });
        }
        if sha256_hex(&bytes) != header.payload_sha256 {
            return Err(Error::InvalidParameter("payload hash does not match header".into()));
        }
        let mut vals = bytes.chunks_exact(8).map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())));
        let u: Vec<S> = vals.by_ref().take(header.d * header.t).collect();
        let blocks = (header.block_width > 0).then(|| BlockMap { width: header.block_width, cols: vals.collect() });
        let embedding = RotationEmbedding { d: header.d, t: header.t, seed: header.seed, kind: header.embedding, u, blocks };
        Self::from_parts(header.params, embedding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceHeader {
    pub format_version: u32,
    pub seed: u64,
    pub embedding: EmbeddingKind,
    pub params: InstanceParams,
    pub d: usize,
    pub t: usize,
    pub block_width: usize,
    pub payload: String,
    pub payload_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub fn payload_path(header: &Path) -> PathBuf {
    let mut name = header.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".u.bin");
    header.with_file_name(name)
}

/// Soft projection χ(x) = x / √(1 + ∥x∥²/R̂²).
pub fn chi<S: Scalar>(x: &[S], rhat: S) -> Vec<S> {
    let s = (S::one() + dot(x, x) / (rhat * rhat)).sqrt();
    x.iter().map(|&v| v / s).collect()
}

/// Dχ(x)·v = v/s − x·⟨x, v⟩/(R̂² s³), with s = √(1 + ∥x∥²/R̂²).
pub fn chi_jvp<S: Scalar>(x: &[S], v: &[S], rhat: S) -> Vec<S> {
    let r2 = rhat * rhat;
    let s = (S::one() + dot(x, x) / r2).sqrt();
    let c = dot(x, v) / (r2 * s * s * s);
    x.iter().zip(v).map(|(&xi, &vi)| vi / s - c * xi).collect()
}
