//! Hilbert–Schmidt independence criterion between two batched
//! representations, built from graph ops so it is differentiable in both
//! arguments.
//!
//! The biased estimator is used throughout:
//!
//! ```text
//! HSIC(A, B) = tr(K_A H K_B H) / (m − 1)²,   H = I − 11ᵀ / m
//! ```
//!
//! computed as `Σ (H K_A H) ∘ K_B / (m − 1)²`, which equals the trace form
//! for symmetric Gram matrices. Batches are flattened per example first.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Gaussian,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// σ = median pairwise distance of the batch, or 1 when that is 0.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
}

impl KernelConfig {
    pub const fn gaussian_median() -> Self {
        KernelConfig {
            kind: KernelKind::Gaussian,
            bandwidth: Bandwidth::Median,
        }
    }

    pub const fn gaussian(sigma: f64) -> Self {
        KernelConfig {
            kind: KernelKind::Gaussian,
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub const fn linear() -> Self {
        KernelConfig {
            kind: KernelKind::Linear,
            bandwidth: Bandwidth::Median,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let (KernelKind::Gaussian, Bandwidth::Fixed(s)) = (self.kind, self.bandwidth) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("kernel bandwidth must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self::gaussian_median()
    }
}

fn batch_rows(g: &Graph, a: Var) -> Result<usize> {
    let m = g.shape(a)[0];
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    Ok(m)
}

/// In-graph Gram matrix of the flattened rows of `a`.
///
/// Gaussian: `K_ij = exp(−‖a_i − a_j‖² / (2σ²))`. With the median rule σ is
/// itself a function of the batch and gradients flow through it.
pub fn gram(g: &mut Graph, a: Var, cfg: &KernelConfig) -> Result<Var> {
    cfg.validate()?;
    batch_rows(g, a)?;
    let flat = if g.shape(a).len() == 2 { a } else { g.flatten(a) };
    match cfg.kind {
        KernelKind::Linear => {
            let t = g.transpose(flat)?;
            g.matmul(flat, t)
        }
        KernelKind::Gaussian => {
            let d = g.pairwise_sq_dist(flat)?;
            let scaled = match cfg.bandwidth {
                Bandwidth::Fixed(s) => g.scale(d, -1.0 / (2.0 * s * s)),
                Bandwidth::Median => {
                    let med = g.median_pairwise_dist(d)?;
                    if g.value(med).item() > 0.0 {
                        let var = g.mul(med, med)?;
                        let two_var = g.scale(var, -2.0);
                        g.div_by(d, two_var)?
                    } else {
                        g.scale(d, -0.5)
                    }
                }
            };
            Ok(g.exp(scaled))
        }
    }
}

/// Differentiable biased HSIC between two batches with the same `m`.
pub fn hsic(g: &mut Graph, a: Var, b: Var, cfg_a: &KernelConfig, cfg_b: &KernelConfig) -> Result<Var> {
    let ma = batch_rows(g, a)?;
    let mb = batch_rows(g, b)?;
    if ma != mb {
        return Err(Error::BatchMismatch(ma, mb));
    }
    let ka = gram(g, a, cfg_a)?;
    let kb = gram(g, b, cfg_b)?;
    hsic_from_grams(g, ka, kb)
}

/// HSIC from two precomputed Gram matrices.
pub fn hsic_from_grams(g: &mut Graph, ka: Var, kb: Var) -> Result<Var> {
    let m = g.shape(ka)[0];
    let centered = g.center(ka)?;
    let prod = g.mul(centered, kb)?;
    let total = g.sum(prod);
    Ok(g.scale(total, 1.0 / ((m - 1) * (m - 1)) as f64))
}

/// HSIC of two value batches, evaluated without gradients.
pub fn hsic_value(a: &Tensor, b: &Tensor, cfg_a: &KernelConfig, cfg_b: &KernelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let h = hsic(&mut g, av, bv, cfg_a, cfg_b)?;
    Ok(g.value(h).item())
}

/// Gram matrix values of a batch.
pub fn gram_matrix(a: &Tensor, cfg: &KernelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let k = gram(&mut g, av, cfg)?;
    Ok(g.value(k).clone())
}

/// Per-channel dependence scores `score[c] = HSIC(flatten(f_c), Y)` for an
/// `(m, C, h, w)` activation stack and an `(m, d_Y)` label encoding.
pub fn channel_hsic(channels: &Tensor, y: &Tensor, cfg_t: &KernelConfig, cfg_y: &KernelConfig) -> Result<Vec<f64>> {
    let s = channels.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape {
            op: "channel_hsic",
            shape: s.to_vec(),
            reason: "expected (m, C, ...)".into(),
        });
    }
    let (m, c) = (s[0], s[1]);
    if c == 0 {
        return Err(Error::NoChannels);
    }
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    if y.rows() != m {
        return Err(Error::BatchMismatch(m, y.rows()));
    }
    let plane: usize = s[2..].iter().product();
    let ky = gram_matrix(y, cfg_y)?;
    (0..c)
        .map(|ch| {
            let mut slab = Vec::with_capacity(m * plane);
            for i in 0..m {
                let start = (i * c + ch) * plane;
                slab.extend_from_slice(&channels.data()[start..start + plane]);
            }
            let slab = Tensor::from_parts(vec![m, plane], slab);
            let mut g = Graph::new();
            let sv = g.constant(slab);
            let kt = gram(&mut g, sv, cfg_t)?;
            let kyv = g.constant(ky.clone());
            let h = hsic_from_grams(&mut g, kt, kyv)?;
            Ok(g.value(h).item())
        })
        .collect()
}
