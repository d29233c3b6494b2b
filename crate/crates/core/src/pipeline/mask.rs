use crate::data::{one_hot, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hsic::{channel_hsic, KernelConfig};
use crate::network::{ChannelMask, Network};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How channel scores are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScoring {
    pub batches: usize,
    pub batch_size: usize,
    pub fraction: f64,
    pub kernel_t: KernelConfig,
    pub kernel_y: KernelConfig,
}

impl Default for MaskScoring {
    fn default() -> Self {
        MaskScoring {
            batches: 10,
            batch_size: 100,
            fraction: 0.05,
            kernel_t: KernelConfig::gaussian_median(),
            kernel_y: KernelConfig::gaussian(1.0),
        }
    }
}

/// Mean per-channel `HSIC(f_c, Y)` of the last conv block over up to
/// `scoring.batches` shuffled batches, with any attached mask ignored.
pub fn score_channels<R: Rng + ?Sized>(
    net: &Network,
    data: &Dataset,
    scoring: &MaskScoring,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(scores_and_batches(net, data, scoring, rng)?.0)
}

fn scores_and_batches<R: Rng + ?Sized>(
    net: &Network,
    data: &Dataset,
    scoring: &MaskScoring,
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    if net.config().last_conv_layer().is_none() {
        return Err(Error::NoConvLayer);
    }
    if scoring.batches == 0 {
        return Err(Error::Config("mask scoring needs at least one batch".into()));
    }
    let batches: Vec<Vec<usize>> = data
        .shuffled_batches(scoring.batch_size, rng)
        .into_iter()
        .take(scoring.batches)
        .collect();
    if batches.is_empty() {
        return Err(Error::BatchTooSmall(data.len()));
    }
    let mut total: Vec<f64> = Vec::new();
    for idx in &batches {
        let (x, y) = data.batch(idx);
        let mut g = Graph::new();
        let params = net.bind(&mut g, false);
        let xv = g.constant(x);
        let fwd = net.forward(&mut g, &params, xv, false)?;
        let y = one_hot(&y, data.classes())?;
        let scores = channel_hsic(g.value(fwd.trace.last_conv()), &y, &scoring.kernel_t, &scoring.kernel_y)?;
        if total.is_empty() {
            total = scores;
        } else {
            total.iter_mut().zip(&scores).for_each(|(t, s)| *t += s);
        }
    }
    let n = batches.len() as f64;
    Ok((total.into_iter().map(|t| t / n).collect(), batches.len()))
}

/// Scores the last conv block's channels and builds the mask that removes
/// the lowest-scoring fraction. The mask is returned, not attached.
pub fn compute_channel_mask<R: Rng + ?Sized>(
    net: &Network,
    data: &Dataset,
    scoring: &MaskScoring,
    rng: &mut R,
) -> Result<ChannelMask> {
    let (scores, used) = scores_and_batches(net, data, scoring, rng)?;
    let mut mask = ChannelMask::from_scores(&scores, scoring.fraction)?;
    mask.batches = used;
    Ok(mask)
}
