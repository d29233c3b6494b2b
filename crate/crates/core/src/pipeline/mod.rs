//! Training loop, channel-mask scheduling, robust-layer selection and
//! evaluation.

mod eval;
mod mask;
mod robust;
mod stats;

pub use eval::{evaluate, tendency_table, AttackAccuracy, Evaluation, TendencyRow, TendencyTable};
pub use mask::{compute_channel_mask, score_channels, MaskScoring};
pub use robust::{select_robust_layers, LayerRow, RobustSelection, RobustTemplate};
pub use stats::spearman;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{adv_ib_rar_loss, batch_accuracy, dependence_profile, AdvTrainKind, IbLossConfig};
use crate::network::{ChannelMask, Network};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Iterations between information-plane samples.
pub const INFO_PLANE_STRIDE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSchedule {
    Off,
    /// Compute the mask once epoch `E` (1-based) has finished.
    AfterEpoch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Applied to weights only.
    pub weight_decay: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub seed: u64,
    pub mask: MaskSchedule,
    /// Recompute the mask after every epoch from `E` on instead of freezing it.
    pub recompute_mask: bool,
    pub mask_batches: usize,
    pub mask_fraction: f64,
    /// Use the regularized loss for the first epoch only, CE afterwards.
    pub warm_start_ib_first_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_epochs(60)
    }
}

impl TrainConfig {
    /// Defaults with the mask scheduled after `max(1, epochs / 6)` epochs.
    pub fn with_epochs(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: 100,
            lr: 0.01,
            weight_decay: 1e-2,
            lr_step: 20,
            lr_gamma: 0.2,
            momentum: 0.0,
            seed: 0,
            mask: MaskSchedule::AfterEpoch((epochs / 6).max(1)),
            recompute_mask: false,
            mask_batches: 10,
            mask_fraction: 0.05,
            warm_start_ib_first_epoch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.lr_step == 0 {
            return bad("lr step must be at least 1".into());
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return bad(format!("lr gamma must be positive, got {}", self.lr_gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if let MaskSchedule::AfterEpoch(e) = self.mask {
            if e == 0 || e > self.epochs {
                return bad(format!("mask epoch must lie in [1, {}], got {e}", self.epochs));
            }
        }
        if self.mask_batches == 0 {
            return bad("mask batches must be at least 1".into());
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return bad(format!("mask fraction must lie in (0, 1), got {}", self.mask_fraction));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Percent, on the training batches as seen by the loss.
    pub train_accuracy: f64,
    /// Percent, natural accuracy on the evaluation set when one is given.
    pub test_accuracy: Option<f64>,
    /// Channels zeroed during this epoch's forward passes.
    pub masked_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub channels: usize,
    pub removed: Vec<usize>,
    pub threshold: f64,
    pub epoch: Option<usize>,
    pub batches: usize,
}

impl MaskSummary {
    pub fn of(mask: &ChannelMask) -> Self {
        MaskSummary {
            channels: mask.channels(),
            removed: mask.removed(),
            threshold: mask.threshold(),
            epoch: mask.epoch,
            batches: mask.batches,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub network: String,
    pub train: TrainConfig,
    pub ib: IbLossConfig,
    pub adv: AdvTrainKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub seed: u64,
    pub config: ConfigSnapshot,
    pub epochs: Vec<EpochRecord>,
    /// Percent.
    pub natural_accuracy: Option<f64>,
    pub adversarial: Vec<AttackAccuracy>,
    pub mask: Option<MaskSummary>,
    /// Left out of serialized reports so reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn adversarial_accuracy(&self, attack: &str) -> Option<f64> {
        self.adversarial.iter().find(|a| a.attack == attack).map(|a| a.accuracy)
    }

    pub fn absorb(&mut self, eval: Evaluation) {
        self.natural_accuracy = Some(eval.natural);
        self.adversarial = eval.adversarial;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoPlaneRecord {
    pub iteration: usize,
    pub layer: usize,
    pub hsic_x: f64,
    pub hsic_y: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InfoPlaneLog {
    pub stride: usize,
    pub records: Vec<InfoPlaneRecord>,
}

impl InfoPlaneLog {
    pub fn iterations(&self) -> Vec<usize> {
        let mut its: Vec<usize> = self.records.iter().map(|r| r.iteration).collect();
        its.dedup();
        its
    }

    /// `(iteration, Σ_l HSIC(Y, T_l))` per logged iteration.
    pub fn sum_hsic_y(&self) -> Vec<(usize, f64)> {
        self.sum_by(|r| r.hsic_y)
    }

    /// `(iteration, Σ_l HSIC(X, T_l))` per logged iteration.
    pub fn sum_hsic_x(&self) -> Vec<(usize, f64)> {
        self.sum_by(|r| r.hsic_x)
    }

    fn sum_by(&self, f: impl Fn(&InfoPlaneRecord) -> f64) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((it, s)) if *it == r.iteration => *s += f(r),
                _ => out.push((r.iteration, f(r))),
            }
        }
        out
    }

    pub fn layer(&self, layer: usize) -> Vec<InfoPlaneRecord> {
        self.records.iter().filter(|r| r.layer == layer).copied().collect()
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub report: RunReport,
    pub info_plane: InfoPlaneLog,
}

/// Seeded generator for one purpose of a run.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SHUFFLE_STREAM: u64 = 0;
const ATTACK_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

/// Minibatch SGD on the regularized loss.
///
/// Each iteration forwards the batch with the current mask, builds the loss
/// (with adversarial examples when `adv` asks for them), back-propagates and
/// applies one SGD step. The mask is computed from training data at the end
/// of the scheduled epoch. When `eval_set` is given, natural accuracy on it
/// is recorded after every epoch.
pub fn train(
    mut net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    ib: &IbLossConfig,
    adv: &AdvTrainKind,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ib.validate(net.config().hidden_layers())?;
    adv.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train_set.image_shape() != net.config().input {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: train_set.image_shape().to_vec(),
            right: net.config().input.to_vec(),
        });
    }
    if cfg.mask != MaskSchedule::Off && net.config().last_conv_layer().is_none() {
        return Err(Error::NoConvLayer);
    }
    let started = Instant::now();
    let mut shuffle_rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut attack_rng = stream_rng(cfg.seed, ATTACK_STREAM);
    let mut mask_rng = stream_rng(cfg.seed, MASK_STREAM);
    let ce_only = IbLossConfig::ce_only();
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut info = InfoPlaneLog {
        stride: INFO_PLANE_STRIDE,
        records: Vec::new(),
    };
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let loss_cfg = if cfg.warm_start_ib_first_epoch && epoch > 0 {
            &ce_only
        } else {
            ib
        };
        let masked_channels = net.mask().map_or(0, |m| m.removed().len());
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0.0, 0usize);
        for batch in train_set.shuffled_batches(cfg.batch_size, &mut shuffle_rng) {
            let (x, y) = train_set.batch(&batch);
            if iteration.is_multiple_of(INFO_PLANE_STRIDE) {
                for (layer, hx, hy) in dependence_profile(&net, &x, &y, ib)? {
                    info.records.push(InfoPlaneRecord {
                        iteration,
                        layer,
                        hsic_x: hx,
                        hsic_y: hy,
                    });
                }
            }
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let loss = adv_ib_rar_loss(&mut g, &net, &params, &x, &y, loss_cfg, adv, &mut attack_rng)?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::Diverged { iteration, loss: value });
            }
            g.backward(loss.total)?;
            for (i, (p, v)) in params.iter().zip(velocity.iter_mut()).enumerate() {
                let Some(grad) = g.grad_data(*p) else { continue };
                let decay = if Network::is_weight(i) { cfg.weight_decay } else { 0.0 };
                let theta = net.params_mut()[i].data_mut();
                for ((t, &gr), vel) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
                    let d = gr + decay * *t;
                    *vel = cfg.momentum * *vel + d;
                    *t -= lr * *vel;
                }
            }
            loss_sum += value * y.len() as f64;
            hits += batch_accuracy(g.value(loss.logits), &y) * y.len() as f64;
            seen += y.len();
            iteration += 1;
        }
        let done = epoch + 1;
        if let MaskSchedule::AfterEpoch(e) = cfg.mask {
            if done == e || (cfg.recompute_mask && done > e) {
                let scoring = MaskScoring {
                    batches: cfg.mask_batches,
                    batch_size: cfg.batch_size,
                    fraction: cfg.mask_fraction,
                    kernel_t: ib.kernel_t,
                    kernel_y: ib.kernel_y,
                };
                let mut mask = compute_channel_mask(&net, train_set, &scoring, &mut mask_rng)?;
                mask.epoch = Some(done);
                net.set_mask(mask)?;
            }
        }
        let test_accuracy = match eval_set {
            Some(ds) => Some(eval::natural_accuracy(&net, ds, cfg.batch_size)?),
            None => None,
        };
        let record = EpochRecord {
            epoch: done,
            lr,
            mean_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: 100.0 * hits / seen.max(1) as f64,
            test_accuracy,
            masked_channels,
        };
        log::info!(
            "epoch {done}/{}: loss {:.4}, train acc {:.2}%, test acc {}",
            cfg.epochs,
            record.mean_loss,
            record.train_accuracy,
            test_accuracy.map_or("-".to_string(), |a| format!("{a:.2}%"))
        );
        epochs.push(record);
    }

    let report = RunReport {
        label: String::new(),
        seed: cfg.seed,
        config: ConfigSnapshot {
            network: net.config().to_text(),
            train: cfg.clone(),
            ib: ib.clone(),
            adv: adv.clone(),
        },
        natural_accuracy: epochs.last().and_then(|e| e.test_accuracy),
        epochs,
        adversarial: Vec::new(),
        mask: net.mask().map(MaskSummary::of),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        network: net,
        report,
        info_plane: info,
    })
}

/// Loss-term and mask combinations compared against the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// CE only.
    Ce,
    /// The full regularized loss, no mask.
    Ib,
    /// CE plus the compression terms only.
    CeCompression,
    /// CE minus the relevance terms only.
    CeRelevance,
    /// CE with the channel mask.
    CeMask,
    /// The full regularized loss with the channel mask.
    IbMask,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Ce,
        Ablation::Ib,
        Ablation::CeCompression,
        Ablation::CeRelevance,
        Ablation::CeMask,
        Ablation::IbMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Ce => "ce",
            Ablation::Ib => "ib",
            Ablation::CeCompression => "ce+compression",
            Ablation::CeRelevance => "ce-relevance",
            Ablation::CeMask => "ce+mask",
            Ablation::IbMask => "ib+mask",
        }
    }

    /// Loss and training configs for this row, derived from the full method's
    /// configs. Rows with a mask keep `train.mask` (or the default schedule
    /// when it is off); rows without one turn it off.
    pub fn configure(self, ib: &IbLossConfig, train: &TrainConfig) -> (IbLossConfig, TrainConfig) {
        let mut ib = ib.clone();
        let mut train = train.clone();
        match self {
            Ablation::Ce | Ablation::CeMask => {
                ib.alpha = 0.0;
                ib.beta = 0.0;
            }
            Ablation::CeCompression => ib.beta = 0.0,
            Ablation::CeRelevance => ib.alpha = 0.0,
            Ablation::Ib | Ablation::IbMask => {}
        }
        match self {
            Ablation::CeMask | Ablation::IbMask => {
                if train.mask == MaskSchedule::Off {
                    train.mask = TrainConfig::with_epochs(train.epochs).mask;
                }
            }
            _ => train.mask = MaskSchedule::Off,
        }
        (ib, train)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// `(α, β)` pairs with α = β / 10.
pub fn alpha_beta_grid(betas: &[f64]) -> Vec<(f64, f64)> {
    betas.iter().map(|&b| (b * 0.1, b)).collect()
}
