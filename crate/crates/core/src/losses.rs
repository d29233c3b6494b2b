//! Training objectives: cross-entropy, the information-bottleneck
//! regularized loss
//!
//! ```text
//! L = L_CE + α Σ_l HSIC(X, T_l) − β Σ_l HSIC(Y, T_l)
//! ```
//!
//! its adversarial-training form, and TRADES/MART baselines.

use crate::attacks::{self, AttackConfig, AttackLoss};
use crate::data::one_hot;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hsic::{gram, KernelConfig};
use crate::network::{argmax_rows, ActivationTrace, Network};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which hidden layers contribute dependence terms (1-based indices).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSet {
    All,
    Robust(Vec<usize>),
    Single(usize),
}

impl LayerSet {
    pub fn resolve(&self, hidden_layers: usize) -> Result<Vec<usize>> {
        let layers = match self {
            LayerSet::All => (1..=hidden_layers).collect(),
            LayerSet::Robust(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
            LayerSet::Single(l) => vec![*l],
        };
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > hidden_layers) {
            return Err(Error::Config(format!("layer index {bad} outside [1, {hidden_layers}]")));
        }
        Ok(layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbLossConfig {
    /// Weight of the input-compression terms `HSIC(X, T_l)`.
    pub alpha: f64,
    /// Weight of the label-relevance terms `HSIC(Y, T_l)`.
    pub beta: f64,
    pub layers: LayerSet,
    /// During adversarial training, compute the dependence terms on the
    /// clean batch rather than on `X + δ`.
    pub mi_on_clean: bool,
    pub kernel_x: KernelConfig,
    pub kernel_t: KernelConfig,
    pub kernel_y: KernelConfig,
}

impl Default for IbLossConfig {
    /// β = 0.1 and α = 0.1·β over all hidden layers.
    fn default() -> Self {
        IbLossConfig::with_beta(0.1)
    }
}

impl IbLossConfig {
    /// α fixed at one tenth of β.
    pub fn with_beta(beta: f64) -> Self {
        IbLossConfig {
            alpha: beta * 0.1,
            beta,
            layers: LayerSet::All,
            mi_on_clean: true,
            kernel_x: KernelConfig::gaussian_median(),
            kernel_t: KernelConfig::gaussian_median(),
            kernel_y: KernelConfig::gaussian(1.0),
        }
    }

    /// α = 1.0, β = 0.1, the weights chosen for VGG16.
    pub fn vgg16() -> Self {
        IbLossConfig {
            alpha: 1.0,
            beta: 0.1,
            ..IbLossConfig::default()
        }
    }

    /// α = β = 0: plain cross-entropy.
    pub fn ce_only() -> Self {
        IbLossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..IbLossConfig::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.alpha != 0.0 || self.beta != 0.0
    }

    pub fn validate(&self, hidden_layers: usize) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        self.layers.resolve(hidden_layers)?;
        self.kernel_x.validate()?;
        self.kernel_t.validate()?;
        self.kernel_y.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AdvTrainKind {
    None,
    PgdAt(AttackConfig),
    Trades { lambda: f64, attack: AttackConfig },
    Mart { lambda: f64, attack: AttackConfig },
}

impl AdvTrainKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            AdvTrainKind::None => Ok(()),
            AdvTrainKind::PgdAt(a) => a.validate(),
            AdvTrainKind::Trades { lambda, attack } | AdvTrainKind::Mart { lambda, attack } => {
                if !(*lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
                }
                attack.validate()
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdvTrainKind::None => "none",
            AdvTrainKind::PgdAt(_) => "pgd",
            AdvTrainKind::Trades { .. } => "trades",
            AdvTrainKind::Mart { .. } => "mart",
        }
    }
}

/// Mean softmax cross-entropy.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_ce(logits, labels)
}

/// Graph handles for one evaluation of a regularized loss.
#[derive(Clone, Debug)]
pub struct IbLoss {
    pub total: Var,
    /// The unregularized objective (CE, adversarial CE, TRADES or MART).
    pub base: Var,
    pub logits: Var,
    pub trace: ActivationTrace,
    /// `(layer, HSIC(X, T_layer))` for the configured layers when α > 0.
    pub hsic_x: Vec<(usize, Var)>,
    /// `(layer, HSIC(Y, T_layer))` for the configured layers when β > 0.
    pub hsic_y: Vec<(usize, Var)>,
}

/// Dependence terms of the configured layers against the inputs `x` and
/// the one-hot labels. Gram matrices of `x` and `y` are built once.
fn dependence_terms(
    g: &mut Graph,
    trace: &ActivationTrace,
    x: Var,
    labels: &[usize],
    classes: usize,
    cfg: &IbLossConfig,
) -> Result<(Vec<(usize, Var)>, Vec<(usize, Var)>)> {
    let layers = cfg.layers.resolve(trace.len())?;
    let kx = if cfg.alpha != 0.0 {
        Some(gram(g, x, &cfg.kernel_x)?)
    } else {
        None
    };
    let ky = if cfg.beta != 0.0 {
        let y = g.constant(one_hot(labels, classes)?);
        Some(gram(g, y, &cfg.kernel_y)?)
    } else {
        None
    };
    let m = g.shape(x)[0];
    let norm = 1.0 / ((m - 1) * (m - 1)) as f64;
    let mut hx = Vec::new();
    let mut hy = Vec::new();
    for l in layers {
        let kt = gram(g, trace.layer(l), &cfg.kernel_t)?;
        let centered = g.center(kt)?;
        for (k, out) in [(kx, &mut hx), (ky, &mut hy)] {
            if let Some(k) = k {
                let prod = g.mul(centered, k)?;
                let s = g.sum(prod);
                out.push((l, g.scale(s, norm)));
            }
        }
    }
    Ok((hx, hy))
}

/// `base + α Σ hsic_x − β Σ hsic_y`; returns `base` untouched when both
/// weights are zero.
fn regularize(g: &mut Graph, base: Var, hx: &[(usize, Var)], hy: &[(usize, Var)], cfg: &IbLossConfig) -> Result<Var> {
    let mut total = base;
    if let Some(sx) = sum_terms(g, hx)? {
        let t = g.scale(sx, cfg.alpha);
        total = g.add(total, t)?;
    }
    if let Some(sy) = sum_terms(g, hy)? {
        let t = g.scale(sy, cfg.beta);
        total = g.sub(total, t)?;
    }
    Ok(total)
}

fn sum_terms(g: &mut Graph, terms: &[(usize, Var)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(_, v) in terms {
        acc = Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
    }
    Ok(acc)
}

/// The regularized loss on a clean batch. The forward pass honors any
/// attached mask, so the dependence terms see the masked last conv block.
pub fn ib_rar_loss(
    g: &mut Graph,
    net: &Network,
    params: &[Var],
    x: Var,
    labels: &[usize],
    cfg: &IbLossConfig,
) -> Result<IbLoss> {
    let m = g.shape(x)[0];
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let fwd = net.forward(g, params, x, true)?;
    let ce = ce_loss(g, fwd.logits, labels)?;
    let (hsic_x, hsic_y) = if cfg.is_active() {
        dependence_terms(g, &fwd.trace, x, labels, net.config().classes(), cfg)?
    } else {
        (Vec::new(), Vec::new())
    };
    let total = regularize(g, ce, &hsic_x, &hsic_y, cfg)?;
    Ok(IbLoss {
        total,
        base: ce,
        logits: fwd.logits,
        trace: fwd.trace,
        hsic_x,
        hsic_y,
    })
}

/// The regularized loss combined with an adversarial-training objective.
///
/// The inner maximization runs against a frozen copy of the current
/// parameters. With `mi_on_clean` the dependence terms use the clean batch
/// and its trace; otherwise they use `X + δ`.
#[allow(clippy::too_many_arguments)]
pub fn adv_ib_rar_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    cfg: &IbLossConfig,
    adv: &AdvTrainKind,
    rng: &mut R,
) -> Result<IbLoss> {
    let m = x.rows();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let classes = net.config().classes();
    match adv {
        AdvTrainKind::None => {
            let xv = g.constant(x.clone());
            ib_rar_loss(g, net, params, xv, labels, cfg)
        }
        AdvTrainKind::PgdAt(attack) => {
            let inner = AttackConfig {
                loss: AttackLoss::Ce,
                ..attack.clone()
            };
            let x_adv = attacks::pgd(net, x, labels, &inner, rng)?;
            let adv_v = g.constant(x_adv);
            let adv_fwd = net.forward(g, params, adv_v, true)?;
            let base = ce_loss(g, adv_fwd.logits, labels)?;
            let (mi_x, trace) = if cfg.is_active() && cfg.mi_on_clean {
                let xv = g.constant(x.clone());
                let clean = net.forward(g, params, xv, true)?;
                (xv, clean.trace)
            } else {
                (adv_v, adv_fwd.trace)
            };
            finish(g, base, adv_fwd.logits, trace, mi_x, labels, classes, cfg)
        }
        AdvTrainKind::Trades { lambda, attack } => {
            let parts = trades_parts(g, net, params, x, labels, *lambda, attack, rng)?;
            let (mi_x, trace) = pick_trace(cfg, parts.clean_x, parts.clean_trace, parts.adv_x, parts.adv_trace);
            finish(g, parts.total, parts.clean_logits, trace, mi_x, labels, classes, cfg)
        }
        AdvTrainKind::Mart { lambda, attack } => {
            let parts = mart_parts(g, net, params, x, labels, *lambda, attack, rng)?;
            let (mi_x, trace) = pick_trace(cfg, parts.clean_x, parts.clean_trace, parts.adv_x, parts.adv_trace);
            finish(g, parts.total, parts.clean_logits, trace, mi_x, labels, classes, cfg)
        }
    }
}

fn pick_trace(
    cfg: &IbLossConfig,
    clean_x: Var,
    clean: ActivationTrace,
    adv_x: Var,
    adv: ActivationTrace,
) -> (Var, ActivationTrace) {
    if cfg.mi_on_clean {
        (clean_x, clean)
    } else {
        (adv_x, adv)
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    g: &mut Graph,
    base: Var,
    logits: Var,
    trace: ActivationTrace,
    mi_x: Var,
    labels: &[usize],
    classes: usize,
    cfg: &IbLossConfig,
) -> Result<IbLoss> {
    let (hsic_x, hsic_y) = if cfg.is_active() {
        dependence_terms(g, &trace, mi_x, labels, classes, cfg)?
    } else {
        (Vec::new(), Vec::new())
    };
    let total = regularize(g, base, &hsic_x, &hsic_y, cfg)?;
    Ok(IbLoss {
        total,
        base,
        logits,
        trace,
        hsic_x,
        hsic_y,
    })
}

struct PairParts {
    total: Var,
    clean_logits: Var,
    clean_x: Var,
    clean_trace: ActivationTrace,
    adv_x: Var,
    adv_trace: ActivationTrace,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

/// TRADES: `CE(f(X), Y) + λ · mean KL(softmax f(X+δ*) ‖ softmax f(X))`, with
/// δ* maximizing that KL term inside the L∞ ball.
#[allow(clippy::too_many_arguments)]
pub fn trades_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    inner: &AttackConfig,
    rng: &mut R,
) -> Result<Var> {
    Ok(trades_parts(g, net, params, x, labels, lambda, inner, rng)?.total)
}

#[allow(clippy::too_many_arguments)]
fn trades_parts<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    inner: &AttackConfig,
    rng: &mut R,
) -> Result<PairParts> {
    check_lambda(lambda)?;
    let nat_logits = net.logits(x, true)?;
    let target = log_softmax_values(&nat_logits);
    let x_adv = attacks::pgd_kl(net, x, &target, inner, rng)?;

    let xv = g.constant(x.clone());
    let clean = net.forward(g, params, xv, true)?;
    let ce = ce_loss(g, clean.logits, labels)?;
    let adv_v = g.constant(x_adv);
    let adv = net.forward(g, params, adv_v, true)?;
    let lp_adv = g.log_softmax(adv.logits)?;
    let lp_nat = g.log_softmax(clean.logits)?;
    let kl = g.kl_div(lp_adv, lp_nat)?;
    let kl = g.mean(kl);
    let robust = g.scale(kl, lambda);
    let total = g.add(ce, robust)?;
    Ok(PairParts {
        total,
        clean_logits: clean.logits,
        clean_x: xv,
        clean_trace: clean.trace,
        adv_x: adv_v,
        adv_trace: adv.trace,
    })
}

/// MART: `BCE(f(X+δ*), Y) + λ · mean[(1 − p_y(X)) · KL(softmax f(X+δ*) ‖ softmax f(X))]`
/// with δ* from CE-PGD. The boosted CE adds `−log(1.0001 − max_{k≠y} p_k(X+δ*))`.
#[allow(clippy::too_many_arguments)]
pub fn mart_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    inner: &AttackConfig,
    rng: &mut R,
) -> Result<Var> {
    Ok(mart_parts(g, net, params, x, labels, lambda, inner, rng)?.total)
}

#[allow(clippy::too_many_arguments)]
fn mart_parts<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    inner: &AttackConfig,
    rng: &mut R,
) -> Result<PairParts> {
    check_lambda(lambda)?;
    let ce_cfg = AttackConfig {
        loss: AttackLoss::Ce,
        ..inner.clone()
    };
    let x_adv = attacks::pgd(net, x, labels, &ce_cfg, rng)?;

    let adv_v = g.constant(x_adv);
    let adv = net.forward(g, params, adv_v, true)?;
    let ce_adv = ce_loss(g, adv.logits, labels)?;
    let lp_adv = g.log_softmax(adv.logits)?;
    let runner_up = runner_up_classes(g.value(adv.logits), labels);
    let p_adv = g.exp(lp_adv);
    let p_wrong = g.pick(p_adv, &runner_up)?;
    let neg = g.scale(p_wrong, -1.0);
    let slack = g.add_scalar(neg, 1.0001);
    let log_slack = g.log(slack);
    let margin = g.mean(log_slack);
    let margin = g.scale(margin, -1.0);
    let bce = g.add(ce_adv, margin)?;

    let xv = g.constant(x.clone());
    let clean = net.forward(g, params, xv, true)?;
    let lp_nat = g.log_softmax(clean.logits)?;
    let kl = g.kl_div(lp_adv, lp_nat)?;
    let lp_true = g.pick(lp_nat, labels)?;
    let p_true = g.exp(lp_true);
    let neg_true = g.scale(p_true, -1.0);
    let weight = g.add_scalar(neg_true, 1.0);
    let weighted = g.mul(kl, weight)?;
    let robust = g.mean(weighted);
    let robust = g.scale(robust, lambda);
    let total = g.add(bce, robust)?;
    Ok(PairParts {
        total,
        clean_logits: clean.logits,
        clean_x: xv,
        clean_trace: clean.trace,
        adv_x: adv_v,
        adv_trace: adv.trace,
    })
}

/// Highest-scoring class other than the label, per row.
pub(crate) fn runner_up_classes(logits: &Tensor, labels: &[usize]) -> Vec<usize> {
    let k = logits.row_len();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            let mut best = if y == 0 { 1 } else { 0 };
            for j in 0..k {
                if j != y && row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn log_softmax_values(logits: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let l = g.log_softmax(v).expect("logits are a matrix");
    g.value(l).clone()
}

/// Fraction of rows whose arg-max equals the label.
pub fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// `(layer, HSIC(X, T_l), HSIC(Y, T_l))` for every hidden layer of a clean
/// forward pass, evaluated without gradients.
pub fn dependence_profile(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &IbLossConfig,
) -> Result<Vec<(usize, f64, f64)>> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let fwd = net.forward(&mut g, &params, xv, true)?;
    let probe = IbLossConfig {
        alpha: 1.0,
        beta: 1.0,
        layers: LayerSet::All,
        ..cfg.clone()
    };
    let (hx, hy) = dependence_terms(&mut g, &fwd.trace, xv, labels, net.config().classes(), &probe)?;
    Ok(hx
        .iter()
        .zip(&hy)
        .map(|(&(l, a), &(_, b))| (l, g.value(a).item(), g.value(b).item()))
        .collect())
}
