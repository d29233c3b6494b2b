//! L∞ white-box attacks against a frozen network: FGSM, PGD, NIFGSM, a
//! margin-loss CW surrogate and PGD on the full regularized loss.
//!
//! Attacks only differentiate with respect to the input. Parameters are
//! bound as constants, so the network is never touched.

use crate::error::{Error, Result};
use crate::graph::{sign, Graph};
use crate::losses::{ib_rar_loss, runner_up_classes, IbLossConfig};
use crate::network::Network;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttackLoss {
    Ce,
    /// CW-style margin `max(z_y − max_{k≠y} z_k, −κ)`, driven down.
    Margin {
        kappa: f64,
    },
    /// The full regularized training loss, evaluated on the adversarial batch.
    IbRar(IbLossConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub eps: f64,
    pub step: f64,
    pub steps: usize,
    pub random_start: bool,
    pub loss: AttackLoss,
    pub lo: f64,
    pub hi: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::mnist_pgd()
    }
}

impl AttackConfig {
    /// eps 0.1, step 0.02, 10 steps.
    pub fn mnist_pgd() -> Self {
        AttackConfig {
            eps: 0.1,
            step: 0.02,
            steps: 10,
            random_start: true,
            loss: AttackLoss::Ce,
            lo: 0.0,
            hi: 1.0,
        }
    }

    /// eps 8/255, step 2/255, 10 steps.
    pub fn cifar_pgd() -> Self {
        AttackConfig {
            eps: 8.0 / 255.0,
            step: 2.0 / 255.0,
            ..AttackConfig::mnist_pgd()
        }
    }

    /// Single full-radius step without random start.
    pub fn fgsm(eps: f64) -> Self {
        AttackConfig {
            eps,
            step: eps,
            steps: 1,
            random_start: false,
            ..AttackConfig::mnist_pgd()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.eps, self.step, self.lo, self.hi].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("attack parameters must be finite".into()));
        }
        if !(0.0 <= self.step && self.step <= self.eps && self.eps <= self.hi - self.lo) {
            return Err(Error::Config(format!(
                "attack requires 0 <= step <= eps <= hi - lo (step {}, eps {}, range [{}, {}])",
                self.step, self.eps, self.lo, self.hi
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack steps must be at least 1".into()));
        }
        match &self.loss {
            AttackLoss::Margin { kappa } if !(*kappa >= 0.0 && kappa.is_finite()) => {
                Err(Error::Config(format!("margin kappa must be non-negative, got {kappa}")))
            }
            AttackLoss::IbRar(cfg) => {
                if !(cfg.alpha >= 0.0 && cfg.beta >= 0.0) {
                    return Err(Error::Config("attack loss weights must be non-negative".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Nifgsm { decay: f64 },
    CwMargin,
    AdaptivePgd,
}

/// A named attack for evaluation tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attack {
    pub name: String,
    pub method: AttackMethod,
    pub config: AttackConfig,
}

impl Attack {
    pub fn new(name: impl Into<String>, method: AttackMethod, config: AttackConfig) -> Self {
        Attack {
            name: name.into(),
            method,
            config,
        }
    }

    pub fn pgd(config: AttackConfig) -> Self {
        let name = format!("PGD^{}", config.steps);
        Attack::new(name, AttackMethod::Pgd, config)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        match &self.method {
            AttackMethod::Nifgsm { decay } if !(*decay >= 0.0 && decay.is_finite()) => {
                Err(Error::Config(format!("NIFGSM decay must be non-negative, got {decay}")))
            }
            AttackMethod::AdaptivePgd if !matches!(self.config.loss, AttackLoss::IbRar(_)) => {
                Err(Error::Config("the adaptive attack needs an ib_rar loss".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn run<R: Rng + ?Sized>(&self, net: &Network, x: &Tensor, labels: &[usize], rng: &mut R) -> Result<Tensor> {
        match &self.method {
            AttackMethod::Fgsm => fgsm(net, x, labels, &self.config),
            AttackMethod::Pgd => pgd(net, x, labels, &self.config, rng),
            AttackMethod::Nifgsm { decay } => nifgsm(net, x, labels, &self.config, *decay),
            AttackMethod::CwMargin => cw_margin(net, x, labels, &self.config, rng),
            AttackMethod::AdaptivePgd => adaptive_pgd(net, x, labels, &self.config, rng),
        }
    }
}

enum Objective<'a> {
    Loss(&'a AttackLoss),
    /// `KL(softmax f(x) ‖ target)` against fixed log-probabilities.
    KlTo(&'a Tensor),
}

/// Value and input gradient of the attack objective at `x`.
fn input_grad(net: &Network, x: &Tensor, labels: &[usize], obj: &Objective) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let root = match obj {
        Objective::Loss(AttackLoss::IbRar(cfg)) => ib_rar_loss(&mut g, net, &params, xv, labels, cfg)?.total,
        Objective::Loss(loss) => {
            let logits = net.forward(&mut g, &params, xv, true)?.logits;
            match loss {
                AttackLoss::Ce => g.softmax_ce(logits, labels)?,
                AttackLoss::Margin { kappa } => {
                    let wrong = runner_up_classes(g.value(logits), labels);
                    let zy = g.pick(logits, labels)?;
                    let zw = g.pick(logits, &wrong)?;
                    let margin = g.sub(zy, zw)?;
                    let f = g.clamp(margin, -kappa, f64::INFINITY);
                    let s = g.sum(f);
                    g.scale(s, -1.0)
                }
                AttackLoss::IbRar(_) => unreachable!(),
            }
        }
        Objective::KlTo(target) => {
            let logits = net.forward(&mut g, &params, xv, true)?.logits;
            let lp = g.log_softmax(logits)?;
            let tv = g.constant((*target).clone());
            let kl = g.kl_div(lp, tv)?;
            g.mean(kl)
        }
    };
    g.backward(root)?;
    let value = g.value(root).item();
    let grad = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, grad))
}

fn check_input(net: &Network, x: &Tensor, labels: &[usize]) -> Result<()> {
    let [c, h, w] = net.config().input;
    if x.shape() != [x.rows(), c, h, w] {
        return Err(Error::ShapeMismatch {
            op: "attack",
            left: x.shape().to_vec(),
            right: vec![x.rows(), c, h, w],
        });
    }
    if labels.len() != x.rows() {
        return Err(Error::BatchMismatch(x.rows(), labels.len()));
    }
    Ok(())
}

/// `clamp(min(max(v, x − eps), x + eps), lo, hi)` elementwise.
fn project(v: &mut [f64], x: &[f64], cfg: &AttackConfig) {
    for (vi, &xi) in v.iter_mut().zip(x) {
        *vi = vi.max(xi - cfg.eps).min(xi + cfg.eps).clamp(cfg.lo, cfg.hi);
    }
}

/// One signed step from `cur` followed by projection.
fn signed_step(cur: &Tensor, dir: &[f64], x: &Tensor, cfg: &AttackConfig) -> Tensor {
    let mut next: Vec<f64> = cur
        .data()
        .iter()
        .zip(dir)
        .map(|(&c, &d)| c + cfg.step * sign(d))
        .collect();
    project(&mut next, x.data(), cfg);
    Tensor::new(x.shape().to_vec(), next).expect("same shape as input")
}

fn random_start<R: Rng + ?Sized>(x: &Tensor, cfg: &AttackConfig, rng: &mut R) -> Tensor {
    let mut v: Vec<f64> = x
        .data()
        .iter()
        .map(|&xi| xi + rng.random_range(-cfg.eps..=cfg.eps))
        .collect();
    project(&mut v, x.data(), cfg);
    Tensor::new(x.shape().to_vec(), v).expect("same shape as input")
}

/// `clamp(X + eps·sign(∇_X loss), lo, hi)`; `steps` and `step` are ignored.
pub fn fgsm(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check_input(net, x, labels)?;
    let (_, grad) = input_grad(net, x, labels, &Objective::Loss(&cfg.loss))?;
    let out = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &gi)| (xi + cfg.eps * sign(gi)).clamp(cfg.lo, cfg.hi))
        .collect();
    Tensor::new(x.shape().to_vec(), out)
}

fn pgd_objective<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    obj: &Objective,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    check_input(net, x, labels)?;
    let mut cur = if cfg.random_start {
        random_start(x, cfg, rng)
    } else {
        x.clone()
    };
    for _ in 0..cfg.steps {
        let (_, grad) = input_grad(net, &cur, labels, obj)?;
        cur = signed_step(&cur, grad.data(), x, cfg);
    }
    Ok(cur)
}

/// Projected signed-gradient ascent on `cfg.loss`.
pub fn pgd<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    pgd_objective(net, x, labels, cfg, &Objective::Loss(&cfg.loss), rng)
}

/// PGD maximizing `KL(softmax f(x') ‖ target)`; the TRADES inner problem.
pub(crate) fn pgd_kl<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    target: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let labels = vec![0; x.rows()];
    pgd_objective(net, x, &labels, cfg, &Objective::KlTo(target), rng)
}

/// Nesterov-accelerated iterative FGSM. Gradients at the look-ahead point
/// `x_t + step·decay·g` are normalized by their per-example mean absolute
/// value before entering the momentum buffer.
pub fn nifgsm(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, decay: f64) -> Result<Tensor> {
    cfg.validate()?;
    check_input(net, x, labels)?;
    if !(decay >= 0.0 && decay.is_finite()) {
        return Err(Error::Config(format!("NIFGSM decay must be non-negative, got {decay}")));
    }
    let per = x.row_len();
    let mut momentum = vec![0.0; x.len()];
    let mut cur = x.clone();
    for _ in 0..cfg.steps {
        let ahead: Vec<f64> = cur
            .data()
            .iter()
            .zip(&momentum)
            .map(|(&c, &g)| c + cfg.step * decay * g)
            .collect();
        let ahead = Tensor::new(x.shape().to_vec(), ahead)?;
        let (_, grad) = input_grad(net, &ahead, labels, &Objective::Loss(&cfg.loss))?;
        for (gm, gr) in momentum.chunks_mut(per).zip(grad.data().chunks(per)) {
            let l1 = gr.iter().map(|v| v.abs()).sum::<f64>() / per as f64;
            for (m, &v) in gm.iter_mut().zip(gr) {
                let n = if l1 > 0.0 { v / l1 } else { 0.0 };
                *m = decay * *m + n;
            }
        }
        cur = signed_step(&cur, &momentum, x, cfg);
    }
    Ok(cur)
}

/// PGD on the CW margin. Any non-margin loss in `cfg` is replaced by the
/// margin with κ = 0.
pub fn cw_margin<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let cfg = match cfg.loss {
        AttackLoss::Margin { .. } => cfg.clone(),
        _ => AttackConfig {
            loss: AttackLoss::Margin { kappa: 0.0 },
            ..cfg.clone()
        },
    };
    pgd(net, x, labels, &cfg, rng)
}

/// PGD ascending the defender's full loss, with the dependence terms computed
/// on the current adversarial batch.
pub fn adaptive_pgd<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if !matches!(cfg.loss, AttackLoss::IbRar(_)) {
        return Err(Error::Config("the adaptive attack needs an ib_rar loss".into()));
    }
    if x.rows() < 2 {
        return Err(Error::BatchTooSmall(x.rows()));
    }
    pgd(net, x, labels, cfg, rng)
}

/// Attack objective value at `x`, without gradients.
pub fn attack_loss(net: &Network, x: &Tensor, labels: &[usize], loss: &AttackLoss) -> Result<f64> {
    check_input(net, x, labels)?;
    Ok(input_grad(net, x, labels, &Objective::Loss(loss))?.0)
}
