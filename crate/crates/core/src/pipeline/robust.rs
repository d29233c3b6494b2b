use super::{evaluate, train, MaskSchedule, TrainConfig};
use crate::attacks::Attack;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{AdvTrainKind, IbLossConfig, LayerSet};
use crate::network::{Network, NetworkConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Shared settings for the per-layer runs. The layer set, mask schedule and
/// adversarial training of the template are overridden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustTemplate {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub ib: IbLossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    /// 0 for the CE-only baseline.
    pub layer: usize,
    pub name: String,
    /// Percent.
    pub adv_accuracy: f64,
    /// Percent.
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustSelection {
    pub baseline: LayerRow,
    pub layers: Vec<LayerRow>,
    pub margin: f64,
    pub selected: Vec<usize>,
}

impl RobustSelection {
    /// Layers whose adversarial accuracy beats the baseline by at least `margin` points.
    pub fn with_margin(&self, margin: f64) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|r| r.adv_accuracy >= self.baseline.adv_accuracy + margin)
            .map(|r| r.layer)
            .collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &LayerRow> {
        std::iter::once(&self.baseline).chain(&self.layers)
    }
}

fn run_one(
    template: &RobustTemplate,
    layer: usize,
    train_set: &Dataset,
    test_set: &Dataset,
    attack: &Attack,
) -> Result<LayerRow> {
    let seed = template.train.seed + layer as u64;
    let train_cfg = TrainConfig {
        seed,
        mask: MaskSchedule::Off,
        ..template.train.clone()
    };
    let (ib, name) = if layer == 0 {
        (IbLossConfig::ce_only(), "CE".to_string())
    } else {
        let ib = IbLossConfig {
            layers: LayerSet::Single(layer),
            ..template.ib.clone()
        };
        (ib, template.network.layer_name(layer))
    };
    let net = Network::new(template.network.clone(), seed)?;
    let out = train(net, train_set, None, &train_cfg, &ib, &AdvTrainKind::None)?;
    let eval = evaluate(
        &out.network,
        test_set,
        std::slice::from_ref(attack),
        train_cfg.batch_size,
        seed,
    )?;
    log::info!(
        "{name}: adv {:.2}%, test {:.2}%",
        eval.adversarial[0].accuracy,
        eval.natural
    );
    Ok(LayerRow {
        layer,
        name,
        adv_accuracy: eval.adversarial[0].accuracy,
        test_accuracy: eval.natural,
    })
}

/// Trains one network per hidden layer with the regularizer on that layer
/// alone, plus a CE-only baseline, all without adversarial training or mask.
/// Run `l` is seeded with `seed + l` (the baseline with `seed`). Runs are
/// spread over at most `threads` workers.
pub fn select_robust_layers(
    template: &RobustTemplate,
    train_set: &Dataset,
    test_set: &Dataset,
    attack: &Attack,
    margin: f64,
    threads: usize,
) -> Result<RobustSelection> {
    if margin.is_nan() || margin < 0.0 {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    template.network.validate()?;
    template.train.validate()?;
    attack.validate()?;
    let hidden = template.network.hidden_layers();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        (0..=hidden)
            .into_par_iter()
            .map(|l| run_one(template, l, train_set, test_set, attack))
            .collect::<Result<Vec<LayerRow>>>()
    })?;
    let mut rows = rows.into_iter();
    let baseline = rows.next().expect("baseline row");
    let mut sel = RobustSelection {
        baseline,
        layers: rows.collect(),
        margin,
        selected: Vec::new(),
    };
    sel.selected = sel.with_margin(margin);
    Ok(sel)
}
