use super::stream_rng;
use crate::attacks::Attack;
use crate::data::Dataset;
use crate::error::Result;
use crate::network::Network;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub attack: String,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Percent.
    pub natural: f64,
    pub adversarial: Vec<AttackAccuracy>,
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n.max(1) as f64
}

fn hits(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count()
}

pub(crate) fn natural_accuracy(net: &Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let batches = ds.sequential_batches(batch_size);
    let correct = batches
        .par_iter()
        .map(|idx| {
            let (x, y) = ds.batch(idx);
            Ok(hits(&net.predict(&x)?, &y))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(percent(correct.iter().sum(), ds.len()))
}

/// Predictions on adversarial examples, crafted per batch against the frozen
/// network. Every `(attack, batch)` pair owns a generator derived from
/// `seed`, so results do not depend on the thread count.
fn adversarial_predictions(
    net: &Network,
    ds: &Dataset,
    attack: &Attack,
    attack_index: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    attack.validate()?;
    let batches = ds.sequential_batches(batch_size);
    batches
        .par_iter()
        .enumerate()
        .map(|(b, idx)| {
            let (x, y) = ds.batch(idx);
            let stream = ((attack_index as u64 + 1) << 32) | b as u64;
            let mut rng = stream_rng(seed, stream);
            let x_adv = attack.run(net, &x, &y, &mut rng)?;
            Ok((net.predict(&x_adv)?, y))
        })
        .collect()
}

/// Natural accuracy plus one adversarial accuracy per attack.
pub fn evaluate(net: &Network, test: &Dataset, attacks: &[Attack], batch_size: usize, seed: u64) -> Result<Evaluation> {
    let natural = natural_accuracy(net, test, batch_size)?;
    let mut adversarial = Vec::with_capacity(attacks.len());
    for (i, attack) in attacks.iter().enumerate() {
        let preds = adversarial_predictions(net, test, attack, i, batch_size, seed)?;
        let correct = preds.iter().map(|(p, y)| hits(p, y)).sum();
        adversarial.push(AttackAccuracy {
            attack: attack.name.clone(),
            accuracy: percent(correct, test.len()),
        });
    }
    Ok(Evaluation { natural, adversarial })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TendencyRow {
    pub class: usize,
    pub examples: usize,
    /// `(predicted class, count)` over wrong predictions, most frequent first.
    pub counts: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TendencyTable {
    pub attack: String,
    pub rows: Vec<TendencyRow>,
}

impl TendencyTable {
    /// One line per class, e.g. `car : truck-681 ship-166 plane-55 frog-24`.
    /// Missing names fall back to the class index.
    pub fn render(&self, names: &[String]) -> String {
        let name = |c: usize| names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&name(row.class));
            out.push_str(" :");
            for &(c, n) in &row.counts {
                out.push_str(&format!(" {}-{n}", name(c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Per true class, the `top_k` most frequent wrong predictions on adversarial
/// examples. Ties in count go to the smaller class index.
pub fn tendency_table(
    net: &Network,
    test: &Dataset,
    attack: &Attack,
    top_k: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TendencyTable> {
    let k = test.classes();
    let mut counts = vec![vec![0usize; k]; k];
    let mut examples = vec![0usize; k];
    for (pred, labels) in adversarial_predictions(net, test, attack, 0, batch_size, seed)? {
        for (&p, &y) in pred.iter().zip(&labels) {
            examples[y] += 1;
            if p != y {
                counts[y][p] += 1;
            }
        }
    }
    let rows = (0..k)
        .map(|class| {
            let mut row: Vec<(usize, usize)> = counts[class]
                .iter()
                .enumerate()
                .filter(|&(_, &n)| n > 0)
                .map(|(c, &n)| (c, n))
                .collect();
            row.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            row.truncate(top_k);
            TendencyRow {
                class,
                examples: examples[class],
                counts: row,
            }
        })
        .collect();
    Ok(TendencyTable {
        attack: attack.name.clone(),
        rows,
    })
}
