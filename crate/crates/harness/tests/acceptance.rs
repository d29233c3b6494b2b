//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.
//!
//! `IBRAR_ACCEPTANCE=1,4,8` restricts the run to the listed criteria
//! (7 and 9 reuse the models trained for 5).

mod common;

use ibrar_core::attacks::{adaptive_pgd, fgsm, pgd};
use ibrar_core::gradcheck::{finite_diff_check, primitive_suite};
use ibrar_core::hsic::{hsic, KernelConfig};
use ibrar_core::losses::ib_rar_loss;
use ibrar_core::pipeline::{
    compute_channel_mask, evaluate, spearman, train, InfoPlaneLog, MaskSchedule, MaskScoring, RunReport, TrainConfig,
};
use ibrar_core::{
    AdvTrainKind, Attack, AttackConfig, AttackLoss, AttackMethod, Bandwidth, ChannelMask, Dataset, Graph, IbLossConfig,
    KernelKind, LayerSet, Network, NetworkConfig, Tensor, Var,
};
use ibrar_harness::checkpoint::{decode, encode, CheckpointMeta};
use ibrar_harness::cli::run_command;
use ibrar_harness::datasets::{load_dataset, write_idx_pair, DatasetSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, pass: bool, detail: impl Into<String>) -> Outcome {
    let o = Outcome {
        id,
        pass,
        detail: detail.into(),
    };
    println!(
        "{} criterion {}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.detail
    );
    o
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    let mut note = |name: String, err: f64| {
        if err.is_nan() || err > worst {
            worst = err;
            worst_at = name;
        }
    };
    for seed in 0..3 {
        for (name, err) in primitive_suite(seed).unwrap() {
            note(format!("{name} (seed {seed})"), err);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut net = Network::new(NetworkConfig::mini_conv_net_tiny([1, 8, 8], 3), 4).unwrap();
    let x = uniform(&mut rng, &[4, 1, 8, 8], 0.0, 1.0);
    let labels = [2, 0, 1, 2];
    let cfg = IbLossConfig {
        alpha: 0.5,
        beta: 1.0,
        ..IbLossConfig::default()
    };
    for masked in [false, true] {
        if masked {
            let mut keep = vec![true; 16];
            keep[6] = false;
            net.set_mask(ChannelMask::from_parts(keep, 0.0)).unwrap();
        }
        for which in 0..net.params().len() {
            let f = |g: &mut Graph, v: Var| {
                let params: Vec<Var> = net
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if i == which { v } else { g.constant(p.clone()) })
                    .collect();
                let xv = g.constant(x.clone());
                Ok(ib_rar_loss(g, &net, &params, xv, &labels, &cfg)?.total)
            };
            note(
                format!("ib_rar_loss param {which}{}", if masked { " masked" } else { "" }),
                finite_diff_check(f, &net.params()[which], 1e-5).unwrap(),
            );
        }
        let f = |g: &mut Graph, v: Var| {
            let params = net.bind(g, false);
            Ok(ib_rar_loss(g, &net, &params, v, &labels, &cfg)?.total)
        };
        note(
            format!("ib_rar_loss input{}", if masked { " masked" } else { "" }),
            finite_diff_check(f, &x, 1e-5).unwrap(),
        );
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        1,
        worst <= 1e-4 && secs <= 60.0,
        format!("worst finite-difference error {worst:.2e} at {worst_at} (limit 1e-4), {secs:.1}s (limit 60s)"),
    )
}

// ---------------------------------------------------------------- 2

type Mat = Vec<Vec<f64>>;

fn dense_gram(a: &Mat, cfg: &KernelConfig) -> Mat {
    let m = a.len();
    let dot = |i: usize, j: usize| -> f64 { a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum() };
    let sq = |i: usize, j: usize| -> f64 { a[i].iter().zip(&a[j]).map(|(x, y)| (x - y).powi(2)).sum() };
    match cfg.kind {
        KernelKind::Linear => (0..m).map(|i| (0..m).map(|j| dot(i, j)).collect()).collect(),
        KernelKind::Gaussian => {
            let sigma = match cfg.bandwidth {
                Bandwidth::Fixed(s) => s,
                Bandwidth::Median => {
                    let mut d = Vec::new();
                    for i in 0..m {
                        for j in i + 1..m {
                            d.push(sq(i, j).sqrt());
                        }
                    }
                    d.sort_by(f64::total_cmp);
                    let n = d.len();
                    let med = if n % 2 == 1 {
                        d[n / 2]
                    } else {
                        (d[n / 2 - 1] + d[n / 2]) / 2.0
                    };
                    if med > 0.0 {
                        med
                    } else {
                        1.0
                    }
                }
            };
            (0..m)
                .map(|i| (0..m).map(|j| (-sq(i, j) / (2.0 * sigma * sigma)).exp()).collect())
                .collect()
        }
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    (0..a.len())
        .map(|i| {
            (0..b[0].len())
                .map(|j| (0..b.len()).map(|t| a[i][t] * b[t][j]).sum())
                .collect()
        })
        .collect()
}

fn dense_hsic(a: &Mat, b: &Mat, ca: &KernelConfig, cb: &KernelConfig) -> f64 {
    let m = a.len();
    let h: Mat = (0..m)
        .map(|i| (0..m).map(|j| f64::from(u8::from(i == j)) - 1.0 / m as f64).collect())
        .collect();
    let p = matmul(&matmul(&matmul(&dense_gram(a, ca), &h), &dense_gram(b, cb)), &h);
    (0..m).map(|i| p[i][i]).sum::<f64>() / ((m - 1) * (m - 1)) as f64
}

fn hsic_oracle() -> Outcome {
    let t = Instant::now();
    let kernels = [
        KernelConfig::gaussian_median(),
        KernelConfig::gaussian(1.0),
        KernelConfig::gaussian(0.3),
        KernelConfig::linear(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0_f64;
    for pair in 0..50 {
        let m = rng.random_range(2..=6);
        let (da, db) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let a = uniform(&mut rng, &[m, da], -2.0, 2.0);
        let b = uniform(&mut rng, &[m, db], -2.0, 2.0);
        let (ka, kb) = (kernels[pair % 4], kernels[(pair / 4) % 4]);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let h = hsic(&mut g, av, bv, &ka, &kb).unwrap();
        let got = g.value(h).item();
        let rows = |t: &Tensor| -> Mat { (0..t.rows()).map(|i| t.row(i).to_vec()).collect() };
        let want = dense_hsic(&rows(&a), &rows(&b), &ka, &kb);
        worst = worst.max((got - want).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        2,
        worst <= 1e-10 && secs <= 10.0,
        format!("50 pairs, worst |graph − dense| {worst:.2e} (limit 1e-10), {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 3

fn random_attack_config(rng: &mut ChaCha8Rng) -> AttackConfig {
    let (lo, hi) = if rng.random_bool(0.7) { (0.0, 1.0) } else { (-0.5, 1.5) };
    let eps = if rng.random_bool(0.05) {
        0.0
    } else {
        rng.random_range(0.0..0.5)
    };
    AttackConfig {
        eps,
        step: eps * rng.random_range(0.0..=1.0),
        steps: rng.random_range(1..=5),
        random_start: rng.random_bool(0.5),
        loss: AttackLoss::Ce,
        lo,
        hi,
    }
}

fn attack_contracts() -> Outcome {
    let t = Instant::now();
    let nets: Vec<Network> = (0..5)
        .map(|s| Network::new(NetworkConfig::mini_conv_net_tiny([1, 8, 8], 4), s).unwrap())
        .collect();
    let kinds = ["fgsm", "pgd", "nifgsm", "cw", "adaptive"];
    let mut violations = Vec::new();
    let mut fgsm_mismatch = 0;
    let mut adaptive_mismatch = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for case in 0..1000 {
        let net = &nets[case % nets.len()];
        let m = rng.random_range(2..=4);
        let base = random_attack_config(&mut rng);
        let x = uniform(&mut rng, &[m, 1, 8, 8], base.lo.max(0.0), base.hi.min(1.0));
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
        let ib = IbLossConfig {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..2.0),
            layers: [LayerSet::All, LayerSet::Robust(vec![2, 3]), LayerSet::Single(1)][case % 3].clone(),
            ..IbLossConfig::default()
        };
        for kind in kinds {
            let (method, cfg) = match kind {
                "fgsm" => (
                    AttackMethod::Fgsm,
                    AttackConfig {
                        steps: 1,
                        step: base.eps,
                        random_start: false,
                        ..base.clone()
                    },
                ),
                "pgd" => (AttackMethod::Pgd, base.clone()),
                "nifgsm" => (
                    AttackMethod::Nifgsm {
                        decay: rng.random_range(0.0..1.5),
                    },
                    AttackConfig {
                        random_start: false,
                        ..base.clone()
                    },
                ),
                "cw" => (
                    AttackMethod::CwMargin,
                    AttackConfig {
                        loss: AttackLoss::Margin {
                            kappa: rng.random_range(0.0..2.0),
                        },
                        ..base.clone()
                    },
                ),
                _ => (
                    AttackMethod::AdaptivePgd,
                    AttackConfig {
                        loss: AttackLoss::IbRar(ib.clone()),
                        ..base.clone()
                    },
                ),
            };
            let attack = Attack::new(kind, method, cfg.clone());
            let mut arng = ChaCha8Rng::seed_from_u64(case as u64);
            let adv = attack.run(net, &x, &labels, &mut arng).unwrap();
            let bad = adv
                .data()
                .iter()
                .zip(x.data())
                .any(|(&a, &o)| !a.is_finite() || (a - o).abs() > cfg.eps + 1e-7 || a < cfg.lo || a > cfg.hi);
            if bad || adv.shape() != x.shape() {
                violations.push(format!("{kind} case {case}"));
            }
        }
        // fgsm against one full-radius pgd step without random start.
        let one = AttackConfig {
            steps: 1,
            step: base.eps,
            random_start: false,
            ..base.clone()
        };
        let f = fgsm(net, &x, &labels, &one).unwrap();
        let p = pgd(net, &x, &labels, &one, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        fgsm_mismatch += usize::from(bits(&f) != bits(&p));
        // adaptive with α = β = 0 against pgd from the same generator state.
        let zero = AttackConfig {
            loss: AttackLoss::IbRar(IbLossConfig {
                alpha: 0.0,
                beta: 0.0,
                ..ib.clone()
            }),
            ..base.clone()
        };
        let a = adaptive_pgd(net, &x, &labels, &zero, &mut ChaCha8Rng::seed_from_u64(case as u64)).unwrap();
        let p = pgd(net, &x, &labels, &base, &mut ChaCha8Rng::seed_from_u64(case as u64)).unwrap();
        adaptive_mismatch += usize::from(bits(&a) != bits(&p));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        3,
        violations.is_empty() && fgsm_mismatch == 0 && adaptive_mismatch == 0 && secs <= 120.0,
        format!(
            "1000 cases × 5 attacks: {} ball/clamp violations{}, fgsm≠pgd in {fgsm_mismatch}, adaptive(0,0)≠pgd in {adaptive_mismatch}, {secs:.1}s (limit 120s)",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn mask_semantics() -> Outcome {
    let src = DatasetSource::SyntheticBlobs {
        classes: 10,
        per_class: 20,
        test_per_class: 2,
        size: 8,
        noise: 0.2,
        seed: 4,
    };
    let (data, _) = load_dataset(&src).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for (c, want) in [(20usize, 1usize), (64, 3), (512, 26)] {
        let cfg = NetworkConfig::from_text(&format!("1x8x8;conv:8:3:pool,conv:{c}:3:pool,fc:16,out:10")).unwrap();
        let mut net = Network::new(cfg, c as u64).unwrap();
        let scoring = MaskScoring {
            batches: 2,
            batch_size: 50,
            ..MaskScoring::default()
        };
        let mask = compute_channel_mask(&net, &data, &scoring, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let removed = mask.removed();
        net.set_mask(mask).unwrap();
        let (x, _) = data.batch(&(0..16).collect::<Vec<_>>());
        let before = bits(&net.logits(&x, true).unwrap());
        // Perturb every removed channel's incoming weights and bias.
        let per: usize = net.params()[2].shape()[1..].iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(c as u64);
        for &ch in &removed {
            for v in &mut net.params_mut()[2].data_mut()[ch * per..(ch + 1) * per] {
                *v += rng.random_range(-3.0..3.0);
            }
            net.params_mut()[3].data_mut()[ch] += rng.random_range(-3.0..3.0);
        }
        let invariant = bits(&net.logits(&x, true).unwrap()) == before;
        pass &= removed.len() == want && invariant;
        details.push(format!(
            "C={c}: removed {} (want {want}), invariant {invariant}",
            removed.len()
        ));
    }
    outcome(4, pass, details.join("; "))
}

// ---------------------------------------------------------------- 5, 7, 9

struct Trained {
    network: Network,
    report: RunReport,
    info: InfoPlaneLog,
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Digits written to and read back from IDX files.
fn mnist_format(dir: &Path) -> (Dataset, Dataset) {
    let (train_set, test_set) = load_dataset(&DatasetSource::SyntheticDigits {
        train: 10_000,
        test: 2_000,
        size: 16,
        seed: 0,
    })
    .unwrap();
    let p = |n: &str| dir.join(n);
    write_idx_pair(&train_set, &p("train-images-idx3-ubyte"), &p("train-labels-idx1-ubyte")).unwrap();
    write_idx_pair(&test_set, &p("t10k-images-idx3-ubyte"), &p("t10k-labels-idx1-ubyte")).unwrap();
    load_dataset(&DatasetSource::IdxPair {
        train_images: p("train-images-idx3-ubyte"),
        train_labels: p("train-labels-idx1-ubyte"),
        test_images: p("t10k-images-idx3-ubyte"),
        test_labels: p("t10k-labels-idx1-ubyte"),
        classes: 10,
    })
    .unwrap()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Variant {
    Ce,
    IbAll,
    IbRobust,
}

fn variant_configs(v: Variant, seed: u64) -> (TrainConfig, IbLossConfig) {
    let mut tc = TrainConfig {
        seed,
        ..TrainConfig::with_epochs(10)
    };
    let mut ib = IbLossConfig::default();
    match v {
        Variant::Ce => {
            ib = IbLossConfig::ce_only();
            tc.mask = MaskSchedule::Off;
        }
        Variant::IbAll => tc.mask = MaskSchedule::Off,
        Variant::IbRobust => {
            ib.layers = LayerSet::Robust(vec![3, 4, 5]);
            tc.mask = MaskSchedule::AfterEpoch(1);
        }
    }
    (tc, ib)
}

fn pgd10() -> Attack {
    Attack::pgd(AttackConfig::mnist_pgd())
}

fn run_variant(v: Variant, seed: u64, adv: &AdvTrainKind, train_set: &Dataset, test_set: &Dataset) -> Trained {
    let (tc, ib) = variant_configs(v, seed);
    let t = Instant::now();
    let net = Network::new(NetworkConfig::mini_conv_net([1, 16, 16], 10), seed).unwrap();
    let out = train(net, train_set, None, &tc, &ib, adv).unwrap();
    let mut attacks = vec![pgd10()];
    if v != Variant::Ce {
        let cfg = AttackConfig {
            loss: AttackLoss::IbRar(ib.clone()),
            ..AttackConfig::mnist_pgd()
        };
        attacks.push(Attack::new("PGD_AD^10", AttackMethod::AdaptivePgd, cfg));
    }
    let mut report = out.report;
    report.absorb(evaluate(&out.network, test_set, &attacks, 100, seed).unwrap());
    println!(
        "  {v:?} seed {seed} ({}): natural {:.2}%, {} ({:.0}s)",
        adv.name(),
        report.natural_accuracy.unwrap(),
        report
            .adversarial
            .iter()
            .map(|a| format!("{} {:.2}%", a.attack, a.accuracy))
            .collect::<Vec<_>>()
            .join(", "),
        t.elapsed().as_secs_f64()
    );
    Trained {
        network: out.network,
        report,
        info: out.info_plane,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn adv_mean(runs: &[Trained], attack: &str) -> f64 {
    mean(
        &runs
            .iter()
            .map(|r| r.report.adversarial_accuracy(attack).unwrap())
            .collect::<Vec<_>>(),
    )
}

fn nat_mean(runs: &[Trained]) -> f64 {
    mean(
        &runs
            .iter()
            .map(|r| r.report.natural_accuracy.unwrap())
            .collect::<Vec<_>>(),
    )
}

struct Directional {
    ce: Vec<Trained>,
    all: Vec<Trained>,
    robust: Vec<Trained>,
}

fn directional(train_set: &Dataset, test_set: &Dataset) -> (Outcome, Directional) {
    let t = Instant::now();
    let jobs: Vec<(Variant, u64)> = [Variant::Ce, Variant::IbAll, Variant::IbRobust]
        .into_iter()
        .flat_map(|v| SEEDS.map(|s| (v, s)))
        .collect();
    let mut done: Vec<(Variant, Trained)> = jobs
        .par_iter()
        .map(|&(v, s)| (v, run_variant(v, s, &AdvTrainKind::None, train_set, test_set)))
        .collect();
    let mut take = |v: Variant| -> Vec<Trained> {
        let (keep, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut done).into_iter().partition(|(w, _)| *w == v);
        done = rest;
        keep.into_iter().map(|(_, t)| t).collect()
    };
    let d = Directional {
        ce: take(Variant::Ce),
        all: take(Variant::IbAll),
        robust: take(Variant::IbRobust),
    };
    let (ce, all, rob) = (
        adv_mean(&d.ce, "PGD^10"),
        adv_mean(&d.all, "PGD^10"),
        adv_mean(&d.robust, "PGD^10"),
    );
    let secs = t.elapsed().as_secs_f64();
    println!(
        "  sanity: CE natural accuracy {:.2}% (IB-all {:.2}%, IB-robust {:.2}%)",
        nat_mean(&d.ce),
        nat_mean(&d.all),
        nat_mean(&d.robust)
    );
    let o = outcome(
        5,
        rob > ce + 5.0 && all > ce && rob > ce && secs <= 900.0,
        format!(
            "mean PGD^10 accuracy over 3 seeds: CE {ce:.2}%, IB all layers {all:.2}%, IB robust layers + mask {rob:.2}% \
             (need robust > CE + 5 and every IB config > CE), {secs:.0}s (limit 900s)"
        ),
    );
    (o, d)
}

fn adaptive_ordering(d: &Directional) -> Outcome {
    let pgd_rob = adv_mean(&d.robust, "PGD^10");
    let ad_rob = adv_mean(&d.robust, "PGD_AD^10");
    let ce = adv_mean(&d.ce, "PGD^10");
    let per_seed: Vec<String> = d
        .robust
        .iter()
        .map(|r| {
            format!(
                "{:.2}/{:.2}",
                r.report.adversarial_accuracy("PGD_AD^10").unwrap(),
                r.report.adversarial_accuracy("PGD^10").unwrap()
            )
        })
        .collect();
    outcome(
        7,
        ad_rob <= pgd_rob && ad_rob > ce && pgd_rob > ce,
        format!(
            "IB robust model: adaptive {ad_rob:.2}% vs PGD {pgd_rob:.2}% (per seed ad/pgd {}), CE PGD {ce:.2}% \
             (need adaptive ≤ PGD and both > CE)",
            per_seed.join(", ")
        ),
    )
}

fn info_plane_trend(d: &Directional) -> Outcome {
    let series = |log: &InfoPlaneLog| -> (Vec<f64>, Vec<f64>) {
        let s = log.sum_hsic_y();
        (
            s.iter().map(|(i, _)| *i as f64).collect(),
            s.iter().map(|(_, v)| *v).collect(),
        )
    };
    let (it, hy) = series(&d.all[0].info);
    let rho = spearman(&it, &hy);
    let (cit, chy) = series(&d.ce[0].info);
    let ce_rho = spearman(&cit, &chy);
    let (xit, hx) = {
        let s = d.all[0].info.sum_hsic_x();
        (
            s.iter().map(|(i, _)| *i as f64).collect::<Vec<_>>(),
            s.iter().map(|(_, v)| *v).collect::<Vec<_>>(),
        )
    };
    println!(
        "  logged: IB Σ HSIC(X,T) Spearman {:.3}; CE Σ HSIC(Y,T) Spearman {ce_rho:.3}",
        spearman(&xit, &hx)
    );
    outcome(
        9,
        rho > 0.5,
        format!(
            "β = 0.1 run, seed 0: Spearman(Σ HSIC(Y,T), iteration) = {rho:.3} over {} points (need > 0.5)",
            it.len()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn adversarial_training(train_set: &Dataset, test_set: &Dataset) -> Outcome {
    let t = Instant::now();
    // Three inner steps keep the six runs inside the time budget.
    let inner = AttackConfig {
        steps: 3,
        step: 0.04,
        ..AttackConfig::mnist_pgd()
    };
    let adv = AdvTrainKind::PgdAt(inner);
    let jobs: Vec<(Variant, u64)> = [Variant::Ce, Variant::IbRobust]
        .into_iter()
        .flat_map(|v| SEEDS.map(|s| (v, s)))
        .collect();
    let runs: Vec<(Variant, Trained)> = jobs
        .par_iter()
        .map(|&(v, s)| (v, run_variant(v, s, &adv, train_set, test_set)))
        .collect();
    let (base, ib): (Vec<_>, Vec<_>) = runs.into_iter().partition(|(v, _)| *v == Variant::Ce);
    let base: Vec<Trained> = base.into_iter().map(|(_, t)| t).collect();
    let ib: Vec<Trained> = ib.into_iter().map(|(_, t)| t).collect();
    let (b_adv, i_adv) = (adv_mean(&base, "PGD^10"), adv_mean(&ib, "PGD^10"));
    let (b_nat, i_nat) = (nat_mean(&base), nat_mean(&ib));
    let secs = t.elapsed().as_secs_f64();
    outcome(
        6,
        i_adv >= b_adv - 0.5 && (i_nat - b_nat).abs() <= 2.0 && secs <= 1800.0,
        format!(
            "PGD-AT: PGD^10 {b_adv:.2}%, natural {b_nat:.2}%; PGD-AT + IB: PGD^10 {i_adv:.2}%, natural {i_nat:.2}% \
             (need IB ≥ base − 0.5 and natural within 2), {secs:.0}s (limit 1800s)"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (n, b) in tree(&p) {
                out.push((format!("{}/{n}", p.file_name().unwrap().to_string_lossy()), b));
            }
        } else {
            out.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

fn persistence(work: &Path, trained: Option<(&Network, &Tensor)>) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let cfg = work.join("det.cfg");
    fs::write(
        &cfg,
        "run.label = determinism\ndata.source = digits\ndata.train_count = 400\ndata.test_count = 100\n\
         network.arch = mini\ntrain.epochs = 2\ntrain.batch_size = 50\ntrain.mask = after:1\ntrain.mask_batches = 3\n\
         attack.list = pgd,fgsm,adaptive\n",
    )
    .unwrap();
    let outs: Vec<_> = ["a", "b"].iter().map(|n| work.join(format!("det-{n}"))).collect();
    let codes: Vec<i32> = outs
        .iter()
        .map(|o| {
            run_command([
                "ibrar",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "3",
                "--out",
                o.to_str().unwrap(),
                "train",
            ])
        })
        .collect();
    let (ta, tb) = (tree(&outs[0]), tree(&outs[1]));
    let identical = codes == [0, 0] && !ta.is_empty() && ta == tb;
    pass &= identical;
    notes.push(format!("two CLI runs, {} files, byte-identical {identical}", ta.len()));

    let (net, x) = match trained {
        Some((n, x)) => (n.clone(), x.clone()),
        None => {
            let ck = fs::read(outs[0].join("model.ckpt")).unwrap();
            let n = decode(Path::new("model.ckpt"), &ck).unwrap().network;
            let (_, te) = load_dataset(&DatasetSource::SyntheticDigits {
                train: 1,
                test: 500,
                size: 16,
                seed: 9,
            })
            .unwrap();
            (n, te.images().clone())
        }
    };
    let meta = CheckpointMeta {
        seed: 0,
        epoch: 10,
        config_hash: [0x5a; 32],
    };
    let bytes = encode(&net, &meta);
    let back = decode(Path::new("roundtrip.ckpt"), &bytes).unwrap();
    let (la, lb) = (net.logits(&x, true).unwrap(), back.network.logits(&x, true).unwrap());
    let drift = la
        .data()
        .iter()
        .zip(lb.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let reencoded = encode(&back.network, &back.meta) == bytes;
    let mask_kept = back.network.mask() == net.mask();
    pass &= drift <= 1e-6 && reencoded && mask_kept;
    notes.push(format!(
        "checkpoint logit drift {drift:.2e} over {} examples (limit 1e-6), re-save identical {reencoded}, mask kept {mask_kept}",
        x.shape()[0]
    ));

    let corrupt_dir = work.join("corrupt");
    fs::create_dir_all(&corrupt_dir).unwrap();
    let corpus = common::corrupt_corpus(&corrupt_dir);
    let messages: HashSet<String> = corpus.iter().map(|(_, e)| e.to_string()).collect();
    let distinct = corpus.len() >= 10 && messages.len() == corpus.len();
    pass &= distinct;
    notes.push(format!(
        "{} corrupt files rejected with {} distinct diagnostics",
        corpus.len(),
        messages.len()
    ));
    outcome(8, pass, notes.join("; "))
}

// ----------------------------------------------------------------

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("IBRAR_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wants = |id: usize| selected.as_ref().is_none_or(|s| s.contains(&id));
    let work = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let mut results = Vec::new();

    if wants(1) {
        results.push(gradients());
    }
    if wants(2) {
        results.push(hsic_oracle());
    }
    if wants(3) {
        results.push(attack_contracts());
    }
    if wants(4) {
        results.push(mask_semantics());
    }
    let needs_data = [5, 6, 7, 9].iter().any(|&i| wants(i));
    let data = needs_data.then(|| mnist_format(work.path()));
    let mut models = None;
    if [5, 7, 9].iter().any(|&i| wants(i)) {
        let (train_set, test_set) = data.as_ref().unwrap();
        let (o, d) = directional(train_set, test_set);
        if wants(5) {
            results.push(o);
        }
        if wants(7) {
            results.push(adaptive_ordering(&d));
        }
        if wants(9) {
            results.push(info_plane_trend(&d));
        }
        models = Some(d);
    }
    if wants(8) {
        let test_images = data.as_ref().map(|(_, te)| te.images().clone());
        let trained = models
            .as_ref()
            .zip(test_images.as_ref())
            .map(|(d, x)| (&d.robust[0].network, x));
        results.push(persistence(work.path(), trained));
    }
    if wants(6) {
        let (train_set, test_set) = data.as_ref().unwrap();
        results.push(adversarial_training(train_set, test_set));
    }

    results.sort_by_key(|o| o.id);
    println!("\nacceptance summary ({:.0}s):", started.elapsed().as_secs_f64());
    for o in &results {
        println!(
            "{} criterion {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.detail
        );
    }
    let failed: Vec<usize> = results.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
