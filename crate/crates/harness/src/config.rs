//! Experiment specifications from flat `section.key = value` files.
//!
//! Lines are `key = value`; `#` starts a comment and blank lines are
//! skipped. Every key must be known and used by the chosen options, each key
//! may appear once per source, and command-line overrides replace file
//! values. The resolved spec is validated as a whole before anything runs.

use crate::datasets::DatasetSource;
use crate::error::{HarnessError, Result};
use ibrar_core::hsic::KernelConfig;
use ibrar_core::losses::LayerSet;
use ibrar_core::pipeline::{MaskSchedule, TrainConfig};
use ibrar_core::{AdvTrainKind, Attack, AttackConfig, AttackLoss, AttackMethod, IbLossConfig, NetworkConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Arch {
    Mini,
    Tiny,
    Custom(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSpec {
    pub batch_size: usize,
    pub top_k: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
    pub png: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub label: String,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DatasetSource,
    pub arch: Arch,
    /// Resolved against the dataset's image shape and class count.
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub ib: IbLossConfig,
    pub adv: AdvTrainKind,
    pub attacks: Vec<Attack>,
    pub eval: EvalSpec,
    pub select_margin: f64,
    pub sweep_betas: Vec<f64>,
    pub formats: Formats,
}

/// Raw `key → (value, origin)` pairs before interpretation.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, String)>,
}

fn cfg_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("{at}: expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.contains('.') || k.chars().any(char::is_whitespace) {
                return Err(cfg_err(format!("{at}: key {k:?} must look like section.name")));
            }
            if let Some((_, first)) = raw.entries.get(k) {
                return Err(cfg_err(format!("{at}: duplicate key {k} (first set at {first})")));
            }
            raw.entries.insert(k.to_string(), (v.to_string(), at));
        }
        Ok(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override, replacing any file value.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("override {assignment:?} must be key=value")))?;
        let k = k.trim();
        if !k.contains('.') {
            return Err(cfg_err(format!("override key {k:?} must look like section.name")));
        }
        self.entries
            .insert(k.to_string(), (v.trim().to_string(), "command line".to_string()));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }
}

/// Consumes keys while interpreting them; whatever is left afterwards was
/// not understood.
struct Fields {
    entries: BTreeMap<String, (String, String)>,
}

impl Fields {
    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&mut self, key: &str) -> Option<(String, String)> {
        self.entries.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, at)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| cfg_err(format!("{at}: cannot parse {key} = {v:?}"))),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.raw(key).map(|(v, _)| v)
    }

    fn required(&mut self, key: &str, why: &str) -> Result<String> {
        self.string(key)
            .ok_or_else(|| cfg_err(format!("{key} is required {why}")))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, at)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>()
                        .map_err(|_| cfg_err(format!("{at}: bad item {s:?} in {key}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some((k, (_, at))) = self.entries.into_iter().next() {
            return Err(cfg_err(format!("{at}: unknown or unused key {k}")));
        }
        Ok(())
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

fn take_bool(f: &mut Fields, key: &str, default: bool) -> Result<bool> {
    match f.raw(key) {
        None => Ok(default),
        Some((v, at)) => parse_bool(&v).ok_or_else(|| cfg_err(format!("{at}: {key} must be true or false, got {v:?}"))),
    }
}

/// `gaussian-median`, `gaussian:<sigma>` or `linear`.
pub fn parse_kernel(s: &str) -> Result<KernelConfig> {
    match s.split_once(':') {
        None if s == "gaussian-median" || s == "gaussian" => Ok(KernelConfig::gaussian_median()),
        None if s == "linear" => Ok(KernelConfig::linear()),
        Some(("gaussian", sigma)) => sigma
            .trim()
            .parse::<f64>()
            .map(KernelConfig::gaussian)
            .map_err(|_| cfg_err(format!("bad kernel bandwidth in {s:?}"))),
        _ => Err(cfg_err(format!("unknown kernel {s:?}"))),
    }
}

/// `all`, `robust:3,4,5` or `single:3`.
pub fn parse_layers(s: &str) -> Result<LayerSet> {
    let bad = || cfg_err(format!("bad layer set {s:?}"));
    match s.split_once(':') {
        None if s == "all" => Ok(LayerSet::All),
        Some(("robust", list)) => list
            .split(',')
            .map(|l| l.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()
            .map(LayerSet::Robust),
        Some(("single", l)) => l.trim().parse().map(LayerSet::Single).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

fn kernel_field(f: &mut Fields, key: &str, default: KernelConfig) -> Result<KernelConfig> {
    match f.raw(key) {
        None => Ok(default),
        Some((v, at)) => parse_kernel(&v).map_err(|e| cfg_err(format!("{at}: {key}: {e}"))),
    }
}

fn data_source(f: &mut Fields) -> Result<DatasetSource> {
    let kind = f.string("data.source").unwrap_or_else(|| "blobs".into());
    Ok(match kind.as_str() {
        "blobs" => DatasetSource::SyntheticBlobs {
            classes: f.or("data.classes", 10)?,
            per_class: f.or("data.per_class", 100)?,
            test_per_class: f.or("data.test_per_class", 20)?,
            size: f.or("data.size", 8)?,
            noise: f.or("data.noise", 0.1)?,
            seed: f.or("data.seed", 0)?,
        },
        "digits" => DatasetSource::SyntheticDigits {
            train: f.or("data.train_count", 10_000)?,
            test: f.or("data.test_count", 2_000)?,
            size: f.or("data.size", 16)?,
            seed: f.or("data.seed", 0)?,
        },
        "idx" => {
            let why = "for data.source = idx";
            DatasetSource::IdxPair {
                train_images: f.required("data.train_images", why)?.into(),
                train_labels: f.required("data.train_labels", why)?.into(),
                test_images: f.required("data.test_images", why)?.into(),
                test_labels: f.required("data.test_labels", why)?.into(),
                classes: f.or("data.classes", 10)?,
            }
        }
        "cifar" => {
            let files = |f: &mut Fields, key: &str| -> Result<Vec<PathBuf>> {
                let v: Vec<PathBuf> = f.list(key)?.unwrap_or_default();
                if v.is_empty() {
                    return Err(cfg_err(format!(
                        "{key} needs at least one file for data.source = cifar"
                    )));
                }
                Ok(v)
            };
            DatasetSource::CifarBinary {
                train: files(f, "data.train_files")?,
                test: files(f, "data.test_files")?,
            }
        }
        other => {
            return Err(cfg_err(format!(
                "unknown data.source {other:?} (blobs, digits, idx, cifar)"
            )))
        }
    })
}

fn attack_settings(f: &mut Fields, prefix: &str, base: AttackConfig) -> Result<AttackConfig> {
    let key = |k: &str| format!("{prefix}.{k}");
    let eps = f.or(&key("eps"), base.eps)?;
    Ok(AttackConfig {
        eps,
        step: f.or(&key("step"), base.step.min(eps))?,
        steps: f.or(&key("steps"), base.steps)?,
        random_start: take_bool(f, &key("random_start"), base.random_start)?,
        lo: f.or(&key("lo"), base.lo)?,
        hi: f.or(&key("hi"), base.hi)?,
        loss: AttackLoss::Ce,
    })
}

fn ib_config(f: &mut Fields) -> Result<IbLossConfig> {
    let preset = f.string("ib.preset").unwrap_or_else(|| "default".into());
    let mut ib = match preset.as_str() {
        "default" => IbLossConfig::default(),
        "vgg16" => IbLossConfig::vgg16(),
        "ce" => IbLossConfig::ce_only(),
        other => return Err(cfg_err(format!("unknown ib.preset {other:?} (default, vgg16, ce)"))),
    };
    let beta: Option<f64> = f.take("ib.beta")?;
    let alpha: Option<f64> = f.take("ib.alpha")?;
    if let Some(b) = beta {
        ib.beta = b;
        ib.alpha = b * 0.1;
    }
    if let Some(a) = alpha {
        ib.alpha = a;
    }
    if let Some((v, at)) = f.raw("ib.layers") {
        ib.layers = parse_layers(&v).map_err(|e| cfg_err(format!("{at}: {e}")))?;
    }
    ib.mi_on_clean = take_bool(f, "ib.mi_on_clean", ib.mi_on_clean)?;
    ib.kernel_x = kernel_field(f, "ib.kernel_x", ib.kernel_x)?;
    ib.kernel_t = kernel_field(f, "ib.kernel_t", ib.kernel_t)?;
    ib.kernel_y = kernel_field(f, "ib.kernel_y", ib.kernel_y)?;
    Ok(ib)
}

fn train_config(f: &mut Fields, seed: u64) -> Result<TrainConfig> {
    let epochs = f.or("train.epochs", 60usize)?;
    let base = TrainConfig::with_epochs(epochs);
    let mask = match f.raw("train.mask") {
        None => base.mask,
        Some((v, at)) => match v.as_str() {
            "off" => MaskSchedule::Off,
            "default" => base.mask,
            s => match s.strip_prefix("after:").map(str::parse::<usize>) {
                Some(Ok(e)) => MaskSchedule::AfterEpoch(e),
                _ => {
                    return Err(cfg_err(format!(
                        "{at}: train.mask must be off, default or after:<epoch>, got {v:?}"
                    )))
                }
            },
        },
    };
    Ok(TrainConfig {
        epochs,
        batch_size: f.or("train.batch_size", base.batch_size)?,
        lr: f.or("train.lr", base.lr)?,
        weight_decay: f.or("train.weight_decay", base.weight_decay)?,
        lr_step: f.or("train.lr_step", base.lr_step)?,
        lr_gamma: f.or("train.lr_gamma", base.lr_gamma)?,
        momentum: f.or("train.momentum", base.momentum)?,
        seed,
        mask,
        recompute_mask: take_bool(f, "train.recompute_mask", base.recompute_mask)?,
        mask_batches: f.or("train.mask_batches", base.mask_batches)?,
        mask_fraction: f.or("train.mask_fraction", base.mask_fraction)?,
        warm_start_ib_first_epoch: take_bool(f, "train.warm_start_ib", base.warm_start_ib_first_epoch)?,
    })
}

fn adv_kind(f: &mut Fields) -> Result<AdvTrainKind> {
    let kind = f.string("adv.kind").unwrap_or_else(|| "none".into());
    if kind == "none" {
        return Ok(AdvTrainKind::None);
    }
    let attack = attack_settings(f, "adv", AttackConfig::mnist_pgd())?;
    Ok(match kind.as_str() {
        "pgd" => AdvTrainKind::PgdAt(attack),
        "trades" => AdvTrainKind::Trades {
            lambda: f.or("adv.lambda", 6.0)?,
            attack,
        },
        "mart" => AdvTrainKind::Mart {
            lambda: f.or("adv.lambda", 6.0)?,
            attack,
        },
        other => return Err(cfg_err(format!("unknown adv.kind {other:?} (none, pgd, trades, mart)"))),
    })
}

fn attack_list(f: &mut Fields, ib: &IbLossConfig) -> Result<Vec<Attack>> {
    let preset = f.string("attack.preset").unwrap_or_else(|| "mnist".into());
    let base = match preset.as_str() {
        "mnist" => AttackConfig::mnist_pgd(),
        "cifar" => AttackConfig::cifar_pgd(),
        other => return Err(cfg_err(format!("unknown attack.preset {other:?} (mnist, cifar)"))),
    };
    let cfg = attack_settings(f, "attack", base)?;
    let names: Vec<String> = f.list("attack.list")?.unwrap_or_else(|| vec!["pgd".to_string()]);
    let wants = |n: &str| names.iter().any(|x| x == n);
    let cw_steps = if wants("cw") {
        f.or("attack.cw_steps", 200usize)?
    } else {
        0
    };
    let kappa = if wants("cw") {
        f.or("attack.cw_kappa", 0.0)?
    } else {
        0.0
    };
    let decay = if wants("nifgsm") {
        f.or("attack.nifgsm_decay", 1.0)?
    } else {
        0.0
    };
    names
        .iter()
        .map(|name| {
            Ok(match name.as_str() {
                "fgsm" => Attack::new("FGSM", AttackMethod::Fgsm, AttackConfig::fgsm(cfg.eps)),
                "pgd" => Attack::pgd(cfg.clone()),
                "nifgsm" => Attack::new(
                    format!("NIFGSM^{}", cfg.steps),
                    AttackMethod::Nifgsm { decay },
                    AttackConfig {
                        random_start: false,
                        ..cfg.clone()
                    },
                ),
                "cw" => Attack::new(
                    format!("CW^{cw_steps}"),
                    AttackMethod::CwMargin,
                    AttackConfig {
                        steps: cw_steps,
                        loss: AttackLoss::Margin { kappa },
                        ..cfg.clone()
                    },
                ),
                "adaptive" => Attack::new(
                    format!("PGD_AD^{}", cfg.steps),
                    AttackMethod::AdaptivePgd,
                    AttackConfig {
                        loss: AttackLoss::IbRar(ib.clone()),
                        ..cfg.clone()
                    },
                ),
                other => {
                    return Err(cfg_err(format!(
                        "unknown attack {other:?} (fgsm, pgd, nifgsm, cw, adaptive)"
                    )))
                }
            })
        })
        .collect()
}

fn network_config(arch: &Arch, input: [usize; 3], classes: usize) -> Result<NetworkConfig> {
    let net = match arch {
        Arch::Mini => NetworkConfig::mini_conv_net(input, classes),
        Arch::Tiny => NetworkConfig::mini_conv_net_tiny(input, classes),
        Arch::Custom(layers) => NetworkConfig::from_text(&format!("{}x{}x{};{layers}", input[0], input[1], input[2]))?,
    };
    net.validate()?;
    if net.classes() != classes {
        return Err(cfg_err(format!(
            "network output has {} classes but the dataset has {classes}",
            net.classes()
        )));
    }
    Ok(net)
}

impl ExperimentSpec {
    /// Interprets and validates a raw configuration. File-backed datasets
    /// are consulted for their image shape only.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        Self::resolve(raw).map_err(|e| match e {
            HarnessError::Core(inner) => HarnessError::Config(inner.to_string()),
            other => other,
        })
    }

    fn resolve(raw: &RawConfig) -> Result<Self> {
        let mut f = Fields {
            entries: raw.entries.clone(),
        };
        let label = f.string("run.label").unwrap_or_else(|| "run".into());
        let seed = f.or("run.seed", 0u64)?;
        let out = PathBuf::from(f.string("run.out").unwrap_or_else(|| "out".into()));
        let data = data_source(&mut f)?;
        let arch = match f.string("network.arch").as_deref() {
            None | Some("mini") => Arch::Mini,
            Some("tiny") => Arch::Tiny,
            Some("custom") => Arch::Custom(f.required("network.layers", "for network.arch = custom")?),
            Some(other) => return Err(cfg_err(format!("unknown network.arch {other:?} (mini, tiny, custom)"))),
        };
        if f.has("network.layers") {
            return Err(cfg_err("network.layers is only read with network.arch = custom"));
        }
        let train = train_config(&mut f, seed)?;
        let ib = ib_config(&mut f)?;
        let adv = adv_kind(&mut f)?;
        let attacks = attack_list(&mut f, &ib)?;
        let eval = EvalSpec {
            batch_size: f.or("eval.batch_size", train.batch_size)?,
            top_k: f.or("eval.top_k", 4)?,
            class_names: f.list("eval.class_names")?.unwrap_or_default(),
        };
        let select_margin = f.or("select.margin", 2.0)?;
        let sweep_betas = f.list("sweep.betas")?.unwrap_or_else(|| vec![4.0, 2.0, 1.0, 0.1]);
        let formats = match f.list::<String>("report.formats")? {
            None => Formats {
                csv: true,
                json: true,
                png: true,
            },
            Some(list) => {
                if let Some(bad) = list.iter().find(|x| !["csv", "json", "png"].contains(&x.as_str())) {
                    return Err(cfg_err(format!("unknown report format {bad:?} (csv, json, png)")));
                }
                let has = |n: &str| list.iter().any(|x| x == n);
                Formats {
                    csv: has("csv"),
                    json: has("json"),
                    png: has("png"),
                }
            }
        };
        f.finish()?;

        validate_data(&data)?;
        let network = network_config(&arch, data.image_shape()?, data.classes())?;
        let spec = ExperimentSpec {
            label,
            seed,
            out,
            data,
            arch,
            network,
            train,
            ib,
            adv,
            attacks,
            eval,
            select_margin,
            sweep_betas,
            formats,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut raw = match path {
            Some(p) => RawConfig::from_file(p)?,
            None => RawConfig::default(),
        };
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(&raw)
    }

    /// Cross-module checks that need the whole spec.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.ib.validate(self.network.hidden_layers())?;
        self.adv.validate()?;
        for a in &self.attacks {
            a.validate().map_err(|e| cfg_err(format!("attack {}: {e}", a.name)))?;
        }
        if self.eval.batch_size == 0 {
            return Err(cfg_err("eval.batch_size must be at least 1"));
        }
        if self.attacks.iter().any(|a| a.method == AttackMethod::AdaptivePgd) && self.eval.batch_size < 2 {
            return Err(cfg_err("the adaptive attack needs eval.batch_size >= 2"));
        }
        if self.eval.top_k == 0 {
            return Err(cfg_err("eval.top_k must be at least 1"));
        }
        if !self.eval.class_names.is_empty() && self.eval.class_names.len() != self.network.classes() {
            return Err(cfg_err(format!(
                "eval.class_names lists {} names for {} classes",
                self.eval.class_names.len(),
                self.network.classes()
            )));
        }
        if !(self.select_margin >= 0.0) {
            return Err(cfg_err(format!(
                "select.margin must be non-negative, got {}",
                self.select_margin
            )));
        }
        if self.sweep_betas.is_empty() || self.sweep_betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(cfg_err("sweep.betas must be a non-empty list of non-negative numbers"));
        }
        if self.train.mask != MaskSchedule::Off && self.network.last_conv_layer().is_none() {
            return Err(cfg_err("train.mask needs a network with a conv block"));
        }
        Ok(())
    }

    /// Stable text of everything that determines a run's result.
    pub fn fingerprint_text(&self) -> String {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            data: &'a DatasetSource,
            network: String,
            train: &'a TrainConfig,
            ib: &'a IbLossConfig,
            adv: &'a AdvTrainKind,
        }
        serde_json::to_string(&Fingerprint {
            data: &self.data,
            network: self.network.to_text(),
            train: &self.train,
            ib: &self.ib,
            adv: &self.adv,
        })
        .expect("spec serializes")
    }

    /// SHA-256 of [`fingerprint_text`](Self::fingerprint_text).
    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.fingerprint_text().as_bytes()).into()
    }
}

fn validate_data(data: &DatasetSource) -> Result<()> {
    match data {
        DatasetSource::SyntheticBlobs {
            classes,
            per_class,
            test_per_class,
            size,
            noise,
            ..
        } => {
            if *classes < 2 {
                return Err(cfg_err("data.classes must be at least 2"));
            }
            if *per_class == 0 || *test_per_class == 0 {
                return Err(cfg_err("data.per_class and data.test_per_class must be positive"));
            }
            if *size < 2 {
                return Err(cfg_err("data.size must be at least 2"));
            }
            if !(*noise >= 0.0 && noise.is_finite()) {
                return Err(cfg_err(format!("data.noise must be non-negative, got {noise}")));
            }
        }
        DatasetSource::SyntheticDigits { train, test, size, .. } => {
            if *train == 0 || *test == 0 {
                return Err(cfg_err("data.train_count and data.test_count must be positive"));
            }
            if *size < 8 {
                return Err(cfg_err("digit images need data.size >= 8"));
            }
        }
        DatasetSource::IdxPair { classes, .. } => {
            if !(2..=256).contains(classes) {
                return Err(cfg_err(format!(
                    "data.classes must lie in [2, 256] for IDX labels, got {classes}"
                )));
            }
        }
        DatasetSource::CifarBinary { .. } => {}
    }
    Ok(())
}
