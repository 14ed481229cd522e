//! `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::datasynth::SynthSpec;
use crate::error::{Error, Result};
use crate::fsio::read_text;
use crate::train::{ApagePolicy, Optimizer, TrainConfig};

pub const KNOWN_KEYS: &[&str] = &[
    "loss.eta_box",
    "loss.eta_cls",
    "loss.eta_obj",
    "loss.alpha",
    "loss.gamma",
    "loss.balance",
    "loss.beta",
    "apage.patch_h",
    "apage.patch_w",
    "apage.clip",
    "apage.tiles",
    "apage.policy",
    "train.epochs",
    "train.batch",
    "train.optimizer",
    "train.lr",
    "train.momentum",
    "train.beta1",
    "train.beta2",
    "train.per_category",
    "train.intermediate",
    "mmd.multipliers",
    "mmd.bandwidth",
    "synth.size",
    "synth.source_train",
    "synth.target_train",
    "synth.target_test",
    "synth.objects_per_image",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    origin: String,
    /// key -> (value, line number)
    entries: BTreeMap<String, (String, usize)>,
}

/// Everything a config file can set.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

pub fn parse_config(path: &Path) -> Result<Config> {
    parse_config_str(&read_text(path)?, &path.display().to_string())
}

pub fn parse_config_str(text: &str, origin: &str) -> Result<Config> {
    let err = |line, detail: String| Error::Config { path: origin.to_string(), line, detail };
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected `key = value`, got `{line}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(err(line_no, format!("empty key or value in `{line}`")));
        }
        if !KNOWN_KEYS.contains(&k) {
            let nearest = KNOWN_KEYS
                .iter()
                .min_by_key(|c| strsim::levenshtein(k, c))
                .expect("key list is not empty");
            return Err(err(line_no, format!("unknown key `{k}`; did you mean `{nearest}`?")));
        }
        if let Some((_, first)) = entries.get(k) {
            return Err(err(line_no, format!("duplicate key `{k}` (first set on line {first})")));
        }
        entries.insert(k.to_string(), (v.to_string(), line_no));
    }
    Ok(Config { origin: origin.to_string(), entries })
}

impl Config {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn error(&self, key: &str, detail: String) -> Error {
        let line = self.entries.get(key).map_or(0, |(_, l)| *l);
        Error::Config { path: self.origin.clone(), line, detail: format!("{key}: {detail}") }
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.error(key, format!("cannot parse `{v}`"))),
        }
    }

    pub fn get_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| self.error(key, format!("cannot parse `{x}`"))))
                .collect(),
        }
    }

    fn get_triple(&self, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
        let v = self.get_list(key, &default)?;
        v.as_slice().try_into().map_err(|_| self.error(key, format!("expected 3 values, got {}", v.len())))
    }

    /// `NxM` or `N`.
    fn get_grid(&self, key: &str, default: (usize, usize)) -> Result<(usize, usize)> {
        let Some(v) = self.raw(key) else { return Ok(default) };
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| self.error(key, format!("cannot parse `{v}`")));
        match v.split_once(['x', 'X']) {
            Some((a, b)) => Ok((parse(a)?, parse(b)?)),
            None => {
                let n = parse(v)?;
                Ok((n, n))
            }
        }
    }

    pub fn settings(&self) -> Result<Settings> {
        let mut t = TrainConfig::default();
        let w = &mut t.weights;
        w.eta_box = self.get("loss.eta_box", w.eta_box)?;
        w.eta_cls = self.get("loss.eta_cls", w.eta_cls)?;
        w.eta_obj = self.get("loss.eta_obj", w.eta_obj)?;
        w.balance = self.get_triple("loss.balance", w.balance)?;
        w.beta = self.get_triple("loss.beta", w.beta)?;
        t.focal.alpha = self.get("loss.alpha", t.focal.alpha)?;
        t.focal.gamma = self.get("loss.gamma", t.focal.gamma)?;

        let a = &mut t.apage;
        a.patch_h = self.get("apage.patch_h", a.patch_h)?;
        a.patch_w = self.get("apage.patch_w", a.patch_w)?;
        a.clahe_clip = self.get("apage.clip", a.clahe_clip)?;
        a.clahe_tiles = self.get_grid("apage.tiles", a.clahe_tiles)?;
        t.apage_policy = match self.raw("apage.policy") {
            None => t.apage_policy,
            Some("off") => ApagePolicy::Off,
            Some("target") => ApagePolicy::Target,
            Some("all") => ApagePolicy::All,
            Some(v) => return Err(self.error("apage.policy", format!("`{v}` is not one of off, target, all"))),
        };

        t.epochs = self.get("train.epochs", t.epochs)?;
        t.batch_size = self.get("train.batch", t.batch_size)?;
        t.per_category = self.get("train.per_category", t.per_category)?;
        t.intermediate = self.get("train.intermediate", t.intermediate)?;
        let kind = self.raw("train.optimizer").unwrap_or("sgd");
        t.optimizer = match kind {
            "sgd" => {
                let Optimizer::Sgd { lr, momentum } = Optimizer::sgd() else { unreachable!() };
                Optimizer::Sgd { lr: self.get("train.lr", lr)?, momentum: self.get("train.momentum", momentum)? }
            }
            "adam" => {
                let Optimizer::Adam { lr, beta1, beta2, eps } = Optimizer::adam() else { unreachable!() };
                Optimizer::Adam {
                    lr: self.get("train.lr", lr)?,
                    beta1: self.get("train.beta1", beta1)?,
                    beta2: self.get("train.beta2", beta2)?,
                    eps,
                }
            }
            v => return Err(self.error("train.optimizer", format!("`{v}` is not one of sgd, adam"))),
        };
        for (key, used) in [("train.momentum", kind == "sgd"), ("train.beta1", kind == "adam"), ("train.beta2", kind == "adam")] {
            if !used && self.raw(key).is_some() {
                return Err(self.error(key, format!("not used by optimizer `{kind}`")));
            }
        }

        t.mmd_multipliers = self.get_list("mmd.multipliers", &t.mmd_multipliers)?;
        t.fixed_bandwidth = match self.raw("mmd.bandwidth") {
            None | Some("median") => None,
            Some(_) => Some(self.get("mmd.bandwidth", 0.0)?),
        };

        let mut s = SynthSpec::default();
        s.size = self.get("synth.size", s.size)?;
        s.source_train = self.get("synth.source_train", s.source_train)?;
        s.target_train = self.get("synth.target_train", s.target_train)?;
        s.target_test = self.get("synth.target_test", s.target_test)?;
        s.objects_per_image = self.get("synth.objects_per_image", s.objects_per_image)?;

        let first_line = |prefix: &str| {
            self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, (_, l))| *l).min().unwrap_or(0)
        };
        let wrap = |prefix: &str, e: Error| Error::Config { path: self.origin.clone(), line: first_line(prefix), detail: e.to_string() };
        t.weights.validate().map_err(|e| wrap("loss.", e))?;
        t.focal.validate().map_err(|e| wrap("loss.", e))?;
        t.apage.validate().map_err(|e| wrap("apage.", e))?;
        s.validate().map_err(|e| wrap("synth.", e))?;
        t.validate().map_err(|e| wrap("train.", e))?;
        Ok(Settings { train: t, synth: s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(text: &str) -> Result<Settings> {
        parse_config_str(text, "test.cfg")?.settings()
    }

    #[test]
    fn empty_file_is_defaults() {
        let s = settings("").unwrap();
        assert_eq!(s.train, TrainConfig::default());
        assert_eq!(s.synth, SynthSpec::default());
        assert_eq!(settings("# only a comment\n\n   \n").unwrap().train, TrainConfig::default());
    }

    #[test]
    fn gamma_key() {
        let s = settings("loss.gamma = 1.5").unwrap();
        assert_eq!(s.train.focal.gamma, 1.5);
        let s = settings("loss.gamma=2.0 # trailing comment\nloss.beta = 0.2, 0.1, 0").unwrap();
        assert_eq!(s.train.focal.gamma, 2.0);
        assert_eq!(s.train.weights.beta, [0.2, 0.1, 0.0]);
    }

    #[test]
    fn typo_suggests_nearest() {
        let e = settings("\nloss.gama = 1.5").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("loss.gamma"), "{msg}");
        assert!(matches!(e, Error::Config { line: 2, .. }));
    }

    #[test]
    fn duplicates_and_syntax() {
        assert!(matches!(settings("train.epochs = 3\ntrain.epochs = 4"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(settings("train.epochs 3"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(settings("a\n\ntrain.epochs ="), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn values_are_validated() {
        assert!(matches!(settings("\n\ntrain.epochs = x"), Err(Error::Config { line: 3, .. })));
        assert!(settings("train.epochs = 0").is_err());
        assert!(settings("loss.alpha = 1.5").is_err());
        assert!(settings("loss.beta = 1,2").is_err());
        assert!(settings("apage.policy = sometimes").is_err());
        assert!(settings("train.optimizer = rmsprop").is_err());
        assert!(settings("train.beta1 = 0.8").is_err());
        assert!(settings("mmd.bandwidth = -1").is_err());
    }

    #[test]
    fn optimizer_and_apage() {
        let s = settings("train.optimizer = adam\ntrain.lr = 0.002\napage.tiles = 2x3\napage.policy = all").unwrap();
        assert!(matches!(s.train.optimizer, Optimizer::Adam { lr, .. } if lr == 0.002));
        assert_eq!(s.train.apage.clahe_tiles, (2, 3));
        assert_eq!(s.train.apage_policy, ApagePolicy::All);
        let s = settings("mmd.bandwidth = 2.5\ntrain.intermediate = false").unwrap();
        assert_eq!(s.train.fixed_bandwidth, Some(2.5));
        assert!(!s.train.intermediate);
    }

    #[test]
    fn every_known_key_is_consumed() {
        let sample = |k: &str| -> Option<&str> {
            Some(match k {
            "loss.balance" | "loss.beta" => "0.1,0.1,0.1",
            "apage.tiles" => "4x4",
            "apage.policy" => "target",
            "train.optimizer" => "sgd",
            "train.intermediate" => "true",
            "train.beta1" | "train.beta2" => return None,
            "mmd.multipliers" => "1,2",
            "mmd.bandwidth" => "median",
            "loss.alpha" | "loss.gamma" | "apage.clip" | "train.lr" | "train.momentum" | "loss.eta_box" | "loss.eta_cls"
            | "loss.eta_obj" => "0.5",
            "synth.size" => "64",
            _ => "3",
            })
        };
        let text: String = KNOWN_KEYS.iter().filter_map(|k| sample(k).map(|v| format!("{k} = {v}\n"))).collect();
        let s = settings(&text).unwrap();
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.synth.target_test, 3);
        assert_eq!(s.train.mmd_multipliers, vec![1.0, 2.0]);
    }
}
