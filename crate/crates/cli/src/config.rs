//! Declarative run configuration: a flat table of dotted keys with defaults,
//! loaded from a `key = value` text file and overridden by repeatable
//! `--set key=value` flags. Every key is validated against the schema before
//! any compute; unknown keys are errors, not warnings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cfsnn_core::data::{
    load_csv, load_idx, synth_dataset, Dataset, EncodeMode, EncoderConfig, NoiseKind, Split,
    SynthKind, SynthSpec,
};
use cfsnn_core::error::{Error, Result};
use cfsnn_core::loss::LossConfig;
use cfsnn_core::network::NetworkSpec;
use cfsnn_core::neuron::{CountMode, NeuronConfig, NeuronKind, ResetMode};
use cfsnn_core::surrogate::{CfComposition, SurrogateFamily, SurrogateSpec};
use cfsnn_core::trainer::TrainConfig;

/// Every known key with its default value. The manifest echoes this table,
/// so runs are reproducible from the manifest alone.
const SCHEMA: &[(&str, &str)] = &[
    ("network.arch", "linear:16 tdbn spike linear:8 spike vote:2"),
    ("network.steps", "4"),
    ("network.bn_eps", "1e-5"),
    ("neuron.kind", "cf"),
    ("neuron.k_tau", "0.25"),
    ("neuron.theta_p", "1.0"),
    ("neuron.theta_n", "-1.0"),
    ("neuron.k_p_max", "2"),
    ("neuron.k_n_max", "2"),
    ("neuron.reset_mode", "soft"),
    ("neuron.u_reset", "0.0"),
    ("surrogate.family", "tsg"),
    ("surrogate.alpha", "2.5"),
    ("surrogate.composition", "sum"),
    ("surrogate.tsg.scale", "4.0"),
    ("surrogate.tsg.bias", "0.5"),
    ("loss.lambda", "0.25"),
    ("loss.epsilon", "1e-6"),
    ("loss.term_clamp", "10.0"),
    ("loss.pnb_layers", "all"),
    ("pnb.include_saturated", "true"),
    ("train.lr", "0.025"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "1e-4"),
    ("train.epochs", "20"),
    ("train.batch_size", "64"),
    ("train.seed", "1"),
    ("train.tsg_lr", "shared"),
    ("train.checkpoint_every", "0"),
    ("dataset.kind", "gaussians"),
    ("dataset.n", "400"),
    ("dataset.test_n", "200"),
    ("dataset.classes", "2"),
    ("dataset.separation", "6.0"),
    ("dataset.dim", "2"),
    ("dataset.seed", "7"),
    ("dataset.limit", "0"),
    ("dataset.augment", "false"),
    ("dataset.augment_pad", "4"),
    ("dataset.idx.train_images", ""),
    ("dataset.idx.train_labels", ""),
    ("dataset.idx.test_images", ""),
    ("dataset.idx.test_labels", ""),
    ("dataset.csv.train", ""),
    ("dataset.csv.test", ""),
    ("encoder.mode", "direct"),
    ("noise.kind", "none"),
    ("noise.epsilon", "0.0"),
    ("energy.count_mode", "magnitude"),
    ("gradcheck.seed", "12345"),
    ("gradcheck.corrupt", ""),
    ("inspect.bin_lo", "-3.0"),
    ("inspect.bin_hi", "3.0"),
    ("inspect.bin_width", "0.25"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown configuration key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected 'key = value'", path.display(), lineno + 1))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_else(|| {
            unreachable!("schema key '{key}' always present")
        })
    }

    fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{}' is not a number", self.get(key))))
    }

    fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{}' is not an integer", self.get(key))))
    }

    fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{}' is not an integer", self.get(key))))
    }

    fn get_u32(&self, key: &str) -> Result<u32> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{}' is not an integer", self.get(key))))
    }

    fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!(
                "key '{key}': '{other}' is not true/false"
            ))),
        }
    }

    /// Sorted `key = value` echo for the run manifest.
    pub fn manifest_body(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    // ---- typed views ----

    pub fn neuron(&self) -> Result<NeuronConfig> {
        let cfg = NeuronConfig {
            kind: NeuronKind::parse(self.get("neuron.kind"))?,
            k_tau: self.get_f64("neuron.k_tau")?,
            theta_p: self.get_f64("neuron.theta_p")?,
            theta_n: self.get_f64("neuron.theta_n")?,
            k_p_max: self.get_u32("neuron.k_p_max")?,
            k_n_max: self.get_u32("neuron.k_n_max")?,
            reset_mode: ResetMode::parse(self.get("neuron.reset_mode"))?,
            u_reset: self.get_f64("neuron.u_reset")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn surrogate(&self) -> Result<SurrogateSpec> {
        let spec = SurrogateSpec {
            family: SurrogateFamily::parse(self.get("surrogate.family"))?,
            alpha: self.get_f64("surrogate.alpha")?,
            composition: CfComposition::parse(self.get("surrogate.composition"))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let pnb_layers = match self.get("loss.pnb_layers") {
            "all" => None,
            list => Some(
                list.split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|_| {
                            Error::Config(format!("loss.pnb_layers: bad ordinal '{s}'"))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?,
            ),
        };
        let cfg = LossConfig {
            lambda: self.get_f64("loss.lambda")?,
            epsilon: self.get_f64("loss.epsilon")?,
            term_clamp: self.get_f64("loss.term_clamp")?,
            pnb_layers,
            include_saturated: self.get_bool("pnb.include_saturated")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let tsg_lr = match self.get("train.tsg_lr") {
            "shared" => None,
            v => Some(v.parse::<f64>().map_err(|_| {
                Error::Config(format!("train.tsg_lr: '{v}' is not a number or 'shared'"))
            })?),
        };
        let cfg = TrainConfig {
            lr: self.get_f64("train.lr")?,
            momentum: self.get_f64("train.momentum")?,
            weight_decay: self.get_f64("train.weight_decay")?,
            epochs: self.get_usize("train.epochs")?,
            batch_size: self.get_usize("train.batch_size")?,
            seed: self.get_u64("train.seed")?,
            tsg_lr,
            checkpoint_every: self.get_usize("train.checkpoint_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn network_spec(&self, input_dims: &[usize]) -> Result<NetworkSpec> {
        let neuron = self.neuron()?;
        let spec = NetworkSpec {
            layers: NetworkSpec::parse_arch(self.get("network.arch"))?,
            neuron,
            surrogate: self.surrogate()?,
            steps: self.get_usize("network.steps")?,
            input_dims: input_dims.to_vec(),
            // normalization targets the firing threshold scale
            bn_theta: neuron.theta_p,
            bn_eps: self.get_f64("network.bn_eps")?,
            tsg_scale: self.get_f64("surrogate.tsg.scale")?,
            tsg_bias: self.get_f64("surrogate.tsg.bias")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            mode: EncodeMode::parse(self.get("encoder.mode"))?,
        })
    }

    pub fn noise(&self) -> Result<Option<(NoiseKind, f64)>> {
        match self.get("noise.kind") {
            "none" => Ok(None),
            kind => Ok(Some((NoiseKind::parse(kind)?, self.get_f64("noise.epsilon")?))),
        }
    }

    pub fn count_mode(&self) -> Result<CountMode> {
        CountMode::parse(self.get("energy.count_mode"))
    }

    /// Crop-and-flip training augmentation: Some(pad) when enabled.
    pub fn augment(&self) -> Result<Option<usize>> {
        if self.get_bool("dataset.augment")? {
            Ok(Some(self.get_usize("dataset.augment_pad")?))
        } else {
            Ok(None)
        }
    }

    pub fn gradcheck_options(&self) -> Result<cfsnn_core::gradcheck::GradCheckOptions> {
        let corrupt = match self.get("gradcheck.corrupt") {
            "" => None,
            name => Some(name.to_string()),
        };
        Ok(cfsnn_core::gradcheck::GradCheckOptions {
            seed: self.get_u64("gradcheck.seed")?,
            corrupt,
            lambda: self.get_f64("loss.lambda")?,
        })
    }

    pub fn bin_spec(&self) -> Result<cfsnn_core::neuron::BinSpec> {
        Ok(cfsnn_core::neuron::BinSpec {
            lo: self.get_f64("inspect.bin_lo")?,
            hi: self.get_f64("inspect.bin_hi")?,
            width: self.get_f64("inspect.bin_width")?,
        })
    }

    /// Apply the master seed flag: it pins both the training and dataset streams.
    pub fn apply_master_seed(&mut self, seed: u64) {
        self.values.insert("train.seed".into(), seed.to_string());
        self.values.insert("dataset.seed".into(), seed.to_string());
    }

    pub fn load_dataset(&self, split: Split) -> Result<Dataset> {
        let kind = self.get("dataset.kind");
        if kind == "idx" {
            let (ik, lk) = match split {
                Split::Train => ("dataset.idx.train_images", "dataset.idx.train_labels"),
                Split::Test => ("dataset.idx.test_images", "dataset.idx.test_labels"),
            };
            let (img, lab) = (self.get(ik), self.get(lk));
            if img.is_empty() || lab.is_empty() {
                return Err(Error::Config(format!(
                    "dataset.kind = idx needs {ik} and {lk}"
                )));
            }
            let mut ds = load_idx(&PathBuf::from(img), &PathBuf::from(lab))?;
            ds.split = split;
            let limit = self.get_usize("dataset.limit")?;
            if limit > 0 && ds.len() > limit {
                ds.samples.truncate(limit);
                ds.labels.truncate(limit);
            }
            return Ok(ds);
        }
        if kind == "csv" {
            let key = match split {
                Split::Train => "dataset.csv.train",
                Split::Test => "dataset.csv.test",
            };
            let path = self.get(key);
            if path.is_empty() {
                return Err(Error::Config(format!("dataset.kind = csv needs {key}")));
            }
            let mut ds = load_csv(&PathBuf::from(path))?;
            ds.split = split;
            return Ok(ds);
        }
        let synth_kind = SynthKind::parse(kind)?;
        let n = match split {
            Split::Train => self.get_usize("dataset.n")?,
            Split::Test => self.get_usize("dataset.test_n")?,
        };
        let classes = match synth_kind {
            SynthKind::Digits => 10,
            SynthKind::TwoMoons | SynthKind::TemporalXor => 2,
            SynthKind::Gaussians => self.get_usize("dataset.classes")?,
        };
        let spec = SynthSpec {
            kind: synth_kind,
            n,
            seed: self.get_u64("dataset.seed")?,
            classes,
            separation: self.get_f64("dataset.separation")?,
            dim: self.get_usize("dataset.dim")?,
            steps: self.get_usize("network.steps")?,
        };
        synth_dataset(&spec, split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_produce_valid_views() {
        let cfg = RunConfig::default();
        cfg.neuron().unwrap();
        cfg.surrogate().unwrap();
        cfg.loss().unwrap();
        cfg.train().unwrap();
        cfg.encoder().unwrap();
        assert!(cfg.noise().unwrap().is_none());
        cfg.network_spec(&[2]).unwrap();
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("neuron.typo", "1").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"), "{err}");
    }

    #[test]
    fn values_are_validated_on_view() {
        let mut cfg = RunConfig::default();
        cfg.set("neuron.theta_n", "0.5").unwrap();
        assert!(cfg.neuron().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("train.batch_size", "1").unwrap();
        assert!(cfg.train().is_err());
    }

    #[test]
    fn manifest_echo_is_sorted_and_complete() {
        let cfg = RunConfig::default();
        let body = cfg.manifest_body();
        assert_eq!(body.lines().count(), SCHEMA.len());
        let mut lines: Vec<&str> = body.lines().collect();
        let sorted = {
            let mut s = lines.clone();
            s.sort();
            s
        };
        assert_eq!(lines.len(), sorted.len());
        lines.sort();
        assert_eq!(lines, sorted);
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("cfg_{}.txt", std::process::id()));
        std::fs::write(&path, "neuron.k_tau = 0.5\nbogus.key = 1\n").unwrap();
        let mut cfg = RunConfig::default();
        let err = cfg.load_file(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        std::fs::remove_file(&path).ok();
    }
}
