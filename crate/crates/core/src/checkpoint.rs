//! Checkpoint persistence.
//!
//! File layout: 8-byte magic `SNNCKPT1`, 4-byte little-endian format version,
//! a length-prefixed UTF-8 metadata block (`key=value` lines echoing the
//! network spec, epoch, and RNG state), then raw little-endian 8-byte float
//! blobs in declaration order: for every parameter its tensor then its
//! momentum buffer, followed by every normalization site's running mean and
//! running variance. Loading rebuilds the network from the spec echo and
//! installs the blobs; any size or header mismatch fails before any state is
//! touched.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::neuron::{NeuronConfig, NeuronKind, ResetMode};
use crate::surrogate::{CfComposition, SurrogateFamily, SurrogateSpec};

pub const MAGIC: &[u8; 8] = b"SNNCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub net: Network,
    pub epoch: usize,
    pub rng_state: u64,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, net: &Network, epoch: usize, rng_state: u64) -> Result<()> {
    let spec = &net.spec;
    let mut meta = String::new();
    let mut kv = |k: &str, v: String| {
        meta.push_str(k);
        meta.push('=');
        meta.push_str(&v);
        meta.push('\n');
    };
    kv("arch", spec.arch_string());
    kv("steps", spec.steps.to_string());
    kv(
        "input_dims",
        spec.input_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
    );
    kv("neuron.kind", spec.neuron.kind.name().into());
    kv("neuron.k_tau", spec.neuron.k_tau.to_string());
    kv("neuron.theta_p", spec.neuron.theta_p.to_string());
    kv("neuron.theta_n", spec.neuron.theta_n.to_string());
    kv("neuron.k_p_max", spec.neuron.k_p_max.to_string());
    kv("neuron.k_n_max", spec.neuron.k_n_max.to_string());
    kv("neuron.reset_mode", spec.neuron.reset_mode.name().into());
    kv("neuron.u_reset", spec.neuron.u_reset.to_string());
    kv("surrogate.family", spec.surrogate.family.name().into());
    kv("surrogate.alpha", spec.surrogate.alpha.to_string());
    kv("surrogate.composition", spec.surrogate.composition.name().into());
    kv("bn_theta", spec.bn_theta.to_string());
    kv("bn_eps", spec.bn_eps.to_string());
    kv("tsg_scale", spec.tsg_scale.to_string());
    kv("tsg_bias", spec.tsg_bias.to_string());
    kv("epoch", epoch.to_string());
    kv("rng_state", format!("{rng_state:016x}"));
    let total_values: usize = net.params.iter().map(|p| 2 * p.tensor.numel()).sum::<usize>()
        + net.bn_states.iter().map(|b| 2 * b.running_mean.len()).sum::<usize>();
    kv("total_values", total_values.to_string());

    let mut bytes = Vec::with_capacity(16 + meta.len() + total_values * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta.as_bytes());
    for p in &net.params {
        push_f64s(&mut bytes, p.tensor.values());
        push_f64s(&mut bytes, p.momentum.values());
    }
    for b in &net.bn_states {
        push_f64s(&mut bytes, &b.running_mean);
        push_f64s(&mut bytes, &b.running_var);
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn meta_get<'a>(map: &'a HashMap<&str, &str>, key: &str) -> Result<&'a str> {
    map.get(key)
        .copied()
        .ok_or_else(|| Error::Format(format!("checkpoint metadata missing key '{key}'")))
}

fn meta_parse<T: std::str::FromStr>(map: &HashMap<&str, &str>, key: &str) -> Result<T> {
    meta_get(map, key)?
        .parse::<T>()
        .map_err(|_| Error::Format(format!("checkpoint metadata has bad value for '{key}'")))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint truncated before header".into()));
    }
    if &bytes[0..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, want {:?}",
            &bytes[0..8],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version}, this build reads {VERSION}"
        )));
    }
    let meta_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 16 + meta_len {
        return Err(Error::Format("checkpoint truncated inside metadata".into()));
    }
    let meta = std::str::from_utf8(&bytes[16..16 + meta_len])
        .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
    let map: HashMap<&str, &str> = meta
        .lines()
        .filter(|l| !l.is_empty())
        .filter_map(|l| l.split_once('='))
        .collect();

    let spec = NetworkSpec {
        layers: NetworkSpec::parse_arch(meta_get(&map, "arch")?)?,
        neuron: NeuronConfig {
            kind: NeuronKind::parse(meta_get(&map, "neuron.kind")?)?,
            k_tau: meta_parse(&map, "neuron.k_tau")?,
            theta_p: meta_parse(&map, "neuron.theta_p")?,
            theta_n: meta_parse(&map, "neuron.theta_n")?,
            k_p_max: meta_parse(&map, "neuron.k_p_max")?,
            k_n_max: meta_parse(&map, "neuron.k_n_max")?,
            reset_mode: ResetMode::parse(meta_get(&map, "neuron.reset_mode")?)?,
            u_reset: meta_parse(&map, "neuron.u_reset")?,
        },
        surrogate: SurrogateSpec {
            family: SurrogateFamily::parse(meta_get(&map, "surrogate.family")?)?,
            alpha: meta_parse(&map, "surrogate.alpha")?,
            composition: CfComposition::parse(meta_get(&map, "surrogate.composition")?)?,
        },
        steps: meta_parse(&map, "steps")?,
        input_dims: meta_get(&map, "input_dims")?
            .split(',')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::Format("bad input_dims in checkpoint".into()))
            })
            .collect::<Result<_>>()?,
        bn_theta: meta_parse(&map, "bn_theta")?,
        bn_eps: meta_parse(&map, "bn_eps")?,
        tsg_scale: meta_parse(&map, "tsg_scale")?,
        tsg_bias: meta_parse(&map, "tsg_bias")?,
    };
    let epoch: usize = meta_parse(&map, "epoch")?;
    let rng_state = u64::from_str_radix(meta_get(&map, "rng_state")?, 16)
        .map_err(|_| Error::Format("bad rng_state in checkpoint".into()))?;
    let total_values: usize = meta_parse(&map, "total_values")?;

    let blob = &bytes[16 + meta_len..];
    if blob.len() != total_values * 8 {
        return Err(Error::Format(format!(
            "checkpoint payload has {} bytes, want {}",
            blob.len(),
            total_values * 8
        )));
    }

    let mut net = Network::new(spec, 0)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Vec<f64> {
        let vals = blob[at..at + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += n * 8;
        vals
    };
    let expected: usize = net.params.iter().map(|p| 2 * p.tensor.numel()).sum::<usize>()
        + net.bn_states.iter().map(|b| 2 * b.running_mean.len()).sum::<usize>();
    if expected != total_values {
        return Err(Error::Format(format!(
            "checkpoint holds {total_values} values but the spec needs {expected}"
        )));
    }
    for p in &mut net.params {
        let n = p.tensor.numel();
        p.tensor.values_mut().copy_from_slice(&take(n));
        p.momentum.values_mut().copy_from_slice(&take(n));
    }
    for b in &mut net.bn_states {
        let n = b.running_mean.len();
        b.running_mean.copy_from_slice(&take(n));
        b.running_var.copy_from_slice(&take(n));
    }
    Ok(Checkpoint { net, epoch, rng_state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, EncoderConfig, Split, SynthSpec};
    use crate::trainer::evaluate;

    fn toy_net(seed: u64) -> Network {
        let spec = NetworkSpec {
            layers: NetworkSpec::parse_arch("linear:8 tdbn spike linear:4 spike vote:2").unwrap(),
            neuron: NeuronConfig::default(),
            surrogate: SurrogateSpec::default(),
            steps: 3,
            input_dims: vec![2],
            bn_theta: 1.0,
            bn_eps: 1e-5,
            tsg_scale: 4.0,
            tsg_bias: 0.5,
        };
        Network::new(spec, seed).unwrap()
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("ckpt_{}_{name}", std::process::id()))
    }

    #[test]
    fn round_trip_preserves_evaluation_bitwise() {
        let mut net = toy_net(42);
        let path = tmp("roundtrip.ckpt");
        save(&path, &net, 7, 0xDEAD_BEEF).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.epoch, 7);
        assert_eq!(ck.rng_state, 0xDEAD_BEEF);

        let ds = synth_dataset(&SynthSpec { n: 60, seed: 5, ..SynthSpec::default() }, Split::Test).unwrap();
        let enc = EncoderConfig::default();
        let before = evaluate(&mut net, &ds, &enc, 16, 3).unwrap();
        let mut restored = ck.net;
        let after = evaluate(&mut restored, &ds, &enc, 16, 3).unwrap();
        assert_eq!(before.accuracy.to_bits(), after.accuracy.to_bits());
        assert_eq!(before.mean_loss.to_bits(), after.mean_loss.to_bits());
        fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let net = toy_net(1);
        let path = tmp("trunc.ckpt");
        save(&path, &net, 0, 1).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        fs::remove_file(&path).ok();
    }

    #[test]
    fn version_bump_is_named_in_error() {
        let net = toy_net(1);
        let path = tmp("version.ckpt");
        save(&path, &net, 0, 1).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("99") && msg.contains('1'), "{msg}");
        fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmp("magic.ckpt");
        fs::write(&path, b"NOTACKPT\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        fs::remove_file(&path).ok();
    }
}
