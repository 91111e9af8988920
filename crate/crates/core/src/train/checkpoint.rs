//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TCUN"  u32 version
//! u64 length, UTF-8 model config JSON
//! u32 count, then per tensor: u16 name length, UTF-8 name, TCT1 tensor
//! sections, each: 4-byte tag, u64 payload length, payload
//!   "OPTM"  f64 lr, f64 momentum, f64 weight decay, u8 exemption flag,
//!           u32 count, TCT1 velocity tensors in parameter order (optional)
//!   "META"  u64 seed, u64 epoch
//!   "TEND"  empty; must be last
//! ```
//!
//! Parameters are stored under their names; batch-norm running statistics
//! are stored as `<layer>.running_mean` and `<layer>.running_var`.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use crate::model::{Model, ModelConfig};
use crate::tensor::{read_exact, read_u32};
use crate::{Error, Result, Scalar, Tensor};

use super::OptimState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCUN";
pub const CHECKPOINT_VERSION: u32 = 1;

const OPTIM_TAG: &[u8; 4] = b"OPTM";
const META_TAG: &[u8; 4] = b"META";
const END_TAG: &[u8; 4] = b"TEND";

/// Everything a checkpoint file holds.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub optim: Option<OptimState<T>>,
    pub seed: u64,
    pub epoch: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt {
        what: "checkpoint",
        msg: msg.into(),
    }
}

/// Re-labels truncation and parse errors of nested readers.
fn in_checkpoint(e: Error) -> Error {
    match e {
        Error::Corrupt { what, msg } if what != "checkpoint" => corrupt(format!("{what}: {msg}")),
        e => e,
    }
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Serializes a model, optionally with its optimizer state.
pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>, optim: Option<&OptimState<T>>, seed: u64, epoch: u64) -> Vec<u8> {
    encode(model.config(), &named_tensors(model), optim, seed, epoch)
}

/// Parameters then running statistics, under their stored names.
fn named_tensors<T: Scalar>(model: &Model<T>) -> Vec<(String, Tensor<T>)> {
    let mut named: Vec<(String, Tensor<T>)> =
        model.params().iter().map(|p| (p.name.clone(), (*p.value).clone())).collect();
    for (name, stats) in model.buffers().iter() {
        let c = stats.channels();
        named.push((format!("{name}.running_mean"), Tensor::new([c], stats.running_mean.clone()).expect("channel vector")));
        named.push((format!("{name}.running_var"), Tensor::new([c], stats.running_var.clone()).expect("channel vector")));
    }
    named
}

fn encode<T: Scalar>(
    config: &ModelConfig,
    named: &[(String, Tensor<T>)],
    optim: Option<&OptimState<T>>,
    seed: u64,
    epoch: u64,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = config.to_json();
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.write_binary(&mut out).expect("writing to a Vec cannot fail");
    }

    if let Some(st) = optim {
        let mut p = Vec::new();
        for x in [st.lr, st.momentum, st.weight_decay] {
            p.extend_from_slice(&x.to_le_bytes());
        }
        p.push(st.exempt_norm_and_position as u8);
        p.extend_from_slice(&(st.velocity().len() as u32).to_le_bytes());
        for v in st.velocity() {
            v.write_binary(&mut p).expect("writing to a Vec cannot fail");
        }
        put_section(&mut out, OPTIM_TAG, &p);
    }
    let mut meta = seed.to_le_bytes().to_vec();
    meta.extend_from_slice(&epoch.to_le_bytes());
    put_section(&mut out, META_TAG, &meta);
    put_section(&mut out, END_TAG, &[]);
    out
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    optim: Option<&OptimState<T>>,
    seed: u64,
    epoch: u64,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, optim, seed, epoch)).map_err(Error::io(path))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "checkpoint")?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    read_u64(r).map(f64::from_bits)
}

fn read_string(r: &mut &[u8], len: usize) -> Result<String> {
    if r.len() < len {
        return Err(corrupt("truncated"));
    }
    let (head, tail) = r.split_at(len);
    *r = tail;
    String::from_utf8(head.to_vec()).map_err(|_| corrupt("name or config is not UTF-8"))
}

/// Parses a checkpoint. Nothing is returned unless the whole file is
/// consistent.
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let r = &mut &bytes[..];
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "checkpoint")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "checkpoint")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = read_u64(r)? as usize;
    let config = ModelConfig::from_json(&read_string(r, len)?).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut model = Model::<T>::new(config, 0).map_err(|e| corrupt(format!("config: {e}")))?;

    let count = read_u32(r, "checkpoint")? as usize;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let mut nb = [0u8; 2];
        read_exact(r, &mut nb, "checkpoint")?;
        let name = read_string(r, u16::from_le_bytes(nb) as usize)?;
        let t = Tensor::<T>::read_binary(r).map_err(in_checkpoint)?;
        if !seen.insert(name.clone()) {
            return Err(corrupt(format!("`{name}` stored twice")));
        }
        if model.params().index_of(&name).is_some() {
            model.params_mut().set(&name, t)?;
            continue;
        }
        let (layer, field) = name
            .rsplit_once('.')
            .ok_or_else(|| corrupt(format!("unknown tensor `{name}`")))?;
        let stats = model
            .buffers_mut()
            .get_mut(layer)
            .ok_or_else(|| corrupt(format!("unknown tensor `{name}`")))?;
        let target = match field {
            "running_mean" => &mut stats.running_mean,
            "running_var" => &mut stats.running_var,
            _ => return Err(corrupt(format!("unknown tensor `{name}`"))),
        };
        if t.shape() != [target.len()] {
            return Err(Error::ConfigMismatch(format!(
                "`{name}` has shape {:?}, expected [{}]",
                t.shape(),
                target.len()
            )));
        }
        *target = t.into_data();
    }
    for p in model.params().iter() {
        if !seen.contains(&p.name) {
            return Err(Error::MissingParam(p.name.clone()));
        }
    }
    for (layer, _) in model.buffers().iter() {
        for field in ["running_mean", "running_var"] {
            let name = format!("{layer}.{field}");
            if !seen.contains(&name) {
                return Err(Error::MissingParam(name));
            }
        }
    }

    let (mut optim, mut meta) = (None, None);
    loop {
        let mut tag = [0u8; 4];
        read_exact(r, &mut tag, "checkpoint")?;
        let len = read_u64(r)? as usize;
        if r.len() < len {
            return Err(corrupt("truncated"));
        }
        let (payload, rest) = r.split_at(len);
        *r = rest;
        let p = &mut &payload[..];
        match &tag {
            OPTIM_TAG => {
                let (lr, momentum, wd) = (read_f64(p)?, read_f64(p)?, read_f64(p)?);
                let mut flag = [0u8];
                read_exact(p, &mut flag, "checkpoint")?;
                let n = read_u32(p, "checkpoint")? as usize;
                let velocity = (0..n)
                    .map(|_| Tensor::<T>::read_binary(p).map_err(in_checkpoint))
                    .collect::<Result<Vec<_>>>()?;
                let mut st = OptimState::new(model.params(), lr, momentum, wd).map_err(|e| corrupt(format!("optimizer: {e}")))?;
                st.exempt_norm_and_position = flag[0] != 0;
                st.set_velocity(model.params(), velocity)?;
                optim = Some(st);
            }
            META_TAG => meta = Some((read_u64(p)?, read_u64(p)?)),
            END_TAG => break,
            _ => return Err(corrupt(format!("unknown section {:?}", String::from_utf8_lossy(&tag)))),
        }
        if !p.is_empty() {
            return Err(corrupt(format!("{} unread bytes in a section", p.len())));
        }
    }
    if !r.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", r.len())));
    }
    let (seed, epoch) = meta.ok_or_else(|| corrupt("missing META section"))?;
    Ok(Checkpoint {
        model,
        optim,
        seed,
        epoch,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Corrupt { what, msg } => Error::Corrupt {
            what,
            msg: format!("{}: {msg}", path.display()),
        },
        e => e,
    })
}

/// Loads a checkpoint that must have been produced with `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint::<T>(path)?;
    if ck.model.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "{} was trained with a different model config:\n  checkpoint: {}\n  expected:   {}",
            path.display(),
            ck.model.config().to_json().replace('\n', " "),
            expected.to_json().replace('\n', " ")
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            levels: 2,
            base_channels: 4,
            layers: 1,
            heads: 2,
            d_model: 8,
            d_mlp: 8,
            skips: 2,
            num_classes: 3,
            ..Default::default()
        }
    }

    /// A model whose running statistics differ from their initial values.
    fn trained() -> Model<f32> {
        let mut m = Model::<f32>::new(config(), 3).unwrap();
        let x = Tensor::randn([2, 1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let g = Graph::new();
        m.forward_train(&g, g.constant(x)).unwrap();
        m
    }

    fn probe() -> Tensor<f32> {
        Tensor::randn([2, 1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(2))
    }

    fn logits(m: &Model<f32>) -> Tensor<f32> {
        let g = Graph::new();
        (*m.forward(&g, g.constant(probe())).unwrap().value()).clone()
    }

    #[test]
    fn round_trip_reproduces_forward_bitwise() {
        let m = trained();
        let mut st = OptimState::new(m.params(), 0.01, 0.9, 1e-4).unwrap();
        st.set_velocity(
            m.params(),
            m.params().iter().map(|p| Tensor::full(p.value.shape(), 0.5)).collect(),
        )
        .unwrap();
        let ck = parse_checkpoint::<f32>(&checkpoint_bytes(&m, Some(&st), 7, 12)).unwrap();
        assert_eq!(logits(&ck.model), logits(&m));
        assert_eq!(ck.model.buffers(), m.buffers());
        assert_eq!(ck.optim.as_ref(), Some(&st));
        assert_eq!((ck.seed, ck.epoch), (7, 12));
        for (a, b) in ck.model.params().iter().zip(m.params().iter()) {
            assert_eq!((&a.name, &a.value), (&b.name, &b.value));
        }
    }

    #[test]
    fn optimizer_section_is_optional() {
        let ck = parse_checkpoint::<f32>(&checkpoint_bytes(&trained(), None, 0, 0)).unwrap();
        assert!(ck.optim.is_none());
    }

    #[test]
    fn every_truncation_is_a_corrupt_checkpoint() {
        let bytes = checkpoint_bytes(&trained(), None, 0, 1);
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            let err = parse_checkpoint::<f32>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version_are_reported() {
        let mut bytes = checkpoint_bytes(&trained(), None, 0, 1);
        bytes[4] = 9;
        assert!(matches!(
            parse_checkpoint::<f32>(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(parse_checkpoint::<f32>(&bytes), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn a_missing_parameter_is_named() {
        let m = trained();
        let mut named = named_tensors(&m);
        let (gone, _) = named.remove(5);
        let err = parse_checkpoint::<f32>(&encode(m.config(), &named, None, 0, 0)).unwrap_err();
        assert!(matches!(&err, Error::MissingParam(n) if *n == gone), "{err}");
        let mut named = named_tensors(&m);
        let (gone, _) = named.pop().unwrap();
        let err = parse_checkpoint::<f32>(&encode(m.config(), &named, None, 0, 0)).unwrap_err();
        assert!(matches!(&err, Error::MissingParam(n) if *n == gone), "{err}");
    }

    #[test]
    fn unknown_and_duplicate_tensors_are_rejected() {
        let m = trained();
        let mut named = named_tensors(&m);
        named.push(named[0].clone());
        assert!(parse_checkpoint::<f32>(&encode(m.config(), &named, None, 0, 0)).is_err());
        let mut named = named_tensors(&m);
        named.push(("decoder.9.bogus".into(), Tensor::zeros([1])));
        assert!(parse_checkpoint::<f32>(&encode(m.config(), &named, None, 0, 0)).is_err());
    }

    #[test]
    fn a_checkpoint_of_another_config_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &trained(), None, 0, 0).unwrap();
        let other = ModelConfig {
            skips: 1,
            ..config()
        };
        let err = load_checkpoint_for::<f32>(&path, &other).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)), "{err}");
        assert!(load_checkpoint_for::<f32>(&path, &config()).is_ok());
    }
}
