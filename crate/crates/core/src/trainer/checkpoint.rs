//! CCNT checkpoint files.
//!
//! Layout (little-endian): magic `CCNT`, u32 version, u64 tensor count, then
//! per tensor a u16 name length, UTF-8 name, u8 rank, `rank` u64 dims and
//! the f64 data; finally the seed-state block: u64 word count followed by
//! that many u64 words `[seed, epoch, step, global_step, optimizer steps...]`.

use std::fs;
use std::path::Path;

use super::{TrainConfig, TrainState};
use crate::autodiff::{OptimizerState, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"CCNT";
pub const CKPT_VERSION: u32 = 1;

fn param_groups(state: &TrainState) -> Vec<(String, &ParamStore)> {
    let mut g = vec![
        ("omega".to_string(), &state.encoders.omega),
        ("theta".to_string(), &state.encoders.theta),
        ("cfnet".to_string(), &state.cfnet.params),
    ];
    if let Some(c) = &state.critic {
        g.push(("critic".into(), &c.params));
    }
    for (k, d) in state.dual.iter().enumerate() {
        g.push((format!("dual{k}"), &d.params));
    }
    g
}

fn param_groups_mut(state: &mut TrainState) -> Vec<(String, &mut ParamStore)> {
    let mut g = vec![
        ("omega".to_string(), &mut state.encoders.omega),
        ("theta".to_string(), &mut state.encoders.theta),
        ("cfnet".to_string(), &mut state.cfnet.params),
    ];
    if let Some(c) = &mut state.critic {
        g.push(("critic".into(), &mut c.params));
    }
    for (k, d) in state.dual.iter_mut().enumerate() {
        g.push((format!("dual{k}"), &mut d.params));
    }
    g
}

fn optimizers(state: &TrainState) -> Vec<(String, &OptimizerState, &ParamStore)> {
    let mut o = vec![
        ("omega".to_string(), &state.opt_omega, &state.encoders.omega),
        ("theta".to_string(), &state.opt_theta, &state.encoders.theta),
        ("cfnet".to_string(), &state.opt_cf, &state.cfnet.params),
    ];
    if let (Some(op), Some(c)) = (&state.opt_critic, &state.critic) {
        o.push(("critic".into(), op, &c.params));
    }
    for (k, (op, d)) in state.opt_dual.iter().zip(&state.dual).enumerate() {
        o.push((format!("dual{k}"), op, &d.params));
    }
    o
}

fn optimizers_mut(state: &mut TrainState) -> Vec<(String, &mut OptimizerState)> {
    let mut o = vec![
        ("omega".to_string(), &mut state.opt_omega),
        ("theta".to_string(), &mut state.opt_theta),
        ("cfnet".to_string(), &mut state.opt_cf),
    ];
    if let Some(op) = &mut state.opt_critic {
        o.push(("critic".into(), op));
    }
    for (k, op) in state.opt_dual.iter_mut().enumerate() {
        o.push((format!("dual{k}"), op));
    }
    o
}

fn named_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let json = serde_json::to_string(&state.config).expect("config serializes");
    out.push((
        "meta/config_json".to_string(),
        Tensor::from_vec(json.bytes().map(f64::from).collect()),
    ));
    out.push((
        "meta/input_dims".to_string(),
        Tensor::from_vec(
            state
                .encoders
                .input_dims
                .iter()
                .map(|&d| d as f64)
                .collect(),
        ),
    ));
    let samples = state.bank.as_ref().map_or(0, |b| b.len());
    out.push((
        "meta/samples".to_string(),
        Tensor::from_vec(vec![samples as f64]),
    ));
    for (g, store) in param_groups(state) {
        for (name, t) in store.iter() {
            out.push((
                format!("{g}/{name}"),
                Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape"),
            ));
        }
    }
    if let Some(b) = &state.bank {
        for (m, v) in b.views.iter().enumerate() {
            out.push((format!("bank/view{m}"), v.clone()));
        }
        out.push(("bank/cf".to_string(), b.cf.clone()));
    }
    for (g, op, store) in optimizers(state) {
        for (i, (name, t)) in store.iter().enumerate() {
            if let (Some(m), Some(v)) = (op.first_moment.get(i), op.second_moment.get(i)) {
                out.push((
                    format!("opt/{g}/m/{name}"),
                    Tensor::new(t.shape().to_vec(), m.clone()).expect("shape"),
                ));
                out.push((
                    format!("opt/{g}/v/{name}"),
                    Tensor::new(t.shape().to_vec(), v.clone()).expect("shape"),
                ));
            }
        }
    }
    out
}

fn seed_words(state: &TrainState) -> Vec<u64> {
    let mut w = vec![
        state.config.seed,
        state.epoch,
        state.step,
        state.global_step,
    ];
    w.extend(optimizers(state).iter().map(|(_, op, _)| op.step));
    w
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let tensors = named_tensors(state);
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in &tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::invalid(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let words = seed_words(state);
    out.extend_from_slice(&(words.len() as u64).to_le_bytes());
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
}

pub type NamedTensors = Vec<(String, Tensor)>;

/// Raw contents of a checkpoint: named tensors in file order and seed words.
pub fn decode_raw(bytes: &[u8]) -> Result<(NamedTensors, Vec<u64>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected CCNT".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u64("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len =
            u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail("shape overflow"))?;
        let nbytes = numel
            .checked_mul(8)
            .ok_or_else(|| r.fail("shape overflow"))?;
        let raw = r.take(nbytes, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let words = r.u64("seed-state length")?;
    let mut seed = Vec::new();
    for _ in 0..words {
        seed.push(r.u64("seed state")?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after seed state"));
    }
    Ok((tensors, seed))
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        offset: 0,
        msg: msg.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let (tensors, seed) = decode_raw(bytes)?;
    let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |name: &str| {
        map.remove(name)
            .ok_or_else(|| fmt_err(format!("missing tensor {name}")))
    };
    let json: Vec<u8> = take("meta/config_json")?
        .data()
        .iter()
        .map(|&v| v as u8)
        .collect();
    let config = TrainConfig::from_json(
        std::str::from_utf8(&json).map_err(|_| fmt_err("config is not UTF-8"))?,
    )?;
    let dims: Vec<usize> = take("meta/input_dims")?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();
    let samples = take("meta/samples")?.item() as usize;
    let mut state = TrainState::new(config, &dims, samples)?;

    for (g, store) in param_groups_mut(&mut state) {
        for i in 0..store.len() {
            let name = format!("{g}/{}", store.name(i));
            let t = take(&name)?;
            if t.shape() != store.get(i).shape() {
                return Err(fmt_err(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(i).shape()
                )));
            }
            store.replace_data(i, t.into_data())?;
        }
    }
    if let Some(b) = &mut state.bank {
        for m in 0..b.views.len() {
            let t = take(&format!("bank/view{m}"))?;
            if t.shape() != b.views[m].shape() {
                return Err(fmt_err(format!("bank/view{m}: shape {:?}", t.shape())));
            }
            b.views[m] = t;
        }
        let t = take("bank/cf")?;
        if t.shape() != b.cf.shape() {
            return Err(fmt_err(format!("bank/cf: shape {:?}", t.shape())));
        }
        b.cf = t;
    }
    let names: Vec<Vec<String>> = optimizers(&state)
        .iter()
        .map(|(_, _, s)| s.names().to_vec())
        .collect();
    for ((g, op), pnames) in optimizers_mut(&mut state).into_iter().zip(names) {
        if op.first_moment.is_empty() {
            continue;
        }
        for (i, pn) in pnames.iter().enumerate() {
            for (which, buf) in [
                ("m", &mut op.first_moment[i]),
                ("v", &mut op.second_moment[i]),
            ] {
                let name = format!("opt/{g}/{which}/{pn}");
                let t = take(&name)?;
                if t.numel() != buf.len() {
                    return Err(fmt_err(format!(
                        "{name}: {} values, expected {}",
                        t.numel(),
                        buf.len()
                    )));
                }
                *buf = t.into_data();
            }
        }
    }
    if let Some(extra) = map.keys().next() {
        return Err(fmt_err(format!("unexpected tensor {extra}")));
    }

    let nopt = optimizers(&state).len();
    if seed.len() != 4 + nopt {
        return Err(fmt_err(format!(
            "seed state has {} words, expected {}",
            seed.len(),
            4 + nopt
        )));
    }
    if seed[0] != state.config.seed {
        return Err(fmt_err("seed state disagrees with the stored config"));
    }
    state.epoch = seed[1];
    state.step = seed[2];
    state.global_step = seed[3];
    for ((_, op), &s) in optimizers_mut(&mut state).into_iter().zip(&seed[4..]) {
        op.step = s;
    }
    Ok(state)
}

pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
