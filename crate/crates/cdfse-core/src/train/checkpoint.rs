//! Checkpoint container: one file holds the full config, the step counter,
//! every parameter and buffer, and the optimizer moments.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CKPT" | u32 version | u64 step | u32 config_len | config key=value text |
//! u32 tensor_count | tensor_count × entry
//! entry: u32 name_len | name bytes | u32 rank | rank × u32 dims | f64 data
//! ```
//!
//! Tensors are written in a canonical order — `param.*` in registration
//! order, then `buffer.*`, then `adam.m.*` / `adam.v.*` aligned with the
//! parameter list — so saving a freshly loaded checkpoint reproduces the
//! file byte for byte.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_config, render_config, ConditioningMode, Config};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nnprim::optim::{Adam, AdamConfig};
use crate::nnprim::{ParamStore, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

/// In-memory checkpoint: the file contents, not yet bound to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    /// Named tensors in canonical order (see module docs).
    pub tensors: Vec<(String, Tensor)>,
}

/// A checkpoint rebuilt into runnable state.
pub struct Restored {
    pub config: Config,
    pub step: u64,
    pub store: ParamStore,
    pub model: Model,
    pub adam: Adam,
}

/// The optimizer settings embedded in a run config.
pub fn adam_config(cfg: &Config) -> AdamConfig {
    AdamConfig {
        base_scale: cfg.train.base_scale,
        warmup_steps: cfg.train.warmup_steps,
        ..AdamConfig::default()
    }
}

/// Capture the current training state as a checkpoint.
pub fn snapshot(config: &Config, step: u64, store: &ParamStore, adam: &Adam) -> Checkpoint {
    let mut tensors =
        Vec::with_capacity(2 * store.n_params() + store.buffers().len() + store.n_params());
    for p in store.params() {
        tensors.push((format!("param.{}", p.name), p.value.clone()));
    }
    for b in store.buffers() {
        tensors.push((format!("buffer.{}", b.name), b.value.clone()));
    }
    let (m, v) = adam.moments();
    for (p, t) in store.params().iter().zip(m) {
        tensors.push((format!("adam.m.{}", p.name), t.clone()));
    }
    for (p, t) in store.params().iter().zip(v) {
        tensors.push((format!("adam.v.{}", p.name), t.clone()));
    }
    Checkpoint { config: config.clone(), step, tensors }
}

impl Checkpoint {
    /// Rebuild model, parameters, buffers, and optimizer state. Every tensor
    /// in the file must land somewhere and every slot must be filled.
    pub fn restore(&self) -> Result<Restored> {
        let config = self.config.clone();
        config.validate()?;
        let mut store = ParamStore::new();
        // Construction RNG only shapes the initializers, which are then
        // overwritten wholesale; any seed would do, the run seed keeps it tied
        // to the config.
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = Model::new(&mut store, &config.model, &mut rng)?;

        let mut by_name: HashMap<&str, &Tensor> = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if by_name.insert(name.as_str(), t).is_some() {
                return Err(Error::InvalidInput(format!("checkpoint lists `{name}` twice")));
            }
        }
        let mut consumed = 0usize;
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = by_name.get(name.as_str()).ok_or_else(|| {
                Error::InvalidInput(format!("checkpoint is missing tensor `{name}`"))
            })?;
            if t.shape() != shape {
                return Err(Error::InvalidInput(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            consumed += 1;
            Ok((*t).clone())
        };

        let param_names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
        for name in &param_names {
            let id = store.lookup(name).expect("store name");
            let t = take(format!("param.{name}"), store.param(id).value.shape())?;
            store.param_mut(id).value = t;
        }
        let buffer_names: Vec<String> = store.buffers().iter().map(|b| b.name.clone()).collect();
        for name in &buffer_names {
            let id = store.lookup_buffer(name).expect("store buffer name");
            let t = take(format!("buffer.{name}"), store.buffer(id).shape())?;
            *store.buffer_mut(id) = t;
        }
        let mut moments_m = Vec::with_capacity(param_names.len());
        let mut moments_v = Vec::with_capacity(param_names.len());
        for name in &param_names {
            let shape = store.param(store.lookup(name).unwrap()).value.shape().to_vec();
            moments_m.push(take(format!("adam.m.{name}"), &shape)?);
            moments_v.push(take(format!("adam.v.{name}"), &shape)?);
        }
        if consumed != self.tensors.len() {
            let extra = self
                .tensors
                .iter()
                .map(|(n, _)| n.as_str())
                .find(|n| {
                    let bare = n.splitn(3, '.').nth(2);
                    match n.split('.').next() {
                        Some("param") => store.lookup(&n["param.".len()..]).is_none(),
                        Some("buffer") => store.lookup_buffer(&n["buffer.".len()..]).is_none(),
                        Some("adam") => bare.map_or(true, |b| store.lookup(b).is_none()),
                        _ => true,
                    }
                })
                .unwrap_or("<unknown>");
            return Err(Error::InvalidInput(format!(
                "checkpoint carries tensors the model has no slot for (e.g. `{extra}`)"
            )));
        }
        let adam = Adam::restore(adam_config(&config), moments_m, moments_v, self.step, &store)?;
        Ok(Restored { config, step: self.step, store, model, adam })
    }
}

/// Explain a config/checkpoint disagreement, with a dedicated message for the
/// conditioning-mode case since that is the likeliest operator mistake.
pub fn check_config_compatible(expected: &Config, ckpt: &Checkpoint) -> Result<()> {
    let got = ckpt.config.model.mode;
    let want = expected.model.mode;
    if got != want {
        return Err(Error::InvalidInput(format!(
            "mode mismatch: checkpoint was trained in {got} mode but {want} mode was requested"
        )));
    }
    if ckpt.config != *expected {
        return Err(Error::InvalidInput(
            "checkpoint config differs from the requested config".into(),
        ));
    }
    Ok(())
}

/// Guard for commands that only make sense for one conditioning mode.
pub fn require_mode(ckpt: &Checkpoint, mode: ConditioningMode) -> Result<()> {
    if ckpt.config.model.mode != mode {
        return Err(Error::InvalidInput(format!(
            "mode mismatch: checkpoint was trained in {} mode but this operation needs {mode}",
            ckpt.config.model.mode
        )));
    }
    Ok(())
}

fn put_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let werr = |e| Error::io(format!("writing checkpoint {}", path.display()), e);
    let file = std::fs::File::create(path).map_err(werr)?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC).map_err(werr)?;
    put_u32(&mut w, CKPT_VERSION, path)?;
    w.write_all(&ckpt.step.to_le_bytes()).map_err(werr)?;
    let config_text = render_config(&ckpt.config);
    put_u32(&mut w, config_text.len() as u32, path)?;
    w.write_all(config_text.as_bytes()).map_err(werr)?;
    put_u32(&mut w, ckpt.tensors.len() as u32, path)?;
    for (name, t) in &ckpt.tensors {
        put_u32(&mut w, name.len() as u32, path)?;
        w.write_all(name.as_bytes()).map_err(werr)?;
        put_u32(&mut w, t.shape().len() as u32, path)?;
        for &d in t.shape() {
            put_u32(&mut w, d as u32, path)?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

struct CkptReader<'p, R> {
    r: R,
    path: &'p Path,
}

impl<R: Read> CkptReader<'_, R> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path.display().to_string(), 0, msg)
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| self.fail(format!("truncated while reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
    let mut r = CkptReader { r: BufReader::new(file), path };
    let magic = r.bytes(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(r.fail("not a checkpoint file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}, expected {CKPT_VERSION}")));
    }
    let step = r.u64("step")?;
    let config_len = r.u32("config length")? as usize;
    let config_text = String::from_utf8(r.bytes(config_len, "config")?)
        .map_err(|_| r.fail("embedded config is not UTF-8"))?;
    let config = parse_config(&config_text, &format!("{} (embedded config)", path.display()))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.bytes(name_len, "tensor name")?)
            .map_err(|_| r.fail(format!("tensor {i} has a non-UTF-8 name")))?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 8, &format!("tensor `{name}` data"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&shape, data)?;
        tensors.push((name, t));
    }
    let mut rest = [0u8; 1];
    match r.r.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => return Err(r.fail("trailing bytes after the tensor table")),
        Err(e) => return Err(Error::io(format!("reading checkpoint {}", path.display()), e)),
    }
    Ok(Checkpoint { config, step, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small_state() -> (Config, ParamStore, Model, Adam) {
        let config = Config {
            model: ModelConfig {
                n_phonemes: 5,
                n_speakers: 3,
                n_mels: 6,
                prenet_channels: 4,
                content_blocks: 1,
                content_dim: 8,
                downsample_channels: [4, 4, 4, 4],
                out_dim: 10,
                attention_dim: 4,
                hidden: 8,
                encoder_blocks: 1,
                decoder_blocks: 1,
                ffn_mult: 2,
                ffn_kernel1: 3,
                ..ModelConfig::default()
            },
            train: Default::default(),
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = Model::new(&mut store, &config.model, &mut rng).unwrap();
        let adam = Adam::new(adam_config(&config), &store);
        (config, store, model, adam)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (config, store, _model, adam) = small_state();
        let ckpt = snapshot(&config, 17, &store, &adam);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, 17);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn restore_rebuilds_identical_state() {
        let (config, mut store, _model, adam) = small_state();
        // Make the state distinguishable from a fresh init.
        let id = store.lookup("backbone.mel_out.bias").unwrap();
        store.param_mut(id).value.fill(0.25);
        let buf = store.lookup_buffer("refenc.prenet0.bn.running_mean").unwrap();
        store.buffer_mut(buf).fill(-1.5);
        let ckpt = snapshot(&config, 99, &store, &adam);
        let restored = ckpt.restore().unwrap();
        assert_eq!(restored.step, 99);
        assert_eq!(
            restored.store.param(restored.store.lookup("backbone.mel_out.bias").unwrap()).value.data(),
            store.param(id).value.data()
        );
        assert_eq!(restored.store.buffer(buf).data(), store.buffer(buf).data());
        // The round trip through restore() preserves the exact bytes too.
        let again = snapshot(&restored.config, restored.step, &restored.store, &restored.adam);
        assert_eq!(again, ckpt);
    }

    #[test]
    fn missing_and_extra_tensors_are_named() {
        let (config, store, _model, adam) = small_state();
        let mut ckpt = snapshot(&config, 1, &store, &adam);
        let removed = ckpt.tensors.remove(3);
        let err = ckpt.restore().err().expect("missing tensor must fail");
        assert!(err.to_string().contains(&removed.0), "{err}");

        let mut ckpt = snapshot(&config, 1, &store, &adam);
        ckpt.tensors.push(("param.mystery.weight".into(), Tensor::zeros(&[1, 1])));
        let err = ckpt.restore().err().expect("extra tensor must fail");
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn corrupt_headers_are_format_errors() {
        let (config, store, _model, adam) = small_state();
        let ckpt = snapshot(&config, 1, &store, &adam);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &ckpt).unwrap();

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));

        save_checkpoint(&p, &ckpt).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9; // version
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        save_checkpoint(&p, &ckpt).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn mode_mismatch_is_called_out() {
        let (mut config, store, _model, adam) = small_state();
        config.model.mode = ConditioningMode::Cls;
        let ckpt = snapshot(&config, 1, &store, &adam);
        let mut want = config.clone();
        want.model.mode = ConditioningMode::Cdfse;
        let err = check_config_compatible(&want, &ckpt).unwrap_err();
        assert!(err.to_string().contains("mode mismatch"), "{err}");
        let err = require_mode(&ckpt, ConditioningMode::Cdfse).unwrap_err();
        assert!(err.to_string().contains("cls"), "{err}");
        assert!(check_config_compatible(&config, &ckpt).is_ok());

        let mut other = config.clone();
        other.train.max_steps += 1;
        let err = check_config_compatible(&other, &ckpt).unwrap_err();
        assert!(err.to_string().contains("config differs"), "{err}");
    }
}
