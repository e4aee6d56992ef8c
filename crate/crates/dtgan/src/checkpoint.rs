//! Single-file checkpoint container: versioned binary holding every named
//! parameter group (live, EMA, optimizer moments), the model config, the
//! global step, and the training rng seed. Writing is deterministic, so
//! save -> load -> save reproduces identical bytes.

use crate::config::FullConfig;
use crate::error::{DtganError, Result};
use crate::networks::Networks;
use crate::params::ParamSet;
use crate::training::{TrainConfig, TrainState};
use dtgan_autodiff::{Adam, Arr};
use ndarray::IxDyn;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DTGANCK1";

/// Serializable view of a full training state.
pub struct Checkpoint {
    pub config: FullConfig,
    pub step: u64,
    pub seed: u64,
    pub groups: BTreeMap<String, Arr>,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact_n(r: &mut impl Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let b = read_exact_n(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let b = read_exact_n(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

impl Checkpoint {
    /// Capture a training state. Optimizer moments go in as `opt.<net>.*`
    /// groups plus one `opt.<net>.t` step scalar each.
    pub fn from_state(state: &TrainState, config: &FullConfig) -> Checkpoint {
        let mut groups = BTreeMap::new();
        for (k, v) in &state.params.map {
            groups.insert(k.clone(), v.clone());
        }
        for (k, v) in &state.ema.map {
            groups.insert(format!("ema.{k}"), v.clone());
        }
        for (name, opt) in [
            ("gen", &state.opt_gen),
            ("disc", &state.opt_disc),
            ("enc", &state.opt_enc),
            ("map", &state.opt_map),
        ] {
            groups.insert(
                format!("opt.{name}.t"),
                Arr::from_elem(IxDyn(&[]), opt.t as f64),
            );
            for (k, v) in &opt.m {
                groups.insert(format!("opt.{name}.m.{k}"), v.clone());
            }
            for (k, v) in &opt.v {
                groups.insert(format!("opt.{name}.v.{k}"), v.clone());
            }
        }
        Checkpoint {
            config: config.clone(),
            step: state.step as u64,
            seed: state.cfg.seed,
            groups,
        }
    }

    /// Rebuild a training state. The model config comes from the checkpoint
    /// itself; `expect_config`, when given (resume), must match the stored
    /// model config exactly.
    pub fn into_state(self, expect_config: Option<&FullConfig>) -> Result<(TrainState, FullConfig)> {
        if let Some(expect) = expect_config {
            if expect.model != self.config.model {
                return Err(DtganError::Checkpoint(
                    "model config mismatch between checkpoint and provided config".into(),
                ));
            }
        }
        let cfg = self.config.clone();
        let train_cfg = TrainConfig {
            ..cfg.train.clone()
        };
        let nets = Networks::structure(&cfg.model);
        let mut params = ParamSet::new();
        let mut ema = ParamSet::new();
        let beta = (0.0, 0.99);
        let mut opts = BTreeMap::from([
            ("gen", Adam::new(train_cfg.lr_g, beta.0, beta.1)),
            ("disc", Adam::new(train_cfg.lr_d, beta.0, beta.1)),
            ("enc", Adam::new(train_cfg.lr_e, beta.0, beta.1)),
            ("map", Adam::new(train_cfg.lr_m, beta.0, beta.1)),
        ]);
        for (k, v) in self.groups {
            if let Some(rest) = k.strip_prefix("ema.") {
                ema.insert(rest, v);
            } else if let Some(rest) = k.strip_prefix("opt.") {
                let (net, tail) = rest
                    .split_once('.')
                    .ok_or_else(|| DtganError::Checkpoint(format!("bad group name opt.{rest}")))?;
                let opt = opts
                    .get_mut(net)
                    .ok_or_else(|| DtganError::Checkpoint(format!("unknown optimizer {net}")))?;
                if tail == "t" {
                    opt.t = v[[]] as u64;
                } else if let Some(p) = tail.strip_prefix("m.") {
                    opt.m.insert(p.to_string(), v);
                } else if let Some(p) = tail.strip_prefix("v.") {
                    opt.v.insert(p.to_string(), v);
                } else {
                    return Err(DtganError::Checkpoint(format!("bad group name opt.{rest}")));
                }
            } else {
                params.insert(k, v);
            }
        }
        // basic shape sanity: a freshly initialized net must agree on names
        let (_, reference) = Networks::init(&cfg.model);
        for name in reference.map.keys() {
            let got = params
                .map
                .get(name)
                .ok_or_else(|| DtganError::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != reference.map[name].shape() {
                return Err(DtganError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    reference.map[name].shape()
                )));
            }
        }
        let state = TrainState {
            nets,
            params,
            ema,
            opt_gen: opts.remove("gen").unwrap(),
            opt_disc: opts.remove("disc").unwrap(),
            opt_enc: opts.remove("enc").unwrap(),
            opt_map: opts.remove("map").unwrap(),
            step: self.step as usize,
            cfg: train_cfg,
        };
        Ok((state, cfg))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let cfg_text = self.config.to_text();
        write_u32(&mut buf, cfg_text.len() as u32).unwrap();
        buf.extend_from_slice(cfg_text.as_bytes());
        write_u64(&mut buf, self.step).unwrap();
        write_u64(&mut buf, self.seed).unwrap();
        write_u32(&mut buf, self.groups.len() as u32).unwrap();
        for (name, arr) in &self.groups {
            let nb = name.as_bytes();
            write_u32(&mut buf, nb.len() as u32).unwrap();
            buf.extend_from_slice(nb);
            let shape = arr.shape();
            write_u32(&mut buf, shape.len() as u32).unwrap();
            for &d in shape {
                write_u32(&mut buf, d as u32).unwrap();
            }
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf).map_err(|e| DtganError::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| DtganError::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data =
            std::fs::read(path).map_err(|e| DtganError::io(path.display().to_string(), e))?;
        let mut r = std::io::Cursor::new(&data);
        let magic = read_exact_n(&mut r, 8)
            .map_err(|_| DtganError::Checkpoint("file too short for header".into()))?;
        if magic != MAGIC {
            return Err(DtganError::Checkpoint(format!(
                "bad format tag {:?} (expected {:?})",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let parse = |r: &mut std::io::Cursor<&Vec<u8>>| -> std::io::Result<Checkpoint> {
            let cfg_len = read_u32(r)? as usize;
            let cfg_text = String::from_utf8(read_exact_n(r, cfg_len)?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            let config = FullConfig::parse(&cfg_text)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
            let step = read_u64(r)?;
            let seed = read_u64(r)?;
            let n_groups = read_u32(r)? as usize;
            let mut groups = BTreeMap::new();
            for _ in 0..n_groups {
                let name_len = read_u32(r)? as usize;
                let name = String::from_utf8(read_exact_n(r, name_len)?)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                let ndim = read_u32(r)? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(read_u32(r)? as usize);
                }
                let n: usize = shape.iter().product();
                let bytes = read_exact_n(r, n * 8)?;
                let vals: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let arr = Arr::from_shape_vec(IxDyn(&shape), vals)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                groups.insert(name, arr);
            }
            // trailing garbage means corruption
            if (r.position() as usize) != data.len() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "trailing bytes after last group",
                ));
            }
            Ok(Checkpoint {
                config,
                step,
                seed,
                groups,
            })
        };
        parse(&mut r).map_err(|e| DtganError::Checkpoint(format!("parse failed: {e}")))
    }
}

/// Load just the inference half (config + EMA parameter set).
pub fn load_snapshot(path: &Path) -> Result<(FullConfig, Networks, ParamSet)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.config.clone();
    let nets = Networks::structure(&cfg.model);
    let mut ema = ParamSet::new();
    let mut live_d = ParamSet::new();
    for (k, v) in ck.groups {
        if let Some(rest) = k.strip_prefix("ema.") {
            ema.insert(rest, v);
        } else if k.starts_with("d.") {
            live_d.insert(k, v);
        }
    }
    // discriminator has no EMA copy; carry the live one for eval probes
    for (k, v) in live_d.map {
        ema.insert(k, v);
    }
    if ema.map.is_empty() {
        return Err(DtganError::Checkpoint("checkpoint holds no parameters".into()));
    }
    Ok((cfg, nets, ema))
}

pub fn save_checkpoint(path: &Path, state: &TrainState, config: &FullConfig) -> Result<()> {
    Checkpoint::from_state(state, config).save(path)
}

pub fn load_checkpoint(path: &Path, expect: Option<&FullConfig>) -> Result<(TrainState, FullConfig)> {
    Checkpoint::load(path)?.into_state(expect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_procedural, ProceduralSpec, Split};
    use crate::domain::{validate_config, LabeledSample, ModelConfig};
    use crate::training::{train_step, RefPool};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> FullConfig {
        let mut cfg = FullConfig::default();
        cfg.model = validate_config(ModelConfig {
            image_size: 16,
            latent_dim: 8,
            style_dim: 16,
            n_domains: 3,
            n_products: 2,
            bottleneck_channels: 16,
            fg_channels: 4,
            bottleneck_downsampling: 4,
            seed: 5,
        })
        .unwrap();
        cfg.train.total_steps = 6;
        cfg.train.batch_size = 2;
        cfg.train.checkpoint_every = 3;
        cfg
    }

    fn tiny_data(cfg: &FullConfig) -> (Vec<LabeledSample>, RefPool) {
        let spec = ProceduralSpec {
            image_size: cfg.model.image_size,
            seed: 3,
            counts: vec![[3, 3, 3]; cfg.model.n_products],
            textures: crate::datagen::default_textures(cfg.model.n_products),
            ..Default::default()
        };
        let all: Vec<LabeledSample> = generate_procedural(&spec)
            .unwrap()
            .into_iter()
            .filter(|(_, s)| *s == Split::Train)
            .map(|(s, _)| s)
            .collect();
        let refs = RefPool::from_samples(&all, cfg.model.n_domains);
        (all, refs)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny_config();
        let (batch, refs) = tiny_data(&cfg);
        let mut state = TrainState::new(&cfg.model, cfg.train.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_step(&mut state, &batch[..2], &refs, &mut rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &state, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&p1, None).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.step, state.step);
        save_checkpoint(&p2, &loaded, &loaded_cfg).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let cfg = tiny_config();
        let (batch, refs) = tiny_data(&cfg);
        let batch = &batch[..2];

        // uninterrupted: 4 steps; rng derived per step from the seed so a
        // resumed run can rebuild the same stream
        let mut full = TrainState::new(&cfg.model, cfg.train.clone()).unwrap();
        let mut reports = Vec::new();
        for step in 0..4 {
            let mut rng = crate::rng::rng_from(cfg.train.seed, &[crate::rng::tag::BATCH, step]);
            reports.push(train_step(&mut full, batch, &refs, &mut rng).unwrap());
        }

        // interrupted at step 2
        let mut half = TrainState::new(&cfg.model, cfg.train.clone()).unwrap();
        for step in 0..2 {
            let mut rng = crate::rng::rng_from(cfg.train.seed, &[crate::rng::tag::BATCH, step]);
            train_step(&mut half, batch, &refs, &mut rng).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.ckpt");
        save_checkpoint(&p, &half, &cfg).unwrap();
        let (mut resumed, _) = load_checkpoint(&p, Some(&cfg)).unwrap();
        assert_eq!(resumed.step, 2);
        for step in 2..4 {
            let mut rng = crate::rng::rng_from(cfg.train.seed, &[crate::rng::tag::BATCH, step as u64]);
            let r = train_step(&mut resumed, batch, &refs, &mut rng).unwrap();
            assert_eq!(r, reports[step], "report mismatch at resumed step {step}");
        }
        for (k, v) in &full.params.map {
            assert_eq!(v, &resumed.params.map[k], "parameter {k} diverged after resume");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        let err = match Checkpoint::load(&p) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected header error"),
        };
        assert!(err.contains("bad format tag") || err.contains("too short"), "{err}");

        // valid header, truncated body
        let cfg = tiny_config();
        let state = TrainState::new(&cfg.model, cfg.train.clone()).unwrap();
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&good, &state, &cfg).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&cut).is_err());

        // trailing garbage
        let mut extended = bytes.clone();
        extended.extend_from_slice(b"zzz");
        let ext = dir.path().join("ext.ckpt");
        std::fs::write(&ext, &extended).unwrap();
        assert!(Checkpoint::load(&ext).is_err());
    }

    #[test]
    fn config_mismatch_on_resume_is_an_error() {
        let cfg = tiny_config();
        let state = TrainState::new(&cfg.model, cfg.train.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &state, &cfg).unwrap();

        let mut other = cfg.clone();
        other.model.fg_channels = 2;
        let err = match load_checkpoint(&p, Some(&other)) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected config mismatch error"),
        };
        assert!(err.contains("config mismatch"), "{err}");
    }
}
