//! Versioned checkpoints: named parameter blobs plus optimizer state,
//! stamped with the config hash. Writes go through a temp file and a
//! rename so a crash never leaves a truncated checkpoint behind, and
//! save -> load -> save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use graincode::{Adam, EmbedToggles, Error, ParamSet, Prior, Result, Stage1, Tensor};

use crate::config::RunConfig;

const MAGIC: &[u8; 4] = b"DQCK";
const VERSION: u16 = 1;

pub const STAGE_VAE: u8 = 1;
pub const STAGE_PRIOR: u8 = 2;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Data(format!("{}: truncated checkpoint", self.path)));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: {} trailing bytes",
                self.path,
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn toggle_bits(t: EmbedToggles) -> u8 {
    (t.content as u8)
        | (t.position as u8) << 1
        | (t.grain as u8) << 2
        | (t.absolute as u8) << 3
        | (t.shared_position as u8) << 4
}

fn toggles_from_bits(b: u8) -> EmbedToggles {
    EmbedToggles {
        content: b & 1 != 0,
        position: b & 2 != 0,
        grain: b & 4 != 0,
        absolute: b & 8 != 0,
        shared_position: b & 16 != 0,
    }
}

fn push_params(bytes: &mut Vec<u8>, params: &ParamSet<f64>) {
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn push_adam(bytes: &mut Vec<u8>, opt: Option<&Adam<f64>>) {
    match opt {
        None => bytes.push(0),
        Some(opt) => {
            bytes.push(1);
            let (m, v, step) = opt.state();
            bytes.extend_from_slice(&step.to_le_bytes());
            for t in m.iter().chain(v.iter()) {
                for &x in t.data() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
}

/// Overwrites every model parameter from the named blobs in the file.
fn read_params_into(r: &mut Reader, params: &mut ParamSet<f64>) -> Result<()> {
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::Data(format!(
            "{}: {count} stored parameters, model holds {}",
            r.path,
            params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: non-utf8 parameter name", r.path)))?;
        let ndims = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = r.f64s(numel)?;
        let id = params
            .id_of(&name)
            .ok_or_else(|| Error::Data(format!("{}: unknown parameter {name:?}", r.path)))?;
        params.set(id, Tensor::new(dims, data)?)?;
    }
    Ok(())
}

fn read_adam(r: &mut Reader, params: &ParamSet<f64>, lr: f64) -> Result<Option<Adam<f64>>> {
    if r.u8()? == 0 {
        return Ok(None);
    }
    let step = r.u64()?;
    let mut read_bank = || -> Result<Vec<Tensor<f64>>> {
        params
            .ids()
            .map(|id| {
                let shape = params.get(id).shape().to_vec();
                let data = r.f64s(shape.iter().product())?;
                Tensor::new(shape, data)
            })
            .collect()
    };
    let m = read_bank()?;
    let v = read_bank()?;
    let mut opt = Adam::new(params, lr);
    opt.restore(m, v, step)?;
    Ok(Some(opt))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn header(stage: u8, hash: &str, seed: u64, step: u64, toggles: u8) -> Result<Vec<u8>> {
    let digest = hex_to_bytes(hash)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.push(stage);
    bytes.extend_from_slice(&digest);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&step.to_le_bytes());
    bytes.push(toggles);
    Ok(bytes)
}

fn hex_to_bytes(hash: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    if hash.len() != 64 {
        return Err(Error::Config(format!("config hash {hash:?} is not sha-256")));
    }
    for (i, chunk) in hash.as_bytes().chunks_exact(2).enumerate() {
        let s = std::str::from_utf8(chunk).unwrap();
        out[i] = u8::from_str_radix(s, 16)
            .map_err(|_| Error::Config(format!("config hash {hash:?} is not hex")))?;
    }
    Ok(out)
}

fn check_header(r: &mut Reader, want_stage: u8, want_hash: &str) -> Result<(u64, u64, u8)> {
    if r.take(4)? != MAGIC {
        return Err(Error::Data(format!("{}: missing DQCK magic", r.path)));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            r.path
        )));
    }
    let stage = r.u8()?;
    if stage != want_stage {
        return Err(Error::Data(format!(
            "{}: stage tag {stage}, expected {want_stage}",
            r.path
        )));
    }
    let stored: Vec<u8> = r.take(32)?.to_vec();
    let want = hex_to_bytes(want_hash)?;
    if stored != want {
        return Err(Error::Config(format!(
            "{}: checkpoint was written under a different config (hash mismatch)",
            r.path
        )));
    }
    let seed = r.u64()?;
    let step = r.u64()?;
    let toggles = r.u8()?;
    Ok((seed, step, toggles))
}

pub fn save_stage1(
    path: &Path,
    cfg: &RunConfig,
    model: &Stage1<f64>,
    opt: Option<&Adam<f64>>,
    seed: u64,
    step: u64,
) -> Result<()> {
    let mut bytes = header(STAGE_VAE, &cfg.hash()?, seed, step, 0)?;
    push_params(&mut bytes, &model.params);
    push_adam(&mut bytes, opt);
    atomic_write(path, &bytes)
}

pub fn load_stage1(path: &Path, cfg: &RunConfig) -> Result<(Stage1<f64>, Option<Adam<f64>>, u64)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path: path.display().to_string(),
    };
    let (seed, step, _) = check_header(&mut r, STAGE_VAE, &cfg.hash()?)?;
    let mut model = Stage1::<f64>::new(cfg.stage1_config()?, seed)?;
    read_params_into(&mut r, &mut model.params)?;
    let opt = read_adam(&mut r, &model.params, cfg.stage1.lr)?;
    r.done()?;
    Ok((model, opt, step))
}

pub fn save_prior(
    path: &Path,
    cfg: &RunConfig,
    model: &Prior<f64>,
    opt: Option<&Adam<f64>>,
    seed: u64,
    step: u64,
) -> Result<()> {
    let mut bytes = header(
        STAGE_PRIOR,
        &cfg.hash()?,
        seed,
        step,
        toggle_bits(model.toggles),
    )?;
    push_params(&mut bytes, &model.params);
    push_adam(&mut bytes, opt);
    atomic_write(path, &bytes)
}

pub fn load_prior(path: &Path, cfg: &RunConfig) -> Result<(Prior<f64>, Option<Adam<f64>>, u64)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path: path.display().to_string(),
    };
    let (seed, step, toggles) = check_header(&mut r, STAGE_PRIOR, &cfg.hash()?)?;
    let mut model = Prior::<f64>::new(cfg.prior_config()?, cfg.vocab()?, seed)?;
    model.toggles = toggles_from_bits(toggles);
    read_params_into(&mut r, &mut model.params)?;
    let opt = read_adam(&mut r, &model.params, cfg.stage2.lr)?;
    r.done()?;
    Ok((model, opt, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use graincode::Tensor;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.image = crate::config::ImageCfg { h: 16, w: 16 };
        cfg.grains.factors = vec![2, 4];
        cfg.codebook = crate::config::CodebookCfg { entries: 8, dim: 4 };
        cfg.stage1.hidden = 8;
        cfg.stage2.d = 16;
        cfg.stage2.pos_depth = 1;
        cfg.stage2.content_depth = 1;
        cfg.stage2.heads = 2;
        cfg
    }

    #[test]
    fn stage1_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut model = Stage1::<f64>::new(cfg.stage1_config().unwrap(), 3).unwrap();
        let mut opt = Adam::new(&model.params, cfg.stage1.lr);
        let img = crate::data::synth_corpus(2, 16, 16, 4, 0.5, 1).unwrap();
        model.train_step(&mut opt, &img.images, 5, 0, None).unwrap();

        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_stage1(&a, &cfg, &model, Some(&opt), 3, 1).unwrap();
        let (loaded, opt2, step) = load_stage1(&a, &cfg).unwrap();
        assert_eq!(step, 1);
        save_stage1(&b, &cfg, &loaded, opt2.as_ref(), 3, step).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn resumed_training_replays_bitwise() {
        let cfg = tiny_cfg();
        let corpus = crate::data::synth_corpus(2, 16, 16, 4, 0.5, 1).unwrap();
        let run = |resume_at: Option<u64>| -> f64 {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            let mut model = Stage1::<f64>::new(cfg.stage1_config().unwrap(), 3).unwrap();
            let mut opt = Adam::new(&model.params, cfg.stage1.lr);
            let mut out = 0.0;
            for step in 0..4u64 {
                if resume_at == Some(step) {
                    save_stage1(&path, &cfg, &model, Some(&opt), 3, step).unwrap();
                    let (m2, o2, s2) = load_stage1(&path, &cfg).unwrap();
                    model = m2;
                    opt = o2.unwrap();
                    assert_eq!(s2, step);
                }
                out = model
                    .train_step(&mut opt, &corpus.images, 5, step, None)
                    .unwrap()
                    .total;
            }
            out
        };
        assert_eq!(run(None).to_bits(), run(Some(2)).to_bits());
    }

    #[test]
    fn prior_round_trip_keeps_toggles() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut model =
            Prior::<f64>::new(cfg.prior_config().unwrap(), cfg.vocab().unwrap(), 9).unwrap();
        model.toggles.grain = false;
        model.toggles.shared_position = true;
        let path = dir.path().join("p.ckpt");
        save_prior(&path, &cfg, &model, None, 9, 0).unwrap();
        let (loaded, opt, _) = load_prior(&path, &cfg).unwrap();
        assert!(opt.is_none());
        assert_eq!(loaded.toggles, model.toggles);
        for id in model.params.ids() {
            assert_eq!(model.params.get(id).data(), loaded.params.get(id).data());
        }
    }

    #[test]
    fn config_hash_mismatch_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let model = Stage1::<f64>::new(cfg.stage1_config().unwrap(), 3).unwrap();
        let path = dir.path().join("m.ckpt");
        save_stage1(&path, &cfg, &model, None, 3, 0).unwrap();
        let mut other = cfg.clone();
        other.stage1.lr = 9e-9;
        assert!(matches!(
            load_stage1(&path, &other),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage_tag_mismatch_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let model = Stage1::<f64>::new(cfg.stage1_config().unwrap(), 3).unwrap();
        let path = dir.path().join("m.ckpt");
        save_stage1(&path, &cfg, &model, None, 3, 0).unwrap();
        assert!(matches!(load_prior(&path, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn dimension_tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let model = Stage1::<f64>::new(cfg.stage1_config().unwrap(), 3).unwrap();
        let path = dir.path().join("m.ckpt");
        save_stage1(&path, &cfg, &model, None, 3, 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let len = bytes.len();
        bytes.truncate(len - 9);
        fs::write(&path, bytes).unwrap();
        assert!(load_stage1(&path, &cfg).is_err());
    }

    #[test]
    fn tensor_helper_survives_weird_values() {
        // round-trip of non-finite and denormal payloads stays bitwise
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut model = Stage1::<f64>::new(cfg.stage1_config().unwrap(), 3).unwrap();
        let id = model.params.ids().next().unwrap();
        let shape = model.params.get(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut data = vec![1e-310f64; n];
        data[0] = f64::NEG_INFINITY;
        model.params.set(id, Tensor::new(shape, data).unwrap()).unwrap();
        let path = dir.path().join("m.ckpt");
        save_stage1(&path, &cfg, &model, None, 3, 0).unwrap();
        let (loaded, _, _) = load_stage1(&path, &cfg).unwrap();
        assert_eq!(
            model.params.get(id).data()[0].to_bits(),
            loaded.params.get(id).data()[0].to_bits()
        );
        assert_eq!(
            model.params.get(id).data()[1].to_bits(),
            loaded.params.get(id).data()[1].to_bits()
        );
    }
}
