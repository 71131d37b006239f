//! Binary checkpoints: magic, version byte, then named `f32` blocks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{MeltError, Result};
use crate::math::Matrix;
use crate::model::MeltModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MELTCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

fn incompatible(why: impl Into<String>) -> MeltError {
    MeltError::IncompatibleCheckpoint(why.into())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blocks: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    /// Captures parameters, optimizer moments, step counts, rarity
    /// statistics and the number of completed epochs.
    pub fn capture(model: &MeltModel, epochs_done: usize) -> Self {
        let mut blocks = BTreeMap::new();
        for p in model.store.iter() {
            blocks.insert(format!("param/{}", p.name), p.value.clone());
            blocks.insert(format!("adam_m/{}", p.name), p.first_moment.clone());
            blocks.insert(format!("adam_v/{}", p.name), p.second_moment.clone());
            blocks.insert(format!("step/{}", p.name), Matrix::scalar(p.step as f64));
        }
        let s = &model.stats;
        blocks.insert("stats/mu".into(), Matrix::row_vector(s.mu.clone()));
        blocks.insert("stats/sigma".into(), s.sigma.clone());
        blocks.insert(
            "stats/scalars".into(),
            Matrix::row_vector(vec![
                s.mu_r,
                s.var_r,
                s.observation_count as f64,
                s.score_count as f64,
                f64::from(u8::from(s.is_frozen())),
            ]),
        );
        let a = &model.arch;
        blocks.insert("meta/shape".into(), Matrix::row_vector(vec![a.q as f64, a.d as f64, a.width as f64]));
        blocks.insert("meta/epochs".into(), Matrix::scalar(epochs_done as f64));
        Self { blocks }
    }

    fn block(&self, name: &str, shape: (usize, usize)) -> Result<&Matrix> {
        let m = self.blocks.get(name).ok_or_else(|| incompatible(format!("missing block {name}")))?;
        if m.shape() != shape {
            return Err(incompatible(format!(
                "block {name} is {}x{}, model expects {}x{}",
                m.rows(),
                m.cols(),
                shape.0,
                shape.1
            )));
        }
        Ok(m)
    }

    /// Writes the captured state into `model`, which must have been built
    /// with the same architecture. Returns the completed epoch count.
    pub fn restore(&self, model: &mut MeltModel) -> Result<usize> {
        let a = &model.arch;
        let shape = self.block("meta/shape", (1, 3))?;
        if shape.data() != [a.q as f64, a.d as f64, a.width as f64] {
            return Err(incompatible("model shape differs"));
        }
        let expected = 4 * model.store.len() + 5;
        if self.blocks.len() != expected {
            return Err(incompatible(format!("{} blocks, model expects {expected}", self.blocks.len())));
        }
        let epochs = self.block("meta/epochs", (1, 1))?.as_scalar() as usize;
        let d = model.stats.dim();
        let mu = self.block("stats/mu", (1, d))?.data().to_vec();
        let sigma = self.block("stats/sigma", (d, d))?.clone();
        let sc = self.block("stats/scalars", (1, 5))?.data().to_vec();

        let mut restored = Vec::with_capacity(model.store.len());
        for p in model.store.iter() {
            let shape = p.value.shape();
            restored.push((
                self.block(&format!("param/{}", p.name), shape)?.clone(),
                self.block(&format!("adam_m/{}", p.name), shape)?.clone(),
                self.block(&format!("adam_v/{}", p.name), shape)?.clone(),
                self.block(&format!("step/{}", p.name), (1, 1))?.as_scalar() as u64,
            ));
        }
        for (p, (value, m, v, step)) in model.store.iter_mut().zip(restored) {
            p.value = value;
            p.first_moment = m;
            p.second_moment = v;
            p.step = step;
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
        let s = &mut model.stats;
        s.mu = mu;
        s.sigma = sigma;
        s.mu_r = sc[0];
        s.var_r = sc[1];
        s.observation_count = sc[2] as u64;
        s.score_count = sc[3] as u64;
        if sc[4] != 0.0 {
            s.freeze();
        } else {
            s.unfreeze();
        }
        Ok(epochs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, m) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(incompatible("not a checkpoint"));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(incompatible(format!("version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let count = r.u32()?;
        let mut blocks = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| incompatible("block name is not UTF-8"))?
                .to_string();
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let n = rows.checked_mul(cols).filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()));
            let n = n.ok_or_else(|| incompatible(format!("block {name} runs past the end")))?;
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let m = Matrix::new(rows, cols, data).map_err(|_| incompatible(format!("block {name} has a bad shape")))?;
            if blocks.insert(name.clone(), m).is_some() {
                return Err(incompatible(format!("duplicate block {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(incompatible("trailing bytes"));
        }
        Ok(Self { blocks })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(incompatible("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn save_checkpoint(model: &MeltModel, epochs_done: usize, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, Checkpoint::capture(model, epochs_done).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, model: &mut MeltModel) -> Result<usize> {
    Checkpoint::from_bytes(&fs::read(path)?)?.restore(model)
}
