//! Single-file training bundle: every parameter and state buffer keyed by
//! module path, optimizer moments, epoch counter, RNG position, the config
//! echo and the vocabulary. A load reproduces evaluation bitwise and resumes
//! training where it stopped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{AdamSlot, Optimizers};
use crate::params::ParamVisitor;
use crate::tensor::{from_f64, to_f64, Tensor};

const MAGIC: &[u8; 4] = b"TNDM";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub const CONFIG_BLOB: &str = "__config__";
pub const VOCAB_BLOB: &str = "__vocab__";
pub const EPOCH_BLOB: &str = "__epoch__";
pub const RNG_BLOB: &str = "__rng__";
const ADAM_PREFIX: &str = "__adam__.";

/// Name-keyed tensor records plus named byte blobs, written in sorted order
/// so identical contents produce identical bytes.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    blobs: BTreeMap<String, Vec<u8>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn put_blob(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.blobs.insert(name.into(), bytes);
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs.get(name).map(Vec::as_slice)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&to_f64(v).to_le_bytes())?;
            }
        }
        w.write_all(&(self.blobs.len() as u64).to_le_bytes())?;
        for (name, bytes) in &self.blobs {
            write_str(&mut w, name)?;
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Counting { inner: r, offset: 0 };
        let mut magic = [0u8; 4];
        r.take(&mut magic, "header magic")?;
        if &magic != MAGIC {
            return Err(Error::format(0, format!("not a checkpoint file (magic {magic:?})")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let mut tensors = BTreeMap::new();
        let tensor_count = r.u64("tensor count")?;
        for _ in 0..tensor_count {
            let name = r.string("tensor name")?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(Error::format(r.offset - 1, format!("unknown dtype {dtype} for {name:?}")));
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            r.take(&mut bytes, "tensor data")?;
            // Stored values are always f64; Elem narrows under the f32 feature.
            let data = bytes
                .chunks_exact(8)
                .map(|b| from_f64(f64::from_le_bytes(b.try_into().unwrap())))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let mut blobs = BTreeMap::new();
        let blob_count = r.u64("blob count")?;
        for _ in 0..blob_count {
            let name = r.string("blob name")?;
            let len = r.u64("blob length")? as usize;
            let mut bytes = vec![0u8; len];
            r.take(&mut bytes, "blob data")?;
            blobs.insert(name, bytes);
        }
        Ok(Checkpoint { tensors, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(Error::format(at, format!("truncated while reading {what}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.offset;
        let len = self.u32(what)? as usize;
        let mut bytes = vec![0u8; len];
        self.take(&mut bytes, what)?;
        String::from_utf8(bytes).map_err(|e| Error::format(at, format!("{what} is not UTF-8: {e}")))
    }
}

/// Captures model parameters (walked via `visit`), optimizer moments, the
/// epoch counter, RNG position and the config echo into one bundle.
pub fn bundle(
    visit: impl Fn(&mut ParamVisitor),
    opt: Option<&Optimizers>,
    epoch: usize,
    rng: &ChaCha8Rng,
    config_text: &str,
    vocab_tsv: &str,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    visit(&mut |path, cell, _| ckpt.put_tensor(path, cell.borrow().clone()));
    if let Some(opt) = opt {
        for (path, slot) in &opt.adam {
            ckpt.put_tensor(format!("{ADAM_PREFIX}{path}.m"), Tensor::new(vec![slot.m.len()], slot.m.clone()).expect("slot"));
            ckpt.put_tensor(format!("{ADAM_PREFIX}{path}.v"), Tensor::new(vec![slot.v.len()], slot.v.clone()).expect("slot"));
            ckpt.put_blob(format!("{ADAM_PREFIX}{path}.t"), slot.t.to_le_bytes().to_vec());
        }
    }
    ckpt.put_blob(EPOCH_BLOB, (epoch as u64).to_le_bytes().to_vec());
    ckpt.put_blob(RNG_BLOB, rng_state_bytes(rng));
    ckpt.put_blob(CONFIG_BLOB, config_text.as_bytes().to_vec());
    ckpt.put_blob(VOCAB_BLOB, vocab_tsv.as_bytes().to_vec());
    ckpt
}

/// Copies stored tensors back into a freshly built model. Every parameter
/// the walk visits must exist in the bundle with the same shape.
pub fn restore_params(ckpt: &Checkpoint, visit: impl Fn(&mut ParamVisitor)) -> Result<()> {
    let mut missing: Vec<String> = Vec::new();
    let mut bad_shape: Vec<String> = Vec::new();
    visit(&mut |path, cell, _| match ckpt.tensor(&path) {
        Some(stored) if stored.shape() == cell.borrow().shape() => {
            *cell.borrow_mut() = stored.clone();
        }
        Some(_) => bad_shape.push(path),
        None => missing.push(path),
    });
    if !missing.is_empty() {
        return Err(Error::input(format!("checkpoint is missing parameters: {}", missing.join(", "))));
    }
    if !bad_shape.is_empty() {
        return Err(Error::input(format!("checkpoint shape mismatch for: {}", bad_shape.join(", "))));
    }
    Ok(())
}

/// Rebuilds Adam moments from the bundle into freshly constructed
/// optimizers.
pub fn restore_optimizer(ckpt: &Checkpoint, opt: &mut Optimizers) -> Result<()> {
    opt.adam.clear();
    for name in ckpt.tensor_names() {
        let Some(rest) = name.strip_prefix(ADAM_PREFIX) else { continue };
        let Some(path) = rest.strip_suffix(".m") else { continue };
        let m = ckpt.tensor(name).expect("listed name").data().to_vec();
        let v = ckpt
            .tensor(&format!("{ADAM_PREFIX}{path}.v"))
            .ok_or_else(|| Error::input(format!("optimizer state for {path:?} lacks second moments")))?
            .data()
            .to_vec();
        let t_bytes = ckpt
            .blob(&format!("{ADAM_PREFIX}{path}.t"))
            .ok_or_else(|| Error::input(format!("optimizer state for {path:?} lacks a step count")))?;
        let t = u64::from_le_bytes(
            t_bytes.try_into().map_err(|_| Error::input(format!("bad step-count encoding for {path:?}")))?,
        );
        opt.adam.insert(path.to_string(), AdamSlot { m, v, t });
    }
    Ok(())
}

pub fn epoch_of(ckpt: &Checkpoint) -> Result<usize> {
    let bytes = ckpt.blob(EPOCH_BLOB).ok_or_else(|| Error::input("checkpoint has no epoch record".to_string()))?;
    Ok(u64::from_le_bytes(bytes.try_into().map_err(|_| Error::input("bad epoch encoding".to_string()))?) as usize)
}

fn rng_state_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 16 + 8);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out
}

pub fn restore_rng(ckpt: &Checkpoint) -> Result<ChaCha8Rng> {
    let bytes = ckpt.blob(RNG_BLOB).ok_or_else(|| Error::input("checkpoint has no RNG record".to_string()))?;
    if bytes.len() != 56 {
        return Err(Error::input(format!("RNG record is {} bytes, expected 56", bytes.len())));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let word_pos = u128::from_le_bytes(bytes[32..48].try_into().expect("sliced"));
    let stream = u64::from_le_bytes(bytes[48..56].try_into().expect("sliced"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}
