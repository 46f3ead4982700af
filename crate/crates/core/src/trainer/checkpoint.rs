//! Binary checkpoint format.
//!
//! All integers and floats are little-endian. Strings are a u32 byte
//! length followed by UTF-8.
//!
//! ```text
//! "SATT" u32 version
//! string config_json
//! u32 count, count x tensor            model parameters in model order
//! 2 x adam block                       "gen" then "disc"
//! u64 epoch, u64 step
//! [u8; 32] rng seed, u64 stream, u128 word position
//!
//! tensor     = string name, u8 dtype (0 = f32), u32 rank, rank x u32 dim, values
//! adam block = string name, u64 step, f64 lr, f64 beta1, f64 beta2, f64 epsilon,
//!              u32 count, count x (tensor m, tensor v)   named "<param>/m", "<param>/v"
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamState, Moments, Shape, Tensor4};
use crate::error::{Error, Result};
use crate::trainer::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SATT";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor4) {
        self.str(name);
        self.u8(DTYPE_F32);
        let dims = t.shape().dims();
        self.u32(dims.len() as u32);
        for d in dims {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn adam(&mut self, name: &str, a: &AdamState) {
        self.str(name);
        self.u64(a.step);
        for v in [a.lr, a.beta1, a.beta2, a.epsilon] {
            self.f64(v);
        }
        self.u32(a.moments.len() as u32);
        for (id, m) in &a.moments {
            self.tensor(&format!("{id}/m"), &m.m);
            self.tensor(&format!("{id}/v"), &m.v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(offset: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("byte {offset}: {msg}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(
                self.pos,
                format!("truncated, needed {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| corrupt(at, "string is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor4)> {
        let name = self.str()?;
        let at = self.pos;
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(corrupt(
                at,
                format!("tensor `{name}` has unknown dtype tag {dtype}"),
            ));
        }
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(at, format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let shape = Shape::from_dims(&dims)
            .ok_or_else(|| corrupt(at, format!("tensor `{name}` has unsupported dims {dims:?}")))?;
        let numel = shape.numel();
        let raw = self.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| corrupt(at, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok((name, Tensor4::new(shape, data)?))
    }
    fn adam(&mut self, expect: &str) -> Result<AdamState> {
        let at = self.pos;
        let name = self.str()?;
        if name != expect {
            return Err(corrupt(
                at,
                format!("expected optimizer block `{expect}`, found `{name}`"),
            ));
        }
        let step = self.u64()?;
        let (lr, beta1, beta2, epsilon) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let mut state = AdamState::new(lr, beta1, beta2, epsilon);
        state.step = step;
        let count = self.u32()?;
        for _ in 0..count {
            let at = self.pos;
            let (mn, m) = self.tensor()?;
            let (vn, v) = self.tensor()?;
            let id = mn
                .strip_suffix("/m")
                .filter(|id| vn.strip_suffix("/v") == Some(*id))
                .ok_or_else(|| corrupt(at, format!("unpaired moment records `{mn}`, `{vn}`")))?;
            state.moments.insert(id.to_string(), Moments { m, v });
        }
        Ok(state)
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&serde_json::to_string(&state.config)?);
    let params: Vec<_> = state.nets.all().flat_map(|m| m.parameters()).collect();
    w.u32(params.len() as u32);
    for p in params {
        w.tensor(&p.id, &p.tensor);
    }
    w.adam("gen", &state.gen_opt);
    w.adam("disc", &state.disc_opt);
    w.u64(state.epoch);
    w.u64(state.step);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    Ok(w.0)
}

/// Decodes a checkpoint into networks built from `expected`, or from the
/// stored configuration when `expected` is `None`.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(4)
        .map_err(|_| corrupt(0, "file too short for a header"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(corrupt(0, format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(
            4,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let at = r.pos;
    let stored: TrainConfig =
        serde_json::from_str(&r.str()?).map_err(|e| corrupt(at, format!("config: {e}")))?;
    let config = expected.cloned().unwrap_or(stored);
    let mut state = TrainState::new(config)?;

    let at = r.pos;
    let count = r.u32()? as usize;
    let mut slots: Vec<_> = state
        .nets
        .all_mut()
        .flat_map(|m| m.parameters_mut().iter_mut())
        .collect();
    for (i, slot) in slots.iter_mut().enumerate().take(count) {
        let (name, tensor) = r.tensor()?;
        if name != slot.id {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: expected `{}`, found `{name}`",
                slot.id
            )));
        }
        if tensor.shape() != slot.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: stored shape {} does not match {}",
                tensor.shape(),
                slot.tensor.shape()
            )));
        }
        slot.tensor = tensor;
    }
    if count != slots.len() {
        let detail = match slots.get(count) {
            Some(p) => format!("first missing tensor is `{}`", p.id),
            None => "extra tensors stored".to_string(),
        };
        return Err(corrupt(
            at,
            format!("{count} tensors stored, {} expected; {detail}", slots.len()),
        ));
    }
    drop(slots);

    state.gen_opt = r.adam("gen")?;
    state.disc_opt = r.adam("disc")?;
    state.epoch = r.u64()?;
    state.step = r.u64()?;
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    if r.pos != bytes.len() {
        return Err(corrupt(
            r.pos,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(state)
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("satt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&read(path)?, None).map_err(|e| with_path(path, e))
}

/// Loads into networks shaped by `config`; the first tensor that does not
/// fit is named in the error.
pub fn load_checkpoint_for(path: &Path, config: &TrainConfig) -> Result<TrainState> {
    decode_checkpoint(&read(path)?, Some(config)).map_err(|e| with_path(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.image_size = 16;
        c.generator.depth = 2;
        c.generator.base_channels = 4;
        c.discriminator.num_layers = 2;
        c.discriminator.base_channels = 4;
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = TrainState::new(tiny()).unwrap();
        s.epoch = 3;
        s.step = 17;
        let _: u64 = s.rng.random();
        s.gen_opt.step = 4;
        let p = &s.nets.g.parameters()[0];
        s.gen_opt.moments.insert(
            p.id.clone(),
            Moments {
                m: p.tensor.map(|v| v * 0.5),
                v: p.tensor.map(|v| v * v),
            },
        );
        let bytes = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint(&bytes, None).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_header() {
        let s = TrainState::new(tiny()).unwrap();
        let mut bytes = encode_checkpoint(&s).unwrap();
        bytes[0] = b'X';
        let err = decode_checkpoint(&bytes, None).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("magic"));

        let mut bytes = encode_checkpoint(&s).unwrap();
        bytes[4] = 9;
        assert!(decode_checkpoint(&bytes, None)
            .unwrap_err()
            .to_string()
            .contains("version 9"));
        assert!(decode_checkpoint(&bytes[..2], None).is_err());
        let full = encode_checkpoint(&s).unwrap();
        assert!(decode_checkpoint(&full[..full.len() - 3], None).is_err());
    }

    #[test]
    fn mismatched_architecture_names_tensor() {
        let s = TrainState::new(tiny()).unwrap();
        let bytes = encode_checkpoint(&s).unwrap();
        let mut other = tiny();
        other.generator.base_channels = 8;
        let err = decode_checkpoint(&bytes, Some(&other))
            .unwrap_err()
            .to_string();
        assert!(err.contains("gen_xy/e1/conv/weight"), "{err}");

        let mut deeper = tiny();
        deeper.generator.depth = 3;
        let err = decode_checkpoint(&bytes, Some(&deeper))
            .unwrap_err()
            .to_string();
        assert!(err.contains("gen_xy/"), "{err}");
    }
}
