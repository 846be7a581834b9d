//! `FSQC` checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "FSQC" | version u32
//! config: u64 length + UTF-8 TOML
//! epoch u64 | adam step u64
//! rng: seed [u8; 32] | stream u64 | word position u128
//! best: u8 flag | score f64 | epoch u64
//! tensor count u32, then per tensor:
//!   name: u32 length + UTF-8 | trainable u8 | rank u32 | dims u64 x rank
//!   values, first moments, second moments: f32 x product(dims) each
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{AdamState, TrainConfig};
use crate::tensor::ParamStore;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FSQC";
pub const VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestVal {
    pub score: f64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub adam_step: u64,
    pub rng: RngState,
    pub best: Option<BestVal>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        epoch: u64,
        store: &ParamStore,
        adam: &AdamState,
        rng: &ChaCha8Rng,
        best: Option<BestVal>,
    ) -> Self {
        let tensors = store
            .iter()
            .map(|(id, p)| TensorRecord {
                name: p.name.clone(),
                trainable: p.trainable,
                shape: p.shape.clone(),
                values: p.values.clone(),
                m: adam.m[id.index()].clone(),
                v: adam.v[id.index()].clone(),
            })
            .collect();
        Self {
            config: config.clone(),
            epoch,
            adam_step: adam.step,
            rng: RngState::capture(rng),
            best,
            tensors,
        }
    }

    /// Copies parameter values into `store` and returns the matching
    /// optimizer state. Names, shapes and order must agree.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<AdamState> {
        if self.tensors.len() != store.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        let mut adam = AdamState::new(store);
        adam.step = self.adam_step;
        let ids: Vec<_> = store.ids().collect();
        for (id, rec) in ids.into_iter().zip(&self.tensors) {
            let p = store.get(id);
            if p.name != rec.name || p.shape != rec.shape {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    rec.name, rec.shape, p.name, p.shape
                )));
            }
            store.values_mut(id).copy_from_slice(&rec.values);
            adam.m[id.index()].copy_from_slice(&rec.m);
            adam.v[id.index()].copy_from_slice(&rec.v);
        }
        Ok(adam)
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let config = toml::to_string(&c.config).map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&c.epoch.to_le_bytes());
    out.extend_from_slice(&c.adam_step.to_le_bytes());
    out.extend_from_slice(&c.rng.seed);
    out.extend_from_slice(&c.rng.stream.to_le_bytes());
    out.extend_from_slice(&c.rng.word_pos.to_le_bytes());
    let best = c.best.unwrap_or(BestVal { score: 0.0, epoch: 0 });
    out.push(u8::from(c.best.is_some()));
    out.extend_from_slice(&best.score.to_le_bytes());
    out.extend_from_slice(&best.epoch.to_le_bytes());
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for t in &c.tensors {
        let n: usize = t.shape.iter().product();
        if t.values.len() != n || t.m.len() != n || t.v.len() != n {
            return Err(Error::Internal(format!("tensor {} size disagrees with its shape", t.name)));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(u8::from(t.trainable));
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for block in [&t.values, &t.m, &t.v] {
            for x in block.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("{what} flag must be 0 or 1, found {b}"))),
        }
    }

    fn string(&mut self, len: u64, what: &str) -> Result<String> {
        let len = usize::try_from(len).map_err(|_| Error::Format(format!("{what} length overflows")))?;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.array::<4>()? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()?;
    let text = r.string(len, "config snapshot")?;
    let config: TrainConfig = toml::from_str(&text).map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
    let epoch = r.u64()?;
    let adam_step = r.u64()?;
    let rng = RngState {
        seed: r.array()?,
        stream: r.u64()?,
        word_pos: u128::from_le_bytes(r.array()?),
    };
    let has_best = r.flag("best")?;
    let best = BestVal {
        score: f64::from_le_bytes(r.array()?),
        epoch: r.u64()?,
    };
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = r.string(len as u64, "tensor name")?;
        let trainable = r.flag("trainable")?;
        let rank = r.u32()?;
        let mut shape = Vec::new();
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflows".into()))?;
            n = n.checked_mul(d).ok_or_else(|| Error::Format(format!("tensor {name} size overflows")))?;
            shape.push(d);
        }
        let values = r.f32s(n)?;
        let m = r.f32s(n)?;
        let v = r.f32s(n)?;
        tensors.push(TensorRecord {
            name,
            trainable,
            shape,
            values,
            m,
            v,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        epoch,
        adam_step,
        rng,
        best: has_best.then_some(best),
        tensors,
    })
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(c)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = rng.gen();
        Checkpoint {
            config: TrainConfig::default(),
            epoch: 4,
            adam_step: 17,
            rng: RngState::capture(&rng),
            best: Some(BestVal { score: 1.25, epoch: 3 }),
            tensors: vec![
                TensorRecord {
                    name: "a.weight".into(),
                    trainable: true,
                    shape: vec![2, 3],
                    values: (0..6).map(|i| i as f32 * 0.5).collect(),
                    m: vec![0.1; 6],
                    v: vec![f32::MIN_POSITIVE; 6],
                },
                TensorRecord {
                    name: "b".into(),
                    trainable: false,
                    shape: vec![1],
                    values: vec![-0.0],
                    m: vec![0.0],
                    v: vec![0.0],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample_checkpoint();
        let bytes = encode_checkpoint(&c).unwrap();
        let d = decode_checkpoint(&bytes).unwrap();
        assert_eq!(d, c);
        assert_eq!(encode_checkpoint(&d).unwrap(), bytes);
        assert_eq!(d.tensors[1].values[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let _: u32 = rng.gen();
        }
        let mut restored = RngState::capture(&rng).restore();
        let a: Vec<u64> = (0..10).map(|_| rng.gen()).collect();
        let b: Vec<u64> = (0..10).map(|_| restored.gen()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn damaged_inputs_are_rejected() {
        let bytes = encode_checkpoint(&sample_checkpoint()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format(_))));
    }

    #[test]
    fn restore_checks_layout() {
        let c = sample_checkpoint();
        let mut store = ParamStore::new();
        store.add("a.weight", &[2, 3], vec![0.0; 6]).unwrap();
        store.add_frozen("b", &[1], vec![1.0]).unwrap();
        let adam = c.restore_into(&mut store).unwrap();
        assert_eq!(adam.step, 17);
        assert_eq!(store.values(store.id("a.weight").unwrap())[5], 2.5);

        let mut wrong = ParamStore::new();
        wrong.add("a.weight", &[3, 2], vec![0.0; 6]).unwrap();
        wrong.add_frozen("b", &[1], vec![1.0]).unwrap();
        assert!(matches!(c.restore_into(&mut wrong), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_checkpoint(&bytes);
        }

        #[test]
        fn corrupting_a_valid_prefix_never_panics(cut in 0usize..400, flip in any::<u8>(), at in 0usize..400) {
            let mut bytes = encode_checkpoint(&sample_checkpoint()).unwrap();
            let at = at % bytes.len();
            bytes[at] ^= flip;
            bytes.truncate(cut.min(bytes.len()));
            let _ = decode_checkpoint(&bytes);
        }
    }
}
