//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AFRD"  version:u32  count:u32
//! count × { name_len:u16 name:[u8] rank:u8 dims:[u32; rank] values:[f64; Π dims] }
//! iteration:u64  rng_seed:[u8; 32]  rng_stream:u64  rng_word_pos:u128
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFRD";
pub const VERSION: u32 = 1;

/// Enough to resume a ChaCha8 stream at the exact word it stopped at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub iteration: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let payload: usize = self.tensors.iter().map(|(n, t)| n.len() + 8 * t.numel() + 32).sum();
        let mut out = Vec::with_capacity(payload + 128);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::domain("Checkpoint::encode", "too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::domain("Checkpoint::encode", format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::domain("Checkpoint::encode", format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::domain("Checkpoint::encode", format!("dimension too large in {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::corrupt("magic", "not an AFRD checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::corrupt("version", format!("unsupported version {version}")));
        }
        let count = r.u32("count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = usize::from(r.u16(&format!("tensor[{i}].name_len"))?);
            let name = std::str::from_utf8(r.take(len, &format!("tensor[{i}].name"))?)
                .map_err(|_| Error::corrupt(format!("tensor[{i}].name"), "not valid UTF-8"))?
                .to_string();
            if tensors.iter().any(|(n, _)| n == &name) {
                return Err(Error::corrupt(format!("{name}.name"), "duplicate tensor name"));
            }
            let rank = r.u8(&format!("{name}.rank"))?;
            let mut shape = Vec::with_capacity(usize::from(rank));
            for _ in 0..rank {
                shape.push(r.u32(&format!("{name}.dims"))? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::corrupt(format!("{name}.dims"), format!("shape {shape:?} exceeds file size")))?;
            if shape.is_empty() || numel == 0 {
                return Err(Error::corrupt(format!("{name}.dims"), format!("empty shape {shape:?}")));
            }
            let raw = r.take(numel * 8, &format!("{name}.values"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        let iteration = r.u64("iteration")?;
        let seed: [u8; 32] = r.take(32, "rng.seed")?.try_into().unwrap();
        let stream = r.u64("rng.stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng.word_pos")?.try_into().unwrap());
        if r.remaining() != 0 {
            return Err(Error::corrupt("trailer", format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            tensors,
            iteration,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::corrupt(
                field,
                format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(7);
        let _: u64 = rng.random();
        Checkpoint {
            tensors: vec![
                ("a.w".into(), Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap()),
                ("b".into(), Tensor::scalar(f64::NAN)),
            ],
            iteration: 42,
            rng: RngState::capture(&rng),
        }
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(back.rng, ck.rng);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(bits(t1), bits(t2));
        }
        assert_eq!(back.encode().unwrap(), ck.encode().unwrap());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        for _ in 0..5 {
            let _: u32 = rng.random();
        }
        let mut resumed = RngState::capture(&rng).restore();
        let a: Vec<u64> = (0..10).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..10).map(|_| resumed.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn every_truncation_is_a_structured_error() {
        let bytes = sample().encode().unwrap();
        for len in 0..bytes.len() {
            match Checkpoint::decode(&bytes[..len]) {
                Err(Error::CorruptCheckpoint { .. }) => {}
                other => panic!("length {len}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_errors_name_the_field() {
        let mut bytes = sample().encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::CorruptCheckpoint { field, .. }) if field == "magic"));
        let mut bytes = sample().encode().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::CorruptCheckpoint { field, .. }) if field == "version"));
        let mut bytes = sample().encode().unwrap();
        bytes.push(0);
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::CorruptCheckpoint { field, .. }) if field == "trailer"));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(2);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::CorruptCheckpoint { field, .. }) if field == "x.dims"));
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = sample().save(&dir.path().join("nope/ck.bin")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = Checkpoint::decode(&bytes);
        }

        #[test]
        fn single_byte_corruption_never_panics(pos in 0usize..400, val in any::<u8>()) {
            let mut bytes = sample().encode().unwrap();
            let pos = pos % bytes.len();
            bytes[pos] = val;
            let _ = Checkpoint::decode(&bytes);
        }
    }
}
