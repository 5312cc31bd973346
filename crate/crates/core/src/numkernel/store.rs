//! Named registry of trainable arrays with gradients, freezing, counting,
//! checksums and checkpoint serialization.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

const CHECKPOINT_MAGIC: &[u8; 5] = b"AFCK1";

/// One registered parameter: values, a same-shaped gradient buffer, and a
/// frozen flag. Frozen entries never receive optimizer updates and count as
/// zero trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub values: Arc<Array2<f64>>,
    pub grad: Array2<f64>,
    pub frozen: bool,
}

/// Flat registry of parameters keyed by hierarchical dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new entry; duplicate names are an error.
    pub fn register(&mut self, name: &str, values: Array2<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = Array2::zeros(values.dim());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                values: Arc::new(values),
                grad,
                frozen: false,
            },
        );
        Ok(())
    }

    /// Registers with truncated-normal init (std `std`, resampled beyond two
    /// standard deviations).
    pub fn register_trunc_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let normal = Normal::new(0.0, std).expect("valid normal");
        let mut values = Array2::zeros(shape);
        for v in values.iter_mut() {
            loop {
                let x: f64 = normal.sample(rng);
                if x.abs() <= 2.0 * std {
                    *v = x;
                    break;
                }
            }
        }
        self.register(name, values)
    }

    /// Registers an all-zeros entry (biases).
    pub fn register_zeros(&mut self, name: &str, shape: (usize, usize)) -> Result<()> {
        self.register(name, Array2::zeros(shape))
    }

    /// Registers an all-ones entry (layer-norm gains).
    pub fn register_ones(&mut self, name: &str, shape: (usize, usize)) -> Result<()> {
        self.register(name, Array2::ones(shape))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn values(&self, name: &str) -> Result<&Array2<f64>> {
        self.entries
            .get(name)
            .map(|e| e.values.as_ref())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Mutable access to an entry's values (clones the buffer only if a graph
    /// still holds a reference to it).
    pub fn values_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(Arc::make_mut(&mut entry.values))
    }

    pub fn grad(&self, name: &str) -> Result<&Array2<f64>> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Array2<f64>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if entry.grad.dim() != delta.dim() {
            return Err(Error::Shape(format!(
                "grad shape {:?} vs delta {:?} for `{name}`",
                entry.grad.dim(),
                delta.dim()
            )));
        }
        entry.grad += delta;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    /// Freezes every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                entry.frozen = true;
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.frozen).unwrap_or(false)
    }

    /// Sum of element counts of entries matching `prefix`. With
    /// `trainable_only`, frozen entries report zero. Unknown prefixes count 0.
    pub fn count_params(&self, prefix: &str, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|(name, entry)| {
                name.starts_with(prefix) && (!trainable_only || !entry.frozen)
            })
            .map(|(_, entry)| entry.values.len())
            .sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// FNV-1a checksum over the f64 bytes of all entries matching `prefix`,
    /// visited in sorted name order.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, entry) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            eat(name.as_bytes());
            for v in entry.values.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Writes the checkpoint format: magic `AFCK1`, then per entry in sorted
    /// name order: u32 name length, name bytes, u32 rank, u32 dims, f32
    /// values, all little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, entry) in &self.entries {
            let bytes = name.as_bytes();
            buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(bytes);
            let (r, c) = entry.values.dim();
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(r as u32).to_le_bytes());
            buf.extend_from_slice(&(c as u32).to_le_bytes());
            for v in entry.values.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`]. All entries load
    /// unfrozen; callers re-freeze by prefix as needed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor::new(&bytes);
        let magic = cur.take(5)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad magic {:?}, expected {:?}", magic, CHECKPOINT_MAGIC),
            });
        }
        let mut store = ParamStore::new();
        while !cur.done() {
            let name_len = cur.u32()? as usize;
            let name_bytes = cur.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| cur.err("entry name is not utf-8"))?
                .to_string();
            let rank = cur.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(cur.err(&format!("implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            let count: usize = dims.iter().product();
            // Arrays land as matrices: rank 1 becomes 1xN, higher ranks
            // collapse all leading dims into rows.
            let (r, c) = match rank {
                1 => (1, dims[0]),
                _ => (dims[..rank - 1].iter().product(), dims[rank - 1]),
            };
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(cur.f32()? as f64);
            }
            let arr = Array2::from_shape_vec((r, c), values)
                .map_err(|e| cur.err(&format!("shape error: {e}")))?;
            store
                .register(&name, arr)
                .map_err(|_| cur.err(&format!("duplicate entry `{name}`")))?;
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn err(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated: wanted {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn duplicate_registration_is_an_error() {
        let mut store = ParamStore::new();
        store.register("a.w", Array2::zeros((2, 2))).unwrap();
        assert!(matches!(
            store.register("a.w", Array2::zeros((2, 2))),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn frozen_entries_report_zero_trainable() {
        let mut store = ParamStore::new();
        store.register("lm.w", Array2::zeros((3, 4))).unwrap();
        store.register("adapter.w", Array2::zeros((2, 2))).unwrap();
        store.freeze_prefix("lm.");
        assert_eq!(store.count_params("", false), 16);
        assert_eq!(store.count_params("", true), 4);
        assert_eq!(store.count_params("lm.", true), 0);
        assert_eq!(store.count_params("nonexistent.", true), 0);
        assert_eq!(store.count_params("", true), store.count_params("adapter.", true));
    }

    #[test]
    fn empty_store_counts_zero() {
        let store = ParamStore::new();
        assert_eq!(store.count_params("", true), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.afck");
        let mut store = ParamStore::new();
        store
            .register("b.bias", array![[0.5f64, -1.25, 3.0]])
            .unwrap();
        store
            .register("a.weight", array![[1.0f64, 2.0], [3.0, 4.0]])
            .unwrap();
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.values("a.weight").unwrap(), store.values("a.weight").unwrap());
        assert_eq!(loaded.values("b.bias").unwrap(), store.values("b.bias").unwrap());
    }

    #[test]
    fn checkpoint_is_sorted_and_magic_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.afck");
        let mut store = ParamStore::new();
        store.register("z.w", array![[1.0f64]]).unwrap();
        store.register("a.w", array![[2.0f64]]).unwrap();
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"AFCK1");
        // first entry after the magic must be the lexicographically smaller name
        let name_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(&bytes[9..9 + name_len], b"a.w");

        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&path, &corrupted).unwrap();
        match ParamStore::load(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.afck");
        let mut store = ParamStore::new();
        store.register("a.w", array![[1.0f64, 2.0]]).unwrap();
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match ParamStore::load(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn checksum_changes_with_values_and_prefix() {
        let mut store = ParamStore::new();
        store.register("a.w", array![[1.0f64, 2.0]]).unwrap();
        store.register("b.w", array![[5.0f64]]).unwrap();
        let before = store.checksum("a.");
        assert_eq!(before, store.checksum("a."));
        assert_ne!(store.checksum("a."), store.checksum("b."));
        store.values_mut("a.w").unwrap()[[0, 0]] = 9.0;
        assert_ne!(before, store.checksum("a."));
    }

    #[test]
    fn trunc_normal_respects_bound_and_seed() {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        store
            .register_trunc_normal("w", (16, 16), 0.02, &mut rng)
            .unwrap();
        assert!(store.values("w").unwrap().iter().all(|v| v.abs() <= 0.04));

        let mut store2 = ParamStore::new();
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        store2
            .register_trunc_normal("w", (16, 16), 0.02, &mut rng2)
            .unwrap();
        assert_eq!(store.values("w").unwrap(), store2.values("w").unwrap());
    }
}
