use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datastream::{load_manifest, write_manifest, write_png, write_raw_f32, ImageSize, ManifestEntry, Sample};
use crate::error::{Result, SamError};
use crate::nn::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub sample: Sample,
    /// Logits recorded when the sample was inserted (DER++).
    pub logits: Option<Vec<f32>>,
}

/// Fixed-capacity reservoir over a stream of items.
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    capacity: usize,
    entries: Vec<T>,
    seen: usize,
    rng: ChaCha8Rng,
}

/// The replay memory of rehearsal learners.
pub type MemoryBuffer = Reservoir<BufferEntry>;

impl<T> Reservoir<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
            rng: rng_for(seed, "reservoir"),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of items offered so far.
    pub fn seen_count(&self) -> usize {
        self.seen
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    /// Reservoir insertion: the n-th offered item ends up resident with
    /// probability `capacity / n`. Returns the slot written, if any.
    pub fn insert(&mut self, entry: T) -> Option<usize> {
        self.seen += 1;
        if self.capacity == 0 {
            return None;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return Some(self.entries.len() - 1);
        }
        let j = self.rng.random_range(0..self.seen);
        if j < self.capacity {
            self.entries[j] = entry;
            Some(j)
        } else {
            None
        }
    }

    /// `n` entries drawn uniformly with replacement; empty if the buffer is.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Vec<&'a T> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.entries[rng.random_range(0..self.entries.len())])
            .collect()
    }
}

impl MemoryBuffer {
    /// Writes the buffer as a dataset manifest (`buffer.tsv` with PNG images
    /// and raw saliency maps) plus `logits.f32`, one little-endian f32 row per
    /// entry, when every entry carries logits.
    pub fn save(&self, dir: &Path, size: ImageSize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SamError::io(dir, e))?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let stem = format!("m{i:05}");
            let image = format!("{stem}.png");
            write_png(&dir.join(&image), size, &e.sample.image)?;
            let saliency = match &e.sample.saliency {
                Some(map) => {
                    let name = format!("{stem}.f32");
                    write_raw_f32(&dir.join(&name), size, map)?;
                    Some(name.into())
                }
                None => None,
            };
            manifest.push(ManifestEntry {
                image: image.into(),
                label: e.sample.label,
                saliency,
            });
        }
        write_manifest(&dir.join("buffer.tsv"), &manifest)?;
        if !self.entries.is_empty() && self.entries.iter().all(|e| e.logits.is_some()) {
            let bytes: Vec<u8> = self
                .entries
                .iter()
                .flat_map(|e| e.logits.as_deref().unwrap_or_default())
                .flat_map(|v| v.to_le_bytes())
                .collect();
            let p = dir.join("logits.f32");
            fs::write(&p, bytes).map_err(|e| SamError::io(&p, e))?;
        }
        Ok(())
    }

    /// Reads back a snapshot written by [`MemoryBuffer::save`]. Images pass
    /// through 8-bit PNG and are therefore quantized to multiples of 1/255.
    pub fn load(dir: &Path, size: ImageSize, capacity: usize, seed: u64) -> Result<Self> {
        let samples = load_manifest(&dir.join("buffer.tsv"), size)?;
        if samples.len() > capacity {
            return Err(SamError::config(format!(
                "snapshot holds {} entries, capacity is {capacity}",
                samples.len()
            )));
        }
        let logits_path = dir.join("logits.f32");
        let rows: Option<Vec<Vec<f32>>> = if logits_path.exists() && !samples.is_empty() {
            let bytes = fs::read(&logits_path).map_err(|e| SamError::io(&logits_path, e))?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if bytes.len() % 4 != 0 || values.len() % samples.len() != 0 {
                return Err(SamError::data(format!(
                    "{}: size is not a whole number of rows",
                    logits_path.display()
                )));
            }
            let k = values.len() / samples.len();
            Some(values.chunks(k).map(<[f32]>::to_vec).collect())
        } else {
            None
        };
        let mut buf = Self::new(capacity, seed);
        for (i, sample) in samples.into_iter().enumerate() {
            buf.entries.push(BufferEntry {
                sample,
                logits: rows.as_ref().map(|r| r[i].clone()),
            });
        }
        buf.seen = buf.entries.len();
        Ok(buf)
    }
}
