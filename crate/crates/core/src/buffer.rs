//! Fixed-capacity replay memory: reservoir updates, uniform retrieval, and a
//! binary snapshot for resuming experiments.
//!
//! Snapshot layout (little-endian):
//!
//! ```text
//! tag        4 bytes  "RBF1"
//! capacity   u64
//! seen       u64
//! input_dim  u64
//! records    u64
//! rng seed   32 bytes, rng stream u64, rng word position u128
//! records × { payload_len u32, label u64, input_dim × f64 }
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{LabError, Result};
use crate::matrix::Matrix;

pub const SNAPSHOT_TAG: [u8; 4] = *b"RBF1";

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    input_dim: usize,
    samples: Vec<Vec<f64>>,
    labels: Vec<usize>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, input_dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(LabError::Config("buffer capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            input_dim,
            samples: Vec::with_capacity(capacity.min(1 << 16)),
            labels: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, slot: usize) -> &[f64] {
        &self.samples[slot]
    }

    /// Offers one sample to the reservoir. Returns the slot it landed in.
    pub fn offer(&mut self, x: &[f64], label: usize) -> Result<Option<usize>> {
        if x.len() != self.input_dim {
            return Err(LabError::Dimension {
                context: "buffer sample width",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        self.seen += 1;
        if self.samples.len() < self.capacity {
            self.samples.push(x.to_vec());
            self.labels.push(label);
            return Ok(Some(self.samples.len() - 1));
        }
        // slot j < M is hit with probability M/n and is uniform given a hit
        let j = self.rng.random_range(0..self.seen);
        if (j as usize) < self.capacity {
            let slot = j as usize;
            self.samples[slot].copy_from_slice(x);
            self.labels[slot] = label;
            Ok(Some(slot))
        } else {
            Ok(None)
        }
    }

    /// Reservoir update with every sample of the batch, in order.
    pub fn update(&mut self, batch: &Batch) -> Result<()> {
        for (row, &label) in batch.x.row_iter().zip(&batch.labels) {
            self.offer(row, label)?;
        }
        Ok(())
    }

    /// Uniform draw of `min(m, len)` distinct slots. `ids` holds slot indices.
    pub fn retrieve(&mut self, m: usize) -> Batch {
        let len = self.len();
        let slots: Vec<usize> = if m >= len {
            (0..len).collect()
        } else {
            index::sample(&mut self.rng, len, m).into_vec()
        };
        self.gather(&slots)
    }

    /// Every stored sample in slot order.
    pub fn contents(&self) -> Batch {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    fn gather(&self, slots: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(slots.len() * self.input_dim);
        for &s in slots {
            data.extend_from_slice(&self.samples[s]);
        }
        Batch {
            x: Matrix::from_vec(slots.len(), self.input_dim, data).expect("sized"),
            labels: slots.iter().map(|&s| self.labels[s]).collect(),
            ids: slots.to_vec(),
        }
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&SNAPSHOT_TAG)?;
        w.write_u64::<LittleEndian>(self.capacity as u64)?;
        w.write_u64::<LittleEndian>(self.seen)?;
        w.write_u64::<LittleEndian>(self.input_dim as u64)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_all(&self.rng.get_seed())?;
        w.write_u64::<LittleEndian>(self.rng.get_stream())?;
        w.write_u128::<LittleEndian>(self.rng.get_word_pos())?;
        let payload_len = 8 + 8 * self.input_dim;
        for (x, &label) in self.samples.iter().zip(&self.labels) {
            w.write_u32::<LittleEndian>(payload_len as u32)?;
            w.write_u64::<LittleEndian>(label as u64)?;
            for &v in x {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: R) -> Result<Self> {
        let mut r = CountingReader { inner: r, offset: 0 };
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag).map_err(|e| r.format_err(e))?;
        if tag != SNAPSHOT_TAG {
            return Err(LabError::Format {
                offset: 0,
                message: format!("snapshot tag {tag:?}, expected {SNAPSHOT_TAG:?}"),
            });
        }
        let capacity = r.u64()? as usize;
        let seen = r.u64()?;
        let input_dim = r.u64()? as usize;
        let count = r.u64()? as usize;
        if capacity == 0 || count > capacity || count as u64 > seen {
            return Err(LabError::Format {
                offset: r.offset,
                message: format!("inconsistent header: capacity {capacity}, seen {seen}, records {count}"),
            });
        }
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(|e| r.format_err(e))?;
        let stream = r.u64()?;
        let word_pos = r.inner_u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let expected_len = 8 + 8 * input_dim;
        let mut samples = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset;
            let len = r.u32()? as usize;
            if len != expected_len {
                return Err(LabError::Format {
                    offset: at,
                    message: format!("record length {len}, expected {expected_len}"),
                });
            }
            labels.push(r.u64()? as usize);
            let mut x = Vec::with_capacity(input_dim);
            for _ in 0..input_dim {
                x.push(r.f64()?);
            }
            samples.push(x);
        }
        Ok(Self {
            capacity,
            input_dim,
            samples,
            labels,
            seen,
            rng,
        })
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

impl<R: Read> CountingReader<R> {
    fn format_err(&self, e: std::io::Error) -> LabError {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            LabError::Format {
                offset: self.offset,
                message: "truncated snapshot".into(),
            }
        } else {
            LabError::Io(e)
        }
    }

    fn u32(&mut self) -> Result<u32> {
        self.read_u32::<LittleEndian>().map_err(|e| self.format_err(e))
    }

    fn u64(&mut self) -> Result<u64> {
        self.read_u64::<LittleEndian>().map_err(|e| self.format_err(e))
    }

    fn inner_u128(&mut self) -> Result<u128> {
        self.read_u128::<LittleEndian>().map_err(|e| self.format_err(e))
    }

    fn f64(&mut self) -> Result<f64> {
        self.read_f64::<LittleEndian>().map_err(|e| self.format_err(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(start: usize, n: usize) -> Batch {
        Batch {
            x: Matrix::from_vec(n, 1, (start..start + n).map(|v| v as f64).collect()).unwrap(),
            labels: (start..start + n).collect(),
            ids: (0..n).collect(),
        }
    }

    #[test]
    fn below_capacity_keeps_everything() {
        let mut buf = ReplayBuffer::new(10, 1, 0).unwrap();
        buf.update(&batch(0, 4)).unwrap();
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.seen(), 4);
    }

    #[test]
    fn capacity_is_never_exceeded() {
        let mut buf = ReplayBuffer::new(7, 1, 3).unwrap();
        for i in 0..50 {
            buf.update(&batch(i * 3, 3)).unwrap();
            assert_eq!(buf.len() as u64, buf.seen().min(7));
        }
    }

    #[test]
    fn retrieval_rules() {
        let mut buf = ReplayBuffer::new(10, 1, 0).unwrap();
        assert!(buf.retrieve(5).is_empty());
        buf.update(&batch(0, 6)).unwrap();
        let all = buf.retrieve(10);
        let mut labels = all.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, (0..6).collect::<Vec<_>>());
        let some = buf.retrieve(4);
        let mut ids = some.ids.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn single_slot_reservoir_is_uniform() {
        // final occupant of an M = 1 reservoir after n offers is uniform on 0..n
        let n = 8;
        let trials = 20_000;
        let mut counts = vec![0usize; n];
        for t in 0..trials {
            let mut buf = ReplayBuffer::new(1, 1, t as u64).unwrap();
            buf.update(&batch(0, n)).unwrap();
            counts[buf.labels()[0]] += 1;
        }
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "freq {freq}");
        }
    }

    #[test]
    fn retrieval_is_uniform_per_slot() {
        let mut buf = ReplayBuffer::new(100, 1, 42).unwrap();
        buf.update(&batch(0, 100)).unwrap();
        let draws = 10_000;
        let mut counts = vec![0usize; 100];
        for _ in 0..draws {
            for id in buf.retrieve(10).ids {
                counts[id] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() <= 0.02, "freq {freq}");
        }
    }

    #[test]
    fn snapshot_round_trip_resumes_identically() {
        let mut buf = ReplayBuffer::new(5, 1, 9).unwrap();
        buf.update(&batch(0, 12)).unwrap();
        let mut bytes = Vec::new();
        buf.write_snapshot(&mut bytes).unwrap();
        let mut restored = ReplayBuffer::read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(restored, buf);
        buf.update(&batch(12, 20)).unwrap();
        restored.update(&batch(12, 20)).unwrap();
        assert_eq!(restored, buf);
    }

    #[test]
    fn snapshot_rejects_bad_tag_and_truncation() {
        let mut buf = ReplayBuffer::new(3, 2, 1).unwrap();
        buf.offer(&[0.1, 0.2], 1).unwrap();
        let mut bytes = Vec::new();
        buf.write_snapshot(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ReplayBuffer::read_snapshot(bad.as_slice()),
            Err(LabError::Format { offset: 0, .. })
        ));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            ReplayBuffer::read_snapshot(bytes.as_slice()),
            Err(LabError::Format { .. })
        ));
    }
}
