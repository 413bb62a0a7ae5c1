//! Fixed-capacity episodic memory of encoded feature maps maintained by
//! reservoir sampling, plus its checkpoint format and exact byte accounting
//! for the storage-efficiency claim.
//!
//! Checkpoint layout (all little-endian): magic `CLFDBUF\0`, version u32,
//! capacity u64, seen u64, entry count u32, map shape 3 x u32, logits dim
//! u32, quantize flag u8; then per entry the map values (f32, or f16 when
//! quantized), a 4-byte label, a 4-byte task id, and the logits as f32.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ffe::EncodedMap;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CLFDBUF\0";
const VERSION: u32 = 1;
const HEADER_BYTES: usize = 8 + 4 + 8 + 8 + 4 + 12 + 4 + 1;

/// One stored sample: an encoded map, its label and task of origin, and the
/// network outputs recorded at insertion when the strategy needs them.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry<F: Scalar> {
    pub map: EncodedMap<F>,
    pub label: u32,
    pub task_id: u32,
    pub logits: Option<Array1<F>>,
}

impl<F: Scalar> BufferEntry<F> {
    pub fn new(map: EncodedMap<F>, label: u32, task_id: u32, logits: Option<Array1<F>>) -> Self {
        Self {
            map,
            label,
            task_id,
            logits,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReservoirBuffer<F: Scalar> {
    capacity: usize,
    entries: Vec<BufferEntry<F>>,
    seen: u64,
    quantize: bool,
}

impl<F: Scalar> ReservoirBuffer<F> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(4096)),
            seen: 0,
            quantize: false,
        }
    }

    /// Store maps through a 16-bit float round-trip. Applied once at
    /// insertion; replay stays bit-identical to what was stored.
    pub fn with_quantization(mut self, on: bool) -> Self {
        self.quantize = on;
        self
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

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn quantized(&self) -> bool {
        self.quantize
    }

    pub fn entries(&self) -> &[BufferEntry<F>] {
        &self.entries
    }

    fn quantize_entry(&self, mut entry: BufferEntry<F>) -> BufferEntry<F> {
        if self.quantize {
            let source = entry.map.source_shape();
            let values = entry
                .map
                .into_values()
                .mapv(|v| F::real(f16_to_f32(f32_to_f16(v.as_f64() as f32)) as f64));
            entry.map = EncodedMap::new(values, source).expect("quantized map stays valid");
        }
        entry
    }

    /// Classic streaming reservoir step: while filling, append; afterwards
    /// the new item replaces a random slot with probability capacity /
    /// (seen + 1).
    pub fn reservoir_insert<R: Rng>(&mut self, entry: BufferEntry<F>, rng: &mut R) {
        if self.capacity == 0 {
            self.seen += 1;
            return;
        }
        let entry = self.quantize_entry(entry);
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            let r = rng.random_range(0..=self.seen);
            if r < self.capacity as u64 {
                self.entries[r as usize] = entry;
            }
        }
        self.seen += 1;
    }

    /// Draw `k` entries: uniformly with replacement when `k` exceeds the
    /// buffer, without replacement (a partial shuffle) otherwise.
    pub fn sample_batch<R: Rng>(&self, k: usize, rng: &mut R) -> Result<Vec<&BufferEntry<F>>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let n = self.entries.len();
        if k > n {
            Ok((0..k)
                .map(|_| &self.entries[rng.random_range(0..n)])
                .collect())
        } else {
            let mut indices: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.random_range(i..n);
                indices.swap(i, j);
            }
            Ok(indices[..k].iter().map(|&i| &self.entries[i]).collect())
        }
    }

    fn map_shape(&self) -> Option<(usize, usize, usize)> {
        self.entries.first().map(|e| e.map.values().dim())
    }

    fn logits_dim(&self) -> usize {
        self.entries
            .first()
            .and_then(|e| e.logits.as_ref())
            .map_or(0, |l| l.len())
    }

    fn per_value_bytes(&self) -> usize {
        if self.quantize {
            2
        } else {
            4
        }
    }

    /// Exact serialized byte count: header plus every entry's payload.
    pub fn memory_footprint(&self) -> usize {
        let map_bytes = self
            .map_shape()
            .map_or(0, |(c, h, w)| c * h * w * self.per_value_bytes());
        let logits_bytes = self.logits_dim() * 4;
        HEADER_BYTES + self.entries.len() * (map_bytes + 4 + 4 + logits_bytes)
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        let (c, h, wd) = self.map_shape().unwrap_or((0, 0, 0));
        let logits_dim = self.logits_dim();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&self.seen.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for dim in [c, h, wd] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&(logits_dim as u32).to_le_bytes())?;
        w.write_all(&[self.quantize as u8])?;

        for entry in &self.entries {
            if entry.map.values().dim() != (c, h, wd) {
                return Err(Error::ShapeMismatch {
                    context: "buffer checkpoint",
                    expected: format!("{:?}", (c, h, wd)),
                    got: format!("{:?}", entry.map.values().dim()),
                });
            }
            for v in entry.map.values().iter() {
                let v32 = v.as_f64() as f32;
                if self.quantize {
                    w.write_all(&f32_to_f16(v32).to_le_bytes())?;
                } else {
                    w.write_all(&v32.to_le_bytes())?;
                }
            }
            w.write_all(&entry.label.to_le_bytes())?;
            w.write_all(&entry.task_id.to_le_bytes())?;
            match (&entry.logits, logits_dim) {
                (Some(l), d) if l.len() == d => {
                    for v in l.iter() {
                        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                    }
                }
                (None, 0) => {}
                _ => {
                    return Err(Error::ShapeMismatch {
                        context: "buffer checkpoint logits",
                        expected: format!("{logits_dim}"),
                        got: format!("{:?}", entry.logits.as_ref().map(|l| l.len())),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("buffer checkpoint: bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "buffer checkpoint: unsupported version {version}"
            )));
        }
        let capacity = read_u64(&mut r)? as usize;
        let seen = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let h = read_u32(&mut r)? as usize;
        let wd = read_u32(&mut r)? as usize;
        let logits_dim = read_u32(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let quantize = flag[0] != 0;

        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let n = c * h * wd;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let v = if quantize {
                    let mut b = [0u8; 2];
                    r.read_exact(&mut b)?;
                    f16_to_f32(u16::from_le_bytes(b))
                } else {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    f32::from_le_bytes(b)
                };
                values.push(F::real(v as f64));
            }
            let map = Array3::from_shape_vec((c, h, wd), values)
                .map_err(|e| Error::Format(format!("buffer checkpoint: {e}")))?;
            let label = read_u32(&mut r)?;
            let task_id = read_u32(&mut r)?;
            let logits = if logits_dim > 0 {
                let mut l = Array1::zeros(logits_dim);
                for v in l.iter_mut() {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    *v = F::real(f32::from_le_bytes(b) as f64);
                }
                Some(l)
            } else {
                None
            };
            // Source shape is twice the stored map by construction.
            let map = EncodedMap::new(map, (h * 2, wd * 2))?;
            entries.push(BufferEntry {
                map,
                label,
                task_id,
                logits,
            });
        }
        Ok(Self {
            capacity,
            entries,
            seen,
            quantize,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.memory_footprint());
        self.to_writer(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }
}

/// f32 -> IEEE binary16 with round-to-nearest-even.
pub fn f32_to_f16(v: f32) -> u16 {
    let bits = v.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let frac = bits & 0x007f_ffff;

    if exp == 0xff {
        // Inf / NaN
        return sign | 0x7c00 | if frac != 0 { 0x0200 } else { 0 };
    }
    let unbiased = exp - 127;
    if unbiased > 15 {
        return sign | 0x7c00; // overflow to inf
    }
    if unbiased >= -14 {
        // Normal half.
        let half_exp = (unbiased + 15) as u32;
        let mut mantissa = frac >> 13;
        let round_bits = frac & 0x1fff;
        if round_bits > 0x1000 || (round_bits == 0x1000 && (mantissa & 1) == 1) {
            mantissa += 1;
        }
        let combined = (half_exp << 10) + mantissa; // mantissa overflow bumps exponent
        return sign | combined as u16;
    }
    if unbiased >= -24 {
        // Subnormal half: shift the implicit-1 mantissa into place.
        let full = frac | 0x0080_0000;
        let shift = (-14 - unbiased) as u32 + 13;
        let mantissa = full >> shift;
        let dropped = full & ((1u32 << shift) - 1);
        let half_point = 1u32 << (shift - 1);
        let mut m = mantissa;
        if dropped > half_point || (dropped == half_point && (m & 1) == 1) {
            m += 1;
        }
        return sign | m as u16;
    }
    sign // underflow to signed zero
}

/// IEEE binary16 -> f32 (exact embedding).
pub fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let frac = (h & 0x03ff) as u32;
    let bits = if exp == 0 {
        if frac == 0 {
            sign
        } else {
            // Subnormal: normalize.
            let mut e = 0i32;
            let mut f = frac;
            while f & 0x0400 == 0 {
                f <<= 1;
                e -= 1;
            }
            f &= 0x03ff;
            sign | (((113 + e) as u32) << 23) | (f << 13)
        }
    } else if exp == 0x1f {
        sign | 0x7f80_0000 | (frac << 13)
    } else {
        sign | ((exp + 112) << 23) | (frac << 13)
    };
    f32::from_bits(bits)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
