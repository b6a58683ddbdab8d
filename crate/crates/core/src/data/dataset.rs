use std::fs;
use std::path::Path;

use super::bytes::{put_u16, put_u32, to_u16, to_u32, Reader};
use crate::error::{MosaError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"MOSA";
pub const DATASET_VERSION: u32 = 1;
/// Magic, version, sample count and four `u16` dimensions.
pub const DATASET_HEADER_LEN: usize = 20;

/// Labelled images, stored as `C×H×W` rows of float64 pixels.
///
/// On disk pixels are float32, so values are expected to be
/// float32-representable for exact round trips.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let d = Dataset { channels, height, width, num_classes, images, labels };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.num_classes == 0 {
            return Err(MosaError::Data(format!(
                "dataset dimensions must be positive (C={}, H={}, W={}, classes={})",
                self.channels, self.height, self.width, self.num_classes
            )));
        }
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(MosaError::Data(format!(
                "{} pixels for {} samples of {} pixels",
                self.images.len(),
                self.labels.len(),
                self.image_len()
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(MosaError::Data(format!("sample {i} has label {l} but only {} classes", self.num_classes)));
        }
        if let Some(i) = self.images.iter().position(|v| !v.is_finite()) {
            return Err(MosaError::Data(format!(
                "non-finite pixel in sample {} at offset {}",
                i / self.image_len(),
                i % self.image_len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the listed samples into a `[B, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(MosaError::Index(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new([indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (t, labels) = self.batch(indices)?;
        Dataset::new(self.channels, self.height, self.width, self.num_classes, t.into_data(), labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(DATASET_HEADER_LEN + self.len() * (2 + 4 * self.image_len()));
        out.extend_from_slice(&DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, to_u32(self.len(), "sample count")?);
        for (v, what) in [
            (self.channels, "channels"),
            (self.height, "height"),
            (self.width, "width"),
            (self.num_classes, "class count"),
        ] {
            put_u16(&mut out, to_u16(v, what)?);
        }
        for i in 0..self.len() {
            put_u16(&mut out, self.labels[i] as u16);
            for &p in self.image(i) {
                out.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes, "dataset");
        let magic = r.array::<4>()?;
        if magic != DATASET_MAGIC {
            return Err(MosaError::Format(format!("dataset magic {magic:?} is not \"MOSA\"")));
        }
        let version = r.u32()?;
        if version > DATASET_VERSION {
            return Err(MosaError::Version { found: version, supported: DATASET_VERSION });
        }
        if version == 0 {
            return Err(MosaError::Format("dataset version 0 is invalid".into()));
        }
        let n = r.u32()? as usize;
        let (c, h, w, k) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
        let per = c * h * w;
        let need = n.checked_mul(2 + 4 * per).ok_or_else(|| MosaError::Format("dataset size overflows".into()))?;
        if r.remaining() < need {
            return Err(MosaError::Truncated(format!(
                "dataset declares {n} samples ({need} bytes) but only {} bytes follow the header",
                r.remaining()
            )));
        }
        if r.remaining() > need {
            return Err(MosaError::Format(format!("{} trailing bytes after the last sample", r.remaining() - need)));
        }
        let mut images = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u16()? as usize);
            for _ in 0..per {
                images.push(f64::from(r.f32()?));
            }
        }
        Dataset::new(c, h, w, k, images, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| MosaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MosaError::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}
