//! Image batches and small tensor utilities shared by every module.

use std::fmt;

use sha2::{Digest, Sha256};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

/// A batch of images laid out `B×C×H×W` with intensities in `[0, 1]`.
///
/// The wrapped tensor is always a CPU tensor with finite entries. Differentiable code paths
/// work on the raw [`Tensor`] (see [`ImageBatch::tensor`]); this type guards data crossing
/// module and file boundaries.
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        let size = data.size();
        if size.len() != 4 {
            return Err(Error::contract(format!(
                "image batch must be 4-D, got shape {size:?}"
            )));
        }
        if !matches!(data.kind(), Kind::Float | Kind::Double) {
            return Err(Error::contract(format!(
                "image batch must be floating point, got {:?}",
                data.kind()
            )));
        }
        if size.contains(&0) && size[0] != 0 {
            return Err(Error::contract(format!("degenerate image shape {size:?}")));
        }
        if data.numel() > 0 && !bool::try_from(data.isfinite().all())? {
            return Err(Error::contract("image batch contains non-finite values"));
        }
        Ok(Self {
            data: data.detach(),
        })
    }

    pub fn from_vec(values: Vec<f32>, shape: [usize; 4]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::contract(format!(
                "{} values cannot fill shape {shape:?}",
                values.len()
            )));
        }
        let dims: Vec<i64> = shape.iter().map(|&d| d as i64).collect();
        Self::new(Tensor::from_slice(&values).reshape(dims))
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let dims: Vec<i64> = shape.iter().map(|&d| d as i64).collect();
        Self {
            data: Tensor::zeros(dims, (Kind::Float, Device::Cpu)),
        }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        let dims: Vec<i64> = shape.iter().map(|&d| d as i64).collect();
        Self {
            data: Tensor::full(dims, value, (Kind::Float, Device::Cpu)),
        }
    }

    /// Empty batch with the given per-image geometry.
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros(
                [0, channels as i64, height as i64, width as i64],
                (Kind::Float, Device::Cpu),
            ),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// `[batch, channels, height, width]`.
    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.size();
        [s[0] as usize, s[1] as usize, s[2] as usize, s[3] as usize]
    }

    pub fn len(&self) -> usize {
        self.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-image geometry `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let [_, c, h, w] = self.shape();
        (c, h, w)
    }

    pub fn kind(&self) -> Kind {
        self.data.kind()
    }

    pub fn to_kind(&self, kind: Kind) -> ImageBatch {
        Self {
            data: self.data.to_kind(kind),
        }
    }

    /// Single image `i` as a batch of one.
    pub fn image(&self, i: usize) -> ImageBatch {
        Self {
            data: self.data.narrow(0, i as i64, 1).copy(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        if indices.is_empty() {
            let (c, h, w) = self.image_shape();
            return Self::empty(c, h, w).to_kind(self.kind());
        }
        let idx: Vec<i64> = indices.iter().map(|&i| i as i64).collect();
        Self {
            data: self.data.index_select(0, &Tensor::from_slice(&idx)),
        }
    }

    /// Concatenate along the batch axis. All parts must share per-image geometry.
    pub fn concat(parts: &[ImageBatch]) -> Result<ImageBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("cannot concatenate zero batches"))?;
        let geometry = first.image_shape();
        for p in parts {
            if p.image_shape() != geometry {
                return Err(Error::ShapeMismatch {
                    expected: shape_i64(&first.data)[1..].to_vec(),
                    actual: shape_i64(&p.data)[1..].to_vec(),
                });
            }
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.data).collect();
        Ok(Self {
            data: Tensor::cat(&tensors, 0),
        })
    }

    /// Split into single-image batches.
    pub fn split(&self) -> Vec<ImageBatch> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    /// Consecutive batches of at most `size` images.
    pub fn split_chunks(&self, size: usize) -> Vec<ImageBatch> {
        let size = size.max(1) as i64;
        let n = self.len() as i64;
        (0..n)
            .step_by(size as usize)
            .map(|s| Self {
                data: self.data.narrow(0, s, size.min(n - s)).copy(),
            })
            .collect()
    }

    pub fn clamp_unit(&self) -> ImageBatch {
        Self {
            data: self.data.clamp(0.0, 1.0),
        }
    }

    pub fn in_unit_range(&self) -> bool {
        if self.data.numel() == 0 {
            return true;
        }
        let lo = f64::try_from(self.data.min()).unwrap_or(f64::NAN);
        let hi = f64::try_from(self.data.max()).unwrap_or(f64::NAN);
        lo >= 0.0 && hi <= 1.0
    }

    pub fn to_vec(&self) -> Vec<f32> {
        to_f32_vec(&self.data)
    }

    /// Row-major pixels of each image as `f64`, for the CPU metric implementations.
    pub fn to_f64_images(&self) -> Vec<Vec<f64>> {
        let per = {
            let (c, h, w) = self.image_shape();
            c * h * w
        };
        let flat = to_f64_vec(&self.data);
        if per == 0 {
            return Vec::new();
        }
        flat.chunks(per).map(|c| c.to_vec()).collect()
    }

    /// SHA-256 over the shape and the little-endian `f32` pixel values.
    pub fn digest(&self) -> String {
        tensor_digest(&self.data)
    }
}

impl Clone for ImageBatch {
    fn clone(&self) -> Self {
        Self {
            data: self.data.copy(),
        }
    }
}

impl fmt::Debug for ImageBatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBatch")
            .field("shape", &self.shape())
            .field("kind", &self.kind())
            .finish()
    }
}

impl PartialEq for ImageBatch {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.to_vec() == other.to_vec()
    }
}

pub fn shape_i64(t: &Tensor) -> Vec<i64> {
    t.size()
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.size(), b.size());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            expected: sa,
            actual: sb,
        });
    }
    Ok(())
}

pub fn ensure_rank4(t: &Tensor) -> Result<(i64, i64, i64, i64)> {
    t.size4()
        .map_err(|_| Error::contract(format!("expected a 4-D tensor, got shape {:?}", t.size())))
}

pub fn to_f32_vec(t: &Tensor) -> Vec<f32> {
    let flat = t.detach().to_kind(Kind::Float).contiguous().view(-1);
    Vec::<f32>::try_from(&flat).expect("float tensor converts to Vec<f32>")
}

pub fn to_f64_vec(t: &Tensor) -> Vec<f64> {
    let flat = t.detach().to_kind(Kind::Double).contiguous().view(-1);
    Vec::<f64>::try_from(&flat).expect("double tensor converts to Vec<f64>")
}

/// Scalar value of a 0-d (or single element) tensor.
pub fn scalar(t: &Tensor) -> f64 {
    t.detach().to_kind(Kind::Double).double_value(&[])
}

pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.size() {
        h.update(d.to_le_bytes());
    }
    for v in to_f32_vec(t) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}


/// Images with integer identity labels, ordered as ingested.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    /// Human-readable identity names indexed by label.
    pub identity_names: Vec<String>,
}

impl LabeledImages {
    pub fn new(
        images: ImageBatch,
        labels: Vec<usize>,
        identity_names: Vec<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&m) = labels.iter().max() {
            if m >= identity_names.len() {
                return Err(Error::contract(format!("label {m} has no identity name")));
            }
        }
        Ok(Self {
            images,
            labels,
            identity_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_names.len()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledImages {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            identity_names: self.identity_names.clone(),
        }
    }
}
