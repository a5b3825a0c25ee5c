//! Identity-labelled image sets and the samplers that feed training.

use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::invalid;
use crate::face::{self, FaceParams};
use crate::image::ImageBuffer;
use crate::rng::{self, streams};
use crate::{Error, Result};

pub const DEFAULT_CROP_PROB: f64 = 0.5;
pub const DEFAULT_N_REF: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub id: String,
    pub images: Vec<ImageBuffer>,
    /// Generator parameters, known for synthetic identities.
    pub params: Option<FaceParams>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdentityDataset {
    identities: Vec<Identity>,
}

impl IdentityDataset {
    /// Rejects identities without images and duplicate ids.
    pub fn new(identities: Vec<Identity>) -> Result<Self> {
        for (i, ident) in identities.iter().enumerate() {
            if ident.images.is_empty() {
                return Err(invalid!("identity `{}` has no images", ident.id));
            }
            if identities[..i].iter().any(|o| o.id == ident.id) {
                return Err(invalid!("duplicate identity `{}`", ident.id));
            }
        }
        Ok(Self { identities })
    }

    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    pub fn get(&self, id: &str) -> Option<&Identity> {
        self.identities.iter().find(|i| i.id == id)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.identities.iter().map(|i| i.images.len()).sum()
    }

    fn image(&self, mut index: usize) -> &ImageBuffer {
        for ident in &self.identities {
            if index < ident.images.len() {
                return &ident.images[index];
            }
            index -= ident.images.len();
        }
        unreachable!("image index within count")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub identity_id: String,
    images: Vec<ImageBuffer>,
}

impl ReferenceSet {
    pub fn new(identity_id: impl Into<String>, images: Vec<ImageBuffer>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyReferences);
        }
        Ok(Self { identity_id: identity_id.into(), images })
    }

    pub fn images(&self) -> &[ImageBuffer] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// How [`sample_training_example_traced`] produced its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Crop,
    Resize,
}

/// A `crop_size x crop_size` training image: a random crop with probability
/// `crop_prob`, otherwise the whole image resized (bilinear).
pub fn sample_training_example<R: Rng + ?Sized>(
    dataset: &IdentityDataset,
    crop_size: usize,
    crop_prob: f64,
    rng: &mut R,
) -> Result<ImageBuffer> {
    sample_training_example_traced(dataset, crop_size, crop_prob, rng).map(|(img, _)| img)
}

pub fn sample_training_example_traced<R: Rng + ?Sized>(
    dataset: &IdentityDataset,
    crop_size: usize,
    crop_prob: f64,
    rng: &mut R,
) -> Result<(ImageBuffer, Branch)> {
    let count = dataset.image_count();
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let img = dataset.image(rng.random_range(0..count));
    training_view(img, crop_size, crop_prob, rng)
}

/// The crop-or-resize augmentation applied to a single image.
pub fn training_view<R: Rng + ?Sized>(
    img: &ImageBuffer,
    crop_size: usize,
    crop_prob: f64,
    rng: &mut R,
) -> Result<(ImageBuffer, Branch)> {
    if crop_size == 0 {
        return Err(invalid!("crop size must be positive"));
    }
    if rng::bernoulli(rng, crop_prob) {
        let (h, w) = img.dims();
        if crop_size > h.min(w) {
            return Err(invalid!("crop size {crop_size} exceeds image {h}x{w}"));
        }
        let top = rng.random_range(0..=h - crop_size);
        let left = rng.random_range(0..=w - crop_size);
        Ok((img.crop(top, left, crop_size, crop_size)?, Branch::Crop))
    } else if img.dims() == (crop_size, crop_size) {
        Ok((img.clone(), Branch::Resize))
    } else {
        Ok((img.resize_bilinear(crop_size, crop_size)?, Branch::Resize))
    }
}

/// Uniform draw from the reference set.
pub fn sample_reference<'r, R: Rng + ?Sized>(refs: &'r ReferenceSet, rng: &mut R) -> &'r ImageBuffer {
    &refs.images[rng.random_range(0..refs.images.len())]
}

/// Index of a uniform draw; used where the caller keeps its own image list.
pub fn sample_index<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    rng.random_range(0..n)
}

/// Synthetic identity `index` of the population seeded by `seed`.
pub fn synthetic_params(seed: u64, index: usize) -> FaceParams {
    let mut r = rng::stream(rng::derive_seed(seed, index as u64), streams::IDENTITY);
    FaceParams::sample(&mut r)
}

/// Render seed of image `image` of identity `index`.
pub fn synthetic_render_seed(seed: u64, index: usize, image: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, index as u64), 1 + image as u64)
}

/// `n_identities` synthetic faces with `images_per_identity` jittered renders
/// each; ids are `id000`, `id001`, ...
pub fn synthetic_dataset(
    n_identities: usize,
    images_per_identity: usize,
    size: usize,
    seed: u64,
) -> Result<IdentityDataset> {
    if images_per_identity == 0 {
        return Err(invalid!("need at least one image per identity"));
    }
    let mut identities = Vec::with_capacity(n_identities);
    for i in 0..n_identities {
        let params = synthetic_params(seed, i);
        let images = (0..images_per_identity)
            .map(|k| face::generate_face(&params, size, synthetic_render_seed(seed, i, k)))
            .collect::<Result<Vec<_>>>()?;
        identities.push(Identity { id: alloc::format!("id{i:03}"), images, params: Some(params) });
    }
    IdentityDataset::new(identities)
}
