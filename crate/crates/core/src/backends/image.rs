use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::{GenericImageView, ImageFormat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid base64 payload: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("image `{0}` is a simulated vector, not pixels")]
    NotPixels(String),
    #[error("image `{0}` carries pixels, not a simulated vector")]
    NotVector(String),
    #[error("content hash mismatch for `{id}`: recorded {recorded}, actual {actual}")]
    HashMismatch {
        id: String,
        recorded: String,
        actual: String,
    },
}

/// Where an image's content lives. Exactly one kind per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    File { path: PathBuf },
    Inline { media_type: String, data: String },
    Vector { values: Vec<f64> },
}

/// Reference to a source or edited image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    /// Lowercase hex SHA-256 of the payload bytes (vectors hash their
    /// little-endian `f64` encoding). May be left empty in hand-written
    /// task files; see [`ImageRef::complete`].
    #[serde(default)]
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub payload: ImagePayload,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn vector_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn media_type_of(format: ImageFormat) -> &'static str {
    format.to_mime_type()
}

impl ImageRef {
    pub fn from_vector(id: impl Into<String>, values: Vec<f64>) -> Self {
        ImageRef {
            id: id.into(),
            content_hash: sha256_hex(&vector_bytes(&values)),
            width: None,
            height: None,
            payload: ImagePayload::Vector { values },
        }
    }

    /// Wraps encoded image bytes inline, probing format and dimensions.
    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self, ImageError> {
        let format = image::guess_format(bytes)?;
        let (w, h) = image::ImageReader::with_format(Cursor::new(bytes), format).into_dimensions()?;
        Ok(ImageRef {
            id: id.into(),
            content_hash: sha256_hex(bytes),
            width: Some(w),
            height: Some(h),
            payload: ImagePayload::Inline {
                media_type: media_type_of(format).to_string(),
                data: BASE64.encode(bytes),
            },
        })
    }

    /// References an image file on disk. The file is read once to hash it
    /// and probe its dimensions; it is never modified.
    pub fn from_file(id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref().to_path_buf();
        let bytes = fs::read(&path).map_err(|source| ImageError::Io {
            path: path.clone(),
            source,
        })?;
        let (width, height) = match image::guess_format(&bytes).ok().and_then(|f| {
            image::ImageReader::with_format(Cursor::new(&bytes), f)
                .into_dimensions()
                .ok()
        }) {
            Some((w, h)) => (Some(w), Some(h)),
            None => (None, None),
        };
        Ok(ImageRef {
            id: id.into(),
            content_hash: sha256_hex(&bytes),
            width,
            height,
            payload: ImagePayload::File { path },
        })
    }

    pub fn vector(&self) -> Result<&[f64], ImageError> {
        match &self.payload {
            ImagePayload::Vector { values } => Ok(values),
            _ => Err(ImageError::NotVector(self.id.clone())),
        }
    }

    pub fn is_vector(&self) -> bool {
        matches!(self.payload, ImagePayload::Vector { .. })
    }

    /// Encoded pixel bytes of a file or inline image.
    pub fn bytes(&self) -> Result<Vec<u8>, ImageError> {
        match &self.payload {
            ImagePayload::File { path } => fs::read(path).map_err(|source| ImageError::Io {
                path: path.clone(),
                source,
            }),
            ImagePayload::Inline { data, .. } => Ok(BASE64.decode(data)?),
            ImagePayload::Vector { .. } => Err(ImageError::NotPixels(self.id.clone())),
        }
    }

    /// Hash of whatever the payload currently resolves to.
    pub fn compute_hash(&self) -> Result<String, ImageError> {
        match &self.payload {
            ImagePayload::Vector { values } => Ok(sha256_hex(&vector_bytes(values))),
            _ => Ok(sha256_hex(&self.bytes()?)),
        }
    }

    /// Fills in a missing hash (and, for files, the dimensions), or checks
    /// a recorded one against the payload.
    pub fn complete(&mut self) -> Result<(), ImageError> {
        if !self.content_hash.is_empty() {
            return self.verify();
        }
        if let ImagePayload::File { path } = &self.payload {
            *self = ImageRef::from_file(self.id.clone(), path.clone())?;
        } else {
            self.content_hash = self.compute_hash()?;
        }
        Ok(())
    }

    pub fn verify(&self) -> Result<(), ImageError> {
        let actual = self.compute_hash()?;
        if actual != self.content_hash {
            return Err(ImageError::HashMismatch {
                id: self.id.clone(),
                recorded: self.content_hash.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// File extension used for content-addressed blobs.
    pub fn extension(&self) -> &str {
        match &self.payload {
            ImagePayload::File { path } => path.extension().and_then(|e| e.to_str()).unwrap_or("bin"),
            ImagePayload::Inline { media_type, .. } => ImageFormat::from_mime_type(media_type)
                .and_then(|f| f.extensions_str().first().copied())
                .unwrap_or("bin"),
            ImagePayload::Vector { .. } => "vec",
        }
    }
}

/// Encoded bytes of a pixel image, shrunk so that `width * height <=
/// max_pixels`. Works on a decoded copy; the original bytes are untouched.
/// Returns the input unchanged when it already fits.
pub fn downscale_to_fit(bytes: &[u8], max_pixels: u64) -> Result<(Vec<u8>, u32, u32), ImageError> {
    let format = image::guess_format(bytes)?;
    let img = image::load_from_memory_with_format(bytes, format)?;
    let (w, h) = img.dimensions();
    let area = u64::from(w) * u64::from(h);
    if area <= max_pixels {
        return Ok((bytes.to_vec(), w, h));
    }
    let scale = (max_pixels as f64 / area as f64).sqrt();
    let mut nw = ((f64::from(w) * scale).floor() as u32).max(1);
    let mut nh = ((f64::from(h) * scale).floor() as u32).max(1);
    while u64::from(nw) * u64::from(nh) > max_pixels {
        if nw >= nh {
            nw -= 1;
        } else {
            nh -= 1;
        }
    }
    let resized = img.resize_exact(nw, nh, image::imageops::FilterType::Triangle);
    let mut out = Vec::new();
    resized.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok((out, nw, nh))
}
