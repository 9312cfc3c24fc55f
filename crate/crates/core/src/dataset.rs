//! User-curated training data: categories of images.
//!
//! The dataset is the ground truth the user edits from the development area.
//! It enforces the structural limits the prompt corpus assumes (at most ten
//! categories, unique names) and keeps decoded-image identity by pixel digest,
//! never by filename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GenericImageView, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::digest::sha256_parts;

/// Hard cap on categories; the system prompt tells the agent the same number.
pub const MAX_CATEGORIES: usize = 10;

/// Name of the escaping scheme used for category directory names.
pub const PATH_ESCAPE_SCHEME: &str = "percent-v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("category name is empty")]
    EmptyName,
    #[error("a category named {0:?} already exists")]
    DuplicateName(String),
    #[error("at most {MAX_CATEGORIES} categories are allowed")]
    CategoryLimitExceeded,
    #[error("no category named {0:?}")]
    UnknownCategory(String),
    #[error("payload {index} is not a PNG or JPEG image: {reason}")]
    UndecodableImage { index: usize, reason: String },
    #[error("storage error: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Png,
    Jpeg,
}

impl ImageKind {
    pub fn extension(self) -> &'static str {
        match self {
            ImageKind::Png => "png",
            ImageKind::Jpeg => "jpg",
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            ImageKind::Png => "image/png",
            ImageKind::Jpeg => "image/jpeg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    /// SHA-256 over the decoded RGBA pixels and dimensions.
    pub content_hash: String,
    pub width: u32,
    pub height: u32,
    /// Relative to the dataset root.
    pub storage_path: String,
    pub kind: ImageKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub images: Vec<ImageRef>,
    pub created_at: Millis,
    /// Escaped directory name new uploads are written to.
    pub dir: String,
}

impl Category {
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A decoded image that passed format checks, ready to be stored.
#[derive(Debug, Clone)]
pub struct DecodedImage {
    pub content_hash: String,
    pub width: u32,
    pub height: u32,
    pub kind: ImageKind,
}

/// Decodes PNG or JPEG bytes and computes the pixel digest.
pub fn decode_image(bytes: &[u8]) -> Result<(DecodedImage, image::DynamicImage), String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    let kind = match format {
        ImageFormat::Png => ImageKind::Png,
        ImageFormat::Jpeg => ImageKind::Jpeg,
        other => return Err(format!("unsupported format {other:?}")),
    };
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let (width, height) = img.dimensions();
    if width == 0 || height == 0 {
        return Err("image has zero area".into());
    }
    let content_hash = pixel_digest(&img);
    Ok((
        DecodedImage {
            content_hash,
            width,
            height,
            kind,
        },
        img,
    ))
}

pub fn pixel_digest(img: &image::DynamicImage) -> String {
    let rgba = img.to_rgba8();
    let (w, h) = rgba.dimensions();
    sha256_parts([
        w.to_le_bytes().as_slice(),
        h.to_le_bytes().as_slice(),
        rgba.as_raw().as_slice(),
    ])
}

/// Result of one upload call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct UploadReport {
    pub added: Vec<ImageRef>,
    /// Payload indices skipped because the category already holds those pixels.
    pub duplicates: Vec<usize>,
}

/// Serializable part of the dataset; image bytes live next to it on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path_escape: String,
    pub version: u64,
    pub next_image: u64,
    pub categories: Vec<Category>,
    /// Every image ever stored, including those of removed categories.
    pub stored: Vec<ImageRef>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingDataset {
    categories: Vec<Category>,
    version: u64,
    next_image: u64,
    blobs: BTreeMap<String, (ImageRef, Arc<Vec<u8>>)>,
    root: Option<PathBuf>,
}

impl TrainingDataset {
    /// An in-memory dataset; nothing touches the filesystem.
    pub fn new() -> Self {
        Self::default()
    }

    /// A dataset whose uploads are written under `root` as they arrive.
    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            ..Self::default()
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn category(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn non_empty_categories(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter().filter(|c| !c.is_empty())
    }

    pub fn has_training_data(&self) -> bool {
        self.non_empty_categories().next().is_some()
    }

    pub fn image_bytes(&self, id: &str) -> Option<Arc<Vec<u8>>> {
        self.blobs.get(id).map(|(_, b)| Arc::clone(b))
    }

    /// Stored images by id, including those of removed categories.
    pub fn blobs(&self) -> impl Iterator<Item = (&String, &(ImageRef, Arc<Vec<u8>>))> {
        self.blobs.iter()
    }

    pub fn total_images(&self) -> usize {
        self.categories.iter().map(|c| c.images.len()).sum()
    }

    fn position(&self, name: &str) -> Result<usize, DatasetError> {
        self.categories
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| DatasetError::UnknownCategory(name.to_string()))
    }

    fn validate_name(&self, name: &str) -> Result<String, DatasetError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(DatasetError::EmptyName);
        }
        Ok(name.to_string())
    }

    pub fn add_category(&mut self, name: &str, now: Millis) -> Result<&Category, DatasetError> {
        let name = self.validate_name(name)?;
        if self.category(&name).is_some() {
            return Err(DatasetError::DuplicateName(name));
        }
        if self.categories.len() >= MAX_CATEGORIES {
            return Err(DatasetError::CategoryLimitExceeded);
        }
        self.categories.push(Category {
            dir: escape_component(&name),
            name,
            images: Vec::new(),
            created_at: now,
        });
        self.version += 1;
        Ok(self.categories.last().expect("just pushed"))
    }

    /// Drops the category and its image associations. Stored files stay.
    pub fn remove_category(&mut self, name: &str) -> Result<(), DatasetError> {
        let idx = self.position(name)?;
        self.categories.remove(idx);
        self.version += 1;
        Ok(())
    }

    pub fn rename_category(&mut self, old: &str, new: &str) -> Result<(), DatasetError> {
        let idx = self.position(old)?;
        let new = self.validate_name(new)?;
        if new != old && self.category(&new).is_some() {
            return Err(DatasetError::DuplicateName(new));
        }
        let cat = &mut self.categories[idx];
        cat.dir = escape_component(&new);
        cat.name = new;
        self.version += 1;
        Ok(())
    }

    /// Appends decoded payloads to `category_name` in payload order.
    ///
    /// Pixel-identical duplicates within the category are skipped and listed
    /// in the report. On an undecodable payload the earlier successes are
    /// kept and the failing index is returned.
    pub fn upload_images<B: AsRef<[u8]>>(
        &mut self,
        category_name: &str,
        payloads: &[B],
    ) -> Result<UploadReport, DatasetError> {
        let idx = self.position(category_name)?;
        self.version += 1;
        let mut report = UploadReport::default();
        for (index, payload) in payloads.iter().enumerate() {
            let bytes = payload.as_ref();
            let (decoded, _) = decode_image(bytes)
                .map_err(|reason| DatasetError::UndecodableImage { index, reason })?;
            let cat = &self.categories[idx];
            if cat.images.iter().any(|r| r.content_hash == decoded.content_hash) {
                report.duplicates.push(index);
                continue;
            }
            self.next_image += 1;
            let id = format!("img-{:06}", self.next_image);
            let storage_path = format!("{}/{}.{}", cat.dir, id, decoded.kind.extension());
            let image_ref = ImageRef {
                id: id.clone(),
                content_hash: decoded.content_hash,
                width: decoded.width,
                height: decoded.height,
                storage_path,
                kind: decoded.kind,
            };
            if let Some(root) = &self.root {
                write_file(&root.join(&image_ref.storage_path), bytes)?;
            }
            self.blobs
                .insert(id, (image_ref.clone(), Arc::new(bytes.to_vec())));
            self.categories[idx].images.push(image_ref.clone());
            report.added.push(image_ref);
        }
        Ok(report)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            path_escape: PATH_ESCAPE_SCHEME.to_string(),
            version: self.version,
            next_image: self.next_image,
            categories: self.categories.clone(),
            stored: self.blobs.values().map(|(r, _)| r.clone()).collect(),
        }
    }

    /// Writes every stored image under `root` (used when a dataset that
    /// lived in memory is persisted for the first time).
    pub fn write_all(&self, root: &Path) -> Result<(), DatasetError> {
        for (image_ref, bytes) in self.blobs.values() {
            let path = root.join(&image_ref.storage_path);
            if !path.exists() {
                write_file(&path, bytes)?;
            }
        }
        Ok(())
    }

    /// Rebuilds a dataset from its manifest, reading image bytes from `root`.
    pub fn from_manifest(manifest: DatasetManifest, root: &Path) -> Result<Self, DatasetError> {
        if manifest.path_escape != PATH_ESCAPE_SCHEME {
            return Err(DatasetError::Storage(format!(
                "unknown path escape scheme {:?}",
                manifest.path_escape
            )));
        }
        let mut blobs = BTreeMap::new();
        for image_ref in &manifest.stored {
            let bytes = fs::read(root.join(&image_ref.storage_path))
                .map_err(|e| DatasetError::Storage(format!("{}: {e}", image_ref.storage_path)))?;
            blobs.insert(image_ref.id.clone(), (image_ref.clone(), Arc::new(bytes)));
        }
        for cat in &manifest.categories {
            if let Some(missing) = cat.images.iter().find(|r| !blobs.contains_key(&r.id)) {
                return Err(DatasetError::Storage(format!(
                    "image {} of {:?} missing from manifest",
                    missing.id, cat.name
                )));
            }
        }
        Ok(Self {
            categories: manifest.categories,
            version: manifest.version,
            next_image: manifest.next_image,
            blobs,
            root: Some(root.to_path_buf()),
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DatasetError::Storage(e.to_string()))?;
    }
    fs::write(path, bytes).map_err(|e| DatasetError::Storage(e.to_string()))
}

/// Percent-escapes everything outside `[A-Za-z0-9_-]`, byte-wise over UTF-8.
pub fn escape_component(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for b in name.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn unescape_component(escaped: &str) -> Option<String> {
    let bytes = escaped.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = escaped.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}
