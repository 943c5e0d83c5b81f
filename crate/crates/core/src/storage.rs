//! File-backed persistence: atomic JSON documents, fsynced JSONL logs and
//! content-addressed dataset ingestion.
//!
//! Layout under the data root:
//!
//! ```text
//! datasets/<dataset_id>/{manifest.json, images/<image_id>.<ext>, features/<plugin>@<version>/}
//! plugins/<plugin_id>/{descriptor.json, files/}
//! jobs/<job_id>/{job.json, state.json, events.jsonl, predictions.json,
//!                models/<v>/, batches/<b>/{batch.json, sessions.json, annotations.jsonl}}
//! tmp/
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{decode_gray, RasterFormat};

/// Writes `bytes` to a temp file next to `path`, fsyncs it and renames it over the target.
pub fn put_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no parent")))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = parent.join(format!(".{file_name}.{}.tmp", uuid::Uuid::new_v4().simple()));
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        if let Ok(dir) = File::open(parent) {
            let _ = dir.sync_all();
        }
        Ok(())
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Serializes `doc` as pretty JSON and writes it atomically.
pub fn put_document_atomic<T: Serialize + ?Sized>(path: &Path, doc: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(doc)?;
    bytes.push(b'\n');
    put_bytes_atomic(path, &bytes)
}

pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidDocument(format!("{}: {e}", path.display())))
}

/// Appends one JSON line and fsyncs before returning.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&line).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

/// Replays a JSONL log. A malformed or unterminated final line (a write cut short
/// by a crash) is dropped with a warning and truncated away so later appends start
/// on a clean line. Malformed lines elsewhere are an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;

    let mut records = Vec::new();
    let mut offset = 0usize;
    while offset < buf.len() {
        let (line, terminated) = match buf[offset..].iter().position(|&b| b == b'\n') {
            Some(n) => (&buf[offset..offset + n], true),
            None => (&buf[offset..], false),
        };
        let next = offset + line.len() + usize::from(terminated);
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        let parsed = if terminated {
            serde_json::from_slice::<T>(line).ok()
        } else {
            None
        };
        match parsed {
            Some(r) => records.push(r),
            None if next >= buf.len() => {
                log::warn!(
                    "{}: dropping partial trailing record ({} bytes)",
                    path.display(),
                    line.len()
                );
                file.set_len(offset as u64).map_err(|e| Error::io(path, e))?;
                file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
                file.sync_all().map_err(|e| Error::io(path, e))?;
                break;
            }
            None => {
                return Err(Error::InvalidDocument(format!(
                    "{}: malformed record at byte {offset}",
                    path.display()
                )))
            }
        }
        offset = next;
    }
    Ok(records)
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// First 12 hex characters of the SHA-256 of `bytes`.
pub fn content_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)[..12].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub image_id: String,
    /// Relative to the dataset directory.
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub items: Vec<DatasetItem>,
    #[serde(default)]
    pub reference_image: Option<String>,
}

impl DatasetManifest {
    pub fn item(&self, image_id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.image_id == image_id)
    }

    /// Images eligible for annotation (every image but the comparison reference).
    pub fn pool_ids(&self) -> Vec<String> {
        self.items
            .iter()
            .filter(|i| Some(&i.image_id) != self.reference_image.as_ref())
            .map(|i| i.image_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    /// Relative dataset directory, suitable for `JobSpec::dataset_ref`.
    pub dataset_ref: String,
    /// Source file name (relative to the source root) → image id.
    pub names: BTreeMap<String, String>,
    pub skipped: Vec<String>,
}

/// Handle on the data root.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["datasets", "plugins", "jobs", "tmp"] {
            ensure_dir(&root.join(sub))?;
        }
        let root = root.canonicalize().map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn dataset_dir(&self, dataset_id: &str) -> PathBuf {
        self.root.join("datasets").join(dataset_id)
    }

    pub fn plugins_dir(&self) -> PathBuf {
        self.root.join("plugins")
    }

    pub fn plugin_dir(&self, plugin_id: &str) -> PathBuf {
        self.plugins_dir().join(plugin_id)
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.jobs_dir().join(job_id)
    }

    pub fn job_doc(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("job.json")
    }

    pub fn job_state(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("state.json")
    }

    pub fn events(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("events.jsonl")
    }

    pub fn predictions(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("predictions.json")
    }

    pub fn model_dir(&self, job_id: &str, version: u32) -> PathBuf {
        self.job_dir(job_id).join("models").join(version.to_string())
    }

    pub fn batches_dir(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("batches")
    }

    pub fn batch_dir(&self, job_id: &str, batch_id: &str) -> PathBuf {
        self.batches_dir(job_id).join(batch_id)
    }

    pub fn annotations(&self, job_id: &str, batch_id: &str) -> PathBuf {
        self.batch_dir(job_id, batch_id).join("annotations.jsonl")
    }

    /// Extracted features of one dataset under one extractor, shared by all jobs.
    pub fn feature_cache_dir(&self, dataset_id: &str, plugin_id: &str, version: &str) -> PathBuf {
        let safe = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
                .collect()
        };
        self.dataset_dir(dataset_id)
            .join("features")
            .join(format!("{}@{}", safe(plugin_id), safe(version)))
    }

    pub fn scratch_dir(&self) -> PathBuf {
        self.root.join("tmp")
    }

    pub fn load_dataset(&self, dataset_ref: &str) -> Result<DatasetManifest> {
        read_document(&self.resolve(dataset_ref).join("manifest.json"))
    }

    /// Absolute path of a dataset image.
    pub fn image_path(&self, manifest: &DatasetManifest, image_id: &str) -> Option<PathBuf> {
        manifest
            .item(image_id)
            .map(|item| self.dataset_dir(&manifest.dataset_id).join(&item.path))
    }

    /// Ingests a directory tree or a ZIP archive of images.
    ///
    /// Image ids are content hashes, so re-ingesting the same files yields the same
    /// manifest. A file named `reference.<ext>` becomes the comparison reference image.
    pub fn ingest_dataset(&self, source: &Path) -> Result<IngestReport> {
        let files = read_source(source)?;

        let mut accepted: Vec<(DatasetItem, Vec<u8>, bool)> = Vec::new();
        let mut skipped = Vec::new();
        let mut names = BTreeMap::new();
        for (name, bytes) in files {
            let decoded = RasterFormat::sniff(&bytes).and_then(|_| decode_gray(&bytes).ok());
            let Some((format, gray)) = decoded else {
                skipped.push(name);
                continue;
            };
            let image_id = content_id(&bytes);
            names.insert(name.clone(), image_id.clone());
            let is_reference = Path::new(&name)
                .file_stem()
                .is_some_and(|s| s == "reference");
            if let Some(existing) = accepted.iter_mut().find(|(i, _, _)| i.image_id == image_id) {
                existing.2 |= is_reference;
                continue;
            }
            let item = DatasetItem {
                path: format!("images/{image_id}.{}", format.extension()),
                image_id,
                width: gray.width(),
                height: gray.height(),
                format: format.extension().to_string(),
            };
            accepted.push((item, bytes, is_reference));
        }
        if accepted.is_empty() {
            return Err(Error::EmptySource {
                skipped: skipped.len(),
            });
        }
        if !skipped.is_empty() {
            log::warn!(
                "ingest {}: skipped {} undecodable or unsupported files",
                source.display(),
                skipped.len()
            );
        }
        accepted.sort_by(|a, b| a.0.image_id.cmp(&b.0.image_id));
        let reference_image = accepted
            .iter()
            .find(|(_, _, r)| *r)
            .map(|(i, _, _)| i.image_id.clone());

        let mut id_material = String::new();
        for (item, _, _) in &accepted {
            id_material.push_str(&item.image_id);
            id_material.push('\n');
        }
        if let Some(r) = &reference_image {
            id_material.push_str("reference:");
            id_material.push_str(r);
        }
        let dataset_id = content_id(id_material.as_bytes());
        let dir = self.dataset_dir(&dataset_id);
        ensure_dir(&dir.join("images"))?;
        for (item, bytes, _) in &accepted {
            let path = dir.join(&item.path);
            if !path.exists() {
                put_bytes_atomic(&path, bytes)?;
            }
        }
        let manifest = DatasetManifest {
            dataset_id: dataset_id.clone(),
            items: accepted.into_iter().map(|(i, _, _)| i).collect(),
            reference_image,
        };
        put_document_atomic(&dir.join("manifest.json"), &manifest)?;
        Ok(IngestReport {
            manifest,
            dataset_ref: format!("datasets/{dataset_id}"),
            names,
            skipped,
        })
    }
}

/// Reads every file of a directory tree or ZIP archive, named by relative path.
pub fn read_source(source: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let meta = fs::metadata(source).map_err(|e| Error::io(source, e))?;
    if meta.is_dir() {
        read_directory(source)
    } else {
        let bytes = fs::read(source).map_err(|e| Error::io(source, e))?;
        read_zip(&bytes)
    }
}

fn read_directory(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        let name = entry
            .path()
            .strip_prefix(dir)
            .unwrap_or(entry.path())
            .to_string_lossy()
            .into_owned();
        out.push((name, bytes));
    }
    Ok(out)
}

/// Reads every regular file entry of a ZIP archive into memory.
pub fn read_zip(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut archive = zip::ZipArchive::new(std::io::Cursor::new(bytes))
        .map_err(|e| Error::CorruptArchive(e.to_string()))?;
    let mut out = Vec::new();
    for i in 0..archive.len() {
        let mut entry = archive
            .by_index(i)
            .map_err(|e| Error::CorruptArchive(e.to_string()))?;
        if !entry.is_file() {
            continue;
        }
        let name = entry
            .enclosed_name()
            .ok_or_else(|| Error::CorruptArchive(format!("unsafe entry name `{}`", entry.name())))?
            .to_string_lossy()
            .into_owned();
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry
            .read_to_end(&mut data)
            .map_err(|e| Error::CorruptArchive(format!("{name}: {e}")))?;
        out.push((name, data));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Builds an in-memory ZIP archive from `(name, bytes)` entries.
pub fn write_zip(entries: &[(String, Vec<u8>)]) -> Result<Vec<u8>> {
    let mut writer = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    let options = zip::write::SimpleFileOptions::default().unix_permissions(0o755);
    for (name, data) in entries {
        writer
            .start_file(name.as_str(), options)
            .map_err(|e| Error::CorruptArchive(e.to_string()))?;
        writer
            .write_all(data)
            .map_err(|e| Error::CorruptArchive(e.to_string()))?;
    }
    let cursor = writer
        .finish()
        .map_err(|e| Error::CorruptArchive(e.to_string()))?;
    Ok(cursor.into_inner())
}
