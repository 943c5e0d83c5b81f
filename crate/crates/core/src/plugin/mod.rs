//! Plugin registry: uploaded stage implementations, their approval state and
//! the builtin stages registered alongside them.

mod conformance;
mod host;
pub mod protocol;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::StageKind;
use crate::stages::builtin::BuiltinStage;
use crate::storage::{ensure_dir, put_document_atomic, read_document, read_zip};

pub use conformance::{conformance_check, ConformanceReport, MethodCheck};
pub use host::{PluginHost, DEFAULT_TIMEOUT};

/// Stage kind of a plugin; builtins carry their own variant so they can be told
/// apart while still filling the same slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PluginStage {
    External(StageKind),
    Builtin(StageKind),
}

impl PluginStage {
    pub fn stage(self) -> StageKind {
        match self {
            PluginStage::External(s) | PluginStage::Builtin(s) => s,
        }
    }

    pub fn is_builtin(self) -> bool {
        matches!(self, PluginStage::Builtin(_))
    }
}

impl fmt::Display for PluginStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PluginStage::External(s) => write!(f, "{s}"),
            PluginStage::Builtin(s) => write!(f, "builtin_{s}"),
        }
    }
}

impl Serialize for PluginStage {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PluginStage {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        let (builtin, base) = match raw.strip_prefix("builtin_") {
            Some(rest) => (true, rest),
            None => (false, raw.as_str()),
        };
        let stage: StageKind = serde_json::from_value(serde_json::Value::String(base.to_string()))
            .map_err(|_| serde::de::Error::custom(format!("unknown stage kind `{raw}`")))?;
        Ok(if builtin {
            PluginStage::Builtin(stage)
        } else {
            PluginStage::External(stage)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Public,
    Private { owner_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approval {
    Uploaded,
    Approved { by: String },
    Rejected { by: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub plugin_id: String,
    pub name: String,
    pub version: String,
    pub stage_kind: PluginStage,
    pub visibility: Visibility,
    pub approval: Approval,
    /// argv prefix; `{plugin_dir}` expands to the extracted archive directory.
    pub entry_command: Vec<String>,
    /// Directory the uploaded archive was extracted into.
    pub archive_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conformance: Option<ConformanceReport>,
}

impl PluginDescriptor {
    pub fn builtin(&self) -> Option<BuiltinStage> {
        if self.stage_kind.is_builtin() {
            BuiltinStage::from_id(&self.plugin_id)
        } else {
            None
        }
    }

    pub fn is_approved(&self) -> bool {
        matches!(self.approval, Approval::Approved { .. })
    }

    pub fn visible_to(&self, viewer: Option<&str>) -> bool {
        match &self.visibility {
            Visibility::Public => true,
            Visibility::Private { owner_id } => viewer == Some(owner_id.as_str()),
        }
    }
}

/// `manifest.json` at the root of an uploaded plugin archive.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginManifest {
    pub name: String,
    pub version: String,
    pub stage_kind: StageKind,
    pub entry_command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Approved,
    Rejected(String),
}

/// Identity of whoever reviews an uploaded plugin.
#[derive(Debug, Clone)]
pub struct Reviewer {
    pub id: String,
    pub is_admin: bool,
}

#[derive(Debug)]
pub struct PluginRegistry {
    dir: PathBuf,
    plugins: RwLock<BTreeMap<String, PluginDescriptor>>,
}

impl PluginRegistry {
    /// Loads persisted descriptors from `dir` and registers the builtin stages.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        ensure_dir(&dir)?;
        let mut plugins = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let doc = entry.path().join("descriptor.json");
            if doc.exists() {
                let d: PluginDescriptor = read_document(&doc)?;
                plugins.insert(d.plugin_id.clone(), d);
            }
        }
        for d in crate::stages::builtin::descriptors() {
            plugins.insert(d.plugin_id.clone(), d);
        }
        Ok(Self {
            dir,
            plugins: RwLock::new(plugins),
        })
    }

    pub fn get(&self, plugin_id: &str) -> Option<PluginDescriptor> {
        self.plugins.read().unwrap().get(plugin_id).cloned()
    }

    pub fn list(&self) -> Vec<PluginDescriptor> {
        self.plugins.read().unwrap().values().cloned().collect()
    }

    /// Registers an uploaded ZIP archive. The plugin starts out `Uploaded` and,
    /// unless `public` is set, private to its owner.
    pub fn register_archive(&self, archive: &[u8], owner: &str, public: bool) -> Result<PluginDescriptor> {
        let entries = read_zip(archive)?;
        let manifest_bytes = entries
            .iter()
            .find(|(name, _)| name == "manifest.json")
            .map(|(_, b)| b)
            .ok_or(Error::ManifestMissing)?;
        let manifest: PluginManifest = serde_json::from_slice(manifest_bytes)
            .map_err(|e| Error::ManifestInvalid(e.to_string()))?;
        if manifest.name.trim().is_empty() || manifest.version.trim().is_empty() {
            return Err(Error::ManifestInvalid("name and version must be non-empty".into()));
        }
        if manifest.entry_command.is_empty() {
            return Err(Error::ManifestInvalid("entry_command is empty".into()));
        }

        let mut plugins = self.plugins.write().unwrap();
        if plugins
            .values()
            .any(|p| p.name == manifest.name && p.version == manifest.version)
        {
            return Err(Error::DuplicateNameVersion {
                name: manifest.name,
                version: manifest.version,
            });
        }
        let plugin_id = format!("p-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
        let root = self.dir.join(&plugin_id);
        let files = root.join("files");
        extract(archive, &files)?;
        let descriptor = PluginDescriptor {
            plugin_id: plugin_id.clone(),
            name: manifest.name,
            version: manifest.version,
            stage_kind: PluginStage::External(manifest.stage_kind),
            visibility: if public {
                Visibility::Public
            } else {
                Visibility::Private {
                    owner_id: owner.to_string(),
                }
            },
            approval: Approval::Uploaded,
            entry_command: manifest.entry_command,
            archive_path: Some(files),
            conformance: None,
        };
        put_document_atomic(&root.join("descriptor.json"), &descriptor)?;
        plugins.insert(plugin_id, descriptor.clone());
        Ok(descriptor)
    }

    pub fn approve(&self, plugin_id: &str, reviewer: &Reviewer, verdict: Verdict) -> Result<PluginDescriptor> {
        if !reviewer.is_admin {
            return Err(Error::Forbidden(format!("{} is not an administrator", reviewer.id)));
        }
        let mut plugins = self.plugins.write().unwrap();
        let plugin = plugins
            .get_mut(plugin_id)
            .ok_or_else(|| Error::NotFound(format!("plugin `{plugin_id}`")))?;
        if plugin.approval != Approval::Uploaded {
            return Err(Error::AlreadyDecided(plugin_id.to_string()));
        }
        let mut updated = plugin.clone();
        updated.approval = match verdict {
            Verdict::Approved => Approval::Approved {
                by: reviewer.id.clone(),
            },
            Verdict::Rejected(reason) => Approval::Rejected {
                by: reviewer.id.clone(),
                reason,
            },
        };
        put_document_atomic(&self.dir.join(plugin_id).join("descriptor.json"), &updated)?;
        *plugin = updated.clone();
        Ok(updated)
    }

    pub fn attach_conformance(&self, plugin_id: &str, report: ConformanceReport) -> Result<PluginDescriptor> {
        let mut plugins = self.plugins.write().unwrap();
        let plugin = plugins
            .get_mut(plugin_id)
            .ok_or_else(|| Error::NotFound(format!("plugin `{plugin_id}`")))?;
        let mut updated = plugin.clone();
        updated.conformance = Some(report);
        if !updated.stage_kind.is_builtin() {
            put_document_atomic(&self.dir.join(plugin_id).join("descriptor.json"), &updated)?;
        }
        *plugin = updated.clone();
        Ok(updated)
    }
}

fn extract(archive: &[u8], dest: &Path) -> Result<()> {
    let mut zip = zip::ZipArchive::new(std::io::Cursor::new(archive))
        .map_err(|e| Error::CorruptArchive(e.to_string()))?;
    ensure_dir(dest)?;
    for i in 0..zip.len() {
        let mut entry = zip
            .by_index(i)
            .map_err(|e| Error::CorruptArchive(e.to_string()))?;
        let rel = entry
            .enclosed_name()
            .ok_or_else(|| Error::CorruptArchive(format!("unsafe entry name `{}`", entry.name())))?;
        let out = dest.join(rel);
        if entry.is_dir() {
            ensure_dir(&out)?;
            continue;
        }
        if let Some(parent) = out.parent() {
            ensure_dir(parent)?;
        }
        let mut file = fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
        std::io::copy(&mut entry, &mut file).map_err(|e| Error::io(&out, e))?;
        #[cfg(unix)]
        if let Some(mode) = entry.unix_mode() {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&out, fs::Permissions::from_mode(mode & 0o777))
                .map_err(|e| Error::io(&out, e))?;
        }
    }
    Ok(())
}
