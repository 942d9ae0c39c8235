//! Named base datasets and the scan that turns them into records.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{Record, Value};
use crate::schema::SchemaRegistry;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "gif", "bmp", "webp", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    DirectoryOfTextFiles,
    DirectoryOfFileGroups,
    SingleFile,
}

impl SourceKind {
    fn provided_fields(self) -> &'static [&'static str] {
        match self {
            SourceKind::DirectoryOfTextFiles | SourceKind::SingleFile => &["filename", "contents"],
            SourceKind::DirectoryOfFileGroups => &["listing", "text_content", "image_contents"],
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::DirectoryOfTextFiles => "directory-of-text-files",
            SourceKind::DirectoryOfFileGroups => "directory-of-file-groups",
            SourceKind::SingleFile => "single-file",
        })
    }
}

impl std::str::FromStr for SourceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "directory-of-text-files" => Ok(SourceKind::DirectoryOfTextFiles),
            "directory-of-file-groups" => Ok(SourceKind::DirectoryOfFileGroups),
            "single-file" => Ok(SourceKind::SingleFile),
            other => Err(Error::Registry(format!("unknown datasource kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSourceDescriptor {
    #[serde(skip)]
    pub dataset_id: String,
    pub kind: SourceKind,
    pub location: PathBuf,
    pub base_schema: String,
}

impl DataSourceDescriptor {
    pub fn new(dataset_id: &str, kind: SourceKind, location: impl Into<PathBuf>, base_schema: &str) -> Self {
        DataSourceDescriptor {
            dataset_id: dataset_id.to_string(),
            kind,
            location: location.into(),
            base_schema: base_schema.to_string(),
        }
    }
}

/// Resolved reference to a registered dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHandle {
    pub descriptor: DataSourceDescriptor,
}

impl DatasetHandle {
    pub fn id(&self) -> &str {
        &self.descriptor.dataset_id
    }
}

/// Datasets by id, optionally persisted to a TOML file with one table per
/// dataset:
///
/// ```toml
/// [enron-eval]
/// kind = "directory-of-text-files"
/// location = "/data/enron"
/// base_schema = "TextFile"
/// ```
#[derive(Debug, Clone, Default)]
pub struct DatasetRegistry {
    entries: BTreeMap<String, DataSourceDescriptor>,
    path: Option<PathBuf>,
}

impl DatasetRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) the registry file at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let parsed: BTreeMap<String, DataSourceDescriptor> =
                toml::from_str(&text).map_err(|e| Error::Registry(e.to_string()))?;
            for (id, mut d) in parsed {
                d.dataset_id = id.clone();
                entries.insert(id, d);
            }
        }
        Ok(DatasetRegistry {
            entries,
            path: Some(path),
        })
    }

    pub fn register(&mut self, descriptor: DataSourceDescriptor) -> Result<DatasetHandle> {
        if descriptor.dataset_id.trim().is_empty() {
            return Err(Error::Registry("dataset id is empty".into()));
        }
        if self.entries.contains_key(&descriptor.dataset_id) {
            return Err(Error::DuplicateDataset(descriptor.dataset_id));
        }
        if !descriptor.location.exists() {
            return Err(Error::MissingLocation(descriptor.location));
        }
        let handle = DatasetHandle {
            descriptor: descriptor.clone(),
        };
        self.entries.insert(descriptor.dataset_id.clone(), descriptor);
        self.persist()?;
        Ok(handle)
    }

    pub fn get(&self, dataset_id: &str) -> Result<DatasetHandle> {
        self.entries
            .get(dataset_id)
            .map(|d| DatasetHandle {
                descriptor: d.clone(),
            })
            .ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn persist(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let text = toml::to_string(&self.entries).map_err(|e| Error::Registry(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScanOutput {
    pub records: Vec<Record>,
    pub warnings: Vec<String>,
}

/// Reads every base object of the dataset. Directory entries are visited in
/// lexicographic file-name order; `source_index` is the position in that
/// order. Undecodable files are skipped with a warning.
pub fn scan(handle: &DatasetHandle, schemas: &SchemaRegistry) -> Result<ScanOutput> {
    let d = &handle.descriptor;
    let provided = d.kind.provided_fields();
    for f in schemas.effective_fields(&d.base_schema)? {
        if f.required && !provided.contains(&f.name.as_str()) {
            return Err(Error::Registry(format!(
                "base schema `{}` requires `{}`, which a {} source does not provide",
                d.base_schema, f.name, d.kind
            )));
        }
    }
    if !d.location.exists() {
        return Err(Error::MissingLocation(d.location.clone()));
    }
    let mut out = ScanOutput::default();
    match d.kind {
        SourceKind::SingleFile => {
            let name = file_name(&d.location);
            match read_text(&d.location) {
                Ok(text) => out.records.push(text_record(&d.base_schema, &name, 0, text)),
                Err(w) => out.warnings.push(w),
            }
        }
        SourceKind::DirectoryOfTextFiles => {
            for (idx, path) in sorted_entries(&d.location, false)?.into_iter().enumerate() {
                let name = file_name(&path);
                match read_text(&path) {
                    Ok(text) => out.records.push(text_record(&d.base_schema, &name, idx, text)),
                    Err(w) => out.warnings.push(w),
                }
            }
        }
        SourceKind::DirectoryOfFileGroups => {
            for (idx, dir) in sorted_entries(&d.location, true)?.into_iter().enumerate() {
                match read_group(&dir) {
                    Ok((text, images)) => {
                        let name = file_name(&dir);
                        out.records.push(
                            Record::new(&d.base_schema, &name, idx)
                                .with("listing", Value::String(name.clone()))
                                .with("text_content", Value::String(text))
                                .with(
                                    "image_contents",
                                    Value::List(images.into_iter().map(Value::Bytes).collect()),
                                ),
                        );
                    }
                    Err(w) => out.warnings.push(w),
                }
            }
        }
    }
    for w in &out.warnings {
        log::warn!("scan {}: {w}", d.dataset_id);
    }
    Ok(out)
}

fn text_record(schema: &str, name: &str, idx: usize, text: String) -> Record {
    Record::new(schema, name, idx)
        .with("filename", Value::String(name.to_string()))
        .with("contents", Value::String(text))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn sorted_entries(dir: &Path, dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let ft = entry.file_type()?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && (if dirs { ft.is_dir() } else { ft.is_file() }) {
            out.push(entry.path());
        }
    }
    out.sort_by_key(|p| file_name(p));
    Ok(out)
}

fn read_text(path: &Path) -> std::result::Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    String::from_utf8(bytes).map_err(|_| format!("{}: not valid UTF-8, skipped", path.display()))
}

fn read_group(dir: &Path) -> std::result::Result<(String, Vec<Vec<u8>>), String> {
    let files = sorted_entries(dir, false).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut text = None;
    let mut images = Vec::new();
    for f in files {
        let ext = f
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if ext == "txt" && text.is_none() {
            text = Some(read_text(&f)?);
        } else if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            images.push(fs::read(&f).map_err(|e| format!("{}: {e}", f.display()))?);
        }
    }
    let text = text.ok_or_else(|| format!("{}: no .txt file in group, skipped", dir.display()))?;
    Ok((text, images))
}
