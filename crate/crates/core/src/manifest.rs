//! Line-delimited JSON dataset manifests.
//!
//! The first line is a header record carrying the class table; every following
//! line is one entry:
//!
//! ```text
//! {"record":"header","format":"decouple-manifest","version":1,"classes":{"1":"disc","2":"box"}}
//! {"record":"entry","id":"scene_00000","image":"scene_00000.png","seg":"scene_00000_seg.png",
//!  "inst":"scene_00000_inst.png","gt":"scene_00000_gt.png","split":"train","source":"synth",
//!  "instances":{"1":1,"3":2}}
//! ```
//!
//! (entries occupy a single line on disk). Paths are written relative to the
//! manifest's directory when possible and are resolved to that directory on
//! load, so in memory every path is directly openable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Image, InstanceMap, SceneSample, SegmentationMap};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "decouple-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub seg: PathBuf,
    pub inst: PathBuf,
    pub gt: Option<PathBuf>,
    pub split: Split,
    pub source: String,
    /// Instance id → class id side table for the instance map.
    pub instances: BTreeMap<u16, u16>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_table: BTreeMap<u16, String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Header {
        format: String,
        version: u32,
        classes: BTreeMap<String, String>,
    },
    Entry {
        id: String,
        image: PathBuf,
        seg: PathBuf,
        inst: PathBuf,
        gt: Option<PathBuf>,
        split: Split,
        source: String,
        instances: BTreeMap<String, u16>,
    },
}

// Tagged records are buffered before deserialisation, which loses the
// string-to-integer key coercion, so ids travel as strings on disk.
fn keys_to_strings<V: Clone>(m: &BTreeMap<u16, V>) -> BTreeMap<String, V> {
    m.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn keys_from_strings<V>(m: BTreeMap<String, V>, line: usize) -> Result<BTreeMap<u16, V>> {
    m.into_iter()
        .map(|(k, v)| {
            k.parse::<u16>()
                .map(|k| (k, v))
                .map_err(|_| malformed(line, &format!("bad id key `{k}`")))
        })
        .collect()
}

impl DatasetManifest {
    pub fn new(class_table: BTreeMap<u16, String>) -> Self {
        Self {
            class_table,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same class table, entries chosen by `keep`.
    pub fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            class_table: self.class_table.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn class_id(&self, name: &str) -> Option<u16> {
        self.class_table
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(&id, _)| id)
    }

    /// Accepts either a numeric id or a class name.
    pub fn resolve_class(&self, spec: &str) -> Result<u16> {
        if let Ok(id) = spec.parse::<u16>() {
            if self.class_table.contains_key(&id) {
                return Ok(id);
            }
        }
        self.class_id(spec)
            .ok_or_else(|| Error::Config(format!("class `{spec}` not in class table")))
    }

    pub fn load_seg(&self, entry: &ManifestEntry) -> Result<SegmentationMap> {
        let seg = SegmentationMap::read_png(&entry.seg)?;
        seg.validate_classes(&self.class_table)?;
        Ok(seg)
    }

    pub fn load_inst(&self, entry: &ManifestEntry) -> Result<InstanceMap> {
        InstanceMap::read_png(&entry.inst, entry.instances.clone())
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<SceneSample> {
        let sample = SceneSample {
            image: Image::read_png(&entry.image)?,
            seg: self.load_seg(entry)?,
            inst: self.load_inst(entry)?,
            gt_removal: entry.gt.as_deref().map(Image::read_png).transpose()?,
            id: entry.id.clone(),
            source: entry.source.clone(),
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<SceneSample>> {
        self.entries.iter().map(|e| self.load_sample(e)).collect()
    }
}

/// Reads a manifest, resolving paths against its directory and checking that
/// every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::ManifestMissing(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let mut manifest = DatasetManifest::default();
    let mut seen = BTreeSet::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| Error::ManifestMalformed {
                line: lineno,
                message: e.to_string(),
            })?;
        match record {
            Record::Header {
                format,
                version,
                classes,
            } => {
                if header_seen || !manifest.entries.is_empty() {
                    return Err(malformed(lineno, "header must be the first record"));
                }
                if format != MANIFEST_FORMAT || version != MANIFEST_VERSION {
                    return Err(malformed(
                        lineno,
                        &format!("unsupported format {format} v{version}"),
                    ));
                }
                header_seen = true;
                manifest.class_table = keys_from_strings(classes, lineno)?;
            }
            Record::Entry {
                id,
                image,
                seg,
                inst,
                gt,
                split,
                source,
                instances,
            } => {
                if !header_seen {
                    return Err(malformed(lineno, "entry before header"));
                }
                if !seen.insert(id.clone()) {
                    return Err(malformed(lineno, &format!("duplicate id `{id}`")));
                }
                let entry = ManifestEntry {
                    image: base.join(image),
                    seg: base.join(seg),
                    inst: base.join(inst),
                    gt: gt.map(|g| base.join(g)),
                    id,
                    split,
                    source,
                    instances: keys_from_strings(instances, lineno)?,
                };
                for p in [&entry.image, &entry.seg, &entry.inst]
                    .into_iter()
                    .chain(entry.gt.as_ref())
                {
                    if !p.is_file() {
                        return Err(Error::DanglingReference {
                            id: entry.id.clone(),
                            path: p.clone(),
                        });
                    }
                }
                manifest.entries.push(entry);
            }
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| -> PathBuf {
        p.strip_prefix(base)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let mut out = Vec::new();
    let header = Record::Header {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        classes: keys_to_strings(&manifest.class_table),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serialisable"))
        .expect("in-memory write");
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(&e.id) {
            return Err(Error::InvalidValue(format!("duplicate manifest id `{}`", e.id)));
        }
        let record = Record::Entry {
            id: e.id.clone(),
            image: rel(&e.image),
            seg: rel(&e.seg),
            inst: rel(&e.inst),
            gt: e.gt.as_deref().map(rel),
            split: e.split,
            source: e.source.clone(),
            instances: keys_to_strings(&e.instances),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("serialisable"))
            .expect("in-memory write");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn malformed(line: usize, message: &str) -> Error {
    Error::ManifestMalformed {
        line,
        message: message.to_string(),
    }
}
