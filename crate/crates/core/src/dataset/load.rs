//! Raw dataset loading from local files, directories, image zips and the hub.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Number, Value};

use super::{DataFormat, DataSource, DatasetError, RawDataset, Record};
use crate::config::DataConfig;
use crate::hub::{HubClient, HubRef, RepoKind};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif", "webp", "tif", "tiff"];

/// Where relative paths resolve and where fetched/extracted files go.
#[derive(Debug, Clone)]
pub struct LoadContext<'a> {
    pub hub: Option<&'a HubClient>,
    pub base_dir: PathBuf,
    pub work_dir: PathBuf,
}

impl<'a> LoadContext<'a> {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        LoadContext {
            hub: None,
            base_dir: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
            work_dir: work_dir.into(),
        }
    }

    pub fn with_hub(mut self, hub: &'a HubClient) -> Self {
        self.hub = Some(hub);
        self
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

fn is_image(path: &Path) -> bool {
    IMAGE_EXTENSIONS.contains(&extension(path).as_str())
}

/// Directory of class sub-folders holding images, or with a `metadata.jsonl`.
fn is_image_folder(dir: &Path) -> bool {
    if dir.join("metadata.jsonl").is_file() {
        return true;
    }
    let Ok(entries) = fs::read_dir(dir) else { return false };
    let mut saw_class = false;
    for entry in entries.flatten() {
        let p = entry.path();
        if p.is_dir() {
            let has_images = fs::read_dir(&p)
                .map(|it| it.flatten().any(|e| is_image(&e.path())))
                .unwrap_or(false);
            if !has_images {
                return false;
            }
            saw_class = true;
        }
    }
    saw_class
}

pub fn detect_format(path: &Path) -> Result<DataFormat, DatasetError> {
    if path.is_dir() {
        return if is_image_folder(path) {
            Ok(DataFormat::ImageZip)
        } else {
            Err(DatasetError::UnsupportedFormat(path.display().to_string()))
        };
    }
    match extension(path).as_str() {
        "csv" => Ok(DataFormat::Csv),
        "jsonl" => Ok(DataFormat::Jsonl),
        "zip" => Ok(DataFormat::ImageZip),
        other => Err(DatasetError::UnsupportedFormat(if other.is_empty() {
            path.display().to_string()
        } else {
            format!(".{other}")
        })),
    }
}

fn csv_cell(raw: &str) -> Value {
    if raw.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Number(i.into());
    }
    if let Ok(x) = raw.parse::<f64>() {
        if let Some(n) = Number::from_f64(x) {
            return Value::Number(n);
        }
    }
    Value::String(raw.to_string())
}

/// Comma-separated, double-quoted, header row first, UTF-8.
pub fn read_csv(path: &Path) -> Result<Vec<Record>, DatasetError> {
    let corrupt = |record: usize, message: String| DatasetError::FileCorrupt {
        file: path.display().to_string(),
        record,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| corrupt(0, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| corrupt(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // line numbers are 1-based and the header is line 1
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(i + 2);
            corrupt(line, e.to_string())
        })?;
        out.push(
            headers
                .iter()
                .zip(row.iter())
                .map(|(h, v)| (h.clone(), csv_cell(v)))
                .collect(),
        );
    }
    Ok(out)
}

/// One JSON object per line; blank lines are skipped but still counted.
pub fn read_jsonl(path: &Path) -> Result<Vec<Record>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| DatasetError::FileCorrupt {
            file: path.display().to_string(),
            record: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn read_image_folder(dir: &Path) -> Result<Vec<Record>, DatasetError> {
    let metadata = dir.join("metadata.jsonl");
    if metadata.is_file() {
        let mut rows = read_jsonl(&metadata)?;
        for (i, row) in rows.iter_mut().enumerate() {
            let file = row
                .remove("file_name")
                .and_then(|v| v.as_str().map(str::to_string))
                .ok_or_else(|| DatasetError::FileCorrupt {
                    file: metadata.display().to_string(),
                    record: i + 1,
                    message: "missing file_name".into(),
                })?;
            row.insert("image".into(), Value::String(dir.join(file).display().to_string()));
        }
        return Ok(rows);
    }
    let mut classes: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DatasetError::io(dir, e))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut out = Vec::new();
    for class_dir in classes {
        let label = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut images: Vec<PathBuf> = fs::read_dir(&class_dir)
            .map_err(|e| DatasetError::io(&class_dir, e))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| is_image(p))
            .collect();
        images.sort();
        for img in images {
            out.push(Record::from([
                ("image".to_string(), Value::String(img.display().to_string())),
                ("label".to_string(), Value::String(label.clone())),
            ]));
        }
    }
    Ok(out)
}

fn extract_zip(path: &Path, work_dir: &Path) -> Result<PathBuf, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    let dest = work_dir
        .join("extracted")
        .join(format!("{:016x}", crate::rng::fnv1a64(&bytes)));
    if dest.is_dir() {
        return Ok(dest);
    }
    let corrupt = |message: String| DatasetError::FileCorrupt {
        file: path.display().to_string(),
        record: 0,
        message,
    };
    let mut archive = zip::ZipArchive::new(std::io::Cursor::new(bytes)).map_err(|e| corrupt(e.to_string()))?;
    let staging = dest.with_extension("partial");
    let _ = fs::remove_dir_all(&staging);
    for i in 0..archive.len() {
        let mut entry = archive.by_index(i).map_err(|e| corrupt(e.to_string()))?;
        let Some(rel) = entry.enclosed_name() else {
            return Err(corrupt(format!("unsafe entry name {}", entry.name())));
        };
        let out = staging.join(rel);
        if entry.is_dir() {
            fs::create_dir_all(&out).map_err(|e| DatasetError::io(&out, e))?;
            continue;
        }
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
        }
        let mut f = fs::File::create(&out).map_err(|e| DatasetError::io(&out, e))?;
        std::io::copy(&mut entry, &mut f).map_err(|e| DatasetError::io(&out, e))?;
    }
    fs::rename(&staging, &dest).map_err(|e| DatasetError::io(&dest, e))?;
    Ok(dest)
}

/// Zips commonly wrap everything in one top-level folder; descend through it.
fn image_root(dir: PathBuf) -> PathBuf {
    if is_image_folder(&dir) {
        return dir;
    }
    let entries: Vec<PathBuf> = fs::read_dir(&dir)
        .map(|it| it.flatten().map(|e| e.path()).collect())
        .unwrap_or_default();
    match entries.as_slice() {
        [only] if only.is_dir() && is_image_folder(only) => only.clone(),
        _ => dir,
    }
}

fn load_file(path: &Path, ctx: &LoadContext) -> Result<(DataFormat, Vec<Record>), DatasetError> {
    let format = detect_format(path)?;
    let records = match format {
        DataFormat::Csv => read_csv(path)?,
        DataFormat::Jsonl => read_jsonl(path)?,
        DataFormat::ImageZip if path.is_dir() => read_image_folder(path)?,
        DataFormat::ImageZip => read_image_folder(&image_root(extract_zip(path, &ctx.work_dir)?))?,
    };
    Ok((format, records))
}

fn find_split_file(dir: &Path, split: &str) -> Option<PathBuf> {
    let candidates = [
        dir.join(format!("{split}.jsonl")),
        dir.join(format!("{split}.csv")),
        dir.join(format!("{split}.zip")),
        dir.join("data").join(format!("{split}.jsonl")),
        dir.join("data").join(format!("{split}.csv")),
        dir.join(split),
    ];
    candidates
        .into_iter()
        .find(|p| p.is_file() || (p.is_dir() && is_image_folder(p)))
}

fn load_splits(root: &Path, cfg: &DataConfig, ctx: &LoadContext) -> Result<(DataFormat, BTreeMap<String, Vec<Record>>), DatasetError> {
    let wanted: Vec<&str> = std::iter::once(cfg.train_split.as_str())
        .chain(cfg.valid_split.as_deref())
        .collect();
    let mut splits = BTreeMap::new();
    let mut format = None;

    if root.is_file() {
        // a single file is the train split; other splits are siblings
        let (fmt, records) = load_file(root, ctx)?;
        format = Some(fmt);
        splits.insert(cfg.train_split.clone(), records);
        let parent = root.parent().unwrap_or(Path::new("."));
        for split in wanted.iter().skip(1) {
            let path = find_split_file(parent, split).ok_or_else(|| DatasetError::SplitNotFound(split.to_string()))?;
            splits.insert(split.to_string(), load_file(&path, ctx)?.1);
        }
        return Ok((format.unwrap_or(DataFormat::Jsonl), splits));
    }

    for split in &wanted {
        let records = match find_split_file(root, split) {
            Some(path) => {
                let (fmt, records) = load_file(&path, ctx)?;
                format.get_or_insert(fmt);
                records
            }
            // a bare class-folder directory is the train split
            None if *split == cfg.train_split && is_image_folder(root) => {
                format.get_or_insert(DataFormat::ImageZip);
                read_image_folder(root)?
            }
            None => return Err(DatasetError::SplitNotFound(split.to_string())),
        };
        splits.insert(split.to_string(), records);
    }
    Ok((format.unwrap_or(DataFormat::Jsonl), splits))
}

/// Loads the splits named by `cfg` from a local path or a hub dataset id.
pub fn load_dataset(cfg: &DataConfig, ctx: &LoadContext) -> Result<RawDataset, DatasetError> {
    let local = {
        let p = Path::new(&cfg.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            ctx.base_dir.join(p)
        }
    };
    if local.exists() {
        let (format, splits) = load_splits(&local, cfg, ctx)?;
        let raw = RawDataset {
            source: DataSource::LocalPath,
            format,
            splits,
        };
        raw.check_rectangular()?;
        return Ok(raw);
    }

    let hub_ref = HubRef::new(&cfg.path, RepoKind::Dataset).map_err(|_| {
        DatasetError::io(
            &local,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file and not a hub dataset id"),
        )
    })?;
    let hub = ctx
        .hub
        .ok_or_else(|| DatasetError::HubFetchFailed("no hub client configured".into()))?;
    let dir = hub
        .pull(&hub_ref, &ctx.work_dir.join("hub"))
        .map_err(|e| DatasetError::HubFetchFailed(e.to_string()))?;
    let (format, splits) = load_splits(&dir, cfg, ctx)?;
    let raw = RawDataset {
        source: DataSource::HubDatasetId,
        format,
        splits,
    };
    raw.check_rectangular()?;
    Ok(raw)
}
