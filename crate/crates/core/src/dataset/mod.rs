//! Facade class schema, area sets on disk, train/test splits and class counts.

mod io;
mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub use io::{fpc_bin, fpc_text, load_cloud, load_cloud_as, ply_by_label, read_fpc_bin, save_cloud, CloudFormat};
pub use synthetic::{generate_synthetic_facade, FacadeSpec, CLASS_TARGETS};

pub const CLASS_NAMES: [&str; 8] = ["balustrade", "balcony", "advboard", "wall", "eave", "column", "window", "clutter"];

pub const CLASS_COLORS: [[u8; 3]; 8] = [
    [214, 39, 40],
    [255, 127, 14],
    [148, 103, 189],
    [127, 127, 127],
    [140, 86, 75],
    [31, 119, 180],
    [44, 160, 44],
    [188, 189, 34],
];

pub mod class {
    pub const BALUSTRADE: u8 = 0;
    pub const BALCONY: u8 = 1;
    pub const ADVBOARD: u8 = 2;
    pub const WALL: u8 = 3;
    pub const EAVE: u8 = 4;
    pub const COLUMN: u8 = 5;
    pub const WINDOW: u8 = 6;
    pub const CLUTTER: u8 = 7;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSchema {
    pub names: Vec<&'static str>,
    pub colors: Vec<[u8; 3]>,
}

impl ClassSchema {
    pub fn facade() -> Self {
        ClassSchema { names: CLASS_NAMES.to_vec(), colors: CLASS_COLORS.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| *n == name).map(|i| i as u8)
    }
}

/// Named labelled areas, in load order.
#[derive(Clone, Debug, Default)]
pub struct AreaSet {
    pub areas: Vec<(String, PointCloud)>,
}

impl AreaSet {
    pub fn new(areas: Vec<(String, PointCloud)>) -> Result<Self> {
        let n_class = ClassSchema::facade().len();
        for (name, cloud) in &areas {
            if cloud.labels.is_none() {
                return Err(Error::invalid(format!("area {name} has no labels")));
            }
            cloud
                .check_labels(n_class)
                .map_err(|e| Error::invalid(format!("area {name}: {e}")))?;
        }
        Ok(AreaSet { areas })
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.areas.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&PointCloud> {
        self.areas.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    /// Reads `<root>/Area<i>/*.fpc`, ordered by `i`; each area's files are
    /// concatenated in file-name order.
    pub fn load(root: &Path) -> Result<Self> {
        let mut dirs: Vec<(u64, String, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(i) = name.strip_prefix("Area").and_then(|s| s.parse::<u64>().ok()) {
                if entry.file_type()?.is_dir() {
                    dirs.push((i, name, entry.path()));
                }
            }
        }
        if dirs.is_empty() {
            return Err(Error::format(root.display().to_string(), "no Area<i> directories found"));
        }
        dirs.sort();
        let areas = dirs
            .into_par_iter()
            .map(|(_, name, dir)| {
                let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "fpc"))
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(Error::format(dir.display().to_string(), "area directory holds no .fpc files"));
                }
                let parts = files.iter().map(|f| load_cloud(f)).collect::<Result<Vec<_>>>()?;
                Ok((name, concat(parts, &dir)?))
            })
            .collect::<Result<Vec<_>>>()?;
        AreaSet::new(areas)
    }

    /// Writes each area as `<root>/<name>/<name>.fpc` in the binary format.
    pub fn save(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (name, cloud) in &self.areas {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{name}.fpc"));
            save_cloud(cloud, &path, CloudFormat::FpcBin)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn concat(parts: Vec<PointCloud>, dir: &Path) -> Result<PointCloud> {
    let colored = parts.iter().all(|p| p.colors.is_some());
    if !colored && parts.iter().any(|p| p.colors.is_some()) {
        return Err(Error::format(dir.display().to_string(), "files disagree on whether colors are present"));
    }
    let mut positions = Vec::new();
    let mut colors = colored.then(Vec::new);
    let mut labels = Vec::new();
    for p in parts {
        let l = p.labels.ok_or_else(|| Error::format(dir.display().to_string(), "area file without labels"))?;
        positions.extend(p.positions);
        if let (Some(c), Some(pc)) = (colors.as_mut(), p.colors) {
            c.extend(pc);
        }
        labels.extend(l);
    }
    PointCloud::new(positions, colors, Some(labels))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    LeaveOneOut(String),
    KFold6,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            _ if s == "kfold6" => Ok(SplitMode::KFold6),
            Some(("leave_one_out", area)) if !area.is_empty() => Ok(SplitMode::LeaveOneOut(area.to_string())),
            _ => Err(Error::invalid(format!("unknown split '{s}' (allowed: leave_one_out:<Area>|kfold6)"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::LeaveOneOut(a) => write!(f, "leave_one_out:{a}"),
            SplitMode::KFold6 => f.write_str("kfold6"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// With more than six areas, k-fold groups them round-robin into six folds;
/// with fewer, every area is its own fold.
pub fn make_splits(names: &[&str], mode: &SplitMode) -> Result<Vec<Split>> {
    if names.len() < 2 {
        return Err(Error::invalid(format!("splitting needs at least 2 areas, got {}", names.len())));
    }
    let owned = |v: Vec<&str>| v.into_iter().map(String::from).collect::<Vec<_>>();
    match mode {
        SplitMode::LeaveOneOut(test) => {
            if !names.contains(&test.as_str()) {
                return Err(Error::invalid(format!("unknown area '{test}' (have: {})", names.join("|"))));
            }
            let train = names.iter().copied().filter(|n| n != test).collect();
            Ok(vec![Split { train: owned(train), test: vec![test.clone()] }])
        }
        SplitMode::KFold6 => {
            let k = names.len().min(6);
            Ok((0..k)
                .map(|f| {
                    let (test, train): (Vec<(usize, &str)>, Vec<(usize, &str)>) =
                        names.iter().copied().enumerate().partition(|(i, _)| i % k == f);
                    Split {
                        train: owned(train.into_iter().map(|(_, n)| n).collect()),
                        test: owned(test.into_iter().map(|(_, n)| n).collect()),
                    }
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClassStats {
    pub areas: Vec<(String, Vec<u64>)>,
    pub totals: Vec<u64>,
}

pub fn class_stats(areas: &[(String, PointCloud)]) -> Result<ClassStats> {
    let n_class = ClassSchema::facade().len();
    let mut rows = Vec::with_capacity(areas.len());
    let mut totals = vec![0u64; n_class];
    for (name, cloud) in areas {
        let labels = cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("class_stats: area {name} has no labels")))?;
        let mut counts = vec![0u64; n_class];
        for &l in labels {
            *counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::invalid(format!("class_stats: label {l} in area {name} out of range")))? += 1;
        }
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
        rows.push((name.clone(), counts));
    }
    Ok(ClassStats { areas: rows, totals })
}

impl ClassStats {
    pub fn table(&self) -> String {
        let mut header = vec!["area".to_string()];
        header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        header.push("total".into());
        let row = |name: &str, counts: &[u64]| {
            let mut r = vec![name.to_string()];
            r.extend(counts.iter().map(u64::to_string));
            r.push(counts.iter().sum::<u64>().to_string());
            r
        };
        let mut rows = vec![header];
        rows.extend(self.areas.iter().map(|(n, c)| row(n, c)));
        rows.push(row("total", &self.totals));
        let widths: Vec<usize> = (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].len()).max().unwrap()).collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(&cells.join("  "));
            out.push('\n');
        }
        out
    }
}
