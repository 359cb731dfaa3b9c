//! Packed dataset file.
//!
//! ```text
//! magic      4 bytes  "PCDS"
//! version    u8       1
//! points     u32      P, points per cloud
//! classes    u8       class count K
//! K × { len u8, name UTF-8 bytes }
//! n_train    u32
//! n_test     u32
//! (n_train + n_test) × { label u8, P × 3 × f32 }   training records first
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{normalize, parse_off, sample_surface, PointCloud};

pub const DATASET_MAGIC: &[u8; 4] = b"PCDS";
const DATASET_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Train/test split with its class-name table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: usize,
    pub classes: Vec<String>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PointCloud] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    if ds.classes.len() > u8::MAX as usize {
        return Err(Error::format("too many classes for the dataset format"));
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&[DATASET_VERSION])?;
    w.write_all(&(ds.points as u32).to_le_bytes())?;
    w.write_all(&[ds.classes.len() as u8])?;
    for name in &ds.classes {
        let bytes = name.as_bytes();
        if bytes.len() > u8::MAX as usize {
            return Err(Error::format(format!("class name `{name}` too long")));
        }
        w.write_all(&[bytes.len() as u8])?;
        w.write_all(bytes)?;
    }
    w.write_all(&(ds.train.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.test.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(1 + 12 * ds.points);
    for cloud in ds.train.iter().chain(&ds.test) {
        if cloud.len() != ds.points {
            return Err(Error::format(format!(
                "cloud `{}` has {} points, dataset expects {}",
                cloud.source,
                cloud.len(),
                ds.points
            )));
        }
        if cloud.label >= ds.classes.len() {
            return Err(Error::format(format!("label {} out of range", cloud.label)));
        }
        buf.clear();
        buf.push(cloud.label as u8);
        for p in &cloud.points {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(format!("dataset truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format("not a packed dataset file (bad magic)"));
    }
    let [version] = read_exact(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let points = u32::from_le_bytes(read_exact(&mut r, "point count")?) as usize;
    let [n_classes] = read_exact(&mut r, "class count")?;
    let mut classes = Vec::with_capacity(n_classes as usize);
    for _ in 0..n_classes {
        let [len] = read_exact(&mut r, "class name length")?;
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::format("dataset truncated in class table"))?;
        classes.push(String::from_utf8(name).map_err(|_| Error::format("class name is not UTF-8"))?);
    }
    let n_train = u32::from_le_bytes(read_exact(&mut r, "train count")?) as usize;
    let n_test = u32::from_le_bytes(read_exact(&mut r, "test count")?) as usize;
    let mut record = vec![0u8; 1 + 12 * points];
    let mut read_split = |n: usize, tag: &str| -> Result<Vec<PointCloud>> {
        (0..n)
            .map(|i| {
                r.read_exact(&mut record)
                    .map_err(|_| Error::format(format!("dataset truncated in {tag} record {i}")))?;
                let label = record[0] as usize;
                if label >= classes.len() {
                    return Err(Error::format(format!("{tag} record {i}: label {label} out of range")));
                }
                let pts = record[1..]
                    .chunks_exact(12)
                    .map(|c| {
                        [0, 1, 2].map(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()))
                    })
                    .collect();
                Ok(PointCloud {
                    points: pts,
                    label,
                    source: format!("{tag}/{i}"),
                })
            })
            .collect()
    };
    let train = read_split(n_train, "train")?;
    let test = read_split(n_test, "test")?;
    Ok(Dataset {
        points,
        classes,
        train,
        test,
    })
}

/// FNV-1a, used to derive per-file sampling seeds from relative paths.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn off_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a ModelNet-style tree (`<root>/<class>/{train,test}/*.off`),
/// sampling `points` points from every mesh and normalizing to the unit
/// sphere. Classes are indexed in sorted directory-name order. Each file is
/// sampled once with a seed derived from `seed` and its relative path.
pub fn ingest_modelnet(root: &Path, points: usize, seed: u64) -> Result<Dataset> {
    let mut classes: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("train").is_dir() || e.path().join("test").is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::format(format!(
            "{}: no class directories with train/ or test/ found",
            root.display()
        )));
    }

    let load = |split: Split| -> Result<Vec<PointCloud>> {
        let mut jobs = Vec::new();
        for (label, class) in classes.iter().enumerate() {
            let dir = root.join(class).join(split.dir());
            if dir.is_dir() {
                jobs.extend(off_files(&dir)?.into_iter().map(|f| (label, f)));
            }
        }
        jobs.par_iter()
            .map(|(label, path)| {
                let rel = path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/");
                let text = fs::read_to_string(path)?;
                let mesh = parse_off(&text).map_err(|e| Error::format(format!("{rel}: {e}")))?;
                let cloud = sample_surface(&mesh, points, seed ^ fnv1a(rel.as_bytes()))
                    .map_err(|e| Error::format(format!("{rel}: {e}")))?;
                let mut cloud = normalize(&cloud);
                cloud.label = *label;
                cloud.source = rel;
                Ok(cloud)
            })
            .collect()
    };
    let train = load(Split::Train)?;
    let test = load(Split::Test)?;
    Ok(Dataset {
        points,
        classes,
        train,
        test,
    })
}
