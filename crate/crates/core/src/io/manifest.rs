//! Dataset manifests and raw feature files.
//!
//! A manifest is a UTF-8 text file. The first line is the magic
//! `attrhash-manifest 1`; every other non-empty line not starting with `#`
//! is `key=value`:
//!
//! ```text
//! attrhash-manifest 1
//! name=synthetic
//! images=4
//! levels=2
//! level1=32,8,8        # channels,width,height
//! level2=16,16,16
//! endianness=little
//! features=features.f32
//! labels=0,0,1,1
//! query=0,2            # optional split
//! gallery=1,3
//! ```
//!
//! The feature file holds, for each image in order and each level in order,
//! `c·h·w` little-endian `f32` values in channel-major, row-major layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, LevelShape, PyramidGeometry};

pub const MANIFEST_MAGIC: &str = "attrhash-manifest 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub images: usize,
    pub geometry: PyramidGeometry,
    pub labels: Vec<usize>,
    /// Feature file path as written in the manifest (relative paths are
    /// resolved against the manifest's directory).
    pub features: PathBuf,
    pub split: Option<Split>,
}

fn parse_list(value: &str, path: &Path, key: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::data(path, format!("{key}: '{}' is not a nonnegative integer", v.trim())))
        })
        .collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or("").trim();
        if magic != MANIFEST_MAGIC {
            if let Some(v) = magic.strip_prefix("attrhash-manifest ") {
                if let Ok(found) = v.trim().parse::<u32>() {
                    return Err(Error::Version { found, supported: 1 });
                }
            }
            return Err(Error::data(path, format!("bad magic '{magic}', expected '{MANIFEST_MAGIC}'")));
        }
        let mut kv = std::collections::BTreeMap::new();
        for (n, raw) in lines.enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(path, format!("line {}: expected key=value", n + 2)))?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::data(path, format!("duplicate key '{}'", k.trim())));
            }
        }
        let mut take = |key: &str| {
            kv.remove(key)
                .ok_or_else(|| Error::data(path, format!("missing key '{key}'")))
        };
        let name = take("name")?;
        let images: usize = take("images")?
            .parse()
            .map_err(|_| Error::data(path, "images is not an integer"))?;
        let levels: usize = take("levels")?
            .parse()
            .map_err(|_| Error::data(path, "levels is not an integer"))?;
        let mut shapes = Vec::with_capacity(levels);
        for j in 1..=levels {
            let key = format!("level{j}");
            let dims = parse_list(&take(&key)?, path, &key)?;
            if dims.len() != 3 {
                return Err(Error::data(path, format!("{key} needs channels,width,height")));
            }
            shapes.push(LevelShape {
                channels: dims[0],
                width: dims[1],
                height: dims[2],
            });
        }
        let geometry = PyramidGeometry::new(shapes).map_err(|e| Error::data(path, e.to_string()))?;
        let endianness = take("endianness")?;
        if endianness != "little" {
            return Err(Error::data(path, format!("unsupported endianness '{endianness}'")));
        }
        let features = PathBuf::from(take("features")?);
        let labels = parse_list(&take("labels")?, path, "labels")?;
        let split = match (kv.remove("query"), kv.remove("gallery")) {
            (Some(q), Some(g)) => Some(Split {
                query: parse_list(&q, path, "query")?,
                gallery: parse_list(&g, path, "gallery")?,
            }),
            (None, None) => None,
            _ => return Err(Error::data(path, "query and gallery must be given together")),
        };
        if let Some(extra) = kv.keys().next() {
            return Err(Error::data(path, format!("unknown key '{extra}'")));
        }
        if images == 0 {
            return Err(Error::data(path, "dataset is empty"));
        }
        if labels.len() != images {
            return Err(Error::data(
                path,
                format!("{} labels for {images} images", labels.len()),
            ));
        }
        if let Some(s) = &split {
            if let Some(bad) = s.query.iter().chain(&s.gallery).find(|&&i| i >= images) {
                return Err(Error::data(path, format!("split index {bad} out of range")));
            }
        }
        Ok(Manifest {
            name,
            images,
            geometry,
            labels,
            features,
            split,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MANIFEST_MAGIC);
        s.push('\n');
        s.push_str(&format!("name={}\n", self.name));
        s.push_str(&format!("images={}\n", self.images));
        s.push_str(&format!("levels={}\n", self.geometry.levels.len()));
        for (j, l) in self.geometry.levels.iter().enumerate() {
            s.push_str(&format!("level{}={},{},{}\n", j + 1, l.channels, l.width, l.height));
        }
        s.push_str("endianness=little\n");
        s.push_str(&format!("features={}\n", self.features.display()));
        s.push_str(&format!("labels={}\n", join(&self.labels)));
        if let Some(split) = &self.split {
            s.push_str(&format!("query={}\n", join(&split.query)));
            s.push_str(&format!("gallery={}\n", join(&split.gallery)));
        }
        s
    }
}

/// A validated dataset on disk whose images are read on demand.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub manifest: Manifest,
    pub features_path: PathBuf,
}

/// Reads and validates a manifest and its feature file: the file length must
/// match the declared geometry and every value must be finite.
pub fn ingest(manifest_path: impl AsRef<Path>) -> Result<DatasetHandle> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::parse(&text, manifest_path)?;
    let features_path = if manifest.features.is_absolute() {
        manifest.features.clone()
    } else {
        manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(&manifest.features)
    };
    let expected = (manifest.images * manifest.geometry.values_per_image() * 4) as u64;
    let actual = std::fs::metadata(&features_path)
        .map_err(|e| Error::io(&features_path, e))?
        .len();
    if actual != expected {
        return Err(Error::data(
            &features_path,
            format!("expected {expected} bytes, found {actual}"),
        ));
    }
    let mut reader = BufReader::new(File::open(&features_path).map_err(|e| Error::io(&features_path, e))?);
    let mut buf = [0u8; 4];
    for offset in (0..expected).step_by(4) {
        reader.read_exact(&mut buf).map_err(|e| Error::io(&features_path, e))?;
        if !f32::from_le_bytes(buf).is_finite() {
            return Err(Error::data(&features_path, format!("non-finite value at byte offset {offset}")));
        }
    }
    Ok(DatasetHandle {
        manifest,
        features_path,
    })
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.manifest.images
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images == 0
    }

    pub fn read_image(&self, index: usize) -> Result<FeaturePyramid> {
        if index >= self.manifest.images {
            return Err(Error::Invalid(format!(
                "image {index} out of range (dataset has {})",
                self.manifest.images
            )));
        }
        let per_image = self.manifest.geometry.values_per_image();
        let mut file = File::open(&self.features_path).map_err(|e| Error::io(&self.features_path, e))?;
        file.seek(SeekFrom::Start((index * per_image * 4) as u64))
            .map_err(|e| Error::io(&self.features_path, e))?;
        let mut bytes = vec![0u8; per_image * 4];
        file.read_exact(&mut bytes).map_err(|e| Error::io(&self.features_path, e))?;
        decode_image(index, &self.manifest.geometry, &bytes)
    }

    pub fn load(&self) -> Result<Dataset> {
        let per_image = self.manifest.geometry.values_per_image() * 4;
        let bytes = std::fs::read(&self.features_path).map_err(|e| Error::io(&self.features_path, e))?;
        let images = bytes
            .chunks_exact(per_image)
            .enumerate()
            .map(|(i, chunk)| decode_image(i, &self.manifest.geometry, chunk))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: self.manifest.name.clone(),
            geometry: self.manifest.geometry.clone(),
            labels: self.manifest.labels.clone(),
            images,
            split: self.manifest.split.clone(),
        })
    }
}

fn decode_image(index: usize, geometry: &PyramidGeometry, bytes: &[u8]) -> Result<FeaturePyramid> {
    let mut offset = 0;
    let mut buffers = Vec::with_capacity(geometry.levels.len());
    for l in &geometry.levels {
        let n = l.values();
        let buf: Vec<f64> = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        offset += 4 * n;
        buffers.push(buf);
    }
    FeaturePyramid::from_channel_major(index, geometry, &buffers)
}

/// Writes `<dir>/<stem>.manifest` and `<dir>/<stem>.f32`, returning the
/// manifest path. Values are stored as `f32`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let features_name = format!("{stem}.f32");
    let features_path = dir.join(&features_name);
    let file = File::create(&features_path).map_err(|e| Error::io(&features_path, e))?;
    let mut w = BufWriter::new(file);
    for img in &dataset.images {
        img.check(&dataset.geometry)?;
        for level in img.to_channel_major() {
            for v in level {
                w.write_all(&(v as f32).to_le_bytes())
                    .map_err(|e| Error::io(&features_path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&features_path, e))?;
    let manifest = Manifest {
        name: dataset.name.clone(),
        images: dataset.images.len(),
        geometry: dataset.geometry.clone(),
        labels: dataset.labels.clone(),
        features: PathBuf::from(features_name),
        split: dataset.split.clone(),
    };
    let manifest_path = dir.join(format!("{stem}.manifest"));
    std::fs::write(&manifest_path, manifest.to_text()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn tiny_dataset() -> Dataset {
        let geometry = PyramidGeometry::new(vec![
            LevelShape { channels: 2, width: 1, height: 1 },
            LevelShape { channels: 1, width: 2, height: 2 },
        ])
        .unwrap();
        let images = (0..3)
            .map(|i| FeaturePyramid {
                image_id: i,
                levels: vec![
                    Tensor::matrix(1, 2, vec![i as f64, 0.5]).unwrap(),
                    Tensor::matrix(4, 1, vec![1.0, -1.0, 0.25, i as f64]).unwrap(),
                ],
            })
            .collect();
        Dataset {
            name: "tiny".into(),
            geometry,
            labels: vec![0, 1, 0],
            images,
            split: Some(Split {
                query: vec![0],
                gallery: vec![1, 2],
            }),
        }
    }

    #[test]
    fn write_then_ingest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let path = write_dataset(&ds, dir.path(), "tiny").unwrap();
        let handle = ingest(&path).unwrap();
        assert_eq!(handle.load().unwrap(), ds);
        assert_eq!(handle.read_image(2).unwrap(), ds.images[2]);
        assert!(handle.read_image(3).is_err());
    }

    #[test]
    fn truncated_features_report_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&tiny_dataset(), dir.path(), "tiny").unwrap();
        let f = dir.path().join("tiny.f32");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
        let msg = ingest(&path).unwrap_err().to_string();
        assert!(msg.contains("expected 72 bytes, found 68"), "{msg}");
    }

    #[test]
    fn non_finite_values_report_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&tiny_dataset(), dir.path(), "tiny").unwrap();
        let f = dir.path().join("tiny.f32");
        let mut bytes = std::fs::read(&f).unwrap();
        bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&f, &bytes).unwrap();
        let msg = ingest(&path).unwrap_err().to_string();
        assert!(msg.contains("offset 8"), "{msg}");
    }

    #[test]
    fn manifest_errors() {
        let p = Path::new("m");
        let good = tiny_dataset();
        let text = Manifest {
            name: "x".into(),
            images: 3,
            geometry: good.geometry.clone(),
            labels: vec![0, 1, 0],
            features: "x.f32".into(),
            split: None,
        }
        .to_text();
        assert!(Manifest::parse(&text, p).is_ok());
        assert!(matches!(Manifest::parse(&text.replacen("attrhash", "nope", 1), p), Err(Error::Data { .. })));
        assert!(matches!(
            Manifest::parse(&text.replacen("manifest 1", "manifest 2", 1), p),
            Err(Error::Version { found: 2, .. })
        ));
        let empty = text.replace("images=3", "images=0").replace("labels=0,1,0", "labels=");
        assert!(Manifest::parse(&empty, p).unwrap_err().to_string().contains("empty"));
        assert!(Manifest::parse(&format!("{text}bogus=1\n"), p).is_err());
        assert!(Manifest::parse(&text.replace("labels=0,1,0", "labels=0,1"), p).is_err());
    }
}
