//! Dataset directories: `img_####.pgm` / `msk_####.pgm` pairs plus a
//! `manifest.json` listing them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_image, read_mask, write_image, write_mask, Dataset, Sample, Split};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilePair {
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub split: Split,
    /// Generator configuration, when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub files: Vec<FilePair>,
}

pub fn image_file_name(i: usize) -> String {
    format!("img_{i:04}.pgm")
}

pub fn mask_file_name(i: usize) -> String {
    format!("msk_{i:04}.pgm")
}

pub fn write_dataset_dir(
    ds: &Dataset,
    dir: impl AsRef<Path>,
    config: Option<serde_json::Value>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ds.len());
    for (i, s) in ds.items.iter().enumerate() {
        let pair = FilePair {
            image: image_file_name(i),
            mask: mask_file_name(i),
        };
        write_image(&s.image, dir.join(&pair.image))?;
        write_mask(&s.mask, dir.join(&pair.mask))?;
        files.push(pair);
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        split: ds.split,
        config,
        files,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let items = manifest
        .files
        .iter()
        .map(|f| Sample::new(read_image(dir.join(&f.image))?, read_mask(dir.join(&f.mask))?))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest.name, manifest.split, items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_dataset, SynthConfig};

    #[test]
    fn dataset_dir_round_trip() {
        let ds = gen_dataset(&SynthConfig::phase(1, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset_dir(&ds, dir.path(), None).unwrap();
        assert_eq!(m.files[2].image, "img_0002.pgm");
        let back = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.items.iter().zip(&ds.items) {
            assert_eq!(a.mask, b.mask);
            // Images are quantized to 8 bits on disk.
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
