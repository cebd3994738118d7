//! JSON-lines manifests: one `{"path", "label"?, "candidates"?}` object per
//! image, paths relative to the dataset root.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CandidateSet, Image, PartialSample, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<usize>>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", lineno + 1),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn decode_gray(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut gray = img.to_luma8();
    if gray.width() as usize != size || gray.height() as usize != size {
        gray = image::imageops::resize(&gray, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(Array2::from_shape_fn((size, size), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

fn check_label(label: usize, num_classes: usize, manifest: &Path, row: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::Schema(format!(
            "{} row {}: label {label} >= K={num_classes}",
            manifest.display(),
            row + 1
        )));
    }
    Ok(())
}

/// Loads every manifest row as a sample, in manifest order. Images are
/// converted to grayscale and resized to `image_size` square.
pub fn load_image_folder(
    root: &Path,
    manifest_path: &Path,
    image_size: usize,
    num_classes: usize,
) -> Result<Vec<Sample>> {
    let rows = read_manifest(manifest_path)?;
    rows.iter()
        .enumerate()
        .map(|(id, row)| {
            if let Some(l) = row.label {
                check_label(l, num_classes, manifest_path, id)?;
            }
            if let Some(c) = &row.candidates {
                for &l in c {
                    check_label(l, num_classes, manifest_path, id)?;
                }
            }
            Ok(Sample {
                id,
                image: decode_gray(&root.join(&row.path), image_size)?,
                true_label: row.label,
            })
        })
        .collect()
}

/// Like [`load_image_folder`] but also reads candidate sets. Rows without
/// `candidates` fall back to the singleton of their label.
pub fn load_partial_folder(
    root: &Path,
    manifest_path: &Path,
    image_size: usize,
    num_classes: usize,
) -> Result<Vec<PartialSample>> {
    let rows = read_manifest(manifest_path)?;
    let samples = load_image_folder(root, manifest_path, image_size, num_classes)?;
    rows.into_iter()
        .zip(samples)
        .enumerate()
        .map(|(i, (row, sample))| {
            let set = match (&row.candidates, row.label) {
                (Some(c), _) if !c.is_empty() => CandidateSet::from_indices(num_classes, c)?,
                (None, Some(l)) => CandidateSet::singleton(num_classes, l)?,
                _ => {
                    return Err(Error::Schema(format!(
                        "{} row {}: needs a non-empty `candidates` list or a `label`",
                        manifest_path.display(),
                        i + 1
                    )))
                }
            };
            PartialSample::new(sample, set).map_err(|e| match e {
                Error::Validation(m) => Error::Schema(m),
                other => other,
            })
        })
        .collect()
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `images/NNNNNN.pgm` files plus `manifest.jsonl` under `root` and
/// returns the manifest path.
pub fn write_image_folder(
    root: &Path,
    samples: &[Sample],
    candidates: Option<&[CandidateSet]>,
) -> Result<PathBuf> {
    if let Some(c) = candidates {
        if c.len() != samples.len() {
            return Err(Error::Validation(format!(
                "{} candidate sets for {} samples",
                c.len(),
                samples.len()
            )));
        }
    }
    let img_dir = root.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest_path = root.join(MANIFEST_NAME);
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{:06}.pgm", s.id);
        write_pgm(&root.join(&rel), &s.image)?;
        let row = ManifestRow {
            path: rel,
            label: s.true_label,
            candidates: candidates.map(|c| c[i].indices()),
        };
        serde_json::to_writer(&mut out, &row).expect("manifest row serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: i,
                image: Array2::from_shape_fn((8, 8), |(y, x)| ((x + y + i) % 5) as f64 / 4.0),
                true_label: Some(i % 3),
            })
            .collect()
    }

    #[test]
    fn round_trip_preserves_order_and_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(3);
        let manifest = write_image_folder(dir.path(), &samples, None).unwrap();
        let loaded = load_image_folder(dir.path(), &manifest, 8, 3).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.true_label, b.true_label);
            assert_eq!(a.id, b.id);
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST_NAME);
        fs::write(&m, "").unwrap();
        assert!(load_image_folder(dir.path(), &m, 8, 7).unwrap().is_empty());
    }

    #[test]
    fn label_out_of_range_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(1);
        write_image_folder(dir.path(), &samples, None).unwrap();
        let m = dir.path().join(MANIFEST_NAME);
        fs::write(&m, "{\"path\":\"images/000000.pgm\",\"label\":9}\n").unwrap();
        let err = load_image_folder(dir.path(), &m, 8, 7).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST_NAME);
        fs::write(&m, "{\"path\":\"nope.pgm\",\"label\":1}\n").unwrap();
        let err = load_image_folder(dir.path(), &m, 8, 7).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
        assert!(err.to_string().contains("nope.pgm"), "{err}");
    }

    #[test]
    fn partial_folder_reads_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(2);
        let cands = vec![
            CandidateSet::from_indices(3, &[0, 2]).unwrap(),
            CandidateSet::from_indices(3, &[1]).unwrap(),
        ];
        let m = write_image_folder(dir.path(), &samples, Some(&cands)).unwrap();
        let loaded = load_partial_folder(dir.path(), &m, 8, 3).unwrap();
        assert_eq!(loaded[0].candidates, cands[0]);
        assert_eq!(loaded[1].candidates, cands[1]);
    }

    #[test]
    fn resizes_to_configured_size() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_image_folder(dir.path(), &tiny_samples(1), None).unwrap();
        let loaded = load_image_folder(dir.path(), &m, 16, 3).unwrap();
        assert_eq!(loaded[0].image.dim(), (16, 16));
    }

    #[test]
    fn pgm_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = Array2::from_shape_vec((1, 3), vec![0.0, 0.5, 1.0]).unwrap();
        write_pgm(&p, &img).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n3 1\n255\n\x00\x80\xff");
    }
}
