//! On-disk datasets: per-sample `.nt` tensors, PPM previews and `manifest.jsonl`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{GlyphStamp, Rect, SceneSample};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub clean: String,
    pub labels: String,
    pub seed: u64,
    pub category: String,
    pub tag_boxes: Vec<Rect>,
    #[serde(default)]
    pub label_box: Option<Rect>,
    #[serde(default)]
    pub tag_stamps: Vec<GlyphStamp>,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub master_seed: u64,
}

/// Provenance stamped into every manifest record.
#[derive(Clone, Debug, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
}

/// Binary P6 preview of a `[3,H,W]` image in `[0,1]`.
pub fn to_ppm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[c * h * w + y * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Write all samples under `dir` and return the manifest path. The manifest is
/// written to a temporary name and renamed last, so a failed write never
/// leaves a partial manifest behind.
pub fn write_dataset(samples: &[SceneSample], dir: &Path, prov: &Provenance) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        let name = |kind: &str| format!("{id}_{kind}.nt");
        s.image.save_nt(&dir.join(name("image")))?;
        s.mask.save_nt(&dir.join(name("mask")))?;
        s.clean.save_nt(&dir.join(name("clean")))?;
        s.labels.save_nt(&dir.join(name("labels")))?;
        write_file(&dir.join(format!("{id}_image.ppm")), &to_ppm(&s.image))?;
        write_file(&dir.join(format!("{id}_clean.ppm")), &to_ppm(&s.clean))?;
        let entry = ManifestEntry {
            id: id.clone(),
            image: name("image"),
            mask: name("mask"),
            clean: name("clean"),
            labels: name("labels"),
            seed: s.seed,
            category: s.category.clone(),
            tag_boxes: s.tag_boxes.clone(),
            label_box: s.label_box,
            tag_stamps: s.tag_stamps.clone(),
            config_hash: prov.config_hash.clone(),
            master_seed: prov.master_seed,
        };
        lines.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
        lines.push('\n');
    }
    let tmp = dir.join(format!("{MANIFEST}.partial"));
    write_file(&tmp, lines.as_bytes())?;
    let manifest = dir.join(MANIFEST);
    fs::rename(&tmp, &manifest).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::format(
                    "manifest",
                    &format!("line {}", n + 1),
                    e.to_string(),
                )
            })
        })
        .collect()
}

fn expect_shape(t: &Tensor, want: &[usize], field: &str) -> Result<()> {
    if t.shape() != want {
        return Err(Error::format(
            "sample",
            field,
            format!("expected shape {want:?}, found {:?}", t.shape()),
        ));
    }
    Ok(())
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<SceneSample> {
    let image = Tensor::load_nt(&dir.join(&entry.image))?;
    if image.shape().len() != 3 || image.shape()[0] != 3 || image.shape()[1] != image.shape()[2] {
        return Err(Error::format(
            "sample",
            "image",
            format!("expected [3,H,H], found {:?}", image.shape()),
        ));
    }
    let size = image.shape()[1];
    let mask = Tensor::load_nt(&dir.join(&entry.mask))?;
    expect_shape(&mask, &[1, size, size], "mask")?;
    let clean = Tensor::load_nt(&dir.join(&entry.clean))?;
    expect_shape(&clean, &[3, size, size], "clean")?;
    let labels = Tensor::load_nt(&dir.join(&entry.labels))?;
    expect_shape(&labels, &[size, size], "labels")?;
    for b in &entry.tag_boxes {
        if b.x + b.w > size || b.y + b.h > size {
            return Err(Error::format(
                "sample",
                "tag_boxes",
                format!("box {b:?} exceeds {size}x{size}"),
            ));
        }
    }
    Ok(SceneSample {
        image,
        mask,
        clean,
        labels,
        tag_boxes: entry.tag_boxes.clone(),
        category: entry.category.clone(),
        seed: entry.seed,
        label_box: entry.label_box,
        tag_stamps: entry.tag_stamps.clone(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    read_manifest(dir)?
        .iter()
        .map(|e| load_sample(dir, e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, GenConfig, GlyphFont};

    fn samples(n: u64) -> Vec<SceneSample> {
        let font = GlyphFont::builtin();
        (0..n)
            .map(|s| generate_scene(s, &GenConfig::default(), &font).unwrap())
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples(3);
        write_dataset(&s, dir.path(), &Provenance::default()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in s.iter().zip(&back) {
            assert!(a.image.bitwise_eq(&b.image));
            assert!(a.mask.bitwise_eq(&b.mask));
            assert!(a.clean.bitwise_eq(&b.clean));
            assert!(a.labels.bitwise_eq(&b.labels));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn manifest_has_one_line_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&samples(5), dir.path(), &Provenance::default()).unwrap();
        let text = fs::read_to_string(manifest).unwrap();
        assert_eq!(text.lines().count(), 5);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["id", "image", "mask", "clean", "labels", "seed", "category", "tag_boxes"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn corrupt_header_names_field() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples(1), dir.path(), &Provenance::default()).unwrap();
        let entry = &read_manifest(dir.path()).unwrap()[0];
        let path = dir.path().join(&entry.mask);
        let bytes = fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut bad = br#"{"shape":[1,32,32],"dtype":"f32","layout":"col-major"}"#.to_vec();
        bad.extend_from_slice(&bytes[nl..]);
        fs::write(&path, bad).unwrap();
        let err = load_sample(dir.path(), entry).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "layout"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_field() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples(1), dir.path(), &Provenance::default()).unwrap();
        let entry = &read_manifest(dir.path()).unwrap()[0];
        Tensor::zeros(&[2, 32, 32])
            .save_nt(&dir.path().join(&entry.mask))
            .unwrap();
        let err = load_sample(dir.path(), entry).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "mask"), "{err}");
    }

    #[test]
    fn ppm_header_and_size() {
        let img = Tensor::full(&[3, 4, 6], 1.0);
        let ppm = to_ppm(&img);
        assert!(ppm.starts_with(b"P6\n6 4\n255\n"));
        assert_eq!(ppm.len(), b"P6\n6 4\n255\n".len() + 4 * 6 * 3);
    }
}
