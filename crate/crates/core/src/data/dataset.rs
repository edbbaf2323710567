//! On-disk datasets: PNG rasters plus a JSON-lines manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::{Family, SyntheticSample};
use crate::error::{shape_err, Error, Result};
use crate::metrics::BinaryMask;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub mask_path: String,
    pub family: Family,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image_png(sample: &SyntheticSample, path: &Path) -> Result<()> {
    let r = sample.resolution;
    let img = RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let i = y as usize * r + x as usize;
        image::Rgb([to_u8(sample.image[i]), to_u8(sample.image[r * r + i]), to_u8(sample.image[2 * r * r + i])])
    });
    img.save(path)?;
    Ok(())
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.w as u32, mask.h as u32, |x, y| image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    img.save(path)?;
    Ok(())
}

/// Channel-major RGB in `[0, 1]` and its side. Non-square images are rejected.
pub fn load_image_png(path: &Path) -> Result<(Vec<f32>, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(shape_err!("image {0} is {1}x{2}, expected square", path.display(), w, h));
    }
    let r = w as usize;
    let mut out = vec![0.0f32; 3 * r * r];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * r + x as usize;
        for ch in 0..3 {
            out[ch * r * r + i] = (p.0[ch] as f64 / 255.0) as f32;
        }
    }
    Ok((out, r))
}

/// Any nonzero pixel is foreground.
pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::new(h as usize, w as usize, img.pixels().map(|p| (p.0[0] > 0) as u8).collect())
}

pub struct DatasetWriter {
    dir: PathBuf,
    manifest: BufWriter<File>,
}

impl DatasetWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn add(&mut self, id: &str, sample: &SyntheticSample, sequence: Option<u64>, frame: Option<usize>) -> Result<()> {
        let image_path = format!("images/{id}.png");
        let mask_path = format!("masks/{id}.png");
        save_image_png(sample, &self.dir.join(&image_path))?;
        save_mask_png(&sample.mask, &self.dir.join(&mask_path))?;
        let rec = ManifestRecord { id: id.to_string(), image_path, mask_path, family: sample.family, seed: sample.seed, sequence, frame };
        serde_json::to_writer(&mut self.manifest, &rec)?;
        self.manifest.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.flush()?;
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let f = File::open(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_record(dir: &Path, rec: &ManifestRecord) -> Result<SyntheticSample> {
    let (image, r) = load_image_png(&dir.join(&rec.image_path))?;
    let mask = load_mask_png(&dir.join(&rec.mask_path))?;
    if (mask.h, mask.w) != (r, r) {
        return Err(shape_err!("mask of {0} does not match its {1}x{1} image", rec.id, r));
    }
    if mask.is_empty() {
        return Err(Error::Empty("ground-truth mask"));
    }
    Ok(SyntheticSample { image, mask, seed: rec.seed, family: rec.family, resolution: r })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(ManifestRecord, SyntheticSample)>> {
    read_manifest(dir)?.into_iter().map(|rec| load_record(dir, &rec).map(|s| (rec, s))).collect()
}

/// Group video frames by sequence, ordered by frame index.
pub fn group_sequences(records: Vec<(ManifestRecord, SyntheticSample)>) -> Vec<Vec<SyntheticSample>> {
    let mut seqs: std::collections::BTreeMap<u64, Vec<(usize, SyntheticSample)>> = Default::default();
    for (rec, s) in records {
        if let (Some(q), Some(f)) = (rec.sequence, rec.frame) {
            seqs.entry(q).or_default().push((f, s));
        }
    }
    seqs.into_values()
        .map(|mut v| {
            v.sort_by_key(|(f, _)| *f);
            v.into_iter().map(|(_, s)| s).collect()
        })
        .collect()
}
