//! On-disk datasets: one lossless grayscale PNG per sample plus a
//! line-delimited JSON manifest. The first manifest line is a header record
//! carrying the generation config and its hash; every following line is one
//! sample record.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{render_episode, render_stage1};
use super::spec::{make_episode, make_stage1_panel, sample_rng, CLASS_COUNT};
use crate::exec::Exec;
use crate::{Error, Result};

/// Generation parameters recorded at the head of a manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestHeader {
    pub kind: String,
    pub stage: u8,
    pub grid: u8,
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    pub config_hash: String,
}

/// One sample: image path (relative to the manifest), label, and the
/// generation coordinates that reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub kind: String,
    pub path: String,
    pub label: u8,
    pub stage: u8,
    pub grid: u8,
    pub rule: Option<String>,
    pub seed: u64,
    pub index: u64,
}

/// Header plus sample records.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

fn config_hash(stage: u8, grid: u8, count: usize, seed: u64, size: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(
        format!("stage={stage};grid={grid};count={count};seed={seed};size={size};geometry=v1")
            .as_bytes(),
    );
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_png(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u8> = img.iter().copied().collect();
    image::save_buffer(
        path,
        &raw,
        w as u32,
        h as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::format(format!("png encode failed for {}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("png decode failed for {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::shape(e.to_string()))
}

fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = fs::File::create(path)?;
    let mut line = serde_json::to_string(&manifest.header).map_err(|e| Error::format(e.to_string()))?;
    line.push('\n');
    out.write_all(line.as_bytes())?;
    for rec in &manifest.records {
        let mut line = serde_json::to_string(rec).map_err(|e| Error::format(e.to_string()))?;
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn generate(
    stage: u8,
    grid: u8,
    count: usize,
    seed: u64,
    size: usize,
    out_dir: &Path,
    exec: Exec,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::param("sample count must be positive"));
    }
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;

    let results: Vec<Result<SampleRecord>> = exec.map_ranges(count, 64, |range| {
        let mut chunk = Vec::with_capacity(range.len());
        for index in range {
            let mut rng = sample_rng(seed, index as u64);
            let (img, label, rule) = if stage == 1 {
                let panel = make_stage1_panel(&mut rng);
                (render_stage1(&panel, size)?, panel.label(), None)
            } else {
                let ep = make_episode(&mut rng, grid as usize)?;
                (render_episode(&ep, size)?, ep.label, Some(ep.rule.name()))
            };
            let rel_path = format!("images/{index:06}.png");
            write_png(&out_dir.join(&rel_path), &img)?;
            chunk.push(SampleRecord {
                kind: "sample".to_string(),
                path: rel_path,
                label,
                stage,
                grid,
                rule,
                seed,
                index: index as u64,
            });
        }
        Ok(chunk)
    })
    .into_iter()
    .flat_map(|chunk| match chunk {
        Ok(records) => records.into_iter().map(Ok).collect::<Vec<_>>(),
        Err(e) => vec![Err(e)],
    })
    .collect();

    let mut records = Vec::with_capacity(count);
    for r in results {
        records.push(r?);
    }

    let manifest = DatasetManifest {
        header: ManifestHeader {
            kind: "header".to_string(),
            stage,
            grid,
            count,
            seed,
            size,
            config_hash: config_hash(stage, grid, count, seed, size),
        },
        records,
    };
    write_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

/// Generates a stage-1 dataset (single full-canvas panels) under `out_dir`.
pub fn gen_stage1(
    count: usize,
    seed: u64,
    size: usize,
    out_dir: &Path,
    exec: Exec,
) -> Result<DatasetManifest> {
    generate(1, 0, count, seed, size, out_dir, exec)
}

/// Generates a stage-2 dataset (n×n grid episodes) under `out_dir`.
pub fn gen_stage2(
    count: usize,
    seed: u64,
    grid: usize,
    size: usize,
    out_dir: &Path,
    exec: Exec,
) -> Result<DatasetManifest> {
    if !(2..=4).contains(&grid) {
        return Err(Error::param(format!("grid size must be 2, 3, or 4, got {grid}")));
    }
    generate(2, grid as u8, count, seed, size, out_dir, exec)
}

/// Reads a manifest and validates it: the header must come first, every
/// referenced image must exist, and labels must be in range.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format("manifest is empty".to_string()))??;
    let header: ManifestHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::format(format!("bad header: {e}")))?;
    if header.kind != "header" {
        return Err(Error::format("first manifest line is not a header".to_string()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("bad record: {e}")))?;
        if rec.label as usize >= CLASS_COUNT {
            return Err(Error::invariant(format!(
                "label {} out of range for sample {}",
                rec.label, rec.index
            )));
        }
        if !base.join(&rec.path).is_file() {
            return Err(Error::invariant(format!(
                "referenced image {} does not exist",
                rec.path
            )));
        }
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(Error::invariant(format!(
            "manifest promises {} samples but lists {}",
            header.count,
            records.len()
        )));
    }
    Ok(DatasetManifest { header, records })
}

/// A dataset loaded into memory: images stacked as `(count, size, size)`
/// bytes plus labels.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub images: Array3<u8>,
    pub labels: Vec<u8>,
    pub size: usize,
    pub stage: u8,
    pub grid: u8,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loads every sample referenced by a manifest file.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = load_manifest(manifest_path)?;
    let base: PathBuf = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let size = manifest.header.size;
    let count = manifest.records.len();
    let mut images = Array3::zeros((count, size, size));
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in manifest.records.iter().enumerate() {
        let img = read_png(&base.join(&rec.path))?;
        if img.dim() != (size, size) {
            return Err(Error::shape(format!(
                "image {} has shape {:?}, expected {size}x{size}",
                rec.path,
                img.dim()
            )));
        }
        images.index_axis_mut(ndarray::Axis(0), i).assign(&img);
        labels.push(rec.label);
    }
    Ok(LoadedDataset {
        images,
        labels,
        size,
        stage: manifest.header.stage,
        grid: manifest.header.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage1_roundtrip_and_determinism() {
        let dir = std::env::temp_dir().join(format!("panelattn-ds-{}", std::process::id()));
        let a_dir = dir.join("a");
        let b_dir = dir.join("b");
        let a = gen_stage1(6, 31, 48, &a_dir, Exec::Sequential).unwrap();
        let b = gen_stage1(6, 31, 48, &b_dir, Exec::Parallel).unwrap();
        assert_eq!(a.header.config_hash, b.header.config_hash);
        assert_eq!(a.records, b.records);
        for rec in &a.records {
            let bytes_a = fs::read(a_dir.join(&rec.path)).unwrap();
            let bytes_b = fs::read(b_dir.join(&rec.path)).unwrap();
            assert_eq!(bytes_a, bytes_b, "image bytes differ for {}", rec.path);
        }
        let loaded = load_dataset(&a_dir.join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.images.dim(), (6, 48, 48));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn stage2_manifest_records_rules() {
        let dir = std::env::temp_dir().join(format!("panelattn-ds2-{}", std::process::id()));
        let m = gen_stage2(4, 9, 3, 60, &dir, Exec::Sequential).unwrap();
        assert!(m.records.iter().all(|r| r.rule.is_some()));
        assert!(load_manifest(&dir.join("manifest.jsonl")).is_ok());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_image_fails_validation() {
        let dir = std::env::temp_dir().join(format!("panelattn-ds3-{}", std::process::id()));
        gen_stage1(3, 1, 32, &dir, Exec::Sequential).unwrap();
        fs::remove_file(dir.join("images/000001.png")).unwrap();
        assert!(matches!(
            load_manifest(&dir.join("manifest.jsonl")),
            Err(Error::Invariant(_))
        ));
        fs::remove_dir_all(&dir).ok();
    }
}
