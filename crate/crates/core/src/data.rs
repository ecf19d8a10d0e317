//! Dataset ingestion and generation: big-endian IDX files, labelled CSV, and
//! a deterministic synthetic 8x8 digit task for desk-scale experiments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::ImageMassVector;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images of one split; all images share one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageMassVector>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// How raw values were normalized during ingestion.
    pub normalization: String,
}

impl Dataset {
    pub fn new(images: Vec<ImageMassVector>, labels: Vec<usize>, normalization: &str) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        if images.len() != labels.len() {
            return Err(Error::CountMismatch(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let (h, w, c) = (images[0].height(), images[0].width(), images[0].channels());
        if images
            .iter()
            .any(|i| i.height() != h || i.width() != w || i.channels() != c)
        {
            return Err(Error::invalid("images do not share one shape"));
        }
        let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
        Ok(Self {
            images,
            labels,
            height: h,
            width: w,
            channels: c,
            num_classes,
            normalization: normalization.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn one_hot(&self, idx: usize, classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; classes];
        y[self.labels[idx]] = 1.0;
        y
    }
}

struct Offset<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Offset<R> {
    fn new(inner: R) -> Self {
        Self { inner, pos: 0 }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.pos;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(at, format!("truncated while reading {what}")))?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Parses an IDX image/label file pair: magic `0x00000803` / `0x00000801`,
/// big-endian dimension sizes, unsigned-byte payload scaled to [0, 1].
pub fn ingest_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let mut img = Offset::new(BufReader::new(File::open(image_path)?));
    let magic = img.read_u32_be("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = img.read_u32_be("image count")? as usize;
    let rows = img.read_u32_be("row count")? as usize;
    let cols = img.read_u32_be("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, "zero image dimensions".to_string()));
    }
    let mut pixels = vec![0u8; count * rows * cols];
    img.read_exact_at(&mut pixels, "pixel data")?;

    let mut lbl = Offset::new(BufReader::new(File::open(label_path)?));
    let magic = lbl.read_u32_be("label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = lbl.read_u32_be("label count")? as usize;
    if label_count != count {
        return Err(Error::CountMismatch(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut labels = vec![0u8; label_count];
    lbl.read_exact_at(&mut labels, "label data")?;

    if count == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let mut images = Vec::with_capacity(count);
    for k in 0..count {
        let chunk = &pixels[k * rows * cols..(k + 1) * rows * cols];
        let values: Vec<f64> = chunk.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(ImageMassVector::new(values, rows, cols, 1)?);
    }
    Dataset::new(images, labels.iter().map(|&b| b as usize).collect(), "u8/255")
}

/// Writes a dataset as an IDX image/label pair; values must be exact
/// multiples of 1/255 in [0, 1] so the round trip is lossless.
pub fn write_idx(dataset: &Dataset, image_path: &Path, label_path: &Path) -> Result<()> {
    if dataset.channels != 1 {
        return Err(Error::invalid("IDX export supports single-channel images"));
    }
    let mut img = BufWriter::new(File::create(image_path)?);
    img.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    img.write_all(&(dataset.len() as u32).to_be_bytes())?;
    img.write_all(&(dataset.height as u32).to_be_bytes())?;
    img.write_all(&(dataset.width as u32).to_be_bytes())?;
    for image in &dataset.images {
        for &v in image.values() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("pixel {v} outside [0,1]")));
            }
            img.write_all(&[(v * 255.0).round() as u8])?;
        }
    }
    img.flush()?;

    let mut lbl = BufWriter::new(File::create(label_path)?);
    lbl.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lbl.write_all(&(dataset.len() as u32).to_be_bytes())?;
    for &label in &dataset.labels {
        if label > u8::MAX as usize {
            return Err(Error::invalid(format!("label {label} exceeds u8")));
        }
        lbl.write_all(&[label as u8])?;
    }
    lbl.flush()?;
    Ok(())
}

/// Parses a labelled CSV with header `label,p0,p1,...`; pixel values in
/// [0, 255] are scaled to [0, 1] and laid out row-major into the declared
/// `height x width` shape.
pub fn ingest_csv(path: &Path, height: usize, width: usize) -> Result<Dataset> {
    let raw = std::fs::read_to_string(path)?;
    let mut lines = raw.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::invalid("empty dataset"))?;
    let fields: Vec<&str> = header.split(',').collect();
    let pixel_cols = height * width;
    if fields.first() != Some(&"label") {
        return Err(Error::Format {
            offset: 0,
            message: format!("header must start with 'label', got {:?}", fields.first()),
        });
    }
    if fields.len() != pixel_cols + 1 {
        return Err(Error::CountMismatch(format!(
            "header declares {} pixel columns, config shape {height}x{width} needs {pixel_cols}",
            fields.len() - 1
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != pixel_cols + 1 {
            return Err(Error::invalid(format!(
                "line {}: expected {} cells, got {}",
                line_no + 1,
                pixel_cols + 1,
                cells.len()
            )));
        }
        let label: usize = cells[0].trim().parse().map_err(|_| {
            Error::invalid(format!("line {}: label '{}' is not an integer", line_no + 1, cells[0]))
        })?;
        let mut values = Vec::with_capacity(pixel_cols);
        for (col, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::invalid(format!(
                    "line {}: cell {} ('{}') is not numeric",
                    line_no + 1,
                    col + 1,
                    cell
                ))
            })?;
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "line {}: value {v} outside [0,255]",
                    line_no + 1
                )));
            }
            values.push(v / 255.0);
        }
        images.push(ImageMassVector::new(values, height, width, 1)?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    Dataset::new(images, labels, "raw/255")
}

/// 5x7 digit glyphs rendered into 8x8 frames by the synthetic generator.
const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// Generates `count` synthetic 8x8 digit images: glyphs at random small
/// offsets with intensity jitter and background noise, quantized to the
/// 1/255 grid so IDX round trips are lossless.
pub fn synth_digits(count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let digit = rng.random_range(0..10usize);
        let dy = rng.random_range(0..2usize);
        let dx = rng.random_range(0..4usize);
        let intensity: f64 = rng.random_range(0.65..1.0);
        let mut values = vec![0.0f64; 64];
        for (r, row) in GLYPHS[digit].iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                if ch == b'1' {
                    let jitter: f64 = rng.random_range(0.8..1.0);
                    values[(r + dy) * 8 + c + dx] = intensity * jitter;
                }
            }
        }
        for v in &mut values {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + 0.03 * noise.abs()).clamp(0.0, 1.0);
            // Quantize to the u8 grid used by the IDX format.
            *v = (*v * 255.0).round() / 255.0;
        }
        images.push(ImageMassVector::new(values, 8, 8, 1)?);
        labels.push(digit);
    }
    let mut ds = Dataset::new(images, labels, "u8/255")?;
    ds.num_classes = 10;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_idx_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("imgs.idx3-ubyte");
        let lbl = dir.join("lbls.idx1-ubyte");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 128, 64]);
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 0, 0, 0, 1]);
        std::fs::write(&img, bytes).unwrap();
        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[1, 0]);
        std::fs::write(&lbl, lbytes).unwrap();
        (img, lbl)
    }

    #[test]
    fn idx_fixture_parses_byte_exact() {
        let dir = tempdir().unwrap();
        let (img, lbl) = tiny_idx_fixture(dir.path());
        let ds = ingest_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!((ds.height, ds.width), (3, 3));
        assert_eq!(ds.labels, vec![1, 0]);
        let expect: Vec<f64> = [0u8, 51, 102, 153, 204, 255, 0, 128, 64]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        assert_eq!(ds.images[0].values(), &expect[..]);
    }

    #[test]
    fn idx_wrong_magic_names_offset_zero() {
        let dir = tempdir().unwrap();
        let (img, lbl) = tiny_idx_fixture(dir.path());
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x42;
        std::fs::write(&img, bytes).unwrap();
        match ingest_idx(&img, &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_detected() {
        let dir = tempdir().unwrap();
        let (img, lbl) = tiny_idx_fixture(dir.path());
        let mut bytes = std::fs::read(&lbl).unwrap();
        bytes[7] = 3;
        bytes.push(2);
        std::fs::write(&lbl, bytes).unwrap();
        assert!(matches!(ingest_idx(&img, &lbl), Err(Error::CountMismatch(_))));
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let dir = tempdir().unwrap();
        let (img, lbl) = tiny_idx_fixture(dir.path());
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 4]).unwrap();
        match ingest_idx(&img, &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "label,p0,p1\n1,0,255\n").unwrap();
        let ds = ingest_csv(&path, 1, 2).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 1);
        assert_eq!(ds.images[0].values(), &[0.0, 1.0]);

        std::fs::write(&path, "").unwrap();
        assert!(ingest_csv(&path, 1, 2).is_err());

        std::fs::write(&path, "label,p0,p1\n1,0\n").unwrap();
        let err = ingest_csv(&path, 1, 2).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        std::fs::write(&path, "label,p0,p1\n1,zero,255\n").unwrap();
        let err = ingest_csv(&path, 1, 2).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn idx_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let ds = synth_digits(32, 7).unwrap();
        let img = dir.path().join("d.idx3-ubyte");
        let lbl = dir.path().join("d.idx1-ubyte");
        write_idx(&ds, &img, &lbl).unwrap();
        let back = ingest_idx(&img, &lbl).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn synth_digits_deterministic_and_balancedish() {
        let a = synth_digits(200, 3).unwrap();
        let b = synth_digits(200, 3).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.values(), y.values());
        }
        assert_eq!(a.labels, b.labels);
        let mut counts = [0usize; 10];
        for &l in &a.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c > 5), "{counts:?}");
    }
}
