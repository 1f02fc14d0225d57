//! Procedural pseudo-radiograph generation and dataset persistence.
//!
//! Phantoms share one structural layout (two dark "lung" ellipses, bright
//! "rib" bands, one bright central "mediastinum" column) with small per-seed
//! jitter in position and intensity, so that images from different seeds are
//! anatomically consistent while never being identical.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

pub const MANIFEST_NAME: &str = "manifest.ndjson";
pub const MANIFEST_VERSION: u32 = 1;

/// 2-D grayscale field with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array2<f32>,
}

impl Image {
    pub fn new(pixels: Array2<f32>) -> Self {
        Image { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Quantize to 8-bit grayscale, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Decode from 8-bit grayscale; byte v maps to v/255 exactly.
    pub fn from_bytes(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::Integrity(format!(
                "pixel buffer has {} bytes, expected {}x{}",
                bytes.len(),
                height,
                width
            )));
        }
        let pixels = Array2::from_shape_vec(
            (height, width),
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .expect("shape checked above");
        Ok(Image { pixels })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_bytes(),
            self.width() as u32,
            self.height() as u32,
            image::ColorType::L8,
        )
        .map_err(|e| Error::persistence(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::persistence(path, e))?;
        let gray = img.into_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        Image::from_bytes(gray.as_raw(), h, w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Position jitter as a fraction of image width (<= 0.05).
    pub pos_jitter: f32,
    /// Multiplicative intensity jitter (<= 0.05).
    pub intensity_jitter: f32,
    pub noise_sigma: f32,
    pub blur_sigma: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 64,
            width: 64,
            patch: 8,
            pos_jitter: 0.05,
            intensity_jitter: 0.05,
            noise_sigma: 0.02,
            blur_sigma: 1.5,
        }
    }
}

impl PhantomConfig {
    pub fn full_scale() -> Self {
        PhantomConfig {
            height: 224,
            width: 224,
            patch: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

fn ellipse(canvas: &mut Array2<f32>, cy: f32, cx: f32, ry: f32, rx: f32, value: f32) {
    let (h, w) = canvas.dim();
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f32 - cy) / ry;
            let dx = (x as f32 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                canvas[[y, x]] = value;
            }
        }
    }
}

fn gaussian_blur(field: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.0 {
        return field.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (h, w) = field.dim();
    // horizontal then vertical pass, clamped borders
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * field[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Generate one phantom. Pure function of (seed, cfg).
pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<Image> {
    cfg.validate()?;
    let mut rng = derive_rng(seed, "phantom", &[]);
    let h = cfg.height as f32;
    let w = cfg.width as f32;
    let jp = cfg.pos_jitter * w;
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng| rng.gen_range(-jp..=jp);
    let gain = |rng: &mut rand_chacha::ChaCha8Rng| {
        1.0 + rng.gen_range(-cfg.intensity_jitter..=cfg.intensity_jitter)
    };

    let mut canvas = Array2::<f32>::from_elem((cfg.height, cfg.width), 0.45);

    // lungs: two dark ellipses
    for side in [-1.0f32, 1.0] {
        let cx = w / 2.0 + side * 0.26 * w + jitter(&mut rng);
        let cy = h * 0.52 + jitter(&mut rng);
        let v = 0.18 * gain(&mut rng);
        ellipse(&mut canvas, cy, cx, 0.34 * h, 0.19 * w, v);
    }

    // ribs: 6 bright horizontal bands across the chest
    let band_h = (h * 0.045).max(1.0);
    for r in 0..6 {
        let y0 = h * (0.16 + 0.13 * r as f32) + jitter(&mut rng) * 0.5;
        let v = 0.78 * gain(&mut rng);
        let lo = y0.max(0.0) as usize;
        let hi = ((y0 + band_h) as usize).min(cfg.height);
        for y in lo..hi {
            for x in 0..cfg.width {
                // ribs brighten whatever they cross
                canvas[[y, x]] = (canvas[[y, x]] + 0.2).max(v * 0.85).min(v);
            }
        }
    }

    // mediastinum: bright central column
    let mcx = w / 2.0 + jitter(&mut rng);
    let mhw = 0.085 * w;
    let mv = 0.9 * gain(&mut rng);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            if (x as f32 - mcx).abs() <= mhw {
                canvas[[y, x]] = canvas[[y, x]].max(mv);
            }
        }
    }

    let mut blurred = gaussian_blur(&canvas, cfg.blur_sigma);
    if cfg.noise_sigma > 0.0 {
        for v in blurred.iter_mut() {
            // Box-Muller from two uniforms keeps the draw count fixed per pixel
            let u1: f32 = rng.gen_range(1e-7..1.0f32);
            let u2: f32 = rng.gen_range(0.0..1.0f32);
            let n = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
            *v += cfg.noise_sigma * n;
        }
    }
    blurred.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(Image::new(blurred))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub split: String,
    pub label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestHeader {
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.path();
        let f = fs::File::create(&path).map_err(|e| Error::persistence(&path, e))?;
        let mut w = BufWriter::new(f);
        let mut line = serde_json::to_string(&self.header).expect("header serializes");
        line.push('\n');
        w.write_all(line.as_bytes())
            .map_err(|e| Error::persistence(&path, e))?;
        for e in &self.entries {
            let mut line = serde_json::to_string(e).expect("entry serializes");
            line.push('\n');
            w.write_all(line.as_bytes())
                .map_err(|err| Error::persistence(&path, err))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let f = fs::File::open(&path).map_err(|e| Error::persistence(&path, e))?;
        let mut lines = std::io::BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::persistence(&path, "empty manifest"))?
            .map_err(|e| Error::persistence(&path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::persistence(&path, format!("bad header: {e}")))?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::persistence(
                &path,
                format!(
                    "manifest version {} unsupported (expected {})",
                    header.version, MANIFEST_VERSION
                ),
            ));
        }
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::persistence(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::persistence(&path, format!("bad entry: {err}")))?;
            entries.push(e);
        }
        if entries.len() != header.count {
            return Err(Error::persistence(
                &path,
                format!(
                    "manifest lists {} entries, header says {}",
                    entries.len(),
                    header.count
                ),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Integrity(format!("duplicate id {}", e.id)));
            }
            let file = dir.join(&e.file);
            if !file.exists() {
                return Err(Error::persistence(&file, "referenced file missing"));
            }
        }
        Ok(DatasetManifest {
            root: dir.to_path_buf(),
            header,
            entries,
        })
    }

    /// Decode one entry's image, checking dimensions against the header.
    pub fn load_image(&self, index: usize) -> Result<Image> {
        let entry = &self.entries[index];
        let path = self.root.join(&entry.file);
        let img = Image::load_png(&path)?;
        if img.height() != self.header.height || img.width() != self.header.width {
            return Err(Error::Integrity(format!(
                "{}: image is {}x{}, manifest says {}x{}",
                entry.file,
                img.height(),
                img.width(),
                self.header.height,
                self.header.width
            )));
        }
        Ok(img)
    }
}

/// Generate `count` normal phantoms into `out_dir` and write the manifest.
pub fn build_dataset(
    count: usize,
    seed: u64,
    out_dir: &Path,
    cfg: &PhantomConfig,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::persistence(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let img = generate_phantom(seed.wrapping_add(i as u64), cfg)?;
        let file = format!("normal_{i:06}.png");
        img.save_png(&out_dir.join(&file))?;
        entries.push(ManifestEntry {
            id: format!("n{i:06}"),
            file,
            split: "train".into(),
            label: Label::Normal,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            seed,
            height: cfg.height,
            width: cfg.width,
            count,
        },
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(dir)
}
