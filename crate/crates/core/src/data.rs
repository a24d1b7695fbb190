//! Procedural shape images with class and private-attribute labels, binary
//! PGM input/output, and the dataset manifest.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::qtensor::RealTensor;

pub const CLASS_NAMES: [&str; 4] = ["circle", "cross", "square", "triangle"];
/// Fill intensity ranges, one per value of the first attribute.
pub const INTENSITY_BANDS: [(f64, f64); 3] = [(0.35, 0.55), (0.55, 0.75), (0.75, 0.95)];
pub const QUADRANTS: usize = 4;
/// Index of the intensity-band attribute in `attr_labels`.
pub const ATTR_INTENSITY: usize = 0;
/// Index of the position-quadrant attribute in `attr_labels`.
pub const ATTR_QUADRANT: usize = 1;
const BACKGROUND_NOISE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub pixels: RealTensor<f64>,
    pub class_label: usize,
    /// `[intensity band, quadrant]`.
    pub attr_labels: Vec<usize>,
}

fn inside(class: usize, dy: i64, dx: i64, r: i64) -> bool {
    match class {
        0 => dy * dy + dx * dx <= r * r + 1,
        1 => (dy == 0 && dx.abs() <= r) || (dx == 0 && dy.abs() <= r),
        2 => dy.abs().max(dx.abs()) == r,
        _ => dy.abs() <= r && 2 * dx.abs() <= dy + r,
    }
}

/// Draws one image. The shape sits inside quadrant `quadrant`
/// (row-major: 0 top-left, 3 bottom-right) with a one-pixel jitter.
pub fn render_shape(size: usize, class: usize, band: usize, quadrant: usize, rng: &mut ChaCha8Rng) -> RealTensor<f64> {
    let cell = (size / 2) as i64;
    let r = (cell * 3 / 8).max(1);
    let (lo, hi) = INTENSITY_BANDS[band];
    let intensity = rng.random_range(lo..hi);
    let cy = (quadrant / 2) as i64 * cell + cell / 2 - rng.random_range(0..2);
    let cx = (quadrant % 2) as i64 * cell + cell / 2 - rng.random_range(0..2);
    RealTensor::from_fn(vec![1, size, size], |i| {
        let (y, x) = ((i / size) as i64, (i % size) as i64);
        let noise = rng.random_range(0.0..BACKGROUND_NOISE);
        if inside(class, y - cy, x - cx, r) {
            intensity
        } else {
            noise
        }
    })
}

/// `n` images of side `size` with class, intensity band and quadrant drawn
/// independently and uniformly.
pub fn generate_shapes(n: usize, size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    if size < 8 || !size.is_multiple_of(2) {
        return Err(Error::Config(format!("image size must be even and at least 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let class = rng.random_range(0..CLASS_NAMES.len());
            let band = rng.random_range(0..INTENSITY_BANDS.len());
            let quadrant = rng.random_range(0..QUADRANTS);
            LabeledImage { pixels: render_shape(size, class, band, quadrant, &mut rng), class_label: class, attr_labels: vec![band, quadrant] }
        })
        .collect())
}

/// Encodes `[1, H, W]` pixels as binary PGM with maxval 255.
pub fn pgm_bytes(pixels: &RealTensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = match pixels.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::ShapeMismatch(format!("PGM needs a [1, H, W] image, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn save_pgm(path: impl AsRef<Path>, pixels: &RealTensor<f64>) -> Result<()> {
    std::fs::write(path, pgm_bytes(pixels)?)?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<RealTensor<f64>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    parse_pgm(&std::fs::read(path)?)
}

/// Parses a binary PGM; only maxval 255 is accepted.
pub fn parse_pgm(bytes: &[u8]) -> Result<RealTensor<f64>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::BadMagic { expected: "P5".into(), found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned() });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Corrupt("PGM header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Corrupt("malformed PGM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Corrupt("malformed PGM header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Corrupt(format!("unsupported PGM maxval {maxval}")));
    }
    let data = &bytes[pos..];
    if data.len() < w * h {
        return Err(Error::Corrupt(format!("PGM has {} of {} pixel bytes", data.len(), w * h)));
    }
    RealTensor::new(vec![1, h, w], data[..w * h].iter().map(|&b| b as f64 / 255.0).collect())
}

/// Writes every image as `img_NNNNN.pgm` plus a `manifest.txt` of
/// `path class attr1 attr2` lines. Returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, images: &[LabeledImage]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        save_pgm(dir.join(&name), &img.pixels)?;
        let attrs: Vec<String> = img.attr_labels.iter().map(|a| a.to_string()).collect();
        writeln!(manifest, "{name} {} {}", img.class_label, attrs.join(" "))?;
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Reads a manifest; image paths are relative to the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(Error::Corrupt(format!("manifest line {} has too few fields", n + 1)));
        }
        let nums: Vec<usize> = fields[1..]
            .iter()
            .map(|f| f.parse().map_err(|_| Error::Corrupt(format!("manifest line {}: bad label {f:?}", n + 1))))
            .collect::<Result<_>>()?;
        out.push(LabeledImage { pixels: load_pgm(base.join(fields[0]))?, class_label: nums[0], attr_labels: nums[1..].to_vec() });
    }
    if out.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    Ok(out)
}
