//! Synthetic paired scenes (semantic map + rendered image) and bit-exact
//! PPM/PGM image I/O.
//!
//! A scene is sampled in two independent parts: geometry, which alone
//! determines the label map, and appearance (per-class colours and a global
//! illumination scalar), which only affects the rendered image. Sample `i` of a
//! dataset with seed `s` draws from a ChaCha8 generator seeded with `s` on
//! stream `i`, so samples can be produced independently and in any order.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Float;

pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "sky",
    "ground",
    "circle",
    "square",
    "triangle",
    "stripe",
    "border",
];

pub const BACKGROUND: u8 = 0;
pub const SKY: u8 = 1;
pub const GROUND: u8 = 2;
pub const CIRCLE: u8 = 3;
pub const SQUARE: u8 = 4;
pub const TRIANGLE: u8 = 5;
pub const STRIPE: u8 = 6;
pub const BORDER: u8 = 7;

/// Base RGB colour per class before jitter and illumination.
pub const BASE_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.55, 0.50, 0.45],
    [0.45, 0.65, 0.90],
    [0.35, 0.55, 0.25],
    [0.90, 0.30, 0.20],
    [0.20, 0.30, 0.85],
    [0.95, 0.85, 0.20],
    [0.60, 0.25, 0.65],
    [0.10, 0.10, 0.10],
];

/// An RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::config(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn black(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Planar CHW copy in the requested precision.
    pub fn to_chw<T: Float>(&self) -> Vec<T> {
        let hw = self.width * self.height;
        let mut out = vec![T::zero(); 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = T::from_f64_lossy(self.data[p * 3 + c] as f64);
            }
        }
        out
    }

    /// Builds an image from planar CHW values, clamping to `[0, 1]`.
    pub fn from_chw<T: Float>(width: usize, height: usize, chw: &[T]) -> Self {
        let hw = width * height;
        let mut data = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = chw[c * hw + p].as_f64().clamp(0.0, 1.0) as f32;
            }
        }
        RgbImage { width, height, data }
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }
}

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SemanticMap {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<u8>,
}

impl SemanticMap {
    pub fn new(width: usize, height: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != width * height {
            return Err(Error::config(format!(
                "{width}x{height} semantic map needs {} ids, got {}",
                width * height,
                classes.len()
            )));
        }
        Ok(SemanticMap {
            width,
            height,
            classes,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// Errors if any id is `>= num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.classes.iter().find(|&&c| c as usize >= num_classes) {
            Some(&c) => Err(Error::data(format!(
                "class id {c} outside palette of {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// One-hot planar `[C, H, W]` encoding.
    pub fn one_hot<T: Float>(&self, num_classes: usize) -> Result<Vec<T>> {
        self.validate(num_classes)?;
        let hw = self.width * self.height;
        let mut out = vec![T::zero(); num_classes * hw];
        for (p, &c) in self.classes.iter().enumerate() {
            out[c as usize * hw + p] = T::one();
        }
        Ok(out)
    }

    /// False-colour rendering using the base palette.
    pub fn colorize(&self) -> RgbImage {
        let mut data = Vec::with_capacity(self.classes.len() * 3);
        for &c in &self.classes {
            let col = BASE_COLORS[c as usize % NUM_CLASSES];
            data.extend(col.iter().map(|&v| to_u8(v as f32) as f32 / 255.0));
        }
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// An image with its dense semantic annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub image: RgbImage,
    pub semantics: SemanticMap,
}

impl PairedSample {
    pub fn new(image: RgbImage, semantics: SemanticMap) -> Result<Self> {
        if image.width != semantics.width || image.height != semantics.height {
            return Err(Error::config(format!(
                "image is {}x{} but semantics are {}x{}",
                image.width, image.height, semantics.width, semantics.height
            )));
        }
        Ok(PairedSample { image, semantics })
    }

    pub fn size(&self) -> usize {
        self.image.width
    }
}

// ---- scene sampling -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle { cx: i64, cy: i64, radius: i64 },
    Square { cx: i64, cy: i64, half: i64 },
    /// Upward-pointing isosceles triangle: apex `(cx, cy - half)`, base row `cy + half`.
    Triangle { cx: i64, cy: i64, half: i64 },
    /// Full-width horizontal band of rows `[y0, y0 + thickness)`.
    Stripe { y0: i64, thickness: i64 },
}

impl Shape {
    pub fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => CIRCLE,
            Shape::Square { .. } => SQUARE,
            Shape::Triangle { .. } => TRIANGLE,
            Shape::Stripe { .. } => STRIPE,
        }
    }

    /// Pixel `(x, y)` is covered when its centre lies inside the shape.
    /// All tests run on doubled integer coordinates so rasterization is exact.
    pub fn covers(&self, x: i64, y: i64) -> bool {
        let (px, py) = (2 * x + 1, 2 * y + 1);
        match *self {
            Shape::Circle { cx, cy, radius } => {
                let (dx, dy) = (px - 2 * cx, py - 2 * cy);
                dx * dx + dy * dy <= 4 * radius * radius
            }
            Shape::Square { cx, cy, half } => (px - 2 * cx).abs() <= 2 * half && (py - 2 * cy).abs() <= 2 * half,
            Shape::Triangle { cx, cy, half } => {
                let top = 2 * (cy - half);
                let bottom = 2 * (cy + half);
                py >= top && py <= bottom && 2 * (px - 2 * cx).abs() <= py - top
            }
            Shape::Stripe { y0, thickness } => y >= y0 && y < y0 + thickness,
        }
    }
}

/// Everything that determines the label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub size: usize,
    pub indoor: bool,
    pub horizon: usize,
    pub shapes: Vec<Shape>,
    pub border: bool,
}

/// Everything that only changes pixel colours.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub illumination: f64,
    pub colors: [[f64; 3]; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub index: u64,
    pub geometry: Geometry,
    pub appearance: Appearance,
}

impl Geometry {
    pub fn sample(rng: &mut impl Rng, size: usize) -> Self {
        let s = size as i64;
        let indoor = rng.random_bool(0.25);
        let horizon = rng.random_range(size / 3..2 * size / 3);
        let count = rng.random_range(1..=4);
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let shape = match rng.random_range(0..4u32) {
                0 => Shape::Circle {
                    cx: rng.random_range(0..s),
                    cy: rng.random_range(0..s),
                    radius: rng.random_range(s / 8..=s / 4),
                },
                1 => Shape::Square {
                    cx: rng.random_range(0..s),
                    cy: rng.random_range(0..s),
                    half: rng.random_range(s / 10..=s / 5),
                },
                2 => Shape::Triangle {
                    cx: rng.random_range(0..s),
                    cy: rng.random_range(0..s),
                    half: rng.random_range(s / 8..=s / 4),
                },
                _ => Shape::Stripe {
                    y0: rng.random_range(0..s),
                    thickness: rng.random_range(2..=(s / 8).max(2)),
                },
            };
            shapes.push(shape);
        }
        let border = rng.random_bool(0.3);
        Geometry {
            size,
            indoor,
            horizon,
            shapes,
            border,
        }
    }

    pub fn border_width(&self) -> usize {
        (self.size / 16).max(1)
    }

    /// Class at pixel `(x, y)`: sky/background over ground, shapes in order,
    /// then the border frame.
    pub fn class_at(&self, x: usize, y: usize) -> u8 {
        let bw = self.border_width();
        if self.border && (x < bw || y < bw || x >= self.size - bw || y >= self.size - bw) {
            return BORDER;
        }
        let mut class = if y < self.horizon {
            if self.indoor {
                BACKGROUND
            } else {
                SKY
            }
        } else {
            GROUND
        };
        for shape in &self.shapes {
            if shape.covers(x as i64, y as i64) {
                class = shape.class();
            }
        }
        class
    }

    pub fn render_semantics(&self) -> SemanticMap {
        let mut classes = Vec::with_capacity(self.size * self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                classes.push(self.class_at(x, y));
            }
        }
        SemanticMap {
            width: self.size,
            height: self.size,
            classes,
        }
    }
}

impl Appearance {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let illumination = 0.7 + 0.4 * rng.random::<f64>();
        let mut colors = BASE_COLORS;
        for color in colors.iter_mut() {
            for v in color.iter_mut() {
                *v += 0.24 * (rng.random::<f64>() - 0.5);
            }
        }
        Appearance {
            illumination,
            colors,
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn shade(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl SceneSpec {
    pub fn sample(seed: u64, index: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let geometry = Geometry::sample(&mut rng, size);
        let appearance = Appearance::sample(&mut rng);
        SceneSpec {
            seed,
            index,
            geometry,
            appearance,
        }
    }

    /// Renders the pair. Ground pixels brighten towards the bottom edge.
    pub fn render(&self) -> PairedSample {
        let semantics = self.geometry.render_semantics();
        let size = self.geometry.size;
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let class = semantics.classes[y * size + x] as usize;
                let mut gain = self.appearance.illumination;
                if class == GROUND as usize {
                    gain *= 0.8 + 0.4 * y as f64 / size as f64;
                }
                for c in 0..3 {
                    let v = self.appearance.colors[class][c] * gain;
                    data.push(shade(v) as f32 / 255.0);
                }
            }
        }
        PairedSample {
            image: RgbImage {
                width: size,
                height: size,
                data,
            },
            semantics,
        }
    }
}

/// `n` samples, fully determined by `(seed, image_size)`.
pub fn generate_dataset(n: usize, seed: u64, image_size: usize) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    if image_size < 8 {
        return Err(Error::config("image size must be at least 8"));
    }
    Ok((0..n as u64)
        .map(|i| SceneSpec::sample(seed, i, image_size).render())
        .collect())
}

// ---- PPM / PGM -----------------------------------------------------------------

/// Binary PPM (P6, maxval 255).
pub fn write_image_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| to_u8(v)));
    out
}

/// Binary PGM (P5, maxval 255) of class ids.
pub fn write_semantics_pgm(map: &SemanticMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.classes);
    out
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::parse(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(pos, "expected a single whitespace byte after maxval")),
    }
    if fields[2] != 255 {
        return Err(Error::parse(pos, format!("unsupported maxval {}", fields[2])));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::parse(pos, "zero image dimension"));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        payload: pos,
    })
}

pub fn read_image_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6")?;
    let need = h.width * h.height * 3;
    let body = &bytes[h.payload..];
    if body.len() < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", body.len()),
        ));
    }
    let data = body[..need].iter().map(|&b| b as f32 / 255.0).collect();
    RgbImage::new(h.width, h.height, data)
}

pub fn read_semantics_pgm(bytes: &[u8]) -> Result<SemanticMap> {
    let h = parse_header(bytes, b"P5")?;
    let need = h.width * h.height;
    let body = &bytes[h.payload..];
    if body.len() < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", body.len()),
        ));
    }
    SemanticMap::new(h.width, h.height, body[..need].to_vec())
}

// ---- dataset directories -----------------------------------------------------------

pub const MANIFEST: &str = "manifest.tsv";

/// Writes `images/NNNNNN.ppm`, `semantics/NNNNNN.pgm` and a manifest of
/// `image_path<TAB>semantics_path` lines (paths relative to `dir`).
pub fn write_dataset(dir: &Path, samples: &[PairedSample]) -> Result<()> {
    for sub in ["images", "semantics"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img = format!("images/{i:06}.ppm");
        let sem = format!("semantics/{i:06}.pgm");
        write_file(&dir.join(&img), &write_image_ppm(&s.image))?;
        write_file(&dir.join(&sem), &write_semantics_pgm(&s.semantics))?;
        manifest.push_str(&format!("{img}\t{sem}\n"));
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<PairedSample>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.strip_suffix('\n').ok_or_else(|| {
            Error::parse(offset + line.len(), "manifest line is not LF-terminated")
        })?;
        let (img, sem) = body
            .split_once('\t')
            .ok_or_else(|| Error::parse(offset, "manifest line needs two tab-separated paths"))?;
        let image = read_image_ppm(&read_file(&dir.join(img))?)?;
        let semantics = read_semantics_pgm(&read_file(&dir.join(sem))?)?;
        out.push(PairedSample::new(image, semantics)?);
        offset += line.len();
    }
    if out.is_empty() {
        return Err(Error::data(format!("{} lists no samples", mpath.display())));
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Tiles equally sized images into a grid (row-major), separated by `gap` black pixels.
pub fn tile_images(rows: &[Vec<RgbImage>], gap: usize) -> RgbImage {
    let (w, h) = rows
        .iter()
        .flatten()
        .next()
        .map(|i| (i.width, i.height))
        .unwrap_or((1, 1));
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1);
    let (tw, th) = (cols * (w + gap) + gap, rows.len() * (h + gap) + gap);
    let mut out = RgbImage::black(tw, th);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (ox, oy) = (gap + c * (w + gap), gap + r * (h + gap));
            for y in 0..img.height.min(h) {
                for x in 0..img.width.min(w) {
                    for ch in 0..3 {
                        out.data[((oy + y) * tw + ox + x) * 3 + ch] = img.get(x, y, ch);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_ppm_bytes() {
        let img = RgbImage::new(1, 1, vec![1.0; 3]).unwrap();
        let mut want = b"P6\n1 1\n255\n".to_vec();
        want.extend([0xFF, 0xFF, 0xFF]);
        assert_eq!(write_image_ppm(&img), want);
    }

    #[test]
    fn semantic_pgm_payload_is_row_major() {
        let map = SemanticMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let bytes = write_semantics_pgm(&map);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 1, 2, 3]);
        assert_eq!(read_semantics_pgm(&bytes).unwrap(), map);
    }

    #[test]
    fn parse_errors_report_offsets() {
        match read_image_ppm(b"P5\n1 1\n255\n\0") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match read_image_ppm(b"P6\n2 1\n255\n\x01\x02\x03") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("{other:?}"),
        }
        match read_image_ppm(b"P6\n2 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(read_image_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = read_image_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.data, vec![0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn shapes_rasterize_as_expected() {
        let sq = Shape::Square { cx: 5, cy: 5, half: 1 };
        let covered: Vec<_> = (0..10)
            .flat_map(|y| (0..10).map(move |x| (x, y)))
            .filter(|&(x, y)| sq.covers(x, y))
            .collect();
        assert_eq!(covered.len(), 4, "{covered:?}");
        let tri = Shape::Triangle { cx: 8, cy: 8, half: 4 };
        assert!(tri.covers(7, 11) && tri.covers(8, 11));
        assert!(!tri.covers(7, 3) && !tri.covers(2, 11));
        let st = Shape::Stripe { y0: 3, thickness: 2 };
        assert!(st.covers(0, 3) && st.covers(31, 4) && !st.covers(0, 5));
    }

    #[test]
    fn generation_is_deterministic_and_in_palette() {
        let a = generate_dataset(16, 7, 32).unwrap();
        let b = generate_dataset(16, 7, 32).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.semantics.validate(NUM_CLASSES).unwrap();
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(a, generate_dataset(16, 8, 32).unwrap());
        assert!(generate_dataset(0, 7, 32).is_err());
    }

    #[test]
    fn appearance_never_changes_labels() {
        let spec = SceneSpec::sample(3, 5, 32);
        let mut other = spec.clone();
        other.appearance = Appearance::sample(&mut ChaCha8Rng::seed_from_u64(99));
        let (a, b) = (spec.render(), other.render());
        assert_eq!(a.semantics, b.semantics);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn one_hot_rejects_out_of_palette_ids() {
        let map = SemanticMap::new(2, 1, vec![0, 9]).unwrap();
        assert!(matches!(map.one_hot::<f32>(NUM_CLASSES), Err(Error::Data(_))));
    }
}
