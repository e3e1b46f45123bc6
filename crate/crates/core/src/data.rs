//! Two-domain synthetic shapes dataset.
//!
//! Source scenes are dark backgrounds with 1..5 colored circles, squares and
//! triangles. The target domain is the same scenes under a fog-like
//! corruption: Gaussian blur, a blend toward white, and clipped noise.
//! Images are stored as binary PPM and labels as one JSON object per line.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detr::{GroundTruthObject, GroundTruthSet, ImageTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle = 1,
    Square = 2,
    Triangle = 3,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn category(self) -> usize {
        self as usize
    }

    /// Whether the point `(px, py)` lies inside a shape of extent `size`
    /// centered at `(cx, cy)`. Triangles point up with the base at the bottom.
    pub fn contains(self, cx: f64, cy: f64, size: f64, px: f64, py: f64) -> bool {
        let h = size / 2.0;
        match self {
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= h * h,
            ShapeKind::Square => (px - cx).abs() <= h && (py - cy).abs() <= h,
            ShapeKind::Triangle => {
                let top = cy - h;
                py >= top && py <= cy + h && (px - cx).abs() <= (py - top) / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length / diameter range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Minimum distance between object centers in pixels.
    pub min_separation: f64,
    pub palette: Vec<[f32; 3]>,
    /// Per-channel range of the flat background color.
    pub background: (f32, f32),
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 5,
            min_size: 10.0,
            max_size: 20.0,
            min_separation: 12.0,
            palette: vec![
                [0.95, 0.25, 0.2],
                [0.2, 0.85, 0.3],
                [0.25, 0.45, 0.95],
                [0.95, 0.85, 0.2],
                [0.85, 0.3, 0.9],
                [0.2, 0.85, 0.9],
            ],
            background: (0.0, 0.3),
            seed: 0,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene size must be positive".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("object size range is empty".into()));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("palette is empty".into()));
        }
        Ok(())
    }
}

/// One labeled image. `id` names the image file `<id>.ppm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<GroundTruthObject>,
}

impl AnnotationRecord {
    pub fn ground_truth(&self) -> GroundTruthSet {
        GroundTruthSet::new(self.objects.clone())
    }
}

pub fn image_id(index: usize) -> String {
    format!("{index:06}")
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Analytic placement of one object, in pixels.
#[derive(Clone, Copy, Debug)]
pub struct Placed {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

const SUPERSAMPLE: usize = 4;

/// Fraction of pixel `(x, y)` covered by the shape, on a 4x4 subpixel grid.
fn coverage(p: &Placed, x: usize, y: usize) -> f32 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if p.kind.contains(p.cx, p.cy, p.size, px, py) {
                hits += 1;
            }
        }
    }
    hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
}

/// Renders scene `index` with anti-aliased edges. Boxes are the analytic
/// shape extents. A pure function of `(spec, index)`; pixel values are
/// multiples of 1/255 so that PPM storage is lossless.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<(ImageTensor, AnnotationRecord)> {
    let (image, record, _) = generate_scene_with_layout(spec, index)?;
    Ok((image, record))
}

/// As [`generate_scene`], also returning the analytic object placements.
pub fn generate_scene_with_layout(
    spec: &SceneSpec,
    index: usize,
) -> Result<(ImageTensor, AnnotationRecord, Vec<Placed>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (w, h) = (spec.width, spec.height);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for obj in 0..count {
        let mut ok = false;
        for _ in 0..spec.max_retries.max(1) {
            let kind = ShapeKind::ALL[rng.gen_range(0..3)];
            let size = rng.gen_range(spec.min_size..=spec.max_size);
            let half = size / 2.0;
            let (lo_x, hi_x) = (half + 1.0, w as f64 - half - 1.0);
            let (lo_y, hi_y) = (half + 1.0, h as f64 - half - 1.0);
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            let cx = rng.gen_range(lo_x..=hi_x);
            let cy = rng.gen_range(lo_y..=hi_y);
            let clear = placed.iter().all(|p| {
                let dist = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                // extents must not touch, with a one pixel gap
                let gap = (p.size + size) / 2.0 + 1.0;
                dist >= spec.min_separation && ((p.cx - cx).abs() >= gap || (p.cy - cy).abs() >= gap)
            });
            if clear {
                placed.push(Placed { kind, cx, cy, size });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(format!(
                "scene {index}: could not place object {} of {count} in a {w}x{h} image after {} attempts",
                obj + 1,
                spec.max_retries
            )));
        }
    }

    let bg: Vec<f32> = (0..3)
        .map(|_| quantize(rng.gen_range(spec.background.0..=spec.background.1)))
        .collect();
    let mut image = ImageTensor::filled(h, w, 0.0);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                image.set(c, y, x, bg[c]);
            }
        }
    }

    let mut objects = Vec::with_capacity(placed.len());
    for p in &placed {
        let color = spec.palette[rng.gen_range(0..spec.palette.len())].map(quantize);
        let half = p.size / 2.0;
        let ys = (p.cy - half).floor() as usize..((p.cy + half).ceil() as usize).min(h);
        let mut covered_any = false;
        for y in ys {
            let xs = (p.cx - half).floor() as usize..((p.cx + half).ceil() as usize).min(w);
            for x in xs {
                let cover = coverage(p, x, y);
                if cover > 0.0 {
                    covered_any = true;
                    for (c, &v) in color.iter().enumerate() {
                        let old = image.get(c, y, x);
                        image.set(c, y, x, quantize(old + cover * (v - old)));
                    }
                }
            }
        }
        if !covered_any {
            return Err(Error::Generation(format!(
                "scene {index}: object of size {:.2} rendered no pixels",
                p.size
            )));
        }
        let (wf, hf) = (w as f64, h as f64);
        objects.push(GroundTruthObject {
            bbox: [
                (p.cx / wf) as f32,
                (p.cy / hf) as f32,
                (p.size / wf) as f32,
                (p.size / hf) as f32,
            ],
            category: p.kind.category(),
        });
    }

    Ok((
        image,
        AnnotationRecord {
            id: image_id(index),
            width: w,
            height: h,
            objects,
        },
        placed,
    ))
}

/// Fog-like corruption parameters. `blur_radius` is the Gaussian sigma in
/// pixels; `haze` is the blend weight toward white.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub blur_radius: f64,
    pub haze: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        Self {
            blur_radius: 0.0,
            haze: 0.0,
            noise_std: 0.0,
            seed: 0,
        }
    }

    /// Strong enough that a source-only detector loses most of its target
    /// accuracy, mild enough that object edges survive.
    pub fn fog(seed: u64) -> Self {
        Self {
            blur_radius: 1.2,
            haze: 0.4,
            noise_std: 0.04,
            seed,
        }
    }

    /// `"fog"` or `"none"`.
    pub fn preset(name: &str, seed: u64) -> Result<Option<Self>> {
        match name {
            "fog" => Ok(Some(Self::fog(seed))),
            "none" => Ok(None),
            other => Err(Error::Config(format!("unknown shift preset '{other}' (expected fog or none)"))),
        }
    }
}

/// Normalized 1-D Gaussian kernel with half-width `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with edge replication, computed in f64.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> ImageTensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    let mut tmp = vec![0f64; h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let xx = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                        kv * image.get(c, y, xx) as f64
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let yy = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                        kv * tmp[yy * w + x]
                    })
                    .sum();
                out.set(c, y, x, v as f32);
            }
        }
    }
    out
}

/// Blur, then haze toward white, then clipped Gaussian noise. The noise
/// stream is keyed by `(spec.seed, index)`; output is quantized to 1/255.
pub fn apply_domain_shift(image: &ImageTensor, spec: &DomainShiftSpec, index: usize) -> ImageTensor {
    let mut out = gaussian_blur(image, spec.blur_radius);
    let haze = spec.haze.clamp(0.0, 1.0) as f32;
    if haze > 0.0 {
        for v in out.pixels.iter_mut() {
            *v = (1.0 - haze) * *v + haze;
        }
    }
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64);
        let normal = Normal::new(0.0, spec.noise_std).expect("noise std is positive and finite");
        for v in out.pixels.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    for v in out.pixels.iter_mut() {
        *v = quantize(*v);
    }
    out
}

pub fn encode_ppm(image: &ImageTensor) -> Vec<u8> {
    let (h, w) = (image.height, image.width);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(image.get(c, y, x)));
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<(usize, String)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, start, format!("missing {what}")));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()))
    };
    let (at, magic) = token("magic number")?;
    if magic != "P6" {
        return Err(Error::parse(path, at, format!("expected P6, found '{magic}'")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let (at, t) = token(what)?;
        t.parse::<usize>()
            .map_err(|_| Error::parse(path, at, format!("bad {what} '{t}'")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(path, pos, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = 3 * w * h;
    if bytes.len() < start + need {
        return Err(Error::parse(
            path,
            bytes.len(),
            format!("raster truncated: {} of {need} bytes", bytes.len().saturating_sub(start)),
        ));
    }
    let mut image = ImageTensor::filled(h, w, 0.0);
    let raster = &bytes[start..start + need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                image.set(c, y, x, raster[(y * w + x) * 3 + c] as f32 / 255.0);
            }
        }
    }
    Ok(image)
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Images and annotations of one `{domain}/{split}` directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub records: Vec<AnnotationRecord>,
    pub images: Vec<ImageTensor>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn split_dir(root: &Path, domain: &str, split: &str) -> PathBuf {
    root.join(domain).join(split)
}

fn annotations_path(dir: &Path) -> PathBuf {
    dir.join("annotations.jsonl")
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.ppm"))
}

pub fn write_split(dir: &Path, split: &Split) -> Result<()> {
    if split.records.len() != split.images.len() {
        return Err(Error::InvalidInput(format!(
            "{} records for {} images",
            split.records.len(),
            split.images.len()
        )));
    }
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    split
        .records
        .par_iter()
        .zip(split.images.par_iter())
        .try_for_each(|(rec, img)| write_ppm(&image_path(dir, &rec.id), img))?;
    let path = annotations_path(dir);
    let mut file = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for rec in &split.records {
        let line = serde_json::to_string(rec)?;
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    file.flush().map_err(|e| Error::io(&path, e))
}

/// Parses `annotations.jsonl`. Blank lines are skipped; anything else that
/// fails to parse is reported with its byte offset.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let rec: AnnotationRecord = serde_json::from_str(body).map_err(|e| {
                Error::parse(path, offset + e.column().saturating_sub(1), e.to_string())
            })?;
            if rec.objects.iter().any(|o| o.bbox.iter().any(|v| !(0.0..=1.0).contains(v))) {
                return Err(Error::parse(path, offset, format!("record {} has a box outside [0,1]", rec.id)));
            }
            records.push(rec);
        }
        offset += line.len();
    }
    Ok(records)
}

pub fn read_split(dir: &Path) -> Result<Split> {
    let path = annotations_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records = parse_annotations(&text, &path)?;
    let images = records
        .par_iter()
        .map(|rec| {
            let p = image_path(dir, &rec.id);
            let img = read_ppm(&p)?;
            if img.width != rec.width || img.height != rec.height {
                return Err(Error::parse(
                    &p,
                    0,
                    format!(
                        "image is {}x{} but annotation says {}x{}",
                        img.width, img.height, rec.width, rec.height
                    ),
                ));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split { records, images })
}

/// Scenes `offset .. offset + count`, generated in parallel.
pub fn generate_split(spec: &SceneSpec, offset: usize, count: usize) -> Result<Split> {
    let pairs = (offset..offset + count)
        .into_par_iter()
        .map(|i| generate_scene(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let (images, records) = pairs.into_iter().unzip();
    Ok(Split { records, images })
}

pub fn shift_split(split: &Split, shift: &DomainShiftSpec) -> Result<Split> {
    let images = split
        .records
        .par_iter()
        .zip(split.images.par_iter())
        .map(|(rec, img)| {
            let index: usize = rec
                .id
                .parse()
                .map_err(|_| Error::InvalidInput(format!("image id '{}' is not an index", rec.id)))?;
            Ok(apply_domain_shift(img, shift, index))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        records: split.records.clone(),
        images,
    })
}

/// Writes `{source,target}/{train,val}` under `root`. Train scenes use
/// indices `0..num_train`, val scenes `num_train..num_train + num_val`.
/// The target domain holds the same scenes, shifted when `shift` is set.
pub fn generate_dataset(
    root: &Path,
    spec: &SceneSpec,
    num_train: usize,
    num_val: usize,
    shift: Option<&DomainShiftSpec>,
) -> Result<()> {
    for (name, offset, count) in [("train", 0, num_train), ("val", num_train, num_val)] {
        let source = generate_split(spec, offset, count)?;
        let target = match shift {
            Some(s) => shift_split(&source, s)?,
            None => source.clone(),
        };
        write_split(&split_dir(root, "source", name), &source)?;
        write_split(&split_dir(root, "target", name), &target)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic() {
        let spec = SceneSpec { seed: 9, ..Default::default() };
        let a = generate_scene(&spec, 17).unwrap();
        let b = generate_scene(&spec, 17).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec, 18).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn object_count_range() {
        let spec = SceneSpec { min_objects: 1, max_objects: 1, ..Default::default() };
        for i in 0..20 {
            assert_eq!(generate_scene(&spec, i).unwrap().1.objects.len(), 1);
        }
    }

    fn extent_iou(o: &GroundTruthObject, p: &Placed) -> f64 {
        let b = crate::detr::boxes::cxcywh_to_xyxy(o.bbox.map(|v| v * 64.0)).map(|v| v as f64);
        let h = p.size / 2.0;
        let a = [p.cx - h, p.cy - h, p.cx + h, p.cy + h];
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    }

    #[test]
    fn square_box_matches_analytic_extent() {
        let spec = SceneSpec { min_objects: 1, max_objects: 1, ..Default::default() };
        let mut seen = 0;
        for i in 0..60 {
            let (_, rec, placed) = generate_scene_with_layout(&spec, i).unwrap();
            let (o, p) = (rec.objects[0], placed[0]);
            if p.kind != ShapeKind::Square {
                continue;
            }
            seen += 1;
            let b = crate::detr::boxes::cxcywh_to_xyxy(o.bbox.map(|v| v * 64.0)).map(|v| v as f64);
            let h = p.size / 2.0;
            for (got, want) in b.iter().zip([p.cx - h, p.cy - h, p.cx + h, p.cy + h]) {
                assert!((got - want).abs() <= 1.0, "{got} vs {want}");
            }
        }
        assert!(seen > 5);
    }

    #[test]
    fn boxes_tightly_contain_shapes() {
        let spec = SceneSpec { seed: 2, ..Default::default() };
        for i in 0..100 {
            let (img, rec, placed) = generate_scene_with_layout(&spec, i).unwrap();
            for (o, p) in rec.objects.iter().zip(&placed) {
                assert_eq!(o.category, p.kind.category());
                assert!(extent_iou(o, p) >= 0.9, "scene {i}: iou {}", extent_iou(o, p));
                assert!(o.bbox.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            for (a, pa) in placed.iter().enumerate() {
                for pb in &placed[a + 1..] {
                    let d = ((pa.cx - pb.cx).powi(2) + (pa.cy - pb.cy).powi(2)).sqrt();
                    assert!(d >= spec.min_separation);
                }
            }
            assert_eq!(img.pixels.len(), 3 * 64 * 64);
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let spec = SceneSpec {
            min_objects: 5,
            max_objects: 5,
            min_size: 20.0,
            max_size: 20.0,
            width: 32,
            height: 32,
            max_retries: 10,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn shift_identity_and_haze_endpoint() {
        let (img, _) = generate_scene(&SceneSpec::default(), 3).unwrap();
        assert_eq!(apply_domain_shift(&img, &DomainShiftSpec::identity(), 3), img);
        let white = DomainShiftSpec { haze: 1.0, ..DomainShiftSpec::identity() };
        let out = apply_domain_shift(&img, &white, 3);
        assert!(out.pixels.iter().all(|&v| v == 1.0));
        let fog = DomainShiftSpec::fog(1);
        let a = apply_domain_shift(&img, &fog, 3);
        assert_eq!(a, apply_domain_shift(&img, &fog, 3));
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let mut img = ImageTensor::filled(21, 21, 0.0);
        img.set(1, 10, 10, 1.0);
        let sigma = 1.3;
        let out = gaussian_blur(&img, sigma);
        let half = (3.0 * sigma).ceil() as isize;
        let g = |d: isize| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        let z: f64 = (-half..=half).map(g).sum();
        for y in 0..21isize {
            for x in 0..21isize {
                let (dy, dx) = (y - 10, x - 10);
                let expect = if dy.abs() <= half && dx.abs() <= half {
                    g(dy) * g(dx) / (z * z)
                } else {
                    0.0
                };
                let got = out.get(1, y as usize, x as usize) as f64;
                assert!((got - expect).abs() < 1e-7, "({y},{x}): {got} vs {expect}");
                assert_eq!(out.get(0, y as usize, x as usize), 0.0);
            }
        }
    }

    #[test]
    fn ppm_round_trip_and_errors() {
        let (img, _) = generate_scene(&SceneSpec::default(), 5).unwrap();
        let p = Path::new("x.ppm");
        let bytes = encode_ppm(&img);
        assert_eq!(decode_ppm(&bytes, p).unwrap(), img);
        let err = decode_ppm(&bytes[..bytes.len() - 10], p).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = decode_ppm(b"P3\n1 1\n255\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
        let err = decode_ppm(b"P6\n4 x\n255\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 5, .. }), "{err}");
    }

    #[test]
    fn annotation_parse_errors_carry_offsets() {
        let p = Path::new("a.jsonl");
        let good = r#"{"id":"000000","width":64,"height":64,"objects":[{"bbox":[0.5,0.5,0.1,0.1],"category":1}]}"#;
        let text = format!("{good}\n{}\n", &good[..40]);
        match parse_annotations(&text, p).unwrap_err() {
            Error::Parse { offset, .. } => assert!(offset > good.len()),
            e => panic!("{e}"),
        }
        assert!(parse_annotations("", p).unwrap().is_empty());
        let extra = r#"{"id":"1","width":64,"height":64,"objects":[],"colour":3}"#;
        assert!(parse_annotations(extra, p).is_err());
    }

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_split(&SceneSpec::default(), 0, 3).unwrap();
        write_split(dir.path(), &split).unwrap();
        assert_eq!(read_split(dir.path()).unwrap(), split);

        let empty = tempfile::tempdir().unwrap();
        write_split(empty.path(), &Split::default()).unwrap();
        assert!(read_split(empty.path()).unwrap().is_empty());
    }

    #[test]
    fn dataset_layout_and_label_preservation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { seed: 4, ..Default::default() };
        generate_dataset(dir.path(), &spec, 4, 2, Some(&DomainShiftSpec::fog(4))).unwrap();
        for split in ["train", "val"] {
            let s = read_split(&split_dir(dir.path(), "source", split)).unwrap();
            let t = read_split(&split_dir(dir.path(), "target", split)).unwrap();
            assert_eq!(s.records, t.records);
            assert_ne!(s.images, t.images);
        }
        assert!(dir.path().join("source/train/images/000003.ppm").exists());
        assert!(dir.path().join("target/val/images/000005.ppm").exists());
    }

    #[test]
    fn empty_split_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        write_split(&path, &Split::default()).unwrap();
        let back = read_split(&path).unwrap();
        assert!(back.is_empty());
        assert!(generate_split(&SceneSpec::default(), 0, 0).unwrap().is_empty());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn shifted_pixels_stay_in_range(
            index in 0usize..500,
            blur in 0f64..2.5,
            haze in 0f64..1.0,
            noise in 0f64..0.3,
        ) {
            let (img, rec) = generate_scene(&SceneSpec::default(), index).unwrap();
            let spec = DomainShiftSpec { blur_radius: blur, haze, noise_std: noise, seed: 5 };
            let out = apply_domain_shift(&img, &spec, index);
            proptest::prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            proptest::prop_assert_eq!(out.pixels.len(), img.pixels.len());
            proptest::prop_assert!((1..=5).contains(&rec.objects.len()));
            for o in &rec.objects {
                let [cx, cy, w, h] = o.bbox;
                proptest::prop_assert!(cx - w / 2.0 >= 0.0 && cx + w / 2.0 <= 1.0);
                proptest::prop_assert!(cy - h / 2.0 >= 0.0 && cy + h / 2.0 <= 1.0);
            }
        }
    }
}
