//! Sample loading, degradation to low resolution and train/test splitting.
//!
//! Depth files are single-channel 16-bit PNGs in millimeters with 0 marking a
//! missing return. Images are 8- or 16-bit PNG/JPEG, gray or color.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::Intrinsics;
use crate::maps::{DepthMap, GuidanceImage};
use crate::resample::downsample_depth_nn;
use crate::synth::quantize;

/// Smallest low-resolution side accepted by the network.
pub const MIN_SIDE: usize = 8;
pub const DEFAULT_FACTOR: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleMeta {
    pub image_path: Option<PathBuf>,
    pub depth_path: Option<PathBuf>,
    pub intrinsics: Option<Intrinsics>,
}

/// A registered image/depth pair. `depth_hr` is ground truth on the image
/// grid when available; `depth_lr` is the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct RGBDSample {
    pub id: String,
    pub image: GuidanceImage,
    pub depth_hr: Option<DepthMap>,
    pub depth_lr: Option<DepthMap>,
    pub meta: SampleMeta,
}

impl RGBDSample {
    /// The same sample with its ground truth removed, as seen by training.
    pub fn without_ground_truth(&self) -> RGBDSample {
        RGBDSample {
            depth_hr: None,
            ..self.clone()
        }
    }
}

/// Reads a 16-bit millimeter depth PNG.
pub fn load_depth_png(path: &Path) -> Result<DepthMap> {
    let img = open_image(path)?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected a single-channel 16-bit PNG, got {:?}", img.color()),
        });
    };
    let (w, h) = buf.dimensions();
    let values = buf.into_raw().into_iter().map(|mm| f64::from(mm) / 1000.0).collect();
    DepthMap::new(h as usize, w as usize, values)
}

/// Writes depth as a 16-bit millimeter PNG. Invalid pixels and values that
/// round to zero are written as 0; values above 65.535 m saturate.
pub fn save_depth_png(d: &DepthMap, path: &Path) -> Result<()> {
    let (h, w) = d.dims();
    let raw: Vec<u16> = d
        .values()
        .iter()
        .zip(d.valid())
        .map(|(&v, &ok)| if ok { (v * 1000.0).round().clamp(0.0, 65535.0) as u16 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an image with intensities scaled to `[0, 1]`; gray inputs keep one
/// channel.
pub fn load_image(path: &Path) -> Result<GuidanceImage> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        let buf = img.to_luma16();
        let data = buf.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
        GuidanceImage::new(h, w, 1, data)
    } else {
        let buf = img.to_rgb16();
        let raw = buf.into_raw();
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = f64::from(px[c]) / 65535.0;
            }
        }
        GuidanceImage::new(h, w, 3, data)
    }
}

/// Writes a `[0, 1]` image as a 16-bit PNG.
pub fn save_image_png(img: &GuidanceImage, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let to16 = |v: f64| (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
    let result = match img.channels() {
        1 => ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, img.data().iter().map(|&v| to16(v)).collect())
            .expect("buffer size")
            .save(path),
        3 => {
            let mut raw = vec![0u16; 3 * h * w];
            for i in 0..h * w {
                for c in 0..3 {
                    raw[3 * i + c] = to16(img.plane(c)[i]);
                }
            }
            ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
                .expect("buffer size")
                .save(path)
        }
        c => return Err(Error::Contract(format!("cannot save a {c}-channel image"))),
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a registered pair. The depth becomes `depth_hr`; `depth_lr` is
/// left unset.
pub fn load_sample(image_path: &Path, depth_path: &Path) -> Result<RGBDSample> {
    let image = load_image(image_path)?;
    let depth = load_depth_png(depth_path)?;
    if image.dims() != depth.dims() {
        return Err(Error::dims(format!(
            "{}: image is {}x{} but depth is {}x{}",
            image_path.display(),
            image.height(),
            image.width(),
            depth.height(),
            depth.width()
        )));
    }
    if depth.valid_count() == 0 {
        return Err(Error::AllInvalid(depth_path.display().to_string()));
    }
    let id = depth_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(RGBDSample {
        id,
        image,
        depth_hr: Some(depth),
        depth_lr: None,
        meta: SampleMeta {
            image_path: Some(image_path.to_path_buf()),
            depth_path: Some(depth_path.to_path_buf()),
            intrinsics: None,
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPolicy {
    /// Trim equally from both sides down to a multiple of the factor.
    #[default]
    Center,
    /// Require exact divisibility.
    Strict,
}

/// Window `(top, left, height, width)` that makes `(h, w)` divisible by
/// `factor` under `policy`.
pub fn crop_window(h: usize, w: usize, factor: usize, policy: CropPolicy) -> Result<(usize, usize, usize, usize)> {
    let (ch, cw) = (h - h % factor, w - w % factor);
    if policy == CropPolicy::Strict && (ch, cw) != (h, w) {
        return Err(Error::dims(format!("{h}x{w} is not divisible by {factor}")));
    }
    Ok(((h - ch) / 2, (w - cw) / 2, ch, cw))
}

/// Manufactures a low-resolution input: crop, optionally quantize, then
/// nearest-neighbor downsample.
pub fn degrade(depth_hr: &DepthMap, factor: usize, crop: CropPolicy, quantize_step: Option<f64>) -> Result<DepthMap> {
    if !factor.is_power_of_two() {
        return Err(Error::Contract(format!("degradation factor {factor} is not a power of two")));
    }
    let (h, w) = depth_hr.dims();
    let (top, left, ch, cw) = crop_window(h, w, factor, crop)?;
    if ch / factor < MIN_SIDE || cw / factor < MIN_SIDE {
        return Err(Error::dims(format!(
            "{h}x{w} degraded by {factor} is smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    let mut d = depth_hr.crop(top, left, ch, cw)?;
    if let Some(step) = quantize_step {
        d = quantize(&d, step)?;
    }
    downsample_depth_nn(&d, factor)
}

/// Fills `depth_lr` and crops the image (and ground truth) to the window
/// `degrade` used.
pub fn prepare_sample(sample: &RGBDSample, factor: usize, quantize_step: Option<f64>) -> Result<RGBDSample> {
    let hr = sample
        .depth_hr
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("sample {} has no depth to degrade", sample.id)))?;
    let (h, w) = hr.dims();
    let (top, left, ch, cw) = crop_window(h, w, factor, CropPolicy::Center)?;
    Ok(RGBDSample {
        id: sample.id.clone(),
        image: sample.image.crop(top, left, ch, cw)?,
        depth_hr: Some(hr.crop(top, left, ch, cw)?),
        depth_lr: Some(degrade(hr, factor, CropPolicy::Center, quantize_step)?),
        meta: sample.meta.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.7,
        }
    }
}

/// Seeded shuffle, then the first `round(train_fraction * N)` ids train.
pub fn split(ids: &[String], spec: SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 2 {
        return Err(Error::Contract(format!("cannot split {} samples", ids.len())));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config(format!("train fraction {} outside [0, 1]", spec.train_fraction)));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train_fraction * ids.len() as f64).round() as usize;
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

/// Reads an explicit split: one `<id> <train|test>` pair per line.
pub fn read_split_manifest(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (n, line) in meaningful_lines(&text) {
        let mut parts = line.split_whitespace();
        let (Some(id), Some(which), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format_error(path, n, "expected `<id> <train|test>`"));
        };
        match which {
            "train" => train.push(id.to_string()),
            "test" => test.push(id.to_string()),
            other => return Err(format_error(path, n, &format!("unknown split {other:?}"))),
        }
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub intrinsics: Option<Intrinsics>,
}

fn meaningful_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn format_error(path: &Path, line: usize, msg: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    }
}

/// Parses `<id> <image> <depth> [fx fy cx cy]` lines. Relative paths are
/// resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in meaningful_lines(&text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let intrinsics = match fields.len() {
            3 => None,
            7 => {
                let v: Vec<f64> = fields[3..]
                    .iter()
                    .map(|f| f.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format_error(path, n, &format!("bad intrinsics: {e}")))?;
                Some(Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| format_error(path, n, &e.to_string()))?)
            }
            k => return Err(format_error(path, n, &format!("expected 3 or 7 fields, got {k}"))),
        };
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            image: base.join(fields[1]),
            depth: base.join(fields[2]),
            intrinsics,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut text = String::from("# id image depth [fx fy cx cy]\n");
    for e in entries {
        text.push_str(&format!("{} {} {}", e.id, rel(&e.image), rel(&e.depth)));
        if let Some(k) = e.intrinsics {
            text.push_str(&format!(" {} {} {} {}", k.fx, k.fy, k.cx, k.cy));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pairs `images/<stem>.*` with `depth/<stem>.png` under `root`.
pub fn scan_directory(root: &Path) -> Result<Vec<ManifestEntry>> {
    let depth_dir = root.join("depth");
    let image_dir = root.join("images");
    let mut out = Vec::new();
    let mut depth_files: Vec<PathBuf> = fs::read_dir(&depth_dir)
        .map_err(|e| Error::io(&depth_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    depth_files.sort();
    for depth in depth_files {
        let stem = depth.file_stem().expect("file has a stem").to_string_lossy().into_owned();
        let image = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| image_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::io(image_dir.join(&stem), std::io::ErrorKind::NotFound.into()))?;
        out.push(ManifestEntry {
            id: stem,
            image,
            depth,
            intrinsics: None,
        });
    }
    Ok(out)
}

/// Loads every manifest entry as a sample.
pub fn load_entries(entries: &[ManifestEntry]) -> Result<Vec<RGBDSample>> {
    entries
        .iter()
        .map(|e| {
            let mut s = load_sample(&e.image, &e.depth)?;
            s.id = e.id.clone();
            s.meta.intrinsics = e.intrinsics;
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn depth_png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mm: Vec<u16> = (0..12 * 9).map(|i| if i % 7 == 0 { 0 } else { rng.random_range(1..60000) }).collect();
        let d = DepthMap::new(12, 9, mm.iter().map(|&v| f64::from(v) / 1000.0).collect()).unwrap();
        save_depth_png(&d, &path).unwrap();
        let back = load_depth_png(&path).unwrap();
        assert_eq!(back, d);
        assert!(!back.is_valid(0, 0));
    }

    #[test]
    fn millimeters_become_meters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(2, 1, vec![2500, 0]).unwrap();
        buf.save(&path).unwrap();
        let d = load_depth_png(&path).unwrap();
        assert_eq!(d.get(0, 0), 2.5);
        assert!(!d.is_valid(0, 1));
    }

    #[test]
    fn load_sample_reports_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.png");
        let dep = dir.path().join("d.png");
        save_image_png(&GuidanceImage::constant(8, 8, 3, 0.5), &img).unwrap();
        save_depth_png(&DepthMap::constant(8, 8, 1.0), &dep).unwrap();
        let s = load_sample(&img, &dep).unwrap();
        assert_eq!(s.image.channels(), 3);
        assert!((s.image.data()[0] - 32768.0 / 65535.0).abs() < 1e-12);

        assert!(matches!(load_sample(&dir.path().join("missing.png"), &dep), Err(Error::Io { .. })));
        let junk = dir.path().join("junk.png");
        fs::write(&junk, b"not a png").unwrap();
        assert!(matches!(load_sample(&img, &junk), Err(Error::Image { .. })));
        let small = dir.path().join("s.png");
        save_depth_png(&DepthMap::constant(4, 8, 1.0), &small).unwrap();
        assert!(matches!(load_sample(&img, &small), Err(Error::Dimension(_))));
        let empty = dir.path().join("e.png");
        save_depth_png(&DepthMap::with_mask(8, 8, vec![0.0; 64], vec![false; 64]).unwrap(), &empty).unwrap();
        assert!(matches!(load_sample(&img, &empty), Err(Error::AllInvalid(_))));
        // 8-bit depth is a format error
        assert!(matches!(load_depth_png(&img), Err(Error::Format { .. })));
    }

    #[test]
    fn degrade_examples() {
        let d = DepthMap::constant(512, 512, 2.0);
        let lr = degrade(&d, 8, CropPolicy::Center, None).unwrap();
        assert_eq!(lr, DepthMap::constant(64, 64, 2.0));
        assert!(matches!(degrade(&DepthMap::constant(56, 64, 1.0), 8, CropPolicy::Center, None), Err(Error::Dimension(_))));
        assert!(matches!(degrade(&DepthMap::constant(68, 64, 1.0), 8, CropPolicy::Strict, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn degrade_is_crop_then_nn() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (h, w) = (70, 77);
        let d = DepthMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.1..5.0)).collect()).unwrap();
        let lr = degrade(&d, 8, CropPolicy::Center, None).unwrap();
        let cropped = d.crop(3, 2, 64, 72).unwrap();
        assert_eq!(lr, downsample_depth_nn(&cropped, 8).unwrap());
    }

    #[test]
    fn degrade_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let d = DepthMap::new(128, 128, (0..128 * 128).map(|_| rng.random_range(0.1..5.0)).collect()).unwrap();
        let two = degrade(&d, 2, CropPolicy::Strict, None).unwrap();
        let then_four = degrade(&two, 4, CropPolicy::Strict, None).unwrap();
        assert_eq!(then_four, degrade(&d, 8, CropPolicy::Strict, None).unwrap());
    }

    #[test]
    fn split_ten_is_seven_three() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let (a, b) = split(&ids, SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(split(&ids, SplitSpec::default()).unwrap(), (a, b));
        assert!(split(&ids[..1], SplitSpec::default()).is_err());
    }

    #[test]
    fn manifests_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let entries = vec![
            ManifestEntry {
                id: "a".into(),
                image: dir.path().join("images/a.png"),
                depth: dir.path().join("depth/a.png"),
                intrinsics: Some(Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()),
            },
            ManifestEntry {
                id: "b".into(),
                image: dir.path().join("images/b.png"),
                depth: dir.path().join("depth/b.png"),
                intrinsics: None,
            },
        ];
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
        fs::write(&path, "a x.png\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Format { .. })));

        let split_path = dir.path().join("split.txt");
        fs::write(&split_path, "# official\na train\nb test\n").unwrap();
        assert_eq!(read_split_manifest(&split_path).unwrap(), (vec!["a".into()], vec!["b".into()]));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..200, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let (train, test) = split(&ids, SplitSpec { seed, train_fraction: 0.7 }).unwrap();
            let a: HashSet<_> = train.iter().collect();
            let b: HashSet<_> = test.iter().collect();
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(a.len() + b.len(), n);
            prop_assert_eq!(train.len(), (0.7 * n as f64).round() as usize);
        }
    }
}
