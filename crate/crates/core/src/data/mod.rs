//! Samples on disk, the dataset manifest, and random resize-and-crop
//! augmentation.

mod pnm;
mod synth;

pub use pnm::{read_pgm, read_ppm, write_raster, Raster};
pub use synth::{rasterize, synth_generate, synth_sample, Shape2d, SynthConfig};

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::tensor::{Shape, Tensor};

/// An RGB image in `[0, 1]` with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// `(1, 3, h, w)`.
    pub image: Tensor,
    pub labels: LabelMap,
}

impl SampleRecord {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::shape(format!("sample image must be 1x3xHxW, got {s}")));
        }
        if (s.h, s.w) != labels.dims() {
            return Err(Error::shape(format!(
                "image {}x{} and labels {}x{} differ",
                s.h,
                s.w,
                labels.height(),
                labels.width()
            )));
        }
        Ok(SampleRecord { image, labels })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }
}

pub fn load_sample(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<SampleRecord> {
    let (ip, lp) = (image_path.as_ref(), label_path.as_ref());
    let img = read_ppm(ip)?;
    let lbl = read_pgm(lp)?;
    if (img.height, img.width) != (lbl.height, lbl.width) {
        return Err(Error::Parse {
            path: lp.to_path_buf(),
            msg: format!(
                "label map is {}x{} but image {} is {}x{}",
                lbl.height,
                lbl.width,
                ip.display(),
                img.height,
                img.width
            ),
        });
    }
    let (h, w) = (img.height, img.width);
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for (p, px) in img.bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            image.set(0, c, p / w, p % w, px[c] as f64 / 255.0);
        }
    }
    SampleRecord::new(image, LabelMap::new(h, w, lbl.bytes)?)
}

/// Writes the image as P6 (values rounded to bytes) and labels as P5.
pub fn save_sample(sample: &SampleRecord, image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = sample.dims();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = sample.image.at(0, c, y, x).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    write_raster(
        image_path,
        &Raster {
            width: w,
            height: h,
            channels: 3,
            bytes,
        },
    )?;
    write_raster(
        label_path,
        &Raster {
            width: w,
            height: h,
            channels: 1,
            bytes: sample.labels.data().to_vec(),
        },
    )
}

/// `classes=<K> ignore=<v>` header, then `image<TAB>label` per line. Relative
/// paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<(PathBuf, PathBuf)>,
    pub num_classes: usize,
    pub ignore_label: u8,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("classes={} ignore={}\n", self.num_classes, self.ignore_label);
        for (i, l) in &self.records {
            s.push_str(&format!("{}\t{}\n", i.display(), l.display()));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let mut classes = None;
        let mut ignore = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("classes", v)) => {
                    classes = Some(v.parse::<usize>().map_err(|e| err(1, format!("classes: {e}")))?)
                }
                Some(("ignore", v)) => {
                    ignore = Some(v.parse::<u8>().map_err(|e| err(1, format!("ignore: {e}")))?)
                }
                _ => return Err(err(1, format!("unexpected header field {field:?}"))),
            }
        }
        let num_classes = classes.ok_or_else(|| err(1, "header lacks classes=<K>".into()))?;
        let ignore_label = ignore.unwrap_or(IGNORE_LABEL);
        let base = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (img, lbl) = line
                .split_once('\t')
                .ok_or_else(|| err(i + 1, "expected image<TAB>label".into()))?;
            records.push((base.join(img), base.join(lbl)));
        }
        Ok(DatasetManifest {
            records,
            num_classes,
            ignore_label,
        })
    }

    /// Loads record `i`, rejecting labels outside `0..num_classes`.
    pub fn load(&self, i: usize) -> Result<SampleRecord> {
        let (ip, lp) = &self.records[i];
        let s = load_sample(ip, lp)?;
        if let Some(&bad) = s
            .labels
            .data()
            .iter()
            .find(|&&l| l != self.ignore_label && l as usize >= self.num_classes)
        {
            return Err(Error::Parse {
                path: lp.clone(),
                msg: format!("label {bad} exceeds {} classes", self.num_classes),
            });
        }
        Ok(s)
    }

    pub fn load_all(&self) -> Result<Vec<SampleRecord>> {
        (0..self.records.len()).map(|i| self.load(i)).collect()
    }
}

fn bilinear_resize(img: &Tensor, nh: usize, nw: usize) -> Tensor {
    let s = img.shape();
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let v = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
        let v = v.clamp(0.0, (src_len - 1) as f64);
        let lo = v.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, v - lo as f64)
    };
    Tensor::from_fn(Shape::new(s.n, s.c, nh, nw), |n, c, y, x| {
        let (y0, y1, fy) = coord(y, s.h, nh);
        let (x0, x1, fx) = coord(x, s.w, nw);
        let top = img.at(n, c, y0, x0) * (1.0 - fx) + img.at(n, c, y0, x1) * fx;
        let bottom = img.at(n, c, y1, x0) * (1.0 - fx) + img.at(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn nearest_resize(labels: &LabelMap, nh: usize, nw: usize) -> LabelMap {
    let (h, w) = labels.dims();
    let src = |dst: usize, src_len: usize, dst_len: usize| {
        (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
    };
    let mut out = LabelMap::filled(nh, nw, 0);
    for y in 0..nh {
        for x in 0..nw {
            out.set(y, x, labels.get(src(y, h, nh), src(x, w, nw)));
        }
    }
    out
}

/// Resizes by a uniform random factor in `scale` (bilinear image, nearest
/// labels) and takes a random `crop x crop` window. Regions outside the
/// resized image become zero pixels with `ignore_label`. Windows whose labels
/// are all ignored are redrawn up to 10 times.
pub fn random_resize_crop(
    sample: &SampleRecord,
    crop: usize,
    scale: (f64, f64),
    seed: u64,
    ignore_label: u8,
) -> Result<SampleRecord> {
    if crop == 0 {
        return Err(Error::invalid("crop size must be >= 1"));
    }
    if !(scale.0 > 0.0 && scale.0 <= scale.1) {
        return Err(Error::invalid(format!("bad scale range {scale:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = sample.dims();
    let mut out = None;
    for _ in 0..=10 {
        let f = if scale.0 == scale.1 { scale.0 } else { rng.gen_range(scale.0..=scale.1) };
        let nh = ((h as f64 * f).round() as usize).max(1);
        let nw = ((w as f64 * f).round() as usize).max(1);
        let origin = |rng: &mut ChaCha8Rng, len: usize| -> i64 {
            let slack = len as i64 - crop as i64;
            if slack >= 0 {
                rng.gen_range(0..=slack)
            } else {
                -rng.gen_range(0..=-slack)
            }
        };
        let y0 = origin(&mut rng, nh);
        let x0 = origin(&mut rng, nw);
        let (img, lbl) = if (nh, nw) == (h, w) {
            (sample.image.clone(), sample.labels.clone())
        } else {
            (bilinear_resize(&sample.image, nh, nw), nearest_resize(&sample.labels, nh, nw))
        };
        let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < nh as i64 && x < nw as i64;
        let image = Tensor::from_fn(Shape::new(1, 3, crop, crop), |_, c, y, x| {
            let (sy, sx) = (y0 + y as i64, x0 + x as i64);
            if inside(sy, sx) {
                img.at(0, c, sy as usize, sx as usize)
            } else {
                0.0
            }
        });
        let mut labels = LabelMap::filled(crop, crop, ignore_label);
        for y in 0..crop {
            for x in 0..crop {
                let (sy, sx) = (y0 + y as i64, x0 + x as i64);
                if inside(sy, sx) {
                    labels.set(y, x, lbl.get(sy as usize, sx as usize));
                }
            }
        }
        let all_ignored = labels.data().iter().all(|&l| l == ignore_label);
        out = Some(SampleRecord { image, labels });
        if !all_ignored {
            break;
        }
    }
    Ok(out.expect("at least one draw"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> SampleRecord {
        let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            ((c * 7 + y * 3 + x) % 11) as f64 / 10.0
        });
        let labels = LabelMap::new(h, w, (0..h * w).map(|i| ((i / 5) % 3) as u8).collect()).unwrap();
        SampleRecord::new(image, labels).unwrap()
    }

    #[test]
    fn black_image_zero_labels() {
        let dir = tempfile::tempdir().unwrap();
        let s = SampleRecord::new(Tensor::zeros(Shape::new(1, 3, 2, 2)), LabelMap::filled(2, 2, 0)).unwrap();
        let (ip, lp) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
        save_sample(&s, &ip, &lp).unwrap();
        assert_eq!(fs::read(&ip).unwrap().len(), b"P6\n2 2\n255\n".len() + 12);
        let back = load_sample(&ip, &lp).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn byte_255_label_is_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample(3, 3);
        s.labels.set(1, 1, 255);
        let (ip, lp) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
        save_sample(&s, &ip, &lp).unwrap();
        assert_eq!(load_sample(&ip, &lp).unwrap().labels.get(1, 1), IGNORE_LABEL);
    }

    #[test]
    fn round_trip_reproduces_quantized_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample(4, 5);
        s.image.round_to_f32();
        for v in s.image.data_mut() {
            *v = (*v * 255.0).round() / 255.0;
        }
        let (ip, lp) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
        save_sample(&s, &ip, &lp).unwrap();
        assert_eq!(load_sample(&ip, &lp).unwrap(), s);
    }

    #[test]
    fn dimension_mismatch_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("a.ppm"), dir.path().join("b.pgm"));
        save_sample(&sample(3, 3), &ip, dir.path().join("a.pgm")).unwrap();
        save_sample(&sample(3, 4), dir.path().join("b.ppm"), &lp).unwrap();
        assert!(matches!(load_sample(&ip, &lp), Err(Error::Parse { .. })));
    }

    #[test]
    fn manifest_round_trip_and_label_range() {
        let dir = tempfile::tempdir().unwrap();
        save_sample(&sample(4, 4), dir.path().join("a.ppm"), dir.path().join("a.pgm")).unwrap();
        let m = DatasetManifest {
            records: vec![("a.ppm".into(), "a.pgm".into())],
            num_classes: 3,
            ignore_label: 255,
        };
        let path = dir.path().join("train.txt");
        m.write(&path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("classes=3 ignore=255\na.ppm\ta.pgm\n"));
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back.records[0].0, dir.path().join("a.ppm"));
        back.load(0).unwrap();
        let narrow = DatasetManifest { num_classes: 2, ..back };
        assert!(matches!(narrow.load(0), Err(Error::Parse { .. })));
    }

    #[test]
    fn unit_scale_full_crop_is_identity() {
        let s = sample(6, 6);
        let out = random_resize_crop(&s, 6, (1.0, 1.0), 3, 255).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let s = sample(12, 10);
        let a = random_resize_crop(&s, 8, (0.5, 2.0), 11, 255).unwrap();
        let b = random_resize_crop(&s, 8, (0.5, 2.0), 11, 255).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_resize_pads_with_ignore() {
        let s = sample(4, 4);
        let out = random_resize_crop(&s, 10, (1.0, 1.0), 5, 255).unwrap();
        let ignored = out.labels.data().iter().filter(|&&l| l == 255).count();
        assert_eq!(ignored, 100 - 16);
        let zero_px = (0..10)
            .flat_map(|y| (0..10).map(move |x| (y, x)))
            .filter(|&(y, x)| out.labels.get(y, x) == 255)
            .all(|(y, x)| (0..3).all(|c| out.image.at(0, c, y, x) == 0.0));
        assert!(zero_px);
    }
}
