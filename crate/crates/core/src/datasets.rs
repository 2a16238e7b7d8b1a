//! Image dataset ingestion, incremental task schedules, per-class mean images
//! and mini-batch assembly.
//!
//! Three on-disk layouts are understood by [`load_dataset`]:
//!
//! * a packed archive (`DFCILPAK` magic, plain-text `key=value` header,
//!   `u8` pixels, `u32` labels), written by [`write_packed`];
//! * a MedMNIST-style `.npz` with `{train,val,test}_{images,labels}` arrays;
//! * a directory tree `<split>/<class_id>/*.png`, optionally with a
//!   `manifest.txt` declaring `num_classes=`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use dfcil_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PACK_MAGIC: &[u8; 8] = b"DFCILPAK";
pub const PACK_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Images `[N, H, W, C]` with intensities in `[0, 1]` and labels in `0..K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    shape: ImageShape,
    num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    split: SplitTag,
}

impl LabeledImageSet {
    pub fn new(
        shape: ImageShape,
        num_classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
        split: SplitTag,
    ) -> Result<Self> {
        if pixels.len() != labels.len() * shape.pixels() {
            return Err(Error::Shape(format!(
                "{} pixel values for {} images of {:?}",
                pixels.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Schema(format!(
                "label {bad} outside declared range 0..{num_classes}"
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Schema("pixel intensity outside [0, 1]".into()));
        }
        Ok(LabeledImageSet {
            shape,
            num_classes,
            pixels,
            labels,
            split,
        })
    }

    pub fn empty(shape: ImageShape, num_classes: usize, split: SplitTag) -> Self {
        LabeledImageSet {
            shape,
            num_classes,
            pixels: Vec::new(),
            labels: Vec::new(),
            split,
        }
    }

    /// Builds a set from `u8` pixels, scaling by 1/255.
    pub fn from_u8(
        shape: ImageShape,
        num_classes: usize,
        bytes: &[u8],
        labels: Vec<usize>,
        split: SplitTag,
    ) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(shape, num_classes, pixels, labels, split)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Pixels of image `i`, `[H, W, C]` row-major.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.pixels();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        let n = self.shape.pixels();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        LabeledImageSet {
            shape: self.shape,
            num_classes: self.num_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Keeps at most `per_class` samples of every class, choosing them with
    /// a seeded shuffle.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> LabeledImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for k in 0..self.num_classes {
            let mut idx = self.indices_of_class(k);
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            keep.extend(idx);
        }
        keep.sort_unstable();
        self.subset(&keep)
    }

    /// Appends `other`, which must share image shape and label range.
    pub fn concat(&self, other: &LabeledImageSet) -> Result<LabeledImageSet> {
        if self.shape != other.shape || self.num_classes != other.num_classes {
            return Err(Error::Shape("cannot concatenate mismatched image sets".into()));
        }
        let mut out = self.clone();
        out.pixels.extend_from_slice(&other.pixels);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Network input `[B, C, H, W]` for the given sample indices.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let s = self.shape;
        let mut data = Vec::with_capacity(indices.len() * s.pixels());
        for &i in indices {
            data.extend(hwc_to_chw(self.image(i), s).map(f64::from));
        }
        Tensor::new(&[indices.len(), s.channels, s.height, s.width], data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Center-pads every image with zeros to `size × size`. Images already at
    /// least that large are left untouched.
    pub fn pad_to(&self, size: usize) -> LabeledImageSet {
        let s = self.shape;
        if size <= s.height && size <= s.width {
            return self.clone();
        }
        let (nh, nw) = (size.max(s.height), size.max(s.width));
        let (top, left) = ((nh - s.height) / 2, (nw - s.width) / 2);
        let shape = ImageShape {
            height: nh,
            width: nw,
            channels: s.channels,
        };
        let mut pixels = vec![0.0f32; self.len() * shape.pixels()];
        for i in 0..self.len() {
            let src = self.image(i);
            let dst = &mut pixels[i * shape.pixels()..(i + 1) * shape.pixels()];
            for y in 0..s.height {
                let so = y * s.width * s.channels;
                let d0 = ((y + top) * nw + left) * s.channels;
                dst[d0..d0 + s.width * s.channels]
                    .copy_from_slice(&src[so..so + s.width * s.channels]);
            }
        }
        LabeledImageSet {
            shape,
            num_classes: self.num_classes,
            pixels,
            labels: self.labels.clone(),
            split: self.split,
        }
    }
}

/// Reorders one `[H, W, C]` image into `[C, H, W]`.
pub fn hwc_to_chw(img: &[f32], s: ImageShape) -> impl Iterator<Item = f32> + '_ {
    (0..s.channels).flat_map(move |c| {
        (0..s.height * s.width).map(move |p| img[p * s.channels + c])
    })
}

/// Reorders a `[B, C, H, W]` tensor into per-image `[H, W, C]` buffers.
pub fn chw_to_hwc(t: &Tensor) -> Vec<Vec<f64>> {
    let sh = t.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let d = t.data();
    (0..b)
        .map(|n| {
            let mut out = vec![0.0; h * w * c];
            for ch in 0..c {
                for p in 0..h * w {
                    out[p * c + ch] = d[(n * c + ch) * h * w + p];
                }
            }
            out
        })
        .collect()
}

/// All splits of one dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub test: LabeledImageSet,
}

impl Dataset {
    pub fn split(&self, tag: SplitTag) -> &LabeledImageSet {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.train.shape()
    }

    pub fn pad_to(&self, size: usize) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            train: self.train.pad_to(size),
            val: self.val.pad_to(size),
            test: self.test.pad_to(size),
        }
    }

    /// Re-splits the union of all samples with [`split_dataset`].
    pub fn resplit(&self, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset> {
        let all = self.train.concat(&self.val)?.concat(&self.test)?;
        let (train, val, test) = split_dataset(&all, ratios, seed)?;
        Ok(Dataset {
            num_classes: self.num_classes,
            train,
            val,
            test,
        })
    }
}

/// Loads a dataset from a packed archive, `.npz` file or image tree, then
/// center-pads images smaller than `pad_to` (0 disables padding).
pub fn load_dataset(path: &Path, pad_to: usize) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::load(path, "no such file or directory"));
    }
    let ds = if path.is_dir() {
        load_image_tree(path)?
    } else if path.extension().is_some_and(|e| e == "npz") {
        load_npz(path)?
    } else {
        load_packed(path)?
    };
    Ok(if pad_to > 0 { ds.pad_to(pad_to) } else { ds })
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn kv_usize(kv: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    kv.get(key)
        .ok_or_else(|| Error::Schema(format!("header is missing `{key}`")))?
        .parse()
        .map_err(|_| Error::Schema(format!("header key `{key}` is not an integer")))
}

/// Writes all three splits in the packed archive layout.
pub fn write_packed(path: &Path, ds: &Dataset) -> Result<()> {
    let s = ds.shape();
    let count = ds.train.len() + ds.val.len() + ds.test.len();
    let header = format!(
        "version={PACK_VERSION}\ncount={count}\nheight={}\nwidth={}\nchannels={}\nnum_classes={}\ntrain={}\nval={}\ntest={}\n",
        s.height,
        s.width,
        s.channels,
        ds.num_classes,
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    let mut out = Vec::with_capacity(12 + header.len() + count * (s.pixels() + 4));
    out.extend_from_slice(PACK_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for set in [&ds.train, &ds.val, &ds.test] {
        out.extend(set.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    }
    for set in [&ds.train, &ds.val, &ds.test] {
        for &l in set.labels() {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn load_packed(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != PACK_MAGIC {
        return Err(Error::Schema(format!("{} is not a packed archive", path.display())));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Schema("truncated header".into()))?;
    let kv = parse_kv(
        std::str::from_utf8(header).map_err(|_| Error::Schema("header is not UTF-8".into()))?,
    );
    let version = kv_usize(&kv, "version")?;
    if version as u32 != PACK_VERSION {
        return Err(Error::Schema(format!("unsupported archive version {version}")));
    }
    let shape = ImageShape {
        height: kv_usize(&kv, "height")?,
        width: kv_usize(&kv, "width")?,
        channels: kv_usize(&kv, "channels")?,
    };
    let count = kv_usize(&kv, "count")?;
    let num_classes = kv_usize(&kv, "num_classes")?;
    let sizes = [
        kv_usize(&kv, "train")?,
        kv_usize(&kv, "val")?,
        kv_usize(&kv, "test")?,
    ];
    if sizes.iter().sum::<usize>() != count {
        return Err(Error::Schema("split sizes do not sum to count".into()));
    }
    let px0 = 12 + hlen;
    let lab0 = px0 + count * shape.pixels();
    if bytes.len() != lab0 + 4 * count {
        return Err(Error::Schema(format!(
            "payload is {} bytes, header implies {}",
            bytes.len(),
            lab0 + 4 * count
        )));
    }
    let labels: Vec<usize> = bytes[lab0..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let mut start = 0;
    let mut sets = Vec::new();
    for (tag, n) in SplitTag::ALL.into_iter().zip(sizes) {
        let px = &bytes[px0 + start * shape.pixels()..px0 + (start + n) * shape.pixels()];
        sets.push(LabeledImageSet::from_u8(
            shape,
            num_classes,
            px,
            labels[start..start + n].to_vec(),
            tag,
        )?);
        start += n;
    }
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok(Dataset {
        num_classes,
        train,
        val,
        test,
    })
}

struct NpyArray {
    shape: Vec<usize>,
    values: Vec<i64>,
}

fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(Error::Schema("not an .npy array".into()));
    }
    let (hlen, h0) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12),
        v => return Err(Error::Schema(format!("unsupported .npy version {v}"))),
    };
    let header = std::str::from_utf8(&bytes[h0..h0 + hlen])
        .map_err(|_| Error::Schema("bad .npy header".into()))?;
    let field = |name: &str| -> Result<&str> {
        let at = header
            .find(&format!("'{name}'"))
            .ok_or_else(|| Error::Schema(format!(".npy header lacks {name}")))?;
        Ok(header[at + name.len() + 2..].trim_start_matches([':', ' ']))
    };
    let descr = field("descr")?;
    let descr = &descr[1..descr[1..].find('\'').unwrap_or(0) + 1];
    if field("fortran_order")?.starts_with("True") {
        return Err(Error::Schema("Fortran-ordered arrays are not supported".into()));
    }
    let shape_txt = field("shape")?;
    let close = shape_txt.find(')').unwrap_or(shape_txt.len());
    let shape: Vec<usize> = shape_txt[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Schema("bad .npy shape".into())))
        .collect::<Result<_>>()?;
    let body = &bytes[h0 + hlen..];
    let n: usize = shape.iter().product();
    let (width, decode): (usize, fn(&[u8]) -> i64) = match descr {
        "|u1" => (1, |b| b[0] as i64),
        "|i1" => (1, |b| b[0] as i8 as i64),
        "<u2" => (2, |b| u16::from_le_bytes([b[0], b[1]]) as i64),
        "<i2" => (2, |b| i16::from_le_bytes([b[0], b[1]]) as i64),
        "<u4" => (4, |b| u32::from_le_bytes(b.try_into().unwrap()) as i64),
        "<i4" => (4, |b| i32::from_le_bytes(b.try_into().unwrap()) as i64),
        "<u8" | "<i8" => (8, |b| i64::from_le_bytes(b.try_into().unwrap())),
        other => return Err(Error::Schema(format!("unsupported .npy dtype {other}"))),
    };
    if body.len() < n * width {
        return Err(Error::Schema("truncated .npy payload".into()));
    }
    Ok(NpyArray {
        shape,
        values: body[..n * width].chunks_exact(width).map(decode).collect(),
    })
}

fn load_npz(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::load(path, e))?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| Error::load(path, e))?;
    let mut read = |name: &str| -> Result<Option<NpyArray>> {
        let mut entry = match zip.by_name(&format!("{name}.npy")) {
            Ok(e) => e,
            Err(zip::result::ZipError::FileNotFound) => return Ok(None),
            Err(e) => return Err(Error::load(path, e)),
        };
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf)?;
        parse_npy(&buf).map(Some)
    };
    let mut raw = Vec::new();
    for tag in SplitTag::ALL {
        let images = read(&format!("{}_images", tag.as_str()))?;
        let labels = read(&format!("{}_labels", tag.as_str()))?;
        raw.push((tag, images, labels));
    }
    let mut shape = None;
    let mut max_label = 0usize;
    for (tag, images, labels) in &raw {
        match (images, labels) {
            (Some(im), Some(lb)) => {
                let s = match im.shape.as_slice() {
                    [_, h, w] => ImageShape { height: *h, width: *w, channels: 1 },
                    [_, h, w, c] => ImageShape { height: *h, width: *w, channels: *c },
                    other => {
                        return Err(Error::Schema(format!("image array has shape {other:?}")))
                    }
                };
                if lb.values.len() != im.shape[0] {
                    return Err(Error::Schema(format!(
                        "{} split: {} labels for {} images",
                        tag.as_str(),
                        lb.values.len(),
                        im.shape[0]
                    )));
                }
                if lb.values.iter().any(|&v| v < 0) {
                    return Err(Error::Schema("negative label".into()));
                }
                max_label = max_label.max(lb.values.iter().copied().max().unwrap_or(0) as usize);
                if *shape.get_or_insert(s) != s {
                    return Err(Error::Schema("splits disagree on image shape".into()));
                }
            }
            (None, None) => {}
            _ => return Err(Error::Schema(format!("{} split is incomplete", tag.as_str()))),
        }
    }
    let shape = shape.ok_or_else(|| Error::Schema("archive holds no image arrays".into()))?;
    let num_classes = max_label + 1;
    let mut sets = Vec::new();
    for (tag, images, labels) in raw {
        sets.push(match (images, labels) {
            (Some(im), Some(lb)) => {
                let bytes: Vec<u8> = im
                    .values
                    .iter()
                    .map(|&v| u8::try_from(v).map_err(|_| Error::Schema("pixel is not u8".into())))
                    .collect::<Result<_>>()?;
                let labels = lb.values.iter().map(|&v| v as usize).collect();
                LabeledImageSet::from_u8(shape, num_classes, &bytes, labels, tag)?
            }
            _ => LabeledImageSet::empty(shape, num_classes, tag),
        });
    }
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok(Dataset {
        num_classes,
        train,
        val,
        test,
    })
}

fn load_image_tree(root: &Path) -> Result<Dataset> {
    let declared = match fs::read_to_string(root.join("manifest.txt")) {
        Ok(text) => Some(kv_usize(&parse_kv(&text), "num_classes")?),
        Err(_) => None,
    };
    let mut shape: Option<ImageShape> = None;
    let mut per_split: Vec<(SplitTag, Vec<u8>, Vec<usize>)> = Vec::new();
    for tag in SplitTag::ALL {
        let dir = root.join(tag.as_str());
        let mut bytes = Vec::new();
        let mut labels = Vec::new();
        if dir.is_dir() {
            let mut classes: Vec<(usize, std::path::PathBuf)> = Vec::new();
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                if !entry.path().is_dir() {
                    continue;
                }
                let name = entry.file_name().to_string_lossy().to_string();
                let id = name.parse::<usize>().map_err(|_| {
                    Error::Schema(format!("class directory `{name}` is not an integer id"))
                })?;
                classes.push((id, entry.path()));
            }
            classes.sort();
            for (id, cdir) in classes {
                let mut files: Vec<_> = fs::read_dir(&cdir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                    .collect();
                files.sort();
                for f in files {
                    let img = image::open(&f).map_err(|e| Error::load(&f, e))?;
                    let gray = matches!(
                        img.color(),
                        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8
                    );
                    let s = ImageShape {
                        height: img.height() as usize,
                        width: img.width() as usize,
                        channels: if gray { 1 } else { 3 },
                    };
                    if *shape.get_or_insert(s) != s {
                        return Err(Error::Schema(format!(
                            "{} does not match the first image's shape",
                            f.display()
                        )));
                    }
                    if gray {
                        bytes.extend_from_slice(img.to_luma8().as_raw());
                    } else {
                        bytes.extend_from_slice(img.to_rgb8().as_raw());
                    }
                    labels.push(id);
                }
            }
        }
        per_split.push((tag, bytes, labels));
    }
    let shape = shape.ok_or_else(|| Error::load(root, "no PNG images under <split>/<class_id>/"))?;
    let max = per_split
        .iter()
        .flat_map(|(_, _, l)| l.iter().copied())
        .max()
        .unwrap_or(0);
    let num_classes = declared.unwrap_or(max + 1);
    let mut sets = Vec::new();
    for (tag, bytes, labels) in per_split {
        sets.push(LabeledImageSet::from_u8(shape, num_classes, &bytes, labels, tag)?);
    }
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok(Dataset {
        num_classes,
        train,
        val,
        test,
    })
}

/// How class ids are arranged before being cut into tasks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    #[default]
    Ascending,
    Permutation(Vec<usize>),
    Seeded(u64),
}

/// Ordered partition of the label space into tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    num_classes: usize,
    tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    pub fn task_classes(&self, t: usize) -> &[usize] {
        &self.tasks[t]
    }

    /// Union of the label sets of tasks `0..=t`, in schedule order.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flatten().copied().collect()
    }

    /// Union of the label sets of tasks `0..t`.
    pub fn previous_classes(&self, t: usize) -> Vec<usize> {
        self.tasks[..t].iter().flatten().copied().collect()
    }

    /// Indices of `set` belonging to task `t`.
    pub fn task_indices(&self, t: usize, set: &LabeledImageSet) -> Vec<usize> {
        set.indices_of_classes(&self.tasks[t])
    }

    /// Indices of `set` belonging to tasks `0..=t`.
    pub fn seen_indices(&self, t: usize, set: &LabeledImageSet) -> Vec<usize> {
        set.indices_of_classes(&self.seen_classes(t))
    }

    /// Checks disjointness and coverage of `0..num_classes`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_classes];
        for task in &self.tasks {
            if task.is_empty() {
                return Err(Error::Schedule("empty task".into()));
            }
            for &c in task {
                if c >= self.num_classes {
                    return Err(Error::Schedule(format!("class {c} out of range")));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::Schedule(format!("class {c} appears in two tasks")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Schedule(format!("class {missing} is in no task")));
        }
        Ok(())
    }
}

pub fn build_task_schedule(
    num_classes: usize,
    classes_per_task: &[usize],
    order: &ClassOrder,
) -> Result<TaskSchedule> {
    let total: usize = classes_per_task.iter().sum();
    if total != num_classes {
        return Err(Error::Schedule(format!(
            "classes per task {classes_per_task:?} sum to {total}, expected {num_classes}"
        )));
    }
    if classes_per_task.contains(&0) {
        return Err(Error::Schedule("a task must introduce at least one class".into()));
    }
    let perm: Vec<usize> = match order {
        ClassOrder::Ascending => (0..num_classes).collect(),
        ClassOrder::Permutation(p) => {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..num_classes).collect::<Vec<_>>() {
                return Err(Error::Schedule(format!(
                    "{p:?} is not a permutation of 0..{num_classes}"
                )));
            }
            p.clone()
        }
        ClassOrder::Seeded(seed) => {
            let mut p: Vec<usize> = (0..num_classes).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            p
        }
    };
    let mut tasks = Vec::with_capacity(classes_per_task.len());
    let mut at = 0;
    for &n in classes_per_task {
        tasks.push(perm[at..at + n].to_vec());
        at += n;
    }
    let schedule = TaskSchedule { num_classes, tasks };
    schedule.validate()?;
    Ok(schedule)
}

/// Per-class average training image, `[H, W, C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanImage {
    pub class_id: usize,
    pub shape: ImageShape,
    pub pixels: Vec<f64>,
}

impl MeanImage {
    /// The image as a `[1, C, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let s = self.shape;
        let mut out = vec![0.0; s.pixels()];
        for c in 0..s.channels {
            for p in 0..s.height * s.width {
                out[c * s.height * s.width + p] = self.pixels[p * s.channels + c];
            }
        }
        Tensor::new(&[1, s.channels, s.height, s.width], out)
    }
}

pub fn class_mean_image(set: &LabeledImageSet, class_id: usize) -> Result<MeanImage> {
    let idx = set.indices_of_class(class_id);
    if idx.is_empty() {
        return Err(Error::EmptyClass(class_id));
    }
    let mut acc = vec![0.0f64; set.shape().pixels()];
    for &i in &idx {
        for (a, &p) in acc.iter_mut().zip(set.image(i)) {
            *a += p as f64;
        }
    }
    let n = idx.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(MeanImage {
        class_id,
        shape: set.shape(),
        pixels: acc,
    })
}

/// Stratified, seeded train/val/test split.
pub fn split_dataset(
    set: &LabeledImageSet,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be ≥ 0 and sum to 1")));
    }
    let active = r.iter().filter(|&&x| x > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for k in 0..set.num_classes() {
        let mut idx = set.indices_of_class(k);
        if idx.is_empty() {
            continue;
        }
        if idx.len() < active {
            return Err(Error::Stratification(format!(
                "class {k} has {} samples for {active} splits",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n as f64 * r[0]).round() as usize;
        let n_val = ((n as f64 * r[1]).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n - n_val);
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    let [a, b, c] = parts.map(|mut p| {
        p.sort_unstable();
        p
    });
    Ok((
        set.subset(&a).with_split(SplitTag::Train),
        set.subset(&b).with_split(SplitTag::Val),
        set.subset(&c).with_split(SplitTag::Test),
    ))
}

/// Shuffled mini-batches covering `0..n` once.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
