//! Datasets on disk: binary PPM images, bilinear resizing, the
//! `train|query|gallery` directory layout, and a seeded synthetic generator.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::keyed_rng;

/// Per-channel `(mean, std)` normalization applied after decoding.
pub const DEFAULT_NORMALIZE: ([f64; 3], [f64; 3]) = ([0.5; 3], [0.5; 3]);

/// Decodes a binary PPM (P6, maxval 255) into a 3×H×W tensor in [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("PPM header ends early".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token(&mut pos)?;
        t.parse().map_err(|_| Error::Format(format!("bad PPM {what} {t:?}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("empty PPM image".into()));
    }
    pos += 1;
    let need = w * h * 3;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| Error::Format(format!("truncated PPM: need {need} pixel bytes")))?;
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Encodes a 3×H×W tensor in [0, 1] as P6, rounding to 8 bits.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("encode_ppm", format!("expected 3×H×W, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Bilinear resize of a C×H×W tensor with half-pixel centers (no corner alignment).
pub fn resize_bilinear(img: &Tensor<f32>, hw: [usize; 2]) -> Result<Tensor<f32>> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("resize", format!("expected C×H×W, got {s:?}"))),
    };
    let [oh, ow] = hw;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::shape("resize", "zero-sized image"));
    }
    if [oh, ow] == [h, w] {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(inp - 1), (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(oh, h), axis(ow, w));
    let src = img.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn decode_resize(path: impl AsRef<Path>, hw: [usize; 2]) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = decode_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    resize_bilinear(&img, hw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.dir_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}, expected train, query or gallery")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    /// −1 marks junk.
    pub person_id: i64,
    pub camera_id: i64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
    /// Raw training id → contiguous class index.
    pub id_map: BTreeMap<i64, usize>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.id_map.len()
    }

    /// Class index of every training sample, in order.
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| self.id_map[&s.person_id]).collect()
    }
}

/// Parses `<pid>_c<cam>_<tag>.ppm`; `pid` is digits or `-1`.
pub fn parse_file_name(name: &str) -> Result<(i64, i64)> {
    let bad = || Error::Dataset(format!("file name {name:?} does not match <pid>_c<cam>_<tag>.ppm"));
    let stem = name.strip_suffix(".ppm").ok_or_else(bad)?;
    let mut parts = stem.splitn(3, '_');
    let (pid, cam, tag) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    let pid = match pid {
        "-1" => -1,
        p if digits(p) => p.parse().map_err(|_| bad())?,
        _ => return Err(bad()),
    };
    let cam = cam.strip_prefix('c').filter(|c| digits(c)).ok_or_else(bad)?;
    let cam: i64 = cam.parse().map_err(|_| bad())?;
    if cam < 1 || tag.is_empty() {
        return Err(bad());
    }
    Ok((pid, cam))
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut splits: BTreeMap<Split, Vec<Sample>> = BTreeMap::new();
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|n| n.ends_with(".ppm"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Dataset(format!("split {split} in {} has no .ppm images", root.display())));
        }
        let samples = names
            .iter()
            .map(|n| {
                let (person_id, camera_id) = parse_file_name(n)?;
                Ok(Sample { path: dir.join(n), person_id, camera_id, split })
            })
            .collect::<Result<Vec<_>>>()?;
        splits.insert(split, samples);
    }
    let train = splits.remove(&Split::Train).unwrap_or_default();
    if let Some(s) = train.iter().find(|s| s.person_id < 0) {
        return Err(Error::Dataset(format!("junk image {} in the training split", s.path.display())));
    }
    let mut id_map = BTreeMap::new();
    for s in &train {
        id_map.entry(s.person_id).or_insert(0);
    }
    for (i, v) in id_map.values_mut().enumerate() {
        *v = i;
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        train,
        query: splits.remove(&Split::Query).unwrap_or_default(),
        gallery: splits.remove(&Split::Gallery).unwrap_or_default(),
        id_map,
    })
}

/// Decodes and resizes every sample, keeping order.
pub fn load_images(samples: &[Sample], hw: [usize; 2]) -> Result<Vec<Tensor<f32>>> {
    samples.iter().map(|s| decode_resize(&s.path, hw)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_ids: usize,
    pub per_id: usize,
    pub n_cams: usize,
    pub image_hw: [usize; 2],
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 || self.per_id < 2 || self.n_cams < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs ids >= 2, images per id >= 2 and cameras >= 2 (got {}, {}, {})",
                self.n_ids, self.per_id, self.n_cams
            )));
        }
        if self.image_hw.iter().any(|&d| d < 4) {
            return Err(Error::Config(format!("image size {:?} too small", self.image_hw)));
        }
        if self.n_train_ids() == 0 || self.n_train_ids() == self.n_ids {
            return Err(Error::Config("id count leaves no train or no test identities".into()));
        }
        Ok(())
    }

    pub fn n_train_ids(&self) -> usize {
        self.n_ids * 2 / 3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSample {
    pub file: String,
    pub person_id: i64,
    pub camera_id: i64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub samples: Vec<SynthSample>,
}

/// An identity's look: background and 3–5 coloured rectangles in relative coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub background: [f64; 3],
    /// `(top, left, bottom, right)` fractions and colour.
    pub rects: Vec<([f64; 4], [f64; 3])>,
}

impl Appearance {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut color = || [0; 3].map(|_| rng.random_range(0.05..0.95));
        let palette = [color(), color(), color()];
        let n = rng.random_range(3..=5);
        let rects = (0..n)
            .map(|_| {
                let (h, w) = (rng.random_range(0.15..0.5), rng.random_range(0.3..0.9));
                let (top, left) = (rng.random_range(0.0..1.0 - h), rng.random_range(0.0..1.0 - w));
                ([top, left, top + h, left + w], palette[rng.random_range(0..palette.len())])
            })
            .collect();
        Appearance { background: palette[0].map(|v| v * 0.5), rects }
    }

    /// Renders as H×W RGB with the layout shifted by `(dy, dx)` image fractions.
    pub fn render(&self, hw: [usize; 2], shift: (f64, f64)) -> Vec<[f64; 3]> {
        let [h, w] = hw;
        let mut px = vec![self.background; h * w];
        for (y, row) in px.chunks_mut(w).enumerate() {
            let fy = (y as f64 + 0.5) / h as f64 - shift.0;
            for (x, p) in row.iter_mut().enumerate() {
                let fx = (x as f64 + 0.5) / w as f64 - shift.1;
                for ([t, l, b, r], c) in &self.rects {
                    if fy >= *t && fy < *b && fx >= *l && fx < *r {
                        *p = *c;
                    }
                }
            }
        }
        px
    }
}

pub fn identity_appearance(seed: u64, person_id: u64) -> Appearance {
    Appearance::sample(&mut keyed_rng(b"synth-id", seed, person_id, 0))
}

/// Fixed per-camera colour transform, near the identity.
pub fn camera_tint(seed: u64, camera_id: u64) -> [[f64; 3]; 3] {
    let mut rng = keyed_rng(b"synth-cm", seed, camera_id, 0);
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { rng.random_range(0.75..1.25) } else { rng.random_range(-0.12..0.12) };
        }
    }
    m
}

/// One synthetic photo of `person_id` seen by `camera_id`, as a 3×H×W tensor in [0, 1].
pub fn synth_image(spec: &SynthSpec, person_id: u64, camera_id: u64, index: u64) -> Tensor<f32> {
    let mut rng = keyed_rng(b"synth-im", spec.seed, person_id, index);
    let shift = (rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1));
    let gain = rng.random_range(0.8..=1.2);
    let noise = Normal::new(0.0, 0.05).expect("positive sigma");
    let tint = camera_tint(spec.seed, camera_id);
    let px = identity_appearance(spec.seed, person_id).render(spec.image_hw, shift);
    let plane = px.len();
    let mut data = vec![0f32; 3 * plane];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            let tinted: f64 = (0..3).map(|k| tint[c][k] * p[k]).sum();
            data[c * plane + i] = (tinted * gain + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![3, spec.image_hw[0], spec.image_hw[1]], data).expect("sizes agree")
}

/// Writes the synthetic dataset under `out` (train/, query/, gallery/, manifest.json).
/// The first two thirds of the ids are for training; each remaining id gets one
/// camera-1 query and a gallery of images from the other cameras.
pub fn synth_dataset(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<SynthManifest> {
    spec.validate()?;
    let out = out.as_ref();
    for split in Split::ALL {
        let dir = out.join(split.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut samples = Vec::new();
    let mut counter = 0u64;
    for id in 1..=spec.n_ids as u64 {
        let train = id as usize <= spec.n_train_ids();
        for k in 0..spec.per_id as u64 {
            let (split, cam) = if train {
                (Split::Train, k % spec.n_cams as u64 + 1)
            } else if k == 0 {
                (Split::Query, 1)
            } else {
                (Split::Gallery, (k - 1) % (spec.n_cams as u64 - 1) + 2)
            };
            let file = format!("{}/{id:04}_c{cam}_{counter:06}.ppm", split.dir_name());
            let bytes = encode_ppm(&synth_image(spec, id, cam, k))?;
            let path = out.join(&file);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            samples.push(SynthSample { file, person_id: id as i64, camera_id: cam as i64, split });
            counter += 1;
        }
    }
    let manifest = SynthManifest { spec: *spec, samples };
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn ppm_header_and_scale() {
        let bytes = b"P6\n# comment\n2 1\n255\n\xff\x00\x80\x00\xff\x00".to_vec();
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[4], 128.0 / 255.0);
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n1").is_err());
    }

    #[test]
    fn resize_identity_and_average() {
        let img = Tensor::from_fn(vec![3, 4, 3], |i| i as f32 / 36.0);
        let same = resize_bilinear(&img, [4, 3]).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let small = Tensor::new(vec![1, 2, 2], vec![0.1f32, 0.2, 0.3, 0.6]).unwrap();
        let one = resize_bilinear(&small, [1, 1]).unwrap();
        assert!((one.data()[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn file_name_grammar() {
        assert_eq!(parse_file_name("0002_c1_000451.ppm").unwrap(), (2, 1));
        assert_eq!(parse_file_name("-1_c3_000001.ppm").unwrap(), (-1, 3));
        for bad in ["0002_c1.ppm", "0002_1_0.ppm", "x_c1_0.ppm", "0002_c0_0.ppm", "0002_c1_0.png", "-2_c1_0.ppm"] {
            assert!(parse_file_name(bad).is_err(), "{bad}");
        }
    }

    fn write_img(dir: &Path, name: &str) {
        std::fs::create_dir_all(dir).unwrap();
        let img = Tensor::full(vec![3, 4, 2], 0.5f32);
        std::fs::write(dir.join(name), encode_ppm(&img).unwrap()).unwrap();
    }

    #[test]
    fn train_ids_remapped() {
        let root = tempfile::tempdir().unwrap();
        for (i, pid) in [42, 5, 9, 5].iter().enumerate() {
            write_img(&root.path().join("train"), &format!("{pid:04}_c1_{i:06}.ppm"));
        }
        write_img(&root.path().join("query"), "0007_c1_000010.ppm");
        write_img(&root.path().join("gallery"), "-1_c2_000011.ppm");
        let ds = load_dataset(root.path()).unwrap();
        assert_eq!(ds.id_map, BTreeMap::from([(5, 0), (9, 1), (42, 2)]));
        assert_eq!(ds.train_labels(), vec![0, 0, 1, 2]);
        assert_eq!(ds.gallery[0].person_id, -1);
    }

    #[test]
    fn empty_split_rejected() {
        let root = tempfile::tempdir().unwrap();
        write_img(&root.path().join("train"), "0001_c1_000000.ppm");
        write_img(&root.path().join("query"), "0002_c1_000001.ppm");
        std::fs::create_dir_all(root.path().join("gallery")).unwrap();
        assert!(matches!(load_dataset(root.path()), Err(Error::Dataset(_))));
        write_img(&root.path().join("gallery"), "bad.ppm");
        assert!(matches!(load_dataset(root.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn synth_counts_and_round_trip() {
        let spec = SynthSpec { n_ids: 6, per_id: 4, n_cams: 3, image_hw: [16, 8], seed: 3 };
        let root = tempfile::tempdir().unwrap();
        let m = synth_dataset(&spec, root.path()).unwrap();
        let ds = load_dataset(root.path()).unwrap();
        assert_eq!((ds.train.len(), ds.query.len(), ds.gallery.len()), (16, 2, 6));
        assert_eq!(ds.num_classes(), 4);
        assert!(ds.query.iter().all(|s| s.camera_id == 1));
        assert!(ds.gallery.iter().all(|s| s.camera_id != 1));
        let mut listed: Vec<(i64, i64, Split)> = m.samples.iter().map(|s| (s.person_id, s.camera_id, s.split)).collect();
        let mut loaded: Vec<(i64, i64, Split)> =
            Split::ALL.iter().flat_map(|&sp| ds.split(sp).iter().map(|s| (s.person_id, s.camera_id, s.split))).collect();
        listed.sort();
        loaded.sort();
        assert_eq!(listed, loaded);
        let img = decode_resize(&ds.train[0].path, [16, 8]).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_synth_counts() {
        for (n_ids, per_id, n_cams) in [(1, 4, 3), (6, 1, 3), (6, 4, 1)] {
            let spec = SynthSpec { n_ids, per_id, n_cams, image_hw: [16, 8], seed: 0 };
            assert!(spec.validate().is_err());
        }
    }

    #[test]
    fn identities_look_different() {
        let distinct = (0..100u64)
            .filter(|&i| {
                let a = identity_appearance(17, 2 * i + 1).render([32, 16], (0.0, 0.0));
                let b = identity_appearance(17, 2 * i + 2).render([32, 16], (0.0, 0.0));
                a.iter().zip(&b).map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>()).sum::<f64>() > 0.0
            })
            .count();
        assert!(distinct >= 99);
    }

    proptest! {
        #[test]
        fn ppm_round_trip_on_quantized_values(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let img = Tensor::from_fn(vec![3, h, w], |i| ((seed.wrapping_add(i as u64 * 2654435761) >> 7) % 256) as f32 / 255.0);
            let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
