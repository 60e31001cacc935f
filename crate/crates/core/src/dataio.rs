//! Loading SLO images and vessel annotations, dataset splits and random
//! training windows.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::rng::{self, SeededRng};

/// Default training window, width × height.
pub const DEFAULT_WINDOW: (usize, usize) = (320, 240);

/// Grayscale SLO image with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SloImage {
    pub id: String,
    pub native_bit_depth: u8,
    pixels: Plane<f32>,
}

impl SloImage {
    pub fn new(id: impl Into<String>, pixels: Plane<f32>, native_bit_depth: u8) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::Dimension("image must be at least 1x1".into()));
        }
        if let Some(v) = pixels.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("intensity {v} outside [0, 1]")));
        }
        Ok(SloImage {
            id: id.into(),
            native_bit_depth,
            pixels,
        })
    }

    pub fn pixels(&self) -> &Plane<f32> {
        &self.pixels
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Binary vessel annotation: 1 = vessel, 0 = background.
#[derive(Clone, Debug, PartialEq)]
pub struct VesselMask {
    labels: Plane<u8>,
}

impl VesselMask {
    pub fn new(labels: Plane<u8>) -> Result<Self> {
        if labels.as_slice().iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask labels must be 0 or 1".into()));
        }
        Ok(VesselMask { labels })
    }

    /// Builds a mask treating every nonzero value as vessel.
    pub fn from_nonzero(raw: &Plane<u8>) -> Self {
        VesselMask {
            labels: raw.map(|v| u8::from(v != 0)),
        }
    }

    pub fn labels(&self) -> &Plane<u8> {
        &self.labels
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn vessel_count(&self) -> usize {
        self.labels.as_slice().iter().filter(|&&v| v == 1).count()
    }
}

/// Image plus ground truth, with matching dimensions.
#[derive(Clone, Debug)]
pub struct LabelledImage {
    pub image: SloImage,
    pub mask: VesselMask,
}

impl LabelledImage {
    pub fn new(image: SloImage, mask: VesselMask) -> Result<Self> {
        check_pair(&image, &mask)?;
        Ok(LabelledImage { image, mask })
    }

    pub fn id(&self) -> &str {
        &self.image.id
    }
}

pub fn check_pair(image: &SloImage, mask: &VesselMask) -> Result<()> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::Pairing(format!(
            "image '{}' is {}x{} but its mask is {}x{}",
            image.id,
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

fn open_raster(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::io(path, e))
}

fn id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads an 8- or 16-bit single-channel raster, scaling by `1 / (2^bits - 1)`.
pub fn load_image(path: impl AsRef<Path>) -> Result<SloImage> {
    let path = path.as_ref();
    let raster = open_raster(path)?;
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    let (pixels, depth) = match raster {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            (Plane::from_vec(w, h, data)?, 8)
        }
        DynamicImage::ImageLuma16(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
            (Plane::from_vec(w, h, data)?, 16)
        }
        other => {
            let color = other.color();
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "expected a single-channel 8- or 16-bit raster, found {} channels ({color:?})",
                    color.channel_count()
                ),
            });
        }
    };
    SloImage::new(id_from_path(path), pixels, depth)
}

/// Loads an annotation raster; any nonzero sample (in any channel) is vessel.
pub fn load_mask(path: impl AsRef<Path>) -> Result<VesselMask> {
    let path = path.as_ref();
    let raster = open_raster(path)?;
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    let labels: Vec<u8> = match &raster {
        DynamicImage::ImageLuma8(buf) => buf.as_raw().iter().map(|&v| u8::from(v != 0)).collect(),
        DynamicImage::ImageLuma16(buf) => buf.as_raw().iter().map(|&v| u8::from(v != 0)).collect(),
        other => {
            let channels = other.color().channel_count() as usize;
            let rgba = other.to_rgba16();
            rgba.pixels()
                .map(|p| u8::from(p.0[..channels.min(4)].iter().any(|&c| c != 0)))
                .collect()
        }
    };
    VesselMask::new(Plane::from_vec(w, h, labels)?)
}

pub fn load_pair(image_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<LabelledImage> {
    LabelledImage::new(load_image(image_path)?, load_mask(mask_path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Reads a `<image_path>\t<mask_path>` manifest. Relative paths resolve against
/// the manifest's directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (img, mask) = line.split_once('\t').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected '<image_path><TAB><mask_path>'",
                path.display(),
                lineno + 1
            ))
        })?;
        let image_path = base.join(img.trim());
        let id = id_from_path(&image_path);
        if !seen.insert(id.clone()) {
            return Err(Error::Config(format!(
                "duplicate sample id '{id}' in {}",
                path.display()
            )));
        }
        entries.push(ManifestEntry {
            id,
            image_path,
            mask_path: base.join(mask.trim()),
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<LabelledImage>> {
    read_manifest(path)?
        .iter()
        .map(|e| load_pair(&e.image_path, &e.mask_path))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Shuffles `ids` with the seeded generator and cuts them into train, val and
/// test lists of the requested sizes.
pub fn make_split(ids: &[String], counts: (usize, usize, usize), seed: u64) -> Result<DatasetSplit> {
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test != ids.len() {
        return Err(Error::Config(format!(
            "split counts {n_train}+{n_val}+{n_test} do not sum to {} ids",
            ids.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Config(format!("duplicate id '{dup}'")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::seeded(seed));
    let test_ids = shuffled.split_off(n_train + n_val);
    let val_ids = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train_ids: shuffled,
        val_ids,
        test_ids,
        seed,
    })
}

impl DatasetSplit {
    pub fn to_text(&self) -> String {
        let mut out = format!("# seed = {}\n", self.seed);
        for (header, ids) in [
            ("train", &self.train_ids),
            ("val", &self.val_ids),
            ("test", &self.test_ids),
        ] {
            let _ = writeln!(out, "[{header}]");
            for id in ids {
                let _ = writeln!(out, "{id}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = DatasetSplit {
            train_ids: Vec::new(),
            val_ids: Vec::new(),
            test_ids: Vec::new(),
            seed: 0,
        };
        let mut section: Option<&str> = None;
        for line in text.lines().map(str::trim) {
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed =") {
                    split.seed = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad split seed '{}'", v.trim())))?;
                }
                continue;
            }
            match line {
                "[train]" | "[val]" | "[test]" => section = Some(&line[1..line.len() - 1]),
                id => match section {
                    Some("train") => split.train_ids.push(id.to_string()),
                    Some("val") => split.val_ids.push(id.to_string()),
                    Some("test") => split.test_ids.push(id.to_string()),
                    _ => return Err(Error::Config(format!("id '{id}' appears before any section header"))),
                },
            }
        }
        Ok(split)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Selects `ids` from `data` in the order given.
pub fn select<'a>(data: &'a [LabelledImage], ids: &[String]) -> Result<Vec<&'a LabelledImage>> {
    ids.iter()
        .map(|id| {
            data.iter()
                .find(|s| s.id() == id)
                .ok_or_else(|| Error::Config(format!("split id '{id}' not found in dataset")))
        })
        .collect()
}

/// Co-registered image/mask patch cut from a source image.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub image: Plane<f32>,
    pub mask: Plane<u8>,
    pub origin_x: usize,
    pub origin_y: usize,
    pub source_id: String,
}

impl WindowSample {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// Draws `n` windows with independent uniform origins over the valid origin
/// rectangle. Windows may overlap.
pub fn sample_windows(
    image: &SloImage,
    mask: &VesselMask,
    n: usize,
    window_w: usize,
    window_h: usize,
    rng: &mut SeededRng,
) -> Result<Vec<WindowSample>> {
    check_pair(image, mask)?;
    if window_w == 0 || window_h == 0 {
        return Err(Error::Dimension("window dimensions must be positive".into()));
    }
    if image.width() < window_w || image.height() < window_h {
        return Err(Error::Dimension(format!(
            "image '{}' is {}x{}, smaller than the {window_w}x{window_h} window",
            image.id,
            image.width(),
            image.height()
        )));
    }
    let max_x = image.width() - window_w;
    let max_y = image.height() - window_h;
    Ok((0..n)
        .map(|_| {
            let origin_x = rng::index_inclusive(rng, max_x);
            let origin_y = rng::index_inclusive(rng, max_y);
            WindowSample {
                image: image.pixels().crop(origin_x, origin_y, window_w, window_h),
                mask: mask.labels().crop(origin_x, origin_y, window_w, window_h),
                origin_x,
                origin_y,
                source_id: image.id.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:02}")).collect()
    }

    fn ramp_image(w: usize, h: usize) -> (SloImage, VesselMask) {
        let px = Plane::from_fn(w, h, |x, y| ((x * 7 + y * 13) % 256) as f32 / 255.0);
        let mk = Plane::from_fn(w, h, |x, y| u8::from((x + y) % 5 == 0));
        (SloImage::new("ramp", px, 8).unwrap(), VesselMask::new(mk).unwrap())
    }

    #[test]
    fn load_image_normalizes_full_scale_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.png");
        GrayImage::from_pixel(1, 1, Luma([255])).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.pixels().as_slice(), &[1.0]);
        assert_eq!(img.native_bit_depth, 8);
        assert_eq!(img.id, "one");
    }

    #[test]
    fn load_image_reads_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(2, 1, vec![0u16, 65535]).unwrap();
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.native_bit_depth, 16);
        assert_eq!(img.pixels().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn load_image_preserves_768_dims() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ravir.png");
        GrayImage::from_fn(768, 768, |x, y| Luma([((x ^ y) & 0xff) as u8]))
            .save(&p)
            .unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width(), img.height()), (768, 768));
    }

    #[test]
    fn load_image_rejects_color() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        RgbImage::from_pixel(2, 2, Rgb([1, 2, 3])).save(&p).unwrap();
        match load_image(&p) {
            Err(Error::Format { message, .. }) => assert!(message.contains("3 channels"), "{message}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn load_image_truncated_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        GrayImage::from_fn(64, 64, |x, y| Luma([(x * y) as u8]))
            .save(&p)
            .unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Io { .. })));
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_mask_merges_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        GrayImage::from_raw(2, 2, vec![0, 128, 255, 0])
            .unwrap()
            .save(&p)
            .unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.labels().as_slice(), &[0, 1, 1, 0]);

        let z = dir.path().join("z.png");
        GrayImage::new(3, 3).save(&z).unwrap();
        assert_eq!(load_mask(&z).unwrap().vessel_count(), 0);
    }

    #[test]
    fn pairing_mismatch_is_reported() {
        let img = SloImage::new("a", Plane::filled(4, 4, 0.5), 8).unwrap();
        let mask = VesselMask::new(Plane::filled(4, 3, 0)).unwrap();
        assert!(matches!(LabelledImage::new(img, mask), Err(Error::Pairing(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let all = ids(30);
        let s = make_split(&all, (24, 2, 4), 7).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len(), s.test_ids.len()), (24, 2, 4));
        assert_eq!(s, make_split(&all, (24, 2, 4), 7).unwrap());

        let t = make_split(&ids(3), (3, 0, 0), 1).unwrap();
        assert_eq!(t.train_ids.len(), 3);
        assert!(t.val_ids.is_empty() && t.test_ids.is_empty());

        assert!(matches!(make_split(&all, (24, 2, 3), 7), Err(Error::Config(_))));
    }

    #[test]
    fn split_text_round_trip() {
        let s = make_split(&ids(10), (6, 2, 2), 99).unwrap();
        let text = s.to_text();
        assert!(text.contains("[train]\n") && text.contains("[val]\n") && text.contains("[test]\n"));
        assert_eq!(DatasetSplit::parse(&text).unwrap(), s);
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("data.tsv");
        std::fs::write(&m, "# comment\nimgs/a.png\tmasks/a.png\n\nimgs/b.png\tmasks/b.png\n").unwrap();
        let entries = read_manifest(&m).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].id, "b");
        assert_eq!(entries[0].mask_path, dir.path().join("masks/a.png"));

        std::fs::write(&m, "imgs/a.png masks/a.png\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::Config(_))));
    }

    #[test]
    fn windows_on_768_image() {
        let (img, mask) = ramp_image(768, 768);
        let mut r = rng::seeded(3);
        let wins = sample_windows(&img, &mask, 20, 320, 240, &mut r).unwrap();
        assert_eq!(wins.len(), 20);
        for w in &wins {
            assert!(w.origin_x <= 448 && w.origin_y <= 528);
            assert_eq!((w.width(), w.height()), (320, 240));
            for y in (0..240).step_by(17) {
                for x in (0..320).step_by(13) {
                    assert_eq!(w.image.get(x, y), img.pixels().get(w.origin_x + x, w.origin_y + y));
                    assert_eq!(w.mask.get(x, y), mask.labels().get(w.origin_x + x, w.origin_y + y));
                }
            }
        }
    }

    #[test]
    fn window_equal_to_image() {
        let (img, mask) = ramp_image(320, 240);
        let wins = sample_windows(&img, &mask, 5, 320, 240, &mut rng::seeded(0)).unwrap();
        for w in wins {
            assert_eq!((w.origin_x, w.origin_y), (0, 0));
            assert_eq!(&w.image, img.pixels());
            assert_eq!(&w.mask, mask.labels());
        }
    }

    #[test]
    fn window_larger_than_image() {
        let (img, mask) = ramp_image(100, 100);
        match sample_windows(&img, &mask, 1, 320, 240, &mut rng::seeded(0)) {
            Err(Error::Dimension(msg)) => assert!(msg.contains("100x100") && msg.contains("320x240")),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn split_partitions_ids(n in 0usize..40, a in 0usize..40, b in 0usize..40, seed: u64) {
            let a = a.min(n);
            let b = b.min(n - a);
            let s = make_split(&ids(n), (a, b, n - a - b), seed).unwrap();
            let mut all: Vec<_> = s.train_ids.iter().chain(&s.val_ids).chain(&s.test_ids).cloned().collect();
            all.sort();
            proptest::prop_assert_eq!(all, ids(n));
        }

        #[test]
        fn windows_are_coregistered(w in 8usize..48, h in 8usize..48, ww in 1usize..8, wh in 1usize..8, seed: u64) {
            let (img, mask) = ramp_image(w, h);
            let wins = sample_windows(&img, &mask, 4, ww, wh, &mut rng::seeded(seed)).unwrap();
            for s in wins {
                for y in 0..wh {
                    for x in 0..ww {
                        proptest::prop_assert_eq!(s.image.get(x, y), img.pixels().get(s.origin_x + x, s.origin_y + y));
                        proptest::prop_assert_eq!(s.mask.get(x, y), mask.labels().get(s.origin_x + x, s.origin_y + y));
                    }
                }
            }
        }
    }
}
