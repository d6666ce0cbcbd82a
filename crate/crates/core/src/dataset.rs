//! The Square dataset: a colored square at a grid position on a colored
//! background, rendered into small RGB images with ground-truth factors.
//!
//! Pairs either carry a weak label (the index of the one factor the two
//! images are guaranteed to share) or are unlabeled. Splits are written as
//! `DSDD` binaries next to a JSON manifest:
//!
//! ```text
//! "DSDD" | version u32 | height u32 | width u32 | channels u32 | palette u32 | pairs u32 |
//!   pairs × ( label i32 (-1 = unlabeled) | factors_a 3×i32 | factors_b 3×i32 |
//!             pixels_a f64 LE | pixels_b f64 LE )
//! ```
//!
//! Factors are stored as `[square color, position index, background color]`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSDD";
pub const VERSION: u32 = 1;
pub const CHANNELS: usize = 3;

/// Number of generative factors (and code parts) of the Square data.
pub const N_FACTORS: usize = 3;

/// Group index of each factor.
pub const SQUARE_COLOR: usize = 0;
pub const POSITION: usize = 1;
pub const BACKGROUND: usize = 2;

pub const FACTOR_NAMES: [&str; N_FACTORS] = ["square_color", "position", "background_color"];

/// The default six-color palette.
pub fn default_palette() -> Vec<[u8; 3]> {
    vec![
        [230, 25, 25],
        [25, 200, 40],
        [30, 60, 230],
        [240, 220, 30],
        [20, 210, 220],
        [200, 40, 210],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

/// Everything needed to render and sample Square images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub canvas: Canvas,
    pub side: usize,
    pub stride: usize,
    pub palette: Vec<[u8; 3]>,
}

impl Geometry {
    pub fn desk() -> Self {
        Geometry {
            canvas: Canvas {
                height: 16,
                width: 16,
            },
            side: 4,
            stride: 4,
            palette: default_palette(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Canvas { height, width } = self.canvas;
        if height == 0 || width == 0 {
            return Err(Error::invalid("canvas must be non-empty"));
        }
        if self.side == 0 || self.side > height || self.side > width {
            return Err(Error::invalid(format!(
                "square side {} does not fit a {height}x{width} canvas",
                self.side
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("position stride must be positive"));
        }
        if self.palette.len() < 2 {
            return Err(Error::invalid("palette needs at least two colors"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        CHANNELS * self.canvas.height * self.canvas.width
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [CHANNELS, self.canvas.height, self.canvas.width]
    }

    fn grid_rows(&self) -> usize {
        (self.canvas.height - self.side) / self.stride + 1
    }

    fn grid_cols(&self) -> usize {
        (self.canvas.width - self.side) / self.stride + 1
    }

    /// Number of classes of each factor, in factor order.
    pub fn factor_classes(&self) -> [usize; N_FACTORS] {
        let p = self.palette.len();
        [p, self.grid_rows() * self.grid_cols(), p]
    }

    fn color(&self, idx: usize) -> [f64; 3] {
        self.palette[idx].map(|c| c as f64 / 127.5 - 1.0)
    }
}

/// Ground-truth factors of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SquareFactors {
    pub square_color: usize,
    pub background_color: usize,
    /// Top-left corner `(row, col)` of the square.
    pub position: (usize, usize),
}

impl SquareFactors {
    pub fn validate(&self, geo: &Geometry) -> Result<()> {
        let p = geo.palette.len();
        if self.square_color >= p || self.background_color >= p {
            return Err(Error::invalid(format!(
                "palette index out of range (palette has {p} colors): {self:?}"
            )));
        }
        if self.square_color == self.background_color {
            return Err(Error::invalid("square and background colors must differ"));
        }
        let (r, c) = self.position;
        if r + geo.side > geo.canvas.height || c + geo.side > geo.canvas.width {
            return Err(Error::invalid(format!(
                "square of side {} at ({r}, {c}) leaves the {}x{} canvas",
                geo.side, geo.canvas.height, geo.canvas.width
            )));
        }
        Ok(())
    }

    /// Class labels `[square color, position index, background color]`.
    pub fn classes(&self, geo: &Geometry) -> [usize; N_FACTORS] {
        let (r, c) = self.position;
        let pos = (r / geo.stride) * geo.grid_cols() + c / geo.stride;
        [self.square_color, pos, self.background_color]
    }

    pub fn from_classes(classes: [usize; N_FACTORS], geo: &Geometry) -> Self {
        let cols = geo.grid_cols();
        let pos = classes[POSITION];
        SquareFactors {
            square_color: classes[SQUARE_COLOR],
            background_color: classes[BACKGROUND],
            position: ((pos / cols) * geo.stride, (pos % cols) * geo.stride),
        }
    }
}

/// Renders a `[3, height, width]` image with pixels in `[-1, 1]`.
pub fn render_square(factors: &SquareFactors, geo: &Geometry) -> Result<Tensor> {
    factors.validate(geo)?;
    let Canvas { height, width } = geo.canvas;
    let fg = geo.color(factors.square_color);
    let bg = geo.color(factors.background_color);
    let (r0, c0) = factors.position;
    let mut data = Vec::with_capacity(geo.pixels());
    for ch in 0..CHANNELS {
        for r in 0..height {
            for c in 0..width {
                let inside = (r0..r0 + geo.side).contains(&r) && (c0..c0 + geo.side).contains(&c);
                data.push(if inside { fg[ch] } else { bg[ch] });
            }
        }
    }
    Tensor::new(geo.image_shape().to_vec(), data)
}

/// Uniform square color, a different uniform background, uniform grid position.
pub fn sample_factors<R: Rng + ?Sized>(rng: &mut R, geo: &Geometry) -> SquareFactors {
    let square_color = rng.random_range(0..geo.palette.len());
    let background_color = other_color(rng, geo, square_color);
    let position = (
        rng.random_range(0..geo.grid_rows()) * geo.stride,
        rng.random_range(0..geo.grid_cols()) * geo.stride,
    );
    SquareFactors {
        square_color,
        background_color,
        position,
    }
}

fn other_color<R: Rng + ?Sized>(rng: &mut R, geo: &Geometry, avoid: usize) -> usize {
    let c = rng.random_range(0..geo.palette.len() - 1);
    if c >= avoid {
        c + 1
    } else {
        c
    }
}

/// Factors of a pair sharing factor `k`, independent otherwise.
pub fn sample_shared_factors<R: Rng + ?Sized>(
    rng: &mut R,
    geo: &Geometry,
    k: usize,
) -> Result<(SquareFactors, SquareFactors)> {
    let a = sample_factors(rng, geo);
    let mut b = sample_factors(rng, geo);
    match k {
        SQUARE_COLOR => {
            b.square_color = a.square_color;
            b.background_color = other_color(rng, geo, a.square_color);
        }
        POSITION => b.position = a.position,
        BACKGROUND => {
            b.background_color = a.background_color;
            b.square_color = other_color(rng, geo, a.background_color);
        }
        _ => {
            return Err(Error::invalid(format!(
                "group index {k} out of range (n = {N_FACTORS})"
            )))
        }
    }
    Ok((a, b))
}

/// A pair of images with an optional shared-factor label.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub factors_a: [usize; N_FACTORS],
    pub factors_b: [usize; N_FACTORS],
    /// Shared group `k`, or `None` when unlabeled.
    pub label: Option<usize>,
}

impl PairRecord {
    fn render(a: SquareFactors, b: SquareFactors, label: Option<usize>, geo: &Geometry) -> Result<Self> {
        Ok(PairRecord {
            image_a: render_square(&a, geo)?,
            image_b: render_square(&b, geo)?,
            factors_a: a.classes(geo),
            factors_b: b.classes(geo),
            label,
        })
    }

    /// Whether the stored factors agree on the labeled group.
    pub fn label_is_sound(&self) -> bool {
        match self.label {
            Some(k) => self.factors_a[k] == self.factors_b[k],
            None => true,
        }
    }

    /// The same record with `a` and `b` exchanged.
    pub fn swapped(&self) -> Self {
        PairRecord {
            image_a: self.image_b.clone(),
            image_b: self.image_a.clone(),
            factors_a: self.factors_b,
            factors_b: self.factors_a,
            label: self.label,
        }
    }
}

/// Samples a pair from group `G_k`, labeled `k`.
pub fn sample_labeled_pair<R: Rng + ?Sized>(rng: &mut R, geo: &Geometry, k: usize) -> Result<PairRecord> {
    let (a, b) = sample_shared_factors(rng, geo, k)?;
    PairRecord::render(a, b, Some(k), geo)
}

/// A split of pair records with the image geometry they were rendered for.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub palette_size: usize,
    pub records: Vec<PairRecord>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn labeled_count(&self) -> usize {
        self.records.iter().filter(|r| r.label.is_some()).count()
    }

    /// Copy with exactly `floor(rate * len)` labeled pairs, drawn from the
    /// currently labeled ones. Fails if too few are labeled.
    pub fn with_supervision_rate<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Result<PairSet> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::invalid(format!("supervision rate {rate} outside [0, 1]")));
        }
        let want = (rate * self.len() as f64).floor() as usize;
        let labeled: Vec<usize> = (0..self.len()).filter(|&i| self.records[i].label.is_some()).collect();
        if want > labeled.len() {
            return Err(Error::invalid(format!(
                "rate {rate} needs {want} labeled pairs but the split only has {}",
                labeled.len()
            )));
        }
        let mut keep = vec![false; self.len()];
        for i in index::sample(rng, labeled.len(), want) {
            keep[labeled[i]] = true;
        }
        let mut out = self.clone();
        for (rec, keep) in out.records.iter_mut().zip(keep) {
            if !keep {
                rec.label = None;
            }
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, self.height, self.width, self.channels, self.palette_size, self.len())?;
        for r in &self.records {
            write_record(&mut w, r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let palette_size = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let pixels = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Format("invalid image geometry".into()))?;
        let shape = vec![channels, height, width];
        let mut records = Vec::with_capacity(count.min(1 << 20));
        let mut buf = vec![0u8; pixels * 8];
        for _ in 0..count {
            let label = read_i32(&mut r)?;
            let label = match label {
                -1 => None,
                k if (0..N_FACTORS as i32).contains(&k) => Some(k as usize),
                k => return Err(Error::Format(format!("invalid label {k}"))),
            };
            let mut factors = [[0usize; N_FACTORS]; 2];
            for f in factors.iter_mut() {
                for v in f.iter_mut() {
                    let x = read_i32(&mut r)?;
                    *v = usize::try_from(x).map_err(|_| Error::Format(format!("negative factor {x}")))?;
                }
            }
            let mut images = Vec::with_capacity(2);
            for _ in 0..2 {
                r.read_exact(&mut buf)?;
                let data = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                images.push(Tensor::new(shape.clone(), data)?);
            }
            let image_b = images.pop().unwrap();
            let image_a = images.pop().unwrap();
            records.push(PairRecord {
                image_a,
                image_b,
                factors_a: factors[0],
                factors_b: factors[1],
                label,
            });
        }
        Ok(PairSet {
            height,
            width,
            channels,
            palette_size,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

fn write_header<W: Write>(
    w: &mut W,
    height: usize,
    width: usize,
    channels: usize,
    palette: usize,
    count: usize,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (v, what) in [
        (height, "height"),
        (width, "width"),
        (channels, "channels"),
        (palette, "palette size"),
        (count, "pair count"),
    ] {
        w.write_all(&to_u32(v, what)?.to_le_bytes())?;
    }
    Ok(())
}

fn write_record<W: Write>(w: &mut W, r: &PairRecord) -> Result<()> {
    let label = r.label.map_or(-1, |k| k as i32);
    w.write_all(&label.to_le_bytes())?;
    for f in r.factors_a.iter().chain(&r.factors_b) {
        let v = i32::try_from(*f).map_err(|_| Error::invalid(format!("factor {f} too large")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for img in [&r.image_a, &r.image_b] {
        for v in img.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_i32<R: Read>(r: &mut R) -> Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

/// Recipe for a full dataset. Serialized as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    /// Fraction of training pairs that carry a label. Validation and test
    /// pairs are always labeled.
    pub supervision_rate: f64,
    #[serde(default = "default_palette")]
    pub palette: Vec<[u8; 3]>,
    #[serde(default = "default_canvas")]
    pub canvas: Canvas,
    #[serde(default = "default_side")]
    pub square_side: usize,
    #[serde(default = "default_side")]
    pub position_stride: usize,
    pub seed: u64,
    /// Fraction of labeled training pairs whose label is replaced by a wrong group.
    #[serde(default)]
    pub noise_rate: f64,
}

fn default_canvas() -> Canvas {
    Canvas {
        height: 16,
        width: 16,
    }
}

fn default_side() -> usize {
    4
}

/// Upper bound on pairs per split: counts are stored as u32 and the largest
/// split must stay addressable in memory when loaded.
const MAX_PAIRS: usize = 1 << 24;

impl DatasetManifest {
    /// Desk-scale defaults with the given split sizes.
    pub fn desk(train_pairs: usize, val_pairs: usize, test_pairs: usize, supervision_rate: f64, seed: u64) -> Self {
        let geo = Geometry::desk();
        DatasetManifest {
            train_pairs,
            val_pairs,
            test_pairs,
            supervision_rate,
            palette: geo.palette,
            canvas: geo.canvas,
            square_side: geo.side,
            position_stride: geo.stride,
            seed,
            noise_rate: 0.0,
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            canvas: self.canvas,
            side: self.square_side,
            stride: self.position_stride,
            palette: self.palette.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().validate()?;
        if !(0.0..=1.0).contains(&self.supervision_rate) {
            return Err(Error::invalid(format!(
                "supervision_rate {} outside [0, 1]",
                self.supervision_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::invalid(format!("noise_rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.train_pairs == 0 {
            return Err(Error::invalid("train_pairs must be positive"));
        }
        for (n, what) in [
            (self.train_pairs, "train_pairs"),
            (self.val_pairs, "val_pairs"),
            (self.test_pairs, "test_pairs"),
        ] {
            if n > MAX_PAIRS {
                return Err(Error::invalid(format!("{what} = {n} exceeds the limit of {MAX_PAIRS}")));
            }
        }
        let bytes_per_pair = 4 + 24 + 2 * 8 * self.geometry().pixels() as u64;
        let total = (self.train_pairs + self.val_pairs + self.test_pairs) as u64;
        if total.checked_mul(bytes_per_pair).is_none() {
            return Err(Error::invalid("requested dataset size overflows"));
        }
        Ok(())
    }

    pub fn labeled_train_pairs(&self) -> usize {
        (self.supervision_rate * self.train_pairs as f64).floor() as usize
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Generates one split. Every pair shares one uniformly drawn factor; the
/// first `floor(rate * count)` of a random permutation keep that label.
pub fn generate_split(
    geo: &Geometry,
    count: usize,
    rate: f64,
    noise_rate: f64,
    seed: u64,
    stream_id: u64,
) -> Result<PairSet> {
    let mut rng = rng_for(seed, stream_id);
    let labeled_n = (rate * count as f64).floor() as usize;
    let mut labeled = vec![false; count];
    for i in index::sample(&mut rng, count, labeled_n) {
        labeled[i] = true;
    }
    let mut records = Vec::with_capacity(count);
    let mut disturbed = 0;
    for &is_labeled in &labeled {
        let k = rng.random_range(0..N_FACTORS);
        let (a, b) = sample_shared_factors(&mut rng, geo, k)?;
        let label = if is_labeled {
            if noise_rate > 0.0 && rng.random_bool(noise_rate) {
                disturbed += 1;
                let wrong = rng.random_range(0..N_FACTORS - 1);
                Some(if wrong >= k { wrong + 1 } else { wrong })
            } else {
                Some(k)
            }
        } else {
            None
        };
        records.push(PairRecord::render(a, b, label, geo)?);
    }
    let unsound = records.iter().filter(|r| !r.label_is_sound()).count();
    if unsound > disturbed {
        return Err(Error::Numerical(format!(
            "{unsound} labeled pairs disagree on their group but only {disturbed} were disturbed"
        )));
    }
    Ok(PairSet {
        height: geo.canvas.height,
        width: geo.canvas.width,
        channels: CHANNELS,
        palette_size: geo.palette.len(),
        records,
    })
}

/// Train, validation and test splits of one manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareDataset {
    pub manifest: DatasetManifest,
    pub train: PairSet,
    pub val: PairSet,
    pub test: PairSet,
}

impl SquareDataset {
    pub fn generate(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let geo = manifest.geometry();
        let seed = manifest.seed;
        Ok(SquareDataset {
            manifest: manifest.clone(),
            train: generate_split(
                &geo,
                manifest.train_pairs,
                manifest.supervision_rate,
                manifest.noise_rate,
                seed,
                stream::TRAIN_SPLIT,
            )?,
            val: generate_split(&geo, manifest.val_pairs, 1.0, 0.0, seed, stream::VAL_SPLIT)?,
            test: generate_split(&geo, manifest.test_pairs, 1.0, 0.0, seed, stream::TEST_SPLIT)?,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.manifest.geometry()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.manifest.save(dir.join("manifest.json"))?;
        self.train.save(dir.join("train.dsdd"))?;
        self.val.save(dir.join("val.dsdd"))?;
        self.test.save(dir.join("test.dsdd"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::load(dir.join("manifest.json"))?;
        let ds = SquareDataset {
            train: PairSet::load(dir.join("train.dsdd"))?,
            val: PairSet::load(dir.join("val.dsdd"))?,
            test: PairSet::load(dir.join("test.dsdd"))?,
            manifest,
        };
        let geo = ds.geometry();
        for (split, name) in [(&ds.train, "train"), (&ds.val, "val"), (&ds.test, "test")] {
            if split.height != geo.canvas.height || split.width != geo.canvas.width || split.channels != CHANNELS {
                return Err(Error::Format(format!("{name} split does not match the manifest canvas")));
            }
        }
        Ok(ds)
    }
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BuildSummary {
    pub out_dir: PathBuf,
    pub train_pairs: usize,
    pub labeled_train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
}

/// Generates the splits of `manifest` and writes them under `out_dir`.
pub fn build_dataset(manifest: &DatasetManifest, out_dir: impl AsRef<Path>) -> Result<BuildSummary> {
    let ds = SquareDataset::generate(manifest)?;
    ds.save(&out_dir)?;
    Ok(BuildSummary {
        out_dir: out_dir.as_ref().to_path_buf(),
        train_pairs: ds.train.len(),
        labeled_train_pairs: ds.train.labeled_count(),
        val_pairs: ds.val.len(),
        test_pairs: ds.test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn red_on_blue() -> SquareFactors {
        SquareFactors {
            square_color: 0,
            background_color: 2,
            position: (0, 0),
        }
    }

    fn rgb(img: &Tensor, r: usize, c: usize) -> [f64; 3] {
        let hw = img.shape()[1] * img.shape()[2];
        let w = img.shape()[2];
        [0, 1, 2].map(|ch| img.data()[ch * hw + r * w + c])
    }

    #[test]
    fn corner_pixels_take_square_and_background_colors() {
        let geo = Geometry::desk();
        let img = render_square(&red_on_blue(), &geo).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        assert_eq!(rgb(&img, 0, 0), geo.color(0));
        assert_eq!(rgb(&img, 15, 15), geo.color(2));
    }

    #[test]
    fn square_covers_side_squared_pixels() {
        let geo = Geometry::desk();
        for pos in [(0, 0), (4, 8), (12, 12), (5, 3)] {
            let f = SquareFactors {
                position: pos,
                ..red_on_blue()
            };
            let img = render_square(&f, &geo).unwrap();
            let fg = geo.color(0);
            let count = (0..16)
                .flat_map(|r| (0..16).map(move |c| (r, c)))
                .filter(|&(r, c)| rgb(&img, r, c) == fg)
                .count();
            assert_eq!(count, geo.side * geo.side);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let geo = Geometry::desk();
        let a = render_square(&red_on_blue(), &geo).unwrap();
        let b = render_square(&red_on_blue(), &geo).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn invalid_factors_are_rejected() {
        let geo = Geometry::desk();
        let out = SquareFactors {
            position: (13, 0),
            ..red_on_blue()
        };
        assert!(render_square(&out, &geo).is_err());
        let same = SquareFactors {
            background_color: 0,
            ..red_on_blue()
        };
        assert!(render_square(&same, &geo).is_err());
        let bad_idx = SquareFactors {
            square_color: 6,
            ..red_on_blue()
        };
        assert!(render_square(&bad_idx, &geo).is_err());
    }

    #[test]
    fn labeled_pairs_share_their_group() {
        let geo = Geometry::desk();
        let mut rng = rng_for(3, 0);
        for _ in 0..200 {
            let bg = sample_labeled_pair(&mut rng, &geo, BACKGROUND).unwrap();
            assert_eq!(bg.factors_a[BACKGROUND], bg.factors_b[BACKGROUND]);
            assert_eq!(rgb(&bg.image_a, 0, 0).len(), 3);
            let pos = sample_labeled_pair(&mut rng, &geo, POSITION).unwrap();
            assert_eq!(pos.factors_a[POSITION], pos.factors_b[POSITION]);
            let sq = sample_labeled_pair(&mut rng, &geo, SQUARE_COLOR).unwrap();
            assert_eq!(sq.factors_a[SQUARE_COLOR], sq.factors_b[SQUARE_COLOR]);
            for rec in [&bg, &pos, &sq] {
                assert!(rec.label_is_sound());
            }
        }
        assert!(sample_labeled_pair(&mut rng, &geo, 3).is_err());
    }

    #[test]
    fn classes_round_trip_through_factors() {
        let geo = Geometry::desk();
        let mut rng = rng_for(5, 0);
        for _ in 0..100 {
            let f = sample_factors(&mut rng, &geo);
            assert_eq!(SquareFactors::from_classes(f.classes(&geo), &geo), f);
        }
        assert_eq!(geo.factor_classes(), [6, 16, 6]);
    }

    #[test]
    fn label_counts_follow_rate() {
        let geo = Geometry::desk();
        let set = generate_split(&geo, 2000, 0.5, 0.0, 1, stream::TRAIN_SPLIT).unwrap();
        assert_eq!(set.labeled_count(), 1000);
        assert_eq!(set.len(), 2000);
        let none = generate_split(&geo, 50, 0.0, 0.0, 1, stream::TRAIN_SPLIT).unwrap();
        assert_eq!(none.labeled_count(), 0);
    }

    #[test]
    fn noise_disturbs_labels() {
        let geo = Geometry::desk();
        let set = generate_split(&geo, 500, 1.0, 1.0, 1, stream::TRAIN_SPLIT).unwrap();
        assert_eq!(set.labeled_count(), 500);
        let unsound = set.records.iter().filter(|r| !r.label_is_sound()).count();
        assert!(unsound > 0);
    }

    #[test]
    fn supervision_mask_keeps_a_subset() {
        let geo = Geometry::desk();
        let set = generate_split(&geo, 100, 1.0, 0.0, 2, stream::TRAIN_SPLIT).unwrap();
        let masked = set.with_supervision_rate(0.2, &mut rng_for(1, 1)).unwrap();
        assert_eq!(masked.labeled_count(), 20);
        for (a, b) in set.records.iter().zip(&masked.records) {
            if b.label.is_some() {
                assert_eq!(a.label, b.label);
            }
            assert_eq!(a.image_a, b.image_a);
        }
        let half = set.with_supervision_rate(0.5, &mut rng_for(1, 1)).unwrap();
        assert!(half.with_supervision_rate(0.6, &mut rng_for(1, 1)).is_err());
    }

    #[test]
    fn manifest_validation() {
        let mut m = DatasetManifest::desk(10, 2, 2, 0.5, 1);
        assert!(m.validate().is_ok());
        m.supervision_rate = 1.5;
        assert!(m.validate().is_err());
        let mut m = DatasetManifest::desk(10, 2, 2, 0.5, 1);
        m.train_pairs = usize::MAX / 2;
        assert!(m.validate().is_err());
        let mut m = DatasetManifest::desk(10, 2, 2, 0.5, 1);
        m.square_side = 17;
        assert!(m.validate().is_err());
    }

    #[test]
    fn swapped_record_keeps_label() {
        let geo = Geometry::desk();
        let rec = sample_labeled_pair(&mut rng_for(9, 0), &geo, POSITION).unwrap();
        let s = rec.swapped();
        assert_eq!(s.label, rec.label);
        assert_eq!(s.swapped(), rec);
    }
}
