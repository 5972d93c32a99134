//! Procedural vessel-network phantoms in three phenotype classes.
//!
//! Every phantom is drawn from one fixed template of named segments on a
//! 64x64 reference grid (scaled to the requested image size): a basilar
//! trunk, two posterior cerebral branches, an anterior ring arc, two middle
//! cerebral branches and up to two posterior communicating (PComA)
//! connectors. The class decides which connectors are drawn:
//!
//! | class | PComA segments |
//! |-------|----------------|
//! | 1     | left and right |
//! | 2     | one side, picked from the seed |
//! | 3     | none |
//!
//! Each segment is a quadratic Bezier curve whose junction and middle
//! control points are jittered uniformly by up to `jitter_amplitude`
//! pixels. A voxel's intensity is `exp(-d^2 / (2 sigma^2))` for its distance
//! `d` to the closest segment, followed by clamped additive Gaussian noise.
//!
//! Template control points (reference grid, `(x, y)`, `y` pointing down):
//!
//! | segment       | start    | middle   | end      |
//! |---------------|----------|----------|----------|
//! | basilar       | (32, 62) | (32, 53) | (32, 44) |
//! | pca left      | (32, 44) | (22, 40) | (6, 48)  |
//! | pca right     | (32, 44) | (42, 40) | (58, 48) |
//! | anterior ring | (21, 26) | (32, 6)  | (43, 26) |
//! | mca left      | (21, 26) | (12, 22) | (3, 24)  |
//! | mca right     | (43, 26) | (52, 22) | (61, 24) |
//! | pcoma left    | (21, 42) | (20, 34) | (21, 26) |
//! | pcoma right   | (43, 42) | (44, 34) | (43, 26) |
//!
//! The PComA zones used by the oracle classifier are the rectangles
//! `x in [17, 25), y in [30, 38)` (left) and `x in [39, 47), y in [30, 38)`
//! (right) on the reference grid.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::util::short_digest;

const REFERENCE_GRID: f64 = 64.0;

/// Phenotype class, by number of PComA segments present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Class1,
    Class2,
    Class3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Class1, ClassLabel::Class2, ClassLabel::Class3];

    /// Zero-based index (`Class1` is 0).
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Class1 => 0,
            ClassLabel::Class2 => 1,
            ClassLabel::Class3 => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        ClassLabel::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid("class_label", format!("index {i} out of range 0..3")))
    }

    /// One-based class number as printed in reports.
    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: usize = s
            .trim()
            .trim_start_matches("class")
            .trim_start_matches("Class")
            .parse()
            .map_err(|_| Error::invalid("class_label", format!("cannot parse {s:?}")))?;
        if n == 0 {
            return Err(Error::invalid("class_label", "classes are numbered 1..3"));
        }
        ClassLabel::from_index(n - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Which PComA connectors a phantom carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pcoma {
    Both,
    One(Side),
    Absent,
}

impl fmt::Display for Pcoma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pcoma::Both => "both",
            Pcoma::One(Side::Left) => "left",
            Pcoma::One(Side::Right) => "right",
            Pcoma::Absent => "none",
        })
    }
}

impl FromStr for Pcoma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "both" => Pcoma::Both,
            "left" => Pcoma::One(Side::Left),
            "right" => Pcoma::One(Side::Right),
            "none" => Pcoma::Absent,
            _ => return Err(Error::invalid("pcoma", format!("unknown value {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub class_label: ClassLabel,
    pub image_size: usize,
    pub depth: usize,
    pub tube_sigma: f64,
    pub jitter_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(class_label: ClassLabel, seed: u64) -> Self {
        PhantomSpec {
            class_label,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::invalid("image_size", format!("{} < 32", self.image_size)));
        }
        if self.depth == 0 {
            return Err(Error::invalid("depth", "must be at least 1"));
        }
        if !(self.tube_sigma > 0.0 && self.tube_sigma.is_finite()) {
            return Err(Error::invalid("tube_sigma", format!("{} is not > 0", self.tube_sigma)));
        }
        if !(self.jitter_amplitude >= 0.0 && self.jitter_amplitude.is_finite()) {
            return Err(Error::invalid(
                "jitter_amplitude",
                format!("{} is not >= 0", self.jitter_amplitude),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", format!("{} is not >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Canonical text of every generator-relevant field except class and seed.
    pub fn template_key(&self) -> String {
        format!(
            "size={};depth={};sigma={:?};jitter={:?};noise={:?}",
            self.image_size, self.depth, self.tube_sigma, self.jitter_amplitude, self.noise_sigma
        )
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            class_label: ClassLabel::Class1,
            image_size: 64,
            depth: 1,
            tube_sigma: 1.6,
            jitter_amplitude: 1.5,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

/// Scalar field of shape `(depth, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f32>,
    pub class_label: ClassLabel,
    pub pcoma: Pcoma,
}

impl PhantomVolume {
    pub fn new(depth: usize, height: usize, width: usize, voxels: Vec<f32>, class_label: ClassLabel) -> Result<Self> {
        if voxels.len() != depth * height * width {
            return Err(Error::shape("volume", &[depth, height, width], &[voxels.len()]));
        }
        Ok(PhantomVolume {
            depth,
            height,
            width,
            voxels,
            class_label,
            pcoma: match class_label {
                ClassLabel::Class1 => Pcoma::Both,
                ClassLabel::Class2 => Pcoma::One(Side::Left),
                ClassLabel::Class3 => Pcoma::Absent,
            },
        })
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[(z * self.height + y) * self.width + x]
    }

    /// Voxels above 0.5.
    pub fn binary_mask(&self) -> Vec<bool> {
        self.voxels.iter().map(|&v| v > 0.5).collect()
    }

    pub fn slice(&self, z: usize) -> Image2D {
        let n = self.height * self.width;
        Image2D {
            height: self.height,
            width: self.width,
            data: self.voxels[z * n..(z + 1) * n].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Point {
    x: f64,
    y: f64,
    z: f64,
}

impl Point {
    fn lerp(self, o: Point, t: f64) -> Point {
        Point {
            x: self.x + (o.x - self.x) * t,
            y: self.y + (o.y - self.y) * t,
            z: self.z + (o.z - self.z) * t,
        }
    }

    fn dist2(self, o: Point) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        dx * dx + dy * dy + dz * dz
    }
}

/// Quadratic Bezier segment in voxel coordinates `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    p0: Point,
    p1: Point,
    p2: Point,
}

impl Segment {
    /// Segment in a single slice (`z = 0`).
    pub fn planar(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64)) -> Self {
        let pt = |(x, y): (f64, f64)| Point { x, y, z: 0.0 };
        Segment {
            p0: pt(p0),
            p1: pt(p1),
            p2: pt(p2),
        }
    }

    fn at(&self, t: f64) -> Point {
        self.p0.lerp(self.p1, t).lerp(self.p1.lerp(self.p2, t), t)
    }

    /// Euclidean distance from `q` to the curve.
    fn distance(&self, q: Point) -> f64 {
        const SAMPLES: usize = 32;
        let mut best_t = 0.0;
        let mut best = f64::INFINITY;
        for i in 0..=SAMPLES {
            let t = i as f64 / SAMPLES as f64;
            let d = self.at(t).dist2(q);
            if d < best {
                best = d;
                best_t = t;
            }
        }
        // Newton refinement of d/dt |B(t) - q|^2 = 0.
        let a = Point {
            x: self.p0.x - 2.0 * self.p1.x + self.p2.x,
            y: self.p0.y - 2.0 * self.p1.y + self.p2.y,
            z: self.p0.z - 2.0 * self.p1.z + self.p2.z,
        };
        let b = Point {
            x: self.p1.x - self.p0.x,
            y: self.p1.y - self.p0.y,
            z: self.p1.z - self.p0.z,
        };
        let mut t = best_t;
        for _ in 0..8 {
            let p = self.at(t);
            let d = Point {
                x: p.x - q.x,
                y: p.y - q.y,
                z: p.z - q.z,
            };
            // B'(t) = 2(b + a t), B'' = 2a
            let bp = Point {
                x: 2.0 * (b.x + a.x * t),
                y: 2.0 * (b.y + a.y * t),
                z: 2.0 * (b.z + a.z * t),
            };
            let f1 = d.x * bp.x + d.y * bp.y + d.z * bp.z;
            let f2 = bp.x * bp.x + bp.y * bp.y + bp.z * bp.z + 2.0 * (d.x * a.x + d.y * a.y + d.z * a.z);
            if f2 <= 0.0 {
                break;
            }
            t = (t - f1 / f2).clamp(0.0, 1.0);
        }
        let refined = self.at(t).dist2(q);
        best.min(refined).sqrt()
    }

    fn bounds(&self, margin: f64) -> [(f64, f64); 3] {
        let pts = [self.p0, self.p1, self.p2];
        let lo_hi = |f: fn(&Point) -> f64| {
            let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min) - margin;
            let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max) + margin;
            (lo, hi)
        };
        [lo_hi(|p| p.x), lo_hi(|p| p.y), lo_hi(|p| p.z)]
    }
}

/// Composites Gaussian tube profiles of `segments` into a `(depth, size, size)`
/// field by per-voxel maximum. No noise.
pub fn rasterize_segments(segments: &[Segment], depth: usize, size: usize, tube_sigma: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; depth * size * size];
    let inv = 1.0 / (2.0 * tube_sigma * tube_sigma);
    let cutoff = 6.0 * tube_sigma;
    for seg in segments {
        let [bx, by, bz] = seg.bounds(cutoff);
        let range = |(lo, hi): (f64, f64), n: usize| {
            let a = lo.ceil().max(0.0) as usize;
            let b = (hi.floor().min(n as f64 - 1.0)).max(-1.0);
            if b < 0.0 {
                (0, 0)
            } else {
                (a, b as usize + 1)
            }
        };
        let (x0, x1) = range(bx, size);
        let (y0, y1) = range(by, size);
        let (z0, z1) = range(bz, depth);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let q = Point {
                        x: x as f64,
                        y: y as f64,
                        z: z as f64,
                    };
                    let d = seg.distance(q);
                    let v = (-d * d * inv).exp() as f32;
                    let slot = &mut out[(z * size + y) * size + x];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
    }
    out
}

struct Template {
    segments: Vec<Segment>,
}

/// Named junctions of the reference layout; segments sharing a junction
/// move together under jitter.
#[derive(Clone, Copy)]
enum J {
    Base,
    Bif,
    PcaL,
    PcaR,
    IcaL,
    IcaR,
    McaL,
    McaR,
    PcomL,
    PcomR,
}

const JUNCTIONS: [(J, f64, f64); 10] = [
    (J::Base, 32.0, 62.0),
    (J::Bif, 32.0, 44.0),
    (J::PcaL, 6.0, 48.0),
    (J::PcaR, 58.0, 48.0),
    (J::IcaL, 21.0, 26.0),
    (J::IcaR, 43.0, 26.0),
    (J::McaL, 3.0, 24.0),
    (J::McaR, 61.0, 24.0),
    (J::PcomL, 21.0, 42.0),
    (J::PcomR, 43.0, 42.0),
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum SegKind {
    Vessel,
    PcomaLeft,
    PcomaRight,
}

const SEGMENTS: [(J, (f64, f64), J, SegKind); 8] = [
    (J::Base, (32.0, 53.0), J::Bif, SegKind::Vessel),
    (J::Bif, (22.0, 40.0), J::PcaL, SegKind::Vessel),
    (J::Bif, (42.0, 40.0), J::PcaR, SegKind::Vessel),
    (J::IcaL, (32.0, 6.0), J::IcaR, SegKind::Vessel),
    (J::IcaL, (12.0, 22.0), J::McaL, SegKind::Vessel),
    (J::IcaR, (52.0, 22.0), J::McaR, SegKind::Vessel),
    (J::PcomL, (20.0, 34.0), J::IcaL, SegKind::PcomaLeft),
    (J::PcomR, (44.0, 34.0), J::IcaR, SegKind::PcomaRight),
];

impl Template {
    fn draw(spec: &PhantomSpec, pcoma: Pcoma, rng: &mut ChaCha8Rng) -> Template {
        let scale = spec.image_size as f64 / REFERENCE_GRID;
        let a = spec.jitter_amplitude;
        let zmid = (spec.depth as f64 - 1.0) / 2.0;
        let za = a.min(zmid);
        let mut jitter = |x: f64, y: f64| -> Point {
            let mut j = |amp: f64| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            let (dx, dy, dz) = (j(a), j(a), j(za));
            Point {
                x: x * scale + dx,
                y: y * scale + dy,
                z: (zmid + dz).clamp(0.0, spec.depth as f64 - 1.0),
            }
        };
        let junctions: Vec<Point> = JUNCTIONS.iter().map(|&(_, x, y)| jitter(x, y)).collect();
        let mids: Vec<Point> = SEGMENTS.iter().map(|&(_, (x, y), _, _)| jitter(x, y)).collect();
        let keep = |kind: SegKind| match (kind, pcoma) {
            (SegKind::Vessel, _) => true,
            (_, Pcoma::Both) => true,
            (SegKind::PcomaLeft, Pcoma::One(Side::Left)) => true,
            (SegKind::PcomaRight, Pcoma::One(Side::Right)) => true,
            _ => false,
        };
        let segments = SEGMENTS
            .iter()
            .zip(mids)
            .filter(|((_, _, _, kind), _)| keep(*kind))
            .map(|(&(s, _, e, _), mid)| Segment {
                p0: junctions[s as usize],
                p1: mid,
                p2: junctions[e as usize],
            })
            .collect();
        Template { segments }
    }
}

/// Deterministic phantom for `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pcoma = match spec.class_label {
        ClassLabel::Class1 => Pcoma::Both,
        ClassLabel::Class2 => {
            if rng.random_bool(0.5) {
                Pcoma::One(Side::Left)
            } else {
                Pcoma::One(Side::Right)
            }
        }
        ClassLabel::Class3 => Pcoma::Absent,
    };
    let template = Template::draw(spec, pcoma, &mut rng);
    let size = spec.image_size;
    let mut voxels = rasterize_segments(&template.segments, spec.depth, size, spec.tube_sigma);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in voxels.iter_mut() {
            let n: f64 = normal.sample(&mut rng);
            *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(PhantomVolume {
        depth: spec.depth,
        height: size,
        width: size,
        voxels,
        class_label: spec.class_label,
        pcoma,
    })
}

/// Projection axis for [`mip_render`], named by the axis that is collapsed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "z" => Ok(Axis::Z),
            "y" => Ok(Axis::Y),
            "x" => Ok(Axis::X),
            _ => Err(Error::invalid("axis", format!("{s:?} is not one of z, y, x"))),
        }
    }
}

/// Maximum intensity projection along `axis`.
pub fn mip_render(volume: &PhantomVolume, axis: Axis) -> Image2D {
    let (d, h, w) = (volume.depth, volume.height, volume.width);
    match axis {
        Axis::Z => Image2D::from_fn(h, w, |y, x| (0..d).map(|z| volume.get(z, y, x)).fold(f32::MIN, f32::max)),
        Axis::Y => Image2D::from_fn(d, w, |z, x| (0..h).map(|y| volume.get(z, y, x)).fold(f32::MIN, f32::max)),
        Axis::X => Image2D::from_fn(d, h, |z, y| (0..w).map(|x| volume.get(z, y, x)).fold(f32::MIN, f32::max)),
    }
}

/// Pixel rectangles `(x0, x1, y0, y1)` (half-open) of the left and right PComA zones.
pub fn pcoma_zones(image_size: usize) -> [(usize, usize, usize, usize); 2] {
    let s = image_size as f64 / REFERENCE_GRID;
    let r = |v: f64| (v * s).round() as usize;
    [(r(17.0), r(25.0), r(30.0), r(38.0)), (r(39.0), r(47.0), r(30.0), r(38.0))]
}

/// Mean intensity inside each PComA zone `(left, right)` of a square image.
pub fn pcoma_zone_means(img: &Image2D) -> (f64, f64) {
    let zones = pcoma_zones(img.width);
    let mean = |(x0, x1, y0, y1): (usize, usize, usize, usize)| {
        let mut s = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                s += img.get(y, x) as f64;
            }
        }
        s / ((x1 - x0) * (y1 - y0)) as f64
    };
    (mean(zones[0]), mean(zones[1]))
}

/// Nearest-class-mean classifier on the sorted PComA-zone intensities
/// `(max(left, right), min(left, right))`, which separates both / one / none.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneClassifier {
    pub centroids: [(f64, f64); 3],
}

fn zone_feature(img: &Image2D) -> (f64, f64) {
    let (l, r) = pcoma_zone_means(img);
    (l.max(r), l.min(r))
}

impl ZoneClassifier {
    pub fn fit(images: &[(Image2D, ClassLabel)]) -> Result<Self> {
        let mut sums = [(0.0, 0.0, 0usize); 3];
        for (img, c) in images {
            let (a, b) = zone_feature(img);
            let s = &mut sums[c.index()];
            s.0 += a;
            s.1 += b;
            s.2 += 1;
        }
        let mut centroids = [(0.0, 0.0); 3];
        for (i, s) in sums.iter().enumerate() {
            if s.2 == 0 {
                return Err(Error::EmptyClass(i as u8 + 1));
            }
            centroids[i] = (s.0 / s.2 as f64, s.1 / s.2 as f64);
        }
        Ok(ZoneClassifier { centroids })
    }

    pub fn predict(&self, img: &Image2D) -> ClassLabel {
        let (a, b) = zone_feature(img);
        let mut best = (f64::INFINITY, 0);
        for (i, (ca, cb)) in self.centroids.iter().enumerate() {
            let d = (a - ca).powi(2) + (b - cb).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        ClassLabel::ALL[best.1]
    }

    pub fn accuracy(&self, images: &[(Image2D, ClassLabel)]) -> f64 {
        let hits = images.iter().filter(|(im, c)| self.predict(im) == *c).count();
        hits as f64 / images.len().max(1) as f64
    }
}

// ---------------------------------------------------------------------------
// Files

const VOLUME_MAGIC: &[u8; 4] = b"VSVL";
const DTYPE_F32_LE: u16 = 1;

/// Writes the 16-byte header (magic, dtype, depth, H, W) and little-endian f32 voxels.
pub fn write_volume(path: &Path, volume: &PhantomVolume) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + volume.voxels.len() * 4);
    bytes.extend_from_slice(VOLUME_MAGIC);
    bytes.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    bytes.extend_from_slice(&(volume.depth as u16).to_le_bytes());
    bytes.extend_from_slice(&(volume.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(volume.width as u32).to_le_bytes());
    for v in &volume.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a volume file. The class label is not stored in the file and must
/// be supplied (normally from the manifest).
pub fn read_volume(path: &Path, class_label: ClassLabel) -> Result<PhantomVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != VOLUME_MAGIC {
        return Err(corrupt("bad volume header"));
    }
    let dtype = u16::from_le_bytes([bytes[4], bytes[5]]);
    if dtype != DTYPE_F32_LE {
        return Err(corrupt("unsupported dtype code"));
    }
    let depth = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n = depth * height * width;
    if bytes.len() != 16 + 4 * n {
        return Err(corrupt("payload length does not match header"));
    }
    let voxels = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PhantomVolume::new(depth, height, width, voxels, class_label)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's root directory.
    pub path: PathBuf,
    pub class_label: ClassLabel,
    pub seed: u64,
    pub split: Split,
    pub pcoma: Pcoma,
}

/// Index of a generated dataset.
///
/// On disk (`manifest.tsv`): a header line `# generator <hash>` followed by
/// one line per volume, `path<TAB>class<TAB>seed<TAB>split<TAB>pcoma`. The
/// trailing `pcoma` column (`both`/`left`/`right`/`none`) is informational;
/// readers need only the first four.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub generator_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut text = format!("# generator {}\n", self.generator_hash);
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.path.display(),
                e.class_label,
                e.seed,
                e.split,
                e.pcoma
            ));
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads `manifest.tsv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let corrupt = |line: usize, why: &str| Error::Corrupt {
            path: path.clone(),
            reason: format!("line {line}: {why}"),
        };
        let mut generator_hash = String::new();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# generator ") {
                generator_hash = rest.trim().to_string();
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 {
                return Err(corrupt(i + 1, "expected at least 4 tab-separated columns"));
            }
            let class_label: ClassLabel = cols[1].parse().map_err(|_| corrupt(i + 1, "bad class"))?;
            let seed = cols[2].parse().map_err(|_| corrupt(i + 1, "bad seed"))?;
            let split = match cols[3] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return Err(corrupt(i + 1, "bad split")),
            };
            let pcoma = match cols.get(4) {
                Some(s) => s.parse().map_err(|_| corrupt(i + 1, "bad pcoma"))?,
                None => match class_label {
                    ClassLabel::Class1 => Pcoma::Both,
                    ClassLabel::Class2 => Pcoma::One(Side::Left),
                    ClassLabel::Class3 => Pcoma::Absent,
                },
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(cols[0]),
                class_label,
                seed,
                split,
                pcoma,
            });
        }
        Ok(DatasetManifest {
            root: dir.to_path_buf(),
            entries,
            generator_hash,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_volume(&self, entry: &ManifestEntry) -> Result<PhantomVolume> {
        let mut v = read_volume(&self.root.join(&entry.path), entry.class_label)?;
        v.pcoma = entry.pcoma;
        Ok(v)
    }

    /// Z-axis MIPs of every entry in `split`, with labels, in manifest order.
    pub fn load_mips(&self, split: Split) -> Result<Vec<(Image2D, ClassLabel)>> {
        self.split(split)
            .map(|e| Ok((mip_render(&self.load_volume(e)?, Axis::Z), e.class_label)))
            .collect()
    }

    /// Content digest of the manifest text.
    pub fn digest(&self) -> String {
        let mut text = self.generator_hash.clone();
        for e in &self.entries {
            text.push_str(&format!("|{}:{}:{}:{}:{}", e.path.display(), e.class_label, e.seed, e.split, e.pcoma));
        }
        short_digest(text.as_bytes())
    }
}

/// Number of training entries out of `n` per class (80/20 by index, at least one).
pub fn train_count(n: usize) -> usize {
    (n * 4 / 5).max(1)
}

/// Generator hash recorded in the manifest of a dataset built from these inputs.
pub fn dataset_hash(template: &PhantomSpec, n_per_class: usize, base_seed: u64) -> String {
    short_digest(format!("{};n={n_per_class};base={base_seed}", template.template_key()).as_bytes())
}

/// Generates `3 * n_per_class` volumes under `dir` and writes the manifest.
/// Entry `k` (classes in order, then index) uses seed `base_seed + k`.
pub fn generate_dataset(dir: &Path, n_per_class: usize, template: &PhantomSpec, base_seed: u64) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class", "must be at least 1"));
    }
    template.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let generator_hash = dataset_hash(template, n_per_class, base_seed);
    let mut entries = Vec::with_capacity(3 * n_per_class);
    for class in ClassLabel::ALL {
        for i in 0..n_per_class {
            let k = class.index() * n_per_class + i;
            let spec = PhantomSpec {
                class_label: class,
                seed: base_seed + k as u64,
                ..template.clone()
            };
            let volume = generate_phantom(&spec)?;
            let path = PathBuf::from(format!("c{}_{:05}.vsv", class.number(), i));
            write_volume(&dir.join(&path), &volume)?;
            entries.push(ManifestEntry {
                path,
                class_label: class,
                seed: spec.seed,
                split: if i < train_count(n_per_class) { Split::Train } else { Split::Val },
                pcoma: volume.pcoma,
            });
        }
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        generator_hash,
    };
    manifest.write()?;
    Ok(manifest)
}
