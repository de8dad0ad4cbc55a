//! Seeded toy scenes: known shapes on a ground class, a void halo around
//! every object and along the border, and held-out unknown shapes in the
//! test split.
//!
//! Class ids: 0 is the ground, known shapes follow in list order, unknown
//! shapes come after the known ones. Void is 255.
//!
//! Void pixels are painted as per-pixel random clutter. Unknown shapes are
//! painted with a fine dither of two known-class colors, so no single pixel
//! color gives them away.
//!
//! ```text
//! <dir>/classes.txt
//! <dir>/{train,val,test}/images/scene_00000.ppm
//! <dir>/{train,val,test}/labels/scene_00000.pgm
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::formats::Image;
use crate::VOID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Stripe,
    Ring,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Disk,
        Shape::Square,
        Shape::Triangle,
        Shape::Stripe,
        Shape::Ring,
        Shape::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Stripe => "stripe",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            Shape::Disk => [200.0, 50.0, 50.0],
            Shape::Square => [50.0, 80.0, 210.0],
            Shape::Triangle => [220.0, 200.0, 60.0],
            Shape::Stripe => [170.0, 70.0, 200.0],
            Shape::Ring => [200.0, 50.0, 50.0],
            Shape::Cross => [50.0, 80.0, 210.0],
        }
    }

    /// The known shape this one most resembles geometrically.
    pub fn most_similar(self) -> Shape {
        match self {
            Shape::Ring => Shape::Disk,
            Shape::Cross => Shape::Square,
            other => other,
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => ax <= 0.85 * r && ay <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= r && ax <= (dy + r) / 2.0,
            Shape::Stripe => ay <= 0.35 * r && ax <= 1.2 * r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            Shape::Cross => (ax <= 0.35 * r && ay <= r) || (ay <= 0.35 * r && ax <= r),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }
}

const GROUND: [f64; 3] = [60.0, 130.0, 60.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            SplitKind::Train => 1,
            SplitKind::Val => 2,
            SplitKind::Test => 3,
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub known: Vec<Shape>,
    pub unknown: Vec<Shape>,
    /// Inclusive range of known objects per scene.
    pub objects: (usize, usize),
    /// Unknown objects per test scene.
    pub unknown_objects: usize,
    /// Object size range (radius-like, in pixels).
    pub size: (f64, f64),
    /// Per-channel color noise standard deviation.
    pub noise: f64,
    pub border: usize,
    pub halo: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            known: vec![Shape::Disk, Shape::Square, Shape::Triangle],
            unknown: vec![Shape::Ring, Shape::Cross],
            objects: (1, 3),
            unknown_objects: 1,
            size: (4.0, 7.0),
            noise: 12.0,
            border: 1,
            halo: 1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: u8,
    pub name: String,
    pub known: bool,
    /// Most similar known class (unknown classes only).
    pub most_similar: Option<u8>,
}

impl SceneSpec {
    /// Known class count including the ground.
    pub fn known_classes(&self) -> usize {
        self.known.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.known.is_empty() {
            return Err(Error::Config("at least one known shape is required".into()));
        }
        for (i, s) in self.known.iter().enumerate() {
            if self.known[..i].contains(s) {
                return Err(Error::Config(format!("known shape {s} listed twice")));
            }
        }
        for (i, s) in self.unknown.iter().enumerate() {
            if self.known.contains(s) {
                return Err(Error::Config(format!(
                    "shape {s} is both known and unknown"
                )));
            }
            if self.unknown[..i].contains(s) {
                return Err(Error::Config(format!("unknown shape {s} listed twice")));
            }
            if s.most_similar() == *s || !self.known.contains(&s.most_similar()) {
                return Err(Error::Config(format!(
                    "unknown shape {s} needs {} among the known shapes",
                    s.most_similar()
                )));
            }
        }
        if self.known.len() + self.unknown.len() + 1 >= VOID as usize {
            return Err(Error::Config("too many classes".into()));
        }
        if self.objects.0 > self.objects.1 || self.size.0 > self.size.1 || self.size.0 <= 0.0 {
            return Err(Error::Config(format!(
                "bad object ranges {:?} / {:?}",
                self.objects, self.size
            )));
        }
        let reach = 2.0 * (self.size.1 * 1.2 + self.border as f64);
        if reach >= self.height.min(self.width) as f64 {
            return Err(Error::Config(format!(
                "{}x{} image too small for objects of size {}",
                self.height, self.width, self.size.1
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<ClassInfo> {
        let mut out = vec![ClassInfo {
            id: 0,
            name: "ground".into(),
            known: true,
            most_similar: None,
        }];
        for (i, s) in self.known.iter().enumerate() {
            out.push(ClassInfo {
                id: i as u8 + 1,
                name: s.name().into(),
                known: true,
                most_similar: None,
            });
        }
        let k = self.known_classes();
        for (i, s) in self.unknown.iter().enumerate() {
            out.push(ClassInfo {
                id: (k + i) as u8,
                name: s.name().into(),
                known: false,
                most_similar: self.known_id(s.most_similar()),
            });
        }
        out
    }

    fn known_id(&self, s: Shape) -> Option<u8> {
        self.known.iter().position(|&k| k == s).map(|i| i as u8 + 1)
    }

    fn known_palette(&self) -> Vec<[f64; 3]> {
        std::iter::once(GROUND)
            .chain(self.known.iter().map(|s| s.color()))
            .collect()
    }

    /// The two known colors dithered inside an unknown shape: its most
    /// similar shape's color and the ground color.
    fn dither_colors(&self, s: Shape) -> ([f64; 3], [f64; 3]) {
        (s.most_similar().color(), GROUND)
    }
}

/// One rendered scene: RGB image and label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub image: Image,
    pub labels: Image,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn scene_rng(seed: u64, split: SplitKind, index: usize) -> ChaCha8Rng {
    let h = splitmix(splitmix(splitmix(seed) ^ split.code()) ^ index as u64);
    ChaCha8Rng::seed_from_u64(h)
}

struct Object {
    class: u8,
    shape: Shape,
    cx: f64,
    cy: f64,
    r: f64,
}

/// Renders scene `index` of `split`. Deterministic in `(spec.seed, split, index)`.
pub fn render(spec: &SceneSpec, split: SplitKind, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, split, index);
    let (h, w) = (spec.height, spec.width);
    let k = spec.known_classes();

    let mut objects = Vec::new();
    let n_known = rng.gen_range(spec.objects.0..=spec.objects.1);
    for _ in 0..n_known {
        let i = rng.gen_range(0..spec.known.len());
        objects.push((i as u8 + 1, spec.known[i]));
    }
    if split == SplitKind::Test && !spec.unknown.is_empty() {
        for _ in 0..spec.unknown_objects {
            let i = rng.gen_range(0..spec.unknown.len());
            let at = rng.gen_range(0..=objects.len());
            objects.insert(at, ((k + i) as u8, spec.unknown[i]));
        }
    }
    let objects: Vec<Object> = objects
        .into_iter()
        .map(|(class, shape)| {
            let r = rng.gen_range(spec.size.0..=spec.size.1);
            let margin = 1.2 * r + spec.border as f64;
            Object {
                class,
                shape,
                cx: rng.gen_range(margin..=w as f64 - margin),
                cy: rng.gen_range(margin..=h as f64 - margin),
                r,
            }
        })
        .collect();

    let mut labels = vec![0u8; h * w];
    let halo = spec.halo as isize;
    for o in &objects {
        let mut inside = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - o.cx, y as f64 + 0.5 - o.cy);
                inside[y * w + x] = o.shape.contains(dx, dy, o.r);
            }
        }
        for y in 0..h as isize {
            for x in 0..w as isize {
                let p = (y as usize) * w + x as usize;
                if inside[p] {
                    continue;
                }
                let near = (-halo..=halo).any(|oy| {
                    (-halo..=halo).any(|ox| {
                        let (yy, xx) = (y + oy, x + ox);
                        yy >= 0
                            && xx >= 0
                            && yy < h as isize
                            && xx < w as isize
                            && inside[yy as usize * w + xx as usize]
                    })
                });
                if near {
                    labels[p] = VOID;
                }
            }
        }
        for (l, &i) in labels.iter_mut().zip(&inside) {
            if i {
                *l = o.class;
            }
        }
    }
    let b = spec.border;
    for y in 0..h {
        for x in 0..w {
            if y < b || x < b || y + b >= h || x + b >= w {
                labels[y * w + x] = VOID;
            }
        }
    }

    let palette = spec.known_palette();
    let dithers: Vec<([f64; 3], [f64; 3])> = spec
        .unknown
        .iter()
        .map(|&s| spec.dither_colors(s))
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == VOID {
                for _ in 0..3 {
                    pixels.push(rng.gen::<u8>());
                }
                continue;
            }
            let base = if (l as usize) < k {
                palette[l as usize]
            } else {
                let (a, c) = dithers[l as usize - k];
                if (x + y) % 2 == 0 {
                    a
                } else {
                    c
                }
            };
            for ch in base {
                let v = if spec.noise > 0.0 {
                    ch + noise.sample(&mut rng)
                } else {
                    ch
                };
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(Scene {
        image: Image::new(w, h, 3, pixels)?,
        labels: Image::new(w, h, 1, labels)?,
    })
}

/// Renders `count` scenes of one split.
pub fn generate(spec: &SceneSpec, count: usize, split: SplitKind) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::Config(format!(
            "{split} split needs at least one scene"
        )));
    }
    (0..count).map(|i| render(spec, split, i)).collect()
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

pub fn split_dir(dir: &Path, split: SplitKind) -> PathBuf {
    dir.join(split.name())
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the classes manifest and every split under `dir`.
pub fn write_dataset(spec: &SceneSpec, dir: &Path, counts: [(SplitKind, usize); 3]) -> Result<()> {
    spec.validate()?;
    mkdir(dir)?;
    write_classes(&dir.join("classes.txt"), &spec.classes())?;
    for (split, count) in counts {
        let scenes = generate(spec, count, split)?;
        let root = split_dir(dir, split);
        let (imgs, labs) = (root.join("images"), root.join("labels"));
        mkdir(&imgs)?;
        mkdir(&labs)?;
        for (i, s) in scenes.iter().enumerate() {
            s.image.save(&imgs.join(format!("{}.ppm", scene_name(i))))?;
            s.labels
                .save(&labs.join(format!("{}.pgm", scene_name(i))))?;
        }
        log::info!("wrote {count} {split} scenes to {}", root.display());
    }
    Ok(())
}

pub fn write_classes(path: &Path, classes: &[ClassInfo]) -> Result<()> {
    let mut out = String::new();
    for c in classes {
        let sim = c.most_similar.map_or("-".to_string(), |s| s.to_string());
        let kind = if c.known { "known" } else { "unknown" };
        out.push_str(&format!("{}\t{}\t{}\t{}\n", c.id, c.name, kind, sim));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_classes(path: &Path) -> Result<Vec<ClassInfo>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let id = f[0].parse::<u8>().map_err(|_| bad("bad class id"))?;
        let known = match f[2] {
            "known" => true,
            "unknown" => false,
            _ => return Err(bad("third field must be known or unknown")),
        };
        let most_similar = match f[3] {
            "-" => None,
            s => Some(s.parse::<u8>().map_err(|_| bad("bad most-similar id"))?),
        };
        out.push(ClassInfo {
            id,
            name: f[1].to_string(),
            known,
            most_similar,
        });
    }
    Ok(out)
}

/// All scenes of one split read back from disk, in file-name order.
#[derive(Debug, Clone)]
pub struct Split {
    pub names: Vec<String>,
    pub scenes: Vec<Scene>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        self.scenes
            .first()
            .map_or((0, 0), |s| (s.image.height, s.image.width))
    }
}

pub fn load_split(dir: &Path, split: SplitKind) -> Result<Split> {
    let root = split_dir(dir, split);
    let imgs = root.join("images");
    let entries = fs::read_dir(&imgs).map_err(|e| Error::io(&imgs, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".ppm"))
                .map(str::to_string)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no images in {}", imgs.display())));
    }
    let mut scenes = Vec::with_capacity(names.len());
    for n in &names {
        let image = Image::load(&imgs.join(format!("{n}.ppm")))?;
        let lp = root.join("labels").join(format!("{n}.pgm"));
        let labels = Image::load(&lp)?;
        if image.channels != 3 || labels.channels != 1 {
            return Err(Error::format(
                &lp,
                "expected an RGB image and a gray label map",
            ));
        }
        if (image.width, image.height) != (labels.width, labels.height) {
            return Err(Error::format(&lp, "label map size differs from its image"));
        }
        if let Some(s) = scenes.first() {
            let s: &Scene = s;
            if (s.image.width, s.image.height) != (image.width, image.height) {
                return Err(Error::format(&lp, "scenes of one split must share a size"));
            }
        }
        scenes.push(Scene { image, labels });
    }
    Ok(Split { names, scenes })
}
