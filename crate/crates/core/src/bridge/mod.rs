//! Procedural three-span bridge facades.
//!
//! A [`BridgeSpec`] is sampled per sub-type with every shape parameter drawn
//! uniformly from a documented range (see [`ranges`]). [`render`] draws the
//! left half of the facade on a 192x48 canvas (300 m of bridge across 192 px)
//! and mirrors it, so every image is exactly symmetric.

mod dataset;
mod raster;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::pgm::GrayImage;
use crate::rng::seeded;

pub use dataset::{build_dataset, load_dataset, verify_dataset, Dataset, DatasetError, Manifest, ManifestEntry};
pub use raster::Canvas;

pub const WIDTH: usize = 192;
pub const HEIGHT: usize = 48;
pub const BRIDGE_LENGTH_M: f64 = 300.0;
pub const PX_PER_M: f64 = WIDTH as f64 / BRIDGE_LENGTH_M;
pub const GENERATOR_VERSION: &str = "bridgegen-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subtype {
    BeamConstantSection,
    BeamVPierRigidFrame,
    ArchTopBearing,
    ArchBottomBearing,
    CableStayedHarp,
    CableStayedFan,
    SuspensionVerticalSling,
    SuspensionDiagonalSling,
}

impl Subtype {
    pub const ALL: [Subtype; 8] = [
        Subtype::BeamConstantSection,
        Subtype::BeamVPierRigidFrame,
        Subtype::ArchTopBearing,
        Subtype::ArchBottomBearing,
        Subtype::CableStayedHarp,
        Subtype::CableStayedFan,
        Subtype::SuspensionVerticalSling,
        Subtype::SuspensionDiagonalSling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtype::BeamConstantSection => "beam-constant-section",
            Subtype::BeamVPierRigidFrame => "beam-V-pier-rigid-frame",
            Subtype::ArchTopBearing => "arch-top-bearing",
            Subtype::ArchBottomBearing => "arch-bottom-bearing",
            Subtype::CableStayedHarp => "cable-stayed-harp",
            Subtype::CableStayedFan => "cable-stayed-fan",
            Subtype::SuspensionVerticalSling => "suspension-vertical-sling",
            Subtype::SuspensionDiagonalSling => "suspension-diagonal-sling",
        }
    }

    pub fn index(self) -> usize {
        Subtype::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn is_beam(self) -> bool {
        matches!(self, Subtype::BeamConstantSection | Subtype::BeamVPierRigidFrame)
    }

    /// Side, main, side span lengths in metres.
    pub fn spans(self) -> [f64; 3] {
        if self.is_beam() {
            [80.0, 140.0, 80.0]
        } else {
            [67.0, 166.0, 67.0]
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown bridge sub-type {0:?}")]
pub struct UnknownSubtype(pub String);

impl FromStr for Subtype {
    type Err = UnknownSubtype;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Subtype::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownSubtype(s.to_string()))
    }
}

/// Closed interval a shape parameter is drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }
}

/// Parameter ranges in pixels (rows grow downwards) unless noted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranges {
    /// Row of the deck's upper edge.
    pub deck_level: Range,
    pub deck_depth: Range,
    /// Width of piers, towers and V legs.
    pub pier_width: Range,
    /// Width of cables, hangers, columns and arch ribs.
    pub stroke: Range,
    /// Intensity of fully covered structure pixels.
    pub ink: Range,
    /// Tower top above the deck.
    pub tower_height: Range,
    pub arch_rise: Range,
    /// Horizontal reach of each V leg at the deck.
    pub v_spread: Range,
    /// Cables, hangers or spandrel columns per half main span (integer).
    pub members: Range,
    /// Clearance of the main cable's lowest point above the deck.
    pub sag: Range,
}

pub fn ranges(subtype: Subtype) -> Ranges {
    use Subtype::*;
    let deck_level = match subtype {
        BeamConstantSection | BeamVPierRigidFrame => Range::new(14.0, 30.0),
        ArchTopBearing => Range::new(8.0, 16.0),
        ArchBottomBearing => Range::new(28.0, 38.0),
        _ => Range::new(35.0, 40.0),
    };
    let deck_depth = if subtype.is_beam() { Range::new(2.5, 5.0) } else { Range::new(1.5, 3.5) };
    Ranges {
        deck_level,
        deck_depth,
        pier_width: Range::new(1.5, 3.0),
        stroke: Range::new(1.0, 2.0),
        ink: Range::new(0.0, 0.2),
        tower_height: Range::new(20.0, 34.0),
        arch_rise: Range::new(14.0, 22.0),
        v_spread: Range::new(8.0, 20.0),
        members: Range::new(6.0, 12.0),
        sag: Range::new(0.5, 4.0),
    }
}

impl Ranges {
    pub fn named(&self) -> [(&'static str, Range); 10] {
        [
            ("deck_level", self.deck_level),
            ("deck_depth", self.deck_depth),
            ("pier_width", self.pier_width),
            ("stroke", self.stroke),
            ("ink", self.ink),
            ("tower_height", self.tower_height),
            ("arch_rise", self.arch_rise),
            ("v_spread", self.v_spread),
            ("members", self.members),
            ("sag", self.sag),
        ]
    }
}

/// One facade. Every parameter is drawn for every sub-type; those a sub-type
/// has no member for are ignored by [`render`].
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSpec {
    pub subtype: Subtype,
    /// Metres; sums to [`BRIDGE_LENGTH_M`].
    pub spans: [f64; 3],
    /// Determines every other field via [`BridgeSpec::from_seed`].
    pub seed: u64,
    pub deck_level: f64,
    pub deck_depth: f64,
    pub pier_width: f64,
    pub stroke: f64,
    pub ink: f64,
    pub tower_height: f64,
    pub arch_rise: f64,
    pub v_spread: f64,
    pub members: u32,
    pub sag: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("{param} = {value} outside [{lo}, {hi}] for {subtype}")]
    OutOfRange { subtype: Subtype, param: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("spans {spans:?} do not match {subtype}")]
    Spans { subtype: Subtype, spans: [f64; 3] },
}

impl BridgeSpec {
    pub fn from_seed(subtype: Subtype, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let r = ranges(subtype);
        let lo = r.members.lo as u32;
        let hi = r.members.hi as u32;
        BridgeSpec {
            subtype,
            spans: subtype.spans(),
            seed,
            deck_level: r.deck_level.sample(&mut rng),
            deck_depth: r.deck_depth.sample(&mut rng),
            pier_width: r.pier_width.sample(&mut rng),
            stroke: r.stroke.sample(&mut rng),
            ink: r.ink.sample(&mut rng),
            tower_height: r.tower_height.sample(&mut rng),
            arch_rise: r.arch_rise.sample(&mut rng),
            v_spread: r.v_spread.sample(&mut rng),
            members: rng.random_range(lo..=hi),
            sag: r.sag.sample(&mut rng),
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.spans != self.subtype.spans() {
            return Err(SpecError::Spans { subtype: self.subtype, spans: self.spans });
        }
        let r = ranges(self.subtype);
        let values = [
            self.deck_level,
            self.deck_depth,
            self.pier_width,
            self.stroke,
            self.ink,
            self.tower_height,
            self.arch_rise,
            self.v_spread,
            self.members as f64,
            self.sag,
        ];
        for ((param, range), value) in r.named().into_iter().zip(values) {
            if !range.contains(value) {
                return Err(SpecError::OutOfRange {
                    subtype: self.subtype,
                    param,
                    value,
                    lo: range.lo,
                    hi: range.hi,
                });
            }
        }
        Ok(())
    }
}

/// Draws a spec seed from `rng`, then every parameter from that seed.
pub fn sample_spec<R: Rng + ?Sized>(subtype: Subtype, rng: &mut R) -> BridgeSpec {
    BridgeSpec::from_seed(subtype, rng.random())
}

/// Row-major `HEIGHT x WIDTH` intensities; 1.0 is white background.
#[derive(Clone, Debug, PartialEq)]
pub struct FacadeImage {
    pub pixels: Vec<f64>,
}

impl FacadeImage {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * WIDTH + c]
    }

    pub fn is_mirror_symmetric(&self) -> bool {
        (0..HEIGHT).all(|r| (0..WIDTH / 2).all(|c| self.get(r, c) == self.get(r, WIDTH - 1 - c)))
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_unit(WIDTH, HEIGHT, self.pixels.iter().copied())
    }
}

fn parabola(x: f64, centre: f64, half: f64, low: f64, high: f64) -> f64 {
    let u = (x - centre) / half;
    low + (high - low) * u * u
}

fn curve(x0: f64, x1: f64, f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
    const N: usize = 48;
    (0..=N)
        .map(|i| {
            let x = x0 + (x1 - x0) * i as f64 / N as f64;
            (x, f(x))
        })
        .collect()
}

pub fn render(spec: &BridgeSpec) -> Result<FacadeImage, SpecError> {
    use Subtype::*;
    spec.validate()?;
    let mut cv = Canvas::new(WIDTH, HEIGHT);
    let mid = WIDTH as f64 / 2.0;
    cv.clip_x = mid;
    let ground = HEIGHT as f64;
    let pier_x = spec.spans[0] * PX_PER_M;
    let half_main = mid - pier_x;
    let top = spec.deck_level;
    let bot = top + spec.deck_depth;
    let (pw, sw) = (spec.pier_width, spec.stroke);
    let n = spec.members as usize;

    cv.fill_rect(0.0, top, mid, bot);
    match spec.subtype {
        BeamConstantSection => cv.fill_rect(pier_x - pw / 2.0, bot, pier_x + pw / 2.0, ground),
        BeamVPierRigidFrame => {
            let foot = (pier_x, ground - 0.5);
            cv.line(foot, (pier_x - spec.v_spread, bot), pw);
            cv.line(foot, (pier_x + spec.v_spread, bot), pw);
        }
        ArchTopBearing => {
            let spring = bot + spec.arch_rise;
            let arch = |x: f64| parabola(x, mid, half_main, bot, spring);
            cv.polyline(&curve(pier_x, mid, arch), sw * 1.5);
            cv.fill_rect(pier_x - pw / 2.0, bot, pier_x + pw / 2.0, ground);
            for k in 1..=n {
                let x = pier_x + k as f64 * half_main / (n as f64 + 1.0);
                cv.line((x, bot), (x, arch(x)), sw);
            }
            for j in 1..=2 {
                let x = pier_x * j as f64 / 3.0;
                cv.line((x, bot), (x, ground), sw);
            }
        }
        ArchBottomBearing => {
            let crown = top - spec.arch_rise;
            let arch = |x: f64| parabola(x, mid, half_main, crown, top);
            cv.polyline(&curve(pier_x, mid, arch), sw * 1.5);
            cv.fill_rect(pier_x - pw / 2.0, bot, pier_x + pw / 2.0, ground);
            for k in 1..=n {
                let x = pier_x + k as f64 * half_main / (n as f64 + 1.0);
                cv.line((x, arch(x)), (x, top), sw);
            }
        }
        CableStayedHarp | CableStayedFan => {
            let tower_top = top - spec.tower_height;
            cv.fill_rect(pier_x - pw / 2.0, tower_top, pier_x + pw / 2.0, ground);
            let reach = 0.92 * pier_x;
            let nf = n as f64;
            for k in 0..n {
                let kf = k as f64;
                let (y, d) = if spec.subtype == CableStayedHarp {
                    let y0 = tower_top + 1.0;
                    let y = y0 + kf / (nf - 1.0) * 0.8 * spec.tower_height;
                    (y, (top - y) * reach / (top - y0))
                } else {
                    let y = tower_top + 1.0 + kf / (nf - 1.0) * 0.1 * spec.tower_height;
                    (y, reach * (nf - kf) / nf)
                };
                cv.line((pier_x, y), (pier_x - d, top), 0.75 * sw);
                cv.line((pier_x, y), (pier_x + d, top), 0.75 * sw);
            }
        }
        SuspensionVerticalSling | SuspensionDiagonalSling => {
            let tower_top = top - spec.tower_height;
            cv.fill_rect(pier_x - pw / 2.0, tower_top, pier_x + pw / 2.0, ground);
            let main = |x: f64| parabola(x, mid, half_main, top - spec.sag, tower_top);
            let side = |x: f64| top + (tower_top - top) * x / pier_x;
            cv.polyline(&curve(pier_x, mid, main), sw * 1.5);
            cv.line((0.0, top), (pier_x, tower_top), sw * 1.5);
            let diagonal = spec.subtype == SuspensionDiagonalSling;
            let mut hangers = |cable: &dyn Fn(f64) -> f64, x0: f64, len: f64, count: usize| {
                let gap = len / count as f64;
                for k in 0..count {
                    let x = x0 + (k as f64 + 0.5) * gap;
                    let y = cable(x);
                    if diagonal {
                        cv.line((x, y), (x - gap / 2.0, top), sw);
                        cv.line((x, y), (x + gap / 2.0, top), sw);
                    } else {
                        cv.line((x, y), (x, top), sw);
                    }
                }
            };
            hangers(&main, pier_x, half_main, n);
            hangers(&side, 0.0, pier_x, n / 2);
        }
    }
    cv.mirror_left_half();
    let paper = 1.0 - spec.ink;
    Ok(FacadeImage {
        pixels: cv.coverage().iter().map(|&a| 1.0 - a * paper).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn spans_follow_family() {
        let mut rng = seeded(0);
        assert_eq!(sample_spec(Subtype::BeamConstantSection, &mut rng).spans, [80.0, 140.0, 80.0]);
        assert_eq!(sample_spec(Subtype::CableStayedFan, &mut rng).spans, [67.0, 166.0, 67.0]);
        for t in Subtype::ALL {
            assert_eq!(t.spans().iter().sum::<f64>(), BRIDGE_LENGTH_M);
        }
    }

    #[test]
    fn names_roundtrip() {
        for t in Subtype::ALL {
            assert_eq!(t.name().parse::<Subtype>().unwrap(), t);
        }
        assert!("beam".parse::<Subtype>().is_err());
    }

    #[test]
    fn render_shape_range_symmetry_determinism() {
        let mut rng = seeded(5);
        for t in Subtype::ALL {
            for _ in 0..20 {
                let spec = sample_spec(t, &mut rng);
                spec.validate().unwrap();
                let img = render(&spec).unwrap();
                assert_eq!(img.pixels.len(), WIDTH * HEIGHT);
                assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(img.is_mirror_symmetric(), "{t}");
                assert_eq!(render(&spec).unwrap(), img);
                // Deck spans the full width.
                let row = spec.deck_level.ceil() as usize;
                if (row as f64) + 1.0 <= spec.deck_level + spec.deck_depth {
                    assert!((0..WIDTH).all(|c| img.get(row, c) <= spec.ink + 1e-12));
                }
            }
        }
    }

    #[test]
    fn from_seed_reproduces_sample() {
        let spec = sample_spec(Subtype::ArchTopBearing, &mut seeded(9));
        assert_eq!(BridgeSpec::from_seed(spec.subtype, spec.seed), spec);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut spec = sample_spec(Subtype::SuspensionVerticalSling, &mut seeded(1));
        spec.tower_height = 40.0;
        assert!(matches!(render(&spec), Err(SpecError::OutOfRange { param: "tower_height", .. })));
        let mut spec = sample_spec(Subtype::BeamConstantSection, &mut seeded(1));
        spec.spans = [67.0, 166.0, 67.0];
        assert!(matches!(render(&spec), Err(SpecError::Spans { .. })));
        let mut spec = sample_spec(Subtype::CableStayedHarp, &mut seeded(1));
        spec.members = 13;
        assert!(render(&spec).is_err());
    }

    #[test]
    fn twelve_hundred_draws_are_nearly_all_distinct() {
        for t in Subtype::ALL {
            let mut rng = seeded(t.index() as u64);
            let distinct: HashSet<Vec<u8>> = (0..1200)
                .map(|_| render(&sample_spec(t, &mut rng)).unwrap().to_gray().pixels)
                .collect();
            assert!(distinct.len() >= 1190, "{t}: {}", distinct.len());
        }
    }

    fn sq_dist(a: &[u8], b: &[u8]) -> u64 {
        a.iter().zip(b).map(|(&x, &y)| (x as i64 - y as i64).pow(2) as u64).sum()
    }

    #[test]
    fn nearest_neighbour_separates_subtypes() {
        let mut rng = seeded(11);
        let reference: Vec<(Subtype, Vec<u8>)> = Subtype::ALL
            .into_iter()
            .flat_map(|t| (0..100).map(move |_| t))
            .map(|t| (t, render(&sample_spec(t, &mut rng)).unwrap().to_gray().pixels))
            .collect();
        let mut rng = seeded(12);
        let mut correct = 0;
        for i in 0..64 {
            let t = Subtype::ALL[i % 8];
            let img = render(&sample_spec(t, &mut rng)).unwrap().to_gray().pixels;
            let nearest = reference.iter().min_by_key(|(_, r)| sq_dist(r, &img)).unwrap().0;
            correct += (nearest == t) as usize;
        }
        assert!(correct * 100 >= 90 * 64, "{correct}/64");
    }
}
