//! Synthetic domain sequences with a continual shift.
//!
//! Three generators: Gaussian blobs on a circle, two interleaved moons and
//! 8×8 binary glyphs. A domain is shifted by rotating (and optionally
//! translating) its generator output and by its noise level.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::randmix::InputGeometry;
use crate::rng;

/// Radius of the circle carrying the Gaussian blob centers.
pub const BLOB_RADIUS: f64 = 1.0;
pub const BITMAP_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    GaussMix,
    TwoMoons,
    Bitmap8,
}

impl GeneratorKind {
    pub fn geometry(self) -> InputGeometry {
        match self {
            GeneratorKind::GaussMix | GeneratorKind::TwoMoons => InputGeometry::Flat { dim: 2 },
            GeneratorKind::Bitmap8 => InputGeometry::Image { side: BITMAP_SIDE },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Keys the random stream, so equal names give equal samples.
    pub name: String,
    pub kind: GeneratorKind,
    #[serde(default)]
    pub rotation_deg: f64,
    /// Offset added after rotation; in pixels for `bitmap8`.
    #[serde(default)]
    pub translation: [f64; 2],
    #[serde(default)]
    pub noise_sigma: f64,
    pub classes: usize,
    pub samples: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain {:?}: {m}", self.name)));
        if self.classes == 0 {
            return bad("classes must be positive".into());
        }
        if self.samples < 4 * self.classes {
            return bad(format!("samples ({}) must be at least 4 x classes ({})", self.samples, self.classes));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and nonnegative, got {}", self.noise_sigma));
        }
        if !self.rotation_deg.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return bad("rotation and translation must be finite".into());
        }
        match self.kind {
            GeneratorKind::TwoMoons if self.classes != 2 => bad("two_moons has exactly 2 classes".into()),
            GeneratorKind::Bitmap8 if self.classes > GLYPHS.len() => {
                bad(format!("bitmap8 supports at most {} classes", GLYPHS.len()))
            }
            _ => Ok(()),
        }
    }

    pub fn geometry(&self) -> InputGeometry {
        self.kind.geometry()
    }
}

/// Inputs and true labels of one domain (or a split of it).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self { inputs: self.inputs.select_rows(rows)?, labels: rows.iter().map(|&i| self.labels[i]).collect() })
    }

    /// CSV rows `label,features...`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut header = String::from("label");
        for j in 0..self.inputs.cols() {
            header.push_str(&format!(",x{j}"));
        }
        writeln!(w, "{header}")?;
        for (row, label) in self.inputs.row_iter().zip(&self.labels) {
            write!(w, "{label}")?;
            for v in row {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn rotate(p: [f64; 2], deg: f64) -> [f64; 2] {
    if deg == 0.0 {
        return p;
    }
    let (s, c) = deg.to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Noise-free point of class `k` for the flat generators.
fn template_point(kind: GeneratorKind, classes: usize, k: usize, t: f64) -> [f64; 2] {
    match kind {
        GeneratorKind::GaussMix => {
            let a = 2.0 * PI * k as f64 / classes as f64;
            [BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin()]
        }
        // arcs centered on the origin: upper arc, then the lower one shifted
        _ => {
            let a = PI * t;
            if k == 0 {
                [a.cos() - 0.5, a.sin() - 0.25]
            } else {
                [0.5 - a.cos(), 0.25 - a.sin()]
            }
        }
    }
}

/// Draws one domain. Labels cycle `i mod K`, so every class gets `⌊N/K⌋` or
/// `⌈N/K⌉` samples.
pub fn generate(spec: &DomainSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::keyed(seed, &spec.name);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("validated sigma");
    let deg = spec.rotation_deg.rem_euclid(360.0);
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    let dim = spec.geometry().dim();
    let mut data = Vec::with_capacity(spec.samples * dim);
    for &k in &labels {
        match spec.kind {
            GeneratorKind::GaussMix | GeneratorKind::TwoMoons => {
                let t = if spec.kind == GeneratorKind::TwoMoons { rng.gen::<f64>() } else { 0.0 };
                let base = template_point(spec.kind, spec.classes, k, t);
                let p = [base[0] + noise.sample(&mut rng), base[1] + noise.sample(&mut rng)];
                let r = rotate(p, deg);
                data.push(r[0] + spec.translation[0]);
                data.push(r[1] + spec.translation[1]);
            }
            GeneratorKind::Bitmap8 => {
                let img = glyph_image(k, deg, spec.translation);
                data.extend(img.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            }
        }
    }
    Ok(Dataset { inputs: Tensor::matrix(spec.samples, dim, data)?, labels })
}

/// Class means of the noise-free flat generators, or `None` for moons and
/// bitmaps where the mean is not a template point.
pub fn blob_center(spec: &DomainSpec, k: usize) -> Option<[f64; 2]> {
    (spec.kind == GeneratorKind::GaussMix).then(|| {
        let r = rotate(template_point(spec.kind, spec.classes, k, 0.0), spec.rotation_deg.rem_euclid(360.0));
        [r[0] + spec.translation[0], r[1] + spec.translation[1]]
    })
}

const GLYPHS: [[u8; 8]; 6] = [
    // vertical bar
    [0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18],
    // horizontal bar
    [0x00, 0x00, 0x00, 0xff, 0xff, 0x00, 0x00, 0x00],
    // ring
    [0x3c, 0x42, 0x81, 0x81, 0x81, 0x81, 0x42, 0x3c],
    // diagonal
    [0x80, 0x40, 0x20, 0x10, 0x08, 0x04, 0x02, 0x01],
    // filled corner block
    [0xf0, 0xf0, 0xf0, 0xf0, 0x00, 0x00, 0x00, 0x00],
    // plus
    [0x18, 0x18, 0x18, 0xff, 0xff, 0x18, 0x18, 0x18],
];

fn glyph_pixel(k: usize, r: i64, c: i64) -> f64 {
    if (0..8).contains(&r) && (0..8).contains(&c) {
        f64::from((GLYPHS[k][r as usize] >> (7 - c)) & 1)
    } else {
        0.0
    }
}

/// Glyph `k` rotated about the image center and shifted, by nearest-neighbor
/// inverse mapping.
pub fn glyph_image(k: usize, deg: f64, translation: [f64; 2]) -> Vec<f64> {
    let mid = (BITMAP_SIDE as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(BITMAP_SIDE * BITMAP_SIDE);
    for r in 0..BITMAP_SIDE {
        for c in 0..BITMAP_SIDE {
            // (x, y) = (column, row) relative to the center
            let p = [c as f64 - translation[0] - mid, r as f64 - translation[1] - mid];
            let q = rotate(p, -deg);
            out.push(glyph_pixel(k, (q[1] + mid).round() as i64, (q[0] + mid).round() as i64));
        }
    }
    out
}

/// An ordered list of domains; the first one is the labeled source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSequence {
    pub name: String,
    pub domains: Vec<DomainSpec>,
}

impl DomainSequence {
    pub fn validate(&self) -> Result<()> {
        let first = self.domains.first().ok_or_else(|| Error::Config(format!("sequence {:?} is empty", self.name)))?;
        for d in &self.domains {
            d.validate()?;
            if d.classes != first.classes {
                return Err(Error::Config(format!("sequence {:?}: all domains must share the class count", self.name)));
            }
            if d.kind.geometry() != first.kind.geometry() {
                return Err(Error::Config(format!("sequence {:?}: all domains must share the input shape", self.name)));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.domains.first().map_or(0, |d| d.classes)
    }

    pub fn geometry(&self) -> Option<InputGeometry> {
        self.domains.first().map(DomainSpec::geometry)
    }

    /// The same domains in `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.domains.len()];
        if order.len() != self.domains.len() || !order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Config(format!("{order:?} is not a permutation of 0..{}", self.domains.len())));
        }
        let label = order.iter().map(usize::to_string).collect::<Vec<_>>().join("");
        Ok(Self { name: format!("{}@{label}", self.name), domains: order.iter().map(|&i| self.domains[i].clone()).collect() })
    }

    /// Every domain order, in lexicographic order of the index permutation.
    pub fn all_orders(&self) -> Vec<Vec<usize>> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if prefix.len() == used.len() {
                out.push(prefix.clone());
                return;
            }
            for i in 0..used.len() {
                if !used[i] {
                    used[i] = true;
                    prefix.push(i);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[i] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), &mut vec![false; self.domains.len()], &mut out);
        out
    }

    /// `count` distinct random orders, drawn without replacement.
    pub fn sample_orders(&self, count: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut all = self.all_orders();
        all.shuffle(&mut rng::stream(seed, rng::Stream::Data));
        all.truncate(count);
        all
    }
}

fn domain(name: &str, kind: GeneratorKind, rotation_deg: f64, noise_sigma: f64, classes: usize, samples: usize) -> DomainSpec {
    let translation = match kind {
        GeneratorKind::Bitmap8 => [0.0, 0.0],
        _ => flat_center(),
    };
    DomainSpec { name: name.into(), kind, rotation_deg, translation, noise_sigma, classes, samples }
}

/// Flat presets are centered on the middle of the unit square, where the
/// sigmoid-squashed augmentations land.
fn flat_center() -> [f64; 2] {
    [0.5, 0.5]
}

pub const PRESET_NAMES: [&str; 3] = ["rot5", "moons4", "bitmap5"];

/// The named presets.
pub fn standard_sequences() -> Vec<DomainSequence> {
    let rot5 = [0.0, 20.0, 40.0, 60.0, 80.0]
        .iter()
        .map(|&a| domain(&format!("rot{a}"), GeneratorKind::GaussMix, a, 0.5, 2, 400))
        .collect();
    let moons4 = [0.0, 20.0, 40.0, 60.0]
        .iter()
        .map(|&a| domain(&format!("moons{a}"), GeneratorKind::TwoMoons, a, 0.15, 2, 400))
        .collect();
    let bitmap5 = [0.0, 10.0, 20.0, 30.0, 40.0]
        .iter()
        .map(|&a| domain(&format!("bitmap{a}"), GeneratorKind::Bitmap8, a, 0.3, 4, 240))
        .collect();
    vec![
        DomainSequence { name: "rot5".into(), domains: rot5 },
        DomainSequence { name: "moons4".into(), domains: moons4 },
        DomainSequence { name: "bitmap5".into(), domains: bitmap5 },
    ]
}

pub fn preset(name: &str) -> Result<DomainSequence> {
    standard_sequences()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownPreset { name: name.into(), available: PRESET_NAMES.join(", ") })
}

/// Random split into `(train, test)` with `round(fraction·N)` training rows.
pub fn split_source(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0,1), got {fraction}")));
    }
    let n = data.len();
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, rng::Stream::Split));
    let (train, test) = idx.split_at(n_train);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.select(&train)?, data.select(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(rotation_deg: f64, sigma: f64) -> DomainSpec {
        DomainSpec {
            name: "d".into(),
            kind: GeneratorKind::GaussMix,
            rotation_deg,
            translation: [0.0, 0.0],
            noise_sigma: sigma,
            classes: 3,
            samples: 30,
        }
    }

    #[test]
    fn noise_free_samples_sit_on_templates() {
        let data = generate(&blobs(0.0, 0.0), 1).unwrap();
        for (row, &k) in data.inputs.row_iter().zip(&data.labels) {
            let c = blob_center(&blobs(0.0, 0.0), k).unwrap();
            assert_eq!(row, &c[..]);
        }
        let img = generate(&DomainSpec { kind: GeneratorKind::Bitmap8, ..blobs(0.0, 0.0) }, 1).unwrap();
        for (row, &k) in img.inputs.row_iter().zip(&img.labels) {
            for r in 0..8 {
                for c in 0..8 {
                    assert_eq!(row[r * 8 + c], glyph_pixel(k, r as i64, c as i64));
                }
            }
        }
    }

    #[test]
    fn full_turn_is_identity() {
        for kind in [GeneratorKind::GaussMix, GeneratorKind::Bitmap8] {
            let a = generate(&DomainSpec { kind, ..blobs(0.0, 0.2) }, 9).unwrap();
            let b = generate(&DomainSpec { kind, ..blobs(360.0, 0.2) }, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn class_means_match_centers() {
        let spec = DomainSpec { samples: 3000, ..blobs(35.0, 0.5) };
        let data = generate(&spec, 2022).unwrap();
        let per_class = (spec.samples / spec.classes) as f64;
        for k in 0..3 {
            let c = blob_center(&spec, k).unwrap();
            for j in 0..2 {
                let mean: f64 = (0..spec.samples).filter(|&i| data.labels[i] == k).map(|i| data.inputs.at(i, j)).sum::<f64>()
                    / per_class;
                assert!((mean - c[j]).abs() < 3.0 * 0.5 / per_class.sqrt(), "class {k} dim {j}: {mean} vs {}", c[j]);
            }
        }
    }

    #[test]
    fn labels_are_balanced() {
        let data = generate(&DomainSpec { samples: 31, ..blobs(0.0, 0.1) }, 0).unwrap();
        for k in 0..3 {
            let n = data.labels.iter().filter(|&&l| l == k).count() as f64;
            assert!((n - 31.0 / 3.0).abs() <= 1.0);
        }
    }

    #[test]
    fn too_few_samples_are_rejected() {
        assert!(generate(&DomainSpec { samples: 11, ..blobs(0.0, 0.1) }, 0).is_err());
        assert!(generate(&DomainSpec { kind: GeneratorKind::TwoMoons, ..blobs(0.0, 0.1) }, 0).is_err());
    }

    #[test]
    fn presets_exist_and_share_classes() {
        assert_eq!(preset("rot5").unwrap().domains.len(), 5);
        for s in standard_sequences() {
            s.validate().unwrap();
        }
        let err = preset("nope").unwrap_err().to_string();
        assert!(err.contains("rot5") && err.contains("bitmap5"), "{err}");
    }

    #[test]
    fn permutation_keeps_the_multiset() {
        let s = preset("rot5").unwrap();
        let p = s.permuted(&[4, 2, 0, 1, 3]).unwrap();
        let mut a: Vec<String> = s.domains.iter().map(|d| d.name.clone()).collect();
        let mut b: Vec<String> = p.domains.iter().map(|d| d.name.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(p.domains[0].rotation_deg, 80.0);
        assert!(s.permuted(&[0, 0, 1, 2, 3]).is_err());
        assert_eq!(s.all_orders().len(), 120);
        let picked = s.sample_orders(10, 2022);
        assert_eq!(picked.len(), 10);
        assert!(picked.iter().all(|o| s.permuted(o).is_ok()));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let data = generate(&DomainSpec { samples: 100, ..blobs(0.0, 0.3) }, 4).unwrap();
        let (train, test) = split_source(&data, 0.8, 2022).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        let mut rows: Vec<Vec<u64>> = train
            .inputs
            .row_iter()
            .chain(test.inputs.row_iter())
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut all: Vec<Vec<u64>> = data.inputs.row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        all.sort();
        assert_eq!(rows, all);
        assert_eq!(split_source(&data, 0.8, 2022).unwrap(), (train, test));
        assert!(split_source(&data, 1.0, 0).is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_sample() {
        let data = generate(&blobs(10.0, 0.3), 4).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 31);
        assert!(text.starts_with("label,x0,x1\n"));
    }
}
