//! Procedural face-like scenes with pixel-exact labels, and scripted edits of
//! their segmentation maps.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::segmap::{Palette, SegMap};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const FACE: u8 = 1;
pub const EYE_LEFT: u8 = 2;
pub const EYE_RIGHT: u8 = 3;
pub const MOUTH: u8 = 4;
pub const HAIR: u8 = 5;

/// Stacking order, bottom to top; a pixel takes the label of the topmost part.
const Z_ORDER: [u8; 6] = [BACKGROUND, HAIR, FACE, EYE_LEFT, EYE_RIGHT, MOUTH];

fn z_rank(label: u8) -> usize {
    Z_ORDER.iter().position(|&l| l == label).unwrap_or(0)
}

pub fn default_palette() -> Palette {
    Palette::new(&[
        ("background", [40, 40, 40]),
        ("face", [230, 180, 140]),
        ("eye_left", [40, 90, 220]),
        ("eye_right", [40, 200, 220]),
        ("mouth", [220, 40, 60]),
        ("hair", [120, 70, 20]),
    ])
}

/// Inclusive real interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.1 <= self.0 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

/// Geometry ranges are fractions of the canvas size (face) or of the face
/// radii (parts), so one spec works at any resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub palette: Palette,
    pub face_center_x: Range,
    pub face_center_y: Range,
    pub face_rx: Range,
    pub face_ry: Range,
    pub eye_offset_x: Range,
    pub eye_offset_y: Range,
    pub eye_rx: Range,
    pub eye_ry: Range,
    pub mouth_offset_y: Range,
    pub mouth_rx: Range,
    pub mouth_ry: Range,
    pub hair_lift: Range,
    /// Base colours (sRGB) per class, each jittered per scene by up to `color_jitter`.
    pub base_colors: Vec<[u8; 3]>,
    pub background_choices: Vec<[u8; 3]>,
    pub hair_choices: Vec<[u8; 3]>,
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::with_size(32)
    }
}

impl SceneSpec {
    pub fn with_size(image_size: usize) -> Self {
        SceneSpec {
            image_size,
            palette: default_palette(),
            face_center_x: Range(0.45, 0.55),
            face_center_y: Range(0.52, 0.58),
            face_rx: Range(0.25, 0.31),
            face_ry: Range(0.30, 0.35),
            eye_offset_x: Range(0.36, 0.46),
            eye_offset_y: Range(0.15, 0.28),
            eye_rx: Range(0.17, 0.26),
            eye_ry: Range(0.10, 0.15),
            mouth_offset_y: Range(0.42, 0.52),
            mouth_rx: Range(0.28, 0.42),
            mouth_ry: Range(0.08, 0.16),
            hair_lift: Range(0.35, 0.5),
            base_colors: vec![
                [0, 0, 0],
                [224, 172, 140],
                [30, 30, 60],
                [30, 30, 60],
                [170, 40, 55],
                [0, 0, 0],
            ],
            background_choices: vec![
                [150, 190, 225],
                [170, 210, 170],
                [200, 200, 205],
                [120, 140, 200],
            ],
            hair_choices: vec![[60, 40, 25], [25, 25, 25], [190, 150, 80]],
            color_jitter: 15.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("scene spec: {m}")));
        if self.image_size < 8 {
            return bad("image_size must be >= 8");
        }
        if self.palette.len() != 6 || self.base_colors.len() != 6 {
            return bad("expected 6 classes");
        }
        if self.background_choices.is_empty() || self.hair_choices.is_empty() {
            return bad("colour choices must be non-empty");
        }
        let ranges = [
            self.face_center_x,
            self.face_center_y,
            self.face_rx,
            self.face_ry,
            self.eye_offset_x,
            self.eye_offset_y,
            self.eye_rx,
            self.eye_ry,
            self.mouth_offset_y,
            self.mouth_rx,
            self.mouth_ry,
            self.hair_lift,
        ];
        if ranges.iter().any(|r| !r.valid() || r.0 < 0.0) {
            return bad("ranges must be finite, ordered and non-negative");
        }
        // Worst-case extents must stay on the canvas.
        let (cx, cy) = (self.face_center_x, self.face_center_y);
        let (rx, ry) = (self.face_rx.1 + 0.05, self.face_ry.1);
        let hair_top = cy.0 - self.hair_lift.1 * ry - 0.8 * ry;
        if cx.0 - rx < 0.0 || cx.1 + rx > 1.0 || hair_top < 0.0 || cy.1 + ry > 1.0 {
            return bad("face or hair can leave the canvas");
        }
        // Parts must sit strictly inside the face ellipse.
        let ex = self.eye_offset_x.1 + self.eye_rx.1;
        let ey = self.eye_offset_y.1 + self.eye_ry.1 * self.face_rx.1 / self.face_ry.0;
        let my = self.mouth_offset_y.1 + self.mouth_ry.1 * self.face_rx.1 / self.face_ry.0;
        if ex * ex + ey * ey >= 1.0 || self.mouth_rx.1 * self.mouth_rx.1 + my * my >= 1.0 {
            return bad("parts can leave the face");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(i, j)` lies inside.
    pub fn covers(&self, i: usize, j: usize) -> bool {
        let dx = (j as f64 + 0.5 - self.cx) / self.rx;
        let dy = (i as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// One sampled scene: part ellipses (pixel units) and class colours in [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub size: usize,
    pub hair: Ellipse,
    pub face: Ellipse,
    pub eye_left: Ellipse,
    pub eye_right: Ellipse,
    pub mouth: Ellipse,
    pub colors: Vec<[f64; 3]>,
}

impl SceneGeometry {
    pub fn sample<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Self {
        let s = spec.image_size as f64;
        let cx = spec.face_center_x.sample(rng) * s;
        let cy = spec.face_center_y.sample(rng) * s;
        let rx = spec.face_rx.sample(rng) * s;
        let ry = spec.face_ry.sample(rng) * s;
        let face = Ellipse { cx, cy, rx, ry };
        let lift = spec.hair_lift.sample(rng);
        let hair = Ellipse {
            cx,
            cy: cy - lift * ry,
            rx: rx + 0.05 * s,
            ry: 0.8 * ry,
        };
        let ex = spec.eye_offset_x.sample(rng) * rx;
        let ey = spec.eye_offset_y.sample(rng) * ry;
        let erx = spec.eye_rx.sample(rng) * rx;
        let ery = spec.eye_ry.sample(rng) * rx;
        let eye_left = Ellipse {
            cx: cx - ex,
            cy: cy - ey,
            rx: erx,
            ry: ery,
        };
        let eye_right = Ellipse {
            cx: cx + ex,
            ..eye_left
        };
        let mouth = Ellipse {
            cx,
            cy: cy + spec.mouth_offset_y.sample(rng) * ry,
            rx: spec.mouth_rx.sample(rng) * rx,
            ry: spec.mouth_ry.sample(rng) * rx,
        };
        let jitter = |c: [u8; 3], rng: &mut R| -> [f64; 3] {
            let shift: f64 = rng.random_range(-spec.color_jitter..=spec.color_jitter);
            let mut out = [0.0; 3];
            for k in 0..3 {
                let per: f64 = rng.random_range(-spec.color_jitter..=spec.color_jitter) * 0.3;
                let v = (c[k] as f64 + shift + per).clamp(0.0, 255.0);
                out[k] = v / 127.5 - 1.0;
            }
            out
        };
        let bg = spec.background_choices[rng.random_range(0..spec.background_choices.len())];
        let hc = spec.hair_choices[rng.random_range(0..spec.hair_choices.len())];
        let eye = jitter(spec.base_colors[EYE_LEFT as usize], rng);
        let colors = vec![
            jitter(bg, rng),
            jitter(spec.base_colors[FACE as usize], rng),
            eye,
            eye,
            jitter(spec.base_colors[MOUTH as usize], rng),
            jitter(hc, rng),
        ];
        SceneGeometry {
            size: spec.image_size,
            hair,
            face,
            eye_left,
            eye_right,
            mouth,
            colors,
        }
    }

    /// Label of pixel `(i, j)`: the topmost covering part.
    pub fn label_at(&self, i: usize, j: usize) -> u8 {
        let parts = [
            (MOUTH, &self.mouth),
            (EYE_RIGHT, &self.eye_right),
            (EYE_LEFT, &self.eye_left),
            (FACE, &self.face),
            (HAIR, &self.hair),
        ];
        parts
            .iter()
            .find(|(_, e)| e.covers(i, j))
            .map(|(l, _)| *l)
            .unwrap_or(BACKGROUND)
    }

    pub fn labels(&self, palette: &Palette) -> SegMap {
        let n = self.size;
        let labels = (0..n * n).map(|p| self.label_at(p / n, p % n)).collect();
        SegMap::new(n, n, labels, palette.clone()).expect("labels are palette ids")
    }

    /// Image `[1, 3, S, S]` in model space: each pixel takes its class colour.
    pub fn render(&self, map: &SegMap) -> Tensor {
        let n = self.size;
        let hw = n * n;
        Tensor::from_fn([1, 3, n, n], |idx| {
            let (c, p) = (idx / hw, idx % hw);
            self.colors[map.labels()[p] as usize][c]
        })
    }
}

/// Samples and renders one scene.
pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<(Tensor, SegMap)> {
    spec.validate()?;
    let geom = SceneGeometry::sample(spec, rng);
    let map = geom.labels(&spec.palette);
    Ok((geom.render(&map), map))
}

/// Scene `index` of the dataset defined by `spec.seed`; independent of how many
/// other scenes are generated.
pub fn scene_at(spec: &SceneSpec, index: u64) -> Result<(Tensor, SegMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    generate_scene(spec, &mut rng)
}

pub fn generate_dataset(
    spec: &SceneSpec,
    start: u64,
    count: usize,
) -> Result<Vec<(Tensor, SegMap)>> {
    spec.validate()?;
    par::try_map_range(count, |i| scene_at(spec, start + i as u64))
}

/// Scripted segmentation-map edits used for benchmarking.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum BenchmarkEdit {
    /// Shift both eyes by `(dx, dy)` pixels; vacated pixels become face.
    MoveEyes { dx: i32, dy: i32 },
    /// Extend the mouth downward by `px` rows over face pixels.
    OpenMouth { px: usize },
    /// Remove the bottom `px` rows of the mouth in each column (at least one row stays).
    CloseMouth { px: usize },
    /// Dilate a part by `px` pixels over lower-stacked classes.
    EnlargePart { class: u8, px: usize },
    /// Relabel every pixel of a part as background.
    RemovePart { class: u8 },
}

impl BenchmarkEdit {
    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkEdit::MoveEyes { .. } => "move_eyes",
            BenchmarkEdit::OpenMouth { .. } => "open_mouth",
            BenchmarkEdit::CloseMouth { .. } => "close_mouth",
            BenchmarkEdit::EnlargePart { .. } => "enlarge_part",
            BenchmarkEdit::RemovePart { .. } => "remove_part",
        }
    }

    /// Edit-related classes.
    pub fn q_edit(&self) -> BTreeSet<u8> {
        match self {
            BenchmarkEdit::MoveEyes { .. } => BTreeSet::from([EYE_LEFT, EYE_RIGHT]),
            BenchmarkEdit::OpenMouth { .. } | BenchmarkEdit::CloseMouth { .. } => {
                BTreeSet::from([MOUTH])
            }
            BenchmarkEdit::EnlargePart { class, .. } | BenchmarkEdit::RemovePart { class } => {
                BTreeSet::from([*class])
            }
        }
    }

    pub fn apply(&self, y: &SegMap) -> Result<SegMap> {
        apply_benchmark_edit(y, self)
    }
}

pub fn apply_benchmark_edit(y: &SegMap, edit: &BenchmarkEdit) -> Result<SegMap> {
    let (h, w) = (y.height(), y.width());
    let k = y.num_classes() as u8;
    let absent = |c: u8| Error::InvalidArgument(format!("class {c} absent from map"));
    let mut out = y.clone();
    match *edit {
        BenchmarkEdit::MoveEyes { dx, dy } => {
            let eyes: Vec<(usize, usize, u8)> = (0..h * w)
                .filter_map(|p| {
                    let l = y.labels()[p];
                    (l == EYE_LEFT || l == EYE_RIGHT).then_some((p / w, p % w, l))
                })
                .collect();
            if eyes.is_empty() {
                return Err(absent(EYE_LEFT));
            }
            for &(i, j, _) in &eyes {
                out.set(i, j, FACE)?;
            }
            for &(i, j, l) in &eyes {
                let (ni, nj) = (i as i64 + dy as i64, j as i64 + dx as i64);
                if ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w {
                    out.set(ni as usize, nj as usize, l)?;
                }
            }
        }
        BenchmarkEdit::OpenMouth { px } => {
            if y.count(MOUTH) == 0 {
                return Err(absent(MOUTH));
            }
            for j in 0..w {
                if let Some(bottom) = (0..h).rev().find(|&i| y.get(i, j) == MOUTH) {
                    for i in (bottom + 1)..(bottom + 1 + px).min(h) {
                        if y.get(i, j) == FACE {
                            out.set(i, j, MOUTH)?;
                        }
                    }
                }
            }
        }
        BenchmarkEdit::CloseMouth { px } => {
            if y.count(MOUTH) == 0 {
                return Err(absent(MOUTH));
            }
            for j in 0..w {
                let rows: Vec<usize> = (0..h).filter(|&i| y.get(i, j) == MOUTH).collect();
                let keep = rows.len().saturating_sub(px).max(1);
                for &i in rows.iter().skip(keep) {
                    out.set(i, j, FACE)?;
                }
            }
        }
        BenchmarkEdit::EnlargePart { class, px } => {
            if class >= k {
                return Err(Error::LabelRange {
                    label: class as usize,
                    classes: k as usize,
                });
            }
            if y.count(class) == 0 {
                return Err(absent(class));
            }
            let r = px as i64;
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let here = y.get(i as usize, j as usize);
                    if z_rank(here) >= z_rank(class) {
                        continue;
                    }
                    let near = (-r..=r).any(|di| {
                        (-r..=r).any(|dj| {
                            let (a, b) = (i + di, j + dj);
                            a >= 0
                                && b >= 0
                                && a < h as i64
                                && b < w as i64
                                && y.get(a as usize, b as usize) == class
                        })
                    });
                    if near {
                        out.set(i as usize, j as usize, class)?;
                    }
                }
            }
        }
        BenchmarkEdit::RemovePart { class } => {
            if class >= k {
                return Err(Error::LabelRange {
                    label: class as usize,
                    classes: k as usize,
                });
            }
            for i in 0..h {
                for j in 0..w {
                    if y.get(i, j) == class {
                        out.set(i, j, BACKGROUND)?;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The benchmark's edit menu with concrete parameters.
pub fn benchmark_edits() -> Vec<BenchmarkEdit> {
    vec![
        BenchmarkEdit::MoveEyes { dx: 0, dy: -3 },
        BenchmarkEdit::OpenMouth { px: 3 },
        BenchmarkEdit::CloseMouth { px: 2 },
        BenchmarkEdit::EnlargePart { class: HAIR, px: 4 },
        BenchmarkEdit::RemovePart { class: FACE },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        SceneSpec::default().validate().unwrap();
        let bad = SceneSpec {
            face_rx: Range(0.45, 0.5),
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SceneSpec {
            eye_offset_x: Range(0.9, 0.95),
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let spec = SceneSpec::default();
        let a = scene_at(&spec, 7).unwrap();
        let b = scene_at(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, scene_at(&spec, 8).unwrap().1);
    }

    #[test]
    fn background_is_majority_class() {
        let spec = SceneSpec::default();
        let mut hist = vec![0usize; 6];
        for (_, m) in generate_dataset(&spec, 0, 100).unwrap() {
            for (h, c) in hist.iter_mut().zip(m.histogram()) {
                *h += c;
            }
        }
        let max = hist.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0;
        assert_eq!(max as u8, BACKGROUND, "{hist:?}");
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
    }

    #[test]
    fn parts_sit_inside_face_and_all_present() {
        let spec = SceneSpec::default();
        for idx in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(idx);
            let geom = SceneGeometry::sample(&spec, &mut rng);
            let map = geom.labels(&spec.palette);
            for i in 0..32 {
                for j in 0..32 {
                    let l = map.get(i, j);
                    if matches!(l, EYE_LEFT | EYE_RIGHT | MOUTH) {
                        assert!(geom.face.covers(i, j), "scene {idx} pixel {i},{j}");
                    }
                }
            }
            for c in [FACE, EYE_LEFT, EYE_RIGHT, MOUTH, HAIR] {
                assert!(map.count(c) > 0, "scene {idx} lacks class {c}");
            }
        }
    }

    #[test]
    fn rendering_matches_geometry_labels() {
        let spec = SceneSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = SceneGeometry::sample(&spec, &mut rng);
        let map = geom.labels(&spec.palette);
        let img = geom.render(&map);
        for i in 0..32 {
            for j in 0..32 {
                let l = geom.label_at(i, j);
                assert_eq!(map.get(i, j), l);
                for c in 0..3 {
                    assert_eq!(
                        img.data()[c * 1024 + i * 32 + j],
                        geom.colors[l as usize][c]
                    );
                }
            }
        }
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_move_is_identity() {
        let (_, y) = scene_at(&SceneSpec::default(), 3).unwrap();
        let e = BenchmarkEdit::MoveEyes { dx: 0, dy: 0 };
        assert_eq!(e.apply(&y).unwrap(), y);
    }

    #[test]
    fn move_eyes_translates_eye_pixels() {
        let (_, y) = scene_at(&SceneSpec::default(), 4).unwrap();
        let e = BenchmarkEdit::MoveEyes { dx: 1, dy: -2 };
        let out = e.apply(&y).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let l = y.get(i, j);
                if (l == EYE_LEFT || l == EYE_RIGHT) && i >= 2 && j + 1 < 32 {
                    assert_eq!(out.get(i - 2, j + 1), l);
                }
            }
        }
        assert_eq!(out.count(EYE_LEFT), y.count(EYE_LEFT));
    }

    #[test]
    fn remove_part_clears_class() {
        let (_, y) = scene_at(&SceneSpec::default(), 5).unwrap();
        let out = BenchmarkEdit::RemovePart { class: MOUTH }
            .apply(&y)
            .unwrap();
        assert_eq!(out.count(MOUTH), 0);
        assert_eq!(out.count(BACKGROUND), y.count(BACKGROUND) + y.count(MOUTH));
    }

    #[test]
    fn open_mouth_matches_geometric_oracle() {
        let spec = SceneSpec::default();
        for idx in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + idx);
            let geom = SceneGeometry::sample(&spec, &mut rng);
            let y = geom.labels(&spec.palette);
            let out = BenchmarkEdit::OpenMouth { px: 2 }.apply(&y).unwrap();
            // Oracle from geometry: a pixel joins the mouth iff it is face, and
            // within two rows below the mouth ellipse's lowest covered pixel in its column.
            let mut expected = y.count(MOUTH);
            for j in 0..32 {
                if let Some(bottom) = (0..32).rev().find(|&i| geom.mouth.covers(i, j)) {
                    expected += (bottom + 1..(bottom + 3).min(32))
                        .filter(|&i| geom.label_at(i, j) == FACE)
                        .count();
                }
            }
            assert_eq!(out.count(MOUTH), expected, "scene {idx}");
            assert!(out.count(MOUTH) > y.count(MOUTH));
        }
    }

    #[test]
    fn close_mouth_shrinks_but_keeps_a_row() {
        let (_, y) = scene_at(&SceneSpec::default(), 9).unwrap();
        let out = BenchmarkEdit::CloseMouth { px: 10 }.apply(&y).unwrap();
        let cols_before = (0..32)
            .filter(|&j| (0..32).any(|i| y.get(i, j) == MOUTH))
            .count();
        assert_eq!(out.count(MOUTH), cols_before);
    }

    #[test]
    fn enlarge_respects_stacking() {
        let (_, y) = scene_at(&SceneSpec::default(), 10).unwrap();
        let out = BenchmarkEdit::EnlargePart { class: FACE, px: 2 }
            .apply(&y)
            .unwrap();
        assert!(out.count(FACE) > y.count(FACE));
        for c in [EYE_LEFT, EYE_RIGHT, MOUTH] {
            assert_eq!(out.count(c), y.count(c));
        }
        assert!(BenchmarkEdit::EnlargePart { class: 9, px: 1 }
            .apply(&y)
            .is_err());
    }

    #[test]
    fn edits_on_maps_without_target_fail() {
        let y = SegMap::filled(8, 8, BACKGROUND, default_palette()).unwrap();
        assert!(BenchmarkEdit::MoveEyes { dx: 1, dy: 0 }.apply(&y).is_err());
        assert!(BenchmarkEdit::OpenMouth { px: 1 }.apply(&y).is_err());
        assert!(BenchmarkEdit::EnlargePart { class: FACE, px: 1 }
            .apply(&y)
            .is_err());
        assert_eq!(
            BenchmarkEdit::RemovePart { class: MOUTH }
                .apply(&y)
                .unwrap(),
            y
        );
    }
}
