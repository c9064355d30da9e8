//! Brush painting on label maps with an undo stack, as used by the map editor.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmap::SegMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Brush {
    pub class: u8,
    /// Disc radius in pixels; a pixel is painted when its centre lies within it.
    pub radius: f64,
}

fn stamp(y: &mut SegMap, ci: f64, cj: f64, brush: &Brush) {
    let r = brush.radius.max(0.0);
    let (h, w) = (y.height() as isize, y.width() as isize);
    let i_lo = ((ci - r).floor() as isize).max(0);
    let i_hi = ((ci + r).ceil() as isize).min(h - 1);
    let j_lo = ((cj - r).floor() as isize).max(0);
    let j_hi = ((cj + r).ceil() as isize).min(w - 1);
    for i in i_lo..=i_hi {
        for j in j_lo..=j_hi {
            let (di, dj) = (i as f64 - ci, j as f64 - cj);
            if di * di + dj * dj <= r * r {
                let _ = y.set(i as usize, j as usize, brush.class);
            }
        }
    }
}

/// Paints discs along the polyline `path` of `(row, col)` points, sampled
/// every half pixel. A single point paints one disc.
pub fn paint_stroke(y: &SegMap, path: &[(f64, f64)], brush: &Brush) -> Result<SegMap> {
    if brush.class as usize >= y.num_classes() {
        return Err(Error::LabelRange {
            label: brush.class as usize,
            classes: y.num_classes(),
        });
    }
    if !(brush.radius.is_finite() && path.iter().all(|p| p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::InvalidArgument("non-finite stroke".into()));
    }
    let mut out = y.clone();
    let Some(&first) = path.first() else {
        return Ok(out);
    };
    stamp(&mut out, first.0, first.1, brush);
    for seg in path.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let n = (len * 2.0).ceil().max(1.0) as usize;
        for k in 1..=n {
            let f = k as f64 / n as f64;
            stamp(
                &mut out,
                a.0 + f * (b.0 - a.0),
                a.1 + f * (b.1 - a.1),
                brush,
            );
        }
    }
    Ok(out)
}

/// Editable map with its estimated original and an undo stack of strokes.
#[derive(Clone, Debug, PartialEq)]
pub struct EditorSession {
    original: SegMap,
    current: SegMap,
    undo: Vec<SegMap>,
}

impl EditorSession {
    pub fn new(estimate: SegMap) -> Self {
        EditorSession {
            current: estimate.clone(),
            original: estimate,
            undo: Vec::new(),
        }
    }

    pub fn original(&self) -> &SegMap {
        &self.original
    }

    pub fn current(&self) -> &SegMap {
        &self.current
    }

    pub fn stroke(&mut self, path: &[(f64, f64)], brush: &Brush) -> Result<()> {
        let next = paint_stroke(&self.current, path, brush)?;
        self.undo.push(std::mem::replace(&mut self.current, next));
        Ok(())
    }

    /// Reverts the last stroke; false when there is nothing to undo.
    pub fn undo(&mut self) -> bool {
        match self.undo.pop() {
            Some(prev) => {
                self.current = prev;
                true
            }
            None => false,
        }
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    pub fn is_noop(&self) -> bool {
        self.current == self.original
    }

    /// Classes whose pixels changed, old or new.
    pub fn touched_classes(&self) -> BTreeSet<u8> {
        self.original
            .labels()
            .iter()
            .zip(self.current.labels())
            .filter(|(a, b)| a != b)
            .flat_map(|(&a, &b)| [a, b])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{default_palette, scene_at, SceneSpec, EYE_RIGHT, MOUTH};

    fn blank() -> SegMap {
        SegMap::filled(16, 16, 0, default_palette()).unwrap()
    }

    #[test]
    fn zero_length_stroke_is_one_disc() {
        let b = Brush {
            class: 2,
            radius: 2.0,
        };
        let y = paint_stroke(&blank(), &[(8.0, 8.0), (8.0, 8.0)], &b).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let d2 = (i as f64 - 8.0).powi(2) + (j as f64 - 8.0).powi(2);
                assert_eq!(y.get(i, j) == 2, d2 <= 4.0, "({i},{j})");
            }
        }
        assert_eq!(y.count(2), 13);
    }

    #[test]
    fn strokes_are_clipped_and_connected() {
        let b = Brush {
            class: 1,
            radius: 0.5,
        };
        let y = paint_stroke(&blank(), &[(0.0, -3.0), (0.0, 20.0)], &b).unwrap();
        assert_eq!(y.count(1), 16);
        assert!(paint_stroke(
            &blank(),
            &[(1.0, 1.0)],
            &Brush {
                class: 9,
                radius: 1.0
            }
        )
        .is_err());
        assert_eq!(paint_stroke(&blank(), &[], &b).unwrap(), blank());
    }

    #[test]
    fn undo_restores_and_repaint_is_noop() {
        let (_, y) = scene_at(&SceneSpec::default(), 4).unwrap();
        let mut s = EditorSession::new(y.clone());
        s.stroke(
            &[(29.0, 2.0), (30.0, 4.0)],
            &Brush {
                class: EYE_RIGHT,
                radius: 1.5,
            },
        )
        .unwrap();
        assert!(!s.is_noop());
        assert!(s.touched_classes().contains(&EYE_RIGHT));
        assert!(s.undo());
        assert_eq!(s.current(), &y);
        assert!(!s.undo());

        // Repainting the same stroke with the original class restores a uniform map.
        let path = [(8.0, 6.0), (10.0, 9.0)];
        let mut t = EditorSession::new(blank());
        t.stroke(
            &path,
            &Brush {
                class: MOUTH,
                radius: 1.5,
            },
        )
        .unwrap();
        t.stroke(
            &path,
            &Brush {
                class: 0,
                radius: 1.5,
            },
        )
        .unwrap();
        assert!(t.is_noop());
        assert_eq!(t.undo_depth(), 2);
    }
}
