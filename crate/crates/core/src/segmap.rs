//! Segmentation maps, class palettes and binary edit-region masks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    /// Display colour (sRGB).
    pub color: [u8; 3],
}

/// Class id → (name, display colour). Ids are positions in the list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(pub Vec<ClassInfo>);

impl Palette {
    pub fn new(entries: &[(&str, [u8; 3])]) -> Self {
        Palette(
            entries
                .iter()
                .map(|(n, c)| ClassInfo {
                    name: n.to_string(),
                    color: *c,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.0.iter().position(|c| c.name == name).map(|i| i as u8)
    }

    pub fn name(&self, id: u8) -> &str {
        &self.0[id as usize].name
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    palette: Palette,
}

impl SegMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, palette: Palette) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{}x{} map with {} labels",
                height,
                width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= palette.len()) {
            return Err(Error::LabelRange {
                label: bad as usize,
                classes: palette.len(),
            });
        }
        Ok(SegMap {
            height,
            width,
            labels,
            palette,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8, palette: Palette) -> Result<Self> {
        Self::new(height, width, vec![label; height * width], palette)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.width + j]
    }

    /// Sets one pixel; the label must be a valid class.
    pub fn set(&mut self, i: usize, j: usize, label: u8) -> Result<()> {
        if label as usize >= self.palette.len() {
            return Err(Error::LabelRange {
                label: label as usize,
                classes: self.palette.len(),
            });
        }
        self.labels[i * self.width + j] = label;
        Ok(())
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.palette.len()];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn same_dims(&self, other: &SegMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Run-length encoding as `[label, run, label, run, ...]` in raster order.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let mut it = self.labels.iter();
        if let Some(&first) = it.next() {
            let (mut cur, mut run) = (first, 1u32);
            for &l in it {
                if l == cur {
                    run += 1;
                } else {
                    out.extend([cur as u32, run]);
                    cur = l;
                    run = 1;
                }
            }
            out.extend([cur as u32, run]);
        }
        out
    }

    pub fn from_rle(height: usize, width: usize, rle: &[u32], palette: Palette) -> Result<Self> {
        if !rle.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "RLE needs (label, run) pairs".into(),
            ));
        }
        let mut labels = Vec::with_capacity(height * width);
        for pair in rle.chunks(2) {
            let label = u8::try_from(pair[0])
                .map_err(|_| Error::InvalidArgument(format!("label {} too large", pair[0])))?;
            if labels.len() + pair[1] as usize > height * width {
                return Err(Error::InvalidArgument("RLE longer than map".into()));
            }
            labels.extend(std::iter::repeat_n(label, pair[1] as usize));
        }
        Self::new(height, width, labels, palette)
    }
}

/// Binary mask over the image plane.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} mask with {} bits",
                bits.len()
            )));
        }
        Ok(RoiMask {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RoiMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        RoiMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Raster indices of selected pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn contains(&self, other: &RoiMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// One pass of 3×3 square dilation (8-neighbourhood), clipped at borders.
    pub fn dilate_once(&self) -> RoiMask {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                if !self.bits[i * w + j] {
                    continue;
                }
                for ii in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                    for jj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                        out[ii * w + jj] = true;
                    }
                }
            }
        }
        RoiMask {
            height: h,
            width: w,
            bits: out,
        }
    }

    pub fn dilate(&self, iterations: usize) -> RoiMask {
        (0..iterations).fold(self.clone(), |m, _| m.dilate_once())
    }
}

/// Dilation radius applied after selecting edit-related pixels.
pub const ROI_DILATION: usize = 3;

/// Pixels whose original or edited label is in `q_edit`, dilated by
/// [`ROI_DILATION`] iterations of a 3×3 square.
pub fn build_roi_mask(y: &SegMap, y_edited: &SegMap, q_edit: &BTreeSet<u8>) -> Result<RoiMask> {
    build_roi_mask_with(y, y_edited, q_edit, ROI_DILATION)
}

pub fn build_roi_mask_with(
    y: &SegMap,
    y_edited: &SegMap,
    q_edit: &BTreeSet<u8>,
    dilation: usize,
) -> Result<RoiMask> {
    if !y.same_dims(y_edited) {
        return Err(Error::InvalidArgument(format!(
            "map dimensions differ: {}x{} vs {}x{}",
            y.height, y.width, y_edited.height, y_edited.width
        )));
    }
    if q_edit.is_empty() {
        return Err(Error::InvalidArgument(
            "q_edit must name at least one class".into(),
        ));
    }
    let bits = y
        .labels
        .iter()
        .zip(&y_edited.labels)
        .map(|(a, b)| q_edit.contains(a) || q_edit.contains(b))
        .collect();
    Ok(RoiMask::new(y.height, y.width, bits)?.dilate(dilation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pal(k: usize) -> Palette {
        Palette(
            (0..k)
                .map(|i| ClassInfo {
                    name: format!("c{i}"),
                    color: [i as u8; 3],
                })
                .collect(),
        )
    }

    #[test]
    fn labels_validated() {
        assert!(SegMap::new(2, 2, vec![0, 1, 2, 3], pal(3)).is_err());
        assert!(SegMap::new(2, 2, vec![0, 1, 2], pal(3)).is_err());
        let mut m = SegMap::filled(2, 2, 0, pal(2)).unwrap();
        assert!(m.set(0, 0, 2).is_err());
    }

    #[test]
    fn identical_maps_without_edit_class_give_empty_mask() {
        let y = SegMap::new(3, 3, vec![0, 1, 0, 1, 1, 0, 0, 0, 1], pal(3)).unwrap();
        let q = BTreeSet::from([2u8]);
        assert_eq!(build_roi_mask(&y, &y, &q).unwrap().count(), 0);
    }

    #[test]
    fn single_pixel_dilates_to_7x7_block() {
        let mut y = SegMap::filled(20, 20, 0, pal(2)).unwrap();
        y.set(10, 10, 1).unwrap();
        let m = build_roi_mask(&y, &y, &BTreeSet::from([1u8])).unwrap();
        assert_eq!(m.count(), 49);
        assert!(m.get(7, 7) && m.get(13, 13) && !m.get(6, 10) && !m.get(10, 14));

        let mut corner = SegMap::filled(20, 20, 0, pal(2)).unwrap();
        corner.set(0, 1, 1).unwrap();
        let m = build_roi_mask(&corner, &corner, &BTreeSet::from([1u8])).unwrap();
        assert_eq!(m.count(), 4 * 5);
    }

    #[test]
    fn mask_errors() {
        let a = SegMap::filled(2, 2, 0, pal(2)).unwrap();
        let b = SegMap::filled(2, 3, 0, pal(2)).unwrap();
        assert!(build_roi_mask(&a, &b, &BTreeSet::from([0])).is_err());
        assert!(build_roi_mask(&a, &a, &BTreeSet::new()).is_err());
    }

    fn arb_map(h: usize, w: usize, k: usize) -> impl Strategy<Value = SegMap> {
        proptest::collection::vec(0..k as u8, h * w)
            .prop_map(move |l| SegMap::new(h, w, l, pal(k)).unwrap())
    }

    proptest! {
        #[test]
        fn rle_round_trips(m in arb_map(7, 5, 4)) {
            let back = SegMap::from_rle(7, 5, &m.to_rle(), pal(4)).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn enlarging_q_edit_never_shrinks_mask(
            y in arb_map(9, 9, 5),
            ye in arb_map(9, 9, 5),
            q in proptest::collection::btree_set(0u8..5, 1..3),
            extra in 0u8..5,
        ) {
            let small = build_roi_mask(&y, &ye, &q).unwrap();
            let mut bigger = q.clone();
            bigger.insert(extra);
            let big = build_roi_mask(&y, &ye, &bigger).unwrap();
            prop_assert!(big.contains(&small));
        }

        #[test]
        fn dilation_only_adds(bits in proptest::collection::vec(any::<bool>(), 36)) {
            let m = RoiMask::new(6, 6, bits).unwrap();
            prop_assert!(m.dilate(3).contains(&m));
        }
    }
}
