//! Wire encodings: base64 PNG images and segmentation maps as base64
//! single-channel PNG or run-length codes, each with a palette.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use pixguide::dataset::{decode_png_labels, decode_png_rgb, encode_png_labels, encode_png_rgb};
use pixguide::segmap::{Palette, SegMap};
use pixguide::{Error, Result, Tensor};

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_decode(s: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(s.trim())
        .map_err(|e| Error::Format(format!("base64: {e}")))
}

pub fn image_from_b64(s: &str) -> Result<Tensor> {
    decode_png_rgb(&b64_decode(s)?)
}

pub fn image_to_b64(x: &Tensor) -> Result<String> {
    Ok(b64_encode(&encode_png_rgb(x)?))
}

/// A label map on the wire. Exactly one of `png` and `rle` is set; `rle`
/// needs `height` and `width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPayload {
    pub palette: Palette,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl MapPayload {
    pub fn png(y: &SegMap) -> Result<Self> {
        Ok(MapPayload {
            palette: y.palette().clone(),
            png: Some(b64_encode(&encode_png_labels(y)?)),
            rle: None,
            height: None,
            width: None,
        })
    }

    pub fn rle(y: &SegMap) -> Self {
        MapPayload {
            palette: y.palette().clone(),
            png: None,
            rle: Some(y.to_rle()),
            height: Some(y.height()),
            width: Some(y.width()),
        }
    }

    pub fn decode(&self) -> Result<SegMap> {
        match (&self.png, &self.rle) {
            (Some(p), None) => decode_png_labels(&b64_decode(p)?, &self.palette),
            (None, Some(r)) => {
                let (Some(h), Some(w)) = (self.height, self.width) else {
                    return Err(Error::Format("rle map needs height and width".into()));
                };
                SegMap::from_rle(h, w, r, self.palette.clone())
            }
            _ => Err(Error::Format("map needs exactly one of png, rle".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pixguide::scene::{scene_at, SceneSpec};

    #[test]
    fn map_encodings_round_trip() {
        let (x, y) = scene_at(&SceneSpec::default(), 3).unwrap();
        assert_eq!(MapPayload::png(&y).unwrap().decode().unwrap(), y);
        let r = MapPayload::rle(&y);
        let json = serde_json::to_string(&r).unwrap();
        let back: MapPayload = serde_json::from_str(&json).unwrap();
        assert_eq!(back.decode().unwrap(), y);
        let mut both = r.clone();
        both.png = MapPayload::png(&y).unwrap().png;
        assert!(both.decode().is_err());
        let img = image_from_b64(&image_to_b64(&x).unwrap()).unwrap();
        assert!(img.max_abs_diff(&x) < 0.01);
        assert!(b64_decode("%%%").is_err());
    }
}
