//! Multi-scale crop geometry.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{BoundingBox, ImagePayload, ImageRef, SimRegion};

#[derive(Debug, Clone, PartialEq)]
pub enum CropError {
    InvalidScale(f64),
    Degenerate(BoundingBox),
    OutOfBounds(BoundingBox),
    /// Encoded payloads are cropped by the pixel backend, not here.
    EncodedPayload,
}

impl fmt::Display for CropError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CropError::InvalidScale(s) => write!(f, "crop scale must be positive, got {s}"),
            CropError::Degenerate(b) => write!(f, "crop {b:?} has zero area after clamping"),
            CropError::OutOfBounds(b) => write!(f, "crop {b:?} lies outside the image"),
            CropError::EncodedPayload => f.write_str("encoded payload needs a pixel decoder"),
        }
    }
}

impl core::error::Error for CropError {}

/// Expands `bbox` about its center by `scale` in each dimension and clamps to the image.
///
/// Low edges round down and high edges round up, so any `scale >= 1` result
/// contains the original box; `scale == 1.0` is exactly the identity.
pub fn expand_crop(bbox: BoundingBox, scale: f64, dims: (u32, u32)) -> Result<BoundingBox, CropError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CropError::InvalidScale(scale));
    }
    let (width, height) = dims;
    let axis = |lo: u32, hi: u32, limit: u32| -> (u32, u32) {
        let center = (f64::from(lo) + f64::from(hi)) / 2.0;
        let half = (f64::from(hi) - f64::from(lo)) * scale / 2.0;
        let a = libm::floor(center - half).max(0.0);
        let b = libm::ceil(center + half).min(f64::from(limit));
        (a as u32, b.max(0.0) as u32)
    };
    let (x0, x1) = axis(bbox.x0, bbox.x1, width);
    let (y0, y1) = axis(bbox.y0, bbox.y1, height);
    let out = BoundingBox::new(x0, y0, x1, y1);
    if out.is_empty() {
        return Err(CropError::Degenerate(out));
    }
    Ok(out)
}

/// Crops a simulated image: regions are intersected with the box and
/// translated into crop coordinates.
pub fn crop_sim(image: &ImageRef, bbox: BoundingBox) -> Result<ImageRef, CropError> {
    if !bbox.fits(image.width, image.height) {
        return Err(CropError::OutOfBounds(bbox));
    }
    let ImagePayload::Sim { regions } = &image.payload else {
        return Err(CropError::EncodedPayload);
    };
    let clipped: Vec<SimRegion> = regions
        .iter()
        .filter_map(|r| {
            r.region.intersect(&bbox).map(|i| SimRegion {
                descriptor: r.descriptor.clone(),
                region: BoundingBox::new(i.x0 - bbox.x0, i.y0 - bbox.y0, i.x1 - bbox.x0, i.y1 - bbox.y0),
            })
        })
        .collect();
    Ok(ImageRef {
        id: format!("{}@{},{},{},{}", image.id, bbox.x0, bbox.y0, bbox.x1, bbox.y1),
        width: bbox.width(),
        height: bbox.height(),
        payload: ImagePayload::Sim { regions: clipped },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn center_expansion() {
        let b = expand_crop(BoundingBox::new(10, 10, 20, 20), 2.0, (100, 100)).unwrap();
        assert_eq!(b, BoundingBox::new(5, 5, 25, 25));
    }

    #[test]
    fn clamps_at_origin() {
        let b = expand_crop(BoundingBox::new(0, 0, 10, 10), 3.0, (100, 100)).unwrap();
        assert_eq!(b, BoundingBox::new(0, 0, 20, 20));
    }

    #[test]
    fn unit_scale_is_identity() {
        let b = BoundingBox::new(3, 7, 41, 58);
        assert_eq!(expand_crop(b, 1.0, (100, 100)).unwrap(), b);
    }

    #[test]
    fn rejects_bad_scale_and_outside_box() {
        assert!(matches!(
            expand_crop(BoundingBox::new(0, 0, 1, 1), 0.0, (10, 10)),
            Err(CropError::InvalidScale(_))
        ));
        assert!(matches!(
            expand_crop(BoundingBox::new(20, 20, 30, 30), 1.0, (10, 10)),
            Err(CropError::Degenerate(_))
        ));
    }

    #[test]
    fn sim_crop_clips_regions() {
        let image = ImageRef {
            id: "img".into(),
            width: 100,
            height: 100,
            payload: ImagePayload::Sim {
                regions: vec![
                    SimRegion { descriptor: "a".into(), region: BoundingBox::new(0, 0, 30, 30) },
                    SimRegion { descriptor: "b".into(), region: BoundingBox::new(60, 60, 90, 90) },
                ],
            },
        };
        let c = crop_sim(&image, BoundingBox::new(20, 20, 50, 50)).unwrap();
        assert_eq!((c.width, c.height), (30, 30));
        let regions = c.sim_regions().unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].region, BoundingBox::new(0, 0, 10, 10));
    }
}
