use std::io::Cursor;

use serde::{Deserialize, Serialize};

use super::{AskError, CandidatePair, PersonDetection};
use crate::body::{forward, model_keypoints, project_point, BodyModelAsset, Camera};
use crate::keypoints::{pair_scale, BBox, DEFAULT_KP_CONF_MIN};

/// All detections of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    pub people: Vec<PersonDetection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub k_min: usize,
    /// Largest normalized keypoint distance for a pair.
    pub d_max: f64,
    pub kp_conf_min: f64,
    /// Largest mean reprojection deviation (px) of an initial estimate.
    pub align_max: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig { k_min: 6, d_max: 0.35, kp_conf_min: DEFAULT_KP_CONF_MIN, align_max: 50.0 }
    }
}

/// Mean pixel distance between an initial estimate's reprojected keypoints and
/// the detected ones. `None` when nothing can be compared.
fn alignment_error(person: &PersonDetection, camera: &Camera, asset: &BodyModelAsset, conf_min: f64) -> Option<f64> {
    let init = person.init.as_ref()?;
    let posed = forward(asset, init);
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, kp) in model_keypoints(&posed, asset).iter().enumerate() {
        if !person.keypoints.is_valid(i, conf_min) {
            continue;
        }
        if let Some(uv) = project_point(camera, &kp.position).valid() {
            sum += (uv - person.keypoints.points[i].pos()).norm();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn min_normalized_distance(a: &PersonDetection, b: &PersonDetection, conf_min: f64) -> Option<f64> {
    let scale = pair_scale(&a.keypoints, &b.keypoints, conf_min)?;
    let mut best = f64::INFINITY;
    for (i, pa) in a.keypoints.points.iter().enumerate() {
        if !a.keypoints.is_valid(i, conf_min) {
            continue;
        }
        for (j, pb) in b.keypoints.points.iter().enumerate() {
            if b.keypoints.is_valid(j, conf_min) {
                best = best.min((pa.pos() - pb.pos()).norm());
            }
        }
    }
    best.is_finite().then(|| best / scale)
}

/// Pairs of people close enough to be touching.
///
/// A pair qualifies when both people have at least `k_min` valid keypoints and
/// their closest valid keypoints are within `d_max` (normalized by the mean
/// bounding-box diagonal). When `asset` is given, people carrying an initial
/// estimate that reprojects further than `align_max` from their keypoints are
/// skipped; this needs the image camera.
pub fn propose_candidates(det: &ImageDetections, cfg: &ProposalConfig, asset: Option<&BodyModelAsset>) -> Vec<CandidatePair> {
    let usable: Vec<&PersonDetection> = det
        .people
        .iter()
        .filter(|p| p.keypoints.valid_count(cfg.kp_conf_min) >= cfg.k_min)
        .filter(|p| match (asset, det.camera.as_ref(), p.init.is_some()) {
            (Some(asset), Some(cam), true) => {
                alignment_error(p, cam, asset, cfg.kp_conf_min).is_some_and(|e| e <= cfg.align_max)
            }
            _ => true,
        })
        .collect();

    let mut out = Vec::new();
    for (i, p) in usable.iter().enumerate() {
        for q in &usable[i + 1..] {
            if p.id == q.id {
                continue;
            }
            let Some(d) = min_normalized_distance(p, q, cfg.kp_conf_min) else { continue };
            if d > cfg.d_max {
                continue;
            }
            let key = |x: &PersonDetection| (x.bbox.center().x, x.id);
            let (a, b) = if key(p).partial_cmp(&key(q)) == Some(std::cmp::Ordering::Greater) { (*q, *p) } else { (*p, *q) };
            out.push(CandidatePair { a: a.id, b: b.id, image: det.image.clone(), bbox: a.bbox.union(&b.bbox), action: det.action.clone() });
        }
    }
    out.sort_by_key(|c| (c.a, c.b));
    out
}

/// Crops encoded image bytes to `bbox` grown by `margin` on every side and
/// re-encodes the crop as PNG.
pub fn crop_image(bytes: &[u8], bbox: &BBox, margin: f64) -> Result<Vec<u8>, AskError> {
    let img = image::load_from_memory(bytes).map_err(|e| AskError::Image(e.to_string()))?;
    let b = bbox.expanded(margin).clamped(img.width() as f64, img.height() as f64);
    let (x, y) = (b.x.floor() as u32, b.y.floor() as u32);
    let w = ((b.x + b.w).ceil() as u32).saturating_sub(x).max(1);
    let h = ((b.y + b.h).ceil() as u32).saturating_sub(y).max(1);
    let crop = img.crop_imm(x, y, w, h);
    let mut out = Cursor::new(Vec::new());
    crop.write_to(&mut out, image::ImageFormat::Png).map_err(|e| AskError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{default_asset, BodyParams};
    use crate::keypoints::{Keypoint2D, Keypoints2D};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    /// A vertical stick figure of 17 keypoints centred at `x`.
    fn person(id: usize, x: f64) -> PersonDetection {
        let points = (0..17).map(|k| Keypoint2D::new(x + (k % 3) as f64 * 10.0 - 10.0, 100.0 + k as f64 * 15.0, 0.9)).collect();
        let keypoints = Keypoints2D::new(points);
        let bbox = keypoints.bbox(0.3).unwrap();
        PersonDetection { id, keypoints, bbox, init: None }
    }

    fn image(people: Vec<PersonDetection>) -> ImageDetections {
        ImageDetections { image: "img.png".into(), camera: None, action: None, people }
    }

    #[test]
    fn single_person() {
        assert!(propose_candidates(&image(vec![person(0, 100.0)]), &ProposalConfig::default(), None).is_empty());
    }

    #[test]
    fn three_people_one_pair() {
        let people = vec![person(7, 500.0), person(3, 100.0), person(5, 140.0)];
        // Brute force: bbox diag = sqrt(20^2 + 240^2) ~ 240.8; the closest
        // keypoints of 3 and 5 are 20 px apart (0.083), the others > 300 px.
        let out = propose_candidates(&image(people), &ProposalConfig::default(), None);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].a, out[0].b), (3, 5));
    }

    #[test]
    fn far_pair_excluded() {
        let people = vec![person(0, 100.0), person(1, 100.0 + 20.0 + 1.5 * 240.83)];
        let cfg = ProposalConfig { d_max: 1.0, ..Default::default() };
        assert!(propose_candidates(&image(people), &cfg, None).is_empty());
    }

    #[test]
    fn left_person_is_a() {
        let out = propose_candidates(&image(vec![person(0, 140.0), person(1, 100.0)]), &ProposalConfig::default(), None);
        assert_eq!((out[0].a, out[0].b), (1, 0));
    }

    #[test]
    fn too_few_keypoints() {
        let mut p = person(1, 130.0);
        for k in 0..12 {
            p.keypoints.points[k].confidence = 0.1;
        }
        assert!(propose_candidates(&image(vec![person(0, 100.0), p]), &ProposalConfig::default(), None).is_empty());
    }

    #[test]
    fn misaligned_initial_estimate_excluded() {
        let asset = default_asset();
        let cam = Camera::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let params = |x: f64| BodyParams { gamma: Vector3::new(x, 0.0, 4.0), ..Default::default() };
        let detect = |id: usize, p: &BodyParams| {
            let posed = forward(asset, p);
            let points = model_keypoints(&posed, asset)
                .iter()
                .map(|k| {
                    let uv = project_point(&cam, &k.position).valid().unwrap();
                    Keypoint2D::new(uv.x, uv.y, 1.0)
                })
                .collect();
            let keypoints = Keypoints2D::new(points);
            let bbox = keypoints.bbox(0.3).unwrap();
            PersonDetection { id, keypoints, bbox, init: Some(p.clone()) }
        };
        let a = detect(0, &params(-0.2));
        let mut b = detect(1, &params(0.2));
        let mut det = ImageDetections { image: "x".into(), camera: Some(cam), action: None, people: vec![a.clone(), b.clone()] };
        assert_eq!(propose_candidates(&det, &ProposalConfig::default(), Some(asset)).len(), 1);
        b.init = Some(params(0.8));
        det.people = vec![a, b];
        assert!(propose_candidates(&det, &ProposalConfig::default(), Some(asset)).is_empty());
        assert_eq!(propose_candidates(&det, &ProposalConfig::default(), None).len(), 1);
    }

    #[test]
    fn crop_margin() {
        let img = image::RgbImage::from_pixel(100, 80, image::Rgb([1, 2, 3]));
        let mut bytes = Cursor::new(Vec::new());
        image::DynamicImage::ImageRgb8(img).write_to(&mut bytes, image::ImageFormat::Png).unwrap();
        let out = crop_image(bytes.get_ref(), &BBox { x: 20.0, y: 20.0, w: 40.0, h: 20.0 }, 0.1).unwrap();
        let crop = image::load_from_memory(&out).unwrap();
        assert_eq!((crop.width(), crop.height()), (48, 24));
        let edge = crop_image(bytes.get_ref(), &BBox { x: 90.0, y: 70.0, w: 40.0, h: 40.0 }, 0.1).unwrap();
        let crop = image::load_from_memory(&edge).unwrap();
        assert_eq!((crop.width(), crop.height()), (14, 14));
    }

    proptest! {
        #[test]
        fn permutation_invariant(xs in prop::collection::vec(0.0..600.0f64, 1..6), seed in any::<u64>()) {
            let people: Vec<PersonDetection> = xs.iter().enumerate().map(|(i, &x)| person(i, x)).collect();
            let base = propose_candidates(&image(people.clone()), &ProposalConfig::default(), None);
            let mut shuffled = people;
            let n = shuffled.len();
            for i in 0..n {
                shuffled.swap(i, (seed as usize).wrapping_add(i * 7) % n);
            }
            let again = propose_candidates(&image(shuffled), &ProposalConfig::default(), None);
            let set = |v: &[CandidatePair]| v.iter().map(|c| (c.a.min(c.b), c.a.max(c.b))).collect::<std::collections::BTreeSet<_>>();
            prop_assert_eq!(set(&base), set(&again));
        }
    }
}
