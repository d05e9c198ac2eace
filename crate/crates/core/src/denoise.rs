//! Laterality correction of annotated contacts.
//!
//! Vision-language annotators often confuse the image frame with the body
//! frame when naming sides. Keypoint detectors do not, so each contact's side
//! assignment is re-chosen among the combinations that keep its
//! same-side/opposite-side pattern, picking the one whose 2D keypoints are
//! closest.

use serde::{Deserialize, Serialize};

use crate::ask::{ContactEntry, InteractionAnnotation};
use crate::keypoints::Keypoints2D;
use crate::taxonomy::{BodyPart, PartMap};

/// A contact entry after laterality correction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoisedContact {
    pub part_left: BodyPart,
    pub part_right: BodyPart,
    pub confidence: f64,
    /// `exp(-d)` of the selected combination's normalized keypoint distance.
    pub proximity_weight: f64,
    pub swapped: bool,
}

/// Normalized keypoint distance between two parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartDistance {
    Known(f64),
    /// One of the parts has no valid keypoint.
    Unknown,
}

/// Keypoint evidence for one candidate pair.
#[derive(Clone, Copy, Debug)]
pub struct KeypointEvidence<'a> {
    pub kps_a: &'a Keypoints2D,
    pub kps_b: &'a Keypoints2D,
    pub part_keypoints: &'a PartMap,
    /// Distance normalizer in pixels, usually the mean bbox diagonal.
    pub scale: f64,
    pub conf_min: f64,
}

/// Minimum pixel distance between the valid keypoints of `part_a` (person a)
/// and `part_b` (person b), divided by the evidence scale.
pub fn part_keypoint_distance(ev: &KeypointEvidence<'_>, part_a: BodyPart, part_b: BodyPart) -> PartDistance {
    let (Ok(ids_a), Ok(ids_b)) = (ev.part_keypoints.lookup(part_a), ev.part_keypoints.lookup(part_b)) else {
        return PartDistance::Unknown;
    };
    if !(ev.scale > 0.0) {
        return PartDistance::Unknown;
    }
    let mut best = f64::INFINITY;
    for &i in &ids_a {
        if !ev.kps_a.is_valid(i, ev.conf_min) {
            continue;
        }
        for &j in &ids_b {
            if !ev.kps_b.is_valid(j, ev.conf_min) {
                continue;
            }
            best = best.min((ev.kps_a.points[i].pos() - ev.kps_b.points[j].pos()).norm());
        }
    }
    if best.is_finite() {
        PartDistance::Known(best / ev.scale)
    } else {
        PartDistance::Unknown
    }
}

/// Side combinations consistent with the entry's pattern, the prediction first.
pub fn candidate_combinations(part_a: BodyPart, part_b: BodyPart) -> Vec<(BodyPart, BodyPart)> {
    let mut out = vec![(part_a, part_b)];
    match (part_a.is_lateral(), part_b.is_lateral()) {
        (true, true) => out.push((part_a.flipped(), part_b.flipped())),
        (true, false) => out.push((part_a.flipped(), part_b)),
        (false, true) => out.push((part_a, part_b.flipped())),
        (false, false) => {}
    }
    out
}

pub fn denoise_chirality(entry: &ContactEntry, ev: &KeypointEvidence<'_>) -> DenoisedContact {
    let candidates = candidate_combinations(entry.part_left, entry.part_right);
    let distances: Vec<PartDistance> = candidates.iter().map(|&(a, b)| part_keypoint_distance(ev, a, b)).collect();

    let mut chosen = 0;
    if distances.iter().all(|d| matches!(d, PartDistance::Known(_))) {
        let known = |i: usize| match distances[i] {
            PartDistance::Known(d) => d,
            PartDistance::Unknown => f64::INFINITY,
        };
        for i in 1..candidates.len() {
            // Strict comparison keeps the prediction on ties.
            if known(i) < known(chosen) {
                chosen = i;
            }
        }
    }
    let proximity_weight = match distances[chosen] {
        PartDistance::Known(d) => (-d).exp(),
        PartDistance::Unknown => 1.0,
    };
    let (part_left, part_right) = candidates[chosen];
    DenoisedContact {
        part_left,
        part_right,
        confidence: entry.confidence,
        proximity_weight,
        swapped: chosen != 0,
    }
}

/// Corrects every entry, keeping order and merging entries that become
/// identical (the higher confidence wins).
pub fn denoise_annotation(ann: &InteractionAnnotation, ev: &KeypointEvidence<'_>) -> Vec<DenoisedContact> {
    let mut out: Vec<DenoisedContact> = Vec::with_capacity(ann.contacts.len());
    for entry in &ann.contacts {
        let d = denoise_chirality(entry, ev);
        match out.iter_mut().find(|o| o.part_left == d.part_left && o.part_right == d.part_right) {
            Some(existing) => {
                if d.confidence > existing.confidence {
                    *existing = d;
                }
            }
            None => out.push(d),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::default_asset;
    use crate::keypoints::Keypoint2D;
    use crate::taxonomy::{PartName, Side};
    use proptest::prelude::*;

    fn hand(side: Side) -> BodyPart {
        BodyPart::new(PartName::Hand, side)
    }

    fn blank() -> Keypoints2D {
        Keypoints2D::new(vec![Keypoint2D::new(0.0, 0.0, 0.0); 17])
    }

    fn set(k: &mut Keypoints2D, name: &str, x: f64, y: f64) {
        let i = default_asset().keypoint_index(name).unwrap();
        k.points[i] = Keypoint2D::new(x, y, 1.0);
    }

    fn ev<'a>(a: &'a Keypoints2D, b: &'a Keypoints2D, scale: f64) -> KeypointEvidence<'a> {
        KeypointEvidence { kps_a: a, kps_b: b, part_keypoints: &default_asset().part_keypoints, scale, conf_min: 0.3 }
    }

    #[test]
    fn coincident_keypoints_zero_distance() {
        let (mut a, mut b) = (blank(), blank());
        set(&mut a, "left_wrist", 50.0, 60.0);
        set(&mut b, "left_wrist", 50.0, 60.0);
        assert_eq!(part_keypoint_distance(&ev(&a, &b, 100.0), hand(Side::Left), hand(Side::Left)), PartDistance::Known(0.0));
    }

    #[test]
    fn distance_is_normalized() {
        let (mut a, mut b) = (blank(), blank());
        set(&mut a, "left_wrist", 100.0, 100.0);
        set(&mut b, "right_wrist", 160.0, 180.0);
        let d = part_keypoint_distance(&ev(&a, &b, 100.0), hand(Side::Left), hand(Side::Right));
        assert_eq!(d, PartDistance::Known(1.0));
    }

    #[test]
    fn low_confidence_part_is_unknown() {
        let (mut a, mut b) = (blank(), blank());
        set(&mut b, "left_wrist", 1.0, 1.0);
        let i = default_asset().keypoint_index("left_wrist").unwrap();
        a.points[i] = Keypoint2D::new(1.0, 1.0, 0.1);
        assert_eq!(part_keypoint_distance(&ev(&a, &b, 100.0), hand(Side::Left), hand(Side::Left)), PartDistance::Unknown);
    }

    fn crossed_hands() -> (Keypoints2D, Keypoints2D) {
        let (mut a, mut b) = (blank(), blank());
        set(&mut a, "left_wrist", 0.0, 0.0);
        set(&mut a, "right_wrist", 100.0, 0.0);
        set(&mut b, "left_wrist", 110.0, 0.0);
        set(&mut b, "right_wrist", 300.0, 0.0);
        (a, b)
    }

    #[test]
    fn opposite_pattern_is_swapped_when_keypoints_disagree() {
        let (a, b) = crossed_hands();
        // Brute force over the two combinations: (L, R) at 300 px, (R, L) at 10 px.
        let entry = ContactEntry { part_left: hand(Side::Left), part_right: hand(Side::Right), confidence: 0.8 };
        let out = denoise_chirality(&entry, &ev(&a, &b, 100.0));
        assert!(out.swapped);
        assert_eq!((out.part_left, out.part_right), (hand(Side::Right), hand(Side::Left)));
        assert!((out.proximity_weight - (-0.1f64).exp()).abs() < 1e-12);
        assert_eq!(out.confidence, 0.8);
    }

    #[test]
    fn minimal_prediction_unchanged() {
        let (a, b) = crossed_hands();
        let entry = ContactEntry { part_left: hand(Side::Right), part_right: hand(Side::Left), confidence: 0.5 };
        let out = denoise_chirality(&entry, &ev(&a, &b, 100.0));
        assert!(!out.swapped);
        assert_eq!(out.part_left, hand(Side::Right));
    }

    #[test]
    fn midline_entries_have_one_candidate() {
        let head = BodyPart::new(PartName::Head, Side::None);
        let back = BodyPart::new(PartName::Back, Side::None);
        assert_eq!(candidate_combinations(head, back).len(), 1);
        let (a, b) = crossed_hands();
        let out = denoise_chirality(&ContactEntry { part_left: head, part_right: back, confidence: 0.9 }, &ev(&a, &b, 100.0));
        assert!(!out.swapped);
        assert_eq!(out.proximity_weight, 1.0);
    }

    #[test]
    fn ties_keep_prediction() {
        let (mut a, mut b) = (blank(), blank());
        set(&mut a, "left_wrist", 0.0, 0.0);
        set(&mut a, "right_wrist", 10.0, 0.0);
        set(&mut b, "left_wrist", 0.0, 20.0);
        set(&mut b, "right_wrist", 10.0, 20.0);
        let entry = ContactEntry { part_left: hand(Side::Left), part_right: hand(Side::Left), confidence: 0.5 };
        assert!(!denoise_chirality(&entry, &ev(&a, &b, 100.0)).swapped);
    }

    #[test]
    fn annotation_dedup_keeps_max_confidence() {
        let (a, b) = crossed_hands();
        let ann = InteractionAnnotation {
            contacts: vec![
                ContactEntry { part_left: hand(Side::Left), part_right: hand(Side::Right), confidence: 0.6 },
                ContactEntry { part_left: hand(Side::Right), part_right: hand(Side::Left), confidence: 0.9 },
            ],
            ..Default::default()
        };
        let out = denoise_annotation(&ann, &ev(&a, &b, 100.0));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
        assert!(denoise_annotation(&InteractionAnnotation::default(), &ev(&a, &b, 100.0)).is_empty());
    }

    #[test]
    fn mixed_entries_only_lateral_corrected() {
        let (mut a, b) = crossed_hands();
        set(&mut a, "neck", 500.0, 500.0);
        let head = BodyPart::new(PartName::Neck, Side::None);
        let ann = InteractionAnnotation {
            contacts: vec![
                ContactEntry { part_left: head, part_right: hand(Side::Left), confidence: 0.6 },
                ContactEntry { part_left: hand(Side::Left), part_right: hand(Side::Right), confidence: 0.7 },
            ],
            ..Default::default()
        };
        let out = denoise_annotation(&ann, &ev(&a, &b, 100.0));
        assert_eq!(out[0].part_left, head);
        // neck (500,500) vs b.left (110,0) or b.right (300,0): right is closer.
        assert_eq!(out[0].part_right, hand(Side::Right));
        assert!(out[1].swapped);
    }

    fn arb_kps() -> impl Strategy<Value = Keypoints2D> {
        prop::collection::vec((0.0..640.0f64, 0.0..480.0f64, 0.0..1.0f64), 17)
            .prop_map(|v| Keypoints2D::new(v.into_iter().map(|(x, y, c)| Keypoint2D::new(x, y, c)).collect()))
    }

    fn arb_part() -> impl Strategy<Value = BodyPart> {
        (0usize..17, 0usize..4).prop_map(|(p, s)| {
            let side = [Side::Left, Side::Right, Side::Both, Side::None][s];
            BodyPart::new(PartName::ALL[p], side)
        })
    }

    proptest! {
        #[test]
        fn denoising_is_idempotent_and_pattern_preserving(a in arb_kps(), b in arb_kps(), pa in arb_part(), pb in arb_part(), c in 0.0..1.0f64) {
            let e = ev(&a, &b, 150.0);
            let entry = ContactEntry { part_left: pa, part_right: pb, confidence: c };
            let once = denoise_chirality(&entry, &e);
            let again = denoise_chirality(&ContactEntry { part_left: once.part_left, part_right: once.part_right, confidence: c }, &e);
            prop_assert_eq!(again.part_left, once.part_left);
            prop_assert_eq!(again.part_right, once.part_right);
            prop_assert!(!again.swapped);
            let same = |x: BodyPart, y: BodyPart| x.side == y.side;
            prop_assert_eq!(same(pa, pb), same(once.part_left, once.part_right));
            prop_assert!(once.proximity_weight > 0.0 && once.proximity_weight <= 1.0);
        }

        #[test]
        fn mirror_consistency(a in arb_kps(), b in arb_kps(), pa in arb_part(), pb in arb_part()) {
            let asset = default_asset();
            let e = ev(&a, &b, 150.0);
            let ma = a.mirrored(640.0, asset);
            let mb = b.mirrored(640.0, asset);
            let me = ev(&ma, &mb, 150.0);
            let out = denoise_chirality(&ContactEntry { part_left: pa, part_right: pb, confidence: 1.0 }, &e);
            let mout = denoise_chirality(&ContactEntry { part_left: pa.flipped(), part_right: pb.flipped(), confidence: 1.0 }, &me);
            prop_assert_eq!(mout.part_left, out.part_left.flipped());
            prop_assert_eq!(mout.part_right, out.part_right.flipped());
        }
    }
}
