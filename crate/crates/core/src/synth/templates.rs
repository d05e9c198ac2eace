//! Interaction templates: pose sampling and the region pair each one closes.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::body::so3::rotation_between;
use crate::body::BodyParams;
use crate::taxonomy::{BodyPart, PartName, Side};

pub const TEMPLATES: [&str; 5] = ["handshake", "hug", "high-five", "pat-on-back", "random-contact"];

const L_HIP: usize = 0;
const R_HIP: usize = 1;
const L_KNEE: usize = 3;
const R_KNEE: usize = 4;
const L_SHOULDER: usize = 15;
const R_SHOULDER: usize = 16;
const L_ELBOW: usize = 17;
const R_ELBOW: usize = 18;

/// Two posed people before contact closure, plus the parts to bring together.
#[derive(Clone, Debug)]
pub struct TemplateDraw {
    pub params: [BodyParams; 2],
    pub closure: (BodyPart, BodyPart),
    /// Parts of each person allowed to press slightly into each other while closing.
    pub slack: (Vec<BodyPart>, Vec<BodyPart>),
}

fn jitter(rng: &mut ChaCha8Rng, v: Vector3<f64>, s: f64) -> Vector3<f64> {
    let n = Normal::new(0.0, s).unwrap();
    (v + Vector3::from_fn(|_, _| n.sample(rng))).normalize()
}

/// Points one arm along `dir` (body frame: +x left, +y down, -z forward)
/// and bends the elbow by `bend` radians.
fn set_arm(p: &mut BodyParams, side: Side, dir: Vector3<f64>, bend: f64) {
    match side {
        Side::Left => {
            p.theta[L_SHOULDER] = rotation_between(&Vector3::x(), &dir);
            p.theta[L_ELBOW] = Vector3::new(0.0, bend, 0.0);
        }
        _ => {
            p.theta[R_SHOULDER] = rotation_between(&-Vector3::x(), &dir);
            p.theta[R_ELBOW] = Vector3::new(0.0, -bend, 0.0);
        }
    }
}

fn relaxed_arm(rng: &mut ChaCha8Rng, p: &mut BodyParams, side: Side) {
    let x = if side == Side::Left { 0.25 } else { -0.25 };
    set_arm(p, side, jitter(rng, Vector3::new(x, 1.0, -0.1), 0.15), rng.random_range(0.0..0.5));
}

fn base_person(rng: &mut ChaCha8Rng, yaw: f64, noise: f64) -> BodyParams {
    let n = Normal::new(0.0, noise).unwrap();
    let mut p = BodyParams::default();
    for t in &mut p.theta {
        *t = Vector3::from_fn(|_, _| n.sample(rng));
    }
    let shape = Normal::new(0.0, 0.3).unwrap();
    for b in &mut p.beta {
        *b = shape.sample(rng);
    }
    for knee in [L_KNEE, R_KNEE] {
        p.theta[knee].x += rng.random_range(0.0..0.3);
    }
    for hip in [L_HIP, R_HIP] {
        p.theta[hip].x -= rng.random_range(0.0..0.15);
    }
    p.phi = Vector3::new(n.sample(rng), yaw + n.sample(rng) * 2.0, n.sample(rng));
    p
}

fn part(name: PartName, side: Side) -> BodyPart {
    BodyPart::new(name, side)
}

/// Samples poses for `template`; `None` for an unknown name.
pub fn draw(template: &str, rng: &mut ChaCha8Rng, noise: f64) -> Option<TemplateDraw> {
    let (a, b, closure, extra) = match template {
        "handshake" => {
            let mut a = base_person(rng, -1.0, noise);
            let mut b = base_person(rng, 1.0, noise);
            for (p, _) in [(&mut a, 0), (&mut b, 1)] {
                relaxed_arm(rng, p, Side::Left);
                set_arm(p, Side::Right, jitter(rng, Vector3::new(0.2, 0.6, -0.8), 0.1), rng.random_range(0.2..0.6));
            }
            (a, b, (part(PartName::Hand, Side::Right), part(PartName::Hand, Side::Right)), vec![])
        }
        "high-five" => {
            let mut a = base_person(rng, -1.3, noise);
            let mut b = base_person(rng, 1.3, noise);
            relaxed_arm(rng, &mut a, Side::Left);
            relaxed_arm(rng, &mut b, Side::Right);
            set_arm(&mut a, Side::Right, jitter(rng, Vector3::new(0.0, -0.5, -0.85), 0.1), rng.random_range(0.2..0.7));
            set_arm(&mut b, Side::Left, jitter(rng, Vector3::new(0.0, -0.5, -0.85), 0.1), rng.random_range(0.2..0.7));
            (a, b, (part(PartName::Hand, Side::Right), part(PartName::Hand, Side::Left)), vec![])
        }
        "hug" => {
            // Side-by-side embrace: a's arm across b's upper back, b's arm around a's waist.
            let mut a = base_person(rng, -0.25, noise);
            let mut b = base_person(rng, -0.2, noise);
            relaxed_arm(rng, &mut a, Side::Right);
            relaxed_arm(rng, &mut b, Side::Left);
            set_arm(&mut a, Side::Left, jitter(rng, Vector3::new(1.0, 0.2, 0.4), 0.08), rng.random_range(0.0..0.3));
            set_arm(&mut b, Side::Right, jitter(rng, Vector3::new(-0.1, 0.75, -0.65), 0.08), rng.random_range(0.0..0.4));
            (a, b, (part(PartName::Forearm, Side::Left), part(PartName::Back, Side::None)), vec![part(PartName::UpperArm, Side::Left), part(PartName::Hand, Side::Left)])
        }
        "pat-on-back" => {
            let mut a = base_person(rng, -0.3, noise);
            let mut b = base_person(rng, 0.1, noise);
            relaxed_arm(rng, &mut a, Side::Right);
            relaxed_arm(rng, &mut b, Side::Left);
            set_arm(&mut b, Side::Right, jitter(rng, Vector3::new(-0.1, 0.75, -0.65), 0.08), rng.random_range(0.0..0.4));
            set_arm(&mut a, Side::Left, jitter(rng, Vector3::new(1.0, 0.15, 0.45), 0.08), rng.random_range(0.0..0.3));
            (a, b, (part(PartName::Hand, Side::Left), part(PartName::Back, Side::None)), vec![part(PartName::Forearm, Side::Left)])
        }
        "random-contact" => {
            let (ya, yb) = (rng.random_range(-1.5..-1.0), rng.random_range(1.0..1.5));
            let mut a = base_person(rng, ya, noise);
            let mut b = base_person(rng, yb, noise);
            let hand_side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
            let sx = if hand_side == Side::Left { 1.0 } else { -1.0 };
            relaxed_arm(rng, &mut a, hand_side.flipped());
            relaxed_arm(rng, &mut b, Side::Left);
            relaxed_arm(rng, &mut b, Side::Right);
            let dir = Vector3::new(-0.2 * sx, rng.random_range(-0.3..0.5), -0.9);
            set_arm(&mut a, hand_side, jitter(rng, dir, 0.15), rng.random_range(0.1..0.8));
            const TARGETS: [(PartName, bool); 7] = [
                (PartName::Hand, true),
                (PartName::Forearm, true),
                (PartName::UpperArm, true),
                (PartName::Shoulder, true),
                (PartName::Chest, false),
                (PartName::Stomach, false),
                (PartName::Head, false),
            ];
            let (name, lateral) = TARGETS[rng.random_range(0..TARGETS.len())];
            let side = if !lateral {
                Side::None
            } else if rng.random_bool(0.5) {
                Side::Left
            } else {
                Side::Right
            };
            (a, b, (part(PartName::Hand, hand_side), part(name, side)), vec![])
        }
        _ => return None,
    };
    let mut slack_a = vec![closure.0];
    slack_a.extend(extra);
    Some(TemplateDraw { params: [a, b], closure, slack: (slack_a, vec![closure.1]) })
}
