//! Body-part vocabulary, part-to-region tables and region contact maps.
//!
//! A contact annotation names coarse body parts ("hand", "upper arm", ...)
//! with a body side. The fitting losses work on fine surface regions, so every
//! part is re-mapped to a set of region ids through a [`PartMap`] shipped with
//! the body asset. Region ids run from `1` to `R`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::DenoisedContact;

/// Contacts below this annotation confidence are ignored when building maps.
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("unknown body part {name:?}; expected one of: {}", PartName::vocabulary())]
    UnknownPart { name: String },
    #[error("unknown body side {side:?}; expected left, right or both")]
    UnknownSide { side: String },
    #[error("no table entry for {0}")]
    MissingEntry(BodyPart),
    #[error("region {region} out of range 1..={count}")]
    RegionOutOfRange { region: usize, count: usize },
}

/// The 17-part vocabulary used in annotation prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartName {
    Hand,
    Arm,
    Leg,
    Thigh,
    Chest,
    Stomach,
    Back,
    Neck,
    Face,
    Head,
    Foot,
    Shoulder,
    Elbow,
    Knee,
    Forearm,
    #[serde(rename = "upper arm")]
    UpperArm,
    Waist,
}

impl PartName {
    pub const ALL: [PartName; 17] = [
        PartName::Hand,
        PartName::Arm,
        PartName::Leg,
        PartName::Thigh,
        PartName::Chest,
        PartName::Stomach,
        PartName::Back,
        PartName::Neck,
        PartName::Face,
        PartName::Head,
        PartName::Foot,
        PartName::Shoulder,
        PartName::Elbow,
        PartName::Knee,
        PartName::Forearm,
        PartName::UpperArm,
        PartName::Waist,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PartName::Hand => "hand",
            PartName::Arm => "arm",
            PartName::Leg => "leg",
            PartName::Thigh => "thigh",
            PartName::Chest => "chest",
            PartName::Stomach => "stomach",
            PartName::Back => "back",
            PartName::Neck => "neck",
            PartName::Face => "face",
            PartName::Head => "head",
            PartName::Foot => "foot",
            PartName::Shoulder => "shoulder",
            PartName::Elbow => "elbow",
            PartName::Knee => "knee",
            PartName::Forearm => "forearm",
            PartName::UpperArm => "upper arm",
            PartName::Waist => "waist",
        }
    }

    /// Parses a part name, case- and whitespace-insensitive.
    pub fn parse(name: &str) -> Result<PartName, TaxonomyError> {
        let canon = name.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
        let canon = canon.replace(['_', '-'], " ");
        PartName::ALL
            .into_iter()
            .find(|p| p.as_str() == canon)
            .ok_or_else(|| TaxonomyError::UnknownPart { name: name.to_string() })
    }

    /// Parts on the body midline carry no side.
    pub fn is_midline(self) -> bool {
        matches!(
            self,
            PartName::Chest
                | PartName::Stomach
                | PartName::Back
                | PartName::Neck
                | PartName::Face
                | PartName::Head
                | PartName::Waist
        )
    }

    /// Comma separated vocabulary, in prompt order.
    pub fn vocabulary() -> String {
        PartName::ALL.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for PartName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Both,
    None,
}

impl Side {
    pub fn parse(side: &str) -> Result<Side, TaxonomyError> {
        match side.trim().to_lowercase().as_str() {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            "both" => Ok(Side::Both),
            "none" | "" | "center" | "middle" => Ok(Side::None),
            _ => Err(TaxonomyError::UnknownSide { side: side.to_string() }),
        }
    }

    pub fn flipped(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            s => s,
        }
    }

    pub fn is_lateral(self) -> bool {
        matches!(self, Side::Left | Side::Right)
    }
}

/// A named body part with its side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BodyPart {
    pub name: PartName,
    pub side: Side,
}

impl BodyPart {
    /// Builds a part, forcing midline parts to `Side::None` and lateral parts
    /// without a side to `Side::Both`.
    pub fn new(name: PartName, side: Side) -> BodyPart {
        let side = match (name.is_midline(), side) {
            (true, _) => Side::None,
            (false, Side::None) => Side::Both,
            (false, s) => s,
        };
        BodyPart { name, side }
    }

    pub fn parse(name: &str, side: &str) -> Result<BodyPart, TaxonomyError> {
        Ok(BodyPart::new(PartName::parse(name)?, Side::parse(side)?))
    }

    /// Laterality can only be corrected on single-sided lateral parts.
    pub fn is_lateral(&self) -> bool {
        self.side.is_lateral()
    }

    pub fn flipped(&self) -> BodyPart {
        BodyPart { name: self.name, side: self.side.flipped() }
    }
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Side::None => write!(f, "{}", self.name),
            s => write!(f, "{}-{}", self.name, format!("{s:?}").to_lowercase()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PartEntry {
    part: PartName,
    side: Side,
    ids: Vec<usize>,
}

/// Map from `(part, side)` to a set of ids (surface regions or keypoints).
///
/// Lookups of `Side::Both` return the union of the left and right entries;
/// midline parts resolve to their `Side::None` entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<PartEntry>", into = "Vec<PartEntry>")]
pub struct PartMap {
    entries: BTreeMap<(PartName, Side), BTreeSet<usize>>,
}

/// Part to region table; ids are region ids `1..=R`.
pub type PartRegionTable = PartMap;

impl From<Vec<PartEntry>> for PartMap {
    fn from(v: Vec<PartEntry>) -> Self {
        let mut map = PartMap::default();
        for e in v {
            map.insert(BodyPart::new(e.part, e.side), e.ids);
        }
        map
    }
}

impl From<PartMap> for Vec<PartEntry> {
    fn from(m: PartMap) -> Self {
        m.entries
            .into_iter()
            .map(|((part, side), ids)| PartEntry { part, side, ids: ids.into_iter().collect() })
            .collect()
    }
}

impl PartMap {
    pub fn insert(&mut self, part: BodyPart, ids: impl IntoIterator<Item = usize>) {
        self.entries.entry((part.name, part.side)).or_default().extend(ids);
    }

    pub fn entries(&self) -> impl Iterator<Item = (BodyPart, &BTreeSet<usize>)> {
        self.entries.iter().map(|(&(name, side), ids)| (BodyPart { name, side }, ids))
    }

    /// Ids of a part, following the side semantics described on the type.
    pub fn lookup(&self, part: BodyPart) -> Result<BTreeSet<usize>, TaxonomyError> {
        let part = BodyPart::new(part.name, part.side);
        let get = |side| self.entries.get(&(part.name, side)).filter(|s| !s.is_empty());
        match part.side {
            Side::Both => {
                let l = get(Side::Left);
                let r = get(Side::Right);
                if l.is_none() && r.is_none() {
                    return Err(TaxonomyError::MissingEntry(part));
                }
                Ok(l.into_iter().chain(r).flatten().copied().collect())
            }
            side => get(side).cloned().ok_or(TaxonomyError::MissingEntry(part)),
        }
    }

    /// All ids referenced by any entry.
    pub fn covered(&self) -> BTreeSet<usize> {
        self.entries.values().flatten().copied().collect()
    }
}

/// Regions covered by a body part.
pub fn regions_of(table: &PartRegionTable, part: BodyPart) -> Result<BTreeSet<usize>, TaxonomyError> {
    table.lookup(part)
}

/// Binary `R x R` region contact matrix. Rows index regions of person a,
/// columns regions of person b.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContactMap {
    regions: usize,
    cells: Vec<bool>,
}

impl ContactMap {
    pub fn zeros(regions: usize) -> Self {
        ContactMap { regions, cells: vec![false; regions * regions] }
    }

    pub fn region_count(&self) -> usize {
        self.regions
    }

    fn index(&self, i: usize, j: usize) -> usize {
        assert!(
            (1..=self.regions).contains(&i) && (1..=self.regions).contains(&j),
            "region id out of range"
        );
        (i - 1) * self.regions + (j - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[self.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        let k = self.index(i, j);
        self.cells[k] = on;
    }

    /// Active cells as `(region_a, region_b)` id pairs in row-major order.
    pub fn active(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = self.regions;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(move |(k, _)| (k / r + 1, k % r + 1))
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn transpose(&self) -> ContactMap {
        let mut t = ContactMap::zeros(self.regions);
        for (i, j) in self.active() {
            t.set(j, i, true);
        }
        t
    }
}

impl Serialize for ContactMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire {
            regions: usize,
            cells: Vec<(usize, usize)>,
        }
        Wire { regions: self.regions, cells: self.active().collect() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ContactMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            regions: usize,
            cells: Vec<(usize, usize)>,
        }
        let w = Wire::deserialize(d)?;
        let mut map = ContactMap::zeros(w.regions);
        for (i, j) in w.cells {
            if i == 0 || j == 0 || i > w.regions || j > w.regions {
                return Err(serde::de::Error::custom(format!("cell ({i}, {j}) out of range")));
            }
            map.set(i, j, true);
        }
        Ok(map)
    }
}

/// Nonnegative per-cell weights scaling the contact loss. Support is always
/// contained in the support of the matching [`ContactMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftWeights {
    regions: usize,
    w: Vec<f64>,
}

impl SoftWeights {
    pub fn zeros(regions: usize) -> Self {
        SoftWeights { regions, w: vec![0.0; regions * regions] }
    }

    /// Weight 1 on every active cell of `c`.
    pub fn uniform(c: &ContactMap) -> Self {
        let mut w = SoftWeights::zeros(c.region_count());
        for (i, j) in c.active() {
            w.set(i, j, 1.0);
        }
        w
    }

    pub fn region_count(&self) -> usize {
        self.regions
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[(i - 1) * self.regions + (j - 1)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.w[(i - 1) * self.regions + (j - 1)] = v;
    }

    pub fn transpose(&self) -> SoftWeights {
        let r = self.regions;
        let mut t = SoftWeights::zeros(r);
        for i in 1..=r {
            for j in 1..=r {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }
}

/// Builds the contact map and soft weights from corrected contact entries.
///
/// Each entry activates the full product of its two region sets. A cell's
/// weight is the maximum of `confidence * proximity_weight` over the entries
/// touching it. Entries below `confidence_floor` are skipped.
pub fn build_contact_map(
    contacts: &[DenoisedContact],
    table: &PartRegionTable,
    regions: usize,
    confidence_floor: f64,
) -> Result<(ContactMap, SoftWeights), TaxonomyError> {
    let mut c = ContactMap::zeros(regions);
    let mut w = SoftWeights::zeros(regions);
    for entry in contacts {
        if entry.confidence < confidence_floor {
            continue;
        }
        let ra = table.lookup(entry.part_left)?;
        let rb = table.lookup(entry.part_right)?;
        let weight = (entry.confidence * entry.proximity_weight).clamp(0.0, 1.0);
        for &i in &ra {
            if i == 0 || i > regions {
                return Err(TaxonomyError::RegionOutOfRange { region: i, count: regions });
            }
            for &j in &rb {
                if j == 0 || j > regions {
                    return Err(TaxonomyError::RegionOutOfRange { region: j, count: regions });
                }
                c.set(i, j, true);
                if weight > w.get(i, j) {
                    w.set(i, j, weight);
                }
            }
        }
    }
    Ok((c, w))
}

/// Exchanges the roles of the two people: both matrices are transposed.
pub fn swap_persons(c: &ContactMap, w: &SoftWeights) -> (ContactMap, SoftWeights) {
    (c.transpose(), w.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn contact(a: BodyPart, b: BodyPart, conf: f64, prox: f64) -> DenoisedContact {
        DenoisedContact { part_left: a, part_right: b, confidence: conf, proximity_weight: prox, swapped: false }
    }

    fn small_table() -> PartMap {
        let mut t = PartMap::default();
        t.insert(BodyPart::new(PartName::Hand, Side::Left), [1, 2]);
        t.insert(BodyPart::new(PartName::Hand, Side::Right), [3, 4]);
        t.insert(BodyPart::new(PartName::Back, Side::None), [5, 6, 7]);
        t.insert(BodyPart::new(PartName::Head, Side::None), [8]);
        t
    }

    #[test]
    fn both_side_is_union() {
        let t = small_table();
        let both = t.lookup(BodyPart::new(PartName::Hand, Side::Both)).unwrap();
        assert_eq!(both, [1, 2, 3, 4].into_iter().collect());
    }

    #[test]
    fn unknown_part_lists_vocabulary() {
        let err = BodyPart::parse("wing", "left").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("wing"));
        assert!(msg.contains("upper arm") && msg.contains("waist"));
    }

    #[test]
    fn part_parsing_is_lenient_on_case_and_space() {
        assert_eq!(PartName::parse(" Upper  Arm ").unwrap(), PartName::UpperArm);
        assert_eq!(PartName::parse("upper_arm").unwrap(), PartName::UpperArm);
        assert_eq!(BodyPart::parse("back", "right").unwrap().side, Side::None);
        assert_eq!(BodyPart::parse("hand", "").unwrap().side, Side::Both);
    }

    #[test]
    fn empty_contacts_give_empty_map() {
        let (c, w) = build_contact_map(&[], &small_table(), 8, 0.3).unwrap();
        assert!(c.is_empty());
        assert!(w.w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_entry_fills_product() {
        let t = small_table();
        let e = contact(BodyPart::new(PartName::Hand, Side::Left), BodyPart::new(PartName::Back, Side::None), 0.7, 1.0);
        let (c, w) = build_contact_map(&[e], &t, 8, 0.3).unwrap();
        assert_eq!(c.count(), 2 * 3);
        for i in 1..=8 {
            for j in 1..=8 {
                let inside = [1, 2].contains(&i) && [5, 6, 7].contains(&j);
                assert_eq!(c.get(i, j), inside);
                assert_eq!(w.get(i, j), if inside { 0.7 } else { 0.0 });
            }
        }
    }

    #[test]
    fn overlapping_entries_take_max() {
        let t = small_table();
        let a = contact(BodyPart::new(PartName::Hand, Side::Left), BodyPart::new(PartName::Head, Side::None), 0.5, 1.0);
        let b = contact(BodyPart::new(PartName::Hand, Side::Both), BodyPart::new(PartName::Head, Side::None), 0.8, 1.0);
        let (_, w) = build_contact_map(&[a, b], &t, 8, 0.3).unwrap();
        assert_eq!(w.get(1, 8), 0.8);
    }

    #[test]
    fn low_confidence_dropped() {
        let t = small_table();
        let e = contact(BodyPart::new(PartName::Hand, Side::Left), BodyPart::new(PartName::Head, Side::None), 0.2, 1.0);
        let (c, _) = build_contact_map(&[e], &t, 8, 0.3).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn swap_transposes() {
        let mut c = ContactMap::zeros(10);
        c.set(3, 7, true);
        let mut w = SoftWeights::zeros(10);
        w.set(3, 7, 0.4);
        let (ct, wt) = swap_persons(&c, &w);
        assert_eq!(ct.active().collect::<Vec<_>>(), vec![(7, 3)]);
        assert_eq!(wt.get(7, 3), 0.4);
        let (cc, ww) = swap_persons(&ct, &wt);
        assert_eq!(cc, c);
        assert_eq!(ww, w);

        let mut sym = ContactMap::zeros(4);
        sym.set(1, 2, true);
        sym.set(2, 1, true);
        assert_eq!(swap_persons(&sym, &SoftWeights::uniform(&sym)).0, sym);
    }

    #[test]
    fn contact_map_json_roundtrip() {
        let mut c = ContactMap::zeros(5);
        c.set(1, 5, true);
        c.set(4, 2, true);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ContactMap>(&s).unwrap(), c);
        assert!(serde_json::from_str::<ContactMap>(r#"{"regions":3,"cells":[[4,1]]}"#).is_err());
    }

    fn arb_entry() -> impl Strategy<Value = DenoisedContact> {
        let part = prop_oneof![
            Just(BodyPart::new(PartName::Hand, Side::Left)),
            Just(BodyPart::new(PartName::Hand, Side::Right)),
            Just(BodyPart::new(PartName::Hand, Side::Both)),
            Just(BodyPart::new(PartName::Back, Side::None)),
            Just(BodyPart::new(PartName::Head, Side::None)),
        ];
        (part.clone(), part, 0.0..1.0f64, 0.01..1.0f64).prop_map(|(a, b, c, p)| contact(a, b, c, p))
    }

    proptest! {
        #[test]
        fn build_is_order_independent(mut entries in prop::collection::vec(arb_entry(), 0..8), seed in any::<u64>()) {
            let t = small_table();
            let (c1, w1) = build_contact_map(&entries, &t, 8, 0.3).unwrap();
            let n = entries.len();
            if n > 1 {
                entries.rotate_left((seed as usize) % n);
                entries.swap(0, n - 1);
            }
            let (c2, w2) = build_contact_map(&entries, &t, 8, 0.3).unwrap();
            prop_assert_eq!(&c1, &c2);
            prop_assert_eq!(&w1, &w2);
            for i in 1..=8 {
                for j in 1..=8 {
                    prop_assert!(w1.get(i, j) == 0.0 || c1.get(i, j));
                }
            }
            let (cs, ws) = swap_persons(&c1, &w1);
            for i in 1..=8 {
                for j in 1..=8 {
                    prop_assert!(ws.get(i, j) == 0.0 || cs.get(i, j));
                }
            }
        }
    }
}
