use std::f64::consts::TAU;

use crate::error::{Error, Result};

/// Largest landmark count over all categories; also the size of the shared
/// slot table used by fixed-head baselines.
pub const MAX_LANDMARKS: usize = 39;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Upper,
    Lower,
    Full,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Upper => "upper",
            Region::Lower => "lower",
            Region::Full => "full",
        }
    }
}

/// One garment category: a closed star-shaped outline whose vertices are the
/// landmarks.
#[derive(Clone, Debug)]
pub struct Category {
    pub id: usize,
    pub name: &'static str,
    pub region: Region,
    /// Landmark positions in the unit square, one per landmark, in outline
    /// order.
    pub template: Vec<(f64, f64)>,
    /// Closed outline as index pairs into `template`.
    pub edges: Vec<(usize, usize)>,
    /// Cross-category slot id (angular sector) per landmark, each unique
    /// within the category and `< MAX_LANDMARKS`. Landmarks at the same slot
    /// in different categories sit at the same position around the garment.
    pub slots: Vec<usize>,
}

impl Category {
    pub fn landmark_count(&self) -> usize {
        self.template.len()
    }
}

/// name, region, landmark count, base radius, two radial harmonics
/// (amplitude, frequency, phase), and a global angle offset.
struct Blueprint {
    name: &'static str,
    region: Region,
    landmarks: usize,
    base: f64,
    harmonics: [(f64, f64, f64); 2],
    offset: f64,
}

const BLUEPRINTS: [Blueprint; 13] = [
    Blueprint { name: "short-sleeve-top", region: Region::Upper, landmarks: 25, base: 0.28, harmonics: [(0.05, 2.0, 0.4), (0.03, 5.0, 1.1)], offset: 0.20 },
    Blueprint { name: "long-sleeve-top", region: Region::Upper, landmarks: 33, base: 0.27, harmonics: [(0.06, 2.0, 1.0), (0.03, 3.0, 0.3)], offset: 0.45 },
    Blueprint { name: "short-sleeve-outwear", region: Region::Upper, landmarks: 31, base: 0.29, harmonics: [(0.04, 3.0, 0.7), (0.03, 4.0, 2.1)], offset: 0.10 },
    Blueprint { name: "long-sleeve-outwear", region: Region::Upper, landmarks: 39, base: 0.30, harmonics: [(0.04, 2.0, 2.2), (0.02, 5.0, 0.8)], offset: 0.33 },
    Blueprint { name: "vest", region: Region::Upper, landmarks: 15, base: 0.25, harmonics: [(0.07, 2.0, 0.0), (0.03, 4.0, 1.7)], offset: 0.55 },
    Blueprint { name: "sling", region: Region::Upper, landmarks: 16, base: 0.24, harmonics: [(0.06, 3.0, 1.5), (0.04, 2.0, 0.6)], offset: 0.05 },
    Blueprint { name: "shorts", region: Region::Lower, landmarks: 10, base: 0.26, harmonics: [(0.07, 2.0, 0.9), (0.03, 3.0, 2.5)], offset: 0.40 },
    Blueprint { name: "trousers", region: Region::Lower, landmarks: 14, base: 0.28, harmonics: [(0.06, 1.0, 0.2), (0.02, 3.0, 1.2)], offset: 0.15 },
    Blueprint { name: "skirt", region: Region::Lower, landmarks: 8, base: 0.27, harmonics: [(0.08, 2.0, 1.8), (0.01, 4.0, 0.9)], offset: 0.50 },
    Blueprint { name: "short-sleeve-dress", region: Region::Full, landmarks: 29, base: 0.30, harmonics: [(0.04, 1.0, 0.6), (0.02, 4.0, 1.4)], offset: 0.25 },
    Blueprint { name: "long-sleeve-dress", region: Region::Full, landmarks: 37, base: 0.31, harmonics: [(0.03, 2.0, 1.3), (0.02, 6.0, 0.2)], offset: 0.60 },
    Blueprint { name: "vest-dress", region: Region::Full, landmarks: 19, base: 0.29, harmonics: [(0.05, 1.0, 2.0), (0.02, 2.0, 1.9)], offset: 0.35 },
    Blueprint { name: "sling-dress", region: Region::Full, landmarks: 21, base: 0.28, harmonics: [(0.05, 3.0, 0.5), (0.03, 5.0, 2.3)], offset: 0.12 },
];

fn build(id: usize, bp: &Blueprint) -> Category {
    let n = bp.landmarks;
    let mut template = Vec::with_capacity(n);
    let mut slots = Vec::with_capacity(n);
    for i in 0..n {
        let angle = bp.offset + TAU * i as f64 / n as f64;
        let mut radius = bp.base;
        for (amp, freq, phase) in bp.harmonics {
            radius += amp * (freq * angle + phase).cos();
        }
        template.push((0.5 + radius * angle.cos(), 0.5 + radius * angle.sin()));
        let turn = (angle % TAU) / TAU;
        slots.push(((turn * MAX_LANDMARKS as f64) as usize).min(MAX_LANDMARKS - 1));
    }
    let edges = (0..n).map(|i| (i, (i + 1) % n)).collect();
    Category {
        id,
        name: bp.name,
        region: bp.region,
        template,
        edges,
        slots,
    }
}

/// The fixed set of 13 garment categories.
#[derive(Clone, Debug)]
pub struct Registry {
    categories: Vec<Category>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::standard()
    }
}

impl Registry {
    pub fn standard() -> Registry {
        Registry {
            categories: BLUEPRINTS
                .iter()
                .enumerate()
                .map(|(id, bp)| build(id, bp))
                .collect(),
        }
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&Category> {
        self.categories
            .get(id)
            .ok_or_else(|| Error::data(format!("unknown category id {id}")))
    }

    pub fn by_name(&self, name: &str) -> Result<&Category> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::data(format!("unknown category name {name:?}")))
    }

    pub fn ids_in_region(&self, region: Region) -> Vec<usize> {
        self.categories
            .iter()
            .filter(|c| c.region == region)
            .map(|c| c.id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn thirteen_categories_with_expected_counts() {
        let reg = Registry::standard();
        assert_eq!(reg.len(), 13);
        let counts: Vec<usize> = reg.categories().iter().map(|c| c.landmark_count()).collect();
        assert_eq!(*counts.iter().min().unwrap(), 8);
        assert_eq!(*counts.iter().max().unwrap(), MAX_LANDMARKS);
        let distinct: HashSet<usize> = counts.iter().copied().collect();
        assert_eq!(distinct.len(), 13, "landmark counts are pairwise distinct");
    }

    #[test]
    fn at_least_three_per_region() {
        let reg = Registry::standard();
        for region in [Region::Upper, Region::Lower, Region::Full] {
            assert!(reg.ids_in_region(region).len() >= 3, "{region:?}");
        }
        assert_eq!(reg.ids_in_region(Region::Upper).len(), 6);
        assert_eq!(reg.ids_in_region(Region::Lower).len(), 3);
        assert_eq!(reg.ids_in_region(Region::Full).len(), 4);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Registry::standard();
        let b = Registry::standard();
        for (ca, cb) in a.categories().iter().zip(b.categories()) {
            assert_eq!(ca.template, cb.template);
            assert_eq!(ca.slots, cb.slots);
        }
    }

    #[test]
    fn landmarks_are_distinct_points_inside_the_unit_square() {
        let reg = Registry::standard();
        for cat in reg.categories() {
            for (i, &(x, y)) in cat.template.iter().enumerate() {
                assert!(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0, "{} lm {i}", cat.name);
                for &(x2, y2) in &cat.template[i + 1..] {
                    let d2 = (x - x2) * (x - x2) + (y - y2) * (y - y2);
                    assert!(d2 > 1e-8, "{}: coincident landmarks", cat.name);
                }
            }
        }
    }

    #[test]
    fn slots_are_unique_and_in_range() {
        let reg = Registry::standard();
        for cat in reg.categories() {
            let set: HashSet<usize> = cat.slots.iter().copied().collect();
            assert_eq!(set.len(), cat.landmark_count(), "{}", cat.name);
            assert!(cat.slots.iter().all(|&s| s < MAX_LANDMARKS), "{}", cat.name);
        }
        // The largest category occupies every slot.
        let big = reg.by_name("long-sleeve-outwear").unwrap();
        let set: HashSet<usize> = big.slots.iter().copied().collect();
        assert_eq!(set.len(), MAX_LANDMARKS);
    }

    #[test]
    fn outline_is_a_single_closed_ring() {
        let reg = Registry::standard();
        for cat in reg.categories() {
            assert_eq!(cat.edges.len(), cat.landmark_count());
            let mut seen_from = HashSet::new();
            for &(a, b) in &cat.edges {
                assert!(a < cat.landmark_count() && b < cat.landmark_count());
                assert!(seen_from.insert(a), "{}: vertex {a} leaves twice", cat.name);
            }
        }
    }

    #[test]
    fn lookup_by_name_and_id_agree() {
        let reg = Registry::standard();
        let c = reg.by_name("skirt").unwrap();
        assert_eq!(reg.get(c.id).unwrap().name, "skirt");
        assert!(reg.get(99).is_err());
        assert!(reg.by_name("cape").is_err());
    }
}
