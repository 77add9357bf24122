//! Ground-truth interaction rules of the synthetic world.
//!
//! With `C` interaction classes the last five ids are reserved:
//!
//! | id      | name  | holds for human `h`, instance `o` when                       |
//! |---------|-------|--------------------------------------------------------------|
//! | `0..C-5`| verb  | `o` active, near `h`; id = `(class(o) - 1) mod (C - 5)`      |
//! | `C-5`   | hold  | engaged and at least `hold_overlap` of `o` lies inside `h`   |
//! | `C-4`   | look  | engaged, not held, and `h` holds some other object          |
//! | `C-3`   | talk  | `o` is another person near `h`                               |
//! | `C-2`   | use   | engaged and a marker cell is in the pair's union-only region |
//! | `C-1`   | share | engaged and another person is engaged with `o`               |
//!
//! "Engaged" means `o` is a non-person, active, and its center lies within
//! `near_dist` of the center of `h`. `look` and `share` are contextual: they
//! depend on other pairs that share the human or the object. `hold` and
//! `use` are keyed on the pair's spatial layout.

use std::collections::BTreeSet;

use super::geometry::BBox;
use super::{GtInteraction, Instance, SceneTruth};
use crate::structure::{layout_map, LayoutLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerbIds {
    pub object_verbs: usize,
    pub hold: usize,
    pub look: usize,
    pub talk: usize,
    pub use_marker: usize,
    pub share: usize,
}

impl VerbIds {
    pub const RESERVED: usize = 5;

    /// `None` if `num_interactions` leaves no room for object verbs.
    pub fn new(num_interactions: usize) -> Option<Self> {
        let c = num_interactions;
        (c > Self::RESERVED).then(|| Self {
            object_verbs: c - Self::RESERVED,
            hold: c - 5,
            look: c - 4,
            talk: c - 3,
            use_marker: c - 2,
            share: c - 1,
        })
    }

    pub fn object_verb(&self, class_id: usize) -> usize {
        (class_id.saturating_sub(1)) % self.object_verbs
    }
}

/// Thresholds the rules read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuleParams {
    pub num_interactions: usize,
    pub near_dist: f64,
    pub hold_overlap: f64,
    pub grid_h: usize,
    pub grid_w: usize,
}

fn center_dist(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

fn engaged(instances: &[Instance], truth: &SceneTruth, p: &RuleParams, h: usize, o: usize) -> bool {
    h != o
        && !instances[o].is_human
        && truth.active[o]
        && center_dist(&truth.boxes[h], &truth.boxes[o]) < p.near_dist
}

fn holds(truth: &SceneTruth, p: &RuleParams, h: usize, o: usize) -> bool {
    let (hb, ob) = (&truth.boxes[h], &truth.boxes[o]);
    hb.intersection_area(ob) >= p.hold_overlap * ob.area()
}

fn marker_in_union_only(truth: &SceneTruth, p: &RuleParams, h: usize, o: usize) -> bool {
    if truth.markers.is_empty() {
        return false;
    }
    let map = layout_map(&truth.boxes[h], &truth.boxes[o], p.grid_h, p.grid_w);
    truth
        .markers
        .iter()
        .any(|&(r, c)| map.get(r, c) == LayoutLabel::Union)
}

/// Per-pair interaction sets in `(human, object)` index order.
pub fn pair_interactions(
    instances: &[Instance],
    truth: &SceneTruth,
    p: &RuleParams,
) -> Vec<(usize, usize, BTreeSet<usize>)> {
    let verbs = VerbIds::new(p.num_interactions).expect("validated interaction count");
    let n = instances.len();
    let humans: Vec<usize> = (0..n).filter(|&i| instances[i].is_human).collect();
    let mut out = Vec::new();
    for &h in &humans {
        for o in 0..n {
            if o == h {
                continue;
            }
            let mut set = BTreeSet::new();
            if instances[o].is_human {
                if center_dist(&truth.boxes[h], &truth.boxes[o]) < p.near_dist {
                    set.insert(verbs.talk);
                }
            } else if engaged(instances, truth, p, h, o) {
                set.insert(verbs.object_verb(instances[o].class_id));
                if holds(truth, p, h, o) {
                    set.insert(verbs.hold);
                } else if (0..n).any(|o2| o2 != o && engaged(instances, truth, p, h, o2) && holds(truth, p, h, o2)) {
                    set.insert(verbs.look);
                }
                if marker_in_union_only(truth, p, h, o) {
                    set.insert(verbs.use_marker);
                }
                if humans.iter().any(|&h2| h2 != h && engaged(instances, truth, p, h2, o)) {
                    set.insert(verbs.share);
                }
            }
            if !set.is_empty() {
                out.push((h, o, set));
            }
        }
    }
    out
}

pub fn derive_interactions(instances: &[Instance], truth: &SceneTruth, p: &RuleParams) -> Vec<GtInteraction> {
    pair_interactions(instances, truth, p)
        .into_iter()
        .map(|(h, o, set)| GtInteraction {
            human_box: truth.boxes[h],
            object_box: truth.boxes[o],
            object_class: instances[o].class_id,
            interaction_classes: set,
        })
        .collect()
}
