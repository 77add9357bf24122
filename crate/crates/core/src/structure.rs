//! Deterministic pair geometry and the inter-/intra-interaction structure.

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::scene::{box_stats, BBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("pair ({human}, {object}) uses the same instance twice")]
    InvalidPair { human: usize, object: usize },
    #[error("position encoding width {0} is not divisible by 4")]
    EncodingWidth(usize),
}

/// `[dx, dy, dis, angle, A_h, A_o, I, U]` of a human/object box pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialFeature(pub [f64; 8]);

impl SpatialFeature {
    pub const LEN: usize = 8;

    pub fn dx(&self) -> f64 {
        self.0[0]
    }
    pub fn dy(&self) -> f64 {
        self.0[1]
    }
    pub fn dis(&self) -> f64 {
        self.0[2]
    }
    pub fn angle(&self) -> f64 {
        self.0[3]
    }
}

/// Center offsets are human minus object; the angle is the full-quadrant
/// `atan2(dy, dx)`, which is 0 when both offsets are 0.
pub fn spatial_feature(h: &BBox, o: &BBox) -> SpatialFeature {
    let (hx, hy) = h.center();
    let (ox, oy) = o.center();
    let (dx, dy) = (hx - ox, hy - oy);
    let dis = (dx * dx + dy * dy).sqrt();
    let angle = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
    let s = box_stats(h, o);
    SpatialFeature([dx, dy, dis, angle, s.area_h, s.area_o, s.intersection, s.union])
}

/// How one proposal relates to another through shared instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum DependencyLabel {
    Disjunctive = 0,
    SameHuman = 1,
    SameObject = 2,
    SeriesOpposing = 3,
    Series = 4,
    SamePair = 5,
}

impl DependencyLabel {
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        use DependencyLabel::*;
        [Disjunctive, SameHuman, SameObject, SeriesOpposing, Series, SamePair]
            .get(i)
            .copied()
    }
}

/// Dependency of `p1` with respect to `p2`, both `(human, object)` instance ids.
///
/// Checked most-specific first: same pair, same human, same object, then
/// the human of `p1` being the object of `p2` (series-opposing), then the
/// object of `p1` being the human of `p2` (series). Reciprocal pairs, where
/// both hold, are series-opposing from the pair with the lower human id and
/// series from the other, so that the matrix stays antisymmetric in 3/4.
pub fn dependency_label(p1: (usize, usize), p2: (usize, usize)) -> Result<DependencyLabel, StructureError> {
    for &(h, o) in &[p1, p2] {
        if h == o {
            return Err(StructureError::InvalidPair { human: h, object: o });
        }
    }
    let ((h1, o1), (h2, o2)) = (p1, p2);
    Ok(if h1 == h2 && o1 == o2 {
        DependencyLabel::SamePair
    } else if h1 == h2 {
        DependencyLabel::SameHuman
    } else if o1 == o2 {
        DependencyLabel::SameObject
    } else if h1 == o2 && o1 == h2 {
        if h1 < h2 {
            DependencyLabel::SeriesOpposing
        } else {
            DependencyLabel::Series
        }
    } else if h1 == o2 {
        DependencyLabel::SeriesOpposing
    } else if o1 == h2 {
        DependencyLabel::Series
    } else {
        DependencyLabel::Disjunctive
    })
}

/// `K×K` labels; entry `(i, j)` is `dependency_label(pairs[i], pairs[j])`,
/// the label used when query `i` attends to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyMatrix {
    pub k: usize,
    pub labels: Vec<DependencyLabel>,
}

impl DependencyMatrix {
    pub fn get(&self, i: usize, j: usize) -> DependencyLabel {
        self.labels[i * self.k + j]
    }

    pub fn indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|j| self.get(i, j).index().to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn dependency_matrix(pairs: &[(usize, usize)]) -> Result<DependencyMatrix, StructureError> {
    let k = pairs.len();
    let mut labels = Vec::with_capacity(k * k);
    for &pi in pairs {
        for &pj in pairs {
            labels.push(dependency_label(pi, pj)?);
        }
    }
    Ok(DependencyMatrix { k, labels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LayoutLabel {
    Background = 0,
    Union = 1,
    Human = 2,
    Object = 3,
    Intersection = 4,
}

impl LayoutLabel {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-cell layout of one proposal over an `h × w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutMap {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<LayoutLabel>,
}

impl LayoutMap {
    pub fn get(&self, row: usize, col: usize) -> LayoutLabel {
        self.cells[row * self.w + col]
    }

    pub fn counts(&self) -> [usize; LayoutLabel::COUNT] {
        let mut c = [0; LayoutLabel::COUNT];
        for l in &self.cells {
            c[l.index()] += 1;
        }
        c
    }

    /// One byte per cell, `label * 50`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.cells.iter().map(|l| l.index() as u8 * 50).collect()
    }

    /// Binary PGM (`P5`) image of [`Self::to_gray`].
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.to_gray());
        out
    }
}

/// Classifies each cell center `((col + 0.5) / w, (row + 0.5) / h)`.
pub fn layout_map(human: &BBox, object: &BBox, h: usize, w: usize) -> LayoutMap {
    let union = human.enclosing(object);
    let mut cells = Vec::with_capacity(h * w);
    for row in 0..h {
        let y = (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            let x = (col as f64 + 0.5) / w as f64;
            let (in_h, in_o) = (human.contains_point(x, y), object.contains_point(x, y));
            cells.push(match (in_h, in_o) {
                (true, true) => LayoutLabel::Intersection,
                (true, false) => LayoutLabel::Human,
                (false, true) => LayoutLabel::Object,
                (false, false) if union.contains_point(x, y) => LayoutLabel::Union,
                _ => LayoutLabel::Background,
            });
        }
    }
    LayoutMap { h, w, cells }
}

/// Fixed 2-d sinusoidal encoding, one row per cell in row-major order.
///
/// The first `d/2` channels encode the row index and the rest the column
/// index, each as interleaved `sin`/`cos` pairs with frequencies
/// `10000^(-2k/(d/2))`.
pub fn position_encoding(h: usize, w: usize, d: usize) -> Result<Tensor, StructureError> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(StructureError::EncodingWidth(d));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|k| 10000f64.powf(-((2 * k) as f64) / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d);
    for row in 0..h {
        for col in 0..w {
            for pos in [row as f64, col as f64] {
                for f in &freqs {
                    data.push((pos * f).sin());
                    data.push((pos * f).cos());
                }
            }
        }
    }
    Ok(Tensor::matrix(h * w, d, data).expect("sized above"))
}
