//! Dependency and rasterization references.

use hoi_core::scene::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reads the label off which id slots coincide, without the priority chain.
pub fn naive_dependency(p1: (usize, usize), p2: (usize, usize)) -> usize {
    let same_h = p1.0 == p2.0;
    let same_o = p1.1 == p2.1;
    let h_is_o = p1.0 == p2.1;
    let o_is_h = p1.1 == p2.0;
    match (same_h, same_o, h_is_o, o_is_h) {
        (false, false, true, true) => {
            if p1.0 < p2.0 {
                3
            } else {
                4
            }
        }
        (true, true, _, _) => 5,
        (true, false, _, _) => 1,
        (false, true, _, _) => 2,
        (false, false, true, _) => 3,
        (false, false, false, true) => 4,
        (false, false, false, false) => 0,
    }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let (c, d) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let (x1, x2) = if a < b { (a, b) } else { (b, a) };
    let (y1, y2) = if c < d { (c, d) } else { (d, c) };
    BBox { x1, y1, x2, y2 }
}

/// Indices `k` with `lo <= (k + 0.5) / n <= hi`, as a half-open range.
pub fn covered(lo: f64, hi: f64, n: usize) -> (i64, i64) {
    let first = (lo * n as f64 - 0.5).ceil().max(0.0) as i64;
    let last = (hi * n as f64 - 0.5).floor().min(n as f64 - 1.0) as i64;
    (first, (last + 1).max(first))
}

pub fn cell_count(x: (f64, f64), y: (f64, f64), h: usize, w: usize) -> i64 {
    let (c0, c1) = covered(x.0, x.1, w);
    let (r0, r1) = covered(y.0, y.1, h);
    (c1 - c0) * (r1 - r0)
}

/// Label counts from interval arithmetic on the boxes alone.
pub fn analytic_counts(hb: &BBox, ob: &BBox, h: usize, w: usize) -> [i64; 5] {
    let nh = cell_count((hb.x1, hb.x2), (hb.y1, hb.y2), h, w);
    let no = cell_count((ob.x1, ob.x2), (ob.y1, ob.y2), h, w);
    let ix = (hb.x1.max(ob.x1), hb.x2.min(ob.x2));
    let iy = (hb.y1.max(ob.y1), hb.y2.min(ob.y2));
    let ni = if ix.0 <= ix.1 && iy.0 <= iy.1 { cell_count(ix, iy, h, w) } else { 0 };
    let nu = cell_count((hb.x1.min(ob.x1), hb.x2.max(ob.x2)), (hb.y1.min(ob.y1), hb.y2.max(ob.y2)), h, w);
    let either = nh + no - ni;
    [(h * w) as i64 - nu, nu - either, nh - ni, no - ni, ni]
}
