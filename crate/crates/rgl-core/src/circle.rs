//! Small geometric helpers for arcs of the circle R/Z.
//!
//! Arcs are kept as real intervals `[lo, hi]` with `hi - lo < 1`; a circle
//! point belongs to the arc when some integer translate lands inside it.

/// Distance on the circle R/Z.
#[inline]
pub fn circle_dist(x: f64, y: f64) -> f64 {
    let d = (x - y).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Representative of x in [center - 1/2, center + 1/2).
#[inline]
pub fn rep_near(x: f64, center: f64) -> f64 {
    center + (x - center + 0.5).rem_euclid(1.0) - 0.5
}

/// A short arc in real coordinates (length < 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub lo: f64,
    pub hi: f64,
}

impl Arc {
    pub fn new(lo: f64, hi: f64) -> Arc {
        debug_assert!(hi >= lo && hi - lo < 1.0, "bad arc {lo}..{hi}");
        Arc { lo, hi }
    }

    pub fn around(center: f64, radius: f64) -> Arc {
        Arc::new(center - radius, center + radius)
    }

    #[inline]
    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    #[inline]
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Membership of a circle point (mod 1).
    #[inline]
    pub fn contains_mod1(&self, x: f64) -> bool {
        let r = rep_near(x, self.center());
        self.lo <= r && r <= self.hi
    }

    /// Whether the whole arc `other` sits inside `self`, mod 1.
    pub fn contains_arc_mod1(&self, other: &Arc) -> bool {
        let c = rep_near(other.center(), self.center());
        let shift = c - other.center();
        self.lo <= other.lo + shift && other.hi + shift <= self.hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances_wrap() {
        assert!((circle_dist(0.95, 0.05) - 0.1).abs() < 1e-15);
        assert!((circle_dist(0.2, 0.7) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn membership_wraps() {
        let arc = Arc::new(-0.1, 0.1); // arc around 0
        assert!(arc.contains_mod1(0.95));
        assert!(arc.contains_mod1(0.05));
        assert!(!arc.contains_mod1(0.5));
    }

    #[test]
    fn arc_containment_mod1() {
        let big = Arc::new(-0.2, 0.2);
        let small = Arc::new(0.9, 1.05); // same as [-0.1, 0.05]
        assert!(big.contains_arc_mod1(&small));
        let outside = Arc::new(0.3, 0.4);
        assert!(!big.contains_arc_mod1(&outside));
    }
}
