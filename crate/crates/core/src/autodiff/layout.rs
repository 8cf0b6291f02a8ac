/// Component layout of a jet: the value, first derivatives with respect to
/// `vars` seeded inputs and (for order 2) the upper triangle of the Hessian.
///
/// Components are stored as `[v, d_0 .. d_{n-1}, h_00, h_01, .., h_{n-1,n-1}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JetLayout {
    vars: u8,
    order: u8,
}

impl JetLayout {
    /// Plain values, no derivative components.
    pub const SCALAR: JetLayout = JetLayout { vars: 0, order: 0 };

    /// Panics if `order > 2`; callers validate user input first.
    pub fn new(vars: usize, order: usize) -> Self {
        assert!(order <= 2, "jet order {order} unsupported");
        assert!(vars <= 16, "too many seeded inputs: {vars}");
        if vars == 0 || order == 0 {
            return Self::SCALAR;
        }
        JetLayout { vars: vars as u8, order: order as u8 }
    }

    pub fn vars(&self) -> usize {
        self.vars as usize
    }

    pub fn order(&self) -> usize {
        self.order as usize
    }

    pub fn is_scalar(&self) -> bool {
        self.vars == 0
    }

    pub fn width(&self) -> usize {
        let n = self.vars();
        match self.order {
            0 => 1,
            1 => 1 + n,
            _ => 1 + n + n * (n + 1) / 2,
        }
    }

    pub fn d1(&self, i: usize) -> usize {
        debug_assert!(i < self.vars() && self.order >= 1);
        1 + i
    }

    pub fn d2(&self, i: usize, j: usize) -> usize {
        let n = self.vars();
        debug_assert!(i < n && j < n && self.order == 2);
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        1 + n + i * (2 * n - i + 1) / 2 + (j - i)
    }

    /// `(component, i)` for every first-derivative component.
    pub fn firsts(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = if self.order >= 1 { self.vars() } else { 0 };
        (0..n).map(|i| (1 + i, i))
    }

    /// `(component, i, j)` with `i <= j` for every second-derivative component.
    pub fn seconds(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let n = self.vars();
        let pairs: Vec<(usize, usize)> = if self.order == 2 {
            (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
        } else {
            Vec::new()
        };
        pairs.into_iter().enumerate().map(move |(k, (i, j))| (1 + n + k, i, j))
    }
}

/// Shape of a tape node: `units` parallel jets evaluated at `points` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub units: usize,
    pub layout: JetLayout,
    pub points: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { units: 1, layout: JetLayout::SCALAR, points: 1 };

    pub fn new(units: usize, layout: JetLayout, points: usize) -> Self {
        Shape { units, layout, points }
    }

    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn len(&self) -> usize {
        self.units * self.width() * self.points
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(unit, component, point)`.
    #[inline]
    pub fn at(&self, unit: usize, comp: usize, point: usize) -> usize {
        (unit * self.width() + comp) * self.points + point
    }

    /// Offset of the contiguous block holding one unit's jets.
    #[inline]
    pub fn unit_block(&self, unit: usize) -> std::ops::Range<usize> {
        let w = self.width() * self.points;
        unit * w..(unit + 1) * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_derivative_indices_are_packed() {
        let l = JetLayout::new(2, 2);
        assert_eq!(l.width(), 6);
        assert_eq!(l.d2(0, 0), 3);
        assert_eq!(l.d2(0, 1), 4);
        assert_eq!(l.d2(1, 0), 4);
        assert_eq!(l.d2(1, 1), 5);
        let got: Vec<_> = l.seconds().collect();
        assert_eq!(got, vec![(3, 0, 0), (4, 0, 1), (5, 1, 1)]);

        let l3 = JetLayout::new(3, 2);
        let seconds: Vec<_> = l3.seconds().collect();
        for (c, i, j) in seconds {
            assert_eq!(l3.d2(i, j), c);
        }
    }

    #[test]
    fn order_zero_collapses_to_scalar() {
        assert_eq!(JetLayout::new(2, 0), JetLayout::SCALAR);
        assert_eq!(JetLayout::new(0, 2).width(), 1);
        assert_eq!(JetLayout::new(1, 1).width(), 2);
    }
}
