use std::collections::HashMap;

use super::{floor_div, BinOp, ConstTable, Expr, UnaryOp};

/// Closed integer interval. Bounds saturate at `±INF`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub lo: i64,
    pub hi: i64,
}

pub type Ranges = HashMap<String, Interval>;

const INF: i128 = 1 << 62;

fn sat(v: i128) -> i64 {
    v.clamp(-INF, INF) as i64
}

impl Interval {
    pub const FULL: Interval = Interval {
        lo: -(INF as i64),
        hi: INF as i64,
    };

    pub fn new(lo: i64, hi: i64) -> Self {
        Interval { lo, hi }
    }

    pub fn point(v: i64) -> Self {
        Interval { lo: v, hi: v }
    }

    /// `[0, extent - 1]`.
    pub fn extent(extent: usize) -> Self {
        Interval {
            lo: 0,
            hi: extent as i64 - 1,
        }
    }

    pub fn is_bounded(&self) -> bool {
        (self.lo as i128) > -INF && (self.hi as i128) < INF
    }

    pub fn within(&self, lo: i64, hi: i64) -> bool {
        self.lo >= lo && self.hi <= hi
    }

    pub fn union(self, o: Interval) -> Interval {
        Interval::new(self.lo.min(o.lo), self.hi.max(o.hi))
    }

    pub fn intersect(self, o: Interval) -> Interval {
        Interval::new(self.lo.max(o.lo), self.hi.min(o.hi))
    }

    fn add(self, o: Interval) -> Interval {
        Interval::new(
            sat(self.lo as i128 + o.lo as i128),
            sat(self.hi as i128 + o.hi as i128),
        )
    }

    fn neg(self) -> Interval {
        Interval::new(sat(-(self.hi as i128)), sat(-(self.lo as i128)))
    }

    fn mul(self, o: Interval) -> Interval {
        let c = [
            self.lo as i128 * o.lo as i128,
            self.lo as i128 * o.hi as i128,
            self.hi as i128 * o.lo as i128,
            self.hi as i128 * o.hi as i128,
        ];
        Interval::new(
            sat(*c.iter().min().unwrap()),
            sat(*c.iter().max().unwrap()),
        )
    }

    fn bool() -> Interval {
        Interval::new(0, 1)
    }
}

/// Conservative integer range of `e`. Variables missing from `ranges` are
/// unbounded; loads are unbounded.
pub fn interval(e: &Expr, ranges: &Ranges) -> Interval {
    match e {
        Expr::Int(v) => Interval::point(*v),
        Expr::Float(_) => Interval::FULL,
        Expr::Var(v) => ranges.get(v).copied().unwrap_or(Interval::FULL),
        Expr::Binary(op, a, b) => {
            let x = interval(a, ranges);
            let y = interval(b, ranges);
            match op {
                BinOp::Add => x.add(y),
                BinOp::Sub => x.add(y.neg()),
                BinOp::Mul => x.mul(y),
                BinOp::Div => {
                    if y.lo == y.hi && y.lo > 0 {
                        let c = y.lo;
                        let lo = if x.lo as i128 <= -INF { x.lo } else { floor_div(x.lo, c) };
                        let hi = if x.hi as i128 >= INF { x.hi } else { floor_div(x.hi, c) };
                        Interval::new(lo, hi)
                    } else {
                        Interval::FULL
                    }
                }
                BinOp::Mod => {
                    if y.lo == y.hi && y.lo > 0 {
                        let c = y.lo;
                        if x.within(0, c - 1) {
                            x
                        } else {
                            Interval::new(0, c - 1)
                        }
                    } else if y.lo > 0 {
                        Interval::new(0, y.hi - 1)
                    } else {
                        Interval::FULL
                    }
                }
                BinOp::Max => Interval::new(x.lo.max(y.lo), x.hi.max(y.hi)),
                BinOp::Min => Interval::new(x.lo.min(y.lo), x.hi.min(y.hi)),
                _ => Interval::bool(),
            }
        }
        Expr::Unary(op, a) => match op {
            UnaryOp::Neg => interval(a, ranges).neg(),
            UnaryOp::Not => Interval::bool(),
            UnaryOp::Relu => {
                let x = interval(a, ranges);
                Interval::new(x.lo.max(0), x.hi.max(0))
            }
            UnaryOp::CastI32 => {
                let x = interval(a, ranges);
                if x.within(i32::MIN as i64, i32::MAX as i64) {
                    x
                } else {
                    Interval::new(i32::MIN as i64, i32::MAX as i64)
                }
            }
            _ => Interval::FULL,
        },
        Expr::Select(_, a, b) => interval(a, ranges).union(interval(b, ranges)),
        Expr::Load(..) => Interval::FULL,
        Expr::Table(ConstTable::Int(v), _) => {
            let lo = v.iter().copied().min().unwrap_or(0);
            let hi = v.iter().copied().max().unwrap_or(0);
            Interval::new(lo, hi)
        }
        Expr::Table(ConstTable::Float(_), _) => Interval::FULL,
    }
}
