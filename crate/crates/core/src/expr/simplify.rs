//! Linear-form simplification of integer index expressions.
//!
//! Expressions are normalized to `Σ coeff·atom + const`, where atoms are the
//! non-linear leaves (variables, floor divisions, modulos, loads). Division
//! and modulo by positive constants are pushed through the linear form using
//! the variable ranges, which is what turns composed task mappings back into
//! readable closed forms such as `a * 16 + threadIdx / 8`.

use super::{floor_div, floor_mod, interval, BinOp, ConstTable, Expr, Interval, Ranges, UnaryOp};

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    terms: Vec<(Expr, i64)>,
    constant: i64,
}

impl Linear {
    fn constant(c: i64) -> Self {
        Linear {
            terms: vec![],
            constant: c,
        }
    }

    fn atom(e: Expr) -> Self {
        match e {
            Expr::Int(v) => Linear::constant(v),
            e => Linear {
                terms: vec![(e, 1)],
                constant: 0,
            },
        }
    }

    fn as_const(&self) -> Option<i64> {
        self.terms.is_empty().then_some(self.constant)
    }

    fn add_term(&mut self, atom: Expr, coeff: i64) {
        if coeff == 0 {
            return;
        }
        if let Some(slot) = self.terms.iter_mut().find(|(a, _)| *a == atom) {
            slot.1 = slot.1.wrapping_add(coeff);
        } else {
            self.terms.push((atom, coeff));
        }
        self.terms.retain(|(_, c)| *c != 0);
    }

    fn add(mut self, other: Linear) -> Linear {
        for (a, c) in other.terms {
            self.add_term(a, c);
        }
        self.constant = self.constant.wrapping_add(other.constant);
        self
    }

    fn scale(mut self, k: i64) -> Linear {
        if k == 0 {
            return Linear::constant(0);
        }
        for t in &mut self.terms {
            t.1 = t.1.wrapping_mul(k);
        }
        self.constant = self.constant.wrapping_mul(k);
        self
    }

    fn range(&self, ranges: &Ranges) -> Interval {
        let mut acc = Expr::Int(self.constant);
        for (a, c) in &self.terms {
            acc = Expr::binary(BinOp::Add, acc, Expr::binary(BinOp::Mul, a.clone(), Expr::Int(*c)));
        }
        interval(&acc, ranges)
    }

    /// Folds `k·c·(x / c) + k·(x % c)` back into `k·x`.
    fn recombine(mut self, ranges: &Ranges) -> Linear {
        loop {
            let mut found = None;
            'outer: for (i, (a, ka)) in self.terms.iter().enumerate() {
                if let Expr::Binary(BinOp::Div, x, c) = a {
                    let Some(c) = c.as_int() else { continue };
                    for (j, (b, kb)) in self.terms.iter().enumerate() {
                        if let Expr::Binary(BinOp::Mod, y, d) = b {
                            if y == x && d.as_int() == Some(c) && *ka == kb.wrapping_mul(c) {
                                found = Some((i, j, (**x).clone(), *kb));
                                break 'outer;
                            }
                        }
                    }
                }
            }
            let Some((i, j, x, k)) = found else {
                return self;
            };
            let (hi, lo) = if i > j { (i, j) } else { (j, i) };
            self.terms.remove(hi);
            self.terms.remove(lo);
            let inner = linearize(&x, ranges).scale(k);
            self = self.add(inner);
        }
    }

    fn to_expr(&self) -> Expr {
        let mut pos: Vec<(Expr, i64)> = self.terms.iter().filter(|t| t.1 > 0).cloned().collect();
        let mut neg: Vec<(Expr, i64)> = self.terms.iter().filter(|t| t.1 < 0).cloned().collect();
        let key = |t: &(Expr, i64)| (std::cmp::Reverse(t.1.unsigned_abs()), t.0.to_string());
        pos.sort_by_key(key);
        neg.sort_by_key(key);
        let term = |a: &Expr, c: u64| {
            if c == 1 {
                a.clone()
            } else {
                Expr::binary(BinOp::Mul, a.clone(), Expr::Int(c as i64))
            }
        };
        let mut acc: Option<Expr> = None;
        for (a, c) in &pos {
            let t = term(a, *c as u64);
            acc = Some(match acc {
                None => t,
                Some(e) => Expr::binary(BinOp::Add, e, t),
            });
        }
        if acc.is_none() && self.constant > 0 && !neg.is_empty() {
            acc = Some(Expr::Int(self.constant));
            for (a, c) in &neg {
                let t = term(a, c.unsigned_abs());
                acc = Some(Expr::binary(BinOp::Sub, acc.unwrap(), t));
            }
            return acc.unwrap();
        }
        for (a, c) in &neg {
            acc = Some(match acc {
                None => Expr::binary(BinOp::Mul, a.clone(), Expr::Int(*c)),
                Some(e) => Expr::binary(BinOp::Sub, e, term(a, c.unsigned_abs())),
            });
        }
        match acc {
            None => Expr::Int(self.constant),
            Some(e) if self.constant > 0 => Expr::binary(BinOp::Add, e, Expr::Int(self.constant)),
            Some(e) if self.constant < 0 => {
                Expr::binary(BinOp::Sub, e, Expr::Int(self.constant.wrapping_neg()))
            }
            Some(e) => e,
        }
    }
}

/// Whether `e` is pure integer index arithmetic (no floats, no loads).
pub fn is_index_expr(e: &Expr) -> bool {
    let mut ok = true;
    e.visit(&mut |n| match n {
        Expr::Float(_) | Expr::Load(..) | Expr::Table(ConstTable::Float(_), _) => ok = false,
        Expr::Unary(op, _) if !matches!(op, UnaryOp::Neg | UnaryOp::Not) => ok = false,
        _ => {}
    });
    ok
}

/// Simplifies an integer index expression under the given variable ranges.
/// Expressions that are not pure index arithmetic are returned unchanged.
pub fn simplify(e: &Expr, ranges: &Ranges) -> Expr {
    if !is_index_expr(e) {
        return e.clone();
    }
    linearize(e, ranges).to_expr()
}

fn div_linear(l: Linear, c: i64, ranges: &Ranges) -> Linear {
    if c == 1 {
        return l;
    }
    let mut quotient = Linear::constant(floor_div(l.constant, c));
    let mut rest = Linear::constant(floor_mod(l.constant, c));
    for (a, k) in l.terms {
        if k % c == 0 {
            quotient.add_term(a, k / c);
        } else {
            rest.add_term(a, k);
        }
    }
    if let Some(v) = rest.as_const() {
        return quotient.add(Linear::constant(floor_div(v, c)));
    }
    let r = rest.range(ranges);
    if r.is_bounded() && floor_div(r.lo, c) == floor_div(r.hi, c) {
        return quotient.add(Linear::constant(floor_div(r.lo, c)));
    }
    let inner = if rest.terms.len() == 1 && rest.constant == 0 && rest.terms[0].1 == 1 {
        match &rest.terms[0].0 {
            // floor(floor(x / a) / c) == floor(x / (a * c))
            Expr::Binary(BinOp::Div, x, a) if a.as_int().is_some_and(|a| a > 0) => {
                let a = a.as_int().unwrap();
                Expr::binary(BinOp::Div, (**x).clone(), Expr::Int(a * c))
            }
            _ => Expr::binary(BinOp::Div, rest.to_expr(), Expr::Int(c)),
        }
    } else {
        Expr::binary(BinOp::Div, rest.to_expr(), Expr::Int(c))
    };
    quotient.add(Linear::atom(inner))
}

fn mod_linear(l: Linear, c: i64, ranges: &Ranges) -> Linear {
    if c == 1 {
        return Linear::constant(0);
    }
    let mut rest = Linear::constant(floor_mod(l.constant, c));
    for (a, k) in l.terms {
        if k % c != 0 {
            rest.add_term(a, k);
        }
    }
    if let Some(v) = rest.as_const() {
        return Linear::constant(floor_mod(v, c));
    }
    let r = rest.range(ranges);
    if r.within(0, c - 1) {
        return rest;
    }
    if rest.terms.len() == 1 && rest.constant == 0 && rest.terms[0].1 == 1 {
        // (x % a) % c == x % c when c divides a
        if let Expr::Binary(BinOp::Mod, x, a) = &rest.terms[0].0 {
            if let Some(a) = a.as_int() {
                if a > 0 && a % c == 0 {
                    return Linear::atom(Expr::binary(BinOp::Mod, (**x).clone(), Expr::Int(c)));
                }
            }
        }
    }
    Linear::atom(Expr::binary(BinOp::Mod, rest.to_expr(), Expr::Int(c)))
}

fn fold_compare(op: BinOp, a: Interval, b: Interval) -> Option<bool> {
    let (a_lo, a_hi, b_lo, b_hi) = (a.lo, a.hi, b.lo, b.hi);
    if !a.is_bounded() && !b.is_bounded() {
        return None;
    }
    match op {
        BinOp::Lt if a_hi < b_lo => Some(true),
        BinOp::Lt if a_lo >= b_hi => Some(false),
        BinOp::Le if a_hi <= b_lo => Some(true),
        BinOp::Le if a_lo > b_hi => Some(false),
        BinOp::Gt if a_lo > b_hi => Some(true),
        BinOp::Gt if a_hi <= b_lo => Some(false),
        BinOp::Ge if a_lo >= b_hi => Some(true),
        BinOp::Ge if a_hi < b_lo => Some(false),
        BinOp::Eq if a_lo == a_hi && b_lo == b_hi => Some(a_lo == b_lo),
        BinOp::Eq if a_hi < b_lo || b_hi < a_lo => Some(false),
        BinOp::Ne if a_lo == a_hi && b_lo == b_hi => Some(a_lo != b_lo),
        BinOp::Ne if a_hi < b_lo || b_hi < a_lo => Some(true),
        _ => None,
    }
}

fn linearize(e: &Expr, ranges: &Ranges) -> Linear {
    let l = match e {
        Expr::Int(v) => Linear::constant(*v),
        Expr::Var(_) | Expr::Float(_) => Linear::atom(e.clone()),
        Expr::Binary(op, a, b) => {
            let la = linearize(a, ranges);
            let lb = linearize(b, ranges);
            match op {
                BinOp::Add => la.add(lb).recombine(ranges),
                BinOp::Sub => la.add(lb.scale(-1)).recombine(ranges),
                BinOp::Mul => match (la.as_const(), lb.as_const()) {
                    (Some(k), _) => lb.scale(k),
                    (_, Some(k)) => la.scale(k),
                    _ => Linear::atom(Expr::binary(BinOp::Mul, la.to_expr(), lb.to_expr())),
                },
                BinOp::Div => match lb.as_const() {
                    Some(c) if c > 0 => div_linear(la.recombine(ranges), c, ranges),
                    _ => Linear::atom(Expr::binary(BinOp::Div, la.to_expr(), lb.to_expr())),
                },
                BinOp::Mod => match lb.as_const() {
                    Some(c) if c > 0 => mod_linear(la.recombine(ranges), c, ranges),
                    _ => Linear::atom(Expr::binary(BinOp::Mod, la.to_expr(), lb.to_expr())),
                },
                BinOp::Max | BinOp::Min => {
                    let ra = la.range(ranges);
                    let rb = lb.range(ranges);
                    let pick_a = match op {
                        BinOp::Max if ra.is_bounded() && rb.is_bounded() && ra.lo >= rb.hi => Some(true),
                        BinOp::Max if ra.is_bounded() && rb.is_bounded() && rb.lo >= ra.hi => Some(false),
                        BinOp::Min if ra.is_bounded() && rb.is_bounded() && ra.hi <= rb.lo => Some(true),
                        BinOp::Min if ra.is_bounded() && rb.is_bounded() && rb.hi <= ra.lo => Some(false),
                        _ => None,
                    };
                    match pick_a {
                        Some(true) => la,
                        Some(false) => lb,
                        None => Linear::atom(Expr::binary(*op, la.to_expr(), lb.to_expr())),
                    }
                }
                _ if op.is_comparison() => {
                    match fold_compare(*op, la.range(ranges), lb.range(ranges)) {
                        Some(v) => Linear::constant(v as i64),
                        None => Linear::atom(Expr::binary(*op, la.to_expr(), lb.to_expr())),
                    }
                }
                BinOp::And => match (la.as_const(), lb.as_const()) {
                    (Some(0), _) | (_, Some(0)) => Linear::constant(0),
                    (Some(_), _) => Linear::atom(lb.to_expr()),
                    (_, Some(_)) => Linear::atom(la.to_expr()),
                    _ => Linear::atom(Expr::binary(BinOp::And, la.to_expr(), lb.to_expr())),
                },
                BinOp::Or => match (la.as_const(), lb.as_const()) {
                    (Some(x), _) if x != 0 => Linear::constant(1),
                    (_, Some(x)) if x != 0 => Linear::constant(1),
                    (Some(_), _) => Linear::atom(lb.to_expr()),
                    (_, Some(_)) => Linear::atom(la.to_expr()),
                    _ => Linear::atom(Expr::binary(BinOp::Or, la.to_expr(), lb.to_expr())),
                },
                _ => unreachable!(),
            }
        }
        Expr::Unary(UnaryOp::Neg, a) => linearize(a, ranges).scale(-1),
        Expr::Unary(op, a) => {
            let la = linearize(a, ranges);
            match (op, la.as_const()) {
                (UnaryOp::Not, Some(v)) => Linear::constant((v == 0) as i64),
                _ => Linear::atom(Expr::unary(*op, la.to_expr())),
            }
        }
        Expr::Select(c, a, b) => {
            let lc = linearize(c, ranges);
            match lc.as_const() {
                Some(0) => linearize(b, ranges),
                Some(_) => linearize(a, ranges),
                None => Linear::atom(Expr::select(
                    lc.to_expr(),
                    linearize(a, ranges).to_expr(),
                    linearize(b, ranges).to_expr(),
                )),
            }
        }
        Expr::Table(t, i) => {
            let li = linearize(i, ranges);
            match (t, li.as_const()) {
                (ConstTable::Int(v), Some(k)) if k >= 0 && (k as usize) < v.len() => {
                    Linear::constant(v[k as usize])
                }
                _ => Linear::atom(Expr::table(t.clone(), li.to_expr())),
            }
        }
        Expr::Load(t, idx) => Linear::atom(Expr::load(
            t.clone(),
            idx.iter().map(|x| linearize(x, ranges).to_expr()).collect(),
        )),
    };
    // Anything whose range collapsed to a point is that constant.
    if !l.terms.is_empty() {
        let r = l.range(ranges);
        if r.lo == r.hi && r.is_bounded() {
            return Linear::constant(r.lo);
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges(pairs: &[(&str, usize)]) -> Ranges {
        pairs
            .iter()
            .map(|(n, e)| (n.to_string(), Interval::extent(*e)))
            .collect()
    }

    fn v(n: &str) -> Expr {
        Expr::var(n)
    }

    #[test]
    fn composed_cooperative_load_closed_form() {
        // repeat(4,1) * spatial(16,8) on a 128-thread worker:
        //   row = (a % 4) * 16 + ((t % 128) / 8) % 16, col = 0 * 8 + (t % 128) % 8
        let r = ranges(&[("a", 4), ("threadIdx", 128)]);
        let t = v("threadIdx");
        let row = (v("a") % 4i64) * 16i64 + ((t.clone() % 128i64) / 8i64) % 16i64;
        let col = Expr::int(0) * 8i64 + (t.clone() % 128i64) % 8i64;
        assert_eq!(simplify(&row, &r).to_string(), "a * 16 + threadIdx / 8");
        assert_eq!(simplify(&col, &r).to_string(), "threadIdx % 8");
    }

    #[test]
    fn div_mod_of_linear_forms() {
        let r = ranges(&[("w", 4), ("l", 4), ("t", 4)]);
        // i = (w * 4 + l) * 4 + t
        let i = (v("w") * 4i64 + v("l")) * 4i64 + v("t");
        assert_eq!(simplify(&(i.clone() / 16i64), &r).to_string(), "w");
        assert_eq!(simplify(&(i.clone() % 4i64), &r).to_string(), "t");
        assert_eq!(simplify(&((i.clone() / 4i64) % 4i64), &r).to_string(), "l");
    }

    #[test]
    fn recombines_div_and_mod() {
        let r = ranges(&[("i", 100)]);
        let e = (v("i") / 50i64) * 50i64 + v("i") % 50i64;
        assert_eq!(simplify(&e, &r).to_string(), "i");
    }

    #[test]
    fn nested_division_merges() {
        let r = ranges(&[("t", 1024)]);
        let e = (v("t") / 32i64) / 2i64;
        assert_eq!(simplify(&e, &r).to_string(), "t / 64");
    }

    #[test]
    fn folds_decidable_guards() {
        let r = ranges(&[("i", 64)]);
        assert_eq!(simplify(&v("i").lt(64i64), &r), Expr::Int(1));
        assert_eq!(simplify(&v("i").lt(60i64), &r).to_string(), "i < 60");
        let both = v("i").lt(64i64).and(v("i").ge(0i64));
        assert_eq!(simplify(&both, &r), Expr::Int(1));
    }

    #[test]
    fn reverse_index_reads_naturally() {
        let r = ranges(&[("i", 100)]);
        let e = Expr::int(99) - v("i");
        assert_eq!(simplify(&e, &r).to_string(), "99 - i");
    }

    #[test]
    fn leaves_float_expressions_alone() {
        let e = Expr::load("A", vec![v("i")]) * 2.0f32;
        assert_eq!(simplify(&e, &Ranges::new()), e);
    }
}
