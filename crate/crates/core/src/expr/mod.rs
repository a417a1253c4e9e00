//! Scalar expressions shared by the operator definitions and the scheduled
//! program IR.
//!
//! Integer arithmetic uses floor division and floor modulo. Arithmetic on
//! mixed integer and float operands promotes the integer side to `f32`.

pub mod eval;
mod interval;
mod simplify;

pub use eval::{EvalError, Value};
pub use interval::{interval, Interval, Ranges};
pub use simplify::{is_index_expr, simplify};

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::tensor::DType;

/// Placeholder variable that stands for the value an epilogue receives.
pub const EPILOGUE_VALUE: &str = "$y";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Max,
    Min,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq | BinOp::Ne
        )
    }

    pub fn is_logical(self) -> bool {
        matches!(self, BinOp::And | BinOp::Or)
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
            BinOp::Max => "max",
            BinOp::Min => "min",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq | BinOp::Ne => 3,
            BinOp::Add | BinOp::Sub => 4,
            BinOp::Mul | BinOp::Div | BinOp::Mod => 5,
            BinOp::Max | BinOp::Min => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryOp {
    Neg,
    Not,
    Relu,
    Exp,
    Sqrt,
    /// Conversion with the same semantics as storing into an `i32` tensor.
    CastI32,
    CastF32,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Not => "!",
            UnaryOp::Relu => "relu",
            UnaryOp::Exp => "exp",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::CastI32 => "i32",
            UnaryOp::CastF32 => "f32",
        }
    }
}

/// A constant lookup table embedded in an expression.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstTable {
    Int(Arc<Vec<i64>>),
    Float(Arc<Vec<OrderedFloat<f32>>>),
}

impl ConstTable {
    pub fn ints(values: Vec<i64>) -> Self {
        ConstTable::Int(Arc::new(values))
    }

    pub fn floats(values: &[f32]) -> Self {
        ConstTable::Float(Arc::new(values.iter().copied().map(OrderedFloat).collect()))
    }

    pub fn len(&self) -> usize {
        match self {
            ConstTable::Int(v) => v.len(),
            ConstTable::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Int(i64),
    Float(OrderedFloat<f32>),
    Var(String),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Unary(UnaryOp, Box<Expr>),
    Select(Box<Expr>, Box<Expr>, Box<Expr>),
    /// Element access `tensor[indices]`.
    Load(String, Vec<Expr>),
    /// Constant table lookup `table[index]`.
    Table(ConstTable, Box<Expr>),
}

impl Expr {
    pub fn int(v: i64) -> Expr {
        Expr::Int(v)
    }

    pub fn float(v: f32) -> Expr {
        Expr::Float(OrderedFloat(v))
    }

    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn load(tensor: impl Into<String>, indices: Vec<Expr>) -> Expr {
        Expr::Load(tensor.into(), indices)
    }

    pub fn table(table: ConstTable, index: Expr) -> Expr {
        Expr::Table(table, Box::new(index))
    }

    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn unary(op: UnaryOp, operand: Expr) -> Expr {
        Expr::Unary(op, Box::new(operand))
    }

    pub fn select(cond: Expr, then: Expr, otherwise: Expr) -> Expr {
        Expr::Select(Box::new(cond), Box::new(then), Box::new(otherwise))
    }

    pub fn lt(self, rhs: impl Into<Expr>) -> Expr {
        Expr::binary(BinOp::Lt, self, rhs.into())
    }

    pub fn le(self, rhs: impl Into<Expr>) -> Expr {
        Expr::binary(BinOp::Le, self, rhs.into())
    }

    pub fn gt(self, rhs: impl Into<Expr>) -> Expr {
        Expr::binary(BinOp::Gt, self, rhs.into())
    }

    pub fn ge(self, rhs: impl Into<Expr>) -> Expr {
        Expr::binary(BinOp::Ge, self, rhs.into())
    }

    pub fn eq_(self, rhs: impl Into<Expr>) -> Expr {
        Expr::binary(BinOp::Eq, self, rhs.into())
    }

    pub fn ne_(self, rhs: impl Into<Expr>) -> Expr {
        Expr::binary(BinOp::Ne, self, rhs.into())
    }

    pub fn and(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::And, self, rhs)
    }

    pub fn or(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Or, self, rhs)
    }

    pub fn max(self, rhs: impl Into<Expr>) -> Expr {
        Expr::binary(BinOp::Max, self, rhs.into())
    }

    pub fn min(self, rhs: impl Into<Expr>) -> Expr {
        Expr::binary(BinOp::Min, self, rhs.into())
    }

    pub fn relu(self) -> Expr {
        Expr::unary(UnaryOp::Relu, self)
    }

    pub fn exp(self) -> Expr {
        Expr::unary(UnaryOp::Exp, self)
    }

    pub fn sqrt(self) -> Expr {
        Expr::unary(UnaryOp::Sqrt, self)
    }

    pub fn not(self) -> Expr {
        Expr::unary(UnaryOp::Not, self)
    }

    /// Conjunction of all conditions; `1` when empty.
    pub fn all(conds: impl IntoIterator<Item = Expr>) -> Expr {
        conds
            .into_iter()
            .reduce(|acc, c| acc.and(c))
            .unwrap_or(Expr::Int(1))
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Expr::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Int(_) | Expr::Float(_) | Expr::Var(_) => vec![],
            Expr::Binary(_, a, b) => vec![a, b],
            Expr::Unary(_, a) => vec![a],
            Expr::Select(c, a, b) => vec![c, a, b],
            Expr::Load(_, idx) => idx.iter().collect(),
            Expr::Table(_, i) => vec![i],
        }
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }

    /// Rebuilds the tree bottom-up, giving `f` the chance to replace every
    /// node after its children were rewritten.
    pub fn rewrite(&self, f: &mut impl FnMut(Expr) -> Expr) -> Expr {
        let rebuilt = match self {
            Expr::Int(_) | Expr::Float(_) | Expr::Var(_) => self.clone(),
            Expr::Binary(op, a, b) => Expr::binary(*op, a.rewrite(f), b.rewrite(f)),
            Expr::Unary(op, a) => Expr::unary(*op, a.rewrite(f)),
            Expr::Select(c, a, b) => Expr::select(c.rewrite(f), a.rewrite(f), b.rewrite(f)),
            Expr::Load(t, idx) => Expr::Load(t.clone(), idx.iter().map(|e| e.rewrite(f)).collect()),
            Expr::Table(t, i) => Expr::Table(t.clone(), Box::new(i.rewrite(f))),
        };
        f(rebuilt)
    }

    /// Replaces free variables.
    pub fn substitute(&self, map: &HashMap<String, Expr>) -> Expr {
        if map.is_empty() {
            return self.clone();
        }
        self.rewrite(&mut |e| match &e {
            Expr::Var(v) => map.get(v).cloned().unwrap_or(e),
            _ => e,
        })
    }

    pub fn substitute_var(&self, name: &str, value: &Expr) -> Expr {
        self.rewrite(&mut |e| match &e {
            Expr::Var(v) if v == name => value.clone(),
            _ => e,
        })
    }

    /// Replaces loads of `tensor`; `f` receives the (already rewritten)
    /// index list.
    pub fn replace_loads(&self, tensor: &str, f: &mut impl FnMut(&[Expr]) -> Expr) -> Expr {
        self.rewrite(&mut |e| match &e {
            Expr::Load(t, idx) if t == tensor => f(idx),
            _ => e,
        })
    }

    pub fn free_vars(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
        });
        out
    }

    pub fn mentions_var(&self, name: &str) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if matches!(e, Expr::Var(v) if v == name) {
                found = true;
            }
        });
        found
    }

    /// All element accesses in pre-order.
    pub fn loads(&self) -> Vec<(&str, &[Expr])> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Load(t, idx) = e {
                out.push((t.as_str(), idx.as_slice()));
            }
        });
        out
    }

    pub fn has_loads(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if matches!(e, Expr::Load(..)) {
                found = true;
            }
        });
        found
    }

    /// Element type the expression evaluates to; `tensor` gives the type
    /// of loaded tensors (unknown tensors count as `f32`).
    pub fn static_dtype(&self, tensor: &dyn Fn(&str) -> Option<DType>) -> DType {
        let float = |e: &Expr| e.static_dtype(tensor) == DType::F32;
        match self {
            Expr::Int(_) | Expr::Var(_) => DType::I32,
            Expr::Float(_) => DType::F32,
            Expr::Load(t, _) => tensor(t).unwrap_or(DType::F32),
            Expr::Table(ConstTable::Int(_), _) => DType::I32,
            Expr::Table(ConstTable::Float(_), _) => DType::F32,
            Expr::Binary(op, a, b) => {
                if op.is_comparison() || op.is_logical() || !(float(a) || float(b)) {
                    DType::I32
                } else {
                    DType::F32
                }
            }
            Expr::Unary(op, a) => match op {
                UnaryOp::Exp | UnaryOp::Sqrt | UnaryOp::CastF32 => DType::F32,
                UnaryOp::CastI32 | UnaryOp::Not => DType::I32,
                UnaryOp::Neg | UnaryOp::Relu => a.static_dtype(tensor),
            },
            Expr::Select(_, a, b) => {
                if float(a) || float(b) {
                    DType::F32
                } else {
                    DType::I32
                }
            }
        }
    }

    /// Wraps the expression in the conversion a store into a `target`
    /// tensor performs, omitting it where it cannot change the value.
    pub fn convert_to(self, target: DType, tensor: &dyn Fn(&str) -> Option<DType>) -> Expr {
        let source = self.static_dtype(tensor);
        match (source, target) {
            (DType::F32, DType::F32) => self,
            (DType::I32, DType::F32) => Expr::unary(UnaryOp::CastF32, self),
            (DType::F32, DType::I32) => Expr::unary(UnaryOp::CastI32, self),
            (DType::I32, DType::I32) => match &self {
                Expr::Load(..) | Expr::Unary(UnaryOp::CastI32, _) => self,
                Expr::Int(v) if i32::try_from(*v).is_ok() => self,
                _ => Expr::unary(UnaryOp::CastI32, self),
            },
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Unary(UnaryOp::Neg | UnaryOp::Not, _) => 6,
            Expr::Int(v) if *v < 0 => 6,
            Expr::Float(v) if v.0.is_sign_negative() => 6,
            _ => 8,
        }
    }
}

impl From<i64> for Expr {
    fn from(v: i64) -> Self {
        Expr::Int(v)
    }
}

impl From<usize> for Expr {
    fn from(v: usize) -> Self {
        Expr::Int(v as i64)
    }
}

impl From<f32> for Expr {
    fn from(v: f32) -> Self {
        Expr::float(v)
    }
}

impl From<&str> for Expr {
    fn from(v: &str) -> Self {
        Expr::var(v)
    }
}

macro_rules! arith_impl {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<R: Into<Expr>> std::ops::$trait<R> for Expr {
            type Output = Expr;
            fn $method(self, rhs: R) -> Expr {
                Expr::binary($op, self, rhs.into())
            }
        }
    };
}

arith_impl!(Add, add, BinOp::Add);
arith_impl!(Sub, sub, BinOp::Sub);
arith_impl!(Mul, mul, BinOp::Mul);
arith_impl!(Div, div, BinOp::Div);
arith_impl!(Rem, rem, BinOp::Mod);

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::unary(UnaryOp::Neg, self)
    }
}

/// Integer division rounding toward negative infinity. `b` must be non-zero.
pub fn floor_div(a: i64, b: i64) -> i64 {
    let q = a.wrapping_div(b);
    if a.wrapping_rem(b) != 0 && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

/// Remainder matching [`floor_div`]; takes the sign of `b`.
pub fn floor_mod(a: i64, b: i64) -> i64 {
    let r = a.wrapping_rem(b);
    if r != 0 && ((r < 0) != (b < 0)) {
        r + b
    } else {
        r
    }
}

pub(crate) fn fmt_f32(v: f32) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        let s = format!("{v:?}");
        if s.contains('.') || s.contains('e') {
            s
        } else {
            format!("{s}.0")
        }
    }
}

fn write_list(f: &mut fmt::Formatter<'_>, items: &[Expr]) -> fmt::Result {
    for (i, e) in items.iter().enumerate() {
        if i > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{e}")?;
    }
    Ok(())
}

fn write_operand(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(v) => write!(f, "{v}"),
            Expr::Float(v) => write!(f, "{}", fmt_f32(v.0)),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Binary(op @ (BinOp::Max | BinOp::Min), a, b) => {
                write!(f, "{}({a}, {b})", op.symbol())
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                let lp = a.precedence();
                let rp = b.precedence();
                write_operand(f, a, lp < p || (op.is_comparison() && lp == p))?;
                write!(f, " {} ", op.symbol())?;
                write_operand(f, b, rp <= p)
            }
            Expr::Unary(op @ (UnaryOp::Neg | UnaryOp::Not), a) => {
                write!(f, "{}", op.name())?;
                // `-(-1)` must not collapse into a single literal
                write_operand(f, a, a.precedence() <= 6)
            }
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Select(c, a, b) => write!(f, "select({c}, {a}, {b})"),
            Expr::Load(t, idx) => {
                write!(f, "{t}[")?;
                write_list(f, idx)?;
                write!(f, "]")
            }
            Expr::Table(t, i) => {
                match t {
                    ConstTable::Int(v) => {
                        write!(f, "table(i32, [")?;
                        for (k, x) in v.iter().enumerate() {
                            if k > 0 {
                                write!(f, ", ")?;
                            }
                            write!(f, "{x}")?;
                        }
                    }
                    ConstTable::Float(v) => {
                        write!(f, "table(f32, [")?;
                        for (k, x) in v.iter().enumerate() {
                            if k > 0 {
                                write!(f, ", ")?;
                            }
                            write!(f, "{}", fmt_f32(x.0))?;
                        }
                    }
                }
                write!(f, "])[{i}]")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_respects_precedence() {
        let i = Expr::var("i");
        let e = (Expr::int(99) - i.clone()) * 2.0f32;
        assert_eq!(e.to_string(), "(99 - i) * 2.0");
        let e = Expr::int(99) - (i.clone() - 1i64);
        assert_eq!(e.to_string(), "99 - (i - 1)");
        let e = i.clone() / 50i64;
        assert_eq!(e.to_string(), "i / 50");
        let e = i.clone().lt(3i64).and(Expr::var("j").ge(0i64));
        assert_eq!(e.to_string(), "i < 3 && j >= 0");
        let e = Expr::load("C", vec![Expr::int(99) - i]) * 2.0f32;
        assert_eq!(e.to_string(), "C[99 - i] * 2.0");
    }

    #[test]
    fn substitution_and_loads() {
        let e = Expr::load("A", vec![Expr::var("i")]) + Expr::var("j");
        let mut m = HashMap::new();
        m.insert("i".to_string(), Expr::int(99) - Expr::var("i"));
        let s = e.substitute(&m);
        assert_eq!(s.to_string(), "A[99 - i] + j");
        let r = s.replace_loads("A", &mut |idx| Expr::load("C", idx.to_vec()) * 2.0f32);
        assert_eq!(r.to_string(), "C[99 - i] * 2.0 + j");
        assert_eq!(r.free_vars(), vec!["i".to_string(), "j".to_string()]);
    }

    #[test]
    fn float_formatting() {
        assert_eq!(fmt_f32(2.0), "2.0");
        assert_eq!(fmt_f32(1e-5), "1e-5");
        assert_eq!(fmt_f32(f32::NEG_INFINITY), "-inf");
    }
}
