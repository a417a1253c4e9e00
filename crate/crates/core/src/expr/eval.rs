//! Scalar semantics of [`Expr`] operators on dynamically typed values.

use std::fmt;

use super::{floor_div, floor_mod, BinOp, ConstTable, Expr, UnaryOp};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Value {
    I(i64),
    F(f32),
}

impl Value {
    pub fn as_f32(self) -> f32 {
        match self {
            Value::I(v) => v as f32,
            Value::F(v) => v,
        }
    }

    /// Conversion used when storing into an `i32` tensor: floats truncate
    /// (saturating), integers wrap.
    pub fn to_i32(self) -> i32 {
        match self {
            Value::I(v) => v as i32,
            Value::F(v) => v as i32,
        }
    }

    pub fn truthy(self) -> bool {
        match self {
            Value::I(v) => v != 0,
            Value::F(v) => v != 0.0,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::I(v) => write!(f, "{v}"),
            Value::F(v) => write!(f, "{}", super::fmt_f32(*v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvalError {
    DivisionByZero,
    UnboundVariable(String),
    TableIndex { index: i64, len: usize },
    Load(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::DivisionByZero => write!(f, "integer division by zero"),
            EvalError::UnboundVariable(v) => write!(f, "unbound variable `{v}`"),
            EvalError::TableIndex { index, len } => {
                write!(f, "table index {index} out of range for length {len}")
            }
            EvalError::Load(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for EvalError {}

pub fn float_mod(a: f32, b: f32) -> f32 {
    a - b * (a / b).floor()
}

/// Integer semantics: wrapping arithmetic, floor division, 0/1 comparisons.
pub fn int_binary(op: BinOp, x: i64, y: i64) -> Result<i64, EvalError> {
    Ok(match op {
        BinOp::Add => x.wrapping_add(y),
        BinOp::Sub => x.wrapping_sub(y),
        BinOp::Mul => x.wrapping_mul(y),
        BinOp::Div => {
            if y == 0 {
                return Err(EvalError::DivisionByZero);
            }
            floor_div(x, y)
        }
        BinOp::Mod => {
            if y == 0 {
                return Err(EvalError::DivisionByZero);
            }
            floor_mod(x, y)
        }
        BinOp::Max => x.max(y),
        BinOp::Min => x.min(y),
        BinOp::Lt => (x < y) as i64,
        BinOp::Le => (x <= y) as i64,
        BinOp::Gt => (x > y) as i64,
        BinOp::Ge => (x >= y) as i64,
        BinOp::Eq => (x == y) as i64,
        BinOp::Ne => (x != y) as i64,
        BinOp::And => (x != 0 && y != 0) as i64,
        BinOp::Or => (x != 0 || y != 0) as i64,
    })
}

/// Float arithmetic; `op` must not be a comparison or logical operator.
pub fn float_arith(op: BinOp, x: f32, y: f32) -> f32 {
    match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
        BinOp::Mod => float_mod(x, y),
        BinOp::Max => x.max(y),
        BinOp::Min => x.min(y),
        _ => unreachable!("{op:?} is not arithmetic"),
    }
}

/// Float comparisons and logical operators, producing 0 or 1.
pub fn float_cmp(op: BinOp, x: f32, y: f32) -> i64 {
    (match op {
        BinOp::Lt => x < y,
        BinOp::Le => x <= y,
        BinOp::Gt => x > y,
        BinOp::Ge => x >= y,
        BinOp::Eq => x == y,
        BinOp::Ne => x != y,
        BinOp::And => x != 0.0 && y != 0.0,
        BinOp::Or => x != 0.0 || y != 0.0,
        _ => unreachable!("{op:?} is not a comparison"),
    }) as i64
}

pub fn apply_binary(op: BinOp, a: Value, b: Value) -> Result<Value, EvalError> {
    use Value::{F, I};
    Ok(match (op, a, b) {
        (BinOp::And | BinOp::Or, _, _) => {
            I(int_binary(op, a.truthy() as i64, b.truthy() as i64)?)
        }
        (_, I(x), I(y)) => I(int_binary(op, x, y)?),
        _ if op.is_comparison() => I(float_cmp(op, a.as_f32(), b.as_f32())),
        _ => F(float_arith(op, a.as_f32(), b.as_f32())),
    })
}

pub fn apply_unary(op: UnaryOp, a: Value) -> Value {
    use Value::{F, I};
    match (op, a) {
        (UnaryOp::Neg, I(x)) => I(x.wrapping_neg()),
        (UnaryOp::Neg, F(x)) => F(-x),
        (UnaryOp::Not, v) => I(!v.truthy() as i64),
        (UnaryOp::Relu, I(x)) => I(x.max(0)),
        (UnaryOp::Relu, F(x)) => F(x.max(0.0)),
        (UnaryOp::Exp, v) => F(v.as_f32().exp()),
        (UnaryOp::Sqrt, v) => F(v.as_f32().sqrt()),
        (UnaryOp::CastI32, v) => I(v.to_i32() as i64),
        (UnaryOp::CastF32, v) => F(v.as_f32()),
    }
}

/// Chooses a `select` branch; mixed branch types promote to float so the
/// result type does not depend on the condition.
pub fn select_value(c: Value, x: Value, y: Value) -> Value {
    let (x, y) = match (x, y) {
        (Value::I(a), Value::F(_)) => (Value::F(a as f32), y),
        (Value::F(_), Value::I(b)) => (x, Value::F(b as f32)),
        _ => (x, y),
    };
    if c.truthy() {
        x
    } else {
        y
    }
}

pub fn table_lookup(t: &ConstTable, index: i64) -> Result<Value, EvalError> {
    if index < 0 || index as usize >= t.len() {
        return Err(EvalError::TableIndex {
            index,
            len: t.len(),
        });
    }
    Ok(match t {
        ConstTable::Int(v) => Value::I(v[index as usize]),
        ConstTable::Float(v) => Value::F(v[index as usize].0),
    })
}

/// Evaluates `e` with callbacks for variables and element loads.
/// Both `select` branches are evaluated.
pub fn eval(
    e: &Expr,
    var: &mut dyn FnMut(&str) -> Option<Value>,
    load: &mut dyn FnMut(&str, &[i64]) -> Result<Value, EvalError>,
) -> Result<Value, EvalError> {
    Ok(match e {
        Expr::Int(v) => Value::I(*v),
        Expr::Float(v) => Value::F(v.0),
        Expr::Var(name) => var(name).ok_or_else(|| EvalError::UnboundVariable(name.clone()))?,
        Expr::Binary(op, a, b) => {
            let x = eval(a, var, load)?;
            let y = eval(b, var, load)?;
            apply_binary(*op, x, y)?
        }
        Expr::Unary(op, a) => apply_unary(*op, eval(a, var, load)?),
        Expr::Select(c, a, b) => {
            let c = eval(c, var, load)?;
            let x = eval(a, var, load)?;
            let y = eval(b, var, load)?;
            select_value(c, x, y)
        }
        Expr::Load(t, idx) => {
            let mut coords = Vec::with_capacity(idx.len());
            for i in idx {
                coords.push(int_of(eval(i, var, load)?));
            }
            load(t, &coords)?
        }
        Expr::Table(t, i) => table_lookup(t, int_of(eval(i, var, load)?))?,
    })
}

/// Index value of an evaluated expression; floats truncate.
pub fn int_of(v: Value) -> i64 {
    match v {
        Value::I(x) => x,
        Value::F(x) => x as i64,
    }
}

/// Evaluates a load-free expression under integer variable bindings.
pub fn eval_int(e: &Expr, bindings: &[(&str, i64)]) -> Result<i64, EvalError> {
    let v = eval(
        e,
        &mut |n| bindings.iter().find(|(k, _)| *k == n).map(|(_, v)| Value::I(*v)),
        &mut |t, _| Err(EvalError::Load(format!("unexpected load of `{t}`"))),
    )?;
    Ok(int_of(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_promotes_to_float() {
        assert_eq!(apply_binary(BinOp::Mul, Value::I(3), Value::F(0.5)).unwrap(), Value::F(1.5));
        assert_eq!(apply_binary(BinOp::Div, Value::I(-7), Value::I(2)).unwrap(), Value::I(-4));
        assert_eq!(apply_binary(BinOp::Mod, Value::I(-7), Value::I(2)).unwrap(), Value::I(1));
        assert!(apply_binary(BinOp::Div, Value::I(1), Value::I(0)).is_err());
    }

    #[test]
    fn casts() {
        assert_eq!(apply_unary(UnaryOp::CastI32, Value::F(-2.7)), Value::I(-2));
        assert_eq!(apply_unary(UnaryOp::CastI32, Value::I(1 << 32)), Value::I(0));
        assert_eq!(apply_unary(UnaryOp::CastF32, Value::I(3)), Value::F(3.0));
    }

    #[test]
    fn evaluates_with_bindings() {
        let e = (Expr::var("i") / 50i64) * 100i64 + Expr::var("j");
        assert_eq!(eval_int(&e, &[("i", 120), ("j", 3)]).unwrap(), 203);
    }
}
