//! Parser for the canonical kernel text.

use crate::expr::{BinOp, ConstTable, Expr, UnaryOp};
use crate::mapping::parse_mapping;
use crate::syntax::{Cursor, SyntaxError, Token};
use crate::tensor::DType;

use super::{Buffer, Kernel, Scope, Stmt};

pub fn parse_expr(src: &str) -> Result<Expr, SyntaxError> {
    let mut cur = Cursor::new(src)?;
    let e = expr(&mut cur)?;
    if !cur.at_end() {
        return cur.unexpected("end of expression");
    }
    Ok(e)
}

pub fn parse_kernel(src: &str) -> Result<Kernel, SyntaxError> {
    let mut cur = Cursor::new(src)?;
    let k = kernel(&mut cur)?;
    if !cur.at_end() {
        return cur.unexpected("end of kernel");
    }
    Ok(k)
}

/// Parses one or more consecutive kernels.
pub fn parse_program(src: &str) -> Result<Vec<Kernel>, SyntaxError> {
    let mut cur = Cursor::new(src)?;
    let mut out = vec![kernel(&mut cur)?];
    while !cur.at_end() {
        out.push(kernel(&mut cur)?);
    }
    Ok(out)
}

fn dtype(cur: &mut Cursor) -> Result<DType, SyntaxError> {
    if cur.eat_ident("i32") {
        Ok(DType::I32)
    } else if cur.eat_ident("f32") {
        Ok(DType::F32)
    } else {
        cur.unexpected("`i32` or `f32`")
    }
}

fn kernel(cur: &mut Cursor) -> Result<Kernel, SyntaxError> {
    cur.expect_keyword("kernel")?;
    let name = cur.expect_ident()?;
    cur.expect_keyword("grid")?;
    cur.expect_punct("(")?;
    let grid_dim = cur.expect_usize()?;
    cur.expect_punct(")")?;
    cur.expect_keyword("block")?;
    cur.expect_punct("(")?;
    let block_dim = cur.expect_usize()?;
    cur.expect_punct(")")?;
    cur.expect_punct("{")?;
    let (mut params, mut shared, mut locals) = (vec![], vec![], vec![]);
    loop {
        let scope = if cur.is_ident("global") {
            Scope::Global
        } else if cur.is_ident("shared") {
            Scope::Shared
        } else if cur.is_ident("local") {
            Scope::Local
        } else {
            break;
        };
        cur.next();
        let name = cur.expect_ident()?;
        let shape = cur.list("[", "]", |c| c.expect_usize())?;
        cur.expect_punct(":")?;
        let dt = dtype(cur)?;
        cur.expect_punct(";")?;
        let b = Buffer::new(name, scope, &shape, dt);
        match scope {
            Scope::Global => params.push(b),
            Scope::Shared => shared.push(b),
            Scope::Local => locals.push(b),
        }
    }
    let body = stmts_until_close(cur)?;
    Ok(Kernel {
        name,
        grid_dim,
        block_dim,
        params,
        shared,
        locals,
        body,
    })
}

fn stmts_until_close(cur: &mut Cursor) -> Result<Stmt, SyntaxError> {
    let mut stmts = Vec::new();
    while !cur.eat_punct("}") {
        if cur.at_end() {
            return cur.unexpected("`}`");
        }
        stmts.push(stmt(cur)?);
    }
    Ok(Stmt::block(stmts))
}

fn stmt(cur: &mut Cursor) -> Result<Stmt, SyntaxError> {
    if cur.eat_ident("for") {
        let var = cur.expect_ident()?;
        cur.expect_keyword("in")?;
        let lo = cur.expect_int()?;
        if lo != 0 {
            return cur.error("loops start at 0");
        }
        cur.expect_punct("..")?;
        let extent = expr(cur)?;
        let unroll = cur.eat_ident("unroll");
        cur.expect_punct("{")?;
        let body = stmts_until_close(cur)?;
        return Ok(Stmt::SeqFor {
            var,
            extent,
            unroll,
            body: Box::new(body),
        });
    }
    if cur.eat_ident("map") {
        let vars = cur.list("(", ")", |c| c.expect_ident())?;
        cur.expect_keyword("in")?;
        let line = cur.line();
        let mapping = parse_mapping(cur).map_err(|e| match e {
            crate::mapping::MappingError::Syntax(s) => s,
            other => SyntaxError {
                line,
                message: other.to_string(),
            },
        })?;
        cur.expect_keyword("on")?;
        let worker = expr(cur)?;
        cur.expect_punct("{")?;
        let body = stmts_until_close(cur)?;
        return Ok(Stmt::MapLoop {
            mapping,
            worker,
            vars,
            body: Box::new(body),
        });
    }
    if cur.eat_ident("if") {
        let cond = expr(cur)?;
        cur.expect_punct("{")?;
        let then = stmts_until_close(cur)?;
        let otherwise = if cur.eat_ident("else") {
            cur.expect_punct("{")?;
            Some(Box::new(stmts_until_close(cur)?))
        } else {
            None
        };
        return Ok(Stmt::If {
            cond,
            then: Box::new(then),
            otherwise,
        });
    }
    if cur.eat_ident("barrier") {
        cur.expect_punct(";")?;
        return Ok(Stmt::Barrier);
    }
    if cur.eat_ident("eval") {
        let value = expr(cur)?;
        cur.expect_punct(";")?;
        return Ok(Stmt::Eval { value });
    }
    if cur.eat_punct("{") {
        return stmts_until_close(cur);
    }
    let buffer = cur.expect_ident()?;
    let indices = cur.list("[", "]", expr)?;
    cur.expect_punct("=")?;
    let value = expr(cur)?;
    cur.expect_punct(";")?;
    Ok(Stmt::Store {
        buffer,
        indices,
        value,
    })
}

fn binop_at(cur: &Cursor, level: u8) -> Option<BinOp> {
    let Some(Token::Punct(p)) = cur.peek() else {
        return None;
    };
    let op = match (level, *p) {
        (1, "||") => BinOp::Or,
        (2, "&&") => BinOp::And,
        (3, "<") => BinOp::Lt,
        (3, "<=") => BinOp::Le,
        (3, ">") => BinOp::Gt,
        (3, ">=") => BinOp::Ge,
        (3, "==") => BinOp::Eq,
        (3, "!=") => BinOp::Ne,
        (4, "+") => BinOp::Add,
        (4, "-") => BinOp::Sub,
        (5, "*") => BinOp::Mul,
        (5, "/") => BinOp::Div,
        (5, "%") => BinOp::Mod,
        _ => return None,
    };
    Some(op)
}

pub(crate) fn expr(cur: &mut Cursor) -> Result<Expr, SyntaxError> {
    binary(cur, 1)
}

fn binary(cur: &mut Cursor, level: u8) -> Result<Expr, SyntaxError> {
    if level > 5 {
        return unary(cur);
    }
    let mut lhs = binary(cur, level + 1)?;
    while let Some(op) = binop_at(cur, level) {
        cur.next();
        let rhs = binary(cur, level + 1)?;
        lhs = Expr::binary(op, lhs, rhs);
    }
    Ok(lhs)
}

fn unary(cur: &mut Cursor) -> Result<Expr, SyntaxError> {
    if cur.eat_punct("-") {
        return Ok(match cur.peek() {
            Some(Token::Int(v)) => {
                let v = *v;
                cur.next();
                Expr::Int(-v)
            }
            Some(Token::Float(v)) => {
                let v = *v;
                cur.next();
                Expr::float(-v)
            }
            Some(Token::Ident(s)) if s == "inf" => {
                cur.next();
                Expr::float(f32::NEG_INFINITY)
            }
            _ => Expr::unary(UnaryOp::Neg, unary(cur)?),
        });
    }
    if cur.eat_punct("!") {
        return Ok(Expr::unary(UnaryOp::Not, unary(cur)?));
    }
    primary(cur)
}

fn call_args(cur: &mut Cursor, n: usize) -> Result<Vec<Expr>, SyntaxError> {
    let args = cur.list("(", ")", expr)?;
    if args.len() != n {
        return cur.error(format!("expected {n} arguments, found {}", args.len()));
    }
    Ok(args)
}

fn primary(cur: &mut Cursor) -> Result<Expr, SyntaxError> {
    let line = cur.line();
    match cur.next() {
        Some(Token::Int(v)) => Ok(Expr::Int(v)),
        Some(Token::Float(v)) => Ok(Expr::float(v)),
        Some(Token::Punct("(")) => {
            let e = expr(cur)?;
            cur.expect_punct(")")?;
            Ok(e)
        }
        Some(Token::Ident(name)) => {
            let unary_fn = match name.as_str() {
                "relu" => Some(UnaryOp::Relu),
                "exp" => Some(UnaryOp::Exp),
                "sqrt" => Some(UnaryOp::Sqrt),
                "i32" => Some(UnaryOp::CastI32),
                "f32" => Some(UnaryOp::CastF32),
                _ => None,
            };
            if let (Some(op), true) = (unary_fn, cur.is_punct("(")) {
                let mut a = call_args(cur, 1)?;
                return Ok(Expr::unary(op, a.remove(0)));
            }
            match name.as_str() {
                "max" | "min" if cur.is_punct("(") => {
                    let mut a = call_args(cur, 2)?;
                    let b = a.remove(1);
                    let op = if name == "max" { BinOp::Max } else { BinOp::Min };
                    Ok(Expr::binary(op, a.remove(0), b))
                }
                "select" if cur.is_punct("(") => {
                    let mut a = call_args(cur, 3)?;
                    let (c, x, y) = (a.remove(0), a.remove(0), a.remove(0));
                    Ok(Expr::select(c, x, y))
                }
                "table" if cur.is_punct("(") => {
                    cur.expect_punct("(")?;
                    let dt = dtype(cur)?;
                    cur.expect_punct(",")?;
                    let table = match dt {
                        DType::I32 => ConstTable::ints(cur.list("[", "]", |c| c.expect_int())?),
                        DType::F32 => {
                            let vals = cur.list("[", "]", float_literal)?;
                            ConstTable::floats(&vals)
                        }
                    };
                    cur.expect_punct(")")?;
                    cur.expect_punct("[")?;
                    let idx = expr(cur)?;
                    cur.expect_punct("]")?;
                    Ok(Expr::table(table, idx))
                }
                "inf" => Ok(Expr::float(f32::INFINITY)),
                "nan" => Ok(Expr::float(f32::NAN)),
                _ if cur.is_punct("[") => {
                    let idx = cur.list("[", "]", expr)?;
                    Ok(Expr::Load(name, idx))
                }
                _ => Ok(Expr::Var(name)),
            }
        }
        Some(t) => Err(SyntaxError {
            line,
            message: format!("expected expression, found {t}"),
        }),
        None => Err(SyntaxError {
            line,
            message: "expected expression, found end of input".into(),
        }),
    }
}

fn float_literal(cur: &mut Cursor) -> Result<f32, SyntaxError> {
    let neg = cur.eat_punct("-");
    let v = match cur.next() {
        Some(Token::Float(v)) => v,
        Some(Token::Int(v)) => v as f32,
        Some(Token::Ident(s)) if s == "inf" => f32::INFINITY,
        Some(Token::Ident(s)) if s == "nan" => f32::NAN,
        _ => return cur.error("expected float literal"),
    };
    Ok(if neg { -v } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(src: &str) {
        let e = parse_expr(src).unwrap();
        assert_eq!(e.to_string(), src);
    }

    #[test]
    fn expressions_round_trip() {
        round_trip("C[99 - i] * 2.0 * 3.0");
        round_trip("(a + b) * c - d / 4 % 2");
        round_trip("i < 3 && (j >= 0 || !k)");
        round_trip("select(x > 0, relu(y), -y)");
        round_trip("max(i, 0) - min(j, -3)");
        round_trip("table(i32, [3, -1, 4])[w] * 2");
        round_trip("table(f32, [0.5, -1.0, 1e-5])[c] + f32(i32(x))");
        round_trip("a - -3");
        round_trip("-(a * b)");
        round_trip("(a < b) == c");
        round_trip("exp(-inf) + sqrt(2.0)");
    }

    #[test]
    fn kernel_round_trip() {
        let src = "\
kernel k grid(4) block(128) {
  global A[64, 8]: f32;
  shared S[64, 8]: f32;
  local r[4]: i32;
  map (i, k) in repeat(4, 1) * spatial(16, 8) on threadIdx {
    S[i, k] = A[i, k];
  }
  barrier;
  for t in 0..4 unroll {
    if t < 2 {
      r[t] = 0;
    } else {
      eval 1;
    }
  }
}
";
        let k = parse_kernel(src).unwrap();
        assert_eq!(k.to_string(), src);
        assert_eq!(parse_kernel("kernel e grid(1) block(1) {}").unwrap().to_string(), "kernel e grid(1) block(1) {}\n");
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_kernel("kernel k grid(1) block(1) {\n  A[0] = ;\n}").unwrap_err();
        assert_eq!(err.line, 2);
    }
}
