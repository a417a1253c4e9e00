use std::fmt::{self, Write};

use super::{Buffer, Kernel, Program, Stmt};

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn write_buffer(out: &mut String, b: &Buffer) {
    let _ = writeln!(
        out,
        "  {} {}[{}]: {};",
        b.scope.keyword(),
        b.name,
        join(&b.shape),
        b.dtype
    );
}

fn write_stmt(out: &mut String, s: &Stmt, depth: usize) {
    let pad = "  ".repeat(depth);
    match s {
        Stmt::Block { stmts } => {
            for s in stmts {
                write_stmt(out, s, depth);
            }
        }
        Stmt::SeqFor {
            var,
            extent,
            unroll,
            body,
        } => {
            let unroll = if *unroll { " unroll" } else { "" };
            let _ = writeln!(out, "{pad}for {var} in 0..{extent}{unroll} {{");
            write_stmt(out, body, depth + 1);
            let _ = writeln!(out, "{pad}}}");
        }
        Stmt::MapLoop {
            mapping,
            worker,
            vars,
            body,
        } => {
            let _ = writeln!(out, "{pad}map ({}) in {mapping} on {worker} {{", vars.join(", "));
            write_stmt(out, body, depth + 1);
            let _ = writeln!(out, "{pad}}}");
        }
        Stmt::If {
            cond,
            then,
            otherwise,
        } => {
            let _ = writeln!(out, "{pad}if {cond} {{");
            write_stmt(out, then, depth + 1);
            if let Some(o) = otherwise {
                let _ = writeln!(out, "{pad}}} else {{");
                write_stmt(out, o, depth + 1);
            }
            let _ = writeln!(out, "{pad}}}");
        }
        Stmt::Store {
            buffer,
            indices,
            value,
        } => {
            let _ = writeln!(out, "{pad}{buffer}[{}] = {value};", join(indices));
        }
        Stmt::Eval { value } => {
            let _ = writeln!(out, "{pad}eval {value};");
        }
        Stmt::Barrier => {
            let _ = writeln!(out, "{pad}barrier;");
        }
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        write_stmt(&mut out, self, 0);
        f.write_str(&out)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut body = String::new();
        for b in self.params.iter().chain(&self.shared).chain(&self.locals) {
            write_buffer(&mut body, b);
        }
        write_stmt(&mut body, &self.body, 1);
        write!(
            f,
            "kernel {} grid({}) block({}) {{",
            self.name, self.grid_dim, self.block_dim
        )?;
        if body.is_empty() {
            writeln!(f, "}}")
        } else {
            write!(f, "\n{body}}}\n")
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, k) in self.kernels.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{k}")?;
        }
        Ok(())
    }
}
