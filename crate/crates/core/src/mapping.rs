//! Task mappings: functions from a worker id to an ordered list of tasks.
//!
//! Two atoms cover most needs. `repeat(d...)` gives the whole task grid to a
//! single worker in row-major order, and `spatial(d...)` gives one task to
//! each of `∏d` workers, unlinearizing the worker id row-major. Composition
//! `f1 * f2` nests `f2` inside every task and worker of `f1`:
//!
//! ```text
//! (f1 * f2)(w) = [t1 ⊙ d2 + t2 | t1 in f1(w / n2), t2 in f2(w % n2)]
//! ```
//!
//! so `repeat(4, 1) * spatial(16, 8)` hands 64x8 tasks to 128 workers, four
//! tasks each, stepping by 16 rows.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::syntax::{Cursor, SyntaxError, Token};

pub type Task = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("task shape must have at least one dimension")]
    EmptyShape,
    #[error("task shape extents must be positive, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("cannot compose mappings of task dimension {left} and {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("worker {worker} out of range for {num_workers} workers")]
    WorkerOutOfRange { worker: usize, num_workers: usize },
    #[error("worker or task count overflows")]
    Overflow,
    #[error("invalid custom mapping: {0}")]
    InvalidCustom(String),
    #[error("can only visualize mappings with at most 2 task dimensions, got {0}")]
    TooManyDimensions(usize),
    #[error("mapping syntax: {0}")]
    Syntax(#[from] SyntaxError),
}

/// Extents `(d_0, ..., d_{m-1})` of a task grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TaskShape(Vec<usize>);

impl TaskShape {
    pub fn new(dims: Vec<usize>) -> Result<Self, MappingError> {
        if dims.is_empty() {
            return Err(MappingError::EmptyShape);
        }
        if dims.contains(&0) {
            return Err(MappingError::ZeroExtent(dims));
        }
        dims.iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or(MappingError::Overflow)?;
        Ok(TaskShape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn size(&self) -> usize {
        self.0.iter().product()
    }

    pub fn contains(&self, task: &[usize]) -> bool {
        task.len() == self.rank() && task.iter().zip(&self.0).all(|(t, d)| t < d)
    }

    /// Elementwise product; `None` when ranks differ or the size overflows.
    pub fn hadamard(&self, other: &TaskShape) -> Option<TaskShape> {
        if self.rank() != other.rank() {
            return None;
        }
        let dims: Vec<usize> = self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect();
        TaskShape::new(dims).ok()
    }

    /// Row-major coordinates of linear index `i`.
    pub fn unlinearize(&self, mut i: usize) -> Task {
        let mut out = vec![0; self.rank()];
        for (slot, d) in out.iter_mut().zip(&self.0).rev() {
            *slot = i % d;
            i /= d;
        }
        out
    }

    pub fn linearize(&self, task: &[usize]) -> usize {
        task.iter().zip(&self.0).fold(0, |acc, (t, d)| acc * d + t)
    }
}

impl TryFrom<Vec<usize>> for TaskShape {
    type Error = MappingError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        TaskShape::new(v)
    }
}

impl From<TaskShape> for Vec<usize> {
    fn from(s: TaskShape) -> Self {
        s.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MappingKind {
    Repeat,
    Spatial,
    /// `table[w]` is the ordered task list of worker `w`.
    Custom(Arc<Vec<Vec<Task>>>),
    Compose(Arc<TaskMapping>, Arc<TaskMapping>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MappingRepr", into = "MappingRepr")]
pub struct TaskMapping {
    kind: MappingKind,
    num_workers: usize,
    shape: TaskShape,
}

impl TaskMapping {
    pub fn repeat(dims: &[usize]) -> Result<Self, MappingError> {
        Ok(TaskMapping {
            kind: MappingKind::Repeat,
            num_workers: 1,
            shape: TaskShape::new(dims.to_vec())?,
        })
    }

    pub fn spatial(dims: &[usize]) -> Result<Self, MappingError> {
        let shape = TaskShape::new(dims.to_vec())?;
        Ok(TaskMapping {
            kind: MappingKind::Spatial,
            num_workers: shape.size(),
            shape,
        })
    }

    pub fn custom(
        num_workers: usize,
        dims: &[usize],
        table: Vec<Vec<Task>>,
    ) -> Result<Self, MappingError> {
        let shape = TaskShape::new(dims.to_vec())?;
        if num_workers == 0 {
            return Err(MappingError::InvalidCustom("needs at least one worker".into()));
        }
        if table.len() != num_workers {
            return Err(MappingError::InvalidCustom(format!(
                "table lists {} workers, expected {num_workers}",
                table.len()
            )));
        }
        for (w, tasks) in table.iter().enumerate() {
            if let Some(t) = tasks.iter().find(|t| !shape.contains(t)) {
                return Err(MappingError::InvalidCustom(format!(
                    "worker {w} task {t:?} outside task shape {:?}",
                    shape.dims()
                )));
            }
        }
        Ok(TaskMapping {
            kind: MappingKind::Custom(Arc::new(table)),
            num_workers,
            shape,
        })
    }

    /// `self * other`: `other` runs inside every worker and task of `self`.
    pub fn compose(&self, other: &TaskMapping) -> Result<Self, MappingError> {
        if self.dim() != other.dim() {
            return Err(MappingError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        let num_workers = self
            .num_workers
            .checked_mul(other.num_workers)
            .ok_or(MappingError::Overflow)?;
        let shape = self.shape.hadamard(&other.shape).ok_or(MappingError::Overflow)?;
        Ok(TaskMapping {
            kind: MappingKind::Compose(Arc::new(self.clone()), Arc::new(other.clone())),
            num_workers,
            shape,
        })
    }

    pub fn kind(&self) -> &MappingKind {
        &self.kind
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    pub fn task_shape(&self) -> &TaskShape {
        &self.shape
    }

    /// Task dimension `m`.
    pub fn dim(&self) -> usize {
        self.shape.rank()
    }

    pub fn assign(&self, worker: usize) -> Result<Vec<Task>, MappingError> {
        if worker >= self.num_workers {
            return Err(MappingError::WorkerOutOfRange {
                worker,
                num_workers: self.num_workers,
            });
        }
        let mut out = Vec::new();
        self.assign_into(worker, &mut out);
        Ok(out)
    }

    fn assign_into(&self, worker: usize, out: &mut Vec<Task>) {
        match &self.kind {
            MappingKind::Repeat => {
                out.extend((0..self.shape.size()).map(|i| self.shape.unlinearize(i)));
            }
            MappingKind::Spatial => out.push(self.shape.unlinearize(worker)),
            MappingKind::Custom(table) => out.extend(table[worker].iter().cloned()),
            MappingKind::Compose(outer, inner) => {
                let n2 = inner.num_workers;
                let d2 = inner.shape.dims();
                let mut outer_tasks = Vec::new();
                outer.assign_into(worker / n2, &mut outer_tasks);
                let mut inner_tasks = Vec::new();
                inner.assign_into(worker % n2, &mut inner_tasks);
                for t1 in &outer_tasks {
                    for t2 in &inner_tasks {
                        out.push(
                            t1.iter()
                                .zip(t2)
                                .zip(d2)
                                .map(|((a, b), d)| a * d + b)
                                .collect(),
                        );
                    }
                }
            }
        }
    }

    /// Number of tasks every worker receives, when it is the same for all.
    pub fn tasks_per_worker(&self) -> Option<usize> {
        match &self.kind {
            MappingKind::Repeat => Some(self.shape.size()),
            MappingKind::Spatial => Some(1),
            MappingKind::Custom(table) => {
                let n = table[0].len();
                table.iter().all(|t| t.len() == n).then_some(n)
            }
            MappingKind::Compose(a, b) => Some(a.tasks_per_worker()? * b.tasks_per_worker()?),
        }
    }

    /// Atoms of a composition chain, outermost first.
    pub fn atoms(&self) -> Vec<&TaskMapping> {
        match &self.kind {
            MappingKind::Compose(a, b) => {
                let mut v = a.atoms();
                v.extend(b.atoms());
                v
            }
            _ => vec![self],
        }
    }

    pub fn contains_custom(&self) -> bool {
        self.atoms()
            .iter()
            .any(|a| matches!(a.kind, MappingKind::Custom(_)))
    }

    /// Renders the task grid with `w{worker}:{order}` in every cell.
    /// Unassigned cells show `.`; tasks owned by several workers list all of
    /// them separated by `|`.
    pub fn visualize(&self) -> Result<String, MappingError> {
        if self.dim() > 2 {
            return Err(MappingError::TooManyDimensions(self.dim()));
        }
        let (rows, cols) = match self.shape.dims() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => unreachable!(),
        };
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); rows * cols];
        for w in 0..self.num_workers {
            let mut tasks = Vec::new();
            self.assign_into(w, &mut tasks);
            for (order, t) in tasks.iter().enumerate() {
                cells[self.shape.linearize(t)].push(format!("w{w}:{order}"));
            }
        }
        let text: Vec<String> = cells
            .into_iter()
            .map(|c| if c.is_empty() { ".".to_string() } else { c.join("|") })
            .collect();
        let width = text.iter().map(|s| s.len()).max().unwrap_or(1);
        let mut out = String::new();
        for r in 0..rows {
            let line: Vec<String> = (0..cols)
                .map(|c| format!("{:<width$}", text[r * cols + c]))
                .collect();
            out.push_str(line.join(" ").trim_end());
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses `repeat(..)`, `spatial(..)`, `custom(n, [dims], [[task..]..])`
    /// chains joined by `*`, with optional parentheses.
    pub fn parse(src: &str) -> Result<Self, MappingError> {
        let mut cur = Cursor::new(src)?;
        let m = parse_mapping(&mut cur)?;
        if !cur.at_end() {
            return Err(cur.unexpected::<()>("end of mapping").unwrap_err().into());
        }
        Ok(m)
    }
}

pub(crate) fn parse_mapping(cur: &mut Cursor) -> Result<TaskMapping, MappingError> {
    let mut acc = parse_mapping_term(cur)?;
    while cur.eat_punct("*") {
        let rhs = parse_mapping_term(cur)?;
        acc = acc.compose(&rhs)?;
    }
    Ok(acc)
}

fn parse_mapping_term(cur: &mut Cursor) -> Result<TaskMapping, MappingError> {
    if cur.eat_punct("(") {
        let m = parse_mapping(cur)?;
        cur.expect_punct(")")?;
        return Ok(m);
    }
    let line = cur.line();
    match cur.next() {
        Some(Token::Ident(name)) if name == "repeat" || name == "spatial" => {
            let dims = cur.list("(", ")", |c| c.expect_usize())?;
            if name == "repeat" {
                TaskMapping::repeat(&dims)
            } else {
                TaskMapping::spatial(&dims)
            }
        }
        Some(Token::Ident(name)) if name == "custom" => {
            cur.expect_punct("(")?;
            let n = cur.expect_usize()?;
            cur.expect_punct(",")?;
            let dims = cur.list("[", "]", |c| c.expect_usize())?;
            cur.expect_punct(",")?;
            let table = cur.list("[", "]", |c| {
                c.list("[", "]", |c| c.list("[", "]", |c| c.expect_usize()))
            })?;
            cur.expect_punct(")")?;
            TaskMapping::custom(n, &dims, table)
        }
        Some(t) => Err(SyntaxError {
            line,
            message: format!("expected mapping, found {t}"),
        }
        .into()),
        None => Err(SyntaxError {
            line,
            message: "expected mapping, found end of input".into(),
        }
        .into()),
    }
}

fn write_dims(f: &mut fmt::Formatter<'_>, dims: &[usize]) -> fmt::Result {
    let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    write!(f, "{}", parts.join(", "))
}

impl fmt::Display for TaskMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            MappingKind::Repeat => {
                write!(f, "repeat(")?;
                write_dims(f, self.shape.dims())?;
                write!(f, ")")
            }
            MappingKind::Spatial => {
                write!(f, "spatial(")?;
                write_dims(f, self.shape.dims())?;
                write!(f, ")")
            }
            MappingKind::Custom(table) => {
                write!(f, "custom({}, [", self.num_workers)?;
                write_dims(f, self.shape.dims())?;
                write!(f, "], [")?;
                for (w, tasks) in table.iter().enumerate() {
                    if w > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "[")?;
                    for (k, t) in tasks.iter().enumerate() {
                        if k > 0 {
                            write!(f, ", ")?;
                        }
                        write!(f, "[")?;
                        write_dims(f, t)?;
                        write!(f, "]")?;
                    }
                    write!(f, "]")?;
                }
                write!(f, "])")
            }
            MappingKind::Compose(a, b) => {
                if matches!(b.kind, MappingKind::Compose(..)) {
                    write!(f, "{a} * ({b})")
                } else {
                    write!(f, "{a} * {b}")
                }
            }
        }
    }
}

impl std::ops::Mul for TaskMapping {
    type Output = TaskMapping;

    /// Panics when the task dimensions differ; use [`TaskMapping::compose`]
    /// for a fallible version.
    fn mul(self, rhs: TaskMapping) -> TaskMapping {
        self.compose(&rhs).expect("task mapping composition")
    }
}

impl std::ops::Mul for &TaskMapping {
    type Output = TaskMapping;

    fn mul(self, rhs: &TaskMapping) -> TaskMapping {
        self.compose(rhs).expect("task mapping composition")
    }
}

/// JSON form: `{"kind": "repeat"|"spatial", "dims": [..]}`,
/// `{"kind": "custom", "num_workers": n, "dims": [..], "table": [..]}` or
/// `{"kind": "compose", "children": [a, b, ...]}` (left-associated).
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MappingRepr {
    Repeat {
        dims: Vec<usize>,
    },
    Spatial {
        dims: Vec<usize>,
    },
    Custom {
        num_workers: usize,
        dims: Vec<usize>,
        table: Vec<Vec<Task>>,
    },
    Compose {
        children: Vec<TaskMapping>,
    },
}

impl TryFrom<MappingRepr> for TaskMapping {
    type Error = MappingError;

    fn try_from(r: MappingRepr) -> Result<Self, Self::Error> {
        match r {
            MappingRepr::Repeat { dims } => TaskMapping::repeat(&dims),
            MappingRepr::Spatial { dims } => TaskMapping::spatial(&dims),
            MappingRepr::Custom {
                num_workers,
                dims,
                table,
            } => TaskMapping::custom(num_workers, &dims, table),
            MappingRepr::Compose { children } => {
                let mut it = children.into_iter();
                let first = it
                    .next()
                    .ok_or_else(|| MappingError::InvalidCustom("empty composition".into()))?;
                it.try_fold(first, |acc, m| acc.compose(&m))
            }
        }
    }
}

impl From<TaskMapping> for MappingRepr {
    fn from(m: TaskMapping) -> Self {
        match m.kind {
            MappingKind::Repeat => MappingRepr::Repeat {
                dims: m.shape.0,
            },
            MappingKind::Spatial => MappingRepr::Spatial {
                dims: m.shape.0,
            },
            MappingKind::Custom(table) => MappingRepr::Custom {
                num_workers: m.num_workers,
                dims: m.shape.0,
                table: (*table).clone(),
            },
            MappingKind::Compose(a, b) => MappingRepr::Compose {
                children: vec![(*a).clone(), (*b).clone()],
            },
        }
    }
}
