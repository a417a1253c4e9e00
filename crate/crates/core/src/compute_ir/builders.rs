use serde::{Deserialize, Serialize};

use crate::expr::{simplify, ConstTable, Expr, Interval, Ranges};

use super::{axis_names, Axis, Combiner, ComputeDag, DType, DagError, NodeBody, TensorNode};

/// Incremental construction of a [`ComputeDag`]. Every operator method
/// appends one or more nodes and returns the name of the result.
#[derive(Default)]
pub struct DagBuilder {
    nodes: Vec<TensorNode>,
    inputs: Vec<String>,
}

impl DagBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        &self.node(name).shape
    }

    pub fn dtype(&self, name: &str) -> DType {
        self.node(name).dtype
    }

    fn node(&self, name: &str) -> &TensorNode {
        self.nodes
            .iter()
            .find(|n| n.name == name)
            .unwrap_or_else(|| panic!("unknown tensor `{name}`"))
    }

    pub fn input(&mut self, name: &str, shape: &[usize], dtype: DType) -> String {
        self.inputs.push(name.to_string());
        self.nodes.push(TensorNode {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype,
            body: NodeBody::Input,
        });
        name.to_string()
    }

    pub fn compute(&mut self, name: &str, axes: Vec<Axis>, dtype: DType, value: Expr) -> String {
        self.nodes.push(TensorNode {
            name: name.to_string(),
            shape: axes.iter().map(|a| a.extent).collect(),
            dtype,
            body: NodeBody::Compute { axes, value },
        });
        name.to_string()
    }

    pub fn reduce_node(
        &mut self,
        name: &str,
        axes: Vec<Axis>,
        reduce_axes: Vec<Axis>,
        combiner: Combiner,
        dtype: DType,
        value: Expr,
    ) -> String {
        self.nodes.push(TensorNode {
            name: name.to_string(),
            shape: axes.iter().map(|a| a.extent).collect(),
            dtype,
            body: NodeBody::Reduce {
                axes,
                reduce_axes,
                combiner,
                value,
            },
        });
        name.to_string()
    }

    fn default_axes(shape: &[usize]) -> Vec<Axis> {
        axis_names(shape.len())
            .into_iter()
            .zip(shape)
            .map(|(n, d)| Axis::new(n, *d))
            .collect()
    }

    /// `C[i, j] = sum_k A[i, k] * B[k, j]`.
    pub fn matmul(&mut self, name: &str, a: &str, b: &str) -> Result<String, DagError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DagError::Geometry(format!(
                "matmul of {sa:?} and {sb:?}"
            )));
        }
        let dtype = self.dtype(a);
        let (i, j, k) = (Expr::var("i"), Expr::var("j"), Expr::var("k"));
        Ok(self.reduce_node(
            name,
            vec![Axis::new("i", sa[0]), Axis::new("j", sb[1])],
            vec![Axis::new("k", sa[1])],
            Combiner::Sum,
            dtype,
            Expr::load(a, vec![i, k.clone()]) * Expr::load(b, vec![k, j]),
        ))
    }

    /// Elementwise operator over same-shaped inputs.
    pub fn elementwise(
        &mut self,
        name: &str,
        inputs: &[&str],
        f: impl Fn(&[Expr]) -> Expr,
    ) -> Result<String, DagError> {
        let shape = self.shape(inputs[0]).to_vec();
        if let Some(bad) = inputs.iter().find(|x| self.shape(x) != shape.as_slice()) {
            return Err(DagError::Geometry(format!(
                "elementwise input `{bad}` has shape {:?}, expected {shape:?}",
                self.shape(bad)
            )));
        }
        let dtype = self.dtype(inputs[0]);
        let axes = Self::default_axes(&shape);
        let idx: Vec<Expr> = axes.iter().map(|a| Expr::var(&a.name)).collect();
        let args: Vec<Expr> = inputs.iter().map(|x| Expr::load(*x, idx.clone())).collect();
        Ok(self.compute(name, axes, dtype, f(&args)))
    }

    pub fn relu(&mut self, name: &str, x: &str) -> String {
        self.elementwise(name, &[x], |a| a[0].clone().relu())
            .expect("single input")
    }

    /// Row-major reinterpretation with the same number of elements.
    pub fn reshape(&mut self, name: &str, x: &str, shape: &[usize]) -> Result<String, DagError> {
        let from = self.shape(x).to_vec();
        if from.iter().product::<usize>() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(DagError::Geometry(format!("reshape {from:?} to {shape:?}")));
        }
        let axes = Self::default_axes(shape);
        let mut ranges = Ranges::new();
        for a in &axes {
            ranges.insert(a.name.clone(), Interval::extent(a.extent));
        }
        let flat = axes
            .iter()
            .fold(Expr::Int(0), |acc, a| acc * a.extent as i64 + Expr::var(&a.name));
        let mut idx = Vec::with_capacity(from.len());
        let mut stride: usize = from.iter().product();
        for (d, extent) in from.iter().enumerate() {
            stride /= extent;
            let q = flat.clone() / stride as i64;
            let e = if d == 0 { q } else { q % *extent as i64 };
            idx.push(simplify(&e, &ranges));
        }
        let dtype = self.dtype(x);
        Ok(self.compute(name, axes, dtype, Expr::load(x, idx)))
    }

    /// `out[a_0, ..] = x[b]` with `b[perm[d]] = a_d`.
    pub fn transpose(&mut self, name: &str, x: &str, perm: &[usize]) -> Result<String, DagError> {
        let from = self.shape(x).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..from.len()).collect::<Vec<_>>() {
            return Err(DagError::Geometry(format!(
                "permutation {perm:?} for rank {}",
                from.len()
            )));
        }
        let shape: Vec<usize> = perm.iter().map(|p| from[*p]).collect();
        let axes = Self::default_axes(&shape);
        let mut idx = vec![Expr::Int(0); from.len()];
        for (d, p) in perm.iter().enumerate() {
            idx[*p] = Expr::var(&axes[d].name);
        }
        let dtype = self.dtype(x);
        Ok(self.compute(name, axes, dtype, Expr::load(x, idx)))
    }

    /// Inference batch normalization over dimension 1 of an NCHW-style
    /// tensor, folded into per-channel constant scale and shift tables.
    pub fn batchnorm(
        &mut self,
        name: &str,
        x: &str,
        params: &BatchNormParams,
    ) -> Result<String, DagError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || params.channels() != shape[1] {
            return Err(DagError::Geometry(format!(
                "batchnorm with {} channels on {shape:?}",
                params.channels()
            )));
        }
        let (scale, shift) = params.fold();
        let axes = Self::default_axes(&shape);
        let idx: Vec<Expr> = axes.iter().map(|a| Expr::var(&a.name)).collect();
        let c = idx[1].clone();
        let value = Expr::load(x, idx) * Expr::table(ConstTable::floats(&scale), c.clone())
            + Expr::table(ConstTable::floats(&shift), c);
        let dtype = self.dtype(x);
        Ok(self.compute(name, axes, dtype, value))
    }

    /// Reduces the listed dimensions away.
    pub fn reduce(
        &mut self,
        name: &str,
        x: &str,
        dims: &[usize],
        combiner: Combiner,
    ) -> Result<String, DagError> {
        let shape = self.shape(x).to_vec();
        if dims.is_empty() || dims.iter().any(|d| *d >= shape.len()) {
            return Err(DagError::Geometry(format!(
                "reduce dims {dims:?} of {shape:?}"
            )));
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|d| !dims.contains(d)).collect();
        let names = axis_names(kept.len());
        let axes: Vec<Axis> = kept
            .iter()
            .zip(&names)
            .map(|(d, n)| Axis::new(n.clone(), shape[*d]))
            .collect();
        let mut reduced: Vec<usize> = dims.to_vec();
        reduced.sort_unstable();
        reduced.dedup();
        let reduce_axes: Vec<Axis> = reduced
            .iter()
            .enumerate()
            .map(|(r, d)| Axis::new(format!("r{r}"), shape[*d]))
            .collect();
        let idx: Vec<Expr> = (0..shape.len())
            .map(|d| match kept.iter().position(|k| *k == d) {
                Some(p) => Expr::var(&names[p]),
                None => Expr::var(format!("r{}", reduced.iter().position(|r| *r == d).unwrap())),
            })
            .collect();
        let dtype = self.dtype(x);
        Ok(self.reduce_node(name, axes, reduce_axes, combiner, dtype, Expr::load(x, idx)))
    }

    /// Convolution as four operators: an im2col gather of the image, a
    /// flattening transform of the filter, a matmul and a reshape back to
    /// NCHW. Intermediate names get `_col`, `_wflat` and `_mm` suffixes.
    pub fn conv2d(
        &mut self,
        name: &str,
        x: &str,
        w: &str,
        stride: usize,
        pad: usize,
    ) -> Result<String, DagError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(DagError::Geometry(format!("conv2d of {xs:?} with {ws:?}")));
        }
        let g = ConvGeometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        g.check()?;
        let (ho, wo) = (g.out_h() as i64, g.out_w() as i64);
        let (kh, kw) = (g.kh as i64, g.kw as i64);
        let (h, wd) = (g.h as i64, g.w as i64);
        let m = g.n * g.out_h() * g.out_w();
        let k = g.c * g.kh * g.kw;

        let (p, q) = (Expr::var("i"), Expr::var("j"));
        let n_idx = p.clone() / (ho * wo);
        let oh = p.clone() / wo % ho;
        let ow = p.clone() % wo;
        let c_idx = q.clone() / (kh * kw);
        let ki = q.clone() / kw % kh;
        let kj = q.clone() % kw;
        let ih = oh * stride as i64 + ki - pad as i64;
        let iw = ow * stride as i64 + kj - pad as i64;
        let inside = if pad == 0 {
            Expr::Int(1)
        } else {
            ih.clone()
                .ge(0i64)
                .and(ih.clone().lt(h))
                .and(iw.clone().ge(0i64))
                .and(iw.clone().lt(wd))
        };
        let clamp = |e: Expr, hi: i64| if pad == 0 { e } else { e.max(0i64).min(hi - 1) };
        let gather = Expr::load(
            x,
            vec![n_idx, c_idx, clamp(ih, h), clamp(iw, wd)],
        );
        let zero = match self.dtype(x) {
            DType::I32 => Expr::Int(0),
            DType::F32 => Expr::float(0.0),
        };
        let col_value = if pad == 0 {
            gather
        } else {
            Expr::select(inside, gather, zero)
        };
        let dtype = self.dtype(x);
        let col = self.compute(
            &format!("{name}_col"),
            vec![Axis::new("i", m), Axis::new("j", k)],
            dtype,
            col_value,
        );

        let (r, f) = (Expr::var("i"), Expr::var("j"));
        let wflat = self.compute(
            &format!("{name}_wflat"),
            vec![Axis::new("i", k), Axis::new("j", g.f)],
            self.dtype(w),
            Expr::load(
                w,
                vec![f, r.clone() / (kh * kw), r.clone() / kw % kh, r % kw],
            ),
        );
        let mm = self.matmul(&format!("{name}_mm"), &col, &wflat)?;

        let axes = Self::default_axes(&[g.n, g.f, g.out_h(), g.out_w()]);
        let v = |d: usize| Expr::var(&axes[d].name);
        let row = (v(0) * ho + v(2)) * wo + v(3);
        let mut ranges = Ranges::new();
        for a in &axes {
            ranges.insert(a.name.clone(), Interval::extent(a.extent));
        }
        let value = Expr::load(&mm, vec![simplify(&row, &ranges), v(1)]);
        Ok(self.compute(name, axes, dtype, value))
    }

    pub fn build(self, outputs: &[&str]) -> Result<ComputeDag, DagError> {
        let dag = ComputeDag {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        dag.validate()?;
        Ok(dag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn check(&self) -> Result<(), DagError> {
        let dims = [self.n, self.c, self.h, self.w, self.f, self.kh, self.kw, self.stride];
        if dims.contains(&0) {
            return Err(DagError::Geometry(format!("zero extent in {self:?}")));
        }
        if self.kh > self.h + 2 * self.pad || self.kw > self.w + 2 * self.pad {
            return Err(DagError::Geometry(format!(
                "filter {}x{} larger than padded image {}x{}",
                self.kh,
                self.kw,
                self.h + 2 * self.pad,
                self.w + 2 * self.pad
            )));
        }
        if self.pad >= self.kh || self.pad >= self.kw {
            return Err(DagError::Geometry(format!(
                "padding {} must be smaller than the filter",
                self.pad
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `scale = gamma / sqrt(var + eps)`, `shift = beta - mean * scale`.
    pub fn fold(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// `C[M, N] = A[M, K] @ B[K, N]`.
pub fn matmul(m: usize, n: usize, k: usize, dtype: DType) -> ComputeDag {
    let mut b = DagBuilder::new();
    b.input("A", &[m, k], dtype);
    b.input("B", &[k, n], dtype);
    b.matmul("C", "A", "B").expect("matmul shapes");
    b.build(&["C"]).expect("matmul dag")
}

/// Convolution of `X[N, C, H, W]` with `W[F, C, Kh, Kw]` into `Y`.
pub fn conv2d_im2col(g: ConvGeometry, dtype: DType) -> Result<ComputeDag, DagError> {
    g.check()?;
    let mut b = DagBuilder::new();
    b.input("X", &[g.n, g.c, g.h, g.w], dtype);
    b.input("W", &[g.f, g.c, g.kh, g.kw], dtype);
    b.conv2d("Y", "X", "W", g.stride, g.pad)?;
    b.build(&["Y"])
}

/// `Y = f(X0, X1, ...)` elementwise; a single input is named `X`.
pub fn elementwise(
    shape: &[usize],
    dtype: DType,
    arity: usize,
    f: impl Fn(&[Expr]) -> Expr,
) -> ComputeDag {
    let mut b = DagBuilder::new();
    let names: Vec<String> = if arity == 1 {
        vec![b.input("X", shape, dtype)]
    } else {
        (0..arity)
            .map(|i| b.input(&format!("X{i}"), shape, dtype))
            .collect()
    };
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    b.elementwise("Y", &refs, f).expect("same shapes");
    b.build(&["Y"]).expect("elementwise dag")
}

pub fn reshape(from: &[usize], to: &[usize], dtype: DType) -> Result<ComputeDag, DagError> {
    let mut b = DagBuilder::new();
    b.input("X", from, dtype);
    b.reshape("Y", "X", to)?;
    b.build(&["Y"])
}

pub fn transpose(shape: &[usize], perm: &[usize], dtype: DType) -> Result<ComputeDag, DagError> {
    let mut b = DagBuilder::new();
    b.input("X", shape, dtype);
    b.transpose("Y", "X", perm)?;
    b.build(&["Y"])
}

pub fn batchnorm_inference(
    shape: &[usize],
    params: &BatchNormParams,
    dtype: DType,
) -> Result<ComputeDag, DagError> {
    let mut b = DagBuilder::new();
    b.input("X", shape, dtype);
    b.batchnorm("Y", "X", params)?;
    b.build(&["Y"])
}

pub fn reduce(
    shape: &[usize],
    dims: &[usize],
    combiner: Combiner,
    dtype: DType,
) -> Result<ComputeDag, DagError> {
    let mut b = DagBuilder::new();
    b.input("X", shape, dtype);
    b.reduce("Y", "X", dims, combiner)?;
    b.build(&["Y"])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_indices_are_closed_form() {
        let dag = reshape(&[100], &[2, 50], DType::F32).unwrap();
        assert_eq!(dag.node("Y").unwrap().value().unwrap().to_string(), "X[i * 50 + j]");
        let dag = reshape(&[2, 50], &[100], DType::F32).unwrap();
        assert_eq!(dag.node("Y").unwrap().value().unwrap().to_string(), "X[i / 50, i % 50]");
    }

    #[test]
    fn conv_has_four_operators() {
        let g = ConvGeometry {
            n: 1,
            c: 4,
            h: 8,
            w: 8,
            f: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        let dag = conv2d_im2col(g, DType::I32).unwrap();
        let names: Vec<&str> = dag.computed().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["Y_col", "Y_wflat", "Y_mm", "Y"]);
        assert_eq!(dag.node("Y").unwrap().shape, vec![1, 4, 8, 8]);
        assert_eq!(dag.node("Y_mm").unwrap().shape, vec![64, 4]);
    }

    #[test]
    fn geometry_errors() {
        let mut g = ConvGeometry {
            n: 1,
            c: 1,
            h: 3,
            w: 3,
            f: 1,
            kh: 4,
            kw: 4,
            stride: 1,
            pad: 0,
        };
        assert!(conv2d_im2col(g, DType::I32).is_err());
        g.kh = 2;
        g.kw = 2;
        g.stride = 0;
        assert!(conv2d_im2col(g, DType::I32).is_err());
        assert!(reshape(&[4], &[3], DType::I32).is_err());
        assert!(transpose(&[2, 3], &[0, 0], DType::I32).is_err());
    }
}
