//! A small reverse-mode automatic differentiation tape.
//!
//! Every forward op appends a node holding its value and a closure that maps the
//! output gradient to parent gradients. Nodes whose parents never require a
//! gradient carry no closure, so frozen sub-networks cost nothing on the way back.

use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &Ctx<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

/// Read access to forward values from inside a backward closure.
pub struct Ctx<'a> {
    nodes: &'a [Node],
}

impl Ctx<'_> {
    fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a backward pass, indexed by the `Var` they belong to.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, needs_grad, parents: Vec::new(), back: None });
        Var(self.nodes.len() - 1)
    }

    /// A constant input: gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, parents: &[Var], back: BackFn) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            back: if needs_grad { Some(back) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Backward pass seeded with `d(output)/d(root) = seed` for each pair.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.nodes[v.0].value.len(), g.len(), "seed shape mismatch");
            top = top.max(v.0 + 1);
            accumulate(&mut grads[v.0], g);
        }
        let ctx = Ctx { nodes: &self.nodes };
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.back.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_grads = back(&g, &ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if self.nodes[p].needs_grad {
                        accumulate(&mut grads[p], pg);
                    }
                }
            }
        }
        Grads { grads }
    }

    /// Backward from a scalar root with unit seed.
    pub fn backward_scalar(&self, root: Var) -> Grads {
        self.backward(vec![(root, Tensor::new(self.value(root).shape().to_vec(), vec![1.0]))])
    }

    // ----- linear algebra -------------------------------------------------

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av);
        let (k2, n) = dims2(bv);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = Tensor::new(vec![m, n], matmul(av.data(), false, bv.data(), false, m, k, n));
        self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                let ga = ctx.needs(a).then(|| {
                    Tensor::new(vec![m, k], matmul(g.data(), false, ctx.value(b).data(), true, m, n, k))
                });
                let gb = ctx.needs(b).then(|| {
                    Tensor::new(vec![k, n], matmul(ctx.value(a).data(), true, g.data(), false, k, m, n))
                });
                vec![ga, gb]
            }),
        )
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av);
        let (n, k2) = dims2(bv);
        assert_eq!(k, k2, "matmul_t inner dims {k} vs {k2}");
        let out = Tensor::new(vec![m, n], matmul(av.data(), false, bv.data(), true, m, k, n));
        self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                let ga = ctx.needs(a).then(|| {
                    Tensor::new(vec![m, k], matmul(g.data(), false, ctx.value(b).data(), false, m, n, k))
                });
                let gb = ctx.needs(b).then(|| {
                    Tensor::new(vec![n, k], matmul(g.data(), true, ctx.value(a).data(), false, n, m, k))
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = dims2(av);
        let out = Tensor::new(vec![n, m], transpose_data(av.data(), m, n));
        self.push(
            out,
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::new(vec![m, n], transpose_data(g.data(), n, m)))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let old = av.shape().to_vec();
        let out = av.clone().reshape(shape);
        self.push(out, &[a], Box::new(move |g, _| vec![Some(g.clone().reshape(&old))]))
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                let ga = ctx.needs(a).then(|| g.zip_map(ctx.value(b), |gi, y| gi * y));
                let gb = ctx.needs(b).then(|| g.zip_map(ctx.value(a), |gi, x| gi * x));
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], Box::new(move |g, _| vec![Some(g.map(|x| x * c))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, &[a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                vec![Some(g.zip_map(ctx.value(a), |gi, x| if x > 0.0 { gi } else { 0.0 }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let me = Var(self.nodes.len());
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| vec![Some(g.zip_map(ctx.value(me), |gi, s| gi * s * (1.0 - s)))]),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let me = Var(self.nodes.len());
        self.push(out, &[a], Box::new(move |g, ctx| vec![Some(g.zip_map(ctx.value(me), |gi, y| gi * y))]))
    }

    // ----- broadcasting ---------------------------------------------------

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        assert_eq!(self.value(b).len(), n, "add_row width");
        let mut out = self.value(a).clone();
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(x, y)| *x += y);
        }
        let bshape = self.value(b).shape().to_vec();
        self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                let gb = ctx.needs(b).then(|| {
                    let mut s = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        s.iter_mut().zip(row).for_each(|(acc, x)| *acc += x);
                    }
                    debug_assert_eq!(g.len(), m * n);
                    Tensor::new(bshape.clone(), s)
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// `[m,n] + [m]` broadcast over columns (per-row bias).
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let m = av.dim(0);
        let n = av.len() / m;
        assert_eq!(self.value(b).len(), m, "add_col height");
        let mut out = av.clone();
        let bv = self.value(b).data().to_vec();
        for (row, y) in out.data_mut().chunks_mut(n).zip(&bv) {
            row.iter_mut().for_each(|x| *x += y);
        }
        let bshape = self.value(b).shape().to_vec();
        self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                let gb = ctx
                    .needs(b)
                    .then(|| Tensor::new(bshape.clone(), g.data().chunks(n).map(|r| r.iter().sum()).collect()));
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// `[m,n] ⊙ [n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (_, n) = dims2(self.value(a));
        assert_eq!(self.value(b).len(), n, "mul_row width");
        let mut out = self.value(a).clone();
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(x, y)| *x *= y);
        }
        let bshape = self.value(b).shape().to_vec();
        self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                let bv = ctx.value(b).data();
                let ga = ctx.needs(a).then(|| {
                    let mut ga = g.clone();
                    for row in ga.data_mut().chunks_mut(n) {
                        row.iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
                    }
                    ga
                });
                let gb = ctx.needs(b).then(|| {
                    let mut s = vec![0.0; n];
                    for (grow, arow) in g.data().chunks(n).zip(ctx.value(a).data().chunks(n)) {
                        for j in 0..n {
                            s[j] += grow[j] * arow[j];
                        }
                    }
                    Tensor::new(bshape.clone(), s)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `[d] → [d,h,w]`, each channel filled with its scalar.
    pub fn broadcast_map(&mut self, v: Var, h: usize, w: usize) -> Var {
        let d = self.value(v).len();
        let hw = h * w;
        let mut out = Vec::with_capacity(d * hw);
        for &x in self.value(v).data() {
            out.extend(std::iter::repeat_n(x, hw));
        }
        let vshape = self.value(v).shape().to_vec();
        self.push(
            Tensor::new(vec![d, h, w], out),
            &[v],
            Box::new(move |g, _| {
                vec![Some(Tensor::new(vshape.clone(), g.data().chunks(hw).map(|c| c.iter().sum()).collect()))]
            }),
        )
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `[m,n] → [m]`, summing each row.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        let out = Tensor::new(vec![m], self.value(a).data().chunks(n).map(|r| r.iter().sum()).collect());
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut ga = Vec::with_capacity(m * n);
                for &gi in g.data() {
                    ga.extend(std::iter::repeat_n(gi, n));
                }
                vec![Some(Tensor::new(vec![m, n], ga))]
            }),
        )
    }

    /// Spatial mean: `[c,h,w] → [1,c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let c = self.value(a).dim(0);
        let flat = self.reshape(a, &[c, self.value(a).len() / c]);
        let hw = self.value(flat).dim(1) as f64;
        let s = self.row_sums(flat);
        let s = self.scale(s, 1.0 / hw);
        self.reshape(s, &[1, c])
    }

    // ----- normalisation --------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = dims2(self.value(a));
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let me = Var(self.nodes.len());
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                let y = ctx.value(me);
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                vec![Some(ga)]
            }),
        )
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = dims2(self.value(a));
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(m);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let me = Var(self.nodes.len());
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                let y = ctx.value(me);
                let mut ga = g.clone();
                for ((grow, yrow), is) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(&inv_std) {
                    let mg = grow.iter().sum::<f64>() / n as f64;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = is * (*gi - mg - yi * mgy);
                    }
                }
                vec![Some(ga)]
            }),
        )
    }

    /// `[1,n] → [1,n]` divided by its sum (inputs must be positive).
    pub fn normalize_sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).sum();
        let out = self.value(a).map(|x| x / s);
        let me = Var(self.nodes.len());
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                let y = ctx.value(me);
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                vec![Some(g.map(|gi| (gi - dot) / s))]
            }),
        )
    }

    // ----- slicing & assembly ---------------------------------------------

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let (m, n) = dims2(av);
        assert!(start < end && end <= m, "slice_rows {start}..{end} of {m}");
        let out = Tensor::new(vec![end - start, n], av.data()[start * n..end * n].to_vec());
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; m * n];
                ga[start * n..end * n].copy_from_slice(g.data());
                vec![Some(Tensor::new(vec![m, n], ga))]
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let (m, n) = dims2(av);
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in av.data().chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(
            Tensor::new(vec![m, w], out),
            &[a],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; m * n];
                for (dst, src) in ga.chunks_mut(n).zip(g.data().chunks(w)) {
                    dst[start..end].copy_from_slice(src);
                }
                vec![Some(Tensor::new(vec![m, n], ga))]
            }),
        )
    }

    /// Concatenate along the leading axis; trailing axes must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat0 of nothing");
        let tail: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat0 trailing shape mismatch");
            lead += v.dim(0);
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
        self.push(
            Tensor::new(shape, data),
            parts,
            Box::new(move |g, _| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(&shapes)
                    .map(|(&len, shape)| {
                        let t = Tensor::new(shape.clone(), g.data()[off..off + len].to_vec());
                        off += len;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = dims2(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = dims2(self.value(p));
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![m, n], out),
            parts,
            Box::new(move |g, _| {
                let mut off = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut d = Vec::with_capacity(m * w);
                        for row in g.data().chunks(n) {
                            d.extend_from_slice(&row[off..off + w]);
                        }
                        off += w;
                        Some(Tensor::new(vec![m, w], d))
                    })
                    .collect()
            }),
        )
    }

    /// Select rows of a `[m,n]` tensor; repeated indices accumulate on the way back.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = dims2(self.value(a));
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather_rows index {i} out of {m}");
            out.extend_from_slice(&self.value(a).data()[i * n..(i + 1) * n]);
        }
        let idx = idx.to_vec();
        self.push(
            Tensor::new(vec![idx.len(), n], out),
            &[a],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; m * n];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[i * n + j] += g.data()[k * n + j];
                    }
                }
                vec![Some(Tensor::new(vec![m, n], ga))]
            }),
        )
    }

    // ----- spatial --------------------------------------------------------

    /// Square-kernel convolution. `x: [c,h,w]`, `w: [o,c,k,k]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [c,h,w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [o,c,k,k]");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d channel mismatch: weight {} vs input {c}", ws[1]);
        assert_eq!(self.value(b).len(), o, "conv2d bias length");
        let geom = ConvGeom { c, h, w: wd, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let cols = geom.im2col(self.value(x).data());
        let ckk = c * k * k;
        let mut out = matmul(self.value(w).data(), false, &cols, false, o, ckk, ho * wo);
        for (row, bias) in out.chunks_mut(ho * wo).zip(self.value(b).data()) {
            row.iter_mut().for_each(|v| *v += bias);
        }
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            &[x, w, b],
            Box::new(move |g, ctx| {
                let p = ho * wo;
                let gx = ctx.needs(x).then(|| {
                    let gcols = matmul(ctx.value(w).data(), true, g.data(), false, ckk, o, p);
                    Tensor::new(vec![c, h, wd], geom.col2im(&gcols))
                });
                let gw = ctx.needs(w).then(|| {
                    let cols = geom.im2col(ctx.value(x).data());
                    Tensor::new(vec![o, c, k, k], matmul(g.data(), false, &cols, true, o, p, ckk))
                });
                let gb = ctx
                    .needs(b)
                    .then(|| Tensor::new(vec![o], g.data().chunks(p).map(|r| r.iter().sum()).collect()));
                vec![gx, gw, gb]
            }),
        )
    }

    /// Kernel-2 stride-2 transposed convolution. `x: [c,h,w]`, `w: [c,o,2,2]`, `b: [o]` → `[o,2h,2w]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        assert_eq!(ws[0], c, "conv_transpose channel mismatch");
        assert_eq!((ws[2], ws[3]), (2, 2), "conv_transpose kernel must be 2×2");
        let o = ws[1];
        let p = h * wd;
        // cols[(oc,di,dj), pix] = Σ_c w[c,(oc,di,dj)] · x[c,pix]
        let cols = matmul(self.value(w).data(), true, self.value(x).data(), false, o * 4, c, p);
        let (h2, w2) = (2 * h, 2 * wd);
        let mut out = vec![0.0; o * h2 * w2];
        let bias = self.value(b).data();
        for oc in 0..o {
            for di in 0..2 {
                for dj in 0..2 {
                    let row = &cols[((oc * 2 + di) * 2 + dj) * p..][..p];
                    for i in 0..h {
                        for j in 0..wd {
                            out[(oc * h2 + 2 * i + di) * w2 + 2 * j + dj] = row[i * wd + j] + bias[oc];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![o, h2, w2], out),
            &[x, w, b],
            Box::new(move |g, ctx| {
                let gd = g.data();
                let mut gcols = vec![0.0; o * 4 * p];
                for oc in 0..o {
                    for di in 0..2 {
                        for dj in 0..2 {
                            let row = &mut gcols[((oc * 2 + di) * 2 + dj) * p..][..p];
                            for i in 0..h {
                                for j in 0..wd {
                                    row[i * wd + j] = gd[(oc * h2 + 2 * i + di) * w2 + 2 * j + dj];
                                }
                            }
                        }
                    }
                }
                let gx = ctx.needs(x).then(|| {
                    Tensor::new(vec![c, h, wd], matmul(ctx.value(w).data(), false, &gcols, false, c, o * 4, p))
                });
                let gw = ctx.needs(w).then(|| {
                    Tensor::new(vec![c, o, 2, 2], matmul(ctx.value(x).data(), false, &gcols, true, c, p, o * 4))
                });
                let gb = ctx.needs(b).then(|| {
                    Tensor::new(vec![o], gd.chunks(h2 * w2).map(|r| r.iter().sum()).collect())
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let xs = self.value(x).shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h * factor, w * factor);
        let ry = interp_matrix(h, ho);
        let rx = interp_matrix(w, wo);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in self.value(x).data().chunks(h * w) {
            // Ry [ho,h] · X [h,w] · Rxᵀ [w,wo]
            let t = matmul(&ry, false, ch, false, ho, h, w);
            out.extend(matmul(&t, false, &rx, true, ho, w, wo));
        }
        self.push(
            Tensor::new(vec![c, ho, wo], out),
            &[x],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(c * h * w);
                for gc in g.data().chunks(ho * wo) {
                    let t = matmul(&ry, true, gc, false, h, ho, wo);
                    gx.extend(matmul(&t, false, &rx, false, h, wo, w));
                }
                vec![Some(Tensor::new(vec![c, h, w], gx))]
            }),
        )
    }

    /// Non-overlapping `factor×factor` mean pooling on `[c,h,w]`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let xs = self.value(x).shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h % factor == 0 && w % factor == 0, "avg_pool factor must divide the input");
        let (ho, wo) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ch * ho + i / factor) * wo + j / factor] += xd[(ch * h + i) * w + j] * norm;
                }
            }
        }
        self.push(
            Tensor::new(vec![c, ho, wo], out),
            &[x],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(ch * h + i) * w + j] = gd[(ch * ho + i / factor) * wo + j / factor] * norm;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], gx))]
            }),
        )
    }

    // ----- losses ---------------------------------------------------------

    /// Mean binary cross-entropy between probabilities `q` and a fixed target.
    /// Probabilities are clamped to `[eps, 1-eps]`; the gradient vanishes where clamping is active.
    pub fn bce_mean(&mut self, q: Var, target: &[f64]) -> Var {
        self.bce_weighted(q, target, &vec![1.0; target.len()])
    }

    /// `Σ wᵢ·bce(qᵢ, tᵢ) / n`: per-pixel weights, still divided by the pixel count.
    pub fn bce_weighted(&mut self, q: Var, target: &[f64], weights: &[f64]) -> Var {
        const EPS: f64 = 1e-7;
        let qv = self.value(q);
        assert_eq!(qv.len(), target.len(), "bce target length");
        assert_eq!(qv.len(), weights.len(), "bce weight length");
        let n = target.len() as f64;
        let loss = qv
            .data()
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &t), &w)| {
                let p = p.clamp(EPS, 1.0 - EPS);
                -w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let target = target.to_vec();
        let weights = weights.to_vec();
        self.push(
            Tensor::scalar(loss),
            &[q],
            Box::new(move |g, ctx| {
                let gi = g.item();
                let qv = ctx.value(q);
                let d = qv
                    .data()
                    .iter()
                    .zip(&target)
                    .zip(&weights)
                    .map(|((&p, &t), &w)| {
                        if p <= EPS || p >= 1.0 - EPS {
                            0.0
                        } else {
                            gi * w * (p - t) / (p * (1.0 - p)) / n
                        }
                    })
                    .collect();
                vec![Some(Tensor::new(qv.shape().to_vec(), d))]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.shape().len(), 2, "expected a 2-D tensor, got shape {:?}", t.shape());
    (t.dim(0), t.dim(1))
}

fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `[out, inp]` linear-interpolation matrix with half-pixel centres.
fn interp_matrix(inp: usize, out: usize) -> Vec<f64> {
    let scale = inp as f64 / out as f64;
    let mut m = vec![0.0; out * inp];
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// `[c*k*k, ho*wo]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let p = ho * wo;
        let mut cols = vec![0.0; self.c * self.k * self.k * p];
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &mut cols[((ch * self.k + ki) * self.k + kj) * p..][..p];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = &x[(ch * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                row[oi * wo + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let p = ho * wo;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &cols[((ch * self.k + ki) * self.k + kj) * p..][..p];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(ch * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] += row[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
