//! Tape-based reverse-mode automatic differentiation.
//!
//! Values live in a `Vec<ArrayD<f32>>`; node handles are indices. Each op
//! records a backward closure that reads the adjoint of its output and
//! accumulates into the adjoints of its inputs. `backward` replays the tape
//! in reverse. Arrays are kept in standard (row-major) layout throughout so
//! reshapes are pure metadata checks.

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice};

/// Dense f32 tensor with dynamic rank.
pub type Arr = ArrayD<f32>;

/// Handle to a value on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn = Box<dyn Fn(&[Arr], &Arr, &mut [Option<Arr>])>;

/// Recording tape. Create one per forward/backward pass.
pub struct Tape {
    vals: Vec<Arr>,
    backs: Vec<Option<BackFn>>,
    keep: Vec<bool>,
    adjoints: Vec<Option<Arr>>,
    grad_enabled: bool,
}

fn to_std(a: Arr) -> Arr {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn acc(adj: &mut [Option<Arr>], id: usize, delta: Arr) {
    match &mut adj[id] {
        Some(a) => *a += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Sum `grad` down to `shape`, undoing an ndarray-style broadcast.
fn reduce_to_shape(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && gd != 1 {
            let summed = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            g = summed;
        }
    }
    to_std(g)
}

impl Tape {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            backs: Vec::new(),
            keep: Vec::new(),
            adjoints: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only tape; all backward bookkeeping is skipped.
    pub fn eval() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, v: Arr, back: Option<BackFn>) -> NodeId {
        let id = self.vals.len();
        self.vals.push(to_std(v));
        self.backs.push(if self.grad_enabled { back } else { None });
        self.keep.push(false);
        NodeId(id)
    }

    /// Constant leaf (no gradient is retained for it).
    pub fn constant(&mut self, v: Arr) -> NodeId {
        self.push(v, None)
    }

    /// Leaf whose gradient is retained after `backward`.
    pub fn leaf(&mut self, v: Arr) -> NodeId {
        let id = self.push(v, None);
        self.keep[id.0] = true;
        id
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.vals[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.vals[id.0].shape()
    }

    /// Adjoint of a kept leaf, if `backward` reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Arr> {
        self.adjoints.get(id.0).and_then(|g| g.as_ref())
    }

    /// Run reverse-mode accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(
            self.vals[loss.0].len() == 1,
            "backward expects a scalar loss, got shape {:?}",
            self.vals[loss.0].shape()
        );
        let mut adj: Vec<Option<Arr>> = vec![None; self.vals.len()];
        adj[loss.0] = Some(ArrayD::ones(self.vals[loss.0].raw_dim()));
        for i in (0..=loss.0).rev() {
            if let Some(g) = adj[i].take() {
                if let Some(back) = &self.backs[i] {
                    back(&self.vals, &g, &mut adj);
                }
                if self.keep[i] {
                    adj[i] = Some(g);
                }
            }
        }
        self.adjoints = adj;
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.push(
            v,
            Some(Box::new(move |_, g, adj| {
                acc(adj, a.0, g.clone());
                acc(adj, b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.push(
            v,
            Some(Box::new(move |_, g, adj| {
                acc(adj, a.0, g.clone());
                acc(adj, b.0, -g.clone());
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.vals[a.0] * &self.vals[b.0];
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                acc(adj, a.0, g * &vals[b.0]);
                acc(adj, b.0, g * &vals[a.0]);
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let v = &self.vals[a.0] * c;
        self.push(
            v,
            Some(Box::new(move |_, g, adj| {
                acc(adj, a.0, g * c);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let v = &self.vals[a.0] + c;
        self.push(
            v,
            Some(Box::new(move |_, g, adj| {
                acc(adj, a.0, g.clone());
            })),
        )
    }

    /// Broadcast `a` to `shape` following ndarray semantics (missing leading
    /// axes and size-1 axes expand). Backward sums over the expanded axes.
    pub fn bcast_to(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let in_shape = self.shape(a).to_vec();
        let v = self.vals[a.0]
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("bcast_to: {:?} -> {:?} invalid", in_shape, shape))
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |_, g, adj| {
                acc(adj, a.0, reduce_to_shape(g, &in_shape));
            })),
        )
    }

    // ---- structure ----

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let in_shape = self.shape(a).to_vec();
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = shape.iter().product();
        assert_eq!(n_in, n_out, "reshape: {:?} -> {:?}", in_shape, shape);
        let v = self.vals[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape of standard-layout array");
        self.push(
            v,
            Some(Box::new(move |_, g, adj| {
                let back = g
                    .clone()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape backward");
                acc(adj, a.0, back);
            })),
        )
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let axes = axes.to_vec();
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        let v = self.vals[a.0].clone().permuted_axes(IxDyn(&axes));
        self.push(
            to_std(v),
            Some(Box::new(move |_, g, adj| {
                let back = g.clone().permuted_axes(IxDyn(&inv));
                acc(adj, a.0, to_std(back));
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let parts = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
        self.push(
            v,
            Some(Box::new(move |_, g, adj| {
                let mut off = 0usize;
                for (p, &sz) in parts.iter().zip(sizes.iter()) {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(off..off + sz))
                        .to_owned();
                    acc(adj, p.0, to_std(piece.into_dyn()));
                    off += sz;
                }
            })),
        )
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let in_shape = self.shape(a).to_vec();
        assert!(end <= in_shape[axis] && start <= end, "slice out of bounds");
        let v = self.vals[a.0]
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |_, g, adj| {
                let mut full = ArrayD::<f32>::zeros(IxDyn(&in_shape));
                full.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                acc(adj, a.0, full);
            })),
        )
    }

    /// Cut the gradient flow: value copies through, backward stops here.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].clone();
        self.push(v, None)
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let a2 = self.vals[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be rank 2");
        let b2 = self.vals[b.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be rank 2");
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul inner dim");
        let v = a2.dot(&b2).into_dyn();
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
                acc(adj, a.0, g2.dot(&bv.t()).into_dyn());
                acc(adj, b.0, av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Batched matmul: `[.., m, k] x [.., k, n] -> [.., m, n]` with equal
    /// leading dimensions.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ra = sa.len();
        assert_eq!(ra, sb.len(), "bmm rank mismatch");
        assert!(ra >= 3, "bmm needs rank >= 3");
        assert_eq!(&sa[..ra - 2], &sb[..ra - 2], "bmm leading dims");
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = (sb[ra - 2], sb[ra - 1]);
        assert_eq!(k, kb, "bmm inner dim");
        let lead: usize = sa[..ra - 2].iter().product();
        let a3 = self.vals[a.0]
            .view()
            .into_shape_with_order(IxDyn(&[lead, m, k]))
            .unwrap();
        let b3 = self.vals[b.0]
            .view()
            .into_shape_with_order(IxDyn(&[lead, kb, n]))
            .unwrap();
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[lead, m, n]));
        for l in 0..lead {
            let ai = a3.index_axis(Axis(0), l);
            let bi = b3.index_axis(Axis(0), l);
            let ai2 = ai.into_dimensionality::<Ix2>().unwrap();
            let bi2 = bi.into_dimensionality::<Ix2>().unwrap();
            out.index_axis_mut(Axis(0), l).assign(&ai2.dot(&bi2));
        }
        let mut out_shape = sa[..ra - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let v = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                let g3 = g
                    .view()
                    .into_shape_with_order(IxDyn(&[lead, m, n]))
                    .unwrap();
                let a3 = vals[a.0]
                    .view()
                    .into_shape_with_order(IxDyn(&[lead, m, k]))
                    .unwrap();
                let b3 = vals[b.0]
                    .view()
                    .into_shape_with_order(IxDyn(&[lead, k, n]))
                    .unwrap();
                let mut da = ArrayD::<f32>::zeros(IxDyn(&[lead, m, k]));
                let mut db = ArrayD::<f32>::zeros(IxDyn(&[lead, k, n]));
                for l in 0..lead {
                    let gi = g3
                        .index_axis(Axis(0), l)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let ai = a3
                        .index_axis(Axis(0), l)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let bi = b3
                        .index_axis(Axis(0), l)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    da.index_axis_mut(Axis(0), l).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), l).assign(&ai.t().dot(&gi));
                }
                let sa2 = vals[a.0].shape().to_vec();
                let sb2 = vals[b.0].shape().to_vec();
                acc(adj, a.0, da.into_shape_with_order(IxDyn(&sa2)).unwrap());
                acc(adj, b.0, db.into_shape_with_order(IxDyn(&sb2)).unwrap());
            })),
        )
    }

    /// Row lookup with scatter-add backward: `table[ids] -> [len(ids), w]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let ts = self.shape(table).to_vec();
        assert_eq!(ts.len(), 2, "embedding table must be rank 2");
        let w = ts[1];
        let ids = ids.to_vec();
        for &i in &ids {
            assert!(i < ts[0], "embedding id {} out of range {}", i, ts[0]);
        }
        let mut v = ArrayD::<f32>::zeros(IxDyn(&[ids.len(), w]));
        for (r, &i) in ids.iter().enumerate() {
            v.index_axis_mut(Axis(0), r)
                .assign(&self.vals[table.0].index_axis(Axis(0), i));
        }
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                let mut dt = ArrayD::<f32>::zeros(vals[table.0].raw_dim());
                for (r, &i) in ids.iter().enumerate() {
                    let mut row = dt.index_axis_mut(Axis(0), i);
                    row += &g.index_axis(Axis(0), r);
                }
                acc(adj, table.0, dt);
            })),
        )
    }

    // ---- nonlinearities & normalization ----

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        let v = self.vals[a.0].mapv(|x| {
            let inner = C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + inner.tanh())
        });
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                let d = vals[a.0].mapv(|x| {
                    let u = C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                });
                acc(adj, a.0, g * &d);
            })),
        )
    }

    /// SiLU: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(|x| x * sigmoid(x));
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                let d = vals[a.0].mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                acc(adj, a.0, g * &d);
            })),
        )
    }

    /// Numerically stable softmax over the last axis, with an optional
    /// additive mask (broadcast against the input).
    pub fn softmax_lastdim(&mut self, a: NodeId, mask: Option<&Arr>) -> NodeId {
        let mut logits = self.vals[a.0].clone();
        if let Some(m) = mask {
            logits += &m.broadcast(logits.raw_dim()).expect("softmax mask bcast");
        }
        let shape = logits.shape().to_vec();
        let last = *shape.last().unwrap();
        let rows: usize = shape.iter().product::<usize>() / last;
        let mut flat = logits.into_shape_with_order(IxDyn(&[rows, last])).unwrap();
        for mut row in flat.axis_iter_mut(Axis(0)) {
            let mx = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - mx).exp());
            let s: f32 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let v = flat.into_shape_with_order(IxDyn(&shape)).unwrap();
        let out = self.push(
            v,
            Some(Box::new(move |_, _, _| unreachable!("patched below"))),
        );
        // softmax backward needs its own output; rebuild closure now that the
        // output id is known.
        if self.grad_enabled {
            let oid = out.0;
            self.backs[oid] = Some(Box::new(move |vals, g, adj| {
                let y = &vals[oid];
                let shape = y.shape().to_vec();
                let last = *shape.last().unwrap();
                let rows: usize = shape.iter().product::<usize>() / last;
                let y2 = y.view().into_shape_with_order(IxDyn(&[rows, last])).unwrap();
                let g2 = g.view().into_shape_with_order(IxDyn(&[rows, last])).unwrap();
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&[rows, last]));
                for r in 0..rows {
                    let yr = y2.index_axis(Axis(0), r);
                    let gr = g2.index_axis(Axis(0), r);
                    let dot: f32 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                    let mut dr = dx.index_axis_mut(Axis(0), r);
                    for ((d, &y), &g) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *d = y * (g - dot);
                    }
                }
                acc(adj, a.0, dx.into_shape_with_order(IxDyn(&shape)).unwrap());
            }));
        }
        out
    }

    /// Normalize to zero mean / unit variance over the last `k_axes` axes
    /// (population statistics), per leading index. No affine part.
    pub fn norm_lastk(&mut self, a: NodeId, k_axes: usize, eps: f32) -> NodeId {
        let shape = self.shape(a).to_vec();
        assert!(k_axes >= 1 && k_axes < shape.len(), "norm_lastk axes");
        let n: usize = shape[shape.len() - k_axes..].iter().product();
        let rows: usize = shape.iter().product::<usize>() / n;
        let flat = self.vals[a.0]
            .view()
            .into_shape_with_order(IxDyn(&[rows, n]))
            .unwrap();
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[rows, n]));
        let mut inv_std = vec![0f32; rows];
        for r in 0..rows {
            let row = flat.index_axis(Axis(0), r);
            let mean: f32 = row.sum() / n as f32;
            let var: f32 = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            let mut orow = out.index_axis_mut(Axis(0), r);
            for (o, &x) in orow.iter_mut().zip(row.iter()) {
                *o = (x - mean) * is;
            }
        }
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let out_id = self.push(v, None);
        if self.grad_enabled {
            let oid = out_id.0;
            self.backs[oid] = Some(Box::new(move |vals, g, adj| {
                let y2 = vals[oid]
                    .view()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                let g2 = g.view().into_shape_with_order(IxDyn(&[rows, n])).unwrap();
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&[rows, n]));
                for r in 0..rows {
                    let yr = y2.index_axis(Axis(0), r);
                    let gr = g2.index_axis(Axis(0), r);
                    let mg: f32 = gr.sum() / n as f32;
                    let mgy: f32 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum::<f32>()
                        / n as f32;
                    let mut dr = dx.index_axis_mut(Axis(0), r);
                    for ((d, &y), &g) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *d = inv_std[r] * (g - mg - y * mgy);
                    }
                }
                let shape = vals[a.0].shape().to_vec();
                acc(adj, a.0, dx.into_shape_with_order(IxDyn(&shape)).unwrap());
            }));
        }
        out_id
    }

    /// RMS normalization over the last axis: `x / rms(x)` (no affine part).
    pub fn rms_norm(&mut self, a: NodeId, eps: f32) -> NodeId {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        let rows: usize = shape.iter().product::<usize>() / n;
        let flat = self.vals[a.0]
            .view()
            .into_shape_with_order(IxDyn(&[rows, n]))
            .unwrap();
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[rows, n]));
        let mut inv_rms = vec![0f32; rows];
        for r in 0..rows {
            let row = flat.index_axis(Axis(0), r);
            let ms: f32 = row.iter().map(|&x| x * x).sum::<f32>() / n as f32;
            let ir = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = ir;
            let mut orow = out.index_axis_mut(Axis(0), r);
            for (o, &x) in orow.iter_mut().zip(row.iter()) {
                *o = x * ir;
            }
        }
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                let x2 = vals[a.0]
                    .view()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                let g2 = g.view().into_shape_with_order(IxDyn(&[rows, n])).unwrap();
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&[rows, n]));
                for r in 0..rows {
                    let xr = x2.index_axis(Axis(0), r);
                    let gr = g2.index_axis(Axis(0), r);
                    let ir = inv_rms[r];
                    let dot: f32 = xr.iter().zip(gr.iter()).map(|(&x, &g)| x * g).sum();
                    let coef = dot * ir * ir * ir / n as f32;
                    let mut dr = dx.index_axis_mut(Axis(0), r);
                    for ((d, &x), &g) in dr.iter_mut().zip(xr.iter()).zip(gr.iter()) {
                        *d = g * ir - x * coef;
                    }
                }
                let shape = vals[a.0].shape().to_vec();
                acc(adj, a.0, dx.into_shape_with_order(IxDyn(&shape)).unwrap());
            })),
        )
    }

    /// L2-normalize rows over the last axis: `x / sqrt(sum(x^2) + eps)`.
    pub fn l2_normalize_lastdim(&mut self, a: NodeId, eps: f32) -> NodeId {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        let rows: usize = shape.iter().product::<usize>() / n;
        let flat = self.vals[a.0]
            .view()
            .into_shape_with_order(IxDyn(&[rows, n]))
            .unwrap();
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[rows, n]));
        let mut inv_norm = vec![0f32; rows];
        for r in 0..rows {
            let row = flat.index_axis(Axis(0), r);
            let ss: f32 = row.iter().map(|&x| x * x).sum::<f32>();
            let inv = 1.0 / (ss + eps).sqrt();
            inv_norm[r] = inv;
            let mut orow = out.index_axis_mut(Axis(0), r);
            for (o, &x) in orow.iter_mut().zip(row.iter()) {
                *o = x * inv;
            }
        }
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                let x2 = vals[a.0]
                    .view()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                let g2 = g.view().into_shape_with_order(IxDyn(&[rows, n])).unwrap();
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&[rows, n]));
                for r in 0..rows {
                    let xr = x2.index_axis(Axis(0), r);
                    let gr = g2.index_axis(Axis(0), r);
                    let inv = inv_norm[r];
                    let dot: f32 = xr.iter().zip(gr.iter()).map(|(&x, &g)| x * g).sum();
                    let coef = dot * inv * inv * inv;
                    let mut dr = dx.index_axis_mut(Axis(0), r);
                    for ((d, &x), &g) in dr.iter_mut().zip(xr.iter()).zip(gr.iter()) {
                        *d = g * inv - x * coef;
                    }
                }
                let shape = vals[a.0].shape().to_vec();
                acc(adj, a.0, dx.into_shape_with_order(IxDyn(&shape)).unwrap());
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.vals[a.0].sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), s);
        self.push(
            v,
            Some(Box::new(move |vals, g, adj| {
                let gv = g[[0]];
                acc(adj, a.0, ArrayD::from_elem(vals[a.0].raw_dim(), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.vals[a.0].len() as f32;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two same-shape tensors, as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Finite-difference check of d(loss)/d(leaf) where loss is built by `f`.
    fn gradcheck<F>(shape: &[usize], f: F, tol: f32)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(&mut rng, shape);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = f(&mut tape, x);
        tape.backward(loss);
        let g = tape.grad(x).expect("leaf grad").clone();

        let eval = |arr: &Arr| -> f32 {
            let mut t = Tape::eval();
            let x = t.leaf(arr.clone());
            let l = f(&mut t, x);
            t.value(l)[[0]]
        };

        let mut max_rel = 0f32;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            let h = 1e-2f32.max(1e-2 * plus.as_slice().unwrap()[idx].abs());
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < tol, "gradcheck failed: max rel err {}", max_rel);
    }

    #[test]
    fn gradcheck_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = randn(&mut rng, &[4, 3]);
        gradcheck(
            &[5, 4],
            move |t, x| {
                let wn = t.constant(w.clone());
                let y = t.matmul(x, wn);
                let y2 = t.mul(y, y);
                t.mean_all(y2)
            },
            2e-2,
        );
    }

    #[test]
    fn gradcheck_softmax_mask() {
        let mask = {
            let mut m = ArrayD::<f32>::zeros(IxDyn(&[4, 4]));
            for i in 0..4 {
                for j in 0..4 {
                    if j > i {
                        m[[i, j]] = -1e30;
                    }
                }
            }
            m
        };
        gradcheck(
            &[2, 4, 4],
            move |t, x| {
                let s = t.softmax_lastdim(x, Some(&mask));
                let sq = t.mul(s, s);
                t.mean_all(sq)
            },
            2e-2,
        );
    }

    #[test]
    fn gradcheck_norms_and_activations() {
        gradcheck(
            &[3, 6],
            |t, x| {
                let n = t.norm_lastk(x, 1, 1e-5);
                let g = t.gelu(n);
                let r = t.rms_norm(g, 1e-6);
                let s = t.silu(r);
                let l2 = t.l2_normalize_lastdim(s, 1e-8);
                let sq = t.mul(l2, l2);
                t.mean_all(sq)
            },
            3e-2,
        );
    }

    #[test]
    fn gradcheck_norm_lastk_two_axes() {
        gradcheck(
            &[2, 3, 4],
            |t, x| {
                let n = t.norm_lastk(x, 2, 1e-5);
                let c = t.add_scalar(n, 0.3);
                let sq = t.mul(c, c);
                t.mean_all(sq)
            },
            3e-2,
        );
    }

    #[test]
    fn gradcheck_bmm_permute_concat_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let other = randn(&mut rng, &[2, 3, 5, 4]);
        gradcheck(
            &[2, 3, 4, 5],
            move |t, x| {
                let o = t.constant(other.clone());
                let y = t.bmm(x, o); // [2,3,4,4]
                let p = t.permute(y, &[0, 2, 1, 3]); // [2,4,3,4]
                let s = t.slice_axis(p, 1, 1, 3); // [2,2,3,4]
                let c = t.concat(1, &[s, s]); // [2,4,3,4]
                let r = t.reshape(c, &[2, 48]);
                let sq = t.mul(r, r);
                t.mean_all(sq)
            },
            2e-2,
        );
    }

    #[test]
    fn gradcheck_bcast_embedding() {
        gradcheck(
            &[5, 3],
            |t, x| {
                let e = t.embedding(x, &[1, 1, 4, 0]);
                let b = t.reshape(e, &[4, 1, 3]);
                let w = t.bcast_to(b, &[4, 2, 3]);
                let sq = t.mul(w, w);
                t.mean_all(sq)
            },
            2e-2,
        );
    }

    #[test]
    fn broadcast_reduce_roundtrip() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1, 4]), 2.0f32));
        let b = t.bcast_to(x, &[3, 2, 4]);
        let l = t.sum_all(b);
        t.backward(l);
        let g = t.grad(x).unwrap();
        assert_eq!(g.shape(), &[1, 4]);
        assert!(g.iter().all(|&v| (v - 6.0).abs() < 1e-6));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5f32));
        let d = t.detach(x);
        let y = t.mul(d, d);
        let l = t.mean_all(y);
        t.backward(l);
        assert!(t.grad(x).is_none());
    }
}
