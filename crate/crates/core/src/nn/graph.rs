use super::params::{ParamId, ParamStore};

/// Dense row-major matrix; column vectors have `cols == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
struct LstmCache {
    input: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Embed { param: ParamId, row: usize },
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Mean(Vec<NodeId>),
    Sum(Vec<NodeId>),
    Mask(NodeId, Vec<f64>),
    Dot(NodeId, NodeId),
    Cosine(NodeId, NodeId),
    Lstm {
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w: NodeId,
        b: NodeId,
        cache: Box<LstmCache>,
    },
    Nll { logits: NodeId, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-parameter gradients, aligned with the ids of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }

    fn slot(&mut self, id: ParamId, shape: &Tensor) -> &mut Tensor {
        self.grads[id.index()].get_or_insert_with(|| Tensor::zeros(shape.rows, shape.cols))
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// A tape recording one forward computation.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn zeros(&mut self, n: usize) -> NodeId {
        self.input(Tensor::zeros(n, 1))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let n = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_nodes[id.index()] = Some(n);
        n
    }

    /// Row `row` of an embedding table, as a column vector.
    pub fn embed(&mut self, param: ParamId, row: usize) -> NodeId {
        let value = Tensor::vector(self.store.get(param).row(row).to_vec());
        self.push(value, Op::Embed { param, row })
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (wt, xt) = (self.value(w), self.value(x));
        assert_eq!(wt.cols, xt.len(), "matvec shape mismatch");
        let out = (0..wt.rows)
            .map(|r| wt.row(r).iter().zip(&xt.data).map(|(a, b)| a * b).sum())
            .collect();
        self.push(Tensor::vector(out), Op::MatVec(w, x))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.len(), bt.len(), "elementwise shape mismatch");
        Tensor::vector(at.data.iter().zip(&bt.data).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = Tensor::vector(self.value(x).data.iter().map(|v| scale * v + shift).collect());
        self.push(v, Op::Affine(x, scale))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::vector(self.value(x).data.iter().map(|v| v.tanh()).collect());
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::vector(self.value(x).data.iter().map(|v| v.max(0.0)).collect());
        self.push(v, Op::Relu(x))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let data = parts.iter().flat_map(|p| self.value(*p).data.iter().copied()).collect();
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let data = self.value(x).data[start..start + len].to_vec();
        self.push(Tensor::vector(data), Op::Slice(x, start))
    }

    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut acc = vec![0.0; self.value(parts[0]).len()];
        for p in parts {
            add_into(&mut acc, &self.value(*p).data);
        }
        self.push(Tensor::vector(acc), Op::Sum(parts.to_vec()))
    }

    pub fn mean(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "mean of nothing");
        let mut acc = vec![0.0; self.value(parts[0]).len()];
        for p in parts {
            add_into(&mut acc, &self.value(*p).data);
        }
        let n = parts.len() as f64;
        acc.iter_mut().for_each(|x| *x /= n);
        self.push(Tensor::vector(acc), Op::Mean(parts.to_vec()))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let v = Tensor::vector(self.value(x).data.iter().zip(&mask).map(|(a, m)| a * m).collect());
        self.push(v, Op::Mask(x, mask))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y).data.iter().sum();
        self.push(Tensor::vector(vec![v]), Op::Dot(a, b))
    }

    /// Cosine similarity; defined as 0 when either vector has zero norm.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = cosine(&self.value(a).data, &self.value(b).data);
        self.push(Tensor::vector(vec![v]), Op::Cosine(a, b))
    }

    /// One LSTM step. Returns `[h'; c']`; `w` is `4H x (in + H)` with gate
    /// blocks ordered input, forget, cell, output.
    pub fn lstm_cell(&mut self, x: NodeId, h: NodeId, c: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let hidden = self.value(h).len();
        let mut input = self.value(x).data.clone();
        input.extend_from_slice(&self.value(h).data);
        let wt = self.value(w);
        assert_eq!((wt.rows, wt.cols), (4 * hidden, input.len()), "lstm weight shape");
        let bt = &self.value(b).data;
        let mut gates: Vec<f64> = (0..4 * hidden)
            .map(|r| bt[r] + wt.row(r).iter().zip(&input).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        for (k, z) in gates.iter_mut().enumerate() {
            *z = if k / hidden == 2 { z.tanh() } else { sigmoid(*z) };
        }
        let c_prev = self.value(c).data.clone();
        let mut out = vec![0.0; 2 * hidden];
        let mut tanh_c = vec![0.0; hidden];
        for k in 0..hidden {
            let (i, f, g, o) = (gates[k], gates[hidden + k], gates[2 * hidden + k], gates[3 * hidden + k]);
            let cn = f * c_prev[k] + i * g;
            tanh_c[k] = cn.tanh();
            out[k] = o * tanh_c[k];
            out[hidden + k] = cn;
        }
        let cache = Box::new(LstmCache {
            input,
            c_prev,
            gates,
            tanh_c,
        });
        self.push(Tensor::vector(out), Op::Lstm { x, h, c, w, b, cache })
    }

    /// Negative log-softmax of `logits` at `target`.
    pub fn nll(&mut self, logits: NodeId, target: usize) -> NodeId {
        let probs = softmax(&self.value(logits).data);
        let v = -probs[target].max(f64::MIN_POSITIVE).ln();
        self.push(Tensor::vector(vec![v]), Op::Nll { logits, target, probs })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads = Gradients::new(self.store);
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        node_grads[loss.0] = Some(vec![1.0]);

        fn acc(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; n])
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            let size = |id: NodeId| self.nodes[id.0].value.len();
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    add_into(&mut grads.slot(*p, &node.value).data, &gout);
                }
                Op::Embed { param, row } => {
                    let table = self.store.get(*param);
                    let slot = grads.slot(*param, table);
                    let cols = slot.cols;
                    add_into(&mut slot.data[row * cols..(row + 1) * cols], &gout);
                }
                Op::MatVec(w, x) => {
                    let wt = &self.nodes[w.0].value;
                    let xt = &self.nodes[x.0].value;
                    {
                        let gw = acc(&mut node_grads[w.0], wt.len());
                        for (r, g) in gout.iter().enumerate() {
                            if *g != 0.0 {
                                let row = &mut gw[r * wt.cols..(r + 1) * wt.cols];
                                row.iter_mut().zip(&xt.data).for_each(|(a, b)| *a += g * b);
                            }
                        }
                    }
                    let gx = acc(&mut node_grads[x.0], xt.len());
                    for (r, g) in gout.iter().enumerate() {
                        if *g != 0.0 {
                            gx.iter_mut().zip(wt.row(r)).for_each(|(a, b)| *a += g * b);
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut node_grads[a.0], gout.len()), &gout);
                    add_into(acc(&mut node_grads[b.0], gout.len()), &gout);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut node_grads[a.0], gout.len()), &gout);
                    let gb = acc(&mut node_grads[b.0], gout.len());
                    gb.iter_mut().zip(&gout).for_each(|(a, g)| *a -= g);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value.data;
                    let bv = &self.nodes[b.0].value.data;
                    let ga = acc(&mut node_grads[a.0], gout.len());
                    for k in 0..gout.len() {
                        ga[k] += gout[k] * bv[k];
                    }
                    let gb = acc(&mut node_grads[b.0], gout.len());
                    for k in 0..gout.len() {
                        gb[k] += gout[k] * av[k];
                    }
                }
                Op::Affine(x, scale) => {
                    let gx = acc(&mut node_grads[x.0], gout.len());
                    gx.iter_mut().zip(&gout).for_each(|(a, g)| *a += scale * g);
                }
                Op::Tanh(x) => {
                    let y = &node.value.data;
                    let gx = acc(&mut node_grads[x.0], gout.len());
                    for k in 0..gout.len() {
                        gx[k] += gout[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Relu(x) => {
                    let y = &node.value.data;
                    let gx = acc(&mut node_grads[x.0], gout.len());
                    for k in 0..gout.len() {
                        if y[k] > 0.0 {
                            gx[k] += gout[k];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = size(*p);
                        add_into(acc(&mut node_grads[p.0], n), &gout[off..off + n]);
                        off += n;
                    }
                }
                Op::Slice(x, start) => {
                    let gx = acc(&mut node_grads[x.0], size(*x));
                    add_into(&mut gx[*start..*start + gout.len()], &gout);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        add_into(acc(&mut node_grads[p.0], gout.len()), &gout);
                    }
                }
                Op::Mean(parts) => {
                    let inv = 1.0 / parts.len() as f64;
                    for p in parts {
                        let gp = acc(&mut node_grads[p.0], gout.len());
                        gp.iter_mut().zip(&gout).for_each(|(a, g)| *a += g * inv);
                    }
                }
                Op::Mask(x, mask) => {
                    let gx = acc(&mut node_grads[x.0], gout.len());
                    for k in 0..gout.len() {
                        gx[k] += gout[k] * mask[k];
                    }
                }
                Op::Dot(a, b) => {
                    let g = gout[0];
                    let av = &self.nodes[a.0].value.data;
                    let bv = &self.nodes[b.0].value.data;
                    let ga = acc(&mut node_grads[a.0], av.len());
                    ga.iter_mut().zip(bv).for_each(|(x, y)| *x += g * y);
                    let gb = acc(&mut node_grads[b.0], bv.len());
                    gb.iter_mut().zip(av).for_each(|(x, y)| *x += g * y);
                }
                Op::Cosine(a, b) => {
                    let g = gout[0];
                    let av = &self.nodes[a.0].value.data;
                    let bv = &self.nodes[b.0].value.data;
                    let na = norm(av);
                    let nb = norm(bv);
                    if na > 0.0 && nb > 0.0 {
                        let cos = node.value.data[0];
                        let ga = acc(&mut node_grads[a.0], av.len());
                        for k in 0..av.len() {
                            ga[k] += g * (bv[k] / (na * nb) - cos * av[k] / (na * na));
                        }
                        let gb = acc(&mut node_grads[b.0], bv.len());
                        for k in 0..bv.len() {
                            gb[k] += g * (av[k] / (na * nb) - cos * bv[k] / (nb * nb));
                        }
                    }
                }
                Op::Lstm { x, h, c, w, b, cache } => {
                    let hidden = cache.tanh_c.len();
                    let gates = &cache.gates;
                    let mut dz = vec![0.0; 4 * hidden];
                    let mut dc_prev = vec![0.0; hidden];
                    for k in 0..hidden {
                        let (i, f, g, o) =
                            (gates[k], gates[hidden + k], gates[2 * hidden + k], gates[3 * hidden + k]);
                        let tc = cache.tanh_c[k];
                        let dh = gout[k];
                        let dc = gout[hidden + k] + dh * o * (1.0 - tc * tc);
                        dz[k] = dc * g * i * (1.0 - i);
                        dz[hidden + k] = dc * cache.c_prev[k] * f * (1.0 - f);
                        dz[2 * hidden + k] = dc * i * (1.0 - g * g);
                        dz[3 * hidden + k] = dh * tc * o * (1.0 - o);
                        dc_prev[k] = dc * f;
                    }
                    let wt = &self.nodes[w.0].value;
                    let cols = wt.cols;
                    {
                        let gw = acc(&mut node_grads[w.0], wt.len());
                        for (r, d) in dz.iter().enumerate() {
                            if *d != 0.0 {
                                let row = &mut gw[r * cols..(r + 1) * cols];
                                row.iter_mut().zip(&cache.input).for_each(|(a, v)| *a += d * v);
                            }
                        }
                    }
                    add_into(acc(&mut node_grads[b.0], dz.len()), &dz);
                    let mut dinput = vec![0.0; cols];
                    for (r, d) in dz.iter().enumerate() {
                        if *d != 0.0 {
                            dinput.iter_mut().zip(wt.row(r)).for_each(|(a, v)| *a += d * v);
                        }
                    }
                    let nx = size(*x);
                    add_into(acc(&mut node_grads[x.0], nx), &dinput[..nx]);
                    add_into(acc(&mut node_grads[h.0], hidden), &dinput[nx..]);
                    add_into(acc(&mut node_grads[c.0], hidden), &dc_prev);
                }
                Op::Nll { logits, target, probs } => {
                    let g = gout[0];
                    let gl = acc(&mut node_grads[logits.0], probs.len());
                    for (k, p) in probs.iter().enumerate() {
                        gl[k] += g * (p - if k == *target { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        grads
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity with `cosine(x, 0) = 0`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
