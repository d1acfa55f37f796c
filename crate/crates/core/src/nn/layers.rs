use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Unidirectional LSTM. Forget-gate bias starts at 1.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = store.add_uniform(format!("{prefix}/w"), 4 * hidden, input + hidden, bound, rng);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let b = store.add(format!("{prefix}/b"), super::Tensor::vector(bias));
        Lstm { w, b, input, hidden }
    }

    pub fn lookup(store: &ParamStore, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Lstm {
            w: store.expect(&format!("{prefix}/w"), 4 * hidden, input + hidden)?,
            b: store.expect(&format!("{prefix}/b"), 4 * hidden, 1)?,
            input,
            hidden,
        })
    }

    /// Hidden states for each input, in the order the inputs are consumed.
    pub fn run(&self, g: &mut Graph, inputs: impl IntoIterator<Item = NodeId>) -> Vec<NodeId> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let mut h = g.zeros(self.hidden);
        let mut c = g.zeros(self.hidden);
        let mut out = Vec::new();
        for x in inputs {
            let hc = g.lstm_cell(x, h, c, w, b);
            h = g.slice(hc, 0, self.hidden);
            c = g.slice(hc, self.hidden, self.hidden);
            out.push(h);
        }
        out
    }
}

/// Forward and backward LSTMs over the same sequence.
#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstm {
            fwd: Lstm::register(store, &format!("{prefix}/fwd"), input, hidden, rng),
            bwd: Lstm::register(store, &format!("{prefix}/bwd"), input, hidden, rng),
        }
    }

    pub fn lookup(store: &ParamStore, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstm {
            fwd: Lstm::lookup(store, &format!("{prefix}/fwd"), input, hidden)?,
            bwd: Lstm::lookup(store, &format!("{prefix}/bwd"), input, hidden)?,
        })
    }

    pub fn output_size(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    /// `[h_fwd_last ; h_bwd_first]`, the sequence summary.
    pub fn encode(&self, g: &mut Graph, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty(), "cannot encode an empty sequence");
        let f = self.fwd.run(g, inputs.iter().copied());
        let b = self.bwd.run(g, inputs.iter().rev().copied());
        g.concat(&[*f.last().unwrap(), *b.last().unwrap()])
    }

    /// Per-position `[h_fwd_i ; h_bwd_i]`.
    pub fn states(&self, g: &mut Graph, inputs: &[NodeId]) -> Vec<NodeId> {
        let f = self.fwd.run(g, inputs.iter().copied());
        let mut b = self.bwd.run(g, inputs.iter().rev().copied());
        b.reverse();
        f.into_iter().zip(b).map(|(x, y)| g.concat(&[x, y])).collect()
    }
}

/// Fully connected layer `W x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Linear {
            w: store.add_uniform(format!("{prefix}/w"), output, input, bound, rng),
            b: store.add(format!("{prefix}/b"), super::Tensor::zeros(output, 1)),
        }
    }

    pub fn lookup(store: &ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            w: store.expect(&format!("{prefix}/w"), output, input)?,
            b: store.expect(&format!("{prefix}/b"), output, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let wx = g.matvec(w, x);
        g.add(wx, b)
    }
}

/// Inverted dropout mask: zeros with probability `rate`, survivors scaled
/// by `1 / (1 - rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}
