//! Dense f64 tensor engine with reverse-mode differentiation.
//!
//! Every differentiable computation runs on a [`Tape`]: an append-only
//! arena of nodes in topological order. Forward ops push nodes, `backward`
//! walks the arena once in reverse and accumulates gradients. Trainable
//! parameters live outside the tape in a [`ParamStore`] and are copied in
//! as leaves per forward pass, so one parameter set can serve many tapes.

mod conv;
mod ops;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(thiserror::Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: root must be a scalar, got {numel} elements")]
    NonScalarRoot { numel: usize },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

/// A plain owned tensor value, used at module boundaries (images, ground
/// truth, exported features) where no gradient tracking is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        TensorValue { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorValue {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        TensorValue {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        TensorValue {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Identifier of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Named trainable parameters with gradient accumulators.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
            grad: vec![0.0; n],
        });
        ParamId(self.entries.len() - 1)
    }

    /// He-style uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)): unit
    /// variance gain through ReLU stacks, so deep extractors keep signal
    /// magnitude instead of shrinking it layer by layer.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape.clone(), vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    },
    AvgPoolLast {
        input: TensorId,
        kernel: usize,
        stride: usize,
    },
    SpatialPool {
        input: TensorId,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    ChannelPool {
        input: TensorId,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Pointwise {
        input: TensorId,
        f: Activation,
    },
    ChannelL2Norm {
        input: TensorId,
        eps: f64,
    },
    Binary {
        a: TensorId,
        b: TensorId,
        op: BinOp,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    BilinearUp2 {
        input: TensorId,
    },
    SampleWidth {
        input: TensorId,
        positions: TensorId,
    },
    Softmax {
        input: TensorId,
        axis: usize,
    },
    Scale {
        input: TensorId,
        factor: f64,
    },
    ClampMin {
        input: TensorId,
        min: f64,
    },
    SumAll {
        input: TensorId,
    },
    Reshape {
        input: TensorId,
    },
    AllPairs {
        left: TensorId,
        right: TensorId,
    },
    /// Per-pixel convex combination of the 3x3 coarse neighborhood, one
    /// weight vector per 4x4 sub-pixel position (factor-4 upsampling).
    ConvexCombine {
        values: TensorId,
        weights: TensorId,
    },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub needs_grad: bool,
    pub op: Op,
}

/// Append-only record of a differentiable computation.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub check_finite: bool,
    param_cache: std::collections::HashMap<usize, TensorId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
            param_cache: std::collections::HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn numel(&self, t: TensorId) -> usize {
        self.nodes[t.0].data.len()
    }

    pub fn value(&self, t: TensorId) -> TensorValue {
        TensorValue::new(self.nodes[t.0].shape.clone(), self.nodes[t.0].data.clone())
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> Result<TensorId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    pub(crate) fn needs(&self, t: TensorId) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// New leaf holding a copy of `value`.
    pub fn leaf(&mut self, value: &TensorValue, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            shape: value.shape.clone(),
            data: value.data.clone(),
            grad: None,
            needs_grad: requires_grad,
            op: Op::Leaf { param: None },
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: &TensorValue) -> TensorId {
        self.leaf(value, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.leaf(&TensorValue::new(shape, data), false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(&TensorValue::scalar(v), false)
    }

    /// Leaf backed by a stored parameter; gradients flow back to the store
    /// through [`Tape::export_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        let e = store.entry(id);
        self.nodes.push(Node {
            shape: e.shape.clone(),
            data: e.data.clone(),
            grad: None,
            needs_grad: true,
            op: Op::Leaf { param: Some(id) },
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Like [`Tape::param`], but reuses the leaf if this parameter was
    /// already placed on this tape (layers invoked once per iteration).
    pub fn param_cached(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(&t) = self.param_cache.get(&id.0) {
            return t;
        }
        let t = self.param(store, id);
        self.param_cache.insert(id.0, t);
        t
    }

    /// Reverse pass from a scalar root. Populates `grad` for every node
    /// that (transitively) requires gradients; leaf grads accumulate
    /// additively across fan-out.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let numel = self.nodes[root.0].data.len();
        if numel != 1 {
            return Err(TensorError::NonScalarRoot { numel });
        }
        self.accum_into(root, &[1.0]);
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i)?;
        }
        Ok(())
    }

    pub(crate) fn accum_into(&mut self, t: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[t.0];
        let n = node.data.len();
        let grad = node.grad.get_or_insert_with(|| vec![0.0; n]);
        debug_assert_eq!(grad.len(), contrib.len());
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Add this tape's leaf gradients into the parameter store.
    pub fn export_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &node.grad {
                    let e = store.entry_mut(pid);
                    for (pg, ng) in e.grad.iter_mut().zip(g) {
                        *pg += ng;
                    }
                }
            }
        }
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must construct a scalar loss from the store's parameters on a
/// fresh tape. Returns the max over probed elements of
/// `|analytic - numeric| / max(1, |numeric|)`. When `max_probes` is set,
/// a deterministic random subset of parameter elements is probed.
pub fn grad_check<F>(
    store: &mut ParamStore,
    eps: f64,
    max_probes: Option<usize>,
    build: F,
) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<TensorId>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let root = build(store, &mut tape)?;
    tape.backward(root)?;
    tape.export_param_grads(store);

    let mut probes: Vec<(usize, usize)> = Vec::new();
    for (pid, e) in store.iter() {
        for j in 0..e.data.len() {
            probes.push((pid.0, j));
        }
    }
    if let Some(limit) = max_probes {
        if probes.len() > limit {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5ee2);
            let mut picked = Vec::with_capacity(limit);
            for _ in 0..limit {
                picked.push(probes.swap_remove(rng.gen_range(0..probes.len())));
            }
            probes = picked;
        }
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = build(store, &mut t)?;
        Ok(t.data(r)[0])
    };

    let mut max_rel: f64 = 0.0;
    for (p, j) in probes {
        let analytic = store.entries[p].grad[j];
        let orig = store.entries[p].data[j];
        store.entries[p].data[j] = orig + eps;
        let fp = eval(store)?;
        store.entries[p].data[j] = orig - eps;
        let fm = eval(store)?;
        store.entries[p].data[j] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
