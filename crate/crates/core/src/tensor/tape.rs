use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::Data;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: Data,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

/// Handle into one tape. Copyable; using it on a different tape is a bug and
/// panics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Records one forward pass. Values live on the tape; `backward` consumes the
/// recorded closures and frees intermediate gradients as it walks back, so a
/// tape is cheap to keep around after differentiation but cannot be
/// differentiated twice.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn leaf(&self, value: Data) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub(crate) fn push(&self, value: Data, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { value, parents, back });
        Var { tape: self.id, idx }
    }

    pub(crate) fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var used on a tape it does not belong to");
        v.idx
    }

    pub fn value(&self, v: Var) -> Data {
        let idx = self.idx(v);
        self.nodes.borrow()[idx].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        super::as_scalar(&val.view())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar root. Gradients of interior nodes are
    /// dropped as soon as they have been propagated; leaf gradients are kept
    /// and read back through [`Grads`].
    pub fn backward(&self, root: Var) -> Grads {
        let root_idx = self.idx(root);
        let mut nodes = self.nodes.borrow_mut();
        let root_node = &nodes[root_idx];
        assert_eq!(root_node.value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_idx] = Some(ArrayD::from_elem(root_node.value.raw_dim(), 1.0));

        for idx in (0..=root_idx).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let Some(back) = nodes[idx].back.take() else {
                continue; // leaf: keep its gradient
            };
            let g = grads[idx].take().expect("checked above");
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), nodes[idx].parents.len());
            let parents = nodes[idx].parents.clone();
            for (p, dg) in parents.into_iter().zip(parent_grads) {
                debug_assert_eq!(
                    dg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape mismatch flowing into node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &dg,
                    slot => *slot = Some(dg),
                }
            }
        }
        Grads { tape: self.id, g: grads }
    }
}

pub struct Grads {
    tape: u64,
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        assert_eq!(v.tape, self.tape, "Var used on grads of a different tape");
        self.g.get(v.idx).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        assert_eq!(v.tape, self.tape, "Var used on grads of a different tape");
        self.g.get_mut(v.idx).and_then(|s| s.take())
    }
}

/// Named parameter store. Iteration order is insertion order everywhere, so
/// gradient accumulation and optimizer updates are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    map: IndexMap<String, Data>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Data) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Data {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Data> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: Data) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Data)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_len(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }
}

/// Binds parameters onto one tape, caching the leaf per name so a parameter
/// used twice in a forward pass accumulates both gradient contributions.
pub struct Binder<'a> {
    tape: &'a Tape,
    params: &'a ParamSet,
    bound: RefCell<IndexMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, params: &'a ParamSet) -> Self {
        Binder { tape, params, bound: RefCell::new(IndexMap::new()) }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    /// Leaf for a named parameter, bound at most once per tape.
    pub fn p(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let var = self.tape.leaf(self.params.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Drains gradients for every bound parameter. Parameters that were bound
    /// but ended up off the loss path get explicit zeros, so the optimizer
    /// sees a deterministic, complete gradient map.
    pub fn take_named(&self, grads: &mut Grads) -> IndexMap<String, ArrayD<f64>> {
        let mut out = IndexMap::new();
        for (name, var) in self.bound.borrow().iter() {
            let g = grads.take(*var).unwrap_or_else(|| {
                ArrayD::zeros(self.params.get(name).raw_dim())
            });
            out.insert(name.clone(), g);
        }
        out
    }
}
