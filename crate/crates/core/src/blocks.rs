//! Neural building blocks: linear, MLP, residual MLP and RNN.
//!
//! A block with `layers = L` has `L` hidden layers of width `nodes`, each
//! followed by the activation, and a final affine output layer without
//! activation. Every weight matrix is a [`LinearMap`] of the configured kind.
//! A [`BlockKind::Linear`] block is just the output layer.
//!
//! Batched inputs are `B × in` matrices, one sample per row, so a layer
//! computes `g(x Wᵀ + b)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::linmaps::{LinMapKind, LinearMap, SpectralBounds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Gelu,
    /// Bendable linear unit with a learnable per-layer β, kept in `[-1, 1]`.
    Blu,
    Identity,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Linear,
    Mlp,
    ResMlp,
    Rnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default = "default_linmap")]
    pub linmap: LinMapKind,
    #[serde(default)]
    pub bounds: Option<SpectralBounds>,
}

fn default_layers() -> usize {
    2
}
fn default_nodes() -> usize {
    32
}
fn default_activation() -> ActivationKind {
    ActivationKind::Gelu
}
fn default_linmap() -> LinMapKind {
    LinMapKind::Dense
}

impl BlockConfig {
    pub fn linear(linmap: LinMapKind, bounds: Option<SpectralBounds>) -> Self {
        Self { kind: BlockKind::Linear, layers: 0, nodes: 0, activation: ActivationKind::Identity, linmap, bounds }
    }

    pub fn new(kind: BlockKind, layers: usize, nodes: usize, activation: ActivationKind) -> Self {
        Self { kind, layers, nodes, activation, linmap: LinMapKind::Dense, bounds: None }
    }

    pub fn with_linmap(mut self, linmap: LinMapKind, bounds: Option<SpectralBounds>) -> Self {
        self.linmap = linmap;
        self.bounds = bounds;
        self
    }

    pub fn is_linear(&self) -> bool {
        self.kind == BlockKind::Linear
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_linear() && (self.layers == 0 || self.nodes == 0) {
            return Err(Error::Config(format!(
                "{:?} block needs layers >= 1 and nodes >= 1, got {} and {}",
                self.kind, self.layers, self.nodes
            )));
        }
        if self.linmap.needs_bounds() {
            self.bounds
                .ok_or_else(|| Error::Config(format!("{:?} linear maps require spectral bounds", self.linmap)))?
                .validate()?;
        }
        Ok(())
    }
}

pub fn blu(x: f64, beta: f64) -> f64 {
    beta * ((x * x + 1.0).sqrt() - 1.0) + x
}

#[derive(Clone, Debug)]
struct Layer {
    map: LinearMap,
    bias: Option<ParamId>,
    recurrent: Option<LinearMap>,
    beta: Option<ParamId>,
}

/// A configured block whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Block {
    name: String,
    config: BlockConfig,
    in_dim: usize,
    out_dim: usize,
    hidden: Vec<Layer>,
    output: Layer,
}

/// Kind actually used for one weight matrix: Perron-Frobenius only applies to
/// square maps, so rectangular layers of a PF block fall back to dense.
fn layer_kind(kind: LinMapKind, rows: usize, cols: usize) -> LinMapKind {
    if kind == LinMapKind::PerronFrobenius && rows != cols {
        LinMapKind::Dense
    } else {
        kind
    }
}

impl Block {
    /// `output_bias = false` makes the output layer purely linear.
    pub fn new(
        name: impl Into<String>,
        config: &BlockConfig,
        in_dim: usize,
        out_dim: usize,
        output_bias: bool,
        store: &mut ParamStore,
        init: &mut Initializer,
    ) -> Result<Self> {
        let name = name.into();
        config.validate()?;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!("{name}: zero input or output dimension")));
        }
        let mut hidden = Vec::new();
        let mut width = in_dim;
        if !config.is_linear() {
            for k in 0..config.layers {
                let lname = format!("{name}.h{k}");
                let kind = layer_kind(config.linmap, config.nodes, width);
                let map = LinearMap::new(format!("{lname}.w"), kind, width, config.nodes, config.bounds, store, init)?;
                let bias = Some(store.add(format!("{lname}.b"), Matrix::zeros(1, config.nodes)));
                let recurrent = if config.kind == BlockKind::Rnn {
                    Some(LinearMap::new(
                        format!("{lname}.wr"),
                        config.linmap,
                        config.nodes,
                        config.nodes,
                        config.bounds,
                        store,
                        init,
                    )?)
                } else {
                    None
                };
                let beta = (config.activation == ActivationKind::Blu)
                    .then(|| store.add_clamped(format!("{lname}.beta"), Matrix::scalar(0.0), -1.0, 1.0));
                hidden.push(Layer { map, bias, recurrent, beta });
                width = config.nodes;
            }
        }
        let kind = layer_kind(config.linmap, out_dim, width);
        let map = LinearMap::new(format!("{name}.out.w"), kind, width, out_dim, config.bounds, store, init)?;
        let bias = output_bias.then(|| store.add(format!("{name}.out.b"), Matrix::zeros(1, out_dim)));
        let output = Layer { map, bias, recurrent: None, beta: None };
        Ok(Self { name, config: config.clone(), in_dim, out_dim, hidden, output })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn kind(&self) -> BlockKind {
        self.config.kind
    }

    /// Every weight map in forward order: hidden layers (recurrent map right
    /// after its layer's input map), then the output layer.
    pub fn maps(&self) -> Vec<&LinearMap> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.push(&l.map);
            if let Some(r) = &l.recurrent {
                out.push(r);
            }
        }
        out.push(&self.output.map);
        out
    }

    /// Bias parameter of hidden layer `k`, or of the output layer for `k == layers`.
    pub fn bias_param(&self, k: usize) -> Option<ParamId> {
        if k < self.hidden.len() {
            self.hidden[k].bias
        } else {
            self.output.bias
        }
    }

    pub fn beta_params(&self) -> Vec<ParamId> {
        self.hidden.iter().filter_map(|l| l.beta).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in self.hidden.iter().chain(std::iter::once(&self.output)) {
            ids.extend(l.map.param_ids());
            ids.extend(l.bias);
            if let Some(r) = &l.recurrent {
                ids.extend(r.param_ids());
            }
            ids.extend(l.beta);
        }
        ids
    }

    /// Soft SVD orthogonality penalties of all maps in the block.
    pub fn reg_penalties(&self, tape: &mut Tape, store: &ParamStore) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        for m in self.maps() {
            if let Some(p) = m.reg_penalty(tape, store)? {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Records the effective weights once so repeated forward calls on the
    /// same tape share them.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundBlock> {
        let bind_layer = |tape: &mut Tape, l: &Layer| -> Result<BoundLayer> {
            let w = l.map.effective(tape, store)?;
            let wt = tape.transpose(w)?;
            let bias = l.bias.map(|b| tape.param(store, b)).transpose()?;
            let wrt = match &l.recurrent {
                Some(r) => {
                    let w = r.effective(tape, store)?;
                    Some(tape.transpose(w)?)
                }
                None => None,
            };
            let beta = match l.beta {
                Some(b) => {
                    let raw = tape.param(store, b)?;
                    Some(tape.clamp(raw, -1.0, 1.0)?)
                }
                None => None,
            };
            Ok(BoundLayer { wt, bias, wrt, beta })
        };
        let hidden = self.hidden.iter().map(|l| bind_layer(tape, l)).collect::<Result<Vec<_>>>()?;
        let output = bind_layer(tape, &self.output)?;
        Ok(BoundBlock {
            kind: self.config.kind,
            activation: self.config.activation,
            in_dim: self.in_dim,
            hidden,
            output,
        })
    }
}

#[derive(Clone, Debug)]
struct BoundLayer {
    wt: Var,
    bias: Option<Var>,
    wrt: Option<Var>,
    beta: Option<Var>,
}

/// A block whose weights have been recorded on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundBlock {
    kind: BlockKind,
    activation: ActivationKind,
    in_dim: usize,
    hidden: Vec<BoundLayer>,
    output: BoundLayer,
}

impl BoundBlock {
    fn activate(&self, tape: &mut Tape, layer: &BoundLayer, z: Var) -> Result<Var> {
        match self.activation {
            ActivationKind::Identity => Ok(z),
            ActivationKind::Gelu => tape.gelu(z),
            ActivationKind::Relu => tape.relu(z),
            ActivationKind::Blu => {
                let beta = layer.beta.expect("BLU layers carry beta");
                let sq = tape.square(z)?;
                let inner = tape.affine(sq, 1.0, 1.0)?;
                let root = tape.sqrt(inner)?;
                let bend = tape.affine(root, 1.0, -1.0)?;
                let scaled = tape.scale_by(beta, bend)?;
                tape.add(scaled, z)
            }
        }
    }

    fn affine(tape: &mut Tape, layer: &BoundLayer, x: Var) -> Result<Var> {
        let z = tape.matmul(x, layer.wt)?;
        match layer.bias {
            Some(b) => tape.add_row(z, b),
            None => Ok(z),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let cols = tape.shape(x).1;
        if cols != self.in_dim {
            return Err(Error::Shape(format!("block expects input width {}, got {cols}", self.in_dim)));
        }
        Ok(())
    }

    /// Feed-forward evaluation. RNN blocks treat `x` as a length-1 sequence.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        match self.kind {
            BlockKind::Linear | BlockKind::Mlp => {
                let mut h = x;
                for layer in &self.hidden {
                    let z = Self::affine(tape, layer, h)?;
                    h = self.activate(tape, layer, z)?;
                }
                Self::affine(tape, &self.output, h)
            }
            BlockKind::ResMlp => {
                let mut h = x;
                for (k, layer) in self.hidden.iter().enumerate() {
                    let mut z = Self::affine(tape, layer, h)?;
                    if k > 0 {
                        z = tape.add(z, h)?;
                    }
                    h = self.activate(tape, layer, z)?;
                }
                Self::affine(tape, &self.output, h)
            }
            BlockKind::Rnn => {
                let outs = self.forward_sequence(tape, &[x])?;
                Ok(outs[0])
            }
        }
    }

    /// Sequence evaluation. For RNN blocks hidden states start at zero and
    /// carry across steps; other kinds map each element independently.
    pub fn forward_sequence(&self, tape: &mut Tape, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if self.kind != BlockKind::Rnn {
            return xs.iter().map(|&x| self.forward(tape, x)).collect();
        }
        let mut state: Vec<Option<Var>> = vec![None; self.hidden.len()];
        let mut outs = Vec::with_capacity(xs.len());
        for &x in xs {
            self.check_input(tape, x)?;
            let mut h = x;
            for (layer, prev) in self.hidden.iter().zip(state.iter_mut()) {
                let mut z = Self::affine(tape, layer, h)?;
                if let Some(p) = *prev {
                    let r = tape.matmul(p, layer.wrt.expect("RNN layers carry W_r"))?;
                    z = tape.add(z, r)?;
                }
                h = self.activate(tape, layer, z)?;
                *prev = Some(h);
            }
            outs.push(Self::affine(tape, &self.output, h)?);
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gelu;

    fn build(config: &BlockConfig, i: usize, o: usize, seed: u64) -> (Block, ParamStore) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let b = Block::new("b", config, i, o, true, &mut store, &mut init).unwrap();
        (b, store)
    }

    fn run(block: &Block, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut t = Tape::new();
        let bb = block.bind(&mut t, store).unwrap();
        let xv = t.constant(x.clone()).unwrap();
        let y = bb.forward(&mut t, xv).unwrap();
        t.value(y).clone()
    }

    fn set_identity_weights(block: &Block, store: &mut ParamStore) {
        for m in block.maps() {
            let id = m.dense_param().unwrap();
            let (r, c) = store.value(id).shape();
            let mut eye = Matrix::zeros(r, c);
            for i in 0..r.min(c) {
                eye.set(i, i, 1.0);
            }
            *store.value_mut(id) = eye;
        }
    }

    #[test]
    fn identity_mlp_is_identity() {
        let cfg = BlockConfig::new(BlockKind::Mlp, 1, 3, ActivationKind::Identity);
        let (b, mut store) = build(&cfg, 3, 3, 0);
        set_identity_weights(&b, &mut store);
        let x = Matrix::from_rows(&[&[0.3, -1.0, 2.0], &[1.0, 0.0, 0.5]]);
        assert_eq!(run(&b, &store, &x), x);
    }

    #[test]
    fn gelu_block_maps_zero_to_zero() {
        let cfg = BlockConfig::new(BlockKind::Mlp, 1, 4, ActivationKind::Gelu);
        let (b, store) = build(&cfg, 2, 2, 5);
        assert_eq!(run(&b, &store, &Matrix::zeros(1, 2)).max_abs(), 0.0);
    }

    #[test]
    fn residual_with_zero_second_layer_is_pure_shortcut() {
        let cfg = BlockConfig::new(BlockKind::ResMlp, 2, 3, ActivationKind::Identity);
        let (b, mut store) = build(&cfg, 3, 3, 1);
        let maps = b.maps();
        *store.value_mut(maps[1].dense_param().unwrap()) = Matrix::zeros(3, 3);
        // Compare against a one-layer MLP with the same first and output layers.
        let one = BlockConfig::new(BlockKind::Mlp, 1, 3, ActivationKind::Identity);
        let (b1, mut s1) = build(&one, 3, 3, 99);
        let m1 = b1.maps();
        *s1.value_mut(m1[0].dense_param().unwrap()) = store.value(maps[0].dense_param().unwrap()).clone();
        *s1.value_mut(m1[1].dense_param().unwrap()) = store.value(maps[2].dense_param().unwrap()).clone();
        let x = Matrix::from_rows(&[&[0.1, 0.2, -0.3]]);
        assert_eq!(run(&b, &store, &x), run(&b1, &s1, &x));
    }

    #[test]
    fn residual_all_zero_params_output_zero() {
        let cfg = BlockConfig::new(BlockKind::ResMlp, 3, 4, ActivationKind::Identity);
        let (b, mut store) = build(&cfg, 2, 2, 1);
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        assert_eq!(run(&b, &store, &Matrix::from_rows(&[&[1.0, -2.0]])).max_abs(), 0.0);
    }

    #[test]
    fn rnn_without_recurrence_matches_per_step_mlp() {
        let rnn_cfg = BlockConfig::new(BlockKind::Rnn, 2, 3, ActivationKind::Gelu);
        let (rnn, mut store) = build(&rnn_cfg, 2, 2, 4);
        for l in &rnn.hidden {
            let id = l.recurrent.as_ref().unwrap().dense_param().unwrap();
            store.value_mut(id).fill(0.0);
        }
        let xs = [Matrix::row(&[0.5, -0.1]), Matrix::row(&[1.0, 2.0]), Matrix::row(&[-0.7, 0.3])];
        let mut t = Tape::new();
        let bb = rnn.bind(&mut t, &store).unwrap();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
        let outs = bb.forward_sequence(&mut t, &vars).unwrap();
        let step_outs: Vec<Matrix> = outs.iter().map(|&o| t.value(o).clone()).collect();
        // Same weights evaluated as a plain MLP.
        let mut mlp = rnn.clone();
        mlp.config.kind = BlockKind::Mlp;
        for (x, y) in xs.iter().zip(&step_outs) {
            assert_eq!(&run(&mlp, &store, x), y);
        }
    }

    #[test]
    fn rnn_single_step_equals_forward() {
        let cfg = BlockConfig::new(BlockKind::Rnn, 2, 3, ActivationKind::Gelu);
        let (b, store) = build(&cfg, 2, 3, 8);
        let x = Matrix::row(&[0.4, -0.9]);
        let mut t = Tape::new();
        let bb = b.bind(&mut t, &store).unwrap();
        let xv = t.constant(x.clone()).unwrap();
        let seq = bb.forward_sequence(&mut t, &[xv]).unwrap();
        assert_eq!(t.value(seq[0]), &run(&b, &store, &x));
        assert!(bb.forward_sequence(&mut t, &[]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cfg = BlockConfig::new(BlockKind::Mlp, 1, 3, ActivationKind::Gelu);
        let (b, store) = build(&cfg, 2, 2, 0);
        let mut t = Tape::new();
        let bb = b.bind(&mut t, &store).unwrap();
        let x = t.constant(Matrix::zeros(1, 3)).unwrap();
        assert!(matches!(bb.forward(&mut t, x), Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_activations() {
        assert_eq!(gelu(0.0), 0.0);
        for beta in [-1.0, -0.3, 0.0, 0.5, 1.0] {
            assert_eq!(blu(0.0, beta), 0.0);
        }
        for x in [-3.0, -0.2, 0.0, 1.7, 4.0] {
            assert_eq!(blu(x, 0.0), x);
        }
        // x · Φ(1) with Φ(1) = 0.841344746...
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let bad = BlockConfig::new(BlockKind::Mlp, 0, 3, ActivationKind::Gelu);
        assert!(Block::new("x", &bad, 2, 2, true, &mut store, &mut init).is_err());
        let nobounds =
            BlockConfig::new(BlockKind::Mlp, 1, 3, ActivationKind::Gelu).with_linmap(LinMapKind::Spectral, None);
        assert!(Block::new("x", &nobounds, 2, 2, true, &mut store, &mut init).is_err());
    }

    #[test]
    fn pf_block_falls_back_to_dense_for_rectangular_layers() {
        let b = SpectralBounds::new(0.1, 0.9).unwrap();
        let cfg = BlockConfig::new(BlockKind::Mlp, 2, 4, ActivationKind::Gelu)
            .with_linmap(LinMapKind::PerronFrobenius, Some(b));
        let (block, _) = build(&cfg, 2, 3, 0);
        let kinds: Vec<LinMapKind> = block.maps().iter().map(|m| m.kind()).collect();
        assert_eq!(kinds, vec![LinMapKind::Dense, LinMapKind::PerronFrobenius, LinMapKind::Dense]);
    }

    #[test]
    fn blu_beta_starts_at_zero_and_is_clamped() {
        let cfg = BlockConfig::new(BlockKind::Mlp, 2, 3, ActivationKind::Blu);
        let (b, mut store) = build(&cfg, 2, 2, 0);
        let betas = b.beta_params();
        assert_eq!(betas.len(), 2);
        assert!(betas.iter().all(|&id| store.value(id).as_slice() == [0.0]));
        *store.value_mut(betas[0]) = Matrix::scalar(3.0);
        store.project();
        assert_eq!(store.value(betas[0]).as_slice(), &[1.0]);
    }
}
