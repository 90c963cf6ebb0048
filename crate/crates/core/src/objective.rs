//! Loss terms, constraint penalties and the AdamW optimizer.
//!
//! Per-step tensors are `B × d` nodes (one row per window); a horizon of `N`
//! steps is a slice of `N` such nodes. Every term is a mean, so magnitudes do
//! not scale with batch size or horizon.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Box constraints for outputs and for input contributions `f_u(u_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
    pub fu_lower: Vec<f64>,
    pub fu_upper: Vec<f64>,
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi, what) in [(&self.y_lower, &self.y_upper, "y"), (&self.fu_lower, &self.fu_upper, "f_u")] {
            if lo.len() != hi.len() {
                return Err(Error::Config(format!("{what} bounds have different lengths")));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(Error::Config(format!("{what} lower bounds must be below upper bounds")));
            }
        }
        Ok(())
    }
}

/// Coefficients of the multi-objective loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub q_y: f64,
    #[serde(default)]
    pub q_reg: f64,
    #[serde(default)]
    pub q_dx: f64,
    #[serde(default)]
    pub q_con_y: f64,
    #[serde(default)]
    pub q_con_fu: f64,
}

impl LossWeights {
    pub fn mse_only() -> Self {
        Self { q_y: 1.0, q_reg: 0.0, q_dx: 0.0, q_con_y: 0.0, q_con_fu: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.q_y, self.q_reg, self.q_dx, self.q_con_y, self.q_con_fu];
        if all.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Values of every loss term for one evaluation. Absent terms report 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "L_y")]
    pub l_y: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_dx")]
    pub l_dx: f64,
    #[serde(rename = "L_con_y")]
    pub l_con_y: f64,
    #[serde(rename = "L_con_fu")]
    pub l_con_fu: f64,
    pub total: f64,
}

/// Tape nodes for each term; `None` where the term does not apply.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_y: Var,
    pub l_reg: Option<Var>,
    pub l_dx: Option<Var>,
    pub l_con_y: Option<Var>,
    pub l_con_fu: Option<Var>,
}

fn stack(tape: &mut Tape, steps: &[Var]) -> Result<Var> {
    match steps {
        [] => Err(Error::Shape("empty horizon".into())),
        [single] => Ok(*single),
        _ => tape.concat_cols(steps),
    }
}

/// Mean squared error over batch, horizon and output dimension.
pub fn loss_y(tape: &mut Tape, predictions: &[Var], targets: &[Var]) -> Result<Var> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", predictions.len(), targets.len())));
    }
    let p = stack(tape, predictions)?;
    let y = stack(tape, targets)?;
    let d = tape.sub(p, y)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Mean slack `max(0, lower − v) + max(0, v − upper)` over all entries.
pub fn box_penalty(tape: &mut Tape, values: &[Var], lower: &[f64], upper: &[f64]) -> Result<Var> {
    let v = stack(tape, values)?;
    let (_, cols) = tape.shape(v);
    let d = lower.len();
    if d == 0 || upper.len() != d || cols % d != 0 {
        return Err(Error::Shape(format!("bounds of length {d} do not tile width {cols}")));
    }
    let tile = |b: &[f64], sign: f64| -> Matrix {
        Matrix::row(&b.iter().cycle().take(cols).map(|x| sign * x).collect::<Vec<_>>())
    };
    let lo = tape.constant(tile(lower, 1.0))?;
    let neg_hi = tape.constant(tile(upper, -1.0))?;
    let neg_v = tape.scale(v, -1.0)?;
    let below = tape.add_row(neg_v, lo)?;
    let s_lo = tape.relu(below)?;
    let above = tape.add_row(v, neg_hi)?;
    let s_hi = tape.relu(above)?;
    let s = tape.add(s_lo, s_hi)?;
    tape.mean(s)
}

pub fn con_y(tape: &mut Tape, predictions: &[Var], bounds: &Bounds) -> Result<Var> {
    box_penalty(tape, predictions, &bounds.y_lower, &bounds.y_upper)
}

/// Input-influence penalty. Unstructured models have no `f_u`, which makes
/// this a configuration error.
pub fn con_fu(tape: &mut Tape, fu_contributions: &[Var], bounds: &Bounds) -> Result<Var> {
    if fu_contributions.is_empty() {
        return Err(Error::Config("input-influence constraint requires a structured model with f_u".into()));
    }
    box_penalty(tape, fu_contributions, &bounds.fu_lower, &bounds.fu_upper)
}

/// Mean squared difference between successive states.
pub fn loss_dx(tape: &mut Tape, states: &[Var]) -> Result<Var> {
    if states.len() < 2 {
        return Err(Error::Shape("state smoothing needs at least two states".into()));
    }
    let a = stack(tape, &states[..states.len() - 1])?;
    let b = stack(tape, &states[1..])?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Weighted sum of the available terms. Terms with zero weight stay out of
/// the graph but are still reported.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let val = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).as_slice()[0]);
    let weighted = [
        (Some(terms.l_y), weights.q_y),
        (terms.l_reg, weights.q_reg),
        (terms.l_dx, weights.q_dx),
        (terms.l_con_y, weights.q_con_y),
        (terms.l_con_fu, weights.q_con_fu),
    ];
    let mut parts = Vec::new();
    for (term, q) in weighted {
        if let Some(v) = term {
            if q != 0.0 {
                parts.push(tape.scale(v, q)?);
            }
        }
    }
    let total = if parts.is_empty() { tape.scale(terms.l_y, 0.0)? } else { tape.add_all(&parts)? };
    let report = LossReport {
        l_y: val(tape, Some(terms.l_y)),
        l_reg: val(tape, terms.l_reg),
        l_dx: val(tape, terms.l_dx),
        l_con_y: val(tape, terms.l_con_y),
        l_con_fu: val(tape, terms.l_con_fu),
        total: tape.value(total).as_slice()[0],
    };
    Ok((total, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl AdamWConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |p: &crate::diffcore::Param| Matrix::zeros(p.value.rows(), p.value.cols());
        Self {
            config,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    /// Leaves everything untouched if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match parameter store".into()));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let theta = p.value.as_mut_slice();
            for (((t, g), mi), vi) in
                theta.iter_mut().zip(p.grad.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *t -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(tape: &mut Tape, rows: &[&[&[f64]]]) -> Vec<Var> {
        rows.iter().map(|m| tape.constant(Matrix::from_rows(m)).unwrap()).collect()
    }

    #[test]
    fn loss_y_examples() {
        let mut t = Tape::new();
        let p = consts(&mut t, &[&[&[2.0]]]);
        let y = consts(&mut t, &[&[&[0.0]]]);
        let l = loss_y(&mut t, &p, &y).unwrap();
        assert_eq!(t.value(l).as_slice(), &[4.0]);
        let same = loss_y(&mut t, &p, &p).unwrap();
        assert_eq!(t.value(same).as_slice(), &[0.0]);
        // n = 2 windows, N = 2 steps, errors {1, 1, 2, 0}
        let p = consts(&mut t, &[&[&[1.0], &[1.0]], &[&[2.0], &[0.0]]]);
        let y = consts(&mut t, &[&[&[0.0], &[0.0]], &[&[0.0], &[0.0]]]);
        let l = loss_y(&mut t, &p, &y).unwrap();
        assert_eq!(t.value(l).as_slice(), &[1.5]);
        assert!(loss_y(&mut t, &p, &y[..1]).is_err());
    }

    fn bounds1(lo: f64, hi: f64, n: usize) -> Bounds {
        Bounds { y_lower: vec![lo; n], y_upper: vec![hi; n], fu_lower: vec![lo; n], fu_upper: vec![hi; n] }
    }

    #[test]
    fn con_y_examples() {
        let mut t = Tape::new();
        let inside = consts(&mut t, &[&[&[0.2, 0.9]]]);
        let c = con_y(&mut t, &inside, &bounds1(0.0, 1.0, 2)).unwrap();
        assert_eq!(t.value(c).as_slice(), &[0.0]);
        let over = consts(&mut t, &[&[&[2.0]]]);
        let c = con_y(&mut t, &over, &bounds1(0.0, 1.0, 1)).unwrap();
        assert_eq!(t.value(c).as_slice(), &[1.0]);
        let mixed = consts(&mut t, &[&[&[-0.5, 1.5]]]);
        let c = con_y(&mut t, &mixed, &bounds1(0.0, 1.0, 2)).unwrap();
        assert_eq!(t.value(c).as_slice(), &[0.5]);
    }

    #[test]
    fn con_fu_examples() {
        let mut t = Tape::new();
        let b = bounds1(-1.0, 1.0, 2);
        let inside = consts(&mut t, &[&[&[0.5, -0.5]]]);
        let c = con_fu(&mut t, &inside, &b).unwrap();
        assert_eq!(t.value(c).as_slice(), &[0.0]);
        let one = consts(&mut t, &[&[&[1.3]]]);
        let c = con_fu(&mut t, &one, &bounds1(-1.0, 1.0, 1)).unwrap();
        assert!((t.value(c).as_slice()[0] - 0.3).abs() < 1e-15);
        // Two steps, two dims: slacks {0.5, 0, 0, 0.25} -> mean 0.1875
        let mixed = consts(&mut t, &[&[&[1.5, 0.0]], &[&[0.2, -1.25]]]);
        let c = con_fu(&mut t, &mixed, &b).unwrap();
        assert_eq!(t.value(c).as_slice(), &[0.1875]);
        assert!(matches!(con_fu(&mut t, &[], &b), Err(Error::Config(_))));
    }

    #[test]
    fn loss_dx_examples() {
        let mut t = Tape::new();
        let flat = consts(&mut t, &[&[&[1.0, 2.0]], &[&[1.0, 2.0]], &[&[1.0, 2.0]]]);
        let l = loss_dx(&mut t, &flat).unwrap();
        assert_eq!(t.value(l).as_slice(), &[0.0]);
        let two = consts(&mut t, &[&[&[0.0]], &[&[2.0]]]);
        let l = loss_dx(&mut t, &two).unwrap();
        assert_eq!(t.value(l).as_slice(), &[4.0]);
        let three = consts(&mut t, &[&[&[0.0, 0.0]], &[&[1.0, 1.0]], &[&[1.0, 3.0]]]);
        let l = loss_dx(&mut t, &three).unwrap();
        assert_eq!(t.value(l).as_slice(), &[1.5]);
        assert!(loss_dx(&mut t, &three[..1]).is_err());
    }

    fn synthetic_terms(t: &mut Tape, vals: [f64; 5]) -> LossTerms {
        let mut c = |v: f64| t.constant(Matrix::scalar(v)).unwrap();
        LossTerms {
            l_y: c(vals[0]),
            l_reg: Some(c(vals[1])),
            l_dx: Some(c(vals[2])),
            l_con_y: Some(c(vals[3])),
            l_con_fu: Some(c(vals[4])),
        }
    }

    #[test]
    fn total_loss_examples() {
        let mut t = Tape::new();
        let terms = synthetic_terms(&mut t, [2.0, 0.0, 1.0, 1.0, 1.0]);
        let zero = LossWeights { q_y: 0.0, q_reg: 0.0, q_dx: 0.0, q_con_y: 0.0, q_con_fu: 0.0 };
        assert_eq!(total_loss(&mut t, &terms, &zero).unwrap().1.total, 0.0);
        assert_eq!(total_loss(&mut t, &terms, &LossWeights::mse_only()).unwrap().1.total, 2.0);
        // CSTR weights: Q_y = 0.5, Q_dx = 0.2, Q_con_y = 0.2, Q_con_fu = 0.1
        let cstr = LossWeights { q_y: 0.5, q_reg: 0.0, q_dx: 0.2, q_con_y: 0.2, q_con_fu: 0.1 };
        let (_, r) = total_loss(&mut t, &terms, &cstr).unwrap();
        assert!((r.total - 1.5).abs() < 1e-15);
        assert_eq!(r.l_dx, 1.0);
    }

    #[test]
    fn report_serializes_with_term_names() {
        let r = LossReport { l_y: 1.0, ..Default::default() };
        let v = serde_json::to_value(r).unwrap();
        for key in ["L_y", "L_reg", "L_dx", "L_con_y", "L_con_fu", "total"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::row(&[1.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig::new(0.1).with_weight_decay(0.0), &store);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id).as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn adamw_single_step_hand_computed() {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::scalar(1.0));
        store.get_mut(id).grad = Matrix::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.01).with_weight_decay(0.0), &store);
        opt.step(&mut store).unwrap();
        // m_hat = v_hat = 1 -> theta = 1 - 0.01 / (1 + 1e-8)
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((store.value(id).as_slice()[0] - expected).abs() < 1e-15);
        assert!((store.value(id).as_slice()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Matrix::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig::new(0.1).with_weight_decay(0.0), &store);
        for _ in 0..200 {
            store.zero_grad();
            let mut t = Tape::new();
            let th = t.param(&store, id).unwrap();
            let f = t.square(th).unwrap();
            t.backward(f, &mut store).unwrap();
            opt.step(&mut store).unwrap();
        }
        assert!(store.value(id).as_slice()[0].abs() < 1e-3);
    }

    #[test]
    fn adamw_refuses_non_finite_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::scalar(1.0));
        store.get_mut(id).grad = Matrix::scalar(f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::new(0.01), &store);
        assert!(matches!(opt.step(&mut store), Err(Error::NonFiniteGradient(_))));
        assert_eq!(store.value(id).as_slice(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
