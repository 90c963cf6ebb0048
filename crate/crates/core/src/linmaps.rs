//! Linear maps with optional spectral structure.
//!
//! Four parametrizations share one interface:
//!
//! * [`LinMapKind::Dense`]: an unconstrained weight matrix.
//! * [`LinMapKind::PerronFrobenius`]: `softmax_rows(W) ⊙ M̃` with every entry
//!   of `M̃` squeezed into `[λ_min, λ_max]`. Row sums then lie in the same
//!   interval, which bounds the dominant eigenvalue of the (positive) matrix.
//! * [`LinMapKind::SoftSvd`]: `U · diag(Σ̃) · V` with `Σ̃` squeezed into the
//!   bounds and orthogonality of `U`, `V` encouraged by [`LinearMap::reg_penalty`].
//! * [`LinMapKind::Spectral`]: as soft SVD, but `U` and `V` are products of
//!   Householder reflectors and are orthogonal by construction.
//!
//! Maps are purely linear; biases belong to the enclosing block layer.

use std::io::Write;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::Initializer;

/// Lower and upper bound on eigenvalues (Perron-Frobenius) or singular values
/// (soft SVD, spectral).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl SpectralBounds {
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        let b = Self { lambda_min, lambda_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lambda_min && self.lambda_min < self.lambda_max && self.lambda_max.is_finite()) {
            return Err(Error::Config(format!(
                "spectral bounds must satisfy 0 <= min < max, got ({}, {})",
                self.lambda_min, self.lambda_max
            )));
        }
        Ok(())
    }

    /// `λ_max − (λ_max − λ_min) · σ(raw)`, elementwise.
    pub fn squeeze(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let s = tape.sigmoid(raw)?;
        tape.affine(s, -(self.lambda_max - self.lambda_min), self.lambda_max)
    }

    pub fn squeeze_value(&self, raw: f64) -> f64 {
        self.lambda_max - (self.lambda_max - self.lambda_min) * crate::diffcore::logistic(raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinMapKind {
    Dense,
    PerronFrobenius,
    SoftSvd,
    Spectral,
}

impl LinMapKind {
    pub fn needs_bounds(self) -> bool {
        !matches!(self, LinMapKind::Dense)
    }
}

#[derive(Clone, Debug)]
enum MapParams {
    Dense { w: ParamId },
    PerronFrobenius { w: ParamId, m: ParamId },
    SoftSvd { u: ParamId, sigma: ParamId, v: ParamId },
    Spectral { u_vecs: Vec<ParamId>, v_vecs: Vec<ParamId>, sigma: ParamId },
}

/// A matrix-valued function of parameters mapping `in_dim` to `out_dim`.
#[derive(Clone, Debug)]
pub struct LinearMap {
    name: String,
    kind: LinMapKind,
    in_dim: usize,
    out_dim: usize,
    bounds: Option<SpectralBounds>,
    params: MapParams,
}

impl LinearMap {
    /// Registers the parameters of a new map in `store`.
    ///
    /// Perron-Frobenius maps must be square. The Householder reflector count
    /// per side defaults to the side's dimension.
    pub fn new(
        name: impl Into<String>,
        kind: LinMapKind,
        in_dim: usize,
        out_dim: usize,
        bounds: Option<SpectralBounds>,
        store: &mut ParamStore,
        init: &mut Initializer,
    ) -> Result<Self> {
        Self::with_reflectors(name, kind, in_dim, out_dim, bounds, None, store, init)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_reflectors(
        name: impl Into<String>,
        kind: LinMapKind,
        in_dim: usize,
        out_dim: usize,
        bounds: Option<SpectralBounds>,
        reflectors: Option<usize>,
        store: &mut ParamStore,
        init: &mut Initializer,
    ) -> Result<Self> {
        let name = name.into();
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!("{name}: zero-sized linear map")));
        }
        if kind.needs_bounds() {
            match bounds {
                Some(b) => b.validate()?,
                None => return Err(Error::Config(format!("{name}: {kind:?} map requires spectral bounds"))),
            }
        }
        let bounds = if kind.needs_bounds() { bounds } else { None };
        let r = in_dim.min(out_dim);
        let params = match kind {
            LinMapKind::Dense => {
                MapParams::Dense { w: store.add(format!("{name}.w"), init.scaled_uniform(out_dim, in_dim, in_dim)) }
            }
            LinMapKind::PerronFrobenius => {
                if in_dim != out_dim {
                    return Err(Error::Config(format!(
                        "{name}: Perron-Frobenius map must be square, got {out_dim}x{in_dim}"
                    )));
                }
                let w = store.add(format!("{name}.w"), init.scaled_uniform(out_dim, in_dim, in_dim));
                let m = store.add(format!("{name}.m"), init.scaled_uniform(out_dim, in_dim, in_dim));
                MapParams::PerronFrobenius { w, m }
            }
            LinMapKind::SoftSvd => {
                let u = store.add(format!("{name}.u"), init.orthogonal(out_dim));
                let sigma = store.add(format!("{name}.sigma"), init.normal(r, 1));
                let v = store.add(format!("{name}.v"), init.orthogonal(in_dim));
                MapParams::SoftSvd { u, sigma, v }
            }
            LinMapKind::Spectral => {
                let (ku, kv) = match reflectors {
                    Some(0) => return Err(Error::Config(format!("{name}: at least one reflector per side"))),
                    Some(k) => (k, k),
                    None => (out_dim, in_dim),
                };
                let u_vecs = (0..ku).map(|k| store.add(format!("{name}.u{k}"), init.normal(out_dim, 1))).collect();
                let v_vecs = (0..kv).map(|k| store.add(format!("{name}.v{k}"), init.normal(in_dim, 1))).collect();
                let sigma = store.add(format!("{name}.sigma"), init.normal(r, 1));
                MapParams::Spectral { u_vecs, v_vecs, sigma }
            }
        };
        Ok(Self { name, kind, in_dim, out_dim, bounds, params })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LinMapKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn bounds(&self) -> Option<SpectralBounds> {
        self.bounds
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            MapParams::Dense { w } => vec![*w],
            MapParams::PerronFrobenius { w, m } => vec![*w, *m],
            MapParams::SoftSvd { u, sigma, v } => vec![*u, *sigma, *v],
            MapParams::Spectral { u_vecs, v_vecs, sigma } => {
                u_vecs.iter().chain(v_vecs).chain(std::iter::once(sigma)).copied().collect()
            }
        }
    }

    /// Parameter holding the raw (pre-squeeze) singular values, if any.
    pub fn sigma_param(&self) -> Option<ParamId> {
        match &self.params {
            MapParams::SoftSvd { sigma, .. } | MapParams::Spectral { sigma, .. } => Some(*sigma),
            _ => None,
        }
    }

    /// Dense weight parameter, for dense maps only.
    pub fn dense_param(&self) -> Option<ParamId> {
        match &self.params {
            MapParams::Dense { w } => Some(*w),
            _ => None,
        }
    }

    /// Records the effective `out_dim × in_dim` matrix on `tape`.
    pub fn effective(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        match &self.params {
            MapParams::Dense { w } => tape.param(store, *w),
            MapParams::PerronFrobenius { w, m } => {
                let wv = tape.param(store, *w)?;
                let mv = tape.param(store, *m)?;
                pf_effective(tape, wv, mv, self.bounds.expect("validated"))
            }
            MapParams::SoftSvd { u, sigma, v } => {
                let uv = tape.param(store, *u)?;
                let sv = tape.param(store, *sigma)?;
                let vv = tape.param(store, *v)?;
                svd_compose(tape, uv, sv, vv, self.bounds.expect("validated"))
            }
            MapParams::Spectral { u_vecs, v_vecs, sigma } => {
                let us = u_vecs.iter().map(|&p| tape.param(store, p)).collect::<Result<Vec<_>>>()?;
                let vs = v_vecs.iter().map(|&p| tape.param(store, p)).collect::<Result<Vec<_>>>()?;
                let sv = tape.param(store, *sigma)?;
                householder_effective(tape, &us, &vs, sv, self.bounds.expect("validated"))
            }
        }
    }

    /// Orthogonality penalty; present only for soft SVD maps.
    pub fn reg_penalty(&self, tape: &mut Tape, store: &ParamStore) -> Result<Option<Var>> {
        match &self.params {
            MapParams::SoftSvd { u, v, .. } => {
                let uv = tape.param(store, *u)?;
                let vv = tape.param(store, *v)?;
                softsvd_reg(tape, uv, vv).map(Some)
            }
            _ => Ok(None),
        }
    }

    /// Effective matrix evaluated outside of any training tape.
    pub fn effective_matrix(&self, store: &ParamStore) -> Result<Matrix> {
        let mut tape = Tape::new();
        let w = self.effective(&mut tape, store)?;
        Ok(tape.value(w).clone())
    }

    /// Orthogonal factors `(U, V)` of a spectral map.
    pub fn householder_factors(&self, store: &ParamStore) -> Option<Result<(Matrix, Matrix)>> {
        let MapParams::Spectral { u_vecs, v_vecs, .. } = &self.params else { return None };
        let build = || -> Result<(Matrix, Matrix)> {
            let mut tape = Tape::new();
            let us = u_vecs.iter().map(|&p| tape.param(store, p)).collect::<Result<Vec<_>>>()?;
            let vs = v_vecs.iter().map(|&p| tape.param(store, p)).collect::<Result<Vec<_>>>()?;
            let u = householder_product(&mut tape, &us)?;
            let v = householder_product(&mut tape, &vs)?;
            Ok((tape.value(u).clone(), tape.value(v).clone()))
        };
        Some(build())
    }

    pub fn eigenvalues(&self, store: &ParamStore) -> Result<Vec<Complex<f64>>> {
        eigenvalues(&self.effective_matrix(store)?)
    }
}

/// `softmax_rows(W) ⊙ (λ_max − (λ_max − λ_min) σ(M))`.
pub fn pf_effective(tape: &mut Tape, w: Var, m: Var, bounds: SpectralBounds) -> Result<Var> {
    let (wr, wc) = tape.shape(w);
    if wr != wc || tape.shape(m) != (wr, wc) {
        return Err(Error::Shape(format!(
            "Perron-Frobenius factors must be equal square matrices, got {wr}x{wc} and {:?}",
            tape.shape(m)
        )));
    }
    let sw = tape.softmax_rows(w)?;
    let mt = bounds.squeeze(tape, m)?;
    tape.mul(sw, mt)
}

/// `U[:, :r] · diag(Σ̃) · V[:r, :]` with `r = len(Σ)`.
pub fn svd_compose(tape: &mut Tape, u: Var, sigma: Var, v: Var, bounds: SpectralBounds) -> Result<Var> {
    let (ur, uc) = tape.shape(u);
    let (vr, vc) = tape.shape(v);
    let (r, sc) = tape.shape(sigma);
    if sc != 1 || r > uc || r > vr {
        return Err(Error::Shape(format!("svd factors: U {ur}x{uc}, sigma {r}x{sc}, V {vr}x{vc}")));
    }
    let ur_ = if uc == r { u } else { tape.slice_cols(u, 0, r)? };
    let vr_ = if vr == r {
        v
    } else {
        let vt = tape.transpose(v)?;
        let sl = tape.slice_cols(vt, 0, r)?;
        tape.transpose(sl)?
    };
    let st = bounds.squeeze(tape, sigma)?;
    let sv = tape.scale_rows(vr_, st)?;
    tape.matmul(ur_, sv)
}

/// `‖I − UUᵀ‖_F + ‖I − UᵀU‖_F + ‖I − VVᵀ‖_F + ‖I − VᵀV‖_F`.
pub fn softsvd_reg(tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(4);
    for f in [u, v] {
        let ft = tape.transpose(f)?;
        for (a, b) in [(f, ft), (ft, f)] {
            let prod = tape.matmul(a, b)?;
            let n = tape.shape(prod).0;
            let eye = tape.constant(Matrix::identity(n))?;
            let diff = tape.sub(eye, prod)?;
            terms.push(tape.frobenius(diff)?);
        }
    }
    tape.add_all(&terms)
}

/// `H(v_1) H(v_2) ⋯ H(v_k)` with `H(v) = I − 2 v vᵀ / ‖v‖²`.
pub fn householder_product(tape: &mut Tape, vectors: &[Var]) -> Result<Var> {
    let Some(&first) = vectors.first() else {
        return Err(Error::Config("householder product needs at least one reflector".into()));
    };
    let n = tape.shape(first).0;
    let mut acc = tape.constant(Matrix::identity(n))?;
    for (index, &v) in vectors.iter().enumerate() {
        let vm = tape.value(v);
        if vm.shape() != (n, 1) {
            return Err(Error::Shape(format!("reflector {index} must be {n}x1, got {:?}", vm.shape())));
        }
        if vm.frobenius_norm() <= f64::EPSILON {
            return Err(Error::ZeroReflector { index });
        }
        // acc · H(v) = acc − (2/‖v‖²) (acc v) vᵀ
        let av = tape.matmul(acc, v)?;
        let vt = tape.transpose(v)?;
        let outer = tape.matmul(av, vt)?;
        let sq = tape.square(v)?;
        let norm2 = tape.sum(sq)?;
        let inv = tape.recip(norm2)?;
        let coef = tape.scale(inv, 2.0)?;
        let update = tape.scale_by(coef, outer)?;
        acc = tape.sub(acc, update)?;
    }
    Ok(acc)
}

pub fn householder_effective(
    tape: &mut Tape,
    u_vectors: &[Var],
    v_vectors: &[Var],
    sigma: Var,
    bounds: SpectralBounds,
) -> Result<Var> {
    let u = householder_product(tape, u_vectors)?;
    let v = householder_product(tape, v_vectors)?;
    svd_compose(tape, u, sigma, v, bounds)
}

/// All eigenvalues of a square real matrix.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex<f64>>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("eigenvalues of non-square {}x{} matrix", m.rows(), m.cols())));
    }
    let n = m.rows();
    let dm = DMatrix::from_row_slice(n, n, m.as_slice());
    Ok(dm.complex_eigenvalues().iter().copied().collect())
}

/// One row of an eigenvalue export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenRecord {
    pub map_name: String,
    pub re: f64,
    pub im: f64,
}

/// Writes `map_name,re,im` rows with a header line.
pub fn write_eigen_csv<W: Write>(mut out: W, records: &[EigenRecord]) -> Result<()> {
    writeln!(out, "map_name,re,im")?;
    for r in records {
        writeln!(out, "{},{:.17e},{:.17e}", r.map_name, r.re, r.im)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(lo: f64, hi: f64) -> SpectralBounds {
        SpectralBounds::new(lo, hi).unwrap()
    }

    #[test]
    fn pf_scalar_case_is_half() {
        let mut t = Tape::new();
        let w = t.constant(Matrix::scalar(3.7)).unwrap();
        let m = t.constant(Matrix::scalar(0.0)).unwrap();
        let e = pf_effective(&mut t, w, m, bounds(0.0, 1.0)).unwrap();
        assert!((t.value(e).as_slice()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pf_rejects_non_square() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let err = LinearMap::new("a", LinMapKind::PerronFrobenius, 3, 2, Some(bounds(0.1, 0.9)), &mut store, &mut init);
        assert!(matches!(err, Err(Error::Config(_))));
        let mut t = Tape::new();
        let w = t.constant(Matrix::zeros(2, 3)).unwrap();
        assert!(pf_effective(&mut t, w, w, bounds(0.0, 1.0)).is_err());
    }

    #[test]
    fn softsvd_identity_factors_give_half_identity() {
        let mut t = Tape::new();
        let u = t.constant(Matrix::identity(3)).unwrap();
        let v = t.constant(Matrix::identity(3)).unwrap();
        let s = t.constant(Matrix::zeros(3, 1)).unwrap();
        let w = svd_compose(&mut t, u, s, v, bounds(0.0, 1.0)).unwrap();
        assert!(t.value(w).sub(&Matrix::identity(3).scale(0.5)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn softsvd_saturated_sigma_tends_to_lower_bound() {
        let b = bounds(0.3, 0.9);
        assert!((b.squeeze_value(50.0) - 0.3).abs() < 1e-12);
        assert!((b.squeeze_value(-50.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn softsvd_reg_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Matrix::identity(2)).unwrap();
        let r0 = softsvd_reg(&mut t, i2, i2).unwrap();
        assert_eq!(t.value(r0).as_slice(), &[0.0]);
        let u = t.constant(Matrix::identity(2).scale(2.0)).unwrap();
        let r = softsvd_reg(&mut t, u, i2).unwrap();
        let expected = 6.0 * 2f64.sqrt();
        assert!((t.value(r).as_slice()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn single_reflector_is_householder_matrix() {
        let mut t = Tape::new();
        let e1 = t.constant(Matrix::column(&[1.0, 0.0, 0.0])).unwrap();
        let u = householder_product(&mut t, &[e1]).unwrap();
        let expected = Matrix::diag(&[-1.0, 1.0, 1.0]);
        assert!(t.value(u).sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn zero_reflector_is_an_error() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(3, 1)).unwrap();
        let e = t.constant(Matrix::column(&[0.0, 1.0, 0.0])).unwrap();
        assert!(matches!(householder_product(&mut t, &[e, z]), Err(Error::ZeroReflector { index: 1 })));
    }

    #[test]
    fn eigenvalue_examples() {
        let ev = eigenvalues(&Matrix::identity(3)).unwrap();
        assert!(ev.iter().all(|z| (z.re - 1.0).abs() < 1e-12 && z.im.abs() < 1e-12));
        let rot = Matrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let mut ims: Vec<f64> = eigenvalues(&rot).unwrap().iter().map(|z| z.im).collect();
        ims.sort_by(f64::total_cmp);
        assert!((ims[0] + 1.0).abs() < 1e-12 && (ims[1] - 1.0).abs() < 1e-12);
        assert!(eigenvalues(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn every_kind_has_the_same_shape() {
        let b = Some(bounds(0.2, 0.8));
        for kind in [LinMapKind::Dense, LinMapKind::PerronFrobenius, LinMapKind::SoftSvd, LinMapKind::Spectral] {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(3);
            let map = LinearMap::new("m", kind, 4, 4, b, &mut store, &mut init).unwrap();
            assert_eq!(map.effective_matrix(&store).unwrap().shape(), (4, 4), "{kind:?}");
        }
        for kind in [LinMapKind::Dense, LinMapKind::SoftSvd, LinMapKind::Spectral] {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(3);
            let map = LinearMap::new("m", kind, 5, 3, b, &mut store, &mut init).unwrap();
            assert_eq!(map.effective_matrix(&store).unwrap().shape(), (3, 5), "{kind:?}");
        }
    }

    #[test]
    fn constrained_kinds_require_bounds() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        assert!(LinearMap::new("m", LinMapKind::SoftSvd, 2, 2, None, &mut store, &mut init).is_err());
        assert!(SpectralBounds::new(0.7, 0.4).is_err());
        assert!(SpectralBounds::new(-0.1, 0.4).is_err());
    }

    #[test]
    fn eigen_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        let recs = vec![EigenRecord { map_name: "fx.0".into(), re: 0.5, im: -0.25 }];
        write_eigen_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("map_name,re,im"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "fx.0");
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.5);
        assert_eq!(row[2].parse::<f64>().unwrap(), -0.25);
    }
}
