//! Affine-coupling normalizing flow.
//!
//! A [`FlowStack`] maps a latent code `z` to base space, `f(z)`, and reports
//! `log |det df/dz|`. With a label-conditioned base distribution `N(mu_p(y), sigma_p(y))`
//! this gives the conditional prior density `log N(f(z); mu_p, sigma_p) + log |det|`.
//!
//! Each [`CouplingLayer`] leaves one partition of the coordinates untouched and applies
//! `x * exp(s) + t` to the other, with `s` and `t` computed from the untouched part by
//! two-hidden-layer MLPs. Because the Jacobian is triangular the log-determinant is just
//! `sum(s)`. The raw `s` output goes through `S_MAX * tanh(raw / S_MAX)` so scales stay in
//! `[exp(-S_MAX), exp(S_MAX)]`.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::DiagGaussian;
use crate::error::{ensure_dim, Error, Result};
use crate::params::{linear, ParamStore};

/// Bound on the per-coordinate log-scale of a coupling layer.
pub const S_MAX: f64 = 5.0;

/// Which half of the coordinates a coupling layer passes through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    /// Coordinates `[0, d)` are fixed, `[d, D)` are transformed.
    LowFixed,
    /// Coordinates `[d, D)` are fixed, `[0, d)` are transformed.
    HighFixed,
}

impl Parity {
    fn flipped(self) -> Self {
        match self {
            Parity::LowFixed => Parity::HighFixed,
            Parity::HighFixed => Parity::LowFixed,
        }
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    hidden1: Linear,
    hidden2: Linear,
    out: Linear,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden1: linear(store, &format!("{name}.hidden1"), in_dim, hidden, false, rng)?,
            hidden2: linear(store, &format!("{name}.hidden2"), hidden, hidden, false, rng)?,
            // zero-initialized output: the layer starts as the identity map
            out: linear(store, &format!("{name}.out"), hidden, out_dim, true, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden1.forward(x)?.tanh()?;
        let h = self.hidden2.forward(&h)?.tanh()?;
        Ok(self.out.forward(&h)?)
    }
}

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    dim: usize,
    split: usize,
    parity: Parity,
    s_net: Mlp,
    t_net: Mlp,
}

impl CouplingLayer {
    /// A coupling layer on `dim` coordinates split at `dim / 2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        parity: Parity,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!(
                "coupling layer needs at least 2 coordinates, got {dim}"
            )));
        }
        let split = dim / 2;
        let (fixed, moved) = match parity {
            Parity::LowFixed => (split, dim - split),
            Parity::HighFixed => (dim - split, split),
        };
        Ok(Self {
            dim,
            split,
            parity,
            s_net: Mlp::new(store, &format!("{name}.s"), fixed, hidden, moved, rng)?,
            t_net: Mlp::new(store, &format!("{name}.t"), fixed, hidden, moved, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split_index(&self) -> usize {
        self.split
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    /// Splits `[N, D]` into `(fixed, moved)` parts.
    fn partition(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let low = x.narrow(1, 0, self.split)?;
        let high = x.narrow(1, self.split, self.dim - self.split)?;
        Ok(match self.parity {
            Parity::LowFixed => (low, high),
            Parity::HighFixed => (high, low),
        })
    }

    fn assemble(&self, fixed: &Tensor, moved: &Tensor) -> Result<Tensor> {
        Ok(match self.parity {
            Parity::LowFixed => Tensor::cat(&[fixed, moved], 1)?,
            Parity::HighFixed => Tensor::cat(&[moved, fixed], 1)?,
        })
    }

    fn scale_shift(&self, fixed: &Tensor) -> Result<(Tensor, Tensor)> {
        let raw = self.s_net.forward(fixed)?;
        let s = ((raw / S_MAX)?.tanh()? * S_MAX)?;
        let t = self.t_net.forward(fixed)?;
        Ok((s, t))
    }

    /// Returns `(g, log_det)` with `log_det` of shape `[N]`.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        ensure_dim("coupling_forward", self.dim, z.dim(D::Minus1)?)?;
        let (fixed, moved) = self.partition(z)?;
        let (s, t) = self.scale_shift(&fixed)?;
        let moved = (moved * s.exp()?)?.add(&t)?;
        let log_det = s.sum(D::Minus1)?;
        Ok((self.assemble(&fixed, &moved)?, log_det))
    }

    pub fn inverse(&self, g: &Tensor) -> Result<Tensor> {
        ensure_dim("coupling_inverse", self.dim, g.dim(D::Minus1)?)?;
        let (fixed, moved) = self.partition(g)?;
        let (s, t) = self.scale_shift(&fixed)?;
        let moved = (moved - t)?.mul(&s.neg()?.exp()?)?;
        self.assemble(&fixed, &moved)
    }
}

/// Ordered coupling layers with alternating parity.
#[derive(Debug, Clone)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

impl FlowStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Config(format!(
                "flow depth must be at least 2, got {depth}"
            )));
        }
        let mut parity = Parity::LowFixed;
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            layers.push(CouplingLayer::new(
                store,
                &format!("{name}.{k}"),
                dim,
                parity,
                hidden,
                rng,
            )?);
            parity = parity.flipped();
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// `(f(z), log |det df/dz|)`; the log-determinant has shape `[N]`.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        ensure_dim("flow_forward", self.dim, z.dim(D::Minus1)?)?;
        let mut x = z.clone();
        let mut total: Option<Tensor> = None;
        for layer in &self.layers {
            let (next, log_det) = layer.forward(&x)?;
            x = next;
            total = Some(match total {
                None => log_det,
                Some(acc) => (acc + log_det)?,
            });
        }
        let total = match total {
            Some(t) => t,
            None => Tensor::zeros(z.dims()[0], z.dtype(), z.device())?,
        };
        Ok((x, total))
    }

    pub fn inverse(&self, e: &Tensor) -> Result<Tensor> {
        ensure_dim("flow_inverse", self.dim, e.dim(D::Minus1)?)?;
        self.layers
            .iter()
            .rev()
            .try_fold(e.clone(), |x, layer| layer.inverse(&x))
    }
}

/// `log N(f(z); base) + log |det df/dz|`, one value per row of `z`.
pub fn conditional_prior_log_prob(z: &Tensor, base: &DiagGaussian, flow: &FlowStack) -> Result<Tensor> {
    ensure_dim("conditional_prior_log_prob", base.dim(), flow.dim())?;
    let (f_z, log_det) = flow.forward(z)?;
    Ok((base.log_prob(&f_z)? + log_det)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, v.len()), &Device::Cpu).unwrap()
    }

    fn set_bias(store: &ParamStore, name: &str, value: f64) {
        let var = store.get(name).unwrap();
        let t = Tensor::full(value, var.shape(), &Device::Cpu).unwrap();
        var.set(&t).unwrap();
    }

    /// Constant `s = ln 2`, `t = 3` layer via the output biases.
    fn constant_layer(parity: Parity) -> (ParamStore, CouplingLayer) {
        let mut store = ParamStore::new(DType::F64);
        let layer = CouplingLayer::new(&mut store, "c", 2, parity, 4, &mut rng(0)).unwrap();
        let raw = S_MAX * (2f64.ln() / S_MAX).atanh();
        set_bias(&store, "c.s.out.bias", raw);
        set_bias(&store, "c.t.out.bias", 3.0);
        (store, layer)
    }

    fn random_stack(dim: usize, depth: usize, seed: u64) -> (ParamStore, FlowStack) {
        let mut r = rng(seed);
        let mut store = ParamStore::new(DType::F64);
        let flow = FlowStack::new(&mut store, "flow", dim, depth, 16, &mut r).unwrap();
        store.perturb(0.3, &mut r).unwrap();
        (store, flow)
    }

    fn vec_of(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn fd_log_abs_det(f: impl Fn(&[f64]) -> Vec<f64>, z: &[f64]) -> f64 {
        let d = z.len();
        let h = 1e-5;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            let (mut zp, mut zm) = (z.to_vec(), z.to_vec());
            zp[j] += h;
            zm[j] -= h;
            let (fp, fm) = (f(&zp), f(&zm));
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    #[test]
    fn identity_coupling() {
        let mut store = ParamStore::new(DType::F64);
        let layer = CouplingLayer::new(&mut store, "c", 4, Parity::LowFixed, 8, &mut rng(1)).unwrap();
        let z = row(&[0.5, -1.0, 2.0, 3.5]);
        let (g, ld) = layer.forward(&z).unwrap();
        assert_eq!(vec_of(&g), vec_of(&z));
        assert_eq!(vec_of(&ld), vec![0.0]);
        assert_eq!(vec_of(&layer.inverse(&z).unwrap()), vec_of(&z));
    }

    #[test]
    fn constant_scale_coupling() {
        let (_store, layer) = constant_layer(Parity::LowFixed);
        let (g, ld) = layer.forward(&row(&[1.0, 2.0])).unwrap();
        let g = vec_of(&g);
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 7.0).abs() < 1e-12);
        assert!((vec_of(&ld)[0] - 2f64.ln()).abs() < 1e-12);

        let z = vec_of(&layer.inverse(&row(&[1.0, 7.0])).unwrap());
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn coupling_dimension_mismatch() {
        let (_store, layer) = constant_layer(Parity::LowFixed);
        assert!(matches!(
            layer.forward(&row(&[1.0, 2.0, 3.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(layer.inverse(&row(&[1.0])).is_err());
    }

    #[test]
    fn random_coupling_log_det_matches_jacobian() {
        let mut r = rng(7);
        let mut store = ParamStore::new(DType::F64);
        let layer = CouplingLayer::new(&mut store, "c", 4, Parity::HighFixed, 16, &mut r).unwrap();
        store.perturb(0.4, &mut r).unwrap();
        let z = [0.3, -0.7, 1.1, 0.2];
        let (_, ld) = layer.forward(&row(&z)).unwrap();
        let fd = fd_log_abs_det(|v| vec_of(&layer.forward(&row(v)).unwrap().0), &z);
        assert!((vec_of(&ld)[0] - fd).abs() < 1e-4, "{} vs {fd}", vec_of(&ld)[0]);
    }

    #[test]
    fn random_coupling_round_trip() {
        let mut r = rng(8);
        let mut store = ParamStore::new(DType::F64);
        let layer = CouplingLayer::new(&mut store, "c", 5, Parity::LowFixed, 16, &mut r).unwrap();
        store.perturb(0.4, &mut r).unwrap();
        let g: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        let back = layer.forward(&layer.inverse(&row(&g)).unwrap()).unwrap().0;
        let err = vec_of(&back)
            .iter()
            .zip(&g)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn identity_stack() {
        let mut store = ParamStore::new(DType::F64);
        let flow = FlowStack::new(&mut store, "f", 3, 4, 8, &mut rng(2)).unwrap();
        let z = row(&[1.0, -2.0, 0.25]);
        let (fz, ld) = flow.forward(&z).unwrap();
        assert_eq!(vec_of(&fz), vec_of(&z));
        assert_eq!(vec_of(&ld), vec![0.0]);
        assert_eq!(vec_of(&flow.inverse(&z).unwrap()), vec_of(&z));
    }

    #[test]
    fn log_dets_add_across_layers() {
        let (_s1, low) = constant_layer(Parity::LowFixed);
        let (_s2, high) = constant_layer(Parity::HighFixed);
        let flow = FlowStack {
            dim: 2,
            layers: vec![low, high],
        };
        let z = row(&[1.0, 2.0]);
        let (fz, ld) = flow.forward(&z).unwrap();
        assert!((vec_of(&ld)[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        // low: (1, 7); high transforms coordinate 0 from coordinate 1: 1 * 2 + 3 = 5
        let fz = vec_of(&fz);
        assert!((fz[0] - 5.0).abs() < 1e-12 && (fz[1] - 7.0).abs() < 1e-12);
        let back = vec_of(&flow.inverse(&row(&fz)).unwrap());
        assert!((back[0] - 1.0).abs() < 1e-12 && (back[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn depth_and_parity_invariants() {
        let mut store = ParamStore::new(DType::F64);
        assert!(FlowStack::new(&mut store, "f", 4, 1, 8, &mut rng(0)).is_err());
        let flow = FlowStack::new(&mut store, "g", 4, 4, 8, &mut rng(0)).unwrap();
        for pair in flow.layers().windows(2) {
            assert_ne!(pair[0].parity(), pair[1].parity());
        }
        assert_eq!(flow.layers()[0].split_index(), 2);
    }

    #[test]
    fn random_stack_log_det_matches_jacobian() {
        let (_store, flow) = random_stack(8, 4, 21);
        let mut r = rng(22);
        let z: Vec<f64> = (0..8).map(|_| r.gen_range(-1.5..1.5)).collect();
        let (_, ld) = flow.forward(&row(&z)).unwrap();
        let fd = fd_log_abs_det(|v| vec_of(&flow.forward(&row(v)).unwrap().0), &z);
        assert!((vec_of(&ld)[0] - fd).abs() < 1e-4);
    }

    #[test]
    fn random_stack_round_trips() {
        for dim in [2, 8, 32] {
            let (_store, flow) = random_stack(dim, 4, dim as u64);
            let mut r = rng(100 + dim as u64);
            let n = 100;
            let z: Vec<f64> = (0..n * dim).map(|_| r.gen_range(-3.0..3.0)).collect();
            let z = Tensor::from_vec(z, (n, dim), &Device::Cpu).unwrap();
            let (fz, _) = flow.forward(&z).unwrap();
            let back = flow.inverse(&fz).unwrap();
            let err = (back - &z)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(err < 1e-5, "dim {dim}: {err}");

            let e = flow.forward(&flow.inverse(&z).unwrap()).unwrap().0;
            let err = (e - &z)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn every_coordinate_is_transformed() {
        let (_store, flow) = random_stack(6, 2, 5);
        let z = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let base = vec_of(&flow.forward(&row(&z)).unwrap().0);
        let moved: Vec<bool> = base.iter().zip(&z).map(|(a, b)| (a - b).abs() > 1e-9).collect();
        assert!(moved.iter().all(|m| *m), "{moved:?}");
    }

    #[test]
    fn conditional_prior_identity_cases() {
        let mut store = ParamStore::new(DType::F64);
        let flow = FlowStack::new(&mut store, "f", 2, 2, 4, &mut rng(3)).unwrap();
        let base = DiagGaussian::from_slices(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let z = row(&[0.4, -1.3]);
        let a = vec_of(&conditional_prior_log_prob(&z, &base, &flow).unwrap())[0];
        let b = vec_of(&base.log_prob(&z).unwrap())[0];
        assert_eq!(a, b);

        let mut store = ParamStore::new(DType::F64);
        let flow = FlowStack::new(&mut store, "f", 1 + 1, 2, 4, &mut rng(3)).unwrap();
        // D = 1 is below the coupling minimum, so check the 1-D value on one coordinate
        let base = DiagGaussian::from_slices(&[0.0, 0.0], &[2f64.ln(), 0.0]).unwrap();
        let lp = vec_of(&conditional_prior_log_prob(&row(&[0.0, 0.0]), &base, &flow).unwrap())[0];
        let expected =
            (-0.5 * (2.0 * std::f64::consts::PI).ln() - 2f64.ln()) - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn conditional_prior_integrates_to_one() {
        let (_store, flow) = random_stack(2, 4, 31);
        let base = DiagGaussian::from_slices(&[0.2, -0.1], &[0.1, -0.2]).unwrap();
        let n = 401;
        let h = 20.0 / (n - 1) as f64;
        let mut pts = Vec::with_capacity(n * n * 2);
        for i in 0..n {
            for j in 0..n {
                pts.push(-10.0 + h * i as f64);
                pts.push(-10.0 + h * j as f64);
            }
        }
        let z = Tensor::from_vec(pts, (n * n, 2), &Device::Cpu).unwrap();
        let dens = vec_of(
            &conditional_prior_log_prob(&z, &base, &flow)
                .unwrap()
                .exp()
                .unwrap(),
        );
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                total += wi * wj * dens[i * n + j];
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-2, "integral {total}");
    }
}
