//! Fully connected network with sigmoid hidden layers and a linear output.
//!
//! Besides the usual forward pass and reverse-mode gradients, the network
//! propagates a tangent `ẏ = J(x) d` alongside the primal and can
//! back-propagate through both, which gives parameter gradients of losses
//! that contain directional derivatives (Lie derivatives) of the network.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Parameters are stored flat, layer by layer: row-major weights
/// (`out × in`) followed by biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    sizes: Vec<usize>,
    params: Vec<T>,
}

/// Per-layer activations kept for back-propagation.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    /// a[0] = input, a[l] = layer l output (linear for the last layer).
    pub a: Vec<Vec<T>>,
    /// Tangents matching `a`; empty when no direction was given.
    pub da: Vec<Vec<T>>,
    /// Pre-activation tangents `ż` per layer (`dz[l]` belongs to `a[l + 1]`).
    pub dz: Vec<Vec<T>>,
}

impl<T: Scalar> Cache<T> {
    pub fn output(&self) -> &[T] {
        self.a.last().expect("non-empty cache")
    }

    pub fn tangent(&self) -> Option<&[T]> {
        self.da.last().map(|v| v.as_slice())
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![T::zero(); param_count(sizes)],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for p in &mut net.params[off..off + n_in * n_out] {
                *p = T::of(rng.gen_range(-limit..limit));
            }
            off += n_in * n_out + n_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<T>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != param_count(sizes) {
            return Err(Error::domain(format!(
                "expected {} parameters for {sizes:?}, got {}",
                param_count(sizes),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::domain("non-finite network parameter"));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// (weight offset, bias offset, n_in, n_out) of layer `l` (0-based).
    fn layout(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        (off, off + n_in * n_out, n_in, n_out)
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::domain(format!(
                "network expects input dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x, None).a.pop().unwrap())
    }

    /// Forward pass, optionally carrying the tangent of direction `d`.
    pub fn forward(&self, x: &[T], direction: Option<&[T]>) -> Result<Cache<T>> {
        self.check_input(x)?;
        if let Some(d) = direction {
            self.check_input(d)?;
        }
        Ok(self.forward_unchecked(x, direction))
    }

    fn forward_unchecked(&self, x: &[T], direction: Option<&[T]>) -> Cache<T> {
        let layers = self.n_layers();
        let mut a = Vec::with_capacity(layers + 1);
        let mut da = Vec::with_capacity(if direction.is_some() { layers + 1 } else { 0 });
        let mut dzs = Vec::with_capacity(if direction.is_some() { layers } else { 0 });
        a.push(x.to_vec());
        if let Some(d) = direction {
            da.push(d.to_vec());
        }
        for l in 0..layers {
            let (wo, bo, n_in, n_out) = self.layout(l);
            let w = &self.params[wo..bo];
            let b = &self.params[bo..bo + n_out];
            let prev = &a[l];
            let last = l + 1 == layers;
            let mut z: Vec<T> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    row.iter().zip(prev).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
                })
                .collect();
            if !last {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            if !da.is_empty() {
                let dprev = &da[l];
                let dz: Vec<T> = (0..n_out)
                    .map(|o| {
                        let row = &w[o * n_in..(o + 1) * n_in];
                        row.iter().zip(dprev).fold(T::zero(), |acc, (&wi, &di)| acc + wi * di)
                    })
                    .collect();
                let mut dact = dz.clone();
                if !last {
                    for (dv, &av) in dact.iter_mut().zip(&z) {
                        *dv *= av * (T::one() - av);
                    }
                }
                dzs.push(dz);
                da.push(dact);
            }
            a.push(z);
        }
        Cache { a, da, dz: dzs }
    }

    /// Reverse pass for the scalar objective `adj_y · y + adj_dy · ẏ`.
    /// Accumulates parameter gradients into `grad` and returns the input
    /// adjoint of the primal path (`∂(adj_y · y)/∂x` when `adj_dy` is zero).
    pub fn backward(&self, cache: &Cache<T>, adj_y: &[T], adj_dy: Option<&[T]>, grad: &mut [T]) -> Vec<T> {
        let layers = self.n_layers();
        let with_tangent = adj_dy.is_some() && !cache.da.is_empty();
        let mut g_a = adj_y.to_vec();
        let mut g_da = match (with_tangent, adj_dy) {
            (true, Some(v)) => v.to_vec(),
            _ => Vec::new(),
        };
        for l in (0..layers).rev() {
            let (wo, bo, n_in, n_out) = self.layout(l);
            let last = l + 1 == layers;
            // Adjoints of the pre-activation z and its tangent ż.
            let (g_z, g_dz) = if last {
                (g_a.clone(), g_da.clone())
            } else {
                let a = &cache.a[l + 1];
                let mut g_z = vec![T::zero(); n_out];
                let mut g_dz = vec![T::zero(); if with_tangent { n_out } else { 0 }];
                for o in 0..n_out {
                    let s = a[o] * (T::one() - a[o]);
                    let mut ga = g_a[o];
                    if with_tangent {
                        // ȧ = s ż with s = a(1 - a), so s also carries an adjoint.
                        let dz = cache.dz[l][o];
                        g_dz[o] = s * g_da[o];
                        ga += dz * g_da[o] * (T::one() - T::of(2.0) * a[o]);
                    }
                    g_z[o] = ga * s;
                }
                (g_z, g_dz)
            };
            let prev = &cache.a[l];
            let mut next_g_a = vec![T::zero(); n_in];
            let mut next_g_da = vec![T::zero(); if with_tangent { n_in } else { 0 }];
            {
                let (gw, rest) = grad[wo..].split_at_mut(n_in * n_out);
                let gb = &mut rest[..n_out];
                let w = &self.params[wo..bo];
                for o in 0..n_out {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let grow = &mut gw[o * n_in..(o + 1) * n_in];
                    gb[o] += g_z[o];
                    for i in 0..n_in {
                        grow[i] += g_z[o] * prev[i];
                        next_g_a[i] += row[i] * g_z[o];
                    }
                    if with_tangent {
                        let dprev = &cache.da[l];
                        for i in 0..n_in {
                            grow[i] += g_dz[o] * dprev[i];
                            next_g_da[i] += row[i] * g_dz[o];
                        }
                    }
                }
            }
            g_a = next_g_a;
            g_da = next_g_da;
        }
        g_a
    }

    /// Parameter and input gradients of output `k`.
    pub fn grad(&self, x: &[T], k: usize) -> Result<(Vec<T>, Vec<T>)> {
        let cache = self.forward(x, None)?;
        if k >= self.output_dim() {
            return Err(Error::domain(format!("output index {k} out of range")));
        }
        let mut adj = vec![T::zero(); self.output_dim()];
        adj[k] = T::one();
        let mut g = vec![T::zero(); self.params.len()];
        let gx = self.backward(&cache, &adj, None, &mut g);
        Ok((g, gx))
    }

    pub fn to_f64_le_base64(&self) -> String {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.as_f64().to_le_bytes());
        }
        B64.encode(bytes)
    }

    pub fn from_f64_le_base64(sizes: &[usize], encoded: &str) -> Result<Self> {
        let bytes = B64
            .decode(encoded)
            .map_err(|e| Error::domain(format!("bad base64 weights: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::domain("weight byte length is not a multiple of 8"));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Self::from_params(sizes, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stage};

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-7)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::zeros(&[3, 8, 8, 1]).unwrap();
        assert_eq!(net.eval(&[1.0, -4.0, 9.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn linear_layer_is_affine() {
        let net = Mlp::from_params(&[3, 1], vec![2.0, -1.0, 0.5, 0.0]).unwrap();
        assert_eq!(net.eval(&[1.0, 2.0, 4.0]).unwrap(), vec![2.0]);
        let (_, gx) = net.grad(&[7.0, 7.0, 7.0], 0).unwrap();
        assert_eq!(gx, vec![2.0, -1.0, 0.5]);
    }

    #[test]
    fn shape_errors() {
        assert!(Mlp::<f64>::zeros(&[3]).is_err());
        assert!(Mlp::<f64>::zeros(&[3, 0, 1]).is_err());
        assert!(Mlp::from_params(&[2, 1], vec![1.0]).is_err());
        assert!(Mlp::from_params(&[1, 1], vec![f64::NAN, 0.0]).is_err());
        let net = Mlp::<f64>::zeros(&[2, 1]).unwrap();
        assert!(net.eval(&[1.0]).is_err());
        assert!(net.grad(&[1.0, 1.0], 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng::stream(8, Stage::ClbfInit, 0);
        let net = Mlp::<f64>::random(&[3, 6, 5, 2], &mut rng).unwrap();
        let mut net = Mlp::from_params(net.sizes(), net.params().iter().map(|p| p + 0.05).collect()).unwrap();
        let x = [0.3, -0.7, 1.1];
        let (gp, gx) = net.grad(&x, 1).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = x;
            let mut dn = x;
            up[i] += h;
            dn[i] -= h;
            let fd = (net.eval(&up).unwrap()[1] - net.eval(&dn).unwrap()[1]) / (2.0 * h);
            assert!(rel_close(fd, gx[i], 1e-4), "input {i}");
        }
        for k in 0..net.params().len() {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let up = net.eval(&x).unwrap()[1];
            net.params_mut()[k] = orig - h;
            let dn = net.eval(&x).unwrap()[1];
            net.params_mut()[k] = orig;
            assert!(rel_close((up - dn) / (2.0 * h), gp[k], 1e-4), "param {k}");
        }
    }

    #[test]
    fn tangent_is_directional_derivative_and_backprops() {
        let mut rng = rng::stream(9, Stage::ClbfInit, 0);
        let mut net = Mlp::<f64>::random(&[3, 5, 4, 1], &mut rng).unwrap();
        let x = [0.2, 0.4, -0.5];
        let d = [1.0, -2.0, 0.5];
        let cache = net.forward(&x, Some(&d)).unwrap();
        let (_, gx) = net.grad(&x, 0).unwrap();
        let dir: f64 = gx.iter().zip(&d).map(|(g, v)| g * v).sum();
        assert!(rel_close(cache.tangent().unwrap()[0], dir, 1e-12));
        // Gradient of the tangent output with respect to parameters.
        let mut g = vec![0.0; net.params().len()];
        net.backward(&cache, &[0.0], Some(&[1.0]), &mut g);
        let h = 1e-6;
        for k in 0..net.params().len() {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let up = net.forward(&x, Some(&d)).unwrap().tangent().unwrap()[0];
            net.params_mut()[k] = orig - h;
            let dn = net.forward(&x, Some(&d)).unwrap().tangent().unwrap()[0];
            net.params_mut()[k] = orig;
            assert!(rel_close((up - dn) / (2.0 * h), g[k], 1e-4), "param {k}");
        }
    }

    #[test]
    fn base64_round_trip_is_bit_exact() {
        let mut rng = rng::stream(10, Stage::ClbfInit, 0);
        let net = Mlp::<f64>::random(&[3, 4, 1], &mut rng).unwrap();
        let back = Mlp::<f64>::from_f64_le_base64(net.sizes(), &net.to_f64_le_base64()).unwrap();
        assert_eq!(back, net);
        assert!(Mlp::<f64>::from_f64_le_base64(&[3, 4, 1], "AAAA").is_err());
        assert!(Mlp::<f64>::from_f64_le_base64(&[3, 4, 1], "!!").is_err());
    }

    #[test]
    fn f32_network_tracks_f64() {
        let mut rng = rng::stream(11, Stage::ClbfInit, 0);
        let net = Mlp::<f64>::random(&[3, 8, 1], &mut rng).unwrap();
        let net32 = Mlp::<f32>::from_params(net.sizes(), net.params().iter().map(|&p| p as f32).collect()).unwrap();
        let y = net.eval(&[0.1, 0.2, 0.3]).unwrap()[0];
        let y32 = net32.eval(&[0.1, 0.2, 0.3]).unwrap()[0];
        assert!((y - y32 as f64).abs() < 1e-5);
    }
}
