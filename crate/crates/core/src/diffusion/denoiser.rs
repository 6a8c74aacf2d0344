//! Noise-prediction network: a small 1-D U-Net over the waypoint sequence.
//!
//! ```text
//! tau_t [2, L] --conv--> h1 [32, L] --conv s2--> h2 [64, L/2] --conv--> m [64, L/2]
//!                          |                                              | upsample
//!                          +------------------- concat ------------------ [96, L]
//!                                                   --conv--> u [32, L]
//! [u | tau_t] [34, L] --conv--> eps_hat [2, L]
//! ```
//!
//! Every hidden level gets an additive per-channel shift from a linear map
//! of `[timestep embedding | c]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{timestep_embedding, DiffusionError};
use crate::runtime::{Graph, ParamId, ParamStore, RuntimeError, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub horizon: usize,
    pub time_dim: usize,
    pub cond_len: usize,
    pub width: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            time_dim: 32,
            cond_len: 64,
            width: 32,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Film {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    down1: (Layer, Film),
    down2: (Layer, Film),
    mid: (Layer, Film),
    up: (Layer, Film),
    out: Layer,
    upsample: Vec<usize>,
}

/// `(name, cin, cout)` for each conv; hidden ones are FiLM-shifted.
fn layout(cfg: &DenoiserConfig) -> [(&'static str, usize, usize); 5] {
    let (w, w2) = (cfg.width, 2 * cfg.width);
    [
        ("down1", 2, w),
        ("down2", w, w2),
        ("mid", w2, w2),
        ("up", w2 + w, w),
        ("out", w + 2, 2),
    ]
}

impl Denoiser {
    fn validate(cfg: &DenoiserConfig) -> Result<(), DiffusionError> {
        if cfg.horizon < 2 || cfg.width == 0 || cfg.cond_len == 0 {
            return Err(DiffusionError::Empty("denoiser shape"));
        }
        if cfg.time_dim == 0 || cfg.time_dim % 2 != 0 {
            return Err(DiffusionError::EmbeddingDim(cfg.time_dim));
        }
        Ok(())
    }

    fn assemble(cfg: DenoiserConfig, mut get: impl FnMut(&str, &[usize], usize, usize) -> Result<ParamId, DiffusionError>) -> Result<Self, DiffusionError> {
        Self::validate(&cfg)?;
        let cond = cfg.time_dim + cfg.cond_len;
        let mut layers = Vec::new();
        for (name, cin, cout) in layout(&cfg) {
            let w = get(&format!("den.{name}.w"), &[cout, cin, 3], cin * 3, cout * 3)?;
            let b = get(&format!("den.{name}.b"), &[cout], 0, 0)?;
            let film = if name == "out" {
                None
            } else {
                Some(Film {
                    w: get(&format!("den.{name}.film.w"), &[cond, cout], cond, cout)?,
                    b: get(&format!("den.{name}.film.b"), &[cout], 0, 0)?,
                })
            };
            layers.push((Layer { w, b }, film));
        }
        let half = (cfg.horizon - 1) / 2 + 1;
        let upsample = (0..cfg.horizon).map(|i| (i / 2).min(half - 1)).collect();
        let hidden = |i: usize| (layers[i].0, layers[i].1.expect("hidden layer has FiLM"));
        Ok(Self {
            down1: hidden(0),
            down2: hidden(1),
            mid: hidden(2),
            up: hidden(3),
            out: layers[4].0,
            upsample,
            config: cfg,
        })
    }

    pub fn register<R: Rng>(store: &mut ParamStore, cfg: DenoiserConfig, rng: &mut R) -> Result<Self, DiffusionError> {
        Self::assemble(cfg, |name, shape, fan_in, fan_out| {
            Ok(if fan_in == 0 {
                store.insert_zeros(name, shape)?
            } else {
                store.insert_glorot(name, shape, fan_in, fan_out, rng)?
            })
        })
    }

    pub fn bind(store: &ParamStore, cfg: DenoiserConfig) -> Result<Self, DiffusionError> {
        Self::assemble(cfg, |name, shape, _, _| {
            store
                .id(name)
                .filter(|&id| store.get(id).shape() == shape)
                .ok_or_else(|| DiffusionError::Runtime(RuntimeError::InvalidArgument(format!("parameter {name} missing or misshapen"))))
        })
    }

    /// Timestep embeddings for a batch, `[n, time_dim]`.
    pub fn embed_steps(&self, steps: &[usize]) -> Result<Tensor, DiffusionError> {
        let mut data = Vec::with_capacity(steps.len() * self.config.time_dim);
        for &t in steps {
            data.extend(timestep_embedding(t, self.config.time_dim)?);
        }
        Ok(Tensor::new(vec![steps.len(), self.config.time_dim], data)?)
    }

    fn conv(&self, g: &mut Graph, store: &ParamStore, x: Var, l: Layer, stride: usize) -> Result<Var, DiffusionError> {
        let w = g.param(l.w, store.get(l.w))?;
        let b = g.param(l.b, store.get(l.b))?;
        Ok(g.conv1d(x, w, Some(b), stride, 1)?)
    }

    fn film(&self, g: &mut Graph, store: &ParamStore, h: Var, cond: Var, f: Film) -> Result<Var, DiffusionError> {
        let w = g.param(f.w, store.get(f.w))?;
        let b = g.param(f.b, store.get(f.b))?;
        let proj = g.matmul(cond, w)?;
        let shift = g.add_bias(proj, b)?;
        let h = g.add_channel(h, shift)?;
        Ok(g.relu(h))
    }

    /// `tau_t: [n, 2, L]`, `temb: [n, time_dim]`, `c: [n, cond_len]` to
    /// `eps_hat: [n, 2, L]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tau_t: Var, temb: Var, c: Var) -> Result<Var, DiffusionError> {
        let cfg = &self.config;
        let n = g.shape(tau_t).first().copied().unwrap_or(0);
        let expect = |g: &Graph, v: Var, shape: &[usize], what: &'static str| {
            if g.shape(v) != shape {
                Err(DiffusionError::Runtime(RuntimeError::ShapeMismatch {
                    op: what,
                    lhs: crate::runtime::ShapeDisplay(g.shape(v)).to_string(),
                    rhs: crate::runtime::ShapeDisplay(shape).to_string(),
                }))
            } else {
                Ok(())
            }
        };
        expect(g, tau_t, &[n, 2, cfg.horizon], "denoiser input")?;
        expect(g, temb, &[n, cfg.time_dim], "timestep embedding")?;
        expect(g, c, &[n, cfg.cond_len], "conditioning vector")?;

        let cond = g.concat(&[temb, c], 1)?;
        let h1 = self.conv(g, store, tau_t, self.down1.0, 1)?;
        let h1 = self.film(g, store, h1, cond, self.down1.1)?;
        let h2 = self.conv(g, store, h1, self.down2.0, 2)?;
        let h2 = self.film(g, store, h2, cond, self.down2.1)?;
        let m = self.conv(g, store, h2, self.mid.0, 1)?;
        let m = self.film(g, store, m, cond, self.mid.1)?;
        let up = g.gather_last(m, &self.upsample)?;
        let cat = g.concat(&[up, h1], 1)?;
        let u = self.conv(g, store, cat, self.up.0, 1)?;
        let u = self.film(g, store, u, cond, self.up.1)?;
        let skip = g.concat(&[u, tau_t], 1)?;
        self.conv(g, store, skip, self.out, 1)
    }

    /// Convenience inference call on plain buffers; returns `[n * 2 * L]`.
    pub fn predict_noise(&self, store: &ParamStore, tau_t: &[Vec<f64>], steps: &[usize], c: &[Vec<f64>]) -> Result<Vec<f64>, DiffusionError> {
        let cfg = &self.config;
        let n = tau_t.len();
        if n == 0 {
            return Err(DiffusionError::Empty("denoiser batch"));
        }
        if steps.len() != n || c.len() != n {
            return Err(DiffusionError::Length { expected: n, got: steps.len().min(c.len()) });
        }
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![n, 2, cfg.horizon], tau_t.concat())?)?;
        let temb = g.input(&self.embed_steps(steps)?)?;
        let cv = g.input(&Tensor::new(vec![n, cfg.cond_len], c.concat())?)?;
        let out = self.forward(&mut g, store, x, temb, cv)?;
        Ok(g.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, Denoiser) {
        let mut store = ParamStore::new();
        let d = Denoiser::register(&mut store, DenoiserConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, d)
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_params_predict_zero() {
        let (mut store, d) = setup(1);
        store.zero_all();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = d.predict_noise(&store, &[random(&mut rng, 30)], &[3], &[random(&mut rng, 64)]).unwrap();
        assert_eq!(out.len(), 30);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_batch_independent() {
        let (store, d) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = vec![random(&mut rng, 30), random(&mut rng, 30)];
        let cs = vec![random(&mut rng, 64), random(&mut rng, 64)];
        let both = d.predict_noise(&store, &xs, &[2, 7], &cs).unwrap();
        assert_eq!(both, d.predict_noise(&store, &xs, &[2, 7], &cs).unwrap());
        let second = d.predict_noise(&store, &xs[1..], &[7], &cs[1..]).unwrap();
        for (a, b) in both[30..].iter().zip(&second) {
            assert!((a - b).abs() < 1e-12);
        }
        let other = d.predict_noise(&store, &xs, &[3, 7], &cs).unwrap();
        assert_ne!(both[..30], other[..30]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let (store, d) = setup(5);
        assert!(d.predict_noise(&store, &[vec![0.0; 28]], &[1], &[vec![0.0; 64]]).is_err());
        assert!(d.predict_noise(&store, &[vec![0.0; 30]], &[1], &[vec![0.0; 63]]).is_err());
        assert!(d.predict_noise(&store, &[], &[], &[]).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = DenoiserConfig {
            horizon: 5,
            time_dim: 4,
            cond_len: 3,
            width: 3,
        };
        let mut store = ParamStore::new();
        let d = Denoiser::register(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        let x = Tensor::new(vec![2, 2, 5], random(&mut rng, 20)).unwrap();
        let c = Tensor::new(vec![2, 3], random(&mut rng, 6)).unwrap();
        let temb = d.embed_steps(&[1, 4]).unwrap();
        let weights = Tensor::new(vec![2, 2, 5], random(&mut rng, 20)).unwrap();
        let loss = |store: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.input(&x).unwrap();
            let tv = g.input(&temb).unwrap();
            let cv = g.input(&c).unwrap();
            let out = d.forward(&mut g, store, xv, tv, cv).unwrap();
            let wv = g.input(&weights).unwrap();
            let p = g.mul(out, wv).unwrap();
            let l = g.sum(p);
            (g, l)
        };
        let (g, l) = loss(&store);
        let grads = g.backward(l).unwrap();
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = grads.param(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
            for i in 0..store.get(id).len() {
                let mut p = store.clone();
                p.get_mut(id).data_mut()[i] += h;
                let mut m = store.clone();
                m.get_mut(id).data_mut()[i] -= h;
                let (gp, lp) = loss(&p);
                let (gm, lm) = loss(&m);
                let fd = (gp.value(lp)[0] - gm.value(lm)[0]) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs());
                if denom < 1e-7 {
                    continue;
                }
                let rel = (fd - analytic[i]).abs() / denom;
                assert!(rel < 1e-4, "{} [{i}]: fd {fd} vs {}", store.name(id), analytic[i]);
            }
        }
    }

    #[test]
    fn bind_round_trip() {
        let (store, d) = setup(8);
        let b = Denoiser::bind(&store, d.config.clone()).unwrap();
        let x = vec![vec![0.1; 30]];
        let c = vec![vec![0.2; 64]];
        assert_eq!(d.predict_noise(&store, &x, &[5], &c).unwrap(), b.predict_noise(&store, &x, &[5], &c).unwrap());
        assert!(Denoiser::bind(&ParamStore::new(), DenoiserConfig::default()).is_err());
    }
}
