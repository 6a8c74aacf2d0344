//! Two-stage BEV encoder.
//!
//! Stage 1 maps the 5-channel `H x W` input to a 1-channel `H/4 x W/4`
//! logit map `F_CNN`. A 1x1 segmentation head reads `F_CNN` during training
//! only. Stage 2 squashes `F_CNN` through a sigmoid, reduces it by another
//! factor of 4, and flattens it into the conditioning vector `c`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::bev::{max_pool, rasterize_route, BevError, BevGrid, GridSpec, Polyline};
use crate::runtime::{ConvGeom, Graph, ParamId, ParamStore, RuntimeError, ShapeDisplay, Tensor, Var};
use crate::trajectory::Trajectory;

pub const INPUT_CHANNELS: usize = 5;
/// Spatial reduction of each stage.
pub const STAGE_FACTOR: usize = 4;

const STAGE1: [(usize, usize, usize); 4] = [(5, 16, 2), (16, 32, 2), (32, 32, 1), (32, 1, 1)];
const STAGE2: [(usize, usize, usize); 3] = [(1, 8, 2), (8, 16, 2), (16, 1, 1)];

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error("grid {height}x{width} is not divisible by {factor}")]
    GridSize { height: usize, width: usize, factor: usize },
    #[error("parameter {0} missing or misshapen")]
    Param(String),
    #[error("road mask value {0} is not 0 or 1")]
    MaskValue(f64),
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

/// Handles to the encoder's tensors inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    grid: GridSpec,
    stage1: Vec<Conv>,
    head_w: ParamId,
    head_b: ParamId,
    stage2: Vec<Conv>,
    head_evals: Arc<AtomicU64>,
}

fn conv_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.conv{i}.w"), format!("{prefix}.conv{i}.b"))
}

fn register_stage<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    layers: &[(usize, usize, usize)],
    rng: &mut R,
) -> Result<Vec<Conv>, RuntimeError> {
    layers
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout, stride))| {
            let (wn, bn) = conv_names(prefix, i);
            let w = store.insert_glorot(&wn, &[cout, cin, 3, 3], cin * 9, cout * 9, rng)?;
            let b = store.insert_zeros(&bn, &[cout])?;
            Ok(Conv { w, b, stride })
        })
        .collect()
}

impl Encoder {
    fn check_grid(grid: &GridSpec) -> Result<(), EncoderError> {
        grid.validate()?;
        let f = STAGE_FACTOR * STAGE_FACTOR;
        if grid.height % f != 0 || grid.width % f != 0 {
            return Err(EncoderError::GridSize {
                height: grid.height,
                width: grid.width,
                factor: f,
            });
        }
        Ok(())
    }

    /// Registers freshly initialised encoder tensors under `enc.*`.
    pub fn register<R: Rng>(store: &mut ParamStore, grid: &GridSpec, rng: &mut R) -> Result<Self, EncoderError> {
        Self::check_grid(grid)?;
        let stage1 = register_stage(store, "enc.s1", &STAGE1, rng)?;
        let head_w = store.insert("enc.seg.w", Tensor::full(&[1, 1, 1, 1], 1.0))?;
        let head_b = store.insert_zeros("enc.seg.b", &[1])?;
        let stage2 = register_stage(store, "enc.s2", &STAGE2, rng)?;
        Ok(Self {
            grid: *grid,
            stage1,
            head_w,
            head_b,
            stage2,
            head_evals: Arc::default(),
        })
    }

    /// Looks up encoder tensors in a loaded store, checking their shapes.
    pub fn bind(store: &ParamStore, grid: &GridSpec) -> Result<Self, EncoderError> {
        Self::check_grid(grid)?;
        let find = |name: &str, shape: &[usize]| {
            store
                .id(name)
                .filter(|&id| store.get(id).shape() == shape)
                .ok_or_else(|| EncoderError::Param(name.to_string()))
        };
        let stage = |prefix: &str, layers: &[(usize, usize, usize)]| {
            layers
                .iter()
                .enumerate()
                .map(|(i, &(cin, cout, stride))| {
                    let (wn, bn) = conv_names(prefix, i);
                    Ok(Conv {
                        w: find(&wn, &[cout, cin, 3, 3])?,
                        b: find(&bn, &[cout])?,
                        stride,
                    })
                })
                .collect::<Result<Vec<_>, EncoderError>>()
        };
        Ok(Self {
            grid: *grid,
            stage1: stage("enc.s1", &STAGE1)?,
            head_w: find("enc.seg.w", &[1, 1, 1, 1])?,
            head_b: find("enc.seg.b", &[1])?,
            stage2: stage("enc.s2", &STAGE2)?,
            head_evals: Arc::default(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// `(H1, W1)`.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.grid.height / STAGE_FACTOR, self.grid.width / STAGE_FACTOR)
    }

    /// Length of `c`, `H2 * W2`.
    pub fn cond_len(&self) -> usize {
        let f = STAGE_FACTOR * STAGE_FACTOR;
        (self.grid.height / f) * (self.grid.width / f)
    }

    /// Number of segmentation-head evaluations through this handle and its clones.
    pub fn head_evaluations(&self) -> u64 {
        self.head_evals.load(Ordering::Relaxed)
    }

    fn stack(&self, g: &mut Graph, store: &ParamStore, mut x: Var, layers: &[Conv]) -> Result<Var, EncoderError> {
        for (i, conv) in layers.iter().enumerate() {
            let w = g.param(conv.w, store.get(conv.w))?;
            let b = g.param(conv.b, store.get(conv.b))?;
            x = g.conv2d(x, w, Some(b), ConvGeom::new(conv.stride, 1))?;
            if i + 1 < layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    fn check_input(&self, g: &Graph, input: Var) -> Result<(), EncoderError> {
        let s = g.shape(input);
        if s.len() != 4 || s[1] != INPUT_CHANNELS || s[2] != self.grid.height || s[3] != self.grid.width {
            return Err(RuntimeError::ShapeMismatch {
                op: "encoder input",
                lhs: ShapeDisplay(s).to_string(),
                rhs: format!("[n, {INPUT_CHANNELS}, {}, {}]", self.grid.height, self.grid.width),
            }
            .into());
        }
        Ok(())
    }

    /// Stage 1 only: `F_CNN` as `[n, 1, H1, W1]`.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var, EncoderError> {
        self.check_input(g, input)?;
        self.stack(g, store, input, &self.stage1)
    }

    fn condition_from(&self, g: &mut Graph, store: &ParamStore, f_cnn: Var) -> Result<Var, EncoderError> {
        let n = g.shape(f_cnn)[0];
        let squashed = g.sigmoid(f_cnn);
        let f_cond = self.stack(g, store, squashed, &self.stage2)?;
        Ok(g.reshape(f_cond, &[n, self.cond_len()])?)
    }

    /// Training path: `(seg_logits [n, 1, H1, W1], c [n, H2 * W2])`.
    pub fn encode_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
    ) -> Result<(Var, Var), EncoderError> {
        let f_cnn = self.features(g, store, input)?;
        let w = g.param(self.head_w, store.get(self.head_w))?;
        let b = g.param(self.head_b, store.get(self.head_b))?;
        let seg = g.conv2d(f_cnn, w, Some(b), ConvGeom::new(1, 0))?;
        self.head_evals.fetch_add(1, Ordering::Relaxed);
        let c = self.condition_from(g, store, f_cnn)?;
        Ok((seg, c))
    }

    /// Inference path: `c` only; the segmentation head is never touched.
    pub fn encode_condition(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
    ) -> Result<Var, EncoderError> {
        let f_cnn = self.features(g, store, input)?;
        self.condition_from(g, store, f_cnn)
    }
}

/// Summed pixel-wise BCE per sample, averaged over the batch.
pub fn road_seg_loss(g: &mut Graph, seg_logits: Var, gt: &Tensor) -> Result<Var, EncoderError> {
    if let Some(&v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(EncoderError::MaskValue(v));
    }
    let n = g.shape(seg_logits).first().copied().unwrap_or(1).max(1);
    let bce = g.bce_with_logits(seg_logits, gt)?;
    let total = g.sum(bce);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Binary corridor of `halfwidth` around the ground-truth future, pooled to
/// the stage-1 feature resolution.
pub fn rasterize_gt_road_mask(future: &Trajectory, spec: &GridSpec, halfwidth: f64) -> Result<BevGrid, EncoderError> {
    let line = Polyline::new(future.waypoints().to_vec())?;
    let fine = rasterize_route(&line, spec, halfwidth)?;
    Ok(max_pool(&fine, STAGE_FACTOR)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::rasterize_history;
    use Var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> GridSpec {
        GridSpec {
            height: 32,
            width: 32,
            cell_size: 0.5,
            ego_row: 24,
            ego_col: 16,
        }
    }

    fn setup(grid: &GridSpec, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, grid, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, enc)
    }

    fn run(enc: &Encoder, store: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let v = g.input(x).unwrap();
        let (seg, c) = enc.encode_train(&mut g, store, v).unwrap();
        (g.to_tensor(seg), g.to_tensor(c))
    }

    fn random_input(grid: &GridSpec, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * INPUT_CHANNELS * grid.cells();
        Tensor::new(vec![n, INPUT_CHANNELS, grid.height, grid.width], (0..len).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn output_shapes() {
        let grid = GridSpec::default();
        let (store, enc) = setup(&grid, 1);
        let (seg, c) = run(&enc, &store, &random_input(&grid, 2, 0));
        assert_eq!(seg.shape(), &[2, 1, 32, 32]);
        assert_eq!(c.shape(), &[2, 64]);
        assert_eq!(enc.cond_len(), 64);
        assert!(seg.is_finite() && c.is_finite());
    }

    #[test]
    fn zero_weights_propagate_constants() {
        let grid = small_grid();
        let (mut store, enc) = setup(&grid, 2);
        store.zero_all();
        let bias = enc.head_b;
        store.get_mut(bias).data_mut()[0] = 0.75;
        let last2 = enc.stage2.last().unwrap().b;
        store.get_mut(last2).data_mut()[0] = -0.3;
        let (seg, c) = run(&enc, &store, &Tensor::zeros(&[1, 5, 32, 32]));
        assert!(seg.data().iter().all(|&v| v == 0.75));
        assert!(c.data().iter().all(|&v| v == -0.3));
    }

    #[test]
    fn deterministic() {
        let grid = small_grid();
        let (store, enc) = setup(&grid, 3);
        let x = random_input(&grid, 1, 4);
        assert_eq!(run(&enc, &store, &x), run(&enc, &store, &x));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let grid = small_grid();
        let (store, enc) = setup(&grid, 3);
        let mut g = Graph::new();
        let v = g.input(&Tensor::zeros(&[1, 4, 32, 32])).unwrap();
        assert!(enc.encode_train(&mut g, &store, v).is_err());
        let v = g.input(&Tensor::zeros(&[1, 5, 16, 32])).unwrap();
        assert!(enc.encode_condition(&mut g, &store, v).is_err());
    }

    /// Input index interval seen by output index `o` of a stack of 3x3,
    /// pad-1 convolutions with the given strides (first layer first).
    fn receptive_interval(o: usize, strides: &[usize]) -> (i64, i64) {
        let (mut lo, mut hi) = (o as i64, o as i64);
        for &s in strides.iter().rev() {
            lo = lo * s as i64 - 1;
            hi = hi * s as i64 + 1;
        }
        (lo, hi)
    }

    #[test]
    fn perturbation_stays_in_receptive_field() {
        let grid = GridSpec::default();
        let (store, enc) = setup(&grid, 5);
        let x = random_input(&grid, 1, 6);
        let (seg0, c0) = run(&enc, &store, &x);
        let s1: Vec<usize> = STAGE1.iter().map(|l| l.2).collect();
        let s12: Vec<usize> = STAGE1.iter().chain(&STAGE2).map(|l| l.2).collect();
        for (ch, r, col) in [(0, 70, 40), (3, 0, 0), (4, 127, 90)] {
            let mut xp = x.clone();
            xp.data_mut()[(ch * 128 + r) * 128 + col] += 5.0;
            let (seg1, c1) = run(&enc, &store, &xp);
            let inside = |o_r: usize, o_c: usize, strides: &[usize]| {
                let (rl, rh) = receptive_interval(o_r, strides);
                let (cl, chh) = receptive_interval(o_c, strides);
                (rl..=rh).contains(&(r as i64)) && (cl..=chh).contains(&(col as i64))
            };
            let mut changed = 0;
            for i in 0..32 {
                for j in 0..32 {
                    if seg0.data()[i * 32 + j] != seg1.data()[i * 32 + j] {
                        assert!(inside(i, j, &s1), "seg ({i}, {j}) outside field of ({r}, {col})");
                        changed += 1;
                    }
                }
            }
            assert!(changed > 0);
            for i in 0..8 {
                for j in 0..8 {
                    if c0.data()[i * 8 + j] != c1.data()[i * 8 + j] {
                        assert!(inside(i, j, &s12), "c ({i}, {j}) outside field");
                    }
                }
            }
        }
    }

    #[test]
    fn head_counter_tracks_training_path_only() {
        let grid = small_grid();
        let (store, enc) = setup(&grid, 7);
        let x = random_input(&grid, 1, 1);
        let mut g = Graph::new();
        let v = g.input(&x).unwrap();
        enc.encode_condition(&mut g, &store, v).unwrap();
        assert_eq!(enc.head_evaluations(), 0);
        let clone = enc.clone();
        clone.encode_train(&mut g, &store, v).unwrap();
        assert_eq!(enc.head_evaluations(), 1);
    }

    #[test]
    fn condition_matches_training_path() {
        let grid = small_grid();
        let (store, enc) = setup(&grid, 8);
        let x = random_input(&grid, 2, 2);
        let (_, c) = run(&enc, &store, &x);
        let mut g = Graph::new();
        let v = g.input(&x).unwrap();
        let c2 = enc.encode_condition(&mut g, &store, v).unwrap();
        assert_eq!(g.value(c2), c.data());
    }

    #[test]
    fn bind_finds_registered_tensors() {
        let grid = small_grid();
        let (store, enc) = setup(&grid, 9);
        let bound = Encoder::bind(&store, &grid).unwrap();
        let x = random_input(&grid, 1, 3);
        assert_eq!(run(&enc, &store, &x), run(&bound, &store, &x));
        assert!(Encoder::bind(&ParamStore::new(), &grid).is_err());
    }

    fn loss_of(logits: &Tensor, gt: &Tensor) -> f64 {
        let mut g = Graph::new();
        let v = g.input(logits).unwrap();
        let l = road_seg_loss(&mut g, v, gt).unwrap();
        g.value(l)[0]
    }

    #[test]
    fn seg_loss_saturated_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<f64> = (0..1024).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect();
        let gt = Tensor::new(vec![1, 1, 32, 32], gt).unwrap();
        let logits = Tensor::new(vec![1, 1, 32, 32], gt.data().iter().map(|&y| if y == 1.0 { 30.0 } else { -30.0 }).collect()).unwrap();
        let l = loss_of(&logits, &gt);
        assert!(l >= 0.0 && l / 1024.0 < 1e-9);
        let zero = loss_of(&Tensor::zeros(&[1, 1, 32, 32]), &gt);
        assert!((zero - 1024.0 * std::f64::consts::LN_2).abs() < 1e-9);
        let bad = Tensor::full(&[1, 1, 32, 32], 0.5);
        let mut g = Graph::new();
        let v = g.input(&logits).unwrap();
        assert!(matches!(road_seg_loss(&mut g, v, &bad), Err(EncoderError::MaskValue(_))));
    }

    #[test]
    fn seg_loss_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(-6.0..6.0)).collect();
        let y: Vec<f64> = (0..2 * 64).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        let naive: f64 = x
            .iter()
            .zip(&y)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 2.0;
        let got = loss_of(&Tensor::new(vec![2, 1, 8, 8], x).unwrap(), &Tensor::new(vec![2, 1, 8, 8], y).unwrap());
        assert!((got - naive).abs() < 1e-9, "{got} vs {naive}");
    }

    #[test]
    fn seg_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let y = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect()).unwrap();
        let mut g = Graph::new();
        let v: Var = g.watch(&x).unwrap();
        let l = road_seg_loss(&mut g, v, &y).unwrap();
        let grads = g.backward(l).unwrap();
        let analytic = grads.wrt(v).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..16 {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (loss_of(&p, &y) - loss_of(&m, &y)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn gt_mask_straight_band_and_thin_limit() {
        let spec = GridSpec::default();
        let future = Trajectory::new((1..=15).map(|k| (2.0 * k as f64, 0.0)).collect()).unwrap();
        let mask = rasterize_gt_road_mask(&future, &spec, 3.0).unwrap();
        assert_eq!((mask.spec().height, mask.spec().width), (32, 32));
        // |y| <= 3 m covers fine columns 58..=70, pooled 14..=17
        for r in 10..=22 {
            let set: Vec<usize> = (0..32).filter(|&c| mask.get(0, r, c) == 1.0).collect();
            assert_eq!(set, (14..=17).collect::<Vec<_>>(), "row {r}");
        }
        assert_eq!((0..32).filter(|&c| mask.get(0, 4, c) == 1.0).count(), 0);
        let thin = rasterize_gt_road_mask(&future, &spec, 1e-9).unwrap();
        let line = max_pool(&rasterize_history(&Polyline::new(future.waypoints().to_vec()).unwrap(), &spec).unwrap(), 4).unwrap();
        assert_eq!(thin, line);
        let degenerate = Trajectory::new(vec![(1.0, 1.0)]).unwrap();
        assert!(rasterize_gt_road_mask(&degenerate, &spec, 3.0).is_err());
    }

    #[test]
    fn gt_mask_matches_distance_oracle() {
        let spec = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let mut p = (0.0, 0.0);
            let mut pts = Vec::new();
            let mut heading: f64 = 0.0;
            for _ in 0..15 {
                heading += rng.random_range(-0.3..0.3);
                p = (p.0 + 2.0 * heading.cos(), p.1 + 2.0 * heading.sin());
                pts.push(p);
            }
            let line = Polyline::new(pts.clone()).unwrap();
            let mask = rasterize_gt_road_mask(&Trajectory::new(pts).unwrap(), &spec, 3.0).unwrap();
            for r in 0..32 {
                for c in 0..32 {
                    let any = (0..4).any(|dr| {
                        (0..4).any(|dc| line.distance_to(spec.cell_center(4 * r + dr, 4 * c + dc)) <= 3.0)
                    });
                    assert_eq!(mask.get(0, r, c) == 1.0, any, "cell ({r}, {c})");
                }
            }
        }
    }
}
