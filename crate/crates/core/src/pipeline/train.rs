use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::PipelineError;
use crate::bev::BevGrid;
use crate::config::RunConfig;
use crate::diffusion::{diffusion_loss_graph, total_loss, NoisyBatch};
use crate::encoder::road_seg_loss;
use crate::model::{build_input, build_mask, Model};
use crate::rng;
use crate::runtime::{cosine_lr, AdamConfig, Graph, OptimizerState, Tensor};
use crate::scenario::Dataset;

/// Per-epoch means over all batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub diffusion: f64,
    pub road: f64,
    pub total: f64,
}

pub(crate) struct Prepared {
    pub inputs: Vec<BevGrid>,
    pub masks: Vec<BevGrid>,
    pub targets: Vec<Vec<f64>>,
}

pub(crate) fn prepare(ds: &Dataset, cfg: &RunConfig, model: &Model) -> Result<Prepared, PipelineError> {
    let rows = ds
        .samples
        .par_iter()
        .map(|s| {
            Ok((
                build_input(s, cfg, cfg.train.modalities)?,
                build_mask(s, cfg)?,
                model.normalize(&s.future),
            ))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let mut p = Prepared {
        inputs: Vec::with_capacity(rows.len()),
        masks: Vec::with_capacity(rows.len()),
        targets: Vec::with_capacity(rows.len()),
    };
    for (i, m, t) in rows {
        p.inputs.push(i);
        p.masks.push(m);
        p.targets.push(t);
    }
    Ok(p)
}

pub(crate) fn train_seed(cfg: &RunConfig) -> u64 {
    rng::derive_seed(cfg.seed, &[0x7EA1])
}

/// Trains a fresh model. `on_epoch` sees every finished epoch and the
/// parameters after it; an error from it stops training.
pub fn train_model(
    cfg: &RunConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<(), PipelineError>,
) -> Result<(Model, Vec<EpochLog>), PipelineError> {
    let seed = train_seed(cfg);
    let mut model = Model::init(cfg, rng::derive_seed(seed, &[0]))?;
    let data = prepare(ds, cfg, &model)?;
    let mut opt = OptimizerState::new(&model.store, cfg.train.learning_rate, AdamConfig::default());
    let grid = cfg.grid;
    let (h1, w1) = model.encoder.feature_size();
    let horizon = cfg.data.scenario.future_len;
    let mut logs = Vec::with_capacity(cfg.train.epochs);

    for epoch in 0..cfg.train.epochs {
        let lr = cosine_lr(epoch, cfg.train.epochs, cfg.train.learning_rate)?;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[1, epoch as u64]));
        let (mut sum_d, mut sum_r, mut sum_t) = (0.0, 0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(cfg.train.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let n = idx.len();
            let mut noise_rng = rng::stream(seed, &[2, epoch as u64, b as u64]);
            let tau0: Vec<Vec<f64>> = idx.iter().map(|&i| data.targets[i].clone()).collect();
            let noisy = NoisyBatch::draw(&tau0, &model.schedule, &mut noise_rng)?;

            let mut x = Vec::with_capacity(n * 5 * grid.cells());
            let mut mask = Vec::with_capacity(n * h1 * w1);
            for &i in idx.iter() {
                x.extend_from_slice(data.inputs[i].data());
                mask.extend_from_slice(data.masks[i].data());
            }
            let mut g = Graph::new();
            let xv = g.input(&Tensor::new(vec![n, 5, grid.height, grid.width], x)?)?;
            let (seg, c) = model.encoder.encode_train(&mut g, &model.store, xv)?;
            let tau_t = g.input(&Tensor::new(vec![n, 2, horizon], noisy.tau_t.concat())?)?;
            let temb = g.input(&model.denoiser.embed_steps(&noisy.steps)?)?;
            let eps_hat = model.denoiser.forward(&mut g, &model.store, tau_t, temb, c)?;
            let eps = Tensor::new(vec![n, 2, horizon], noisy.eps.concat())?;
            let l_diff = diffusion_loss_graph(&mut g, eps_hat, &eps)?;
            let l_road = road_seg_loss(&mut g, seg, &Tensor::new(vec![n, 1, h1, w1], mask)?)?;
            let loss = total_loss(&mut g, l_diff, l_road, cfg.train.lambda_road)?;

            let (vd, vr, vt) = (g.value(l_diff)[0], g.value(l_road)[0], g.value(loss)[0]);
            if !(vd.is_finite() && vr.is_finite() && vt.is_finite()) {
                return Err(PipelineError::NonFiniteLoss { epoch, batch: b });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, grads.params(), lr)?;
            sum_d += vd;
            sum_r += vr;
            sum_t += vt;
        }
        let nb = batches.len() as f64;
        let log = EpochLog {
            epoch,
            learning_rate: lr,
            diffusion: sum_d / nb,
            road: sum_r / nb,
            total: sum_t / nb,
        };
        on_epoch(&log, &model)?;
        logs.push(log);
    }
    Ok((model, logs))
}
