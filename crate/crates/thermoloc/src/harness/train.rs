//! The training loop and checkpoint-based evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{compute_metrics, plot_trajectory_overlay, MetricsReport, Sequence};
use crate::error::{Error, Result};
use crate::model::{canonicalize_quat_t, pose_loss, LossParams, PoseNetwork};
use crate::nn::{Mode, ParamStore};
use crate::quat::{Pose, UnitQuaternion};

use super::{
    checkpoint_dir, load_checkpoint, prepare_sequences, save_checkpoint, PreparedData,
    TrainConfig,
};

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint_dir: PathBuf,
    pub loss_curve: Vec<f64>,
    pub input_hw: (usize, usize),
}

fn snapshot(ps: &ParamStore) -> Result<Vec<(String, Tensor)>> {
    ps.names()
        .into_iter()
        .map(|n| {
            // Deep copy: a view of the live value cannot be `set` back later.
            let t = ps.get(&n).expect("name from store").as_detached_tensor().copy()?;
            Ok((n, t))
        })
        .collect()
}

fn restore(ps: &ParamStore, snap: &[(String, Tensor)]) -> Result<()> {
    for (name, value) in snap {
        ps.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .set(value)?;
    }
    Ok(())
}

fn write_loss_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        text.push_str(&format!("{},{loss}\n", i + 1));
    }
    fs::write(path, text)?;
    Ok(())
}

fn select(data: &Tensor, batch: &[usize]) -> Result<Tensor> {
    let idx = Tensor::from_vec(
        batch.iter().map(|i| *i as u32).collect::<Vec<_>>(),
        batch.len(),
        data.device(),
    )?;
    Ok(data.index_select(&idx, 0)?)
}

/// Minimizes the pose loss with Adam (weight decay zero), shuffling with a
/// seeded generator each epoch and keeping the last partial batch. Writes
/// `loss.csv` and `checkpoint/` under `out_dir`. A non-finite batch loss
/// aborts with a divergence error after saving the last epoch-end parameters.
pub fn train(cfg: &TrainConfig, sequences: &[Sequence], out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    fs::create_dir_all(out_dir)?;

    let mut ps = ParamStore::new(cfg.seed);
    let data = prepare_sequences(sequences, &cfg.preproc, &ps)?;
    let network = PoseNetwork::build(&cfg.model, cfg.dropout, data.input_hw, &mut ps)?;
    let loss_params = LossParams::new(&mut ps, cfg.beta0, cfg.gamma0)?;
    let mut opt = AdamW::new(
        ps.all_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;

    // Independent streams: one orders the data, one drives dropout.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5348_5546));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x4452_4f50));

    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut last_good = snapshot(&ps)?;
    let ckpt = checkpoint_dir(out_dir);

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in indices.chunks(cfg.batch_size) {
            let images = select(&data.images, batch)?;
            let target_l = select(&data.positions, batch)?;
            let target_q = select(&data.quats, batch)?;
            let mut mode = Mode::Train(&mut dropout_rng);
            let (pred_l, pred_q) = network.forward(&images, &mut mode)?;
            let loss = pose_loss(&pred_l, &pred_q, &target_l, &target_q, &loss_params)?;
            let value = loss.to_scalar::<f64>()?;
            if !value.is_finite() {
                restore(&ps, &last_good)?;
                save_checkpoint(&ckpt, &ps, cfg, data.input_hw)?;
                write_loss_csv(&out_dir.join("loss.csv"), &curve)?;
                return Err(Error::Divergence(format!(
                    "loss became {value} in epoch {}; last-good checkpoint saved to {}",
                    epoch + 1,
                    ckpt.display()
                )));
            }
            opt.backward_step(&loss)?;
            epoch_loss += value * batch.len() as f64;
        }
        curve.push(epoch_loss / data.len() as f64);
        last_good = snapshot(&ps)?;
    }

    write_loss_csv(&out_dir.join("loss.csv"), &curve)?;
    save_checkpoint(&ckpt, &ps, cfg, data.input_hw)?;
    Ok(TrainSummary {
        checkpoint_dir: ckpt,
        loss_curve: curve,
        input_hw: data.input_hw,
    })
}

fn predict_poses(network: &PoseNetwork, data: &PreparedData) -> Result<Vec<Pose>> {
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for batch in all.chunks(16) {
        let images = select(&data.images, batch)?;
        let (l, q_raw) = network.forward(&images, &mut Mode::Eval)?;
        let q = canonicalize_quat_t(&q_raw)?;
        let l_rows = l.to_vec2::<f64>()?;
        let q_rows = q.to_vec2::<f64>()?;
        for (lr, qr) in l_rows.iter().zip(&q_rows) {
            let orientation = UnitQuaternion::canonicalize([qr[0], qr[1], qr[2], qr[3]])?;
            preds.push(Pose::new([lr[0], lr[1], lr[2]], orientation)?);
        }
    }
    Ok(preds)
}

/// Deterministic inference (dropout disabled, running statistics frozen) over
/// every sequence, reduced to a metrics report. When `plots_dir` is given, a
/// trajectory overlay PNG is written per sequence.
pub fn evaluate(
    ckpt_dir: &Path,
    sequences: &[Sequence],
    plots_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let loaded = load_checkpoint(ckpt_dir)?;
    let data = prepare_sequences(sequences, &loaded.config.preproc, &loaded.store)?;
    if data.input_hw != loaded.input_hw {
        return Err(Error::Shape(format!(
            "checkpoint expects {}x{} frames but the dataset provides {}x{}",
            loaded.input_hw.0, loaded.input_hw.1, data.input_hw.0, data.input_hw.1
        )));
    }
    let preds = predict_poses(&loaded.network, &data)?;
    let mut rows = Vec::new();
    for (id, range) in &data.ranges {
        rows.push(compute_metrics(
            id,
            &preds[range.clone()],
            &data.poses[range.clone()],
        )?);
        if let Some(dir) = plots_dir {
            fs::create_dir_all(dir)?;
            let fname = format!("{}.png", id.replace('/', "_"));
            plot_trajectory_overlay(
                &data.poses[range.clone()],
                &preds[range.clone()],
                &dir.join(fname),
            )?;
        }
    }
    Ok(MetricsReport { sequences: rows })
}
