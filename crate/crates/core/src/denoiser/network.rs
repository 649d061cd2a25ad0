//! Trainable conditional denoisers: a residual MLP for the point regime and
//! a small convolutional encoder-decoder for the image regime.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_request, convert_v_to_eps, Condition, ModelTag, NoisePredictor, PredictionType};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::DenoiserCheckpoint;
use crate::data::ConditionalSource;
use crate::error::{validate, Error, Result};
use crate::kernels::ConvShape;
use crate::nn::{add_dense, dense, init_weight, timestep_embedding, DenseIds, ParamSet};
use crate::optim::Optimizer;
use crate::rng::{normal, normal_mat, stream, LabRng, Stream};
use crate::schedule::{diffuse_rows, NoiseSchedule};
use crate::tensor::Mat;

/// Rows per forward pass during inference, bounding activation memory.
const INFER_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    /// `[x, temb, class emb]` → hidden, then residual blocks with a
    /// per-block conditioning projection.
    ResMlp {
        hidden: usize,
        blocks: usize,
        time_dim: usize,
        cond_dim: usize,
    },
    /// `side×side` single-channel input: conv → pool → dense bottleneck →
    /// upsample → skip → conv.
    ConvNet {
        side: usize,
        channels: usize,
        hidden: usize,
        time_dim: usize,
        cond_dim: usize,
    },
}

impl ArchSpec {
    pub fn default_point() -> Self {
        ArchSpec::ResMlp {
            hidden: 96,
            blocks: 3,
            time_dim: 16,
            cond_dim: 16,
        }
    }

    pub fn default_image() -> Self {
        ArchSpec::ConvNet {
            side: crate::data::IMAGE_SIDE,
            channels: 8,
            hidden: 128,
            time_dim: 32,
            cond_dim: 32,
        }
    }

    fn cond_width(&self) -> usize {
        match *self {
            ArchSpec::ResMlp {
                time_dim, cond_dim, ..
            }
            | ArchSpec::ConvNet {
                time_dim, cond_dim, ..
            } => time_dim + cond_dim,
        }
    }

    fn validate(&self, data_dim: usize) -> Result<()> {
        match *self {
            ArchSpec::ResMlp {
                hidden, time_dim, ..
            } => {
                validate(hidden > 0 && time_dim % 2 == 0, || {
                    "mlp denoiser needs hidden > 0 and an even time_dim".into()
                })
            }
            ArchSpec::ConvNet {
                side,
                channels,
                hidden,
                time_dim,
                ..
            } => validate(
                side * side == data_dim
                    && side % 2 == 0
                    && channels > 0
                    && hidden > 0
                    && time_dim % 2 == 0,
                || format!("conv denoiser with side {side} cannot handle width {data_dim}"),
            ),
        }
    }
}

#[derive(Clone, Debug)]
enum Layout {
    Mlp {
        emb: usize,
        inp: DenseIds,
        blocks: Vec<[DenseIds; 3]>,
        out: DenseIds,
    },
    Conv {
        emb: usize,
        conv_in: (usize, usize),
        cond_in: DenseIds,
        down: DenseIds,
        cond_mid: DenseIds,
        up: DenseIds,
        conv_out: (usize, usize),
    },
}

/// A dense layer eligible for low-rank adaptation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLayerInfo {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

fn add_conv(
    params: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    gain: f64,
) -> (usize, usize) {
    let std = gain / ((cin * 9) as f64).sqrt();
    let w = Mat::from_vec(1, cout * cin * 9, (0..cout * cin * 9).map(|_| std * normal(rng)).collect());
    (
        params.push(format!("{name}.w"), w),
        params.push(format!("{name}.b"), Mat::zeros(1, cout)),
    )
}

fn build_layout(
    arch: &ArchSpec,
    data_dim: usize,
    num_classes: usize,
    params: &mut ParamSet,
    rng: &mut impl Rng,
) -> Layout {
    let c = arch.cond_width();
    match *arch {
        ArchSpec::ResMlp {
            hidden,
            blocks,
            cond_dim,
            ..
        } => {
            let emb = params.push("emb", init_weight(rng, 1, (num_classes + 1) * cond_dim, 1.0));
            // Stored flat above for the rng draw order; reshape to a table.
            let table = Mat::from_vec(num_classes + 1, cond_dim, params.get(emb).data().to_vec());
            params.tensors_mut()[emb] = table;
            let inp = add_dense(params, rng, "inp", data_dim + c, hidden, 1.0);
            let blocks = (0..blocks)
                .map(|i| {
                    [
                        add_dense(params, rng, &format!("block{i}.fc1"), hidden, hidden, 1.0),
                        add_dense(params, rng, &format!("block{i}.fc2"), hidden, hidden, 0.3),
                        add_dense(params, rng, &format!("block{i}.cond"), c, hidden, 1.0),
                    ]
                })
                .collect();
            let out = add_dense(params, rng, "out", hidden, data_dim, 0.1);
            Layout::Mlp {
                emb,
                inp,
                blocks,
                out,
            }
        }
        ArchSpec::ConvNet {
            side,
            channels,
            hidden,
            cond_dim,
            ..
        } => {
            let f = channels;
            let pooled = f * (side / 2) * (side / 2);
            let emb = params.push("emb", init_weight(rng, 1, (num_classes + 1) * cond_dim, 1.0));
            let table = Mat::from_vec(num_classes + 1, cond_dim, params.get(emb).data().to_vec());
            params.tensors_mut()[emb] = table;
            let conv_in = add_conv(params, rng, "conv_in", 1, f, 1.0);
            let cond_in = add_dense(params, rng, "cond_in", c, f, 1.0);
            let down = add_dense(params, rng, "down", pooled, hidden, 1.0);
            let cond_mid = add_dense(params, rng, "cond_mid", c, hidden, 1.0);
            let up = add_dense(params, rng, "up", hidden, pooled, 1.0);
            let conv_out = add_conv(params, rng, "conv_out", f, 1, 0.1);
            Layout::Conv {
                emb,
                conv_in,
                cond_in,
                down,
                cond_mid,
                up,
                conv_out,
            }
        }
    }
}

/// Conditional noise-prediction network.
#[derive(Clone, Debug)]
pub struct Denoiser {
    arch: ArchSpec,
    layout: Layout,
    params: ParamSet,
    prediction: PredictionType,
    data_dim: usize,
    num_classes: usize,
    schedule: Arc<NoiseSchedule>,
    fingerprint: String,
}

impl Denoiser {
    /// Freshly initialized (untrained) network.
    pub fn new(
        arch: ArchSpec,
        data_dim: usize,
        num_classes: usize,
        prediction: PredictionType,
        schedule: Arc<NoiseSchedule>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate(data_dim)?;
        validate(num_classes > 0 && data_dim > 0, || {
            "denoiser needs classes and a positive data width".into()
        })?;
        let mut params = ParamSet::new();
        let mut rng = stream(seed, Stream::Init);
        let layout = build_layout(&arch, data_dim, num_classes, &mut params, &mut rng);
        let fingerprint = schedule.fingerprint();
        Ok(Denoiser {
            arch,
            layout,
            params,
            prediction,
            data_dim,
            num_classes,
            schedule,
            fingerprint,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn prediction_type(&self) -> PredictionType {
        self.prediction
    }

    pub fn schedule(&self) -> &Arc<NoiseSchedule> {
        &self.schedule
    }

    /// Dense layers in a fixed order; adapters index into this list.
    pub fn dense_layers(&self) -> Vec<DenseLayerInfo> {
        self.dense_ids()
            .into_iter()
            .map(|(name, ids)| {
                let (din, dout) = ids.dims(&self.params);
                DenseLayerInfo { name, din, dout }
            })
            .collect()
    }

    fn dense_ids(&self) -> Vec<(String, DenseIds)> {
        match &self.layout {
            Layout::Mlp {
                inp, blocks, out, ..
            } => {
                let mut v = vec![("inp".to_string(), *inp)];
                for (i, b) in blocks.iter().enumerate() {
                    v.push((format!("block{i}.fc1"), b[0]));
                    v.push((format!("block{i}.fc2"), b[1]));
                    v.push((format!("block{i}.cond"), b[2]));
                }
                v.push(("out".to_string(), *out));
                v
            }
            Layout::Conv {
                cond_in,
                down,
                cond_mid,
                up,
                ..
            } => vec![
                ("cond_in".to_string(), *cond_in),
                ("down".to_string(), *down),
                ("cond_mid".to_string(), *cond_mid),
                ("up".to_string(), *up),
            ],
        }
    }

    /// Records the raw network output (ε or v, per the prediction type).
    /// `lora[i]` optionally adds a low-rank pair to dense layer `i`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_t: Var,
        ts: &[usize],
        conds: &[Condition],
        lora: Option<&[Option<(Var, Var)>]>,
    ) -> Var {
        let pair = |i: usize| lora.and_then(|l| l.get(i).copied().flatten());
        let idx: Vec<usize> = conds
            .iter()
            .map(|c| c.embedding_index(self.num_classes))
            .collect();
        let time_dim = match self.arch {
            ArchSpec::ResMlp { time_dim, .. } | ArchSpec::ConvNet { time_dim, .. } => time_dim,
        };
        let temb = tape.constant(timestep_embedding(ts, time_dim));
        match &self.layout {
            Layout::Mlp {
                emb,
                inp,
                blocks,
                out,
            } => {
                let e = tape.gather(vars[*emb], idx);
                let c = tape.concat(&[temb, e]);
                let input = tape.concat(&[x_t, c]);
                let mut h = dense(tape, input, vars, *inp, pair(0));
                for (i, b) in blocks.iter().enumerate() {
                    let base = 1 + 3 * i;
                    let u = tape.silu(h);
                    let u = dense(tape, u, vars, b[0], pair(base));
                    let cc = dense(tape, c, vars, b[2], pair(base + 2));
                    let u = tape.add(u, cc);
                    let u = tape.silu(u);
                    let u = dense(tape, u, vars, b[1], pair(base + 1));
                    h = tape.add(h, u);
                }
                let h = tape.silu(h);
                dense(tape, h, vars, *out, pair(1 + 3 * blocks.len()))
            }
            Layout::Conv {
                emb,
                conv_in,
                cond_in,
                down,
                cond_mid,
                up,
                conv_out,
            } => {
                let ArchSpec::ConvNet { side, channels, .. } = self.arch else {
                    unreachable!("conv layout with non-conv arch")
                };
                let f = channels;
                let e = tape.gather(vars[*emb], idx);
                let c = tape.concat(&[temb, e]);
                let s_in = ConvShape {
                    cin: 1,
                    cout: f,
                    h: side,
                    w: side,
                };
                let h1 = tape.conv3x3(x_t, vars[conv_in.0], vars[conv_in.1], s_in);
                let ci = dense(tape, c, vars, *cond_in, pair(0));
                let h1 = tape.add_channels(h1, ci, side * side);
                let h1 = tape.silu(h1);
                let p = tape.avg_pool2(h1, f, side, side);
                let m = dense(tape, p, vars, *down, pair(1));
                let cm = dense(tape, c, vars, *cond_mid, pair(2));
                let m = tape.add(m, cm);
                let m = tape.silu(m);
                let u = dense(tape, m, vars, *up, pair(3));
                let u = tape.upsample2(u, f, side / 2, side / 2);
                let h2 = tape.add(u, h1);
                let h2 = tape.silu(h2);
                let s_out = ConvShape {
                    cin: f,
                    cout: 1,
                    h: side,
                    w: side,
                };
                tape.conv3x3(h2, vars[conv_out.0], vars[conv_out.1], s_out)
            }
        }
    }

    /// Raw network output without gradient tracking, chunked over rows.
    pub fn raw_output(&self, x_t: &Mat, ts: &[usize], conds: &[Condition]) -> Mat {
        let mut parts = Vec::new();
        let mut start = 0;
        while start < x_t.rows() {
            let n = INFER_CHUNK.min(x_t.rows() - start);
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape, false);
            let x = tape.constant(x_t.slice_rows(start, n));
            let y = self.forward(
                &mut tape,
                &vars,
                x,
                &ts[start..start + n],
                &conds[start..start + n],
                None,
            );
            parts.push(tape.value(y).clone());
            start += n;
        }
        if parts.is_empty() {
            return Mat::zeros(0, self.data_dim);
        }
        let refs: Vec<&Mat> = parts.iter().collect();
        Mat::vstack(&refs)
    }

    /// Converts a raw output to ε according to the prediction type.
    pub fn output_to_eps(&self, raw: Mat, x_t: &Mat, ts: &[usize]) -> Result<Mat> {
        match self.prediction {
            PredictionType::Epsilon => Ok(raw),
            PredictionType::Velocity => convert_v_to_eps(&raw, x_t, ts, &self.schedule),
        }
    }

    pub fn to_checkpoint(&self) -> DenoiserCheckpoint {
        DenoiserCheckpoint::new(
            self.arch.clone(),
            self.prediction,
            self.data_dim,
            self.num_classes,
            &self.schedule,
            self.params.clone(),
        )
    }

    /// Restores a network; refuses a checkpoint trained under another schedule.
    pub fn from_checkpoint(ckpt: &DenoiserCheckpoint, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        ckpt.check_compatible(&schedule)?;
        let mut d = Denoiser::new(
            ckpt.arch.clone(),
            ckpt.data_dim(),
            ckpt.num_classes,
            ckpt.prediction_type,
            schedule,
            0,
        )?;
        validate(d.params.len() == ckpt.params.len(), || {
            "checkpoint parameter count does not match its architecture".into()
        })?;
        for i in 0..d.params.len() {
            validate(
                d.params.name(i) == ckpt.params.name(i)
                    && d.params.get(i).shape() == ckpt.params.get(i).shape(),
                || format!("checkpoint tensor {} does not match", ckpt.params.name(i)),
            )?;
        }
        d.params = ckpt.params.clone();
        validate(d.params.is_finite(), || "checkpoint holds non-finite values".into())?;
        Ok(d)
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn schedule_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn tag(&self) -> ModelTag {
        ModelTag::Pretrained
    }

    fn predict_noise(&self, x_t: &Mat, ts: &[usize], conds: &[Condition]) -> Result<Mat> {
        check_request(self, self.schedule.total_steps(), x_t, ts, conds)?;
        let raw = self.raw_output(x_t, ts, conds);
        self.output_to_eps(raw, x_t, ts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the class with the null token.
    pub cond_dropout: f64,
    pub prediction_type: PredictionType,
    pub warmup_steps: usize,
    /// Learning rate at the last step, as a fraction of `lr` (cosine decay).
    pub final_lr_frac: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 4000,
            batch_size: 256,
            lr: 2e-3,
            cond_dropout: 0.1,
            prediction_type: PredictionType::Velocity,
            warmup_steps: 100,
            final_lr_frac: 0.05,
            grad_clip: 10.0,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!(
                "cond_dropout must lie in [0, 1], got {}",
                self.cond_dropout
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("training needs lr >= 0 and batch_size > 0".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

/// One draw of a denoising minibatch: noisy inputs, timesteps, conditions, targets.
fn training_batch(
    source: &dyn ConditionalSource,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Result<(Mat, Vec<usize>, Vec<Condition>, Mat)> {
    let (x, classes) = source.sample_batch(cfg.batch_size, rng);
    let conds: Vec<Condition> = classes
        .iter()
        .map(|&k| {
            if rng.random::<f64>() < cfg.cond_dropout {
                Condition::null()
            } else {
                Condition::class(k)
            }
        })
        .collect();
    let t_total = schedule.total_steps();
    let ts: Vec<usize> = (0..cfg.batch_size)
        .map(|_| rng.random_range(0..t_total))
        .collect();
    let eps = normal_mat(rng, x.rows(), x.cols());
    let x_t = diffuse_rows(schedule, &x, &eps, &ts)?;
    let target = match cfg.prediction_type {
        PredictionType::Epsilon => eps,
        PredictionType::Velocity => {
            let mut v = Mat::zeros(x.rows(), x.cols());
            for (r, &t) in ts.iter().enumerate() {
                let (a, s) = (schedule.alpha(t), schedule.sigma(t));
                for ((o, e), xv) in v.row_mut(r).iter_mut().zip(eps.row(r)).zip(x.row(r)) {
                    *o = a * e - s * xv;
                }
            }
            v
        }
    };
    Ok((x_t, ts, conds, target))
}

/// Fits a denoiser with the standard noise-regression loss and condition
/// dropout. Divergence returns [`Error::Training`] carrying the last
/// finite parameters.
pub fn train_denoiser(
    source: &dyn ConditionalSource,
    schedule: Arc<NoiseSchedule>,
    arch: ArchSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Denoiser> {
    cfg.validate()?;
    let mut model = Denoiser::new(
        arch,
        source.data_dim(),
        source.num_classes(),
        cfg.prediction_type,
        schedule.clone(),
        seed,
    )?;
    let mut opt = Optimizer::adam(cfg.lr, model.params.tensors());
    let mut rng = stream(seed, Stream::Training);
    let mut running = 0.0;
    for step in 0..cfg.steps {
        let (x_t, ts, conds, target) = training_batch(source, &schedule, cfg, &mut rng)?;
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, true);
        let x = tape.constant(x_t);
        let out = model.forward(&mut tape, &vars, x, &ts, &conds, None);
        let loss = tape.sq_err_mean(out, target);
        let lv = tape.value(loss).get(0, 0);
        let grads = tape.backward(loss);
        let mut g = model.params.collect_grads(&grads, &vars);
        if !lv.is_finite() || !g.iter().all(Mat::is_finite) {
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss {lv}"),
                last_finite: Some(Box::new(model.to_checkpoint())),
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm = g.iter().map(Mat::sum_squares).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                g.iter_mut().for_each(|m| *m = m.scale(s));
            }
        }
        opt.set_lr(cfg.lr_at(step));
        opt.step(model.params.tensors_mut(), &g);
        running = if step == 0 { lv } else { 0.98 * running + 0.02 * lv };
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("denoiser step {}: loss {:.5}", step + 1, running);
        }
    }
    if !model.params.is_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            reason: "parameters became non-finite".into(),
            last_finite: None,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageCorpus, PointCorpus};
    use crate::schedule::{build_schedule, BetaFamily};

    fn sched() -> Arc<NoiseSchedule> {
        Arc::new(build_schedule(1000, BetaFamily::Linear).unwrap())
    }

    #[test]
    fn output_shape_and_determinism() {
        for (arch, d) in [
            (ArchSpec::default_point(), 2),
            (ArchSpec::default_image(), 256),
        ] {
            let m = Denoiser::new(arch, d, 3, PredictionType::Epsilon, sched(), 5).unwrap();
            let mut rng = stream(1, Stream::Noise);
            let x = normal_mat(&mut rng, 4, d);
            let ts = [0, 10, 500, 999];
            let conds = [
                Condition::class(0),
                Condition::class(2),
                Condition::null(),
                Condition::class(1),
            ];
            let a = m.predict_noise(&x, &ts, &conds).unwrap();
            let b = m.predict_noise(&x, &ts, &conds).unwrap();
            assert_eq!(a.shape(), (4, d));
            assert_eq!(a, b);
            assert!(m
                .predict_noise(&x.slice_rows(0, 1), &[5], &[Condition::class(3)])
                .is_err());
        }
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let m = Denoiser::new(ArchSpec::default_image(), 256, 2, PredictionType::Epsilon, sched(), 3)
            .unwrap();
        let mut rng = stream(2, Stream::Noise);
        let x = normal_mat(&mut rng, 2, 256);
        let target = normal_mat(&mut rng, 2, 256);
        let ts = [40, 700];
        let conds = [Condition::class(1), Condition::null()];
        let loss_of = |p: &ParamSet| {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let out = m.forward(&mut tape, &vars, xv, &ts, &conds, None);
            let l = tape.sq_err_mean(out, target.clone());
            let v = tape.value(l).get(0, 0);
            (v, p.collect_grads(&tape.backward(l), &vars))
        };
        let (_, g) = loss_of(&m.params);
        for id in [0usize, 2, 5, 8, 10] {
            let n = m.params.get(id).len();
            for j in [0, n / 2, n - 1] {
                let h = 1e-6;
                let mut p = m.params.clone();
                p.tensors_mut()[id].data_mut()[j] += h;
                let (lp, _) = loss_of(&p);
                p.tensors_mut()[id].data_mut()[j] -= 2.0 * h;
                let (lm, _) = loss_of(&p);
                let fd = (lp - lm) / (2.0 * h);
                let an = g[id].data()[j];
                assert!((fd - an).abs() < 1e-4 * an.abs().max(1.0), "param {id}[{j}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn short_training_reduces_loss() {
        let corpus = PointCorpus::default_2d();
        let s = sched();
        for pt in [PredictionType::Epsilon, PredictionType::Velocity] {
            let cfg = TrainConfig {
                steps: 300,
                batch_size: 128,
                prediction_type: pt,
                ..TrainConfig::default()
            };
            let untrained = Denoiser::new(ArchSpec::default_point(), 2, 5, pt, s.clone(), 7).unwrap();
            let trained = train_denoiser(&corpus, s.clone(), ArchSpec::default_point(), &cfg, 7).unwrap();
            let mut rng = stream(99, Stream::Analysis);
            let eval = TrainConfig {
                batch_size: 2000,
                cond_dropout: 0.0,
                ..cfg.clone()
            };
            // The batch target is ε or v to match the prediction type.
            let (x_t, ts, conds, target) = training_batch(&corpus, &s, &eval, &mut rng).unwrap();
            let err = |m: &Denoiser| m.raw_output(&x_t, &ts, &conds).sub(&target).sum_squares();
            let (e0, e1) = (err(&untrained), err(&trained));
            assert!(e1 < 0.7 * e0, "{pt:?}: {e1} vs {e0}");
        }
    }

    #[test]
    fn velocity_training_runs_and_converts() {
        let corpus = ImageCorpus::default();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            prediction_type: PredictionType::Velocity,
            ..TrainConfig::default()
        };
        let m = train_denoiser(&corpus, sched(), ArchSpec::default_image(), &cfg, 1).unwrap();
        assert_eq!(m.prediction_type(), PredictionType::Velocity);
        let x = Mat::zeros(1, 256);
        let e = m.predict_noise(&x, &[10], &[Condition::class(0)]).unwrap();
        let raw = m.raw_output(&x, &[10], &[Condition::class(0)]);
        assert!(e.max_abs_diff(&raw.scale(m.schedule().alpha(10))) < 1e-12);
    }

    #[test]
    fn divergence_reports_last_finite_state() {
        let corpus = PointCorpus::default_2d();
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 16,
            lr: 1e300,
            warmup_steps: 0,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        match train_denoiser(&corpus, sched(), ArchSpec::default_point(), &cfg, 1) {
            Err(Error::Training { last_finite, .. }) => {
                let ck = last_finite.expect("snapshot");
                assert!(ck.params.is_finite());
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_schedule_guard() {
        let s = sched();
        let m = Denoiser::new(ArchSpec::default_point(), 2, 5, PredictionType::Epsilon, s.clone(), 4)
            .unwrap();
        let ck = m.to_checkpoint();
        let back = Denoiser::from_checkpoint(&ck, s).unwrap();
        assert_eq!(back.params(), m.params());
        let other = Arc::new(build_schedule(1000, BetaFamily::Cosine).unwrap());
        assert!(matches!(
            Denoiser::from_checkpoint(&ck, other),
            Err(Error::Config(_))
        ));
    }
}
