//! Training and evaluation loops.
//!
//! Each sample of a batch gets its own graph; gradients are summed across
//! the batch with batch-wide loss normalizers, which equals one padded batch
//! graph but avoids computing on padding. The loop is single-threaded and
//! fully determined by the seed, the configs and the data.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thoughtroute_autodiff::{Graph, ParameterStore, Tensor, TensorError};

use crate::batch::TokenBatch;
use crate::config::{LossConfig, ModelConfig};
use crate::decode;
use crate::error::{Error, Result};
use crate::metrics::{self, InterpReport, TranslationScores};
use crate::model;
use crate::objectives::{self, LossValues, Normalizers};
use crate::synth::{make_batch, SyntheticSample};

pub use optim::{AdamConfig, AdamState};
pub use schedule::{Plateau, ScheduleConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub stop_lr: f64,
    pub max_epochs: usize,
    /// Evaluate every this many updates; 0 means once per epoch.
    pub eval_every: u64,
    /// Clip the global gradient norm; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Stop once dev accuracy reaches this value; 0 disables.
    pub target_dev_acc: f64,
    /// Hard cap on updates; 0 means unlimited.
    pub max_steps: u64,
    /// Greedy-decode the dev set at each evaluation for BLEU/ROUGE.
    pub eval_bleu: bool,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.998,
            adam_eps: 1e-8,
            weight_decay: 3e-3,
            batch_size: 32,
            warmup_steps: 2000,
            plateau_factor: 0.8,
            plateau_patience: 3,
            stop_lr: 1e-4,
            max_epochs: 200,
            eval_every: 0,
            max_grad_norm: 0.0,
            target_dev_acc: 0.0,
            max_steps: 0,
            eval_bleu: true,
            max_decode_len: 16,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            stop_lr: self.stop_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, m: &str| if ok { Ok(()) } else { Err(Error::config(m)) };
        check(self.lr > 0.0, "lr must be > 0")?;
        check((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must be in [0, 1)")?;
        check(self.adam_eps > 0.0, "adam_eps must be > 0")?;
        check(self.weight_decay >= 0.0, "weight_decay must be >= 0")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(self.plateau_factor > 0.0 && self.plateau_factor < 1.0, "plateau_factor must be in (0, 1)")?;
        check(self.plateau_patience >= 1, "plateau_patience must be >= 1")?;
        check(self.stop_lr < self.lr, "stop_lr must be below lr")?;
        check(self.max_grad_norm >= 0.0, "max_grad_norm must be >= 0")?;
        check(self.max_decode_len >= 1, "max_decode_len must be >= 1")?;
        Ok(())
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterStore,
    pub adam: AdamState,
    pub plateau: Plateau,
    pub epoch: usize,
    pub batch_in_epoch: usize,
}

impl TrainState {
    pub fn new(params: ParameterStore) -> Self {
        Self {
            adam: AdamState::new(&params),
            params,
            plateau: Plateau::default(),
            epoch: 0,
            batch_in_epoch: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

/// Dev-set evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Teacher-forced next-token accuracy over non-PAD positions.
    pub token_acc: f64,
    pub scores: Option<TranslationScores>,
    pub interp: InterpReport,
    /// Micro-averaged alignment purity of the final-layer prior.
    pub purity: f64,
    pub samples: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Mean training losses since the previous row.
    pub train: LossValues,
    pub eval: EvalReport,
}

pub const LOG_HEADER: &str = "step,epoch,lr,ce,mono,cont,total,dev_acc,bleu4,rouge_l,entropy,mono_viol,span,tv,purity";

impl LogRow {
    pub fn csv(&self) -> String {
        let (bleu4, rouge) = match &self.eval.scores {
            Some(s) => (format!("{}", s.bleu[3]), format!("{}", s.rouge_l)),
            None => (String::new(), String::new()),
        };
        let i = &self.eval.interp;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.train.ce,
            self.train.mono,
            self.train.cont,
            self.train.total,
            self.eval.token_acc,
            bleu4,
            rouge,
            i.entropy,
            i.mono_viol,
            i.span,
            i.tv,
            self.eval.purity
        )
    }
}

/// Why [`Trainer::run`] returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    LearningRate,
    TargetReached,
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn numeric(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(t @ TensorError::NonFinite { .. }) => Error::Numeric {
            step,
            detail: t.to_string(),
        },
        other => other,
    }
}

pub struct Trainer<'a> {
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub cfg: &'a TrainConfig,
}

impl Trainer<'_> {
    /// Fresh parameters seeded from the training seed.
    pub fn init_state(&self) -> Result<TrainState> {
        self.model.validate()?;
        self.loss.validate()?;
        self.cfg.validate()?;
        Ok(TrainState::new(model::init_params(self.model, self.cfg.seed)?))
    }

    /// Sample order for `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Loss and summed gradients of a batch at the current parameters.
    pub fn batch_gradients(
        &self,
        params: &ParameterStore,
        batch: &[&SyntheticSample],
        dropout_seed: Option<u64>,
    ) -> Result<(LossValues, thoughtroute_autodiff::GradientMap)> {
        let (_, tokens) = make_batch(batch)?;
        let norm = Normalizers::of(&tokens);
        let mut grads = params.zeros_like();
        let mut total = LossValues::default();
        for (i, s) in batch.iter().enumerate() {
            let (clip, tok) = make_batch(&[*s])?;
            let mut g = Graph::with_store(params);
            if let Some(seed) = dropout_seed {
                g = g.training(mix(seed, i as u64, 0x5eed));
            }
            let fwd = model::forward(&mut g, self.model, &clip, &tok)?;
            let loss = objectives::total_loss(&mut g, &fwd, &tok, self.loss, norm)?;
            let v = loss.values(&g);
            total.ce += v.ce;
            total.mono += v.mono;
            total.cont += v.cont;
            total.total += v.total;
            g.backward_into(loss.total, &mut grads)?;
        }
        Ok((total, grads))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&self, state: &mut TrainState, batch: &[&SyntheticSample]) -> Result<LossValues> {
        let step = state.step() + 1;
        let seed = mix(self.cfg.seed, step, 0xd20f);
        let (loss, mut grads) = self
            .batch_gradients(&state.params, batch, Some(seed))
            .map_err(numeric(step))?;
        if self.cfg.max_grad_norm > 0.0 {
            let n = grads.global_norm();
            if n > self.cfg.max_grad_norm {
                grads.scale(self.cfg.max_grad_norm / n);
            }
        }
        let lr = state.plateau.lr_at(step, &self.cfg.schedule());
        state
            .adam
            .update(&mut state.params, &grads, lr, &self.cfg.adam())?;
        if let Some((name, _)) = state.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Numeric {
                step,
                detail: format!("parameter `{name}` became non-finite"),
            });
        }
        Ok(loss)
    }

    /// Teacher-forced accuracy, routing metrics, purity and optionally
    /// greedy-decoding scores on `data`.
    pub fn evaluate(&self, params: &ParameterStore, data: &[SyntheticSample]) -> Result<EvalReport> {
        evaluate(self.model, params, data, self.cfg.eval_bleu, self.cfg.max_decode_len)
    }

    /// Trains until a stop condition; `observe` sees every log row and
    /// whether the dev metric improved.
    pub fn run<F>(
        &self,
        state: &mut TrainState,
        train: &[SyntheticSample],
        dev: &[SyntheticSample],
        mut observe: F,
    ) -> Result<StopReason>
    where
        F: FnMut(&TrainState, &LogRow, bool) -> Result<()>,
    {
        if train.is_empty() {
            return Err(Error::input("training set is empty"));
        }
        let sched = self.cfg.schedule();
        let mut acc = LossValues::default();
        let mut acc_n = 0usize;
        let mut eval = |state: &mut TrainState, acc: &mut LossValues, acc_n: &mut usize| -> Result<bool> {
            let report = self.evaluate(&state.params, dev)?;
            let n = (*acc_n).max(1) as f64;
            let row = LogRow {
                step: state.step(),
                epoch: state.epoch,
                lr: state.plateau.lr_at(state.step().max(1), &sched),
                train: LossValues {
                    ce: acc.ce / n,
                    mono: acc.mono / n,
                    cont: acc.cont / n,
                    total: acc.total / n,
                },
                eval: report,
            };
            *acc = LossValues::default();
            *acc_n = 0;
            let improved = state.plateau.observe(row.eval.token_acc, state.step(), &sched);
            observe(state, &row, improved)?;
            Ok(self.cfg.target_dev_acc > 0.0 && row.eval.token_acc >= self.cfg.target_dev_acc)
        };
        while state.epoch < self.cfg.max_epochs {
            let order = self.epoch_order(state.epoch, train.len());
            let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
            while state.batch_in_epoch < batches.len() {
                let batch: Vec<&SyntheticSample> = batches[state.batch_in_epoch].iter().map(|&i| &train[i]).collect();
                let l = self.train_step(state, &batch)?;
                state.batch_in_epoch += 1;
                acc.ce += l.ce;
                acc.mono += l.mono;
                acc.cont += l.cont;
                acc.total += l.total;
                acc_n += 1;
                if self.cfg.eval_every > 0 && state.step() % self.cfg.eval_every == 0 {
                    if eval(state, &mut acc, &mut acc_n)? {
                        return Ok(StopReason::TargetReached);
                    }
                    if state.plateau.should_stop(&sched) {
                        return Ok(StopReason::LearningRate);
                    }
                }
                if self.cfg.max_steps > 0 && state.step() >= self.cfg.max_steps {
                    return Ok(StopReason::MaxSteps);
                }
            }
            state.epoch += 1;
            state.batch_in_epoch = 0;
            if self.cfg.eval_every == 0 {
                if eval(state, &mut acc, &mut acc_n)? {
                    return Ok(StopReason::TargetReached);
                }
                if state.plateau.should_stop(&sched) {
                    return Ok(StopReason::LearningRate);
                }
            }
        }
        Ok(StopReason::MaxEpochs)
    }
}

/// Per-sample routing and prior tensors from an eval-mode forward pass.
pub struct Inspection {
    /// `[K, M]` binding used by the decoder prior.
    pub a: Tensor,
    /// `[M, T_s]`.
    pub w_seg: Tensor,
    /// `[K, T_s]` final-layer temporal prior.
    pub r: Tensor,
    /// `[T_t, T_s]` last decoder layer's token-to-frame prior.
    pub w: Tensor,
    /// `[T_t, |V|]`.
    pub logits: Tensor,
}

fn drop_batch(t: &Tensor) -> Tensor {
    t.clone().reshape(t.shape()[1..].to_vec()).expect("leading batch axis of 1")
}

/// Teacher-forced eval pass over one sample.
pub fn inspect(cfg: &ModelConfig, params: &ParameterStore, sample: &SyntheticSample) -> Result<Inspection> {
    let (clip, tok) = make_batch(&[sample])?;
    let mut g = Graph::with_store(params);
    let fwd = model::forward(&mut g, cfg, &clip, &tok)?;
    let th = &fwd.encoded.thoughts;
    Ok(Inspection {
        a: drop_batch(g.value(th.prior_routing().a)),
        w_seg: drop_batch(g.value(fwd.encoded.seg.w_seg)),
        r: drop_batch(g.value(th.final_routing().r)),
        w: drop_batch(g.value(fwd.priors.last().expect("decoder layer").w)),
        logits: drop_batch(g.value(fwd.logits)),
    })
}

/// Dev evaluation shared by the trainer and the CLI.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParameterStore,
    data: &[SyntheticSample],
    decode_bleu: bool,
    max_decode_len: usize,
) -> Result<EvalReport> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut interp = Vec::with_capacity(data.len());
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for s in data {
        let (clip, tok) = make_batch(&[s])?;
        let mut g = Graph::with_store(params);
        let enc = model::encode(&mut g, cfg, &clip)?;
        let (logits, _) = model::decode(&mut g, cfg, &enc, &tok)?;
        let lv = g.value(logits);
        let v = lv.shape()[2];
        for (row, &label) in lv.data().chunks(v).zip(&tok.labels()[0]) {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            correct += (best == label) as usize;
            total += 1;
        }
        let fin = enc.thoughts.final_routing();
        interp.push(InterpReport::of(&drop_batch(g.value(fin.a))));
        let (h, n) = metrics::purity_counts(&drop_batch(g.value(fin.r)), &s.frame_to_segment, s.n_segments());
        hits += h;
        counted += n;
        if decode_bleu {
            let hyp = decode::greedy(
                |prefix| {
                    let t = TokenBatch::from_inputs(vec![prefix.to_vec()])?;
                    let (lg, _) = model::decode(&mut g, cfg, &enc, &t)?;
                    Ok(decode::log_softmax(&crate::decoder::last_logits(&g, lg, 0)))
                },
                max_decode_len,
            )?;
            hyps.push(hyp);
            refs.push(s.tokens[..s.tokens.len() - 1].to_vec());
        }
    }
    Ok(EvalReport {
        token_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        scores: decode_bleu.then(|| TranslationScores::compute(&hyps, &refs)),
        interp: InterpReport::mean(&interp),
        purity: if counted == 0 { 0.0 } else { hits as f64 / counted as f64 },
        samples: data.len(),
    })
}
