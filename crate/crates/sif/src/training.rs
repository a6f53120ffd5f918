//! Joint training of tokenizer + mixer: Adam over the canonical parameter
//! list, the epoch loop with validation-AUC early stopping, dead-code
//! reseeding, checkpointing, and the finite-difference gradient checker.

use crate::ckpt::{read_ckpt, write_ckpt, CkptHeader, CKPT_VERSION, MIXER_MAGIC, TOKENIZER_MAGIC};
use crate::datagen::{behavior_sequence, ImpressionLog, RawSample};
use crate::error::{Result, SifError};
use crate::eval::{auc, gauc, logloss, MetricReport};
use crate::graph::{Graph, TraceData};
use crate::mixer::MixerState;
use crate::model::{build, Example, HistorySource, LossWeights, RouteFlags};
use crate::schema::{FeatureSchema, Group};
use crate::tensor::Tensor;
use crate::tokenizer::{ParamKind, TokenizerState};
use crate::tokenstore::TokenStore;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with coupled L2 weight decay; layer-norm parameters and biases are
/// exempt from decay.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    kinds: Vec<ParamKind>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, tok: &TokenizerState, mix: &MixerState) -> Self {
        let mut m = Vec::new();
        let mut kinds = Vec::new();
        let mut collect = |_: String, k: ParamKind, t: &Tensor| {
            m.push(Tensor::zeros(t.shape()));
            kinds.push(k);
        };
        tok.for_each_param(&mut collect);
        mix.for_each_param(&mut collect);
        let v = m.clone();
        Adam {
            cfg,
            step: 0,
            m,
            v,
            kinds,
        }
    }

    /// One update over the canonical parameter order; `grads[i]` may be None
    /// for parameters the batch never touched.
    pub fn apply(
        &mut self,
        tok: &mut TokenizerState,
        mix: &mut MixerState,
        grads: &[Option<Tensor>],
    ) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut idx = 0usize;
        let mut update = |_: &str, kind: ParamKind, t: &mut Tensor| {
            let i = idx;
            idx += 1;
            let g_opt = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            debug_assert_eq!(self.kinds[i], kind);
            let decay = if kind == ParamKind::Weight {
                c.weight_decay
            } else {
                0.0
            };
            let td = t.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for j in 0..td.len() {
                let g = match g_opt {
                    Some(gt) => gt.data()[j] + decay * td[j],
                    None => decay * td[j],
                };
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * g;
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * g * g;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                td[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        };
        tok.for_each_param_mut(&mut update);
        mix.for_each_param_mut(&mut update);
        debug_assert_eq!(idx, grads.len());
    }

    /// Clears first/second moments of one codebook row after reseeding.
    fn reset_codebook_row(&mut self, flat_param_idx: usize, row: usize, d0: usize) {
        for buf in [&mut self.m[flat_param_idx], &mut self.v[flat_param_idx]] {
            for x in &mut buf.data_mut()[row * d0..(row + 1) * d0] {
                *x = 0.0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub l_bce: f64,
    pub l_vq: f64,
    pub l_align: f64,
    pub l_token: f64,
    pub total: f64,
}

/// Alignment loss value on one raw sample: per-slot squared distance between
/// the target projection and the (stop-gradiented) tokenizer reconstruction.
pub fn alignment_loss(
    schema: &FeatureSchema,
    tok: &TokenizerState,
    mix: &MixerState,
    target: &RawSample,
) -> Result<f64> {
    let trace = tok.quantize_sample(schema, target)?;
    let raws = tok.embed_fields(schema, target)?;
    let mut total = 0.0;
    for (s, raw) in raws.iter().enumerate() {
        let w = &mix.w_res[s];
        let mut proj = vec![0.0; mix.d0];
        for (k, &fv) in raw.iter().enumerate() {
            if fv != 0.0 {
                let row = w.row(k);
                for j in 0..mix.d0 {
                    proj[j] += fv * row[j];
                }
            }
        }
        total += crate::tensor::sq_dist(&proj, &trace.recon[s]);
    }
    Ok(total)
}

/// Step diagnostics: the recorded quantizer index choices and the residual
/// inputs seen per (slot, level), for usage tracking and reseeding.
#[derive(Debug)]
pub struct StepDiag {
    pub trace: TraceData,
    pub residual_inputs: Vec<Tensor>,
}

/// One optimizer step over a batch. Returns the pre-step loss values.
pub fn train_step(
    schema: &FeatureSchema,
    tok: &mut TokenizerState,
    mix: &mut MixerState,
    opt: &mut Adam,
    batch: &[Example],
    l: usize,
    weights: &LossWeights,
    routes: &RouteFlags,
) -> Result<(LossBreakdown, StepDiag)> {
    let mut g = Graph::new();
    let (binding, io) = build(&mut g, schema, tok, mix, batch, l, weights, routes, true)?;
    let parts = [
        ("l_bce", g.value(io.l_bce).item()),
        ("l_vq", g.value(io.l_vq).item()),
        ("l_align", g.value(io.l_align).item()),
        ("l_token", g.value(io.l_token).item()),
    ];
    for (name, v) in parts {
        if !v.is_finite() {
            return Err(SifError::Diverged(format!("{} is not finite: {}", name, v)));
        }
    }
    let breakdown = LossBreakdown {
        l_bce: parts[0].1,
        l_vq: parts[1].1,
        l_align: parts[2].1,
        l_token: parts[3].1,
        total: g.value(io.loss).item(),
    };
    let grads = g.backward(io.loss);
    let flat: Vec<Option<Tensor>> = binding.ids.iter().map(|&id| grads[id].clone()).collect();
    let residual_inputs: Vec<Tensor> = io
        .residual_inputs
        .iter()
        .map(|&id| g.value(id).clone())
        .collect();
    opt.apply(tok, mix, &flat);
    Ok((
        breakdown,
        StepDiag {
            trace: g.take_trace(),
            residual_inputs,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub val_auc: f64,
    pub val_gauc: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub seq_len: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub routes: RouteFlags,
    pub seed: u64,
    /// Cap on train/validation examples per epoch (most recent kept).
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub run_dir: Option<PathBuf>,
    pub quiet: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seq_len: 32,
            batch_size: 256,
            max_epochs: 10,
            patience: 3,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            routes: RouteFlags::default(),
            seed: 1,
            train_limit: None,
            val_limit: None,
            run_dir: None,
            quiet: true,
        }
    }
}

fn cap_recent(mut idx: Vec<usize>, limit: Option<usize>) -> Vec<usize> {
    if let Some(n) = limit {
        if idx.len() > n {
            idx = idx.split_off(idx.len() - n);
        }
    }
    idx
}

/// Full training run with validation-AUC early stopping. Returns the states
/// at the best epoch.
pub fn train(
    schema: &FeatureSchema,
    log: &ImpressionLog,
    mut tok: TokenizerState,
    mut mix: MixerState,
    opts: &TrainOptions,
) -> Result<(TokenizerState, MixerState, FitReport)> {
    let (train_idx_all, val_idx_all, _) = log.split_indices();
    let train_pool = cap_recent(train_idx_all, opts.train_limit);
    let val_idx = cap_recent(val_idx_all, opts.val_limit);
    let l = opts.seq_len;
    let mut opt = Adam::new(opts.adam, &tok, &mix);
    let hgaq = mix.variant.uses_tokenizer();
    let n_cb = if hgaq { tok.codebooks.len() } else { 0 };
    let mut usage: Vec<Vec<u64>> = vec![vec![0; tok.v]; n_cb];
    // last-seen residual inputs per (slot, level) for dead-code reseeding
    let mut reservoir: Vec<Option<Tensor>> = vec![None; n_cb];
    let cb_param_base = tok.field_embed.len() + tok.num_slots();
    let mut metrics_file = match &opts.run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("metrics.log"))?)
        }
        None => None,
    };

    let mut best: Option<(usize, f64, TokenizerState, MixerState)> = None;
    let mut epochs = Vec::new();
    let mut step_no = 0u64;
    for epoch in 0..opts.max_epochs {
        let mut order = train_pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xe9ac5 ^ (epoch as u64) << 32);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut n_batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| {
                    let s = &log.samples[i];
                    let hist = behavior_sequence(log, s.sample_id, l).expect("sample in log");
                    Example {
                        target: s,
                        history: HistorySource::Raw(hist),
                        label: s.label,
                    }
                })
                .collect();
            let (loss, diag) = train_step(
                schema,
                &mut tok,
                &mut mix,
                &mut opt,
                &batch,
                l,
                &opts.weights,
                &opts.routes,
            )?;
            // first epoch keeps the zero row pinned in every codebook
            if hgaq && epoch == 0 {
                for cb in tok.codebooks.iter_mut() {
                    for x in cb.row_mut(0) {
                        *x = 0.0;
                    }
                }
            }
            if hgaq {
                for (k, chosen) in diag.trace.indices.iter().enumerate() {
                    for &q in chosen {
                        usage[k][q] += 1;
                    }
                }
                for (k, rin) in diag.residual_inputs.iter().enumerate() {
                    reservoir[k] = Some(rin.clone());
                }
            }
            sums.l_bce += loss.l_bce;
            sums.l_vq += loss.l_vq;
            sums.l_align += loss.l_align;
            sums.l_token += loss.l_token;
            sums.total += loss.total;
            n_batches += 1;
            step_no += 1;
            if let Some(f) = &mut metrics_file {
                writeln!(
                    f,
                    "step={} l_bce={:.6} l_vq={:.6} l_align={:.6} l_token={:.6} total={:.6}",
                    step_no, loss.l_bce, loss.l_vq, loss.l_align, loss.l_token, loss.total
                )?;
            }
        }
        // dead-code reseeding: codes unselected for a full epoch move to a
        // random recent encoder output
        if hgaq && epoch + 1 < opts.max_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xdeadc0de ^ (epoch as u64) << 24);
            for k in 0..n_cb {
                let Some(pool) = &reservoir[k] else { continue };
                if pool.rows2() == 0 {
                    continue;
                }
                let start = if epoch == 0 { 1 } else { 0 }; // keep the pinned zero row
                for q in start..tok.v {
                    if usage[k][q] == 0 {
                        let row = rng.gen_range(0..pool.rows2());
                        let src = pool.row(row).to_vec();
                        tok.codebooks[k].row_mut(q).copy_from_slice(&src);
                        opt.reset_codebook_row(cb_param_base + k, q, tok.d0);
                    }
                    usage[k][q] = 0;
                }
            }
        }
        let nb = n_batches.max(1) as f64;
        let mean = LossBreakdown {
            l_bce: sums.l_bce / nb,
            l_vq: sums.l_vq / nb,
            l_align: sums.l_align / nb,
            l_token: sums.l_token / nb,
            total: sums.total / nb,
        };
        let val = evaluate(schema, &tok, &mix, log, &val_idx, l, opts.batch_size)?;
        if let Some(f) = &mut metrics_file {
            writeln!(
                f,
                "epoch={} mean_total={:.6} val_auc={:.6} val_gauc={:.6}",
                epoch, mean.total, val.auc, val.gauc
            )?;
        }
        if !opts.quiet {
            eprintln!(
                "epoch {:>2}  loss {:.4}  val auc {:.4}  gauc {:.4}",
                epoch, mean.total, val.auc, val.gauc
            );
        }
        if let Some(dir) = &opts.run_dir {
            save_tokenizer(&tok, &dir.join(format!("tokenizer_epoch{}.sifc", epoch)))?;
            save_mixer(&mix, &dir.join(format!("mixer_epoch{}.sifm", epoch)))?;
        }
        epochs.push(EpochStats {
            epoch,
            mean,
            val_auc: val.auc,
            val_gauc: val.gauc,
        });
        let improved = best.as_ref().map_or(true, |(_, b, _, _)| val.auc > *b);
        if improved {
            best = Some((epoch, val.auc, tok.clone(), mix.clone()));
        } else {
            let (be, _, _, _) = best.as_ref().unwrap();
            if epoch - be >= opts.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_auc, tok, mix) = best.expect("at least one epoch");
    Ok((
        tok,
        mix,
        FitReport {
            epochs,
            best_epoch,
            best_val_auc,
        },
    ))
}

/// Scores the given log rows (on-the-fly tokenized history) and computes
/// ranking metrics grouped by user.
pub fn evaluate(
    schema: &FeatureSchema,
    tok: &TokenizerState,
    mix: &MixerState,
    log: &ImpressionLog,
    indices: &[usize],
    l: usize,
    batch_size: usize,
) -> Result<MetricReport> {
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut groups = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch: Vec<Example> = chunk
            .iter()
            .map(|&i| {
                let s = &log.samples[i];
                let hist = behavior_sequence(log, s.sample_id, l).expect("sample in log");
                Example {
                    target: s,
                    history: HistorySource::Raw(hist),
                    label: s.label,
                }
            })
            .collect();
        scores.extend(crate::model::score_batch(schema, tok, mix, &batch, l)?);
        for &i in chunk {
            labels.push(log.samples[i].label);
            groups.push(log.samples[i].user_id);
        }
    }
    let a = auc(&scores, &labels)?;
    let g = gauc(&scores, &labels, &groups)?;
    let variant = match mix.variant.backbone {
        crate::mixer::Backbone::Factored => crate::eval::AttentionVariant::Factored,
        crate::mixer::Backbone::Flat => crate::eval::AttentionVariant::Flat,
        crate::mixer::Backbone::Pooled => crate::eval::AttentionVariant::Pooled,
    };
    Ok(MetricReport {
        auc: a,
        gauc: g.value,
        logloss: logloss(&scores, &labels),
        n_scored: scores.len(),
        n_groups_used: g.groups_used,
        n_groups_skipped: g.groups_skipped,
        flops_per_example: crate::eval::flops_estimate(
            l,
            mix.t,
            mix.d0,
            mix.n_blocks,
            mix.heads,
            variant,
        ),
    })
}

/// Serving-path scoring: history tokens come from the offline store.
pub fn evaluate_with_store(
    schema: &FeatureSchema,
    tok: &TokenizerState,
    mix: &MixerState,
    log: &ImpressionLog,
    store: &TokenStore,
    indices: &[usize],
    l: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut token_hists = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &log.samples[i];
            let hist = behavior_sequence(log, s.sample_id, l)?;
            let tokens: Result<Vec<_>> = hist
                .iter()
                .map(|h| {
                    store.lookup(h.sample_id).ok_or_else(|| {
                        SifError::Data(format!("sample {} missing from store", h.sample_id))
                    })
                })
                .collect();
            token_hists.push(tokens?);
        }
        let batch: Vec<Example> = chunk
            .iter()
            .zip(&token_hists)
            .map(|(&i, tokens)| {
                let s = &log.samples[i];
                Example {
                    target: s,
                    history: HistorySource::Tokens(tokens.iter().collect()),
                    label: s.label,
                }
            })
            .collect();
        scores.extend(crate::model::score_batch(schema, tok, mix, &batch, l)?);
    }
    Ok(scores)
}

// --- checkpoints ---------------------------------------------------------------

fn group_counts(slots: &[crate::schema::SubTokenSlot]) -> Vec<u16> {
    let mut counts: Vec<(Group, u16)> = Vec::new();
    for s in slots {
        match counts.iter_mut().find(|(g, _)| *g == s.group) {
            Some((_, c)) => *c += 1,
            None => counts.push((s.group.clone(), 1)),
        }
    }
    counts.into_iter().map(|(_, c)| c).collect()
}

pub fn save_tokenizer(tok: &TokenizerState, path: &Path) -> Result<()> {
    let header = CkptHeader {
        version: CKPT_VERSION,
        schema_hash: tok.schema_hash,
        group_counts: group_counts(&tok.slots),
        d0: tok.d0 as u16,
        m: tok.m_levels as u8,
        v: tok.v as u32,
    };
    let mut tensors = Vec::new();
    tok.for_each_param(|name, _, t| tensors.push((name, t.clone())));
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_ckpt(path, TOKENIZER_MAGIC, &header, &refs)
}

pub fn load_tokenizer(schema: &FeatureSchema, path: &Path) -> Result<TokenizerState> {
    let (header, tensors) = read_ckpt(path, TOKENIZER_MAGIC)?;
    if header.schema_hash != schema.hash() {
        return Err(SifError::Format {
            file: path.display().to_string(),
            msg: "schema hash mismatch".into(),
        });
    }
    let mut tok = TokenizerState::init(schema, 0)?;
    assign_params(path, tensors, |f| tok.for_each_param_mut(f))?;
    Ok(tok)
}

pub fn save_mixer(mix: &MixerState, path: &Path) -> Result<()> {
    let header = CkptHeader {
        version: CKPT_VERSION,
        schema_hash: mix.schema_hash,
        group_counts: Vec::new(),
        d0: mix.d0 as u16,
        m: 0,
        v: 0,
    };
    let mut tensors = Vec::new();
    mix.for_each_param(|name, _, t| tensors.push((name, t.clone())));
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_ckpt(path, MIXER_MAGIC, &header, &refs)
}

pub fn load_mixer(
    schema: &FeatureSchema,
    path: &Path,
    n_blocks: usize,
    heads: usize,
    l_max: usize,
    variant: crate::mixer::Variant,
) -> Result<MixerState> {
    let (header, tensors) = read_ckpt(path, MIXER_MAGIC)?;
    if header.schema_hash != schema.hash() {
        return Err(SifError::Format {
            file: path.display().to_string(),
            msg: "schema hash mismatch".into(),
        });
    }
    let mut mix = MixerState::init(schema, 0, n_blocks, heads, l_max, variant)?;
    assign_params(path, tensors, |f| mix.for_each_param_mut(f))?;
    Ok(mix)
}

fn assign_params(
    path: &Path,
    tensors: Vec<(String, Tensor)>,
    mut for_each: impl FnMut(&mut dyn FnMut(&str, ParamKind, &mut Tensor)),
) -> Result<()> {
    let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut missing = Vec::new();
    let mut bad_shape = Vec::new();
    for_each(&mut |name, _, t| match map.remove(name) {
        Some(loaded) => {
            if loaded.shape() == t.shape() {
                *t = loaded;
            } else {
                bad_shape.push(name.to_string());
            }
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() || !bad_shape.is_empty() || !map.is_empty() {
        let extra: Vec<String> = map.into_keys().collect();
        return Err(SifError::Format {
            file: path.display().to_string(),
            msg: format!(
                "tensor mismatch: missing {:?}, wrong shape {:?}, unexpected {:?}",
                missing, bad_shape, extra
            ),
        });
    }
    Ok(())
}

// --- gradient checking ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub index_flips: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub max_rel_err: f64,
    pub any_flips: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && !self.any_flips
    }
}

/// Central finite differences against the tape gradients for every
/// parameter tensor. The quantizer's index choices and every stop-gradient
/// value are pinned to the base point, so differences probe exactly the
/// surrogate that reverse mode differentiates. A perturbation large enough
/// to flip an index is reported as non-smooth for that group, not an error.
pub fn gradcheck(
    schema: &FeatureSchema,
    tok: &TokenizerState,
    mix: &MixerState,
    batch: &[Example],
    l: usize,
    weights: &LossWeights,
    routes: &RouteFlags,
    step: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let (binding, io) = build(&mut g, schema, tok, mix, batch, l, weights, routes, true)?;
    let grads = g.backward(io.loss);
    let analytic: Vec<Tensor> = binding
        .ids
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            grads[id].clone().unwrap_or_else(|| {
                let mut shape = None;
                let mut i = 0;
                let mut grab = |_: String, _: ParamKind, t: &Tensor| {
                    if i == k {
                        shape = Some(t.shape().to_vec());
                    }
                    i += 1;
                };
                tok.for_each_param(&mut grab);
                mix.for_each_param(&mut grab);
                Tensor::zeros(&shape.expect("param index in range"))
            })
        })
        .collect();
    let trace = g.take_trace();

    let names: Vec<String> = {
        let mut v = Vec::new();
        tok.for_each_param(|n, _, _| v.push(format!("tokenizer.{}", n)));
        mix.for_each_param(|n, _, _| v.push(format!("mixer.{}", n)));
        v
    };

    let eval_at = |tok_p: &TokenizerState, mix_p: &MixerState| -> Result<(f64, usize)> {
        let mut g = Graph::new_replay(trace.clone());
        let (_, io) = build(&mut g, schema, tok_p, mix_p, batch, l, weights, routes, true)?;
        Ok((g.value(io.loss).item(), g.index_flips))
    };

    let mut groups = Vec::with_capacity(names.len());
    let mut global_max = 0.0f64;
    let mut any_flips = false;
    for (k, name) in names.iter().enumerate() {
        let n = analytic[k].numel();
        let check_n = max_per_tensor.map_or(n, |cap| n.min(cap));
        let mut max_rel = 0.0f64;
        let mut flips = 0usize;
        for e in pick_elements(n, check_n) {
            let mut tok_p = tok.clone();
            let mut mix_p = mix.clone();
            perturb(&mut tok_p, &mut mix_p, k, e, step);
            let (f_plus, flips_p) = eval_at(&tok_p, &mix_p)?;
            let mut tok_m = tok.clone();
            let mut mix_m = mix.clone();
            perturb(&mut tok_m, &mut mix_m, k, e, -step);
            let (f_minus, flips_m) = eval_at(&tok_m, &mix_m)?;
            if flips_p + flips_m > 0 {
                flips += 1;
                continue;
            }
            let fd = (f_plus - f_minus) / (2.0 * step);
            let an = analytic[k].data()[e];
            let rel = (an - fd).abs() / (an.abs().max(fd.abs()) + 1e-4);
            max_rel = max_rel.max(rel);
        }
        global_max = global_max.max(max_rel);
        any_flips |= flips > 0;
        groups.push(GradCheckGroup {
            name: name.clone(),
            max_rel_err: max_rel,
            checked: check_n,
            index_flips: flips,
        });
    }
    Ok(GradCheckReport {
        groups,
        max_rel_err: global_max,
        any_flips,
    })
}

fn pick_elements(n: usize, take: usize) -> Vec<usize> {
    if take >= n {
        (0..n).collect()
    } else {
        // evenly spread deterministic picks
        (0..take).map(|i| i * n / take).collect()
    }
}

fn perturb(tok: &mut TokenizerState, mix: &mut MixerState, flat_idx: usize, elem: usize, h: f64) {
    let mut i = 0usize;
    let mut f = |_: &str, _: ParamKind, t: &mut Tensor| {
        if i == flat_idx {
            t.data_mut()[elem] += h;
        }
        i += 1;
    };
    tok.for_each_param_mut(&mut f);
    mix.for_each_param_mut(&mut f);
}

/// The reference tiny configuration for gradient checking: L=4, T=3, d0=4,
/// N=1, M=2, V=4, all-f64 arithmetic.
pub fn tiny_gradcheck_setup(
    seed: u64,
) -> Result<(
    FeatureSchema,
    TokenizerState,
    MixerState,
    ImpressionLog,
    Vec<usize>,
)> {
    let schema = crate::schema::parse_schema(
        r#"
        sub_token_granularity = 4
        sub_token_dim = 4
        rvq_levels = 2
        codebook_size = 4

        [[fields]]
        name = "ua"
        group = "user"
        kind = "categorical"
        cardinality = 5
        embed_dim = 3

        [[fields]]
        name = "ib"
        group = "item"
        kind = "numeric"
        embed_dim = 2

        [[fields]]
        name = "cc"
        group = "ctx"
        kind = "categorical"
        cardinality = 3
        embed_dim = 3
    "#,
    )?;
    let tok = TokenizerState::init(&schema, seed ^ 1)?;
    let mix = MixerState::init(
        &schema,
        seed ^ 2,
        1,
        2,
        4,
        crate::mixer::Variant::parse("full")?,
    )?;
    let log = crate::datagen::generate_log(&schema, 4, 10, 120, seed, 0.5);
    // pick late samples so histories are non-trivial
    let batch_idx = vec![100, 110, 119];
    Ok((schema, tok, mix, log, batch_idx))
}

/// Runs the tiny-config gradient check over the full objective.
pub fn gradcheck_tiny(
    seed: u64,
    step: f64,
    weights: &LossWeights,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    let (schema, tok, mix, log, idx) = tiny_gradcheck_setup(seed)?;
    let batch: Vec<Example> = idx
        .iter()
        .map(|&i| {
            let s = &log.samples[i];
            let hist = behavior_sequence(&log, s.sample_id, 4).expect("in log");
            Example {
                target: s,
                history: HistorySource::Raw(hist),
                label: s.label,
            }
        })
        .collect();
    gradcheck(
        &schema,
        &tok,
        &mix,
        &batch,
        4,
        weights,
        &RouteFlags::default(),
        step,
        max_per_tensor,
    )
}
