//! The full recognition network: strided gated-convolutional encoder,
//! additive-attention re-encoding, stacked bidirectional GRU layers, and a
//! linear projection to per-step class logits, with a hand-written backward
//! pass through the whole composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{
    attend_sequence, attend_sequence_backward, AttentionCache, AttentionGrads, AttentionParams,
};
use crate::config::{BlockSpec, RunConfig};
use crate::ctc::{ctc_loss, LabelSeq};
use crate::error::{Error, Result};
use crate::layers::{
    conv_block_backward, conv_block_forward, gated_backward, gated_forward, map_to_sequence,
    map_to_sequence_backward, update_running_stats, ConvBlockCache, ConvBlockParams, GateCache,
    GateParams, Mode,
};
use crate::recurrent::{
    bigru_layer_backward, bigru_layer_forward, project_states, project_states_backward,
    BiGruCache, GruParamGrads, GruParams, LogitsMatrix, ProjectionParams,
};
use crate::tensor::Tensor;

/// Architecture description resolved against a concrete charset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub blocks: Vec<BlockSpec>,
    /// 1-based block indices followed by a gated layer, ascending.
    pub gate_after: Vec<usize>,
    pub feature_dim: usize,
    pub attn_score_dim: usize,
    pub attn_output_dim: usize,
    pub attn_tied: bool,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub classes_with_blank: usize,
    pub dropout_p: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn from_run(run: &RunConfig, charset_len: usize) -> Result<ModelConfig> {
        run.validate()?;
        let mut gate_after = run.gate_positions.clone();
        gate_after.sort_unstable();
        gate_after.dedup();
        Ok(ModelConfig {
            input_h: run.input_height,
            input_w: run.input_width,
            blocks: run.blocks(),
            gate_after,
            feature_dim: run.feature_dim,
            attn_score_dim: run.attn_score_dim,
            attn_output_dim: run.attn_output_dim,
            attn_tied: run.attn_tied_projections,
            gru_hidden: run.gru_hidden,
            gru_layers: run.gru_layers,
            classes_with_blank: charset_len + 1,
            dropout_p: run.dropout_p,
            bn_epsilon: run.bn_epsilon,
            bn_momentum: run.bn_momentum,
        })
    }

    /// `(C, H, W)` after each block.
    pub fn shape_chain(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::new();
        let (mut h, mut w) = (self.input_h, self.input_w);
        for b in &self.blocks {
            let pad = b.padding();
            h = (h + 2 * pad.0 - b.kernel.0) / b.stride.0 + 1;
            w = (w + 2 * pad.1 - b.kernel.1) / b.stride.1 + 1;
            shapes.push((b.channels, h, w));
        }
        shapes
    }

    pub fn time_steps(&self) -> usize {
        self.shape_chain().last().unwrap().2
    }

    fn gru_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.attn_output_dim
        } else {
            2 * self.gru_hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiGruLayerParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

/// Every learnable tensor of the network (plus batch-norm running state).
/// The same container carries gradients and optimizer accumulators: those
/// are tensors of identical shapes under identical names. Gates carry the
/// 1-based index of the block they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<ConvBlockParams>,
    pub gates: Vec<(usize, GateParams)>,
    pub attn: AttentionParams,
    pub layers: Vec<BiGruLayerParams>,
    pub proj: ProjectionParams,
}

fn glorot(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.random_range(-bound..bound))
}

/// Orthogonal square matrix via modified Gram-Schmidt on a Gaussian draw,
/// with a positive-diagonal convention so the result is deterministic.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect()
        })
        .collect();
    for i in 0..n {
        for j in 0..i {
            let proj: f64 = (0..n).map(|k| rows[i][k] * rows[j][k]).sum();
            for k in 0..n {
                rows[i][k] -= proj * rows[j][k];
            }
        }
        let norm: f64 = (0..n).map(|k| rows[i][k] * rows[i][k]).sum::<f64>().sqrt();
        let sign = if rows[i][i] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            rows[i][k] *= sign / norm;
        }
    }
    Tensor::from_parts(&[n, n], rows.into_iter().flatten().collect())
}

fn init_gru(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruParams {
    GruParams {
        w_update: glorot(rng, &[hidden, input], input, hidden),
        u_update: orthogonal(rng, hidden),
        b_update: Tensor::zeros(&[hidden]),
        w_reset: glorot(rng, &[hidden, input], input, hidden),
        u_reset: orthogonal(rng, hidden),
        b_reset: Tensor::zeros(&[hidden]),
        w_cand: glorot(rng, &[hidden, input], input, hidden),
        u_cand: orthogonal(rng, hidden),
        b_cand: Tensor::zeros(&[hidden]),
    }
}

impl ModelParams {
    /// Seeded initialization: Glorot-uniform projections and convolutions,
    /// orthogonal recurrent matrices, zero biases, unit batch-norm scale.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = cfg.shape_chain();
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut in_c = 1usize;
        for b in &cfg.blocks {
            let c = b.channels;
            let fan_in = in_c * b.kernel.0 * b.kernel.1;
            let fan_out = c * b.kernel.0 * b.kernel.1;
            blocks.push(ConvBlockParams {
                kernels: glorot(&mut rng, &[c, in_c, b.kernel.0, b.kernel.1], fan_in, fan_out),
                prelu_alpha: Tensor::full(&[c], 0.25),
                bn_gamma: Tensor::full(&[c], 1.0),
                bn_beta: Tensor::zeros(&[c]),
                bn_running_mean: Tensor::zeros(&[c]),
                bn_running_var: Tensor::full(&[c], 1.0),
                stride: b.stride,
                padding: b.padding(),
                dropout_p: cfg.dropout_p,
                bn_epsilon: cfg.bn_epsilon,
            });
            in_c = c;
        }
        let mut gates = Vec::with_capacity(cfg.gate_after.len());
        for &pos in &cfg.gate_after {
            let c = shapes[pos - 1].0;
            let fan = c * 9;
            gates.push((
                pos,
                GateParams {
                    kernels: glorot(&mut rng, &[c, c, 3, 3], fan, fan),
                    padding: (1, 1),
                },
            ));
        }
        let d = cfg.feature_dim;
        let ds = cfg.attn_score_dim;
        let attn = AttentionParams {
            w_query: glorot(&mut rng, &[ds, d], d, ds),
            w_keys: glorot(&mut rng, &[ds, d], d, ds),
            v: glorot(&mut rng, &[ds], ds, 1),
            w_combine: glorot(&mut rng, &[cfg.attn_output_dim, 2 * d], 2 * d, cfg.attn_output_dim),
            tied: cfg.attn_tied,
        };
        let mut layers = Vec::with_capacity(cfg.gru_layers);
        for l in 0..cfg.gru_layers {
            let input = cfg.gru_input_dim(l);
            layers.push(BiGruLayerParams {
                fwd: init_gru(&mut rng, input, cfg.gru_hidden),
                bwd: init_gru(&mut rng, input, cfg.gru_hidden),
            });
        }
        let proj = ProjectionParams {
            weight: glorot(
                &mut rng,
                &[cfg.classes_with_blank, 2 * cfg.gru_hidden],
                2 * cfg.gru_hidden,
                cfg.classes_with_blank,
            ),
            bias: Tensor::zeros(&[cfg.classes_with_blank]),
        };
        Ok(ModelParams {
            blocks,
            gates,
            attn,
            layers,
            proj,
        })
    }

    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        z
    }

    /// Checkpoint naming, in serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            out.push((format!("enc.block{n}.kernels"), &b.kernels));
            out.push((format!("enc.block{n}.prelu_alpha"), &b.prelu_alpha));
            out.push((format!("enc.block{n}.bn_gamma"), &b.bn_gamma));
            out.push((format!("enc.block{n}.bn_beta"), &b.bn_beta));
            out.push((format!("enc.block{n}.bn_running_mean"), &b.bn_running_mean));
            out.push((format!("enc.block{n}.bn_running_var"), &b.bn_running_var));
        }
        for (pos, g) in &self.gates {
            out.push((format!("enc.gate{pos}.kernels"), &g.kernels));
        }
        out.push(("attn.W1".into(), &self.attn.w_query));
        out.push(("attn.W2".into(), &self.attn.w_keys));
        out.push(("attn.v".into(), &self.attn.v));
        out.push(("attn.Wc".into(), &self.attn.w_combine));
        for (l, layer) in self.layers.iter().enumerate() {
            let n = l + 1;
            for (dir, p) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                out.push((format!("dec.l{n}.{dir}.W_z"), &p.w_update));
                out.push((format!("dec.l{n}.{dir}.U_z"), &p.u_update));
                out.push((format!("dec.l{n}.{dir}.b_z"), &p.b_update));
                out.push((format!("dec.l{n}.{dir}.W_r"), &p.w_reset));
                out.push((format!("dec.l{n}.{dir}.U_r"), &p.u_reset));
                out.push((format!("dec.l{n}.{dir}.b_r"), &p.b_reset));
                out.push((format!("dec.l{n}.{dir}.W_h"), &p.w_cand));
                out.push((format!("dec.l{n}.{dir}.U_h"), &p.u_cand));
                out.push((format!("dec.l{n}.{dir}.b_h"), &p.b_cand));
            }
        }
        out.push(("dec.proj.w".into(), &self.proj.weight));
        out.push(("dec.proj.b".into(), &self.proj.bias));
        out
    }

    /// Same ordering as [`ModelParams::named`], mutable.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = i + 1;
            out.push((format!("enc.block{n}.kernels"), &mut b.kernels));
            out.push((format!("enc.block{n}.prelu_alpha"), &mut b.prelu_alpha));
            out.push((format!("enc.block{n}.bn_gamma"), &mut b.bn_gamma));
            out.push((format!("enc.block{n}.bn_beta"), &mut b.bn_beta));
            out.push((format!("enc.block{n}.bn_running_mean"), &mut b.bn_running_mean));
            out.push((format!("enc.block{n}.bn_running_var"), &mut b.bn_running_var));
        }
        for (pos, g) in self.gates.iter_mut() {
            out.push((format!("enc.gate{pos}.kernels"), &mut g.kernels));
        }
        out.push(("attn.W1".into(), &mut self.attn.w_query));
        out.push(("attn.W2".into(), &mut self.attn.w_keys));
        out.push(("attn.v".into(), &mut self.attn.v));
        out.push(("attn.Wc".into(), &mut self.attn.w_combine));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let n = l + 1;
            for (dir, p) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                out.push((format!("dec.l{n}.{dir}.W_z"), &mut p.w_update));
                out.push((format!("dec.l{n}.{dir}.U_z"), &mut p.u_update));
                out.push((format!("dec.l{n}.{dir}.b_z"), &mut p.b_update));
                out.push((format!("dec.l{n}.{dir}.W_r"), &mut p.w_reset));
                out.push((format!("dec.l{n}.{dir}.U_r"), &mut p.u_reset));
                out.push((format!("dec.l{n}.{dir}.b_r"), &mut p.b_reset));
                out.push((format!("dec.l{n}.{dir}.W_h"), &mut p.w_cand));
                out.push((format!("dec.l{n}.{dir}.U_h"), &mut p.u_cand));
                out.push((format!("dec.l{n}.{dir}.b_h"), &mut p.b_cand));
            }
        }
        out.push(("dec.proj.w".into(), &mut self.proj.weight));
        out.push(("dec.proj.b".into(), &mut self.proj.bias));
        out
    }

    /// Batch-norm running statistics are state, not learnable weights.
    pub fn is_trainable(name: &str) -> bool {
        !name.contains("bn_running")
    }

    /// Rebuild parameters from checkpoint tensors, validating the exact name
    /// set and every shape against the architecture.
    pub fn from_named(cfg: &ModelConfig, tensors: &[(String, Tensor)]) -> Result<ModelParams> {
        let mut template = ModelParams::init(cfg, 0)?;
        let mut remaining: std::collections::BTreeMap<&str, &Tensor> = tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("meta.") && !n.starts_with("opt."))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        for (name, slot) in template.named_mut() {
            let t = remaining.remove(name.as_str()).ok_or_else(|| {
                Error::Mismatch(format!("checkpoint is missing tensor {name:?}"))
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::Mismatch(format!(
                    "checkpoint tensor {name:?} has shape {:?}, architecture wants {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        if let Some((name, _)) = remaining.into_iter().next() {
            return Err(Error::Mismatch(format!("checkpoint has unexpected tensor {name:?}")));
        }
        Ok(template)
    }
}

/// Forward intermediates for one mini-batch.
pub struct BatchCache {
    pub block_caches: Vec<ConvBlockCache>,
    pub gate_caches: Vec<GateCache>,
    final_dims: (usize, usize, usize),
    per_sample: Vec<SampleCache>,
    batch: usize,
}

struct SampleCache {
    attn: AttentionCache,
    gru: Vec<BiGruCache>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Encoder → gated layers → map-to-sequence → attention → stacked BiGRU →
/// projection. Errors name the failing stage.
pub fn forward_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    images: &[Tensor],
    mode: Mode,
    seed: u64,
) -> Result<(Vec<LogitsMatrix>, BatchCache)> {
    if images.is_empty() {
        return Err(Error::Usage("forward over an empty batch".into()));
    }
    let n = images.len();
    let (h, w) = (cfg.input_h, cfg.input_w);
    let mut batch = Tensor::zeros(&[n, 1, h, w]);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != [1, h, w] {
            return Err(Error::DimMismatch {
                op: "forward input stage",
                lhs: format!("sample {i} {:?}", img.shape()),
                rhs: format!("[1, {h}, {w}]"),
            });
        }
        batch.data_mut()[i * h * w..(i + 1) * h * w].copy_from_slice(img.data());
    }

    let mut x = batch;
    let mut block_caches = Vec::with_capacity(cfg.blocks.len());
    let mut gate_caches = Vec::with_capacity(params.gates.len());
    let mut next_gate = 0usize;
    for (i, bp) in params.blocks.iter().enumerate() {
        let (y, cache) = conv_block_forward(&x, bp, mode, mix_seed(seed, i as u64))
            .map_err(|e| stage_err("encoder block", i + 1, e))?;
        block_caches.push(cache);
        x = y;
        if next_gate < params.gates.len() && params.gates[next_gate].0 == i + 1 {
            let (y, cache) = gated_forward(&x, &params.gates[next_gate].1)
                .map_err(|e| stage_err("gated layer", i + 1, e))?;
            gate_caches.push(cache);
            x = y;
            next_gate += 1;
        }
    }

    let dims = x.shape().to_vec();
    let (c, fh, fw) = (dims[1], dims[2], dims[3]);
    let plane = c * fh * fw;
    let per_sample: Vec<Result<(LogitsMatrix, SampleCache)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let map = Tensor::from_parts(
                &[c, fh, fw],
                x.data()[i * plane..(i + 1) * plane].to_vec(),
            );
            let seq = map_to_sequence(&map, cfg.feature_dim)
                .map_err(|e| stage_err("map-to-sequence", i, e))?;
            let (attended, attn_cache) =
                attend_sequence(&seq, &params.attn).map_err(|e| stage_err("attention", i, e))?;
            let mut gru_caches = Vec::with_capacity(params.layers.len());
            let mut seq = attended;
            for (l, layer) in params.layers.iter().enumerate() {
                let (out, cache) = bigru_layer_forward(&seq, &layer.fwd, &layer.bwd)
                    .map_err(|e| stage_err("gru layer", l + 1, e))?;
                gru_caches.push(cache);
                seq = out;
            }
            let logits = project_states(seq.tensor(), &params.proj)
                .map_err(|e| stage_err("projection", i, e))?;
            Ok((
                logits,
                SampleCache {
                    attn: attn_cache,
                    gru: gru_caches,
                },
            ))
        })
        .collect();

    let mut logits = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for r in per_sample {
        let (l, c) = r?;
        logits.push(l);
        caches.push(c);
    }
    Ok((
        logits,
        BatchCache {
            block_caches,
            gate_caches,
            final_dims: (c, fh, fw),
            per_sample: caches,
            batch: n,
        },
    ))
}

fn stage_err(stage: &str, index: usize, e: Error) -> Error {
    match e {
        Error::DimMismatch { op: _, lhs, rhs } => Error::DimMismatch {
            op: "forward",
            lhs: format!("{stage} {index}: {lhs}"),
            rhs,
        },
        other => other,
    }
}

/// Full backward pass; `grad_logits` is one `T × K` gradient per sample.
/// Returns gradients in a [`ModelParams`]-shaped container (running-stat
/// slots stay zero).
pub fn backward_batch(
    params: &ModelParams,
    cache: &BatchCache,
    grad_logits: &[Tensor],
) -> Result<ModelParams> {
    if grad_logits.len() != cache.batch {
        return Err(Error::dim("backward", grad_logits.len(), cache.batch));
    }
    let mut grads = params.zeros_like();
    let (c, fh, fw) = cache.final_dims;

    struct SampleGrads {
        map: Tensor,
        attn: AttentionGrads,
        gru: Vec<(GruParamGrads, GruParamGrads)>,
        proj_w: Tensor,
        proj_b: Tensor,
    }

    let per_sample: Vec<Result<SampleGrads>> = cache
        .per_sample
        .par_iter()
        .zip(grad_logits.par_iter())
        .map(|(sc, gl)| {
            let last_states = sc
                .gru
                .last()
                .expect("at least one gru layer")
                .concat_states();
            let (mut g_seq, proj_w, proj_b) =
                project_states_backward(last_states, &params.proj, gl)?;
            let mut gru_grads = Vec::with_capacity(sc.gru.len());
            for (l, layer) in params.layers.iter().enumerate().rev() {
                let (g_in, g_fwd, g_bwd) =
                    bigru_layer_backward(&layer.fwd, &layer.bwd, &sc.gru[l], &g_seq)?;
                gru_grads.push((g_fwd, g_bwd));
                g_seq = g_in;
            }
            gru_grads.reverse();
            let attn_grads = attend_sequence_backward(&params.attn, &sc.attn, &g_seq, None)?;
            let map = map_to_sequence_backward(&attn_grads.states, c, fh, fw)?;
            Ok(SampleGrads {
                map,
                attn: attn_grads,
                gru: gru_grads,
                proj_w,
                proj_b,
            })
        })
        .collect();

    let mut map_grads = Tensor::zeros(&[cache.batch, c, fh, fw]);
    let plane = c * fh * fw;
    for (i, r) in per_sample.into_iter().enumerate() {
        let sg = r?;
        map_grads.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(sg.map.data());
        acc(&mut grads.attn.w_query, &sg.attn.w_query);
        acc(&mut grads.attn.w_keys, &sg.attn.w_keys);
        acc(&mut grads.attn.v, &sg.attn.v);
        acc(&mut grads.attn.w_combine, &sg.attn.w_combine);
        for (l, (gf, gb)) in sg.gru.into_iter().enumerate() {
            acc_gru(&mut grads.layers[l].fwd, &gf);
            acc_gru(&mut grads.layers[l].bwd, &gb);
        }
        acc(&mut grads.proj.weight, &sg.proj_w);
        acc(&mut grads.proj.bias, &sg.proj_b);
    }

    // encoder, in reverse, interleaving gates
    let mut g = map_grads;
    let mut next_gate = params.gates.len();
    for (i, bp) in params.blocks.iter().enumerate().rev() {
        if next_gate > 0 && params.gates[next_gate - 1].0 == i + 1 {
            next_gate -= 1;
            let gg =
                gated_backward(&params.gates[next_gate].1, &cache.gate_caches[next_gate], &g)?;
            acc(&mut grads.gates[next_gate].1.kernels, &gg.kernels);
            g = gg.input;
        }
        let bg = conv_block_backward(bp, &cache.block_caches[i], &g)?;
        acc(&mut grads.blocks[i].kernels, &bg.kernels);
        acc(&mut grads.blocks[i].prelu_alpha, &bg.prelu_alpha);
        acc(&mut grads.blocks[i].bn_gamma, &bg.bn_gamma);
        acc(&mut grads.blocks[i].bn_beta, &bg.bn_beta);
        g = bg.input;
    }
    Ok(grads)
}

fn acc(dst: &mut Tensor, src: &Tensor) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn acc_gru(dst: &mut GruParams, src: &GruParamGrads) {
    acc(&mut dst.w_update, &src.w_update);
    acc(&mut dst.u_update, &src.u_update);
    acc(&mut dst.b_update, &src.b_update);
    acc(&mut dst.w_reset, &src.w_reset);
    acc(&mut dst.u_reset, &src.u_reset);
    acc(&mut dst.b_reset, &src.b_reset);
    acc(&mut dst.w_cand, &src.w_cand);
    acc(&mut dst.u_cand, &src.u_cand);
    acc(&mut dst.b_cand, &src.b_cand);
}

/// Mean CTC loss over a batch with gradients for every parameter.
pub struct BatchLoss {
    pub mean_loss: f64,
    pub grads: ModelParams,
    pub cache: BatchCache,
}

pub fn loss_and_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    images: &[Tensor],
    labels: &[LabelSeq],
    seed: u64,
) -> Result<BatchLoss> {
    if images.len() != labels.len() {
        return Err(Error::dim("loss batch", images.len(), labels.len()));
    }
    let (logits, cache) = forward_batch(params, cfg, images, Mode::Train, seed)?;
    let n = images.len() as f64;
    let results: Vec<Result<(f64, Tensor)>> = logits
        .par_iter()
        .zip(labels.par_iter())
        .map(|(l, lab)| {
            let r = ctc_loss(l.tensor(), lab)?;
            Ok((r.loss, r.grad_logits.scale(1.0 / n)))
        })
        .collect();
    let mut mean_loss = 0.0;
    let mut grad_logits = Vec::with_capacity(logits.len());
    for r in results {
        let (loss, g) = r?;
        mean_loss += loss / n;
        grad_logits.push(g);
    }
    let grads = backward_batch(params, &cache, &grad_logits)?;
    Ok(BatchLoss {
        mean_loss,
        grads,
        cache,
    })
}

/// Update every block's batch-norm running statistics from a training-mode
/// forward cache (the single-writer phase of a step).
pub fn update_batch_norm_stats(params: &mut ModelParams, cache: &BatchCache, momentum: f64) {
    for (bp, bc) in params.blocks.iter_mut().zip(&cache.block_caches) {
        update_running_stats(bp, bc, momentum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn toy_config(classes_with_blank: usize) -> ModelConfig {
        ModelConfig {
            input_h: 16,
            input_w: 32,
            blocks: vec![
                BlockSpec { channels: 3, kernel: (3, 3), stride: (2, 2) },
                BlockSpec { channels: 4, kernel: (2, 4), stride: (2, 2) },
            ],
            gate_after: vec![1],
            feature_dim: 16, // 4 channels × H' 4
            attn_score_dim: 5,
            attn_output_dim: 6,
            attn_tied: false,
            gru_hidden: 4,
            gru_layers: 2,
            classes_with_blank,
            dropout_p: 0.1,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }

    fn images(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[1, cfg.input_h, cfg.input_w], |_| rng.random_range(0.0..1.0)))
            .collect()
    }

    #[test]
    fn shapes_flow_to_logits() {
        let cfg = toy_config(5);
        assert_eq!(cfg.shape_chain(), vec![(3, 8, 16), (4, 4, 8)]);
        assert_eq!(cfg.time_steps(), 8);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let imgs = images(2, &cfg, 2);
        let (logits, _) = forward_batch(&params, &cfg, &imgs, Mode::Infer, 0).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!((logits[0].time_steps(), logits[0].classes()), (8, 5));
    }

    #[test]
    fn infer_is_deterministic_and_batch_independent() {
        let cfg = toy_config(5);
        let params = ModelParams::init(&cfg, 3).unwrap();
        let imgs = images(2, &cfg, 4);
        let (a, _) = forward_batch(&params, &cfg, &imgs, Mode::Infer, 1).unwrap();
        let (b, _) = forward_batch(&params, &cfg, &imgs, Mode::Infer, 999).unwrap();
        assert_eq!(a[0], b[0]);
        // identical images in one batch give identical logit rows
        let twin = vec![imgs[0].clone(), imgs[0].clone()];
        let (c, _) = forward_batch(&params, &cfg, &twin, Mode::Infer, 0).unwrap();
        assert_eq!(c[0], c[1]);
    }

    #[test]
    fn wrong_input_shape_names_the_stage() {
        let cfg = toy_config(5);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let bad = vec![Tensor::zeros(&[1, 8, 8])];
        match forward_batch(&params, &cfg, &bad, Mode::Infer, 0) {
            Err(e) => assert!(e.to_string().contains("input stage"), "{e}"),
            Ok(_) => panic!("expected a dimension error"),
        }
    }

    #[test]
    fn named_covers_every_tensor_and_round_trips() {
        let cfg = toy_config(5);
        let params = ModelParams::init(&cfg, 7).unwrap();
        let named = params.named();
        // 2 blocks × 6 + 1 gate + 4 attention + 2 layers × 2 dirs × 9 + 2
        assert_eq!(named.len(), 12 + 1 + 4 + 36 + 2);
        assert!(named.iter().any(|(n, _)| n == "enc.gate1.kernels"));
        assert!(named.iter().any(|(n, _)| n == "dec.l2.bwd.U_h"));

        let owned: Vec<(String, Tensor)> =
            named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        let rebuilt = ModelParams::from_named(&cfg, &owned).unwrap();
        assert_eq!(rebuilt, params);

        // a missing tensor is a mismatch
        let partial = owned[1..].to_vec();
        assert!(matches!(
            ModelParams::from_named(&cfg, &partial),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = orthogonal(&mut rng, 6);
        let qt = q.transposed2().unwrap();
        let prod = q.matmul(&qt).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod.at2(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = toy_config(4);
        let params = ModelParams::init(&cfg, 13).unwrap();
        let imgs = images(2, &cfg, 14);
        let labels = vec![
            LabelSeq::new(vec![0, 2], 3).unwrap(),
            LabelSeq::new(vec![1], 3).unwrap(),
        ];
        let seed = 99;
        let bl = loss_and_grads(&params, &cfg, &imgs, &labels, seed).unwrap();
        assert!(bl.mean_loss.is_finite() && bl.mean_loss > 0.0);

        // probe a handful of scalar coordinates across parameter groups
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let names: Vec<String> = bl.grads.named().iter().map(|(n, _)| n.clone()).collect();
        let probes = [
            "enc.block1.kernels",
            "enc.gate1.kernels",
            "enc.block2.bn_gamma",
            "attn.W1",
            "attn.Wc",
            "dec.l1.fwd.W_z",
            "dec.l2.bwd.U_h",
            "dec.proj.w",
        ];
        for probe in probes {
            assert!(names.iter().any(|n| n == probe), "unknown probe {probe}");
            let (idx, len) = {
                let named = bl.grads.named();
                let (_, t) = named.iter().find(|(n, _)| n == probe).unwrap();
                (rng.random_range(0..t.len()), t.len())
            };
            let _ = len;
            let analytic = {
                let named = bl.grads.named();
                let (_, t) = named.iter().find(|(n, _)| n == probe).unwrap();
                t.data()[idx]
            };
            let eps = 1e-5;
            let eval = |delta: f64| -> f64 {
                let mut p2 = params.clone();
                for (n, t) in p2.named_mut() {
                    if n == probe {
                        t.data_mut()[idx] += delta;
                    }
                }
                loss_and_grads(&p2, &cfg, &imgs, &labels, seed).unwrap().mean_loss
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "{probe}[{idx}]: analytic {analytic}, fd {fd}"
            );
        }
    }

    #[test]
    fn running_stats_update_moves_toward_batch() {
        let cfg = toy_config(4);
        let mut params = ModelParams::init(&cfg, 21).unwrap();
        let imgs = images(3, &cfg, 22);
        let (_, cache) = forward_batch(&params, &cfg, &imgs, Mode::Train, 5).unwrap();
        let before = params.blocks[0].bn_running_mean.data()[0];
        update_batch_norm_stats(&mut params, &cache, cfg.bn_momentum);
        let after = params.blocks[0].bn_running_mean.data()[0];
        assert!((after - before).abs() > 0.0 || cache.block_caches[0].batch_mean[0] == before);
    }
}
