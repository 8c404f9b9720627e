//! Additive attention over the encoder feature sequence.
//!
//! Scores are `v · tanh(W1·h_t + W2·h̄_s)`, softmax-normalized over source
//! positions into weights α; the context `c_t = Σ α_s h̄_s` is combined with
//! the query through `a_t = tanh(Wc·[c_t; h_t])`. The queries are the encoder
//! steps themselves, re-encoding a `T×D` sequence into a `T×D'` one.

use crate::error::{Error, Result};
use crate::layers::FeatureSequence;
use crate::tensor::{softmax, Tensor};

/// Projection weights of the attention head. With `tied` set, the query
/// projection is reused for the keys (the shared-matrix reading) and
/// `w_keys` is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// score_dim × query_dim
    pub w_query: Tensor,
    /// score_dim × key_dim
    pub w_keys: Tensor,
    /// scoring direction, length score_dim
    pub v: Tensor,
    /// out_dim × (key_dim + query_dim), applied to [c_t; h_t]
    pub w_combine: Tensor,
    pub tied: bool,
}

impl AttentionParams {
    pub fn score_dim(&self) -> usize {
        self.w_query.shape()[0]
    }

    pub fn query_dim(&self) -> usize {
        self.w_query.shape()[1]
    }

    pub fn key_dim(&self) -> usize {
        self.key_proj().shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w_combine.shape()[0]
    }

    fn key_proj(&self) -> &Tensor {
        if self.tied {
            &self.w_query
        } else {
            &self.w_keys
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t, rank) in [
            ("w_query", &self.w_query, 2),
            ("w_keys", &self.w_keys, 2),
            ("v", &self.v, 1),
            ("w_combine", &self.w_combine, 2),
        ] {
            if t.rank() != rank {
                return Err(Error::dim("attention params", format!("{name} {:?}", t.shape()), rank));
            }
        }
        let ds = self.score_dim();
        if self.key_proj().shape()[0] != ds || self.v.shape()[0] != ds {
            return Err(Error::dim(
                "attention score dims",
                format!("W1 {:?} / W2 {:?}", self.w_query.shape(), self.key_proj().shape()),
                format!("v {:?}", self.v.shape()),
            ));
        }
        if self.w_combine.shape()[1] != self.key_dim() + self.query_dim() {
            return Err(Error::dim(
                "attention combine",
                self.w_combine.shape(),
                self.key_dim() + self.query_dim(),
            ));
        }
        Ok(())
    }
}

/// Weights, context, and attention vector produced for one query.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
    pub attended: Vec<f64>,
}

/// Additive-attention energy for one (query, key) pair.
pub fn score(h_t: &[f64], h_s: &[f64], p: &AttentionParams) -> Result<f64> {
    p.validate()?;
    let q = p.w_query.matvec(h_t)?;
    let k = p.key_proj().matvec(h_s)?;
    Ok(q.iter()
        .zip(&k)
        .zip(p.v.data())
        .map(|((a, b), v)| v * (a + b).tanh())
        .sum())
}

/// Attend one query vector over the encoder states.
pub fn attend(
    h_t: &[f64],
    encoder_states: &FeatureSequence,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    p.validate()?;
    if encoder_states.len() == 0 {
        return Err(Error::Usage("attention over an empty source sequence".into()));
    }
    let q = p.w_query.matvec(h_t)?;
    let mut energies = Vec::with_capacity(encoder_states.len());
    for s in 0..encoder_states.len() {
        let k = p.key_proj().matvec(encoder_states.step(s))?;
        let e: f64 = q
            .iter()
            .zip(&k)
            .zip(p.v.data())
            .map(|((a, b), v)| v * (a + b).tanh())
            .sum();
        energies.push(e);
    }
    let weights = softmax(&energies);
    let key_dim = encoder_states.dim();
    let mut context = vec![0.0; key_dim];
    for (s, &w) in weights.iter().enumerate() {
        for (c, &h) in context.iter_mut().zip(encoder_states.step(s)) {
            *c += w * h;
        }
    }
    let mut z = context.clone();
    z.extend_from_slice(h_t);
    let attended: Vec<f64> = p.w_combine.matvec(&z)?.iter().map(|&u| u.tanh()).collect();
    Ok(AttentionOutput {
        weights,
        context,
        attended,
    })
}

/// Forward state for the sequence-level backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    states: FeatureSequence,
    /// W1·h_t per query, T×score_dim
    q: Tensor,
    /// W2·h̄_s per key, T×score_dim
    k: Tensor,
    /// α, T_query × T_source
    alpha: Tensor,
    /// context per query, T×key_dim
    context: Tensor,
    /// tanh outputs, T×out_dim
    attended: Tensor,
}

impl AttentionCache {
    pub fn weights(&self) -> &Tensor {
        &self.alpha
    }
}

/// Re-encode the sequence: every encoder step queries the whole sequence.
pub fn attend_sequence(
    encoder_states: &FeatureSequence,
    p: &AttentionParams,
) -> Result<(FeatureSequence, AttentionCache)> {
    p.validate()?;
    let t_len = encoder_states.len();
    if t_len == 0 {
        return Err(Error::Usage("attention over an empty source sequence".into()));
    }
    let ds = p.score_dim();
    let q = project_all(&p.w_query, encoder_states)?;
    let k = project_all(p.key_proj(), encoder_states)?;

    let key_dim = encoder_states.dim();
    let mut alpha = Tensor::zeros(&[t_len, t_len]);
    let mut context = Tensor::zeros(&[t_len, key_dim]);
    let mut attended = Tensor::zeros(&[t_len, p.out_dim()]);
    let v = p.v.data();
    for t in 0..t_len {
        let qt = q.row(t);
        let mut energies = Vec::with_capacity(t_len);
        for s in 0..t_len {
            let ks = k.row(s);
            let mut e = 0.0;
            for d in 0..ds {
                e += v[d] * (qt[d] + ks[d]).tanh();
            }
            energies.push(e);
        }
        let w = softmax(&energies);
        for s in 0..t_len {
            alpha.set2(t, s, w[s]);
            let hs = encoder_states.step(s);
            for d in 0..key_dim {
                context.data_mut()[t * key_dim + d] += w[s] * hs[d];
            }
        }
        let mut z = context.row(t).to_vec();
        z.extend_from_slice(encoder_states.step(t));
        let a = p.w_combine.matvec(&z)?;
        for (d, &u) in a.iter().enumerate() {
            attended.set2(t, d, u.tanh());
        }
    }
    let out = FeatureSequence::new(attended.clone())?;
    Ok((
        out,
        AttentionCache {
            states: encoder_states.clone(),
            q,
            k,
            alpha,
            context,
            attended,
        },
    ))
}

fn project_all(w: &Tensor, states: &FeatureSequence) -> Result<Tensor> {
    let t_len = states.len();
    let out_dim = w.shape()[0];
    let mut out = Tensor::zeros(&[t_len, out_dim]);
    for t in 0..t_len {
        let p = w.matvec(states.step(t))?;
        out.data_mut()[t * out_dim..(t + 1) * out_dim].copy_from_slice(&p);
    }
    Ok(out)
}

/// Parameter gradients of the attention head.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub states: Tensor, // T × key_dim
    pub w_query: Tensor,
    pub w_keys: Tensor,
    pub v: Tensor,
    pub w_combine: Tensor,
}

/// Backward through the whole re-encoding: `grad_attended` is `T × out_dim`
/// (gradient wrt a_t); `grad_context`, when given, adds a direct gradient on
/// each query's context vector.
pub fn attend_sequence_backward(
    p: &AttentionParams,
    cache: &AttentionCache,
    grad_attended: &Tensor,
    grad_context: Option<&Tensor>,
) -> Result<AttentionGrads> {
    if grad_attended.shape() != cache.attended.shape() {
        return Err(Error::dim("attention backward", grad_attended.shape(), cache.attended.shape()));
    }
    let t_len = cache.states.len();
    let key_dim = cache.states.dim();
    let query_dim = cache.states.dim();
    let ds = p.score_dim();
    let v = p.v.data();

    let mut g_states = Tensor::zeros(&[t_len, key_dim]);
    let mut g_w_query = Tensor::zeros(p.w_query.shape());
    let mut g_w_keys = Tensor::zeros(p.w_keys.shape());
    let mut g_v = Tensor::zeros(p.v.shape());
    let mut g_w_combine = Tensor::zeros(p.w_combine.shape());

    // accumulated gradient on the score-space projections
    let mut g_q = Tensor::zeros(&[t_len, ds]);
    let mut g_k = Tensor::zeros(&[t_len, ds]);

    for t in 0..t_len {
        // back through a_t = tanh(Wc [c; h])
        let a = cache.attended.row(t);
        let du: Vec<f64> = grad_attended
            .row(t)
            .iter()
            .zip(a)
            .map(|(&g, &y)| g * (1.0 - y * y))
            .collect();
        let mut z = cache.context.row(t).to_vec();
        z.extend_from_slice(cache.states.step(t));
        // dWc += du ⊗ z; dz = Wc^T du
        for (i, &dui) in du.iter().enumerate() {
            if dui != 0.0 {
                let row = &mut g_w_combine.data_mut()[i * z.len()..(i + 1) * z.len()];
                for (r, &zj) in row.iter_mut().zip(&z) {
                    *r += dui * zj;
                }
            }
        }
        let dz = p.w_combine.matvec_t(&du)?;
        let mut dc = dz[..key_dim].to_vec();
        let dh_direct = &dz[key_dim..key_dim + query_dim];
        for (d, &g) in dh_direct.iter().enumerate() {
            g_states.data_mut()[t * key_dim + d] += g;
        }
        if let Some(gc) = grad_context {
            for (d, v) in dc.iter_mut().enumerate() {
                *v += gc.at2(t, d);
            }
        }

        // c_t = Σ α_s h̄_s
        let alpha_row = cache.alpha.row(t);
        let mut d_alpha = vec![0.0; t_len];
        for s in 0..t_len {
            let hs = cache.states.step(s);
            let mut acc = 0.0;
            for d in 0..key_dim {
                g_states.data_mut()[s * key_dim + d] += alpha_row[s] * dc[d];
                acc += dc[d] * hs[d];
            }
            d_alpha[s] = acc;
        }

        // softmax Jacobian: de_s = α_s (dα_s − Σ_r α_r dα_r)
        let dot: f64 = alpha_row.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let qt = cache.q.row(t);
        for s in 0..t_len {
            let de = alpha_row[s] * (d_alpha[s] - dot);
            if de == 0.0 {
                continue;
            }
            let ks = cache.k.row(s);
            for d in 0..ds {
                let m = (qt[d] + ks[d]).tanh();
                g_v.data_mut()[d] += de * m;
                let dpre = de * v[d] * (1.0 - m * m);
                g_q.data_mut()[t * ds + d] += dpre;
                g_k.data_mut()[s * ds + d] += dpre;
            }
        }
    }

    // q_t = W1 h_t and k_s = W2 h̄_s (or W1 when tied)
    for t in 0..t_len {
        let h = cache.states.step(t);
        let dq = g_q.row(t);
        for d in 0..ds {
            if dq[d] != 0.0 {
                let row = &mut g_w_query.data_mut()[d * query_dim..(d + 1) * query_dim];
                for (r, &hj) in row.iter_mut().zip(h) {
                    *r += dq[d] * hj;
                }
            }
        }
        let back = p.w_query.matvec_t(dq)?;
        for (d, &g) in back.iter().enumerate() {
            g_states.data_mut()[t * key_dim + d] += g;
        }

        let dk = g_k.row(t);
        let key_w = if p.tied { &mut g_w_query } else { &mut g_w_keys };
        for d in 0..ds {
            if dk[d] != 0.0 {
                let row = &mut key_w.data_mut()[d * key_dim..(d + 1) * key_dim];
                for (r, &hj) in row.iter_mut().zip(h) {
                    *r += dk[d] * hj;
                }
            }
        }
        let back = p.key_proj().matvec_t(dk)?;
        for (d, &g) in back.iter().enumerate() {
            g_states.data_mut()[t * key_dim + d] += g;
        }
    }

    Ok(AttentionGrads {
        states: g_states,
        w_query: g_w_query,
        w_keys: g_w_keys,
        v: g_v,
        w_combine: g_w_combine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grads_close};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn params(rng: &mut ChaCha8Rng, dim: usize, ds: usize, out: usize) -> AttentionParams {
        AttentionParams {
            w_query: rand_tensor(rng, &[ds, dim]),
            w_keys: rand_tensor(rng, &[ds, dim]),
            v: rand_tensor(rng, &[ds]),
            w_combine: rand_tensor(rng, &[out, 2 * dim]),
            tied: false,
        }
    }

    fn seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new(rand_tensor(rng, &[t, d])).unwrap()
    }

    fn identity(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn score_zero_direction_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = params(&mut rng, 3, 4, 2);
        p.v = Tensor::zeros(&[4]);
        let s = score(&[0.3, -0.2, 0.9], &[1.0, 0.0, -1.0], &p).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn score_zero_vectors_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params(&mut rng, 3, 4, 2);
        let s = score(&[0.0; 3], &[0.0; 3], &p).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn score_hand_evaluated_two_dim() {
        // W1 = W2 = I, v = [1,1], h_t = [0.1, 0], h̄_s = [0.2, 0]
        let p = AttentionParams {
            w_query: identity(2),
            w_keys: identity(2),
            v: Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(),
            w_combine: Tensor::zeros(&[2, 4]),
            tied: false,
        };
        let s = score(&[0.1, 0.0], &[0.2, 0.0], &p).unwrap();
        assert!((s - 0.3f64.tanh()).abs() < 1e-12);
        assert!((s - 0.29131).abs() < 1e-5);

        // the tied flag reproduces the shared-matrix reading
        let tied = AttentionParams { tied: true, ..p };
        assert!((score(&[0.1, 0.0], &[0.2, 0.0], &tied).unwrap() - 0.3f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = params(&mut rng, 3, 4, 2);
        p.v = Tensor::zeros(&[4]); // every score is 0
        let states = seq(&mut rng, 5, 3);
        let out = attend(&[0.1, 0.2, 0.3], &states, &p).unwrap();
        for &w in &out.weights {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_source_step_pins_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(&mut rng, 3, 4, 2);
        let states = seq(&mut rng, 1, 3);
        let out = attend(&[0.5, -0.5, 0.0], &states, &p).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        for (c, h) in out.context.iter().zip(states.step(0)) {
            assert!((c - h).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_one_two_three() {
        let w = softmax(&[1.0, 2.0, 3.0]);
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one_and_lie_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = rng.random_range(1..8);
            let p = params(&mut rng, 3, 4, 2);
            let states = seq(&mut rng, t, 3);
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = attend(&h, &states, &p).unwrap();
            let sum: f64 = out.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(out.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.random_range(1..10);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(-100.0..100.0);
            let shifted: Vec<f64> = scores.iter().map(|&s| s + c).collect();
            for (a, b) in softmax(&scores).iter().zip(softmax(&shifted)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_stays_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t = rng.random_range(1..6);
            let p = params(&mut rng, 3, 4, 2);
            let states = seq(&mut rng, t, 3);
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = attend(&h, &states, &p).unwrap();
            for d in 0..3 {
                let lo = (0..t).map(|s| states.step(s)[d]).fold(f64::INFINITY, f64::min);
                let hi = (0..t).map(|s| states.step(s)[d]).fold(f64::NEG_INFINITY, f64::max);
                assert!(out.context[d] >= lo - 1e-12 && out.context[d] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn empty_source_is_a_usage_error() {
        // FeatureSequence cannot be empty by construction; the sequence-level
        // entry point still guards the invariant for callers.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = params(&mut rng, 3, 4, 2);
        assert!(FeatureSequence::new(Tensor::zeros(&[1, 3])).is_ok());
        let states = seq(&mut rng, 2, 3);
        assert!(attend_sequence(&states, &p).is_ok());
    }

    #[test]
    fn default_shape_contract_re_encodes_128x256() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AttentionParams {
            w_query: rand_tensor(&mut rng, &[128, 256]),
            w_keys: rand_tensor(&mut rng, &[128, 256]),
            v: rand_tensor(&mut rng, &[128]),
            w_combine: rand_tensor(&mut rng, &[256, 512]),
            tied: false,
        };
        let states = seq(&mut rng, 128, 256);
        let (out, _) = attend_sequence(&states, &p).unwrap();
        assert_eq!((out.len(), out.dim()), (128, 256));
    }

    #[test]
    fn backward_zero_grad_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = params(&mut rng, 3, 4, 2);
        let states = seq(&mut rng, 3, 3);
        let (out, cache) = attend_sequence(&states, &p).unwrap();
        let g = attend_sequence_backward(&p, &cache, &Tensor::zeros(out.tensor().shape()), None)
            .unwrap();
        assert_eq!(g.states, Tensor::zeros(&[3, 3]));
        assert_eq!(g.v, Tensor::zeros(&[4]));
        assert_eq!(g.w_query, Tensor::zeros(&[4, 3]));
    }

    #[test]
    fn single_step_backward_flows_only_through_combine_paths() {
        // with T=1 the softmax is pinned at α=1; the score path receives no
        // gradient, so v stays untouched
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = params(&mut rng, 3, 4, 2);
        let states = seq(&mut rng, 1, 3);
        let (out, cache) = attend_sequence(&states, &p).unwrap();
        let g =
            attend_sequence_backward(&p, &cache, &Tensor::full(out.tensor().shape(), 1.0), None)
                .unwrap();
        assert_eq!(g.v, Tensor::zeros(&[4]));
        assert!(g.states.data().iter().any(|&x| x != 0.0));
    }

    fn check_attention_gradients(tied: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (t, dim, ds, out_dim) = (3, 4, 3, 2);
        let mut p = params(&mut rng, dim, ds, out_dim);
        p.tied = tied;
        let states = seq(&mut rng, t, dim);
        let proj = rand_tensor(&mut rng, &[t, out_dim]);
        let (_, cache) = attend_sequence(&states, &p).unwrap();
        let g = attend_sequence_backward(&p, &cache, &proj, None).unwrap();

        let fd_states = finite_diff_grad(
            &mut |x| {
                let s = FeatureSequence::new(x.clone())?;
                Ok(attend_sequence(&s, &p)?.0.tensor().dot(&proj)?)
            },
            states.tensor(),
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.states, &fd_states, 1e-4));

        let check = |set: &dyn Fn(&mut AttentionParams, &Tensor), at: &Tensor, analytic: &Tensor| {
            let mut f = |x: &Tensor| -> crate::error::Result<f64> {
                let mut q = p.clone();
                set(&mut q, x);
                Ok(attend_sequence(&states, &q)?.0.tensor().dot(&proj)?)
            };
            let fd = finite_diff_grad(&mut f, at, 1e-5).unwrap();
            assert!(grads_close(analytic, &fd, 1e-4));
        };
        check(&|q, x| q.w_query = x.clone(), &p.w_query, &g.w_query);
        if !tied {
            check(&|q, x| q.w_keys = x.clone(), &p.w_keys, &g.w_keys);
        }
        check(&|q, x| q.v = x.clone(), &p.v, &g.v);
        check(&|q, x| q.w_combine = x.clone(), &p.w_combine, &g.w_combine);
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_attention_gradients(false);
    }

    #[test]
    fn backward_matches_finite_differences_tied() {
        check_attention_gradients(true);
    }

    #[test]
    fn backward_accepts_direct_context_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (t, dim) = (3, 4);
        let p = params(&mut rng, dim, 3, 2);
        let states = seq(&mut rng, t, dim);
        let gc = rand_tensor(&mut rng, &[t, dim]);
        let (out, cache) = attend_sequence(&states, &p).unwrap();
        let zero_a = Tensor::zeros(out.tensor().shape());
        let g = attend_sequence_backward(&p, &cache, &zero_a, Some(&gc)).unwrap();

        // objective: Σ_t context_t · gc_t, with contexts recomputed per probe
        let fd = finite_diff_grad(
            &mut |x| {
                let s = FeatureSequence::new(x.clone())?;
                let (_, c) = attend_sequence(&s, &p)?;
                c.context.dot(&gc)
            },
            states.tensor(),
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.states, &fd, 1e-4));
    }
}
