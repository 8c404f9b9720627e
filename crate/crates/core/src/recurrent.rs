//! GRU cell and bidirectional GRU layer, with full backpropagation through
//! time, mapping the attended feature sequence to per-step class logits.
//!
//! Cell equations (update gate z, reset gate r):
//!   z = σ(W_z·x + U_z·h + b_z)
//!   r = σ(W_r·x + U_r·h + b_r)
//!   h̃ = tanh(W_h·x + U_h·(r⊙h) + b_h)
//!   h' = (1−z)⊙h + z⊙h̃

use crate::error::{Error, Result};
use crate::layers::FeatureSequence;
use crate::tensor::{sigmoid, Tensor};

/// One direction's GRU weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_update: Tensor, // H × I
    pub u_update: Tensor, // H × H
    pub b_update: Tensor, // [H]
    pub w_reset: Tensor,
    pub u_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
}

impl GruParams {
    pub fn hidden(&self) -> usize {
        self.w_update.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_update.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let i = self.input_dim();
        for (name, t, want) in [
            ("w_update", &self.w_update, [h, i]),
            ("w_reset", &self.w_reset, [h, i]),
            ("w_cand", &self.w_cand, [h, i]),
            ("u_update", &self.u_update, [h, h]),
            ("u_reset", &self.u_reset, [h, h]),
            ("u_cand", &self.u_cand, [h, h]),
        ] {
            if t.shape() != want {
                return Err(Error::dim("gru params", format!("{name} {:?}", t.shape()), want));
            }
        }
        for (name, t) in [
            ("b_update", &self.b_update),
            ("b_reset", &self.b_reset),
            ("b_cand", &self.b_cand),
        ] {
            if t.shape() != [h] {
                return Err(Error::dim("gru params", format!("{name} {:?}", t.shape()), h));
            }
        }
        Ok(())
    }
}

/// Gradients mirroring [`GruParams`].
#[derive(Debug, Clone)]
pub struct GruParamGrads {
    pub w_update: Tensor,
    pub u_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub u_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
}

impl GruParamGrads {
    fn zeros_like(p: &GruParams) -> GruParamGrads {
        GruParamGrads {
            w_update: Tensor::zeros(p.w_update.shape()),
            u_update: Tensor::zeros(p.u_update.shape()),
            b_update: Tensor::zeros(p.b_update.shape()),
            w_reset: Tensor::zeros(p.w_reset.shape()),
            u_reset: Tensor::zeros(p.u_reset.shape()),
            b_reset: Tensor::zeros(p.b_reset.shape()),
            w_cand: Tensor::zeros(p.w_cand.shape()),
            u_cand: Tensor::zeros(p.u_cand.shape()),
            b_cand: Tensor::zeros(p.b_cand.shape()),
        }
    }
}

/// Intermediates of one cell application.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    rh: Vec<f64>,
}

/// One GRU cell application.
pub fn gru_step(x: &[f64], h_prev: &[f64], p: &GruParams) -> Result<Vec<f64>> {
    Ok(gru_step_cached(x, h_prev, p)?.0)
}

pub fn gru_step_cached(
    x: &[f64],
    h_prev: &[f64],
    p: &GruParams,
) -> Result<(Vec<f64>, GruStepCache)> {
    p.validate()?;
    if x.len() != p.input_dim() || h_prev.len() != p.hidden() {
        return Err(Error::dim(
            "gru_step",
            format!("x {} / h {}", x.len(), h_prev.len()),
            format!("input {} / hidden {}", p.input_dim(), p.hidden()),
        ));
    }
    let h = p.hidden();
    let mut z = p.w_update.matvec(x)?;
    let uz = p.u_update.matvec(h_prev)?;
    let mut r = p.w_reset.matvec(x)?;
    let ur = p.u_reset.matvec(h_prev)?;
    for i in 0..h {
        z[i] = sigmoid(z[i] + uz[i] + p.b_update.data()[i]);
        r[i] = sigmoid(r[i] + ur[i] + p.b_reset.data()[i]);
    }
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut cand = p.w_cand.matvec(x)?;
    let uc = p.u_cand.matvec(&rh)?;
    for i in 0..h {
        cand[i] = (cand[i] + uc[i] + p.b_cand.data()[i]).tanh();
    }
    let h_t: Vec<f64> = (0..h)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * cand[i])
        .collect();
    let cache = GruStepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        cand,
        rh,
    };
    Ok((h_t, cache))
}

/// Backward through one cell: gradients for the input, the previous state,
/// and all nine parameter tensors (accumulated into `grads`).
pub fn gru_step_backward(
    p: &GruParams,
    cache: &GruStepCache,
    grad_h: &[f64],
    grads: &mut GruParamGrads,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = p.hidden();
    if grad_h.len() != h {
        return Err(Error::dim("gru_step_backward", grad_h.len(), h));
    }
    let (z, r, cand) = (&cache.z, &cache.r, &cache.cand);

    // h' = (1−z)h + z·h̃
    let mut d_z = vec![0.0; h];
    let mut d_cand = vec![0.0; h];
    let mut d_h_prev = vec![0.0; h];
    for i in 0..h {
        d_z[i] = grad_h[i] * (cand[i] - cache.h_prev[i]);
        d_cand[i] = grad_h[i] * z[i];
        d_h_prev[i] = grad_h[i] * (1.0 - z[i]);
    }

    // pre-activations
    let du_c: Vec<f64> = (0..h).map(|i| d_cand[i] * (1.0 - cand[i] * cand[i])).collect();
    let d_rh = p.u_cand.matvec_t(&du_c)?;
    let mut d_r = vec![0.0; h];
    for i in 0..h {
        d_r[i] = d_rh[i] * cache.h_prev[i];
        d_h_prev[i] += d_rh[i] * r[i];
    }
    let du_r: Vec<f64> = (0..h).map(|i| d_r[i] * r[i] * (1.0 - r[i])).collect();
    let du_z: Vec<f64> = (0..h).map(|i| d_z[i] * z[i] * (1.0 - z[i])).collect();

    outer_acc(&mut grads.w_cand, &du_c, &cache.x);
    outer_acc(&mut grads.u_cand, &du_c, &cache.rh);
    vec_acc(&mut grads.b_cand, &du_c);
    outer_acc(&mut grads.w_reset, &du_r, &cache.x);
    outer_acc(&mut grads.u_reset, &du_r, &cache.h_prev);
    vec_acc(&mut grads.b_reset, &du_r);
    outer_acc(&mut grads.w_update, &du_z, &cache.x);
    outer_acc(&mut grads.u_update, &du_z, &cache.h_prev);
    vec_acc(&mut grads.b_update, &du_z);

    let mut d_x = p.w_cand.matvec_t(&du_c)?;
    for (d, v) in d_x.iter_mut().zip(p.w_reset.matvec_t(&du_r)?) {
        *d += v;
    }
    for (d, v) in d_x.iter_mut().zip(p.w_update.matvec_t(&du_z)?) {
        *d += v;
    }
    for (d, v) in d_h_prev.iter_mut().zip(p.u_reset.matvec_t(&du_r)?) {
        *d += v;
    }
    for (d, v) in d_h_prev.iter_mut().zip(p.u_update.matvec_t(&du_z)?) {
        *d += v;
    }
    Ok((d_x, d_h_prev))
}

fn outer_acc(m: &mut Tensor, a: &[f64], b: &[f64]) {
    let cols = b.len();
    let data = m.data_mut();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &mut data[i * cols..(i + 1) * cols];
        for (r, &bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

fn vec_acc(v: &mut Tensor, a: &[f64]) {
    for (d, &s) in v.data_mut().iter_mut().zip(a) {
        *d += s;
    }
}

// ---------------------------------------------------------------------------
// Bidirectional layer
// ---------------------------------------------------------------------------

/// Per-time-step class logits, `T × (|charset|+1)` with blank last.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix(Tensor);

impl LogitsMatrix {
    pub fn new(t: Tensor) -> Result<LogitsMatrix> {
        if t.rank() != 2 {
            return Err(Error::dim("logits", t.shape(), "rank 2"));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("logits matrix".into()));
        }
        Ok(LogitsMatrix(t))
    }

    pub fn time_steps(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Final linear map from concatenated states to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub weight: Tensor, // K × 2H
    pub bias: Tensor,   // [K]
}

#[derive(Debug, Clone)]
pub struct BiGruCache {
    fwd_steps: Vec<GruStepCache>,
    bwd_steps: Vec<GruStepCache>,
    /// fwd state after consuming x_t, T×H
    pub fwd_states: Tensor,
    /// bwd state after consuming x_t (scanning right to left), T×H
    pub bwd_states: Tensor,
    concat: Tensor, // T × 2H
}

impl BiGruCache {
    pub fn concat_states(&self) -> &Tensor {
        &self.concat
    }
}

/// Run both directions from zero initial states and return the concatenated
/// `T × 2H` state sequence.
pub fn bigru_layer_forward(
    seq: &FeatureSequence,
    fwd: &GruParams,
    bwd: &GruParams,
) -> Result<(FeatureSequence, BiGruCache)> {
    fwd.validate()?;
    bwd.validate()?;
    let t_len = seq.len();
    let h = fwd.hidden();
    if bwd.hidden() != h || fwd.input_dim() != seq.dim() || bwd.input_dim() != seq.dim() {
        return Err(Error::dim(
            "bigru",
            format!("seq dim {}", seq.dim()),
            format!("fwd {}×{} bwd {}×{}", fwd.hidden(), fwd.input_dim(), bwd.hidden(), bwd.input_dim()),
        ));
    }

    let mut fwd_states = Tensor::zeros(&[t_len, h]);
    let mut fwd_steps = Vec::with_capacity(t_len);
    let mut state = vec![0.0; h];
    for t in 0..t_len {
        let (next, cache) = gru_step_cached(seq.step(t), &state, fwd)?;
        fwd_states.data_mut()[t * h..(t + 1) * h].copy_from_slice(&next);
        fwd_steps.push(cache);
        state = next;
    }

    let mut bwd_states = Tensor::zeros(&[t_len, h]);
    let mut bwd_steps = Vec::with_capacity(t_len);
    let mut state = vec![0.0; h];
    for t in (0..t_len).rev() {
        let (next, cache) = gru_step_cached(seq.step(t), &state, bwd)?;
        bwd_states.data_mut()[t * h..(t + 1) * h].copy_from_slice(&next);
        bwd_steps.push(cache); // stored in scan order (t = T-1 .. 0)
        state = next;
    }

    let mut concat = Tensor::zeros(&[t_len, 2 * h]);
    for t in 0..t_len {
        concat.data_mut()[t * 2 * h..t * 2 * h + h]
            .copy_from_slice(&fwd_states.data()[t * h..(t + 1) * h]);
        concat.data_mut()[t * 2 * h + h..(t + 1) * 2 * h]
            .copy_from_slice(&bwd_states.data()[t * h..(t + 1) * h]);
    }
    Ok((
        FeatureSequence::new(concat.clone())?,
        BiGruCache {
            fwd_steps,
            bwd_steps,
            fwd_states,
            bwd_states,
            concat,
        },
    ))
}

/// BPTT through both directions given the gradient on the concatenated
/// states. Returns the sequence gradient and per-direction parameter grads.
pub fn bigru_layer_backward(
    fwd: &GruParams,
    bwd: &GruParams,
    cache: &BiGruCache,
    grad_concat: &Tensor,
) -> Result<(Tensor, GruParamGrads, GruParamGrads)> {
    let t_len = cache.fwd_steps.len();
    let h = fwd.hidden();
    if grad_concat.shape() != [t_len, 2 * h] {
        return Err(Error::dim("bigru backward", grad_concat.shape(), [t_len, 2 * h]));
    }
    let in_dim = fwd.input_dim();
    let mut grad_seq = Tensor::zeros(&[t_len, in_dim]);
    let mut fwd_grads = GruParamGrads::zeros_like(fwd);
    let mut bwd_grads = GruParamGrads::zeros_like(bwd);

    // forward direction, unrolled in reverse
    let mut carry = vec![0.0; h];
    for t in (0..t_len).rev() {
        let mut g: Vec<f64> = grad_concat.row(t)[..h].to_vec();
        for (a, b) in g.iter_mut().zip(&carry) {
            *a += *b;
        }
        let (dx, dh_prev) = gru_step_backward(fwd, &cache.fwd_steps[t], &g, &mut fwd_grads)?;
        for (d, v) in grad_seq.data_mut()[t * in_dim..(t + 1) * in_dim].iter_mut().zip(dx) {
            *d += v;
        }
        carry = dh_prev;
    }

    // The backward direction scanned t = T-1..0, so its BPTT unrolls from
    // t = 0 (its last step) upward. bwd_steps[i] belongs to t = T-1-i.
    let mut carry = vec![0.0; h];
    let mut order: Vec<(usize, usize)> = (0..t_len).rev().enumerate().collect();
    order.reverse();
    for (step_idx, t) in order {
        let mut g: Vec<f64> = grad_concat.row(t)[h..].to_vec();
        for (a, b) in g.iter_mut().zip(&carry) {
            *a += *b;
        }
        let (dx, dh_prev) = gru_step_backward(bwd, &cache.bwd_steps[step_idx], &g, &mut bwd_grads)?;
        for (d, v) in grad_seq.data_mut()[t * in_dim..(t + 1) * in_dim].iter_mut().zip(dx) {
            *d += v;
        }
        carry = dh_prev;
    }

    Ok((grad_seq, fwd_grads, bwd_grads))
}

/// Single bidirectional layer followed by the class projection.
pub fn bigru_forward(
    seq: &FeatureSequence,
    fwd: &GruParams,
    bwd: &GruParams,
    proj: &ProjectionParams,
) -> Result<(LogitsMatrix, BiGruCache)> {
    let (states, cache) = bigru_layer_forward(seq, fwd, bwd)?;
    let logits = project_states(states.tensor(), proj)?;
    Ok((logits, cache))
}

pub fn project_states(states: &Tensor, proj: &ProjectionParams) -> Result<LogitsMatrix> {
    let k = proj.weight.shape()[0];
    if proj.weight.shape()[1] != states.cols() || proj.bias.shape() != [k] {
        return Err(Error::dim("projection", proj.weight.shape(), states.shape()));
    }
    let t_len = states.rows();
    let mut out = Tensor::zeros(&[t_len, k]);
    for t in 0..t_len {
        let y = proj.weight.matvec(states.row(t))?;
        for (c, v) in y.iter().enumerate() {
            out.set2(t, c, v + proj.bias.data()[c]);
        }
    }
    LogitsMatrix::new(out)
}

/// Gradients of [`project_states`]: wrt states, weight, bias.
pub fn project_states_backward(
    states: &Tensor,
    proj: &ProjectionParams,
    grad_logits: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let t_len = states.rows();
    let k = proj.weight.shape()[0];
    if grad_logits.shape() != [t_len, k] {
        return Err(Error::dim("projection backward", grad_logits.shape(), [t_len, k]));
    }
    let mut g_states = Tensor::zeros(states.shape());
    let mut g_w = Tensor::zeros(proj.weight.shape());
    let mut g_b = Tensor::zeros(proj.bias.shape());
    let width = states.cols();
    for t in 0..t_len {
        let gl = grad_logits.row(t);
        let back = proj.weight.matvec_t(gl)?;
        g_states.data_mut()[t * width..(t + 1) * width].copy_from_slice(&back);
        outer_acc(&mut g_w, gl, states.row(t));
        vec_acc(&mut g_b, gl);
    }
    Ok((g_states, g_w, g_b))
}

/// Full backward of [`bigru_forward`].
pub fn bigru_backward(
    fwd: &GruParams,
    bwd: &GruParams,
    proj: &ProjectionParams,
    cache: &BiGruCache,
    grad_logits: &Tensor,
) -> Result<BiGruGrads> {
    let (g_concat, g_w, g_b) = project_states_backward(&cache.concat, proj, grad_logits)?;
    let (g_seq, fwd_grads, bwd_grads) = bigru_layer_backward(fwd, bwd, cache, &g_concat)?;
    Ok(BiGruGrads {
        seq: g_seq,
        fwd: fwd_grads,
        bwd: bwd_grads,
        proj_weight: g_w,
        proj_bias: g_b,
    })
}

#[derive(Debug, Clone)]
pub struct BiGruGrads {
    pub seq: Tensor,
    pub fwd: GruParamGrads,
    pub bwd: GruParamGrads,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
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

    fn params(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruParams {
        GruParams {
            w_update: rand_tensor(rng, &[hidden, input]),
            u_update: rand_tensor(rng, &[hidden, hidden]),
            b_update: rand_tensor(rng, &[hidden]),
            w_reset: rand_tensor(rng, &[hidden, input]),
            u_reset: rand_tensor(rng, &[hidden, hidden]),
            b_reset: rand_tensor(rng, &[hidden]),
            w_cand: rand_tensor(rng, &[hidden, input]),
            u_cand: rand_tensor(rng, &[hidden, hidden]),
            b_cand: rand_tensor(rng, &[hidden]),
        }
    }

    fn zero_params(input: usize, hidden: usize) -> GruParams {
        GruParams {
            w_update: Tensor::zeros(&[hidden, input]),
            u_update: Tensor::zeros(&[hidden, hidden]),
            b_update: Tensor::zeros(&[hidden]),
            w_reset: Tensor::zeros(&[hidden, input]),
            u_reset: Tensor::zeros(&[hidden, hidden]),
            b_reset: Tensor::zeros(&[hidden]),
            w_cand: Tensor::zeros(&[hidden, input]),
            u_cand: Tensor::zeros(&[hidden, hidden]),
            b_cand: Tensor::zeros(&[hidden]),
        }
    }

    #[test]
    fn zero_params_halve_previous_state() {
        // z = σ(0) = 0.5, h̃ = tanh(0) = 0, so h' = 0.5·h
        let p = zero_params(2, 3);
        let h_prev = [0.4, -0.8, 1.2];
        let h = gru_step(&[0.1, 0.2], &h_prev, &p).unwrap();
        for (a, b) in h.iter().zip(h_prev) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_update_gate_copies_state() {
        let mut p = zero_params(2, 3);
        p.b_update = Tensor::full(&[3], -40.0); // z ≈ 0
        let h_prev = [0.4, -0.8, 1.2];
        let h = gru_step(&[0.5, -0.5], &h_prev, &p).unwrap();
        for (a, b) in h.iter().zip(h_prev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_matches_scalar_expansion() {
        // independent per-coordinate evaluation of the three equations
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(&mut rng, 3, 3);
        let x = [0.3, -0.6, 0.9];
        let h_prev = [-0.2, 0.5, 0.1];
        let h = gru_step(&x, &h_prev, &p).unwrap();
        for i in 0..3 {
            let dotr = |m: &Tensor, v: &[f64]| -> f64 {
                (0..v.len()).map(|j| m.at2(i, j) * v[j]).sum()
            };
            let z = crate::tensor::sigmoid(
                dotr(&p.w_update, &x) + dotr(&p.u_update, &h_prev) + p.b_update.data()[i],
            );
            let r_all: Vec<f64> = (0..3)
                .map(|k| {
                    let dk = |m: &Tensor, v: &[f64]| (0..v.len()).map(|j| m.at2(k, j) * v[j]).sum::<f64>();
                    crate::tensor::sigmoid(dk(&p.w_reset, &x) + dk(&p.u_reset, &h_prev) + p.b_reset.data()[k])
                })
                .collect();
            let rh: Vec<f64> = r_all.iter().zip(h_prev).map(|(a, b)| a * b).collect();
            let cand = (dotr(&p.w_cand, &x) + dotr(&p.u_cand, &rh) + p.b_cand.data()[i]).tanh();
            let expect = (1.0 - z) * h_prev[i] + z * cand;
            assert!((h[i] - expect).abs() < 1e-12, "coord {i}");
        }
    }

    #[test]
    fn state_is_convex_combination_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = params(&mut rng, 2, 4);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h_prev: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (h, cache) = gru_step_cached(&x, &h_prev, &p).unwrap();
            for i in 0..4 {
                let lo = h_prev[i].min(cache.cand[i]);
                let hi = h_prev[i].max(cache.cand[i]);
                assert!(h[i] >= lo - 1e-12 && h[i] <= hi + 1e-12);
                assert!(h[i].abs() <= h_prev[i].abs().max(1.0) + 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = zero_params(2, 3);
        assert!(gru_step(&[0.0; 5], &[0.0; 3], &p).is_err());
        assert!(gru_step(&[0.0; 2], &[0.0; 4], &p).is_err());
    }

    fn proj(rng: &mut ChaCha8Rng, hidden2: usize, k: usize) -> ProjectionParams {
        ProjectionParams {
            weight: rand_tensor(rng, &[k, hidden2]),
            bias: rand_tensor(rng, &[k]),
        }
    }

    #[test]
    fn single_step_output_is_projected_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fwd = params(&mut rng, 3, 2);
        let bwd = params(&mut rng, 3, 2);
        let pr = proj(&mut rng, 4, 5);
        let seq = FeatureSequence::new(rand_tensor(&mut rng, &[1, 3])).unwrap();
        let (logits, _) = bigru_forward(&seq, &fwd, &bwd, &pr).unwrap();

        let h_f = gru_step(seq.step(0), &[0.0, 0.0], &fwd).unwrap();
        let h_b = gru_step(seq.step(0), &[0.0, 0.0], &bwd).unwrap();
        let mut concat = h_f.clone();
        concat.extend(h_b);
        let want = pr.weight.matvec(&concat).unwrap();
        for c in 0..5 {
            assert!((logits.tensor().at2(0, c) - (want[c] + pr.bias.data()[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn palindrome_with_shared_params_is_time_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(&mut rng, 2, 3);
        let rows = [[0.3, -0.1], [0.7, 0.2], [0.3, -0.1]]; // palindrome, T=3
        let seq = FeatureSequence::new(
            Tensor::from_vec(&[3, 2], rows.iter().flatten().copied().collect()).unwrap(),
        )
        .unwrap();
        let (_, cache) = bigru_layer_forward(&seq, &p, &p).unwrap();
        for t in 0..3 {
            let f = &cache.fwd_states.row(t);
            let b = &cache.bwd_states.row(2 - t);
            for (a, c) in f.iter().zip(b.iter()) {
                assert!((a - c).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reversing_input_and_swapping_directions_reverses_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fwd = params(&mut rng, 2, 3);
        let bwd = params(&mut rng, 2, 3);
        let x = rand_tensor(&mut rng, &[4, 2]);
        let seq = FeatureSequence::new(x.clone()).unwrap();
        let (_, cache) = bigru_layer_forward(&seq, &fwd, &bwd).unwrap();

        let mut rev_rows = Vec::new();
        for t in (0..4).rev() {
            rev_rows.extend_from_slice(x.row(t));
        }
        let rev_seq = FeatureSequence::new(Tensor::from_vec(&[4, 2], rev_rows).unwrap()).unwrap();
        let (_, rev_cache) = bigru_layer_forward(&rev_seq, &bwd, &fwd).unwrap();

        for t in 0..4 {
            for i in 0..3 {
                assert_eq!(rev_cache.fwd_states.at2(t, i), cache.bwd_states.at2(3 - t, i));
                assert_eq!(rev_cache.bwd_states.at2(t, i), cache.fwd_states.at2(3 - t, i));
            }
        }
    }

    #[test]
    fn default_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fwd = params(&mut rng, 256, 128);
        let bwd = params(&mut rng, 256, 128);
        let pr = proj(&mut rng, 256, 34);
        let seq = FeatureSequence::new(rand_tensor(&mut rng, &[128, 256])).unwrap();
        let (logits, _) = bigru_forward(&seq, &fwd, &bwd, &pr).unwrap();
        assert_eq!((logits.time_steps(), logits.classes()), (128, 34));
    }

    #[test]
    fn backward_zero_grad_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fwd = params(&mut rng, 2, 3);
        let bwd = params(&mut rng, 2, 3);
        let pr = proj(&mut rng, 6, 4);
        let seq = FeatureSequence::new(rand_tensor(&mut rng, &[3, 2])).unwrap();
        let (_, cache) = bigru_forward(&seq, &fwd, &bwd, &pr).unwrap();
        let g = bigru_backward(&fwd, &bwd, &pr, &cache, &Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(g.seq, Tensor::zeros(&[3, 2]));
        assert_eq!(g.fwd.w_update, Tensor::zeros(&[3, 2]));
        assert_eq!(g.proj_weight, Tensor::zeros(&[4, 6]));
    }

    fn check_bigru_gradients(t_len: usize, in_dim: usize, hidden: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fwd = params(&mut rng, in_dim, hidden);
        let bwd = params(&mut rng, in_dim, hidden);
        let pr = proj(&mut rng, 2 * hidden, 3);
        let x = rand_tensor(&mut rng, &[t_len, in_dim]);
        let seq = FeatureSequence::new(x.clone()).unwrap();
        let (logits, cache) = bigru_forward(&seq, &fwd, &bwd, &pr).unwrap();
        let gproj = rand_tensor(&mut rng, logits.tensor().shape());
        let g = bigru_backward(&fwd, &bwd, &pr, &cache, &gproj).unwrap();

        let objective = |s: &Tensor, f: &GruParams, b: &GruParams, p: &ProjectionParams| {
            let seq = FeatureSequence::new(s.clone())?;
            let (l, _) = bigru_forward(&seq, f, b, p)?;
            l.tensor().dot(&gproj)
        };

        let fd_x = finite_diff_grad(&mut |s| objective(s, &fwd, &bwd, &pr), &x, 1e-5).unwrap();
        assert!(grads_close(&g.seq, &fd_x, 1e-4), "sequence gradient");

        // spot-check a parameter tensor from each group
        let fd_wu_f = finite_diff_grad(
            &mut |w| {
                let mut f2 = fwd.clone();
                f2.w_update = w.clone();
                objective(&x, &f2, &bwd, &pr)
            },
            &fwd.w_update,
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.fwd.w_update, &fd_wu_f, 1e-4), "fwd w_update");

        let fd_uc_b = finite_diff_grad(
            &mut |w| {
                let mut b2 = bwd.clone();
                b2.u_cand = w.clone();
                objective(&x, &fwd, &b2, &pr)
            },
            &bwd.u_cand,
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.bwd.u_cand, &fd_uc_b, 1e-4), "bwd u_cand");

        let fd_pw = finite_diff_grad(
            &mut |w| {
                let p2 = ProjectionParams {
                    weight: w.clone(),
                    bias: pr.bias.clone(),
                };
                objective(&x, &fwd, &bwd, &p2)
            },
            &pr.weight,
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.proj_weight, &fd_pw, 1e-4), "projection weight");

        let fd_br = finite_diff_grad(
            &mut |w| {
                let mut f2 = fwd.clone();
                f2.b_reset = w.clone();
                objective(&x, &f2, &bwd, &pr)
            },
            &fwd.b_reset,
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.fwd.b_reset, &fd_br, 1e-4), "fwd b_reset");
    }

    #[test]
    fn single_step_backward_reduces_to_cell_gradient() {
        check_bigru_gradients(1, 3, 4, 8);
    }

    #[test]
    fn bptt_matches_finite_differences() {
        check_bigru_gradients(4, 3, 5, 9);
        check_bigru_gradients(6, 2, 3, 10);
    }
}
