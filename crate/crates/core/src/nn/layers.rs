//! Reusable layer builders on top of the tape.
//!
//! Parameter naming convention: a layer with prefix `p` owns `p.w` / `p.b`
//! (linear), `p.g` / `p.b` (norm affine), and attention sublayers use
//! `p.q`, `p.k`, `p.v`, `p.o`. Initializers register parameters under the
//! same names the forward builders look up.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamBinding, ParamStore};
use super::tape::{Arr, NodeId, Tape};

/// Bundles the tape, the parameter binding and the store for forward builders.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub bind: &'a mut ParamBinding,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, bind: &'a mut ParamBinding, store: &'a ParamStore) -> Self {
        Ctx { tape, bind, store }
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.bind.get(self.tape, self.store, name)
    }
}

// ---- initializers ----

pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    std: f32,
    rng: &mut ChaCha8Rng,
) {
    store.init_normal(format!("{name}.w"), &[in_dim, out_dim], std, rng);
    store.init_zeros(format!("{name}.b"), &[out_dim]);
}

/// Linear layer whose weight and bias start at zero (adaLN-Zero style).
pub fn init_linear_zero(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) {
    store.init_zeros(format!("{name}.w"), &[in_dim, out_dim]);
    store.init_zeros(format!("{name}.b"), &[out_dim]);
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.init_ones(format!("{name}.g"), &[dim]);
    store.init_zeros(format!("{name}.b"), &[dim]);
}

pub fn init_rms_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.init_ones(format!("{name}.g"), &[dim]);
}

pub fn init_mha(store: &mut ParamStore, name: &str, width: usize, std: f32, rng: &mut ChaCha8Rng) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{p}"), width, width, std, rng);
    }
}

pub fn init_mlp(
    store: &mut ParamStore,
    name: &str,
    width: usize,
    hidden: usize,
    std: f32,
    rng: &mut ChaCha8Rng,
) {
    init_linear(store, &format!("{name}.fc1"), width, hidden, std, rng);
    init_linear(store, &format!("{name}.fc2"), hidden, width, std, rng);
}

pub fn init_swiglu(
    store: &mut ParamStore,
    name: &str,
    width: usize,
    hidden: usize,
    std: f32,
    rng: &mut ChaCha8Rng,
) {
    init_linear(store, &format!("{name}.gate"), width, hidden, std, rng);
    init_linear(store, &format!("{name}.up"), width, hidden, std, rng);
    init_linear(store, &format!("{name}.down"), hidden, width, std, rng);
}

// ---- forward builders ----

/// `x: [..., in] -> [..., out]` via `x @ w + b`.
pub fn linear(c: &mut Ctx, name: &str, x: NodeId) -> NodeId {
    let w = c.param(&format!("{name}.w"));
    let b = c.param(&format!("{name}.b"));
    let xs = c.tape.shape(x).to_vec();
    let in_dim = *xs.last().unwrap();
    let out_dim = c.tape.shape(w)[1];
    let rows: usize = xs.iter().product::<usize>() / in_dim;
    let x2 = c.tape.reshape(x, &[rows, in_dim]);
    let y = c.tape.matmul(x2, w);
    let bb = c.tape.bcast_to(b, &[rows, out_dim]);
    let y = c.tape.add(y, bb);
    let mut out_shape = xs;
    *out_shape.last_mut().unwrap() = out_dim;
    c.tape.reshape(y, &out_shape)
}

/// Layer norm over the last axis with learned affine parameters.
pub fn layer_norm(c: &mut Ctx, name: &str, x: NodeId) -> NodeId {
    let g = c.param(&format!("{name}.g"));
    let b = c.param(&format!("{name}.b"));
    let shape = c.tape.shape(x).to_vec();
    let n = c.tape.norm_lastk(x, 1, 1e-6);
    let gb = c.tape.bcast_to(g, &shape);
    let bb = c.tape.bcast_to(b, &shape);
    let y = c.tape.mul(n, gb);
    c.tape.add(y, bb)
}

/// RMS norm over the last axis with a learned gain.
pub fn rms_norm(c: &mut Ctx, name: &str, x: NodeId) -> NodeId {
    let g = c.param(&format!("{name}.g"));
    let shape = c.tape.shape(x).to_vec();
    let n = c.tape.rms_norm(x, 1e-6);
    let gb = c.tape.bcast_to(g, &shape);
    c.tape.mul(n, gb)
}

/// Multi-head attention. `x: [B, Lq, W]` attends to `kv` (`x` itself for
/// self-attention). `mask` is additive, shape `[Lq, Lkv]`, broadcast over
/// batch and heads.
pub fn attention(
    c: &mut Ctx,
    name: &str,
    x: NodeId,
    kv: NodeId,
    heads: usize,
    mask: Option<&Arr>,
) -> NodeId {
    let (b, lq, w) = {
        let s = c.tape.shape(x);
        (s[0], s[1], s[2])
    };
    let lk = c.tape.shape(kv)[1];
    assert_eq!(w % heads, 0, "width {w} not divisible by heads {heads}");
    let hd = w / heads;

    let q = linear(c, &format!("{name}.q"), x);
    let k = linear(c, &format!("{name}.k"), kv);
    let v = linear(c, &format!("{name}.v"), kv);

    let split = |c: &mut Ctx, t: NodeId, l: usize| {
        let t = c.tape.reshape(t, &[b, l, heads, hd]);
        c.tape.permute(t, &[0, 2, 1, 3]) // [B, H, L, hd]
    };
    let q = split(c, q, lq);
    let k = split(c, k, lk);
    let v = split(c, v, lk);

    let kt = c.tape.permute(k, &[0, 1, 3, 2]); // [B, H, hd, Lk]
    let scores = c.tape.bmm(q, kt);
    let scores = c.tape.scale(scores, 1.0 / (hd as f32).sqrt());
    let attn = c.tape.softmax_lastdim(scores, mask);
    let out = c.tape.bmm(attn, v); // [B, H, Lq, hd]
    let out = c.tape.permute(out, &[0, 2, 1, 3]);
    let out = c.tape.reshape(out, &[b, lq, w]);
    linear(c, &format!("{name}.o"), out)
}

/// Two-layer GELU MLP.
pub fn mlp(c: &mut Ctx, name: &str, x: NodeId) -> NodeId {
    let h = linear(c, &format!("{name}.fc1"), x);
    let h = c.tape.gelu(h);
    linear(c, &format!("{name}.fc2"), h)
}

/// Gated MLP with SiLU activation (SwiGLU).
pub fn swiglu(c: &mut Ctx, name: &str, x: NodeId) -> NodeId {
    let gate = linear(c, &format!("{name}.gate"), x);
    let up = linear(c, &format!("{name}.up"), x);
    let gate = c.tape.silu(gate);
    let h = c.tape.mul(gate, up);
    linear(c, &format!("{name}.down"), h)
}

/// AdaLN modulation: `norm(x) * (1 + scale) + shift` with per-sample
/// `shift`/`scale` of shape `[B, W]` applied to `x: [B, L, W]`.
pub fn modulate(tape: &mut Tape, x_normed: NodeId, shift: NodeId, scale: NodeId) -> NodeId {
    let shape = tape.shape(x_normed).to_vec();
    let (b, w) = (shape[0], shape[2]);
    let s1 = tape.reshape(scale, &[b, 1, w]);
    let s1 = tape.add_scalar(s1, 1.0);
    let s1 = tape.bcast_to(s1, &shape);
    let sh = tape.reshape(shift, &[b, 1, w]);
    let sh = tape.bcast_to(sh, &shape);
    let y = tape.mul(x_normed, s1);
    tape.add(y, sh)
}

/// Per-sample gate: `x * gate` with `gate: [B, W]`, `x: [B, L, W]`.
pub fn gate_mul(tape: &mut Tape, x: NodeId, gate: NodeId) -> NodeId {
    let shape = tape.shape(x).to_vec();
    let (b, w) = (shape[0], shape[2]);
    let g1 = tape.reshape(gate, &[b, 1, w]);
    let g1 = tape.bcast_to(g1, &shape);
    tape.mul(x, g1)
}

/// Sinusoidal timestep embedding, `[B, dim]`. Matches the usual DDPM/DiT
/// construction: half cosines, half sines, log-spaced frequencies.
pub fn timestep_embedding(t: &[usize], dim: usize) -> ArrayD<f32> {
    assert!(dim % 2 == 0, "timestep embedding dim must be even");
    let half = dim / 2;
    let max_period = 10000f64;
    let mut out = Array2::<f32>::zeros((t.len(), dim));
    for (row, &tv) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            let arg = tv as f64 * freq;
            out[[row, i]] = arg.cos() as f32;
            out[[row, half + i]] = arg.sin() as f32;
        }
    }
    out.into_dyn()
}

/// Per-sample stochastic depth. In training mode each sample's branch output
/// is zeroed with probability `prob` and survivors are scaled by
/// `1 / (1 - prob)`; in eval mode the branch passes through unchanged.
/// The mask multiplication participates in the graph; mask entries are
/// constants.
pub fn drop_path(
    tape: &mut Tape,
    branch: NodeId,
    prob: f32,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    assert!((0.0..1.0).contains(&prob), "drop_path prob in [0,1)");
    if !training || prob == 0.0 {
        return branch;
    }
    let shape = tape.shape(branch).to_vec();
    let b = shape[0];
    let keep = 1.0 - prob;
    let mut mask_shape = vec![1usize; shape.len()];
    mask_shape[0] = b;
    let mut mask = ArrayD::<f32>::zeros(IxDyn(&mask_shape));
    for i in 0..b {
        let u: f32 = rand::Rng::gen(rng);
        if u >= prob {
            mask.as_slice_mut().unwrap()[i] = 1.0 / keep;
        }
    }
    let m = tape.constant(mask);
    let m = tape.bcast_to(m, &shape);
    tape.mul(branch, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn linear_shapes_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_linear(&mut store, "l", 4, 3, 0.02, &mut rng);
        store.get_mut("l.b").fill(1.0);

        let mut tape = Tape::eval();
        let mut bind = ParamBinding::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 5, 4])));
        let mut c = Ctx::new(&mut tape, &mut bind, &store);
        let y = linear(&mut c, "l", x);
        assert_eq!(tape.shape(y), &[2, 5, 3]);
        assert!(tape.value(y).iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn attention_mask_blocks_future() {
        // With a strict causal mask, position 0 output must not depend on
        // position 1 input.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_mha(&mut store, "a", 8, 0.2, &mut rng);

        let mut mask = ArrayD::<f32>::zeros(IxDyn(&[3, 3]));
        for i in 0..3 {
            for j in 0..3 {
                if j > i {
                    mask[[i, j]] = -1e30;
                }
            }
        }

        let run = |x: ArrayD<f32>, store: &ParamStore, mask: &Arr| -> ArrayD<f32> {
            let mut tape = Tape::eval();
            let mut bind = ParamBinding::new();
            let xn = tape.constant(x);
            let mut c = Ctx::new(&mut tape, &mut bind, store);
            let y = attention(&mut c, "a", xn, xn, 2, Some(mask));
            tape.value(y).clone()
        };

        let mut x0 = ArrayD::<f32>::zeros(IxDyn(&[1, 3, 8]));
        for (i, v) in x0.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        let mut x1 = x0.clone();
        x1[[0, 2, 3]] += 1.0; // perturb last position

        let y0 = run(x0, &store, &mask);
        let y1 = run(x1, &store, &mask);
        for l in 0..2 {
            for w in 0..8 {
                assert!(
                    (y0[[0, l, w]] - y1[[0, l, w]]).abs() < 1e-6,
                    "future leak at pos {l}"
                );
            }
        }
        // and the perturbed position itself does change
        let diff: f32 = (0..8).map(|w| (y0[[0, 2, w]] - y1[[0, 2, w]]).abs()).sum();
        assert!(diff > 1e-4);
    }

    #[test]
    fn timestep_embedding_basic() {
        let e = timestep_embedding(&[0, 5], 8);
        assert_eq!(e.shape(), &[2, 8]);
        // t = 0: all cosines are 1, all sines are 0
        for i in 0..4 {
            assert!((e[[0, i]] - 1.0).abs() < 1e-6);
            assert!(e[[0, 4 + i]].abs() < 1e-6);
        }
    }

    #[test]
    fn drop_path_eval_identity_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = ArrayD::from_elem(IxDyn(&[4, 3]), 2.0f32);

        let mut tape = Tape::eval();
        let xn = tape.constant(x.clone());
        let y = drop_path(&mut tape, xn, 0.5, false, &mut rng);
        assert_eq!(tape.value(y), &x);

        // training: empirical keep-rate 0.5 +- 0.01 at 1e5 samples, and
        // expectation preserved by the 1/(1-p) rescale.
        let n = 100_000usize;
        let big = ArrayD::from_elem(IxDyn(&[n, 1]), 1.0f32);
        let mut tape = Tape::eval();
        let xn = tape.constant(big);
        let y = drop_path(&mut tape, xn, 0.5, true, &mut rng);
        let vals = tape.value(y);
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.01, "keep rate {rate}");
        let mean = vals.sum() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "expectation {mean}");
    }
}
