//! Multi-head attention and pre-norm transformer blocks.
//!
//! Tokens are rows: projections are `x · W` with `W` of shape `C×C`.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{glorot, join};
use crate::tensor::Tensor;

/// Hidden width of the block MLP, as a multiple of `C`.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub heads: usize,
}

impl AttentionParams<Tensor> {
    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Argument(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            w_q: glorot(dim, dim, rng),
            w_k: glorot(dim, dim, rng),
            w_v: glorot(dim, dim, rng),
            w_o: glorot(dim, dim, rng),
            heads,
        })
    }

    pub fn identity(dim: usize, heads: usize) -> Self {
        Self {
            w_q: Tensor::eye(dim),
            w_k: Tensor::eye(dim),
            w_v: Tensor::eye(dim),
            w_o: Tensor::eye(dim),
            heads,
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        let z = Tensor::zeros(&[dim, dim]);
        Self {
            w_q: z.clone(),
            w_k: z.clone(),
            w_v: z.clone(),
            w_o: z,
            heads,
        }
    }

    pub fn constants(&self) -> AttentionParams<Var> {
        self.map("", &mut |_, t| Var::constant(t.clone()))
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&join(prefix, "w_q"), &self.w_q),
            w_k: f(&join(prefix, "w_k"), &self.w_k),
            w_v: f(&join(prefix, "w_v"), &self.w_v),
            w_o: f(&join(prefix, "w_o"), &self.w_o),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub attn: AttentionParams<T>,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
}

impl BlockParams<Tensor> {
    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let hidden = MLP_RATIO * dim;
        Ok(Self {
            ln1_gamma: Tensor::full(&[1, dim], 1.0),
            ln1_beta: Tensor::zeros(&[1, dim]),
            attn: AttentionParams::init(dim, heads, rng)?,
            ln2_gamma: Tensor::full(&[1, dim], 1.0),
            ln2_beta: Tensor::zeros(&[1, dim]),
            mlp_w1: glorot(dim, hidden, rng),
            mlp_b1: Tensor::zeros(&[1, hidden]),
            mlp_w2: glorot(hidden, dim, rng),
            mlp_b2: Tensor::zeros(&[1, dim]),
        })
    }

    /// All weights zero: the block reduces to its residual path.
    pub fn zeros(dim: usize, heads: usize) -> Self {
        let hidden = MLP_RATIO * dim;
        Self {
            ln1_gamma: Tensor::zeros(&[1, dim]),
            ln1_beta: Tensor::zeros(&[1, dim]),
            attn: AttentionParams::zeros(dim, heads),
            ln2_gamma: Tensor::zeros(&[1, dim]),
            ln2_beta: Tensor::zeros(&[1, dim]),
            mlp_w1: Tensor::zeros(&[dim, hidden]),
            mlp_b1: Tensor::zeros(&[1, hidden]),
            mlp_w2: Tensor::zeros(&[hidden, dim]),
            mlp_b2: Tensor::zeros(&[1, dim]),
        }
    }

    pub fn constants(&self) -> BlockParams<Var> {
        self.map("", &mut |_, t| Var::constant(t.clone()))
    }
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            ln1_gamma: f(&join(prefix, "ln1_gamma"), &self.ln1_gamma),
            ln1_beta: f(&join(prefix, "ln1_beta"), &self.ln1_beta),
            attn: self.attn.map(&join(prefix, "attn"), f),
            ln2_gamma: f(&join(prefix, "ln2_gamma"), &self.ln2_gamma),
            ln2_beta: f(&join(prefix, "ln2_beta"), &self.ln2_beta),
            mlp_w1: f(&join(prefix, "mlp_w1"), &self.mlp_w1),
            mlp_b1: f(&join(prefix, "mlp_b1"), &self.mlp_b1),
            mlp_w2: f(&join(prefix, "mlp_w2"), &self.mlp_w2),
            mlp_b2: f(&join(prefix, "mlp_b2"), &self.mlp_b2),
        }
    }
}

fn attend(
    queries: &Var,
    context: &Var,
    p: &AttentionParams<Var>,
    mut probe: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let dim = p.w_q.shape()[0];
    if queries.shape().len() != 2 || queries.shape()[1] != dim {
        return Err(Error::shape("attention", queries.shape(), p.w_q.shape()));
    }
    if context.shape().len() != 2 || context.shape()[1] != dim {
        return Err(Error::shape("attention", queries.shape(), context.shape()));
    }
    if p.heads == 0 || !dim.is_multiple_of(p.heads) {
        return Err(Error::Argument(format!("{dim} not divisible by {} heads", p.heads)));
    }
    let d = dim / p.heads;
    let scale = 1.0 / (d as f64).sqrt();

    let q = queries.matmul(&p.w_q)?;
    let k = context.matmul(&p.w_k)?;
    let v = context.matmul(&p.w_v)?;
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (q.slice_cols(h * d, d)?, k.slice_cols(h * d, d)?, v.slice_cols(h * d, d)?)
        };
        let weights = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
        if let Some(probe) = probe.as_deref_mut() {
            probe.push(weights.value().clone());
        }
        outs.push(weights.matmul(&vh)?);
    }
    let merged = if outs.len() == 1 {
        outs.pop().unwrap()
    } else {
        Var::concat_cols(&outs)?
    };
    merged.matmul(&p.w_o)
}

/// Scaled dot-product self-attention with `heads` heads of width `C / heads`.
pub fn multi_head_self_attention(x: &Var, p: &AttentionParams<Var>) -> Result<Var> {
    attend(x, x, p, None)
}

/// Queries from the fine tokens; keys and values from the coarse tokens.
pub fn cross_attention(f_fine: &Var, f_coarse: &Var, p: &AttentionParams<Var>) -> Result<Var> {
    attend(f_fine, f_coarse, p, None)
}

/// Per-head attention weight matrices (rows = queries) for inspection.
pub fn attention_weights(queries: &Tensor, context: &Tensor, p: &AttentionParams) -> Result<Vec<Tensor>> {
    let mut probe = Vec::with_capacity(p.heads);
    attend(
        &Var::constant(queries.clone()),
        &Var::constant(context.clone()),
        &p.constants(),
        Some(&mut probe),
    )?;
    Ok(probe)
}

/// Pre-norm block: `h = x + Attn(LN(x))`, `out = h + MLP(LN(h))`.
pub fn transformer_block(x: &Var, p: &BlockParams<Var>) -> Result<Var> {
    let normed = x.layer_norm(&p.ln1_gamma, &p.ln1_beta)?;
    let h = x.add(&multi_head_self_attention(&normed, &p.attn)?)?;
    let normed = h.layer_norm(&p.ln2_gamma, &p.ln2_beta)?;
    let hidden = normed.matmul(&p.mlp_w1)?.add_row(&p.mlp_b1)?.gelu();
    let mlp = hidden.matmul(&p.mlp_w2)?.add_row(&p.mlp_b2)?;
    h.add(&mlp)
}

pub fn run_blocks(x: &Var, blocks: &[BlockParams<Var>]) -> Result<Var> {
    blocks.iter().try_fold(x.clone(), |acc, b| transformer_block(&acc, b))
}

/// Joint attention over three frames' tokens, ordered `t-1, t, t+1`, each
/// tagged with its row of the `3×C` frame embedding.
pub fn spatio_temporal_block(frames: &[Var; 3], frame_embed: &Var, p: &BlockParams<Var>) -> Result<Var> {
    let first = frames[0].shape();
    for f in &frames[1..] {
        if f.shape() != first {
            return Err(Error::shape("spatio_temporal_block", first, f.shape()));
        }
    }
    if frame_embed.shape() != [3, first[1]] {
        return Err(Error::shape("spatio_temporal_block", first, frame_embed.shape()));
    }
    let tagged = frames
        .iter()
        .enumerate()
        .map(|(i, f)| f.add_row(&frame_embed.gather_rows(&[i])?))
        .collect::<Result<Vec<_>>>()?;
    transformer_block(&Var::concat_rows(&tagged)?, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straightforward per-head loops, no shared code with `attend`.
    fn naive_attention(q_src: &Tensor, kv: &Tensor, p: &AttentionParams) -> Vec<f64> {
        let c = q_src.cols();
        let d = c / p.heads;
        let proj = |x: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
            (0..x.rows())
                .map(|i| {
                    (0..c)
                        .map(|j| (0..c).map(|l| x.data()[i * c + l] * w.data()[l * c + j]).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(q_src, &p.w_q), proj(kv, &p.w_k), proj(kv, &p.w_v));
        let mut concat = vec![vec![0.0; c]; q.len()];
        for h in 0..p.heads {
            for i in 0..q.len() {
                let logits: Vec<f64> = (0..k.len())
                    .map(|j| (0..d).map(|t| q[i][h * d + t] * k[j][h * d + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..d {
                    concat[i][h * d + t] = (0..k.len()).map(|j| e[j] / z * v[j][h * d + t]).sum();
                }
            }
        }
        let mut out = Vec::new();
        for row in &concat {
            for j in 0..c {
                out.push((0..c).map(|l| row[l] * p.w_o.data()[l * c + j]).sum());
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn single_token_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[1, 3], &mut rng);
        let mut p = AttentionParams::identity(3, 1);
        p.w_v = random(&[3, 3], &mut rng);
        p.w_o = random(&[3, 3], &mut rng);
        let out = multi_head_self_attention(&Var::constant(x.clone()), &p.constants()).unwrap();
        let want = x.matmul(&p.w_v).unwrap().matmul(&p.w_o).unwrap();
        assert_close(out.value().data(), want.data(), 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row = random(&[1, 4], &mut rng);
        let x = Tensor::concat_rows(&[&row, &row]).unwrap();
        let p = AttentionParams::init(4, 2, &mut rng).unwrap();
        let out = multi_head_self_attention(&Var::constant(x), &p.constants()).unwrap();
        assert_eq!(out.value().row(0), out.value().row(1));
    }

    #[test]
    fn self_attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 8], &mut rng);
        let p = AttentionParams::init(8, 2, &mut rng).unwrap();
        let out = multi_head_self_attention(&Var::constant(x.clone()), &p.constants()).unwrap();
        assert_close(out.value().data(), &naive_attention(&x, &x, &p), 1e-10);
    }

    #[test]
    fn cross_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fine = random(&[1, 1], &mut rng);
        let coarse = random(&[1, 1], &mut rng);
        let out = cross_attention(
            &Var::constant(fine),
            &Var::constant(coarse.clone()),
            &AttentionParams::identity(1, 1).constants(),
        )
        .unwrap();
        assert_eq!(out.value(), &coarse);

        let p = AttentionParams::init(4, 1, &mut rng).unwrap();
        let v = random(&[1, 4], &mut rng);
        let coarse = Tensor::concat_rows(&[&v, &v, &v]).unwrap();
        let fine = random(&[5, 4], &mut rng);
        let out = cross_attention(&Var::constant(fine), &Var::constant(coarse), &p.constants()).unwrap();
        let want = v.matmul(&p.w_v).unwrap().matmul(&p.w_o).unwrap();
        for r in 0..5 {
            assert_close(out.value().row(r), want.data(), 1e-12);
        }

        let fine = random(&[3, 4], &mut rng);
        let coarse = random(&[5, 4], &mut rng);
        let p = AttentionParams::init(4, 2, &mut rng).unwrap();
        let out = cross_attention(&Var::constant(fine.clone()), &Var::constant(coarse.clone()), &p.constants())
            .unwrap();
        assert_eq!(out.shape(), &[3, 4]);
        assert_close(out.value().data(), &naive_attention(&fine, &coarse, &p), 1e-10);
    }

    #[test]
    fn cross_attention_width_mismatch() {
        let p = AttentionParams::identity(4, 1).constants();
        let err = cross_attention(
            &Var::constant(Tensor::zeros(&[2, 4])),
            &Var::constant(Tensor::zeros(&[2, 3])),
            &p,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
        assert!(AttentionParams::init(6, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (n, c) in [(1, 4), (5, 8), (7, 6)] {
            let x = random(&[n, c], &mut rng);
            let out = transformer_block(&Var::constant(x.clone()), &BlockParams::zeros(c, 2).constants()).unwrap();
            assert_eq!(out.value(), &x);
            let p = BlockParams::init(c, 2, &mut rng).unwrap();
            let out = transformer_block(&Var::constant(x), &p.constants()).unwrap();
            assert_eq!(out.shape(), &[n, c]);
        }
    }

    #[test]
    fn block_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[5, 4], &mut rng);
        let p = BlockParams::init(4, 2, &mut rng).unwrap();
        let err = finite_diff_check(|v| Ok(transformer_block(v, &p.constants())?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "input gradient error {err}");

        // and with respect to every parameter tensor
        let names: Vec<String> = {
            let mut v = Vec::new();
            p.map("", &mut |n, _| v.push(n.to_string()));
            v
        };
        for name in names {
            let mut target = None;
            p.map("", &mut |n, t| {
                if n == name {
                    target = Some(t.clone());
                }
            });
            let err = finite_diff_check(
                |v| {
                    let bound = p.map("", &mut |n, t| {
                        if n == name { v.clone() } else { Var::constant(t.clone()) }
                    });
                    Ok(transformer_block(&Var::constant(x.clone()), &bound)?.sum_squares())
                },
                &target.unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn spatio_temporal_shapes_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frame = random(&[192, 4], &mut rng);
        let frames = [
            Var::constant(frame.clone()),
            Var::constant(frame.clone()),
            Var::constant(frame.clone()),
        ];
        let embed = Var::constant(Tensor::zeros(&[3, 4]));
        let out = spatio_temporal_block(&frames, &embed, &BlockParams::zeros(4, 2).constants()).unwrap();
        assert_eq!(out.shape(), &[576, 4]);
        assert_eq!(out.value(), &Tensor::concat_rows(&[&frame, &frame, &frame]).unwrap());

        let bad = [
            Var::constant(frame.clone()),
            Var::constant(Tensor::zeros(&[191, 4])),
            Var::constant(frame),
        ];
        assert!(spatio_temporal_block(&bad, &embed, &BlockParams::zeros(4, 2).constants()).is_err());
    }

    #[test]
    fn spatio_temporal_permutation_with_zero_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f: Vec<Tensor> = (0..3).map(|_| random(&[6, 4], &mut rng)).collect();
        let mut p = BlockParams::init(4, 2, &mut rng).unwrap();
        p.attn = AttentionParams::zeros(4, 2);
        let embed = random(&[3, 4], &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let run = |first: &Tensor| {
            let frames = [
                Var::constant(first.clone()),
                Var::constant(f[1].clone()),
                Var::constant(f[2].clone()),
            ];
            spatio_temporal_block(&frames, &Var::constant(embed.clone()), &p.constants())
                .unwrap()
                .value()
                .clone()
        };
        let base = run(&f[0]);
        let permuted = run(&f[0].gather_rows(&perm).unwrap());
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.row(i), base.row(src));
        }
        for r in 6..18 {
            assert_eq!(permuted.row(r), base.row(r));
        }
    }

    #[test]
    fn blocks_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[6, 8], &mut rng);
        let p = BlockParams::init(8, 2, &mut rng).unwrap();
        let perm = [5, 2, 0, 1, 4, 3];
        let a = transformer_block(&Var::constant(x.clone()), &p.constants()).unwrap();
        let b = transformer_block(&Var::constant(x.gather_rows(&perm).unwrap()), &p.constants()).unwrap();
        let a_perm = a.value().gather_rows(&perm).unwrap();
        assert!(a_perm.max_abs_diff(b.value()) < 1e-12);
    }
}
