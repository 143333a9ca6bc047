//! Transformer refining layers.
//!
//! Encoder refiners are causal self-attention plus SwiGLU feed-forward
//! blocks; decoder refiners add cross-attention to the encoder features of
//! the same level. Every sublayer is pre-normalized with a per-position
//! instance norm and wrapped in a residual. There are no positional
//! encodings: ordering information reaches the attention through the
//! resampled embeddings and, in the encoder, the causal mask.
//!
//! Sequences are handled as stacks of equal-length groups (`groups · len`
//! rows), so a whole batch goes through each projection as one matrix.

use rand::Rng;

use crate::cde::LevelSequence;
use crate::error::{Result, UfoError};
use crate::tensorops::{AttentionLayout, Bound, DenseArray, ParamId, ParamStore, Tape, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct AttnIds {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
}

impl AttnIds {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: store.add_uniform(format!("{prefix}.query"), d, d, 1.0, rng),
            key: store.add_uniform(format!("{prefix}.key"), d, d, 1.0, rng),
            value: store.add_uniform(format!("{prefix}.value"), d, d, 1.0, rng),
            output: store.add(format!("{prefix}.output"), DenseArray::zeros(d, d)),
        }
    }

    /// Returns the projected output and the attention node (for export).
    fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        queries: Var,
        keys: Var,
        layout: AttentionLayout,
    ) -> (Var, Var) {
        let q = tape.matmul(queries, bound.var(self.query));
        let k = tape.matmul(keys, bound.var(self.key));
        let v = tape.matmul(keys, bound.var(self.value));
        let a = tape.attention(q, k, v, layout);
        (tape.matmul(a, bound.var(self.output)), a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct FeedForwardIds {
    gate: ParamId,
    value: ParamId,
    output: ParamId,
}

impl FeedForwardIds {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            gate: store.add_uniform(format!("{prefix}.gate"), d, hidden, 1.0, rng),
            value: store.add_uniform(format!("{prefix}.value"), d, hidden, 1.0, rng),
            output: store.add(format!("{prefix}.output"), DenseArray::zeros(hidden, d)),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let g = tape.matmul(x, bound.var(self.gate));
        let g = tape.swish(g);
        let v = tape.matmul(x, bound.var(self.value));
        let h = tape.mul(g, v);
        tape.matmul(h, bound.var(self.output))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    self_attn: AttnIds,
    cross_attn: Option<AttnIds>,
    ff: FeedForwardIds,
}

/// Parameter handles of one refiner (encoder or decoder flavour).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefinerParams {
    blocks: Vec<Block>,
    heads: usize,
    d: usize,
}

/// Which attention sublayer a record came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

/// An attention node captured during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSite {
    pub block: usize,
    pub kind: AttentionKind,
    pub var: Var,
}

/// One head's attention matrix for one sequence.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionRecord {
    pub stack: String,
    pub level: usize,
    pub block: usize,
    pub kind: AttentionKind,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows × cols`; each row sums to one.
    pub weights: Vec<f64>,
}

impl RefinerParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        blocks: usize,
        ff_hidden: usize,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(UfoError::Config(format!("hidden dim {d} not divisible by {heads} heads")));
        }
        let blocks = (0..blocks)
            .map(|b| Block {
                self_attn: AttnIds::init(store, &format!("{prefix}.{b}.self"), d, rng),
                cross_attn: cross.then(|| AttnIds::init(store, &format!("{prefix}.{b}.cross"), d, rng)),
                ff: FeedForwardIds::init(store, &format!("{prefix}.{b}.ff"), d, ff_hidden, rng),
            })
            .collect();
        Ok(Self { blocks, heads, d })
    }

    pub fn init_encoder(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        blocks: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::init(store, prefix, d, heads, blocks, ff_hidden, false, rng)
    }

    pub fn init_decoder(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        blocks: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::init(store, prefix, d, heads, blocks, ff_hidden, true, rng)
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn is_decoder(&self) -> bool {
        self.blocks.iter().any(|b| b.cross_attn.is_some())
    }

    /// Ids of the output projections (attention and feed-forward), which
    /// start at zero so every block is initially the identity.
    pub fn output_projections(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| {
                [Some(b.self_attn.output), b.cross_attn.map(|c| c.output), Some(b.ff.output)]
            })
            .flatten()
            .collect()
    }

    fn check_width(&self, tape: &Tape, x: Var, groups: usize) -> Result<usize> {
        let (rows, cols) = tape.shape(x);
        if cols != self.d {
            return Err(UfoError::invalid(format!("refiner width {} but input width {cols}", self.d)));
        }
        if groups == 0 || rows == 0 || rows % groups != 0 {
            return Err(UfoError::invalid(format!("{rows} rows do not split into {groups} groups")));
        }
        Ok(rows / groups)
    }
}

/// Causal encoder refinement of `groups` stacked sequences.
pub fn encoder_refine_tape(
    tape: &mut Tape,
    x: Var,
    groups: usize,
    params: &RefinerParams,
    bound: &Bound,
    mut sites: Option<&mut Vec<AttentionSite>>,
) -> Result<Var> {
    params.check_width(tape, x, groups)?;
    if params.is_decoder() {
        return Err(UfoError::invalid("decoder parameters passed to the encoder refiner"));
    }
    let layout = AttentionLayout {
        heads: params.heads,
        causal: true,
        q_groups: groups,
        kv_groups: groups,
    };
    let mut h = x;
    for (b, block) in params.blocks.iter().enumerate() {
        let n = tape.row_norm(h, NORM_EPS);
        let (a, site) = block.self_attn.apply(tape, bound, n, n, layout);
        if let Some(s) = sites.as_deref_mut() {
            s.push(AttentionSite {
                block: b,
                kind: AttentionKind::SelfAttention,
                var: site,
            });
        }
        h = tape.add(h, a);
        let n = tape.row_norm(h, NORM_EPS);
        let f = block.ff.apply(tape, bound, n);
        h = tape.add(h, f);
    }
    Ok(h)
}

/// Decoder refinement of `groups` stacked sequences attending to
/// `enc_groups` encoder sequences; decoder group `g` reads encoder group
/// `g / (groups / enc_groups)`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_refine_tape(
    tape: &mut Tape,
    y: Var,
    groups: usize,
    enc: Var,
    enc_groups: usize,
    params: &RefinerParams,
    bound: &Bound,
    mut sites: Option<&mut Vec<AttentionSite>>,
) -> Result<Var> {
    params.check_width(tape, y, groups)?;
    params.check_width(tape, enc, enc_groups)?;
    if groups % enc_groups != 0 {
        return Err(UfoError::invalid(format!(
            "{groups} decoder groups cannot share {enc_groups} encoder groups"
        )));
    }
    let self_layout = AttentionLayout {
        heads: params.heads,
        causal: false,
        q_groups: groups,
        kv_groups: groups,
    };
    let cross_layout = AttentionLayout {
        heads: params.heads,
        causal: false,
        q_groups: groups,
        kv_groups: enc_groups,
    };
    let memory = tape.row_norm(enc, NORM_EPS);
    let mut h = y;
    for (b, block) in params.blocks.iter().enumerate() {
        let cross = block
            .cross_attn
            .ok_or_else(|| UfoError::invalid("encoder parameters passed to the decoder refiner"))?;
        let n = tape.row_norm(h, NORM_EPS);
        let (a, site) = block.self_attn.apply(tape, bound, n, n, self_layout);
        let mut push = |kind, var| {
            if let Some(s) = sites.as_deref_mut() {
                s.push(AttentionSite { block: b, kind, var });
            }
        };
        push(AttentionKind::SelfAttention, site);
        h = tape.add(h, a);
        let n = tape.row_norm(h, NORM_EPS);
        let (c, site) = cross.apply(tape, bound, n, memory, cross_layout);
        push(AttentionKind::Cross, site);
        h = tape.add(h, c);
        let n = tape.row_norm(h, NORM_EPS);
        let f = block.ff.apply(tape, bound, n);
        h = tape.add(h, f);
    }
    Ok(h)
}

/// Splits the attention nodes of one forward pass into per-head records.
/// Only the first `max_groups` query groups of each node are exported.
pub fn collect_attention(
    tape: &Tape,
    stack: &str,
    level: usize,
    sites: &[AttentionSite],
    max_groups: usize,
) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for site in sites {
        let (probs, layout, tq, tk) = tape
            .attention_probs(site.var)
            .ok_or_else(|| UfoError::Internal("attention site is not an attention node".into()))?;
        for g in 0..layout.q_groups.min(max_groups) {
            for head in 0..layout.heads {
                let start = ((g * layout.heads + head) * tq) * tk;
                out.push(AttentionRecord {
                    stack: stack.to_string(),
                    level,
                    block: site.block,
                    kind: site.kind,
                    head,
                    rows: tq,
                    cols: tk,
                    weights: probs[start..start + tq * tk].to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// Encoder refinement of one sequence outside of training.
pub fn encoder_refine(
    seq: &LevelSequence,
    store: &ParamStore,
    params: &RefinerParams,
) -> Result<LevelSequence> {
    if seq.is_empty() {
        return Err(UfoError::invalid("cannot refine an empty sequence"));
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let x = tape.constant(seq.values.clone());
    let out = encoder_refine_tape(&mut tape, x, 1, params, &bound, None)?;
    LevelSequence::new(seq.times.clone(), tape.value(out).clone(), seq.covariates.clone())
}

/// Decoder refinement of one sequence outside of training.
pub fn decoder_refine(
    dec_seq: &LevelSequence,
    enc_seq: &LevelSequence,
    store: &ParamStore,
    params: &RefinerParams,
) -> Result<LevelSequence> {
    if dec_seq.is_empty() || enc_seq.is_empty() {
        return Err(UfoError::invalid("cannot refine an empty sequence"));
    }
    if dec_seq.values.cols() != enc_seq.values.cols() {
        return Err(UfoError::invalid(format!(
            "decoder width {} differs from encoder width {}",
            dec_seq.values.cols(),
            enc_seq.values.cols()
        )));
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let y = tape.constant(dec_seq.values.clone());
    let e = tape.constant(enc_seq.values.clone());
    let out = decoder_refine_tape(&mut tape, y, 1, e, 1, params, &bound, None)?;
    LevelSequence::new(dec_seq.times.clone(), tape.value(out).clone(), dec_seq.covariates.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::{check_gradients, seeded_normal};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(values: DenseArray) -> LevelSequence {
        let n = values.rows();
        LevelSequence::new((0..n).map(|i| i as f64).collect(), values, DenseArray::zeros(n, 1)).unwrap()
    }

    /// Store with randomized (non-zero) output projections.
    fn live(seed: u64, d: usize, heads: usize, blocks: usize, decoder: bool) -> (ParamStore, RefinerParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = if decoder {
            RefinerParams::init_decoder(&mut store, "r", d, heads, blocks, 2 * d, &mut rng).unwrap()
        } else {
            RefinerParams::init_encoder(&mut store, "r", d, heads, blocks, 2 * d, &mut rng).unwrap()
        };
        for (i, id) in p.output_projections().into_iter().enumerate() {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = seeded_normal(r, c, "out-proj", seed * 100 + i as u64).map(|x| 0.5 * x);
        }
        (store, p)
    }

    #[test]
    fn zero_initialized_blocks_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = RefinerParams::init_encoder(&mut store, "e", 8, 4, 2, 16, &mut rng).unwrap();
        let dec = RefinerParams::init_decoder(&mut store, "d", 8, 4, 2, 16, &mut rng).unwrap();
        let x = seq(seeded_normal(5, 8, "x", 1));
        let y = seq(seeded_normal(3, 8, "y", 1));
        assert_eq!(encoder_refine(&x, &store, &enc).unwrap().values, x.values);
        assert_eq!(decoder_refine(&y, &x, &store, &dec).unwrap().values, y.values);
    }

    #[test]
    fn rejects_bad_head_count_and_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        assert!(matches!(
            RefinerParams::init_encoder(&mut store, "e", 6, 4, 1, 8, &mut rng),
            Err(UfoError::Config(_))
        ));
        let (store, dec) = live(2, 4, 2, 1, true);
        let y = seq(seeded_normal(3, 4, "y", 2));
        let x = seq(seeded_normal(3, 5, "x", 2));
        assert!(matches!(decoder_refine(&y, &x, &store, &dec), Err(UfoError::InvalidArgument(_))));
    }

    #[test]
    fn length_one_sequence_attends_to_itself() {
        let (store, enc) = live(3, 4, 2, 1, false);
        let x = seq(seeded_normal(1, 4, "x", 3));
        let out = encoder_refine(&x, &store, &enc).unwrap();
        // Oracle: with one token every head returns its own value vector.
        let n = row_norm_plain(x.values.row(0));
        let get = |name: &str| store.get(store.find(name).unwrap()).clone();
        let v = matvec(&n, &get("r.0.self.value"));
        let a = matvec(&v, &get("r.0.self.output"));
        let h1: Vec<f64> = x.values.row(0).iter().zip(&a).map(|(x, a)| x + a).collect();
        let n2 = row_norm_plain(&h1);
        let g = matvec(&n2, &get("r.0.ff.gate"));
        let vv = matvec(&n2, &get("r.0.ff.value"));
        let hid: Vec<f64> = g.iter().zip(&vv).map(|(g, v)| g / (1.0 + (-g).exp()) * v).collect();
        let f = matvec(&hid, &get("r.0.ff.output"));
        for j in 0..4 {
            assert_abs_diff_eq!(out.values.get(0, j), h1[j] + f[j], epsilon = 1e-12);
        }
    }

    fn row_norm_plain(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + NORM_EPS).sqrt()).collect()
    }

    fn matvec(x: &[f64], m: &DenseArray) -> Vec<f64> {
        (0..m.cols()).map(|j| x.iter().enumerate().map(|(i, v)| v * m.get(i, j)).sum()).collect()
    }

    #[test]
    fn encoder_is_causal() {
        let (store, enc) = live(4, 8, 2, 2, false);
        let x = seq(seeded_normal(6, 8, "x", 4));
        let base = encoder_refine(&x, &store, &enc).unwrap();
        for j in 0..6 {
            let mut y = x.clone();
            y.values.set(j, 3, y.values.get(j, 3) + 0.5);
            let out = encoder_refine(&y, &store, &enc).unwrap();
            for i in 0..6 {
                let changed = out.values.row(i) != base.values.row(i);
                assert_eq!(changed, i >= j, "perturbing {j} vs output {i}");
            }
        }
    }

    #[test]
    fn encoder_is_order_aware() {
        let (store, enc) = live(5, 8, 2, 2, false);
        let x = seq(seeded_normal(5, 8, "x", 5));
        let mut perm = x.clone();
        for (i, src) in [4usize, 2, 0, 1, 3].iter().enumerate() {
            perm.values.row_mut(i).copy_from_slice(x.values.row(*src));
        }
        let a = encoder_refine(&x, &store, &enc).unwrap();
        let b = encoder_refine(&perm, &store, &enc).unwrap();
        assert!((0..5).any(|i| b.values.row(i) != a.values.row(4 - i)));
        assert_ne!(a.values, b.values);
    }

    /// Single-block, single-head, d = 2 decoder where only cross-attention
    /// acts, with identity projections.
    fn cross_only() -> (ParamStore, RefinerParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let p = RefinerParams::init_decoder(&mut store, "r", 2, 1, 1, 2, &mut rng).unwrap();
        let eye = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        for name in ["query", "key", "value", "output"] {
            *store.get_mut(store.find(&format!("r.0.cross.{name}")).unwrap()) = eye.clone();
        }
        (store, p)
    }

    #[test]
    fn singleton_memory_gets_full_weight() {
        let (store, p) = cross_only();
        let y = seq(DenseArray::from_rows(&[vec![0.3, -1.0], vec![2.0, 1.0]]).unwrap());
        let e = seq(DenseArray::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let out = decoder_refine(&y, &e, &store, &p).unwrap();
        // normalized memory row (1, 3) -> (-1, 1) up to eps
        let m = row_norm_plain(&[1.0, 3.0]);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(out.values.get(i, j), y.values.get(i, j) + m[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_key_reweights_softmax() {
        let (store, p) = cross_only();
        let y = seq(DenseArray::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let e2 = seq(DenseArray::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let e3 = seq(DenseArray::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap());
        let q = row_norm_plain(&[0.0, 1.0]);
        let k1 = row_norm_plain(&[2.0, 0.0]);
        let k2 = row_norm_plain(&[0.0, 1.0]);
        let s1 = (q[0] * k1[0] + q[1] * k1[1]) / 2f64.sqrt();
        let s2 = (q[0] * k2[0] + q[1] * k2[1]) / 2f64.sqrt();
        // duplicating key 1 doubles its unnormalized weight
        let expect = |dup: f64| -> Vec<f64> {
            let (a, b) = (dup * s1.exp(), s2.exp());
            (0..2).map(|j| y.values.get(0, j) + (a * k1[j] + b * k2[j]) / (a + b)).collect()
        };
        let o2 = decoder_refine(&y, &e2, &store, &p).unwrap();
        let o3 = decoder_refine(&y, &e3, &store, &p).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(o2.values.get(0, j), expect(1.0)[j], epsilon = 1e-12);
            assert_abs_diff_eq!(o3.values.get(0, j), expect(2.0)[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn batched_groups_match_single_sequences() {
        let (store, dec) = live(7, 8, 4, 2, true);
        let enc: Vec<DenseArray> = (0..2).map(|g| seeded_normal(4, 8, "e", 70 + g)).collect();
        // three samples per encoder group
        let decs: Vec<DenseArray> = (0..6).map(|g| seeded_normal(3, 8, "y", 80 + g)).collect();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let stack = |parts: &[DenseArray]| {
            let data: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
            DenseArray::from_vec(data.len() / 8, 8, data).unwrap()
        };
        let y = tape.constant(stack(&decs));
        let e = tape.constant(stack(&enc));
        let out = decoder_refine_tape(&mut tape, y, 6, e, 2, &dec, &bound, None).unwrap();
        let batched = tape.value(out).clone();
        for g in 0..6 {
            let single = decoder_refine(&seq(decs[g].clone()), &seq(enc[g / 3].clone()), &store, &dec).unwrap();
            for r in 0..3 {
                for c in 0..8 {
                    assert_abs_diff_eq!(batched.get(g * 3 + r, c), single.values.get(r, c), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for decoder in [false, true] {
            let (store, p) = live(8, 8, 2, 2, decoder);
            let n = store.len();
            let mut inputs = store.values().to_vec();
            inputs.push(seeded_normal(4, 8, "x", 8));
            inputs.push(seeded_normal(3, 8, "e", 8));
            let w = std::sync::Arc::new(seeded_normal(1, 32, "w", 8).into_vec());
            let report = check_gradients(&inputs, 1e-5, |t, v| {
                let bound = Bound::from_vars(v[..n].to_vec());
                let out = if decoder {
                    decoder_refine_tape(t, v[n], 1, v[n + 1], 1, &p, &bound, None)?
                } else {
                    encoder_refine_tape(t, v[n], 1, &p, &bound, None)?
                };
                Ok(t.dot_const(out, w.clone()))
            })
            .unwrap();
            assert!(report.passes(1e-3), "decoder={decoder}: {report:?}");
        }
    }

    #[test]
    fn exported_attention_is_row_stochastic_and_deterministic() {
        let (store, dec) = live(9, 8, 2, 2, true);
        let run = || {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let y = tape.constant(seeded_normal(3, 8, "y", 9));
            let e = tape.constant(seeded_normal(1, 8, "e", 9));
            let mut sites = Vec::new();
            decoder_refine_tape(&mut tape, y, 1, e, 1, &dec, &bound, Some(&mut sites)).unwrap();
            collect_attention(&tape, "decoder", 1, &sites, 1).unwrap()
        };
        let recs = run();
        assert_eq!(recs.len(), 2 * 2 * 2);
        for r in &recs {
            for row in r.weights.chunks(r.cols) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|x| *x >= 0.0));
            }
            if r.kind == AttentionKind::Cross {
                assert!(r.weights.iter().all(|x| *x == 1.0));
            }
        }
        assert_eq!(recs, run());
    }
}
