//! Pre-LayerNorm decoder transformer with routed, learned-gate or dense FFNs.

mod config;
mod layers;

pub use config::{AnchorInit, ModelConfig, ParamCounts, Variant, LAYER_NORM_EPS, ROPE_BASE};
pub use layers::{gelu, gelu_grad, rope_apply, Attention, ExpertFfn, LayerNorm};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matmul, matmul_nt, matmul_tn, Matrix};
use crate::record::{RouteEntry, RoutingRecord};
use crate::rng::{self, standard_normal};
use crate::router::{
    resonance_backward, resonance_matrix, select_topk, topk_backward, AnchorSet, RoutingDecision,
};

use layers::{dropout_mask, AttnCache, FfnActs, LnCache, RopeTable};

/// Produces the T×N score matrix of a mixture layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    /// Cosine similarity against learnable anchors.
    Resonance(AnchorSet),
    /// Raw scores `h · W`, `W` being D×N.
    Gate(Matrix),
}

impl Router {
    pub fn n_experts(&self) -> usize {
        match self {
            Router::Resonance(a) => a.n_experts(),
            Router::Gate(w) => w.cols(),
        }
    }

    pub fn scores(&self, h: &Matrix) -> Result<Matrix> {
        match self {
            Router::Resonance(a) => resonance_matrix(h, a),
            Router::Gate(w) => h.matmul(w),
        }
    }

    pub fn anchors(&self) -> Option<&AnchorSet> {
        match self {
            Router::Resonance(a) => Some(a),
            Router::Gate(_) => None,
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Router::Resonance(a) => Router::Resonance(AnchorSet::zeros(a.n_experts(), a.dim())),
            Router::Gate(w) => Router::Gate(Matrix::zeros(w.rows(), w.cols())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Moe {
        router: Router,
        experts: Vec<ExpertFfn>,
    },
    Dense(ExpertFfn),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    /// V×D, shared with the output projection.
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Experts per token; ignored by the dense variant.
    pub k: usize,
    /// Routing noise, applied in train mode only.
    pub noise_sigma: f64,
    pub mode: Mode,
}

impl ForwardOptions {
    pub fn eval(k: usize) -> Self {
        Self {
            k,
            noise_sigma: 0.0,
            mode: Mode::Eval,
        }
    }

    pub fn train(k: usize, noise_sigma: f64) -> Self {
        Self {
            k,
            noise_sigma,
            mode: Mode::Train,
        }
    }
}

/// Borrowed view of one parameter array.
pub struct Param<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [f64],
    /// Whether weight decay applies.
    pub decay: bool,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
    pub decay: bool,
}

struct ExpertGroup {
    expert: usize,
    /// (token row, slot in its decision)
    rows: Vec<(usize, usize)>,
    acts: FfnActs,
}

enum FfnCache {
    Moe {
        scores: Matrix,
        decisions: Vec<RoutingDecision>,
        groups: Vec<ExpertGroup>,
    },
    Dense(FfnActs),
}

struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    drop_attn: Option<Vec<f64>>,
    ln2: LnCache,
    xn2: Matrix,
    ffn: FfnCache,
    drop_ffn: Option<Vec<f64>>,
}

pub struct ForwardCache {
    tokens: Vec<u32>,
    lanes: usize,
    seq_len: usize,
    rope: RopeTable,
    blocks: Vec<BlockCache>,
    ln_final: LnCache,
    final_hidden: Matrix,
}

/// Output of [`Model::forward`].
pub struct ForwardPass {
    /// (B·L)×V, row `b·L + i` for lane `b`, position `i`.
    pub logits: Matrix,
    /// Pre-noise router scores, one T×N matrix per mixture layer.
    pub scores: Vec<Matrix>,
    /// Token positions are `b·L + i`. Empty for the dense variant.
    pub records: RoutingRecord,
    pub cache: ForwardCache,
}

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * standard_normal(rng))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

fn init_expert<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize, std: f64) -> ExpertFfn {
    ExpertFfn {
        w_in: gaussian_matrix(rng, dim, hidden, std),
        b_in: vec![0.0; hidden],
        w_out: gaussian_matrix(rng, hidden, dim, std),
        b_out: vec![0.0; dim],
    }
}

fn apply_mask(x: &mut Matrix, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.as_mut_slice()
            .iter_mut()
            .zip(m)
            .for_each(|(v, s)| *v *= s);
    }
}

fn masked(dx: &Matrix, mask: &Option<Vec<f64>>) -> Matrix {
    let mut out = dx.clone();
    apply_mask(&mut out, mask);
    out
}

macro_rules! push_expert {
    ($push:ident, $prefix:expr, $e:expr, $as:ident) => {{
        let prefix = $prefix;
        let e = $e;
        let (d, f) = e.w_in.shape();
        $push(format!("{prefix}.w_in"), (d, f), e.w_in.$as(), true);
        $push(format!("{prefix}.b_in"), (1, f), e.b_in.$as(), false);
        $push(format!("{prefix}.w_out"), (f, d), e.w_out.$as(), true);
        $push(format!("{prefix}.b_out"), (1, d), e.b_out.$as(), false);
    }};
}

macro_rules! param_list {
    ($self:ident, $ty:ident, $iter:ident, $as:ident, $anchor:ident $(, $m:tt)?) => {{
        let mut out = Vec::new();
        let mut push = |name: String, shape: (usize, usize), data, decay: bool| {
            out.push($ty {
                name,
                shape,
                data,
                decay,
            })
        };
        let shape = $self.embedding.shape();
        push("embedding".into(), shape, $self.embedding.$as(), true);
        for (i, block) in $self.blocks.$iter().enumerate() {
            for (tag, ln) in [("ln1", & $($m)? block.ln1), ("ln2", & $($m)? block.ln2)] {
                let d = ln.gamma.len();
                push(format!("blocks.{i}.{tag}.gamma"), (1, d), ln.gamma.$as(), false);
                push(format!("blocks.{i}.{tag}.beta"), (1, d), ln.beta.$as(), false);
            }
            let attn = & $($m)? block.attn;
            for (tag, w) in [
                ("wq", & $($m)? attn.wq),
                ("wk", & $($m)? attn.wk),
                ("wv", & $($m)? attn.wv),
                ("wo", & $($m)? attn.wo),
            ] {
                let shape = w.shape();
                push(format!("blocks.{i}.attn.{tag}"), shape, w.$as(), true);
            }
            match & $($m)? block.ffn {
                FeedForward::Moe { router, experts } => {
                    match router {
                        Router::Resonance(a) => {
                            let m = a.$anchor();
                            let shape = m.shape();
                            push(format!("blocks.{i}.ffn.anchors"), shape, m.$as(), false);
                        }
                        Router::Gate(w) => {
                            let shape = w.shape();
                            push(format!("blocks.{i}.ffn.gate"), shape, w.$as(), true);
                        }
                    }
                    for (e, expert) in experts.$iter().enumerate() {
                        push_expert!(push, format!("blocks.{i}.ffn.experts.{e}"), expert, $as);
                    }
                }
                FeedForward::Dense(expert) => {
                    push_expert!(push, format!("blocks.{i}.ffn"), expert, $as)
                }
            }
        }
        let d = $self.ln_final.gamma.len();
        push("ln_final.gamma".into(), (1, d), $self.ln_final.gamma.$as(), false);
        push("ln_final.beta".into(), (1, d), $self.ln_final.beta.$as(), false);
        out
    }};
}

impl Model {
    /// Initializes every weight from `seed`: Gaussian(0, init_std) matrices,
    /// zero biases, unit norms and anchors per `anchor_init`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0);
        let (d, std) = (config.dim, config.init_std);
        let embedding = gaussian_matrix(&mut rng, config.vocab_size, d, std);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = Attention {
                wq: gaussian_matrix(&mut rng, d, d, std),
                wk: gaussian_matrix(&mut rng, d, d, std),
                wv: gaussian_matrix(&mut rng, d, d, std),
                wo: gaussian_matrix(&mut rng, d, d, std),
            };
            let ffn = match config.variant {
                Variant::Dense => {
                    FeedForward::Dense(init_expert(&mut rng, d, config.dense_hidden(), std))
                }
                Variant::Sra | Variant::StandardMoe => {
                    let router = if config.variant == Variant::Sra {
                        let anchor_seed = rng.gen::<u64>();
                        Router::Resonance(match config.anchor_init {
                            AnchorInit::Orthogonal => {
                                AnchorSet::orthogonal(config.n_experts, d, anchor_seed)?
                            }
                            AnchorInit::Kaiming => {
                                AnchorSet::kaiming(config.n_experts, d, anchor_seed)?
                            }
                        })
                    } else {
                        Router::Gate(gaussian_matrix(&mut rng, d, config.n_experts, std))
                    };
                    let experts = (0..config.n_experts)
                        .map(|_| init_expert(&mut rng, d, config.d_ff, std))
                        .collect();
                    FeedForward::Moe { router, experts }
                }
            };
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                attn,
                ln2: LayerNorm::new(d),
                ffn,
            });
        }
        Ok(Self {
            config,
            embedding,
            blocks,
            ln_final: LayerNorm::new(d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The output projection; the same storage as [`Model::embedding`].
    pub fn output_projection(&self) -> &Matrix {
        &self.embedding
    }

    /// Same structure, every parameter zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let d = self.config.dim;
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                ln1: LayerNorm::zeros(d),
                attn: Attention::zeros(d),
                ln2: LayerNorm::zeros(d),
                ffn: match &b.ffn {
                    FeedForward::Moe { router, experts } => FeedForward::Moe {
                        router: router.zeros_like(),
                        experts: experts
                            .iter()
                            .map(|e| ExpertFfn::zeros(e.dim(), e.hidden()))
                            .collect(),
                    },
                    FeedForward::Dense(e) => {
                        FeedForward::Dense(ExpertFfn::zeros(e.dim(), e.hidden()))
                    }
                },
            })
            .collect();
        Self {
            config: self.config.clone(),
            embedding: Matrix::zeros(self.embedding.rows(), self.embedding.cols()),
            blocks,
            ln_final: LayerNorm::zeros(d),
        }
    }

    /// Every parameter array in a fixed order with stable names.
    pub fn params(&self) -> Vec<Param<'_>> {
        param_list!(self, Param, iter, as_slice, matrix)
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        param_list!(self, ParamMut, iter_mut, as_mut_slice, matrix_mut, mut)
    }

    /// Anchor sets of the resonance layers, in layer order.
    pub fn anchor_sets(&self) -> Vec<&AnchorSet> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                FeedForward::Moe { router, .. } => router.anchors(),
                FeedForward::Dense(_) => None,
            })
            .collect()
    }

    /// Counts the allocated parameters. Active excludes the `N − top_k`
    /// unselected experts of each mixture layer.
    pub fn count_parameters(&self) -> ParamCounts {
        let total: usize = self.params().iter().map(|p| p.data.len()).sum();
        let mut inactive = 0;
        for b in &self.blocks {
            if let FeedForward::Moe { experts, .. } = &b.ffn {
                let unused = experts.len() - self.config.top_k.min(experts.len());
                inactive += unused * experts.first().map_or(0, ExpertFfn::n_params);
            }
        }
        ParamCounts {
            total: total as u64,
            active_per_token: (total - inactive) as u64,
        }
    }

    fn check_inputs(&self, tokens: &[u32], lanes: usize, seq_len: usize) -> Result<()> {
        if lanes == 0 || seq_len == 0 {
            return Err(Error::InvalidArgument(
                "batch and sequence length must be positive".into(),
            ));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        crate::error::ensure_len("token batch", lanes * seq_len, tokens.len())?;
        let v = self.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::TokenOutOfRange { id, vocab_size: v });
        }
        Ok(())
    }

    /// Runs `lanes` sequences of `seq_len` tokens each (row-major in `tokens`).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tokens: &[u32],
        lanes: usize,
        seq_len: usize,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        self.check_inputs(tokens, lanes, seq_len)?;
        let train = opts.mode == Mode::Train;
        let sigma = if train { opts.noise_sigma } else { 0.0 };
        let p_drop = if train { self.config.dropout } else { 0.0 };
        let d = self.config.dim;
        let t_total = tokens.len();
        let rope = RopeTable::new(self.config.head_dim(), 0..seq_len);

        let mut x = Matrix::zeros(t_total, d);
        for (t, &id) in tokens.iter().enumerate() {
            x.row_mut(t)
                .copy_from_slice(self.embedding.row(id as usize));
        }

        let n_moe = self
            .blocks
            .iter()
            .filter(|b| matches!(b.ffn, FeedForward::Moe { .. }))
            .count();
        let mut records =
            RoutingRecord::new(if n_moe > 0 { self.config.n_experts } else { 0 }, n_moe);
        let mut all_scores = Vec::with_capacity(n_moe);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut moe_idx = 0;
        for block in &self.blocks {
            let (xn1, ln1) = block.ln1.forward(&x);
            let (mut a, attn) = block
                .attn
                .forward(xn1, lanes, seq_len, self.config.n_heads, &rope);
            let drop_attn = (p_drop > 0.0).then(|| dropout_mask(rng, t_total * d, p_drop));
            apply_mask(&mut a, &drop_attn);
            axpy(1.0, a.as_slice(), x.as_mut_slice());

            let (xn2, ln2) = block.ln2.forward(&x);
            let (mut y, ffn) = match &block.ffn {
                FeedForward::Dense(expert) => {
                    let acts = expert.forward_rows(xn2.clone());
                    (acts.out.clone(), FfnCache::Dense(acts))
                }
                FeedForward::Moe { router, experts } => {
                    let scores = router.scores(&xn2)?;
                    let mut decisions = Vec::with_capacity(t_total);
                    let mut assigned: Vec<Vec<(usize, usize)>> = vec![Vec::new(); experts.len()];
                    let layer = &mut records.layers[moe_idx];
                    layer.entries.reserve(t_total);
                    for t in 0..t_total {
                        let dec = select_topk(scores.row(t), opts.k, sigma, rng)?;
                        for (slot, &e) in dec.indices.iter().enumerate() {
                            assigned[e].push((t, slot));
                        }
                        layer.entries.push(RouteEntry {
                            position: t,
                            token: Some(tokens[t]),
                            experts: dec.indices.clone(),
                            weights: dec.weights.clone(),
                        });
                        decisions.push(dec);
                    }
                    let mut y = Matrix::zeros(t_total, d);
                    let mut groups = Vec::new();
                    for (e, rows) in assigned.into_iter().enumerate() {
                        if rows.is_empty() {
                            continue;
                        }
                        let mut input = Matrix::zeros(rows.len(), d);
                        for (r, &(t, _)) in rows.iter().enumerate() {
                            input.row_mut(r).copy_from_slice(xn2.row(t));
                        }
                        let acts = experts[e].forward_rows(input);
                        for (r, &(t, slot)) in rows.iter().enumerate() {
                            axpy(decisions[t].weights[slot], acts.out.row(r), y.row_mut(t));
                        }
                        groups.push(ExpertGroup {
                            expert: e,
                            rows,
                            acts,
                        });
                    }
                    moe_idx += 1;
                    all_scores.push(scores.clone());
                    (
                        y,
                        FfnCache::Moe {
                            scores,
                            decisions,
                            groups,
                        },
                    )
                }
            };
            let drop_ffn = (p_drop > 0.0).then(|| dropout_mask(rng, t_total * d, p_drop));
            apply_mask(&mut y, &drop_ffn);
            axpy(1.0, y.as_slice(), x.as_mut_slice());
            caches.push(BlockCache {
                ln1,
                attn,
                drop_attn,
                ln2,
                xn2,
                ffn,
                drop_ffn,
            });
        }

        let (final_hidden, ln_final) = self.ln_final.forward(&x);
        let v = self.config.vocab_size;
        let mut logits = Matrix::zeros(t_total, v);
        matmul_nt(
            final_hidden.as_slice(),
            self.embedding.as_slice(),
            logits.as_mut_slice(),
            t_total,
            d,
            v,
        );
        Ok(ForwardPass {
            logits,
            scores: all_scores,
            records,
            cache: ForwardCache {
                tokens: tokens.to_vec(),
                lanes,
                seq_len,
                rope,
                blocks: caches,
                ln_final,
                final_hidden,
            },
        })
    }

    /// Backpropagates `dlogits` plus extra score gradients (one T×N matrix per
    /// mixture layer, e.g. from auxiliary losses) and returns parameter gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
        dscores_extra: &[Matrix],
    ) -> Result<Model> {
        let d = self.config.dim;
        let v = self.config.vocab_size;
        let t_total = cache.tokens.len();
        crate::error::ensure_len("logit gradient rows", t_total, dlogits.rows())?;
        crate::error::ensure_len("logit gradient cols", v, dlogits.cols())?;
        let n_moe = cache
            .blocks
            .iter()
            .filter(|b| matches!(b.ffn, FfnCache::Moe { .. }))
            .count();
        if !dscores_extra.is_empty() {
            crate::error::ensure_len("score gradient layers", n_moe, dscores_extra.len())?;
        }
        let mut grad = self.zeros_like();

        matmul_tn(
            dlogits.as_slice(),
            cache.final_hidden.as_slice(),
            grad.embedding.as_mut_slice(),
            t_total,
            v,
            d,
        );
        let mut dxf = Matrix::zeros(t_total, d);
        matmul(
            dlogits.as_slice(),
            self.embedding.as_slice(),
            dxf.as_mut_slice(),
            t_total,
            v,
            d,
        );
        let mut dx = self
            .ln_final
            .backward(&dxf, &cache.ln_final, &mut grad.ln_final);

        let mut moe_idx = n_moe;
        for (li, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gblock = &mut grad.blocks[li];
            let dy = masked(&dx, &bc.drop_ffn);
            let mut dxn2 = Matrix::zeros(t_total, d);
            match (&block.ffn, &bc.ffn, &mut gblock.ffn) {
                (FeedForward::Dense(expert), FfnCache::Dense(acts), FeedForward::Dense(gexp)) => {
                    dxn2 = expert.backward_rows(&dy, acts, gexp);
                }
                (
                    FeedForward::Moe { router, experts },
                    FfnCache::Moe {
                        scores,
                        decisions,
                        groups,
                    },
                    FeedForward::Moe {
                        router: grouter,
                        experts: gexperts,
                    },
                ) => {
                    moe_idx -= 1;
                    let mut dweights: Vec<Vec<f64>> = decisions
                        .iter()
                        .map(|dec| vec![0.0; dec.indices.len()])
                        .collect();
                    for g in groups {
                        let mut dout = Matrix::zeros(g.rows.len(), d);
                        for (r, &(t, slot)) in g.rows.iter().enumerate() {
                            dweights[t][slot] = dot(dy.row(t), g.acts.out.row(r));
                            axpy(decisions[t].weights[slot], dy.row(t), dout.row_mut(r));
                        }
                        let dinput = experts[g.expert].backward_rows(
                            &dout,
                            &g.acts,
                            &mut gexperts[g.expert],
                        );
                        for (r, &(t, _)) in g.rows.iter().enumerate() {
                            axpy(1.0, dinput.row(r), dxn2.row_mut(t));
                        }
                    }
                    let mut dscores = match dscores_extra.get(moe_idx) {
                        Some(extra) => {
                            crate::error::ensure_len("score gradient rows", t_total, extra.rows())?;
                            crate::error::ensure_len(
                                "score gradient cols",
                                scores.cols(),
                                extra.cols(),
                            )?;
                            extra.clone()
                        }
                        None => Matrix::zeros(t_total, scores.cols()),
                    };
                    for (t, dec) in decisions.iter().enumerate() {
                        topk_backward(dec, &dweights[t], dscores.row_mut(t));
                    }
                    match (router, grouter) {
                        (Router::Resonance(anchors), Router::Resonance(ganchors)) => {
                            resonance_backward(
                                &bc.xn2,
                                anchors,
                                &dscores,
                                &mut dxn2,
                                ganchors.matrix_mut(),
                            );
                        }
                        (Router::Gate(w), Router::Gate(gw)) => {
                            let n = w.cols();
                            matmul_tn(
                                bc.xn2.as_slice(),
                                dscores.as_slice(),
                                gw.as_mut_slice(),
                                t_total,
                                d,
                                n,
                            );
                            matmul_nt(
                                dscores.as_slice(),
                                w.as_slice(),
                                dxn2.as_mut_slice(),
                                t_total,
                                n,
                                d,
                            );
                        }
                        _ => unreachable!("gradient mirrors model structure"),
                    }
                }
                _ => unreachable!("cache mirrors model structure"),
            }
            let dh = block.ln2.backward(&dxn2, &bc.ln2, &mut gblock.ln2);
            axpy(1.0, dh.as_slice(), dx.as_mut_slice());

            let da = masked(&dx, &bc.drop_attn);
            let dxn1 = block.attn.backward(
                &da,
                &bc.attn,
                cache.lanes,
                cache.seq_len,
                self.config.n_heads,
                &cache.rope,
                &mut gblock.attn,
            );
            let dres = block.ln1.backward(&dxn1, &bc.ln1, &mut gblock.ln1);
            axpy(1.0, dres.as_slice(), dx.as_mut_slice());
        }

        for (t, &id) in cache.tokens.iter().enumerate() {
            axpy(1.0, dx.row(t), grad.embedding.row_mut(id as usize));
        }
        Ok(grad)
    }
}
