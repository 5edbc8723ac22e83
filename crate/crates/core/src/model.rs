//! Encoder-decoder transformer whose every `moe_frequency`-th FFN sublayer
//! is a top-2 gated mixture of experts.
//!
//! Sentences in a batch are packed row-wise into one matrix; attention runs
//! per sentence so they never see each other.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{softmax_rows, AttentionPlan, Graph, Var};
use crate::config::{ModelConfig, MoeLayerInfo, Side};
use crate::error::{Error, Result};
use crate::mask::PruningMask;
use crate::params::{ParamId, ParamStore};
use crate::vocab::Vocab;

/// Routing of one token through one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub layer_id: usize,
    pub token_index: usize,
    pub gate_probs: Vec<f64>,
    pub top1: usize,
    pub top2: usize,
    pub gate_top1: f64,
    pub gate_top2: f64,
}

impl GateDecision {
    /// Softmax over the retained experts' logits (pruned experts get
    /// probability zero) followed by top-2 selection. Ties go to the lower
    /// expert id.
    pub fn from_logits(
        layer_id: usize,
        token_index: usize,
        logits: ArrayView1<f64>,
        retained: Option<&[usize]>,
    ) -> Result<Self> {
        let masked = masked_logits(layer_id, logits.len(), logits.view().insert_axis(Axis(0)), retained)?;
        let probs = softmax_rows(&masked);
        Ok(Self::select(layer_id, token_index, masked.row(0), probs.row(0)))
    }

    fn select(layer_id: usize, token_index: usize, logits: ArrayView1<f64>, probs: ArrayView1<f64>) -> Self {
        let (mut top1, mut top2) = (usize::MAX, usize::MAX);
        for (e, &l) in logits.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            if top1 == usize::MAX || l > logits[top1] {
                top2 = top1;
                top1 = e;
            } else if top2 == usize::MAX || l > logits[top2] {
                top2 = e;
            }
        }
        Self {
            layer_id,
            token_index,
            gate_probs: probs.to_vec(),
            top1,
            top2,
            gate_top1: probs[top1],
            gate_top2: probs[top2],
        }
    }
}

/// Applies a retained-expert set to gate logits by sending pruned experts
/// to `-inf`. Fails when fewer than two experts remain.
fn masked_logits(
    layer_id: usize,
    num_experts: usize,
    logits: ndarray::ArrayView2<f64>,
    retained: Option<&[usize]>,
) -> Result<Array2<f64>> {
    let mut out = logits.to_owned();
    if let Some(keep) = retained {
        if keep.len() < 2 {
            return Err(Error::TooFewExperts {
                layer: layer_id,
                retained: keep.len(),
            });
        }
        if keep.len() < num_experts {
            let additive = pruned_additive(num_experts, keep);
            out += &additive;
        }
    }
    Ok(out)
}

fn pruned_additive(num_experts: usize, keep: &[usize]) -> Array1<f64> {
    let mut add = Array1::from_elem(num_experts, f64::NEG_INFINITY);
    for &e in keep {
        add[e] = 0.0;
    }
    add
}

/// Combines the selected experts' outputs, weighting each by its gate
/// renormalized over the selected set.
pub fn combine_expert_outputs(selected: &[(f64, Array1<f64>)]) -> Array1<f64> {
    let total: f64 = selected.iter().map(|(g, _)| g).sum();
    let mut out = Array1::zeros(selected[0].1.len());
    for (g, y) in selected {
        out.scaled_add(g / total, y);
    }
    out
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
enum FeedForward {
    Dense(Ffn),
    Moe {
        info: MoeLayerInfo,
        gate: ParamId,
        experts: Vec<Ffn>,
    },
}

#[derive(Clone, Debug)]
struct Block {
    self_norm: Norm,
    self_attn: Attention,
    cross: Option<(Norm, Attention)>,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    enc: Vec<Block>,
    enc_norm: Norm,
    dec: Vec<Block>,
    dec_norm: Norm,
    out: Linear,
}

/// Gate probabilities and routing decisions of one MoE layer for every row
/// of a packed batch.
pub struct Routing {
    pub layer_id: usize,
    pub side: Side,
    pub probs: Var,
    pub decisions: Vec<GateDecision>,
}

/// Row boundaries of packed sequences.
#[derive(Clone, Debug)]
pub struct Packing {
    pub lengths: Vec<usize>,
}

impl Packing {
    pub fn new(lengths: Vec<usize>) -> Self {
        Self { lengths }
    }

    pub fn rows(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.lengths
            .iter()
            .map(|l| {
                let o = acc;
                acc += l;
                o
            })
            .collect()
    }

    /// (sequence index, position) for every row.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(s, &l)| (0..l).map(move |p| (s, p)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    layout: Layout,
    positional: Array2<f64>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    zero: bool,
}

impl Init<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let value = if self.zero {
            Array2::zeros((rows, cols))
        } else {
            let normal = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut self.rng))
        };
        self.store.insert(name, value)
    }

    fn filled(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.store.insert(name, Array2::from_elem((1, cols), v))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: self.matrix(format!("{name}.w"), fan_in, fan_out, std),
            b: self.filled(format!("{name}.b"), fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.filled(format!("{name}.gain"), d, 1.0),
            bias: self.filled(format!("{name}.bias"), d, 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, f),
            down: self.linear(&format!("{name}.down"), f, d),
        }
    }
}

fn build_layout(config: &ModelConfig, init: &mut Init) -> Layout {
    let d = config.d_model;
    let embed = init.matrix("embed".into(), config.vocab_size, d, (d as f64).powf(-0.5));
    let moe = config.moe_layers();
    let mut blocks = |side: Side, n: usize, prefix: &str| -> Vec<Block> {
        (0..n)
            .map(|b| {
                let name = format!("{prefix}.{b}");
                let self_norm = init.norm(&format!("{name}.self_norm"), d);
                let self_attn = init.attention(&format!("{name}.self_attn"), d);
                let cross = (side == Side::Decoder).then(|| {
                    (
                        init.norm(&format!("{name}.cross_norm"), d),
                        init.attention(&format!("{name}.cross_attn"), d),
                    )
                });
                let ffn_norm = init.norm(&format!("{name}.ffn_norm"), d);
                let ffn = match moe.iter().find(|l| l.side == side && l.block == b) {
                    Some(info) => FeedForward::Moe {
                        info: *info,
                        gate: init.matrix(format!("{name}.moe.gate"), d, config.num_experts, 0.1),
                        experts: (0..config.num_experts)
                            .map(|e| init.ffn(&format!("{name}.moe.expert{e}"), d, config.d_ffn))
                            .collect(),
                    },
                    None => FeedForward::Dense(init.ffn(&format!("{name}.ffn"), d, config.d_ffn)),
                };
                Block {
                    self_norm,
                    self_attn,
                    cross,
                    ffn_norm,
                    ffn,
                }
            })
            .collect()
    };
    let enc = blocks(Side::Encoder, config.enc_layers, "enc");
    let dec = blocks(Side::Decoder, config.dec_layers, "dec");
    let enc_norm = init.norm("enc.norm", d);
    let dec_norm = init.norm("dec.norm", d);
    let out = init.linear("out", d, config.vocab_size);
    Layout {
        embed,
        enc,
        enc_norm,
        dec,
        dec_norm,
        out,
    }
}

fn sinusoidal(max_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Query sequence `i` attends to key sequence `query_to_key[i]`.
fn attention_plan(
    queries: &Packing,
    keys: &Packing,
    query_to_key: &[usize],
    heads: usize,
    causal: bool,
) -> AttentionPlan {
    let q_off = queries.offsets();
    let k_off = keys.offsets();
    AttentionPlan {
        segments: (0..queries.lengths.len())
            .map(|i| {
                let k = query_to_key[i];
                (q_off[i], queries.lengths[i], k_off[k], keys.lengths[k])
            })
            .collect(),
        heads,
        causal,
    }
}

impl MoEModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut params = ParamStore::default();
        let layout = build_layout(
            &config,
            &mut Init {
                store: &mut params,
                rng: ChaCha8Rng::seed_from_u64(seed),
                zero: false,
            },
        );
        let positional = sinusoidal(config.max_positions, config.d_model);
        Ok(Self {
            config,
            vocab,
            params,
            layout,
            positional,
        })
    }

    /// Rebuilds a model around parameters loaded by name.
    pub fn from_params(config: ModelConfig, vocab: Vocab, loaded: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layout = build_layout(
            &config,
            &mut Init {
                store: &mut params,
                rng: ChaCha8Rng::seed_from_u64(0),
                zero: true,
            },
        );
        if loaded.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                loaded.len(),
                params.len()
            )));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let src = loaded
                .find(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
            let value = loaded.value(src);
            if value.dim() != params.value(id).dim() {
                return Err(Error::Shape(format!("tensor `{name}` has shape {:?}", value.dim())));
            }
            params.value_mut(id).assign(value);
        }
        let positional = sinusoidal(config.max_positions, config.d_model);
        Ok(Self {
            config,
            vocab,
            params,
            layout,
            positional,
        })
    }

    pub fn moe_layer(&self, layer_id: usize) -> Result<MoeLayerInfo> {
        self.config
            .moe_layers()
            .into_iter()
            .find(|l| l.id == layer_id)
            .ok_or(Error::NotMoeLayer(layer_id))
    }

    fn moe_params(&self, layer_id: usize) -> Result<(ParamId, &[Ffn])> {
        let info = self.moe_layer(layer_id)?;
        let blocks = match info.side {
            Side::Encoder => &self.layout.enc,
            Side::Decoder => &self.layout.dec,
        };
        match &blocks[info.block].ffn {
            FeedForward::Moe { gate, experts, .. } => Ok((*gate, experts)),
            FeedForward::Dense(_) => Err(Error::NotMoeLayer(layer_id)),
        }
    }

    fn retained(mask: Option<&PruningMask>, layer_id: usize) -> Result<Option<&[usize]>> {
        match mask {
            None => Ok(None),
            Some(m) => m
                .retained(layer_id)
                .map(Some)
                .ok_or_else(|| Error::Mask(format!("mask has no entry for MoE layer {layer_id}"))),
        }
    }

    /// Gate of one token representation at MoE layer `layer_id`.
    pub fn gate_forward(
        &self,
        x: ArrayView1<f64>,
        layer_id: usize,
        mask: Option<&PruningMask>,
    ) -> Result<GateDecision> {
        let (gate, _) = self.moe_params(layer_id)?;
        if x.len() != self.config.d_model {
            return Err(Error::Shape(format!(
                "token has {} dims, model has {}",
                x.len(),
                self.config.d_model
            )));
        }
        let logits = x.insert_axis(Axis(0)).dot(self.params.value(gate));
        GateDecision::from_logits(layer_id, 0, logits.row(0), Self::retained(mask, layer_id)?)
    }

    /// MoE sublayer output for one token representation.
    pub fn moe_layer_forward(
        &self,
        x: ArrayView1<f64>,
        layer_id: usize,
        mask: Option<&PruningMask>,
    ) -> Result<Array1<f64>> {
        let decision = self.gate_forward(x, layer_id, mask)?;
        let (_, experts) = self.moe_params(layer_id)?;
        let selected = [
            (decision.gate_top1, self.ffn_plain(&experts[decision.top1], x)),
            (decision.gate_top2, self.ffn_plain(&experts[decision.top2], x)),
        ];
        Ok(combine_expert_outputs(&selected))
    }

    fn ffn_plain(&self, ffn: &Ffn, x: ArrayView1<f64>) -> Array1<f64> {
        let p = &self.params;
        let h = (x.dot(p.value(ffn.up.w)) + p.value(ffn.up.b).row(0)).mapv(|v| v.max(0.0));
        h.dot(p.value(ffn.down.w)) + p.value(ffn.down.b).row(0)
    }

    fn linear(&self, g: &mut Graph, l: &Linear, x: Var) -> Var {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, n: &Norm, x: Var) -> Var {
        let gain = g.param(&self.params, n.gain);
        let bias = g.param(&self.params, n.bias);
        g.layer_norm(x, gain, bias)
    }

    fn ffn(&self, g: &mut Graph, f: &Ffn, x: Var) -> Var {
        let h = self.linear(g, &f.up, x);
        let h = g.relu(h);
        self.linear(g, &f.down, h)
    }

    fn attention(&self, g: &mut Graph, a: &Attention, q_in: Var, kv_in: Var, plan: &AttentionPlan) -> Var {
        let q = self.linear(g, &a.q, q_in);
        let k = self.linear(g, &a.k, kv_in);
        let v = self.linear(g, &a.v, kv_in);
        let ctx = g.attention(q, k, v, plan.clone());
        self.linear(g, &a.o, ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn moe(
        &self,
        g: &mut Graph,
        info: MoeLayerInfo,
        gate: ParamId,
        experts: &[Ffn],
        x: Var,
        packing: &Packing,
        mask: Option<&PruningMask>,
    ) -> Result<(Var, Routing)> {
        let n = self.config.num_experts;
        let rows = g.value(x).nrows();
        let w = g.param(&self.params, gate);
        let logits = g.matmul(x, w);
        let retained = Self::retained(mask, info.id)?;
        let masked = match retained {
            Some(keep) if keep.len() < 2 => {
                return Err(Error::TooFewExperts {
                    layer: info.id,
                    retained: keep.len(),
                })
            }
            Some(keep) if keep.len() < n => {
                let add = pruned_additive(n, keep).insert_axis(Axis(0));
                let add = add.broadcast((rows, n)).expect("broadcast").to_owned();
                g.add_const(logits, &add)
            }
            _ => logits,
        };
        let probs = g.softmax_rows(masked);
        let positions = packing.positions();
        let decisions: Vec<GateDecision> = {
            let lv = g.value(masked);
            let pv = g.value(probs);
            (0..rows)
                .map(|r| GateDecision::select(info.id, positions[r].1, lv.row(r), pv.row(r)))
                .collect()
        };
        let mut selection = Array2::zeros((rows, n));
        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, d) in decisions.iter().enumerate() {
            selection[[r, d.top1]] = 1.0;
            selection[[r, d.top2]] = 1.0;
            routed[d.top1].push(r);
            routed[d.top2].push(r);
        }
        let selected = g.mul_const(probs, selection);
        let denom = g.row_sum(selected);
        let weights = g.div_rows(selected, denom);
        let mut parts = Vec::new();
        for (e, mut rows_e) in routed.into_iter().enumerate() {
            if rows_e.is_empty() {
                continue;
            }
            rows_e.sort_unstable();
            let xe = g.gather_rows(x, rows_e.clone());
            let ye = self.ffn(g, &experts[e], xe);
            let we = g.slice_cols(weights, e, 1);
            let we = g.gather_rows(we, rows_e.clone());
            let ye = g.scale_rows(ye, we);
            parts.push((ye, rows_e));
        }
        let out = g.scatter_sum(parts, rows, self.config.d_model);
        Ok((
            out,
            Routing {
                layer_id: info.id,
                side: info.side,
                probs,
                decisions,
            },
        ))
    }

    fn embed(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.len() > self.config.max_positions {
                return Err(Error::Shape(format!(
                    "sequence of {} tokens exceeds max_positions {}",
                    s.len(),
                    self.config.max_positions
                )));
            }
            for (p, &t) in s.iter().enumerate() {
                if t >= self.config.vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id: t,
                        vocab: self.config.vocab_size,
                    });
                }
                ids.push(t);
                pos.push(p);
            }
        }
        if ids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let table = g.param(&self.params, self.layout.embed);
        let e = g.gather_rows(table, ids);
        let e = g.scale(e, (self.config.d_model as f64).sqrt());
        let mut pe = Array2::zeros((pos.len(), self.config.d_model));
        for (r, &p) in pos.iter().enumerate() {
            pe.row_mut(r).assign(&self.positional.row(p));
        }
        Ok(g.add_const(e, &pe))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        block: &Block,
        x: Var,
        self_plan: &AttentionPlan,
        cross: Option<(Var, &AttentionPlan)>,
        packing: &Packing,
        mask: Option<&PruningMask>,
        routing: &mut Vec<Routing>,
    ) -> Result<Var> {
        let h = self.norm(g, &block.self_norm, x);
        let h = self.attention(g, &block.self_attn, h, h, self_plan);
        let mut x = g.add(x, h);
        if let (Some((norm, attn)), Some((enc, cross_plan))) = (&block.cross, cross) {
            let h = self.norm(g, norm, x);
            let h = self.attention(g, attn, h, enc, cross_plan);
            x = g.add(x, h);
        }
        let h = self.norm(g, &block.ffn_norm, x);
        let h = match &block.ffn {
            FeedForward::Dense(f) => self.ffn(g, f, h),
            FeedForward::Moe { info, gate, experts } => {
                let (out, r) = self.moe(g, *info, *gate, experts, h, packing, mask)?;
                routing.push(r);
                out
            }
        };
        Ok(g.add(x, h))
    }

    /// Encodes packed source sequences (language tag first).
    pub fn encode(&self, g: &mut Graph, srcs: &[&[usize]], mask: Option<&PruningMask>) -> Result<(Var, Vec<Routing>)> {
        let packing = Packing::new(srcs.iter().map(|s| s.len()).collect());
        let identity: Vec<usize> = (0..srcs.len()).collect();
        let self_plan = attention_plan(&packing, &packing, &identity, self.config.n_heads, false);
        let mut x = self.embed(g, srcs)?;
        let mut routing = Vec::new();
        for block in &self.layout.enc {
            x = self.block(g, block, x, &self_plan, None, &packing, mask, &mut routing)?;
        }
        Ok((self.norm(g, &self.layout.enc_norm, x), routing))
    }

    /// Runs the decoder over packed target prefixes (language tag first)
    /// and returns vocabulary logits for every row. `tgt_to_src[i]` names
    /// the encoded sequence that prefix `i` attends to.
    pub fn decode(
        &self,
        g: &mut Graph,
        enc: Var,
        src_lengths: &[usize],
        tgts: &[&[usize]],
        tgt_to_src: &[usize],
        mask: Option<&PruningMask>,
    ) -> Result<(Var, Vec<Routing>)> {
        let packing = Packing::new(tgts.iter().map(|s| s.len()).collect());
        let src_packing = Packing::new(src_lengths.to_vec());
        let identity: Vec<usize> = (0..tgts.len()).collect();
        let heads = self.config.n_heads;
        let self_plan = attention_plan(&packing, &packing, &identity, heads, true);
        let cross_plan = attention_plan(&packing, &src_packing, tgt_to_src, heads, false);
        let mut x = self.embed(g, tgts)?;
        let mut routing = Vec::new();
        for block in &self.layout.dec {
            x = self.block(
                g,
                block,
                x,
                &self_plan,
                Some((enc, &cross_plan)),
                &packing,
                mask,
                &mut routing,
            )?;
        }
        let x = self.norm(g, &self.layout.dec_norm, x);
        Ok((self.linear(g, &self.layout.out, x), routing))
    }

    /// Ids of the gate matrix of every MoE layer, in layer order.
    pub fn gate_params(&self) -> Vec<ParamId> {
        self.config
            .moe_layers()
            .iter()
            .map(|l| self.moe_params(l.id).expect("layout has MoE layer").0)
            .collect()
    }
}
