//! Per-expert routing counters, their persistence and aggregation across
//! language directions.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::config::{ModelConfig, Side};
use crate::error::{Error, Result};
use crate::model::GateDecision;

/// How statistics of individual directions are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    /// All directions together.
    Global,
    /// One key per (source, target) direction.
    LangPair,
    /// Encoder pooled per source language, decoder per target language.
    LangSpecific,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Global => "global",
            Granularity::LangPair => "lang_pair",
            Granularity::LangSpecific => "lang_specific",
        }
    }

    /// Accepts the file spelling as well as the short command-line forms
    /// `lang-pair` and `lang`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global" => Some(Granularity::Global),
            "lang_pair" | "lang-pair" => Some(Granularity::LangPair),
            "lang_specific" | "lang-specific" | "lang" => Some(Granularity::LangSpecific),
            _ => None,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsKey {
    pub granularity: Granularity,
    pub side: Side,
    pub src_lang: Option<String>,
    pub tgt_lang: Option<String>,
}

impl StatsKey {
    pub fn global(side: Side) -> Self {
        Self {
            granularity: Granularity::Global,
            side,
            src_lang: None,
            tgt_lang: None,
        }
    }

    pub fn lang_pair(side: Side, src: &str, tgt: &str) -> Self {
        Self {
            granularity: Granularity::LangPair,
            side,
            src_lang: Some(src.into()),
            tgt_lang: Some(tgt.into()),
        }
    }

    /// Source language on the encoder side, target language on the decoder.
    pub fn lang_specific(side: Side, lang: &str) -> Self {
        let (src_lang, tgt_lang) = match side {
            Side::Encoder => (Some(lang.into()), None),
            Side::Decoder => (None, Some(lang.into())),
        };
        Self {
            granularity: Granularity::LangSpecific,
            side,
            src_lang,
            tgt_lang,
        }
    }

    /// The key whose statistics govern `side` when translating `src → tgt`.
    pub fn for_direction(granularity: Granularity, side: Side, src: &str, tgt: &str) -> Self {
        match granularity {
            Granularity::Global => Self::global(side),
            Granularity::LangPair => Self::lang_pair(side, src, tgt),
            Granularity::LangSpecific => match side {
                Side::Encoder => Self::lang_specific(side, src),
                Side::Decoder => Self::lang_specific(side, tgt),
            },
        }
    }

    pub fn is_valid(&self) -> bool {
        let (s, t) = (self.src_lang.is_some(), self.tgt_lang.is_some());
        match self.granularity {
            Granularity::Global => !s && !t,
            Granularity::LangPair => s && t,
            Granularity::LangSpecific => match self.side {
                Side::Encoder => s && !t,
                Side::Decoder => !s && t,
            },
        }
    }
}

impl fmt::Display for StatsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.granularity,
            self.side,
            self.src_lang.as_deref().unwrap_or("-"),
            self.tgt_lang.as_deref().unwrap_or("-")
        )
    }
}

/// Raw counters of one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCounters {
    pub layer_id: usize,
    pub side: Side,
    pub top1_count: Vec<u64>,
    /// Times ranked first or second.
    pub top2_count: Vec<u64>,
    /// Gate probability summed over every token.
    pub gate_sum: Vec<f64>,
    /// Gate probability summed over the tokens where the expert ranked first.
    pub conf_sum: Vec<f64>,
    pub token_count: u64,
}

impl LayerCounters {
    fn new(layer_id: usize, side: Side, n: usize) -> Self {
        Self {
            layer_id,
            side,
            top1_count: vec![0; n],
            top2_count: vec![0; n],
            gate_sum: vec![0.0; n],
            conf_sum: vec![0.0; n],
            token_count: 0,
        }
    }

    fn bump(count: &mut u64, by: u64, layer: usize, expert: usize) -> Result<()> {
        *count = count.checked_add(by).ok_or(Error::CounterOverflow { layer, expert })?;
        Ok(())
    }
}

/// Mergeable counters for a fixed set of MoE layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertStats {
    pub num_experts: usize,
    pub layers: Vec<LayerCounters>,
}

/// Finalized fractions of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFractions {
    pub layer_id: usize,
    pub side: Side,
    pub top1: Vec<f64>,
    pub top2: Vec<f64>,
    pub mean: Vec<f64>,
    pub conf: Vec<f64>,
}

impl ExpertStats {
    pub fn empty(layers: &[(usize, Side)], num_experts: usize) -> Self {
        Self {
            num_experts,
            layers: layers
                .iter()
                .map(|&(id, side)| LayerCounters::new(id, side, num_experts))
                .collect(),
        }
    }

    /// Empty counters for the MoE layers on one side of the model.
    pub fn for_side(config: &ModelConfig, side: Side) -> Self {
        let layers: Vec<(usize, Side)> = config.moe_layers_on(side).iter().map(|l| (l.id, l.side)).collect();
        Self::empty(&layers, config.num_experts)
    }

    pub fn layer(&self, layer_id: usize) -> Option<&LayerCounters> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    pub fn record(&mut self, d: &GateDecision) -> Result<()> {
        let n = self.num_experts;
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.layer_id == d.layer_id)
            .ok_or(Error::NotMoeLayer(d.layer_id))?;
        if d.gate_probs.len() != n || d.top1 >= n || d.top2 >= n {
            return Err(Error::Shape(format!(
                "gate decision over {} experts recorded into stats over {n}",
                d.gate_probs.len()
            )));
        }
        let id = d.layer_id;
        LayerCounters::bump(&mut layer.token_count, 1, id, d.top1)?;
        LayerCounters::bump(&mut layer.top1_count[d.top1], 1, id, d.top1)?;
        LayerCounters::bump(&mut layer.top2_count[d.top1], 1, id, d.top1)?;
        LayerCounters::bump(&mut layer.top2_count[d.top2], 1, id, d.top2)?;
        layer.conf_sum[d.top1] += d.gate_top1;
        for (s, p) in layer.gate_sum.iter_mut().zip(&d.gate_probs) {
            *s += p;
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.num_experts == other.num_experts
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.layer_id == b.layer_id && a.side == b.side)
    }

    /// Adds `other` field by field.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(
                "cannot merge statistics over different layers or expert counts".into(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            let id = a.layer_id;
            LayerCounters::bump(&mut a.token_count, b.token_count, id, 0)?;
            for e in 0..self.num_experts {
                LayerCounters::bump(&mut a.top1_count[e], b.top1_count[e], id, e)?;
                LayerCounters::bump(&mut a.top2_count[e], b.top2_count[e], id, e)?;
                a.gate_sum[e] += b.gate_sum[e];
                a.conf_sum[e] += b.conf_sum[e];
            }
        }
        Ok(())
    }

    pub fn merged(a: &Self, b: &Self) -> Result<Self> {
        let mut out = a.clone();
        out.merge(b)?;
        Ok(out)
    }

    /// Joins the layers of two disjoint stats (encoder then decoder).
    pub fn concat(first: &Self, second: &Self) -> Result<Self> {
        if first.num_experts != second.num_experts {
            return Err(Error::Shape("expert counts differ".into()));
        }
        let mut layers = first.layers.clone();
        layers.extend(second.layers.iter().cloned());
        layers.sort_by_key(|l| l.layer_id);
        if layers.windows(2).any(|w| w[0].layer_id == w[1].layer_id) {
            return Err(Error::Shape("layer present in both halves".into()));
        }
        Ok(Self {
            num_experts: first.num_experts,
            layers,
        })
    }

    /// Turns counters into fractions. `key` names the statistics in errors.
    pub fn finalize(&self, key: &str) -> Result<Vec<LayerFractions>> {
        self.layers
            .iter()
            .map(|l| {
                if l.token_count == 0 {
                    return Err(Error::EmptyStats {
                        layer: l.layer_id,
                        key: key.into(),
                    });
                }
                let t = l.token_count as f64;
                Ok(LayerFractions {
                    layer_id: l.layer_id,
                    side: l.side,
                    top1: l.top1_count.iter().map(|&c| c as f64 / t).collect(),
                    top2: l.top2_count.iter().map(|&c| c as f64 / t).collect(),
                    mean: l.gate_sum.iter().map(|&s| s / t).collect(),
                    conf: l
                        .conf_sum
                        .iter()
                        .zip(&l.top1_count)
                        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                        .collect(),
                })
            })
            .collect()
    }
}

/// Sink for gate decisions produced while decoding.
pub trait GateRecorder {
    fn record(&mut self, side: Side, decision: &GateDecision) -> Result<()>;
}

/// Encoder and decoder counters of one translation direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionStats {
    pub encoder: ExpertStats,
    pub decoder: ExpertStats,
}

impl DirectionStats {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            encoder: ExpertStats::for_side(config, Side::Encoder),
            decoder: ExpertStats::for_side(config, Side::Decoder),
        }
    }

    pub fn side(&self, side: Side) -> &ExpertStats {
        match side {
            Side::Encoder => &self.encoder,
            Side::Decoder => &self.decoder,
        }
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.encoder.merge(&other.encoder)?;
        self.decoder.merge(&other.decoder)
    }
}

impl GateRecorder for DirectionStats {
    fn record(&mut self, side: Side, decision: &GateDecision) -> Result<()> {
        match side {
            Side::Encoder => self.encoder.record(decision),
            Side::Decoder => self.decoder.record(decision),
        }
    }
}

/// Direction `(src, tgt)` to its counters.
pub type PerDirection = BTreeMap<(String, String), DirectionStats>;

/// Statistics keyed by [`StatsKey`].
pub type KeyedStats = BTreeMap<StatsKey, ExpertStats>;

/// Pools per-direction counters at `granularity` over `directions`.
/// Raw counters are summed; fractions are never averaged.
pub fn aggregate_by_granularity(
    per_direction: &PerDirection,
    directions: &[(String, String)],
    granularity: Granularity,
) -> Result<KeyedStats> {
    let missing: Vec<String> = directions
        .iter()
        .filter(|d| !per_direction.contains_key(*d))
        .map(|(s, t)| format!("{s}-{t}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingDirection(missing.join(", ")));
    }
    let mut out = KeyedStats::new();
    for (src, tgt) in directions {
        let stats = &per_direction[&(src.clone(), tgt.clone())];
        for side in [Side::Encoder, Side::Decoder] {
            let key = StatsKey::for_direction(granularity, side, src, tgt);
            match out.get_mut(&key) {
                Some(acc) => acc.merge(stats.side(side))?,
                None => {
                    out.insert(key, stats.side(side).clone());
                }
            }
        }
    }
    Ok(out)
}

/// Full-model counters governing `src → tgt`: the encoder key's layers
/// followed by the decoder key's.
pub fn stats_for_direction(
    keyed: &KeyedStats,
    granularity: Granularity,
    src: &str,
    tgt: &str,
) -> Result<(String, ExpertStats)> {
    let enc_key = StatsKey::for_direction(granularity, Side::Encoder, src, tgt);
    let dec_key = StatsKey::for_direction(granularity, Side::Decoder, src, tgt);
    let enc = keyed
        .get(&enc_key)
        .ok_or_else(|| Error::MissingDirection(format!("{src}-{tgt} (no {enc_key})")))?;
    let dec = keyed
        .get(&dec_key)
        .ok_or_else(|| Error::MissingDirection(format!("{src}-{tgt} (no {dec_key})")))?;
    Ok((mask_key(granularity, src, tgt), ExpertStats::concat(enc, dec)?))
}

/// Name of the mask used for `src → tgt` at `granularity`; directions that
/// share statistics share the name.
pub fn mask_key(granularity: Granularity, src: &str, tgt: &str) -> String {
    match granularity {
        Granularity::Global => "global".into(),
        Granularity::LangPair => format!("lang_pair:{src}-{tgt}"),
        Granularity::LangSpecific => format!("lang_specific:enc={src},dec={tgt}"),
    }
}

pub const STATS_HEADER: &str =
    "granularity\tside\tsrc_lang\ttgt_lang\tlayer_id\texpert_id\ttop1_count\ttop2_count\tgate_sum\tconf_sum\ttoken_count";

/// One line per (key, layer, expert). Sums are written with 17
/// significant digits so that reading them back is lossless.
pub fn write_stats(stats: &KeyedStats) -> String {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for (key, s) in stats {
        for l in &s.layers {
            for e in 0..s.num_experts {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.16e}\t{:.16e}\t{}",
                    key.granularity,
                    key.side,
                    key.src_lang.as_deref().unwrap_or("-"),
                    key.tgt_lang.as_deref().unwrap_or("-"),
                    l.layer_id,
                    e,
                    l.top1_count[e],
                    l.top2_count[e],
                    l.gate_sum[e],
                    l.conf_sum[e],
                    l.token_count
                )
                .unwrap();
            }
        }
    }
    out
}

/// `(expert_id, top1, top2, gate_sum, conf_sum)` as read from one row.
type ExpertRow = (usize, u64, u64, f64, f64);

/// Layer id to `(side, token_count, rows)`.
type LayerRows = BTreeMap<usize, (Side, u64, Vec<ExpertRow>)>;

pub fn parse_stats(text: &str) -> Result<KeyedStats> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == STATS_HEADER => {}
        _ => return Err(Error::parse("stats", 1, "missing header")),
    }
    // key -> layer -> expert rows, checked for completeness afterwards
    let mut rows: BTreeMap<StatsKey, LayerRows> = BTreeMap::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::parse("stats", i + 1, msg);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 11 {
            return Err(bad("expected 11 fields"));
        }
        let granularity = Granularity::parse(f[0]).ok_or_else(|| bad("unknown granularity"))?;
        let side = Side::parse(f[1]).ok_or_else(|| bad("unknown side"))?;
        let lang = |s: &str| (s != "-").then(|| s.to_string());
        let key = StatsKey {
            granularity,
            side,
            src_lang: lang(f[2]),
            tgt_lang: lang(f[3]),
        };
        if !key.is_valid() {
            return Err(bad("languages do not match granularity"));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad("expected an integer"));
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad("expected a number"));
        let layer_id = int(f[4])? as usize;
        let row = (int(f[5])? as usize, int(f[6])?, int(f[7])?, float(f[8])?, float(f[9])?);
        let tokens = int(f[10])?;
        let entry = rows
            .entry(key)
            .or_default()
            .entry(layer_id)
            .or_insert_with(|| (side, tokens, Vec::new()));
        if entry.1 != tokens {
            return Err(bad("token_count differs within a layer"));
        }
        entry.2.push(row);
    }
    let mut out = KeyedStats::new();
    for (key, layers) in rows {
        let n = layers.values().next().map_or(0, |l| l.2.len());
        let mut stats = ExpertStats {
            num_experts: n,
            layers: Vec::new(),
        };
        for (layer_id, (side, tokens, experts)) in layers {
            let mut c = LayerCounters::new(layer_id, side, n);
            c.token_count = tokens;
            let mut seen = vec![false; n];
            for (e, t1, t2, g, cf) in experts {
                if e >= n || seen[e] {
                    return Err(Error::parse(
                        "stats",
                        0,
                        format!("bad expert ids in layer {layer_id} of {key}"),
                    ));
                }
                seen[e] = true;
                c.top1_count[e] = t1;
                c.top2_count[e] = t2;
                c.gate_sum[e] = g;
                c.conf_sum[e] = cf;
            }
            if seen.len() != n || !seen.iter().all(|&s| s) {
                return Err(Error::parse(
                    "stats",
                    0,
                    format!("layer {layer_id} of {key} is incomplete"),
                ));
            }
            stats.layers.push(c);
        }
        out.insert(key, stats);
    }
    Ok(out)
}

/// Per-direction counters as lang-pair keyed statistics, for persisting.
pub fn per_direction_to_keyed(per_direction: &PerDirection) -> KeyedStats {
    let mut out = KeyedStats::new();
    for ((s, t), d) in per_direction {
        out.insert(StatsKey::lang_pair(Side::Encoder, s, t), d.encoder.clone());
        out.insert(StatsKey::lang_pair(Side::Decoder, s, t), d.decoder.clone());
    }
    out
}

/// Inverse of [`per_direction_to_keyed`].
pub fn keyed_to_per_direction(keyed: &KeyedStats) -> Result<PerDirection> {
    let mut out = PerDirection::new();
    let mut halves: BTreeMap<(String, String), (Option<ExpertStats>, Option<ExpertStats>)> = BTreeMap::new();
    for (k, s) in keyed {
        if k.granularity != Granularity::LangPair {
            return Err(Error::Invalid(format!(
                "expected per-direction statistics, found key {k}"
            )));
        }
        let dir = (
            k.src_lang.clone().unwrap_or_default(),
            k.tgt_lang.clone().unwrap_or_default(),
        );
        let h = halves.entry(dir).or_default();
        match k.side {
            Side::Encoder => h.0 = Some(s.clone()),
            Side::Decoder => h.1 = Some(s.clone()),
        }
    }
    for ((s, t), h) in halves {
        match h {
            (Some(encoder), Some(decoder)) => {
                out.insert((s, t), DirectionStats { encoder, decoder });
            }
            _ => return Err(Error::MissingDirection(format!("{s}-{t} (one side missing)"))),
        }
    }
    Ok(out)
}
