//! chrF++ scoring, corpus evaluation reports and memory estimates.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::analysis::length_ratio;
use crate::corpus::{CorpusSample, ParallelLine};
use crate::decode::translate_corpus;
use crate::error::{Error, Result};
use crate::mask::PruningMask;
use crate::model::MoEModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChrfParams {
    pub char_ngram_max: usize,
    pub word_ngram_max: usize,
    pub beta: f64,
}

impl Default for ChrfParams {
    fn default() -> Self {
        Self {
            char_ngram_max: 6,
            word_ngram_max: 2,
            beta: 2.0,
        }
    }
}

/// `(hypothesis n-grams, reference n-grams, matches)` for every order,
/// character orders first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChrfStats(pub Vec<[u64; 3]>);

impl ChrfStats {
    fn zero(orders: usize) -> Self {
        Self(vec![[0; 3]; orders])
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for i in 0..3 {
                a[i] += b[i];
            }
        }
    }

    /// F-beta of precision and recall averaged over the orders that occur
    /// in both hypothesis and reference, scaled to 0..100.
    pub fn score(&self, beta: f64) -> f64 {
        let factor = beta * beta;
        let (mut p, mut r, mut effective) = (0.0, 0.0, 0usize);
        for &[hyp, rf, m] in &self.0 {
            if hyp > 0 && rf > 0 {
                p += m as f64 / hyp as f64;
                r += m as f64 / rf as f64;
                effective += 1;
            }
        }
        if effective == 0 {
            return 0.0;
        }
        p /= effective as f64;
        r /= effective as f64;
        if p + r == 0.0 {
            return 0.0;
        }
        100.0 * (1.0 + factor) * p * r / (factor * p + r)
    }
}

const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Whitespace tokens with one leading or trailing punctuation mark split
/// off (trailing checked first).
fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        let chars: Vec<char> = w.chars().collect();
        if chars.len() == 1 {
            out.push(w.to_string());
        } else if PUNCTUATION.contains(chars[chars.len() - 1]) {
            out.push(chars[..chars.len() - 1].iter().collect());
            out.push(chars[chars.len() - 1].to_string());
        } else if PUNCTUATION.contains(chars[0]) {
            out.push(chars[0].to_string());
            out.push(chars[1..].iter().collect());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

type Ngrams = Vec<HashMap<String, u64>>;

fn ngrams(text: &str, params: &ChrfParams) -> Ngrams {
    let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    let mut out = Vec::with_capacity(params.char_ngram_max + params.word_ngram_max);
    for n in 1..=params.char_ngram_max {
        let mut m = HashMap::new();
        for w in chars.windows(n) {
            *m.entry(w.iter().collect::<String>()).or_insert(0) += 1;
        }
        out.push(m);
    }
    let words = word_tokens(text);
    for n in 1..=params.word_ngram_max {
        let mut m = HashMap::new();
        for w in words.windows(n) {
            *m.entry(w.join(" ")).or_insert(0) += 1;
        }
        out.push(m);
    }
    out
}

fn match_stats(hyp: &Ngrams, rf: &Ngrams) -> ChrfStats {
    ChrfStats(
        hyp.iter()
            .zip(rf)
            .map(|(h, r)| {
                let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
                [h.values().sum(), r.values().sum(), matches]
            })
            .collect(),
    )
}

/// Statistics of one segment against the reference with the best
/// sentence-level score (first one on ties).
pub fn segment_stats(hypothesis: &str, references: &[&str], params: &ChrfParams) -> Result<ChrfStats> {
    if references.is_empty() {
        return Err(Error::Invalid("chrF++ needs at least one reference".into()));
    }
    let h = ngrams(hypothesis, params);
    let mut best: Option<(f64, ChrfStats)> = None;
    for r in references {
        let s = match_stats(&h, &ngrams(r, params));
        let f = s.score(params.beta);
        if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
            best = Some((f, s));
        }
    }
    Ok(best.expect("at least one reference").1)
}

/// Sentence-level chrF++.
pub fn chrf_pp(hypothesis: &str, references: &[&str], params: &ChrfParams) -> Result<f64> {
    Ok(segment_stats(hypothesis, references, params)?.score(params.beta))
}

/// Corpus-level chrF++: statistics are summed over segments before scoring.
pub fn corpus_chrf(hypotheses: &[&str], references: &[Vec<&str>], params: &ChrfParams) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses for {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = ChrfStats::zero(params.char_ngram_max + params.word_ngram_max);
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&segment_stats(h, r, params)?);
    }
    Ok(total.score(params.beta))
}

/// Parameter counts for memory estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemorySpec {
    /// Everything outside the experts.
    pub dense_params: u64,
    pub expert_params_each: u64,
    pub num_experts_total: u64,
    pub bytes_per_param: u64,
}

pub const GIB: f64 = (1u64 << 30) as f64;

impl MemorySpec {
    /// The 54.5B-parameter MoE translation model: 2.9B shared parameters
    /// and 1536 experts of 33.6M parameters each, stored in half precision.
    pub fn nllb_moe() -> Self {
        Self {
            dense_params: 2_900_000_000,
            expert_params_each: 33_600_000,
            num_experts_total: 1536,
            bytes_per_param: 2,
        }
    }

    /// A model without experts.
    pub fn dense(params: u64) -> Self {
        Self {
            dense_params: params,
            expert_params_each: 0,
            num_experts_total: 0,
            bytes_per_param: 2,
        }
    }

    pub fn total_params(&self) -> u64 {
        self.dense_params + self.num_experts_total * self.expert_params_each
    }

    /// Memory with `retained` experts loaded.
    pub fn bytes_with(&self, retained: u64) -> Result<u64> {
        if retained > self.num_experts_total {
            return Err(Error::Invalid(format!(
                "{retained} experts retained but the model has {}",
                self.num_experts_total
            )));
        }
        Ok((self.dense_params + retained * self.expert_params_each) * self.bytes_per_param)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryEstimate {
    pub retained_experts: u64,
    pub bytes: u64,
    pub gib: f64,
}

/// Memory of the model with every expert, or with the experts `mask` keeps.
pub fn estimate_memory(spec: &MemorySpec, mask: Option<&PruningMask>) -> Result<MemoryEstimate> {
    let retained = match mask {
        None => spec.num_experts_total,
        Some(m) => {
            let slots = (m.layers.len() * m.num_experts) as u64;
            if slots > spec.num_experts_total {
                return Err(Error::Mask(format!(
                    "mask covers {slots} experts, the memory spec has {}",
                    spec.num_experts_total
                )));
            }
            if m.layers.iter().flat_map(|l| &l.retained).any(|&e| e >= m.num_experts) {
                return Err(Error::Mask("mask references an expert id beyond its layer size".into()));
            }
            m.total_retained() as u64
        }
    };
    let bytes = spec.bytes_with(retained)?;
    Ok(MemoryEstimate {
        retained_experts: retained,
        bytes,
        gib: bytes as f64 / GIB,
    })
}

/// Which mask each direction is decoded with.
#[derive(Clone, Debug)]
pub enum MaskPlan {
    Unpruned,
    Shared(PruningMask),
    PerDirection(BTreeMap<(String, String), PruningMask>),
}

impl MaskPlan {
    pub fn for_direction(&self, src: &str, tgt: &str) -> Result<Option<&PruningMask>> {
        match self {
            MaskPlan::Unpruned => Ok(None),
            MaskPlan::Shared(m) => Ok(Some(m)),
            MaskPlan::PerDirection(map) => map
                .get(&(src.to_string(), tgt.to_string()))
                .map(Some)
                .ok_or_else(|| Error::Mask(format!("no mask for direction {src}-{tgt}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionScore {
    pub src: String,
    pub tgt: String,
    pub chrf_pp: f64,
    pub length_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupScore {
    pub group: String,
    pub directions: usize,
    pub chrf_pp: f64,
    pub length_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<DirectionScore>,
    /// Per direction group, then `all`.
    pub groups: Vec<GroupScore>,
}

impl EvalReport {
    pub fn mean_chrf(&self) -> f64 {
        self.groups.last().map_or(0.0, |g| g.chrf_pp)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("src\ttgt\tchrf_pp\tlength_ratio\n");
        for r in &self.rows {
            writeln!(out, "{}\t{}\t{:.4}\t{:.4}", r.src, r.tgt, r.chrf_pp, r.length_ratio).unwrap();
        }
        out.push_str("\ngroup\tdirections\tchrf_pp\tlength_ratio\n");
        for g in &self.groups {
            writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}",
                g.group, g.directions, g.chrf_pp, g.length_ratio
            )
            .unwrap();
        }
        out
    }
}

/// Hypotheses and references of one direction as text.
pub struct DirectionOutput {
    pub src: String,
    pub tgt: String,
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
}

/// Scores already-decoded directions. `group_of` maps a direction to the
/// group it is averaged in.
pub fn score_directions(outputs: &[DirectionOutput], group_of: &dyn Fn(&str, &str) -> String) -> Result<EvalReport> {
    let params = ChrfParams::default();
    let mut rows = Vec::new();
    for o in outputs {
        let hyps: Vec<&str> = o.hypotheses.iter().map(|s| s.as_str()).collect();
        let refs: Vec<Vec<&str>> = o.references.iter().map(|r| vec![r.as_str()]).collect();
        let ref_texts: Vec<&str> = o.references.iter().map(|s| s.as_str()).collect();
        rows.push(DirectionScore {
            src: o.src.clone(),
            tgt: o.tgt.clone(),
            chrf_pp: corpus_chrf(&hyps, &refs, &params)?,
            length_ratio: length_ratio(&hyps, &ref_texts)?,
        });
    }
    let mut buckets: BTreeMap<String, Vec<&DirectionScore>> = BTreeMap::new();
    for r in &rows {
        buckets.entry(group_of(&r.src, &r.tgt)).or_default().push(r);
    }
    let average = |name: String, rs: &[&DirectionScore]| GroupScore {
        group: name,
        directions: rs.len(),
        chrf_pp: rs.iter().map(|r| r.chrf_pp).sum::<f64>() / rs.len().max(1) as f64,
        length_ratio: rs.iter().map(|r| r.length_ratio).sum::<f64>() / rs.len().max(1) as f64,
    };
    let mut groups: Vec<GroupScore> = buckets.into_iter().map(|(k, v)| average(k, &v)).collect();
    let all: Vec<&DirectionScore> = rows.iter().collect();
    groups.push(average("all".into(), &all));
    Ok(EvalReport { rows, groups })
}

/// Decodes every direction of `lines` with its mask and scores it.
/// Directions appear in first-seen order.
pub fn corpus_eval(
    model: &MoEModel,
    masks: &MaskPlan,
    lines: &[ParallelLine],
    group_of: &dyn Fn(&str, &str) -> String,
) -> Result<(EvalReport, Vec<DirectionOutput>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut by_dir: HashMap<(String, String), Vec<&ParallelLine>> = HashMap::new();
    for l in lines {
        let key = (l.src_lang.clone(), l.tgt_lang.clone());
        if !by_dir.contains_key(&key) {
            order.push(key.clone());
        }
        by_dir.entry(key).or_default().push(l);
    }
    let mut outputs = Vec::new();
    for (src, tgt) in order {
        let mask = masks.for_direction(&src, &tgt)?;
        let dir_lines = &by_dir[&(src.clone(), tgt.clone())];
        let samples: Vec<CorpusSample> = dir_lines
            .iter()
            .map(|l| CorpusSample::from_line(l, &model.vocab))
            .collect::<Result<_>>()?;
        let translations = translate_corpus(model, &samples, mask, model.config.beam_size, false)?;
        outputs.push(DirectionOutput {
            hypotheses: translations.iter().map(|t| model.vocab.decode_ids(&t.words)).collect(),
            references: dir_lines.iter().map(|l| l.tgt_text.clone()).collect(),
            src,
            tgt,
        });
    }
    Ok((score_directions(&outputs, group_of)?, outputs))
}
