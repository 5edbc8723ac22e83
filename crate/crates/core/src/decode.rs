//! Length-normalized beam search and greedy decoding.
//!
//! Several sentences are decoded together: at every step all live
//! hypotheses of all sentences go through the decoder as one packed batch.
//! There is no incremental state; each step re-runs the decoder over the
//! full prefixes.

use ndarray::Array2;

use crate::autograd::{log_softmax_rows, Graph};
use crate::config::Side;
use crate::corpus::CorpusSample;
use crate::error::{Error, Result};
use crate::mask::PruningMask;
use crate::model::{GateDecision, MoEModel};
use crate::stats::GateRecorder;
use crate::vocab::EOS;

/// Sentences decoded together by [`translate_corpus`].
pub const DECODE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// Output words, without language tag or end-of-sequence.
    pub words: Vec<usize>,
    /// Log-probability divided by the number of generated tokens.
    pub score: f64,
    /// Gate decisions made for the source tokens and for the decoder
    /// inputs of the selected hypothesis; empty unless recording.
    pub routing: Vec<(Side, GateDecision)>,
}

/// Output length cap: twice the source word count plus eight tokens.
pub fn max_output_len(src_words: usize) -> usize {
    2 * src_words + 8
}

struct Hyp {
    /// Decoder input so far: target tag then words.
    prefix: Vec<usize>,
    logp: f64,
}

struct SentenceState {
    alive: Vec<Hyp>,
    finished: Vec<(Vec<usize>, f64)>,
    max_len: usize,
    done: bool,
}

fn check_languages(model: &MoEModel, s: &CorpusSample) -> Result<usize> {
    model.vocab.lang_id(&s.src_lang)?;
    let tag = model.vocab.lang_id(&s.tgt_lang)?;
    if s.src_tokens.first() != Some(&model.vocab.lang_id(&s.src_lang)?) {
        return Err(Error::Invalid(
            "source tokens must start with the source language tag".into(),
        ));
    }
    Ok(tag)
}

/// Log-probabilities of the next token with language tags excluded.
fn next_token_logp(model: &MoEModel, logits: &Array2<f64>) -> Array2<f64> {
    let mut l = logits.clone();
    for id in 0..l.ncols() {
        if model.vocab.is_lang_id(id) {
            l.column_mut(id).fill(f64::NEG_INFINITY);
        }
    }
    log_softmax_rows(&l)
}

/// Beam search over a batch of sentences.
pub fn translate_batch(
    model: &MoEModel,
    samples: &[CorpusSample],
    mask: Option<&PruningMask>,
    beam_size: usize,
    record: bool,
) -> Result<Vec<Translation>> {
    if beam_size == 0 {
        return Err(Error::Invalid("beam size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(m) = mask {
        m.validate(&model.config)?;
    }
    let tags: Vec<usize> = samples
        .iter()
        .map(|s| check_languages(model, s))
        .collect::<Result<_>>()?;
    let srcs: Vec<&[usize]> = samples.iter().map(|s| s.src_tokens.as_slice()).collect();
    let src_lengths: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
    let position_cap = model.config.max_positions - 1;
    let mut states: Vec<SentenceState> = samples
        .iter()
        .zip(&tags)
        .map(|(s, &tag)| SentenceState {
            alive: vec![Hyp {
                prefix: vec![tag],
                logp: 0.0,
            }],
            finished: Vec::new(),
            max_len: max_output_len(s.source_words()).min(position_cap),
            done: false,
        })
        .collect();

    let mut g = Graph::new();
    let (enc, enc_routing) = model.encode(&mut g, &srcs, mask)?;
    let enc_value = g.value(enc).clone();

    for step in 0.. {
        let live: Vec<usize> = (0..states.len()).filter(|&i| !states[i].done).collect();
        if live.is_empty() {
            break;
        }
        let mut prefixes: Vec<&[usize]> = Vec::new();
        let mut owner = Vec::new();
        for &i in &live {
            for (h, hyp) in states[i].alive.iter().enumerate() {
                prefixes.push(&hyp.prefix);
                owner.push((i, h));
            }
        }
        let tgt_to_src: Vec<usize> = owner.iter().map(|&(i, _)| i).collect();
        let mut dg = Graph::new();
        let enc_var = dg.constant(enc_value.clone());
        let (logits, _) = model.decode(&mut dg, enc_var, &src_lengths, &prefixes, &tgt_to_src, mask)?;
        let all = dg.value(logits);
        let mut last = Array2::zeros((prefixes.len(), all.ncols()));
        let mut row = 0;
        for (k, p) in prefixes.iter().enumerate() {
            row += p.len();
            last.row_mut(k).assign(&all.row(row - 1));
        }
        let logp = next_token_logp(model, &last);

        let mut k = 0;
        for &i in &live {
            let st = &mut states[i];
            let n_alive = st.alive.len();
            // (score, hypothesis, token); ties prefer earlier hypotheses and lower ids
            let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(n_alive * logp.ncols());
            for h in 0..n_alive {
                for (tok, &lp) in logp.row(k + h).iter().enumerate() {
                    if lp > f64::NEG_INFINITY {
                        cands.push((st.alive[h].logp + lp, h, tok));
                    }
                }
            }
            k += n_alive;
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let generated = step + 1;
            let mut next = Vec::new();
            for &(score, h, tok) in cands.iter().take(beam_size) {
                let words = &st.alive[h].prefix[1..];
                if tok == EOS {
                    st.finished.push((words.to_vec(), score / generated as f64));
                } else {
                    let mut prefix = st.alive[h].prefix.clone();
                    prefix.push(tok);
                    next.push(Hyp { prefix, logp: score });
                }
            }
            st.alive = next;
            if st.alive.is_empty() || st.finished.len() >= beam_size {
                st.done = true;
            } else if generated >= st.max_len {
                for hyp in &st.alive {
                    st.finished
                        .push((hyp.prefix[1..].to_vec(), hyp.logp / generated as f64));
                }
                st.done = true;
            }
        }
    }

    let mut out: Vec<Translation> = states
        .into_iter()
        .map(|st| {
            let mut best = 0;
            for (j, f) in st.finished.iter().enumerate() {
                if f.1 > st.finished[best].1 {
                    best = j;
                }
            }
            let (words, score) = st.finished[best].clone();
            Translation {
                words,
                score,
                routing: Vec::new(),
            }
        })
        .collect();

    if record {
        let offsets = crate::model::Packing::new(src_lengths.clone()).offsets();
        for r in &enc_routing {
            for (i, t) in out.iter_mut().enumerate() {
                for d in &r.decisions[offsets[i]..offsets[i] + src_lengths[i]] {
                    t.routing.push((Side::Encoder, d.clone()));
                }
            }
        }
        let inputs: Vec<Vec<usize>> = out
            .iter()
            .zip(&tags)
            .map(|(t, &tag)| std::iter::once(tag).chain(t.words.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = inputs.iter().map(|v| v.as_slice()).collect();
        let identity: Vec<usize> = (0..refs.len()).collect();
        let mut dg = Graph::new();
        let enc_var = dg.constant(enc_value);
        let (_, dec_routing) = model.decode(&mut dg, enc_var, &src_lengths, &refs, &identity, mask)?;
        let dec_offsets = crate::model::Packing::new(refs.iter().map(|r| r.len()).collect()).offsets();
        for r in &dec_routing {
            for (i, t) in out.iter_mut().enumerate() {
                for d in &r.decisions[dec_offsets[i]..dec_offsets[i] + refs[i].len()] {
                    t.routing.push((Side::Decoder, d.clone()));
                }
            }
        }
    }
    Ok(out)
}

/// Beam search with the model's configured beam size. Gate decisions of
/// the selected hypothesis go to `recorder` when one is given.
pub fn translate_beam(
    model: &MoEModel,
    src: &CorpusSample,
    mask: Option<&PruningMask>,
    recorder: Option<&mut dyn GateRecorder>,
) -> Result<Vec<usize>> {
    let t = translate_batch(
        model,
        std::slice::from_ref(src),
        mask,
        model.config.beam_size,
        recorder.is_some(),
    )?
    .pop()
    .expect("one translation per sample");
    if let Some(rec) = recorder {
        for (side, d) in &t.routing {
            rec.record(*side, d)?;
        }
    }
    Ok(t.words)
}

/// Translates raw text; fails on unknown language codes or words.
pub fn translate_text(
    model: &MoEModel,
    src_lang: &str,
    tgt_lang: &str,
    text: &str,
    mask: Option<&PruningMask>,
) -> Result<String> {
    let line = crate::corpus::ParallelLine {
        src_lang: src_lang.into(),
        tgt_lang: tgt_lang.into(),
        src_text: text.into(),
        tgt_text: String::new(),
    };
    let sample = CorpusSample::from_line(&line, &model.vocab)?;
    let words = translate_beam(model, &sample, mask, None)?;
    Ok(model.vocab.decode_ids(&words))
}

/// Picks the most probable token at every step.
pub fn greedy(model: &MoEModel, src: &CorpusSample, mask: Option<&PruningMask>) -> Result<Vec<usize>> {
    let tag = check_languages(model, src)?;
    let max_len = max_output_len(src.source_words()).min(model.config.max_positions - 1);
    let mut g = Graph::new();
    let (enc, _) = model.encode(&mut g, &[&src.src_tokens], mask)?;
    let enc_value = g.value(enc).clone();
    let mut prefix = vec![tag];
    for _ in 0..max_len {
        let mut dg = Graph::new();
        let enc_var = dg.constant(enc_value.clone());
        let (logits, _) = model.decode(&mut dg, enc_var, &[src.src_tokens.len()], &[&prefix], &[0], mask)?;
        let l = dg.value(logits);
        let row = l.row(l.nrows() - 1);
        let mut best = None;
        for (id, &v) in row.iter().enumerate() {
            if model.vocab.is_lang_id(id) {
                continue;
            }
            if best.is_none_or(|b: usize| v > row[b]) {
                best = Some(id);
            }
        }
        let tok = best.expect("vocabulary has non-tag tokens");
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    Ok(prefix[1..].to_vec())
}

/// Decodes `samples` in batches; returns translations in input order.
pub fn translate_corpus(
    model: &MoEModel,
    samples: &[CorpusSample],
    mask: Option<&PruningMask>,
    beam_size: usize,
    record: bool,
) -> Result<Vec<Translation>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(DECODE_BATCH) {
        out.extend(translate_batch(model, chunk, mask, beam_size, record)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::corpus::{generate, tokenize, DataConfig};
    use crate::stats::DirectionStats;

    fn tiny() -> (MoEModel, Vec<CorpusSample>) {
        let mut data = DataConfig::toy();
        data.sizes.train = 4;
        data.sizes.valid = 2;
        data.sizes.test = 2;
        let corp = generate(&data, 3).unwrap();
        let vocab = data.vocab();
        let samples = tokenize(&corp.test, &vocab).unwrap();
        let mut cfg = ModelConfig::toy(vocab.len());
        cfg.d_model = 16;
        cfg.d_ffn = 16;
        let model = MoEModel::new(cfg, vocab, 5).unwrap();
        (model, samples)
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let (model, samples) = tiny();
        for s in samples.iter().take(6) {
            let b = translate_batch(&model, std::slice::from_ref(s), None, 1, false).unwrap();
            assert_eq!(b[0].words, greedy(&model, s, None).unwrap());
        }
    }

    #[test]
    fn batching_does_not_change_output() {
        let (model, samples) = tiny();
        let batch = translate_batch(&model, &samples[..6], None, 3, true).unwrap();
        for (s, t) in samples[..6].iter().zip(&batch) {
            let single = translate_batch(&model, std::slice::from_ref(s), None, 3, true).unwrap();
            assert_eq!(single[0].words, t.words);
            assert_eq!(single[0].routing, t.routing);
        }
    }

    #[test]
    fn full_mask_matches_no_mask() {
        let (model, samples) = tiny();
        let full = PruningMask::full(&model.config);
        let a = translate_corpus(&model, &samples[..8], None, 4, true).unwrap();
        let b = translate_corpus(&model, &samples[..8], Some(&full), 4, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_respects_length_cap_and_tags() {
        let (model, samples) = tiny();
        for t in translate_corpus(&model, &samples, None, 2, false)
            .unwrap()
            .iter()
            .zip(&samples)
        {
            assert!(t.0.words.len() <= max_output_len(t.1.source_words()));
            assert!(t.0.words.iter().all(|&w| w != EOS && !model.vocab.is_lang_id(w)));
        }
    }

    #[test]
    fn recorder_sees_every_selected_token() {
        let (model, samples) = tiny();
        let mut rec = DirectionStats::new(&model.config);
        let words = translate_beam(&model, &samples[0], None, Some(&mut rec)).unwrap();
        for l in &rec.encoder.layers {
            assert_eq!(l.token_count as usize, samples[0].src_tokens.len());
        }
        for l in &rec.decoder.layers {
            assert_eq!(l.token_count as usize, words.len() + 1);
        }
    }

    #[test]
    fn routing_is_deterministic() {
        let (model, samples) = tiny();
        let a = translate_corpus(&model, &samples[..4], None, 4, true).unwrap();
        let b = translate_corpus(&model, &samples[..4], None, 4, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_language_is_rejected() {
        let (model, _) = tiny();
        let err = translate_text(&model, "aa", "zz", "w1 w2", None).unwrap_err();
        assert!(matches!(err, Error::UnknownLanguage(ref c) if c == "zz"));
    }
}
