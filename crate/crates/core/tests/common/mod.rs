//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use moeprune::analysis::{Dendrogram, Distance, Linkage};
use moeprune::autograd::Graph;
use moeprune::corpus::CorpusSample;
use moeprune::mask::MaskLayer;
use moeprune::pruning::{MetricKind, MetricLayer, MetricTable};
use moeprune::train::build_loss;
use moeprune::vocab::{Vocab, EOS};
use moeprune::{MoEModel, ModelConfig, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPart {
    Task,
    LoadBalancing,
    Total,
}

/// Two experts per MoE layer, `d_model = 4`.
pub fn grad_check_model(seed: u64) -> (MoEModel, Vec<CorpusSample>) {
    let vocab = Vocab::new(vec!["aa".into(), "bb".into()], 6);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 4,
        d_ffn: 6,
        n_heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        moe_frequency: 2,
        num_experts: 2,
        top_k: 2,
        beam_size: 1,
        label_smoothing: 0.1,
        lb_loss_coeff: 0.01,
        max_positions: 16,
    };
    let sample = |src: &str, tgt: &str, s: &[usize], t: &[usize]| {
        let mut src_tokens = vec![vocab.lang_id(src).unwrap()];
        src_tokens.extend(s.iter().map(|&w| vocab.word_id(w)));
        src_tokens.push(EOS);
        let mut tgt_tokens = vec![vocab.lang_id(tgt).unwrap()];
        tgt_tokens.extend(t.iter().map(|&w| vocab.word_id(w)));
        CorpusSample {
            src_lang: src.into(),
            tgt_lang: tgt.into(),
            src_tokens,
            tgt_tokens,
        }
    };
    let batch = vec![
        sample("aa", "bb", &[0, 3, 5], &[2, 1, 4, 4]),
        sample("bb", "aa", &[1, 2], &[5, 0]),
    ];
    let mut model = MoEModel::new(config, vocab, seed).unwrap();
    // Spread the initial gate weights so routing is far from uniform.
    for id in model.gate_params() {
        model.params.value_mut(id).mapv_inplace(|w| w * 8.0);
    }
    (model, batch)
}

fn loss_value(model: &MoEModel, batch: &[CorpusSample], part: LossPart) -> f64 {
    let mut g = Graph::new();
    let lg = build_loss(model, &mut g, batch).unwrap();
    let v = match part {
        LossPart::Task => lg.task,
        LossPart::LoadBalancing => lg.lb.expect("model has MoE layers"),
        LossPart::Total => lg.total,
    };
    g.value(v)[[0, 0]]
}

/// Worst relative error between analytic and central-difference gradients
/// over every scalar parameter, with the number of scalars checked.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(model: &mut MoEModel, batch: &[CorpusSample], part: LossPart, step: f64) -> (f64, usize, String) {
    let analytic = {
        let mut g = Graph::new();
        let lg = build_loss(model, &mut g, batch).unwrap();
        let v = match part {
            LossPart::Task => lg.task,
            LossPart::LoadBalancing => lg.lb.unwrap(),
            LossPart::Total => lg.total,
        };
        g.backward(v)
    };
    let ids: Vec<_> = model.params.ids().collect();
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0);
    for id in ids {
        let shape = model.params.value(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params.value(id)[[r, c]];
                model.params.value_mut(id)[[r, c]] = orig + step;
                let up = loss_value(model, batch, part);
                model.params.value_mut(id)[[r, c]] = orig - step;
                let down = loss_value(model, batch, part);
                model.params.value_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{}[{r},{c}] analytic {a:e} numeric {numeric:e}", model.params.name(id));
                }
                checked += 1;
            }
        }
    }
    (worst, checked, worst_at)
}

/// Normalized metric table with random scores; a few exact zeros and one
/// boosted expert per layer.
pub fn random_table(rng: &mut ChaCha8Rng, layers: usize, n: usize) -> MetricTable {
    let layers: Vec<MetricLayer> = (0..layers)
        .map(|k| {
            let mut scores: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random::<f64>() < 0.15 {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            scores[rng.random_range(0..n)] += 0.5;
            MetricLayer {
                layer_id: k,
                side: if k % 2 == 0 { Side::Encoder } else { Side::Decoder },
                scores,
            }
        })
        .collect();
    MetricTable {
        kind: MetricKind::Importance,
        key: "random".into(),
        layers,
        normalized: false,
    }
    .normalize_per_layer()
    .unwrap()
}

/// Exhaustive reading of global-threshold pruning. For each grid threshold
/// every layer keeps the smallest subset whose mass reaches it (never fewer
/// than the floor); the largest threshold whose sizes fit the budget wins.
/// Each layer keeps its heaviest subset of that size, ties to the lowest
/// ids. Remaining budget goes to the best excluded expert by score, then
/// the layer holding fewer experts, the lower layer id, the lower expert id.
pub fn threshold_oracle(t: &MetricTable, count: usize, min_per_layer: usize) -> Vec<MaskLayer> {
    let n = t.layers[0].scores.len();
    let floor = min_per_layer.min(n);
    let subsets: Vec<Vec<usize>> = (0u32..1 << n)
        .map(|bits| (0..n).filter(|e| bits >> e & 1 == 1).collect())
        .collect();
    let mass = |l: &MetricLayer, s: &[usize]| s.iter().map(|&e| l.scores[e]).sum::<f64>();
    let size_at = |l: &MetricLayer, theta: f64| -> usize {
        let min_size = subsets
            .iter()
            .filter(|s| mass(l, s) + 1e-12 >= theta)
            .map(|s| s.len())
            .min()
            .unwrap_or(n);
        min_size.max(floor)
    };
    let mut sizes = None;
    for step in 0..=1000 {
        let theta = step as f64 / 1000.0;
        let s: Vec<usize> = t.layers.iter().map(|l| size_at(l, theta)).collect();
        if s.iter().sum::<usize>() <= count {
            sizes = Some(s);
        }
    }
    let sizes = sizes.expect("budget covers the floor");
    let mut kept: Vec<Vec<usize>> = t
        .layers
        .iter()
        .zip(&sizes)
        .map(|(l, &k)| {
            let cands: Vec<&Vec<usize>> = subsets.iter().filter(|s| s.len() == k).collect();
            let top = cands.iter().map(|s| mass(l, s)).fold(f64::NEG_INFINITY, f64::max);
            cands
                .into_iter()
                .filter(|s| (mass(l, s) - top).abs() < 1e-12)
                .min()
                .unwrap()
                .clone()
        })
        .collect();
    let mut left = count - sizes.iter().sum::<usize>();
    while left > 0 {
        let mut excluded: Vec<(f64, usize, usize)> = Vec::new();
        for (k, l) in t.layers.iter().enumerate() {
            for e in (0..n).filter(|e| !kept[k].contains(e)) {
                excluded.push((l.scores[e], k, e));
            }
        }
        excluded.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(kept[a.1].len().cmp(&kept[b.1].len()))
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let (_, k, e) = excluded[0];
        kept[k].push(e);
        kept[k].sort_unstable();
        left -= 1;
    }
    t.layers
        .iter()
        .zip(kept)
        .map(|(l, retained)| MaskLayer {
            layer_id: l.layer_id,
            side: l.side,
            retained,
        })
        .collect()
}

/// Agglomerative clustering by recomputing every cluster distance from the
/// raw point distances at each step. Ties go to the pair whose smallest
/// member labels sort first.
pub fn linkage_oracle(points: &[(String, Vec<f64>)], linkage: Linkage) -> Dendrogram {
    let dist = |a: usize, b: usize| -> f64 {
        points[a]
            .1
            .iter()
            .zip(&points[b].1)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut clusters: Vec<(Vec<usize>, Dendrogram)> = points
        .iter()
        .enumerate()
        .map(|(i, (l, _))| (vec![i], Dendrogram::Leaf(l.clone())))
        .collect();
    let min_label = |c: &[usize]| c.iter().map(|&i| points[i].0.clone()).min().unwrap();
    while clusters.len() > 1 {
        let mut best: Option<(f64, (String, String), usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut ds = Vec::new();
                for &a in &clusters[i].0 {
                    for &b in &clusters[j].0 {
                        ds.push(dist(a, b));
                    }
                }
                let v = match linkage {
                    Linkage::Single => ds.iter().cloned().fold(f64::INFINITY, f64::min),
                    Linkage::Complete => ds.iter().cloned().fold(0.0, f64::max),
                    Linkage::Average => ds.iter().sum::<f64>() / ds.len() as f64,
                };
                let (a, b) = (min_label(&clusters[i].0), min_label(&clusters[j].0));
                let key = if a <= b { (a, b) } else { (b, a) };
                let better = match &best {
                    None => true,
                    Some((bv, bk, _, _)) => v < *bv - 1e-12 || ((v - *bv).abs() <= 1e-12 && key < *bk),
                };
                if better {
                    best = Some((v, key, i, j));
                }
            }
        }
        let (height, _, i, j) = best.unwrap();
        let right = clusters.remove(j);
        let left = clusters.remove(i);
        let mut members = left.0;
        members.extend(right.0);
        clusters.push((
            members,
            Dendrogram::Merge {
                left: Box::new(left.1),
                right: Box::new(right.1),
                height,
            },
        ));
    }
    clusters.pop().unwrap().1.canonical()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<(String, Vec<f64>)> {
    (0..n)
        .map(|i| (format!("p{i}"), (0..dim).map(|_| rng.random_range(0.0..10.0)).collect()))
        .collect()
}

/// Euclidean distance is the only one the oracle knows.
pub const ORACLE_DISTANCE: Distance = Distance::Euclidean;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
