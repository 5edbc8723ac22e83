//! Expert scoring and the pruning algorithms that turn scores into masks.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Side};
use crate::error::{Error, Result};
use crate::mask::{MaskLayer, PruningMask};
use crate::stats::LayerFractions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Top1,
    Top2,
    /// Top-1 activity times mean gate probability.
    LoadBalancing,
    /// Top-1 activity times confidence.
    ImportanceVanilla,
    /// Top-1 activity times exp(confidence).
    Importance,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Top1,
        MetricKind::Top2,
        MetricKind::LoadBalancing,
        MetricKind::ImportanceVanilla,
        MetricKind::Importance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Top1 => "top1",
            MetricKind::Top2 => "top2",
            MetricKind::LoadBalancing => "lb",
            MetricKind::ImportanceVanilla => "importance-vanilla",
            MetricKind::Importance => "importance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(MetricKind::Top1),
            "top2" => Ok(MetricKind::Top2),
            "lb" | "load_balancing" | "load-balancing" => Ok(MetricKind::LoadBalancing),
            "importance-vanilla" | "importance_vanilla" => Ok(MetricKind::ImportanceVanilla),
            "importance" => Ok(MetricKind::Importance),
            other => Err(Error::UnknownMetric(other.into())),
        }
    }

    /// Score of one expert from its finalized fractions.
    pub fn score(self, top1: f64, top2: f64, mean: f64, conf: f64) -> f64 {
        match self {
            MetricKind::Top1 => top1,
            MetricKind::Top2 => top2,
            MetricKind::LoadBalancing => top1 * mean,
            MetricKind::ImportanceVanilla => top1 * conf,
            MetricKind::Importance => top1 * conf.exp(),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricLayer {
    pub layer_id: usize,
    pub side: Side,
    pub scores: Vec<f64>,
}

impl MetricLayer {
    /// Expert ids from best to worst; equal scores keep the lower id first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.scores.len()).collect();
        ids.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub kind: MetricKind,
    /// Statistics key the scores came from; copied into masks.
    pub key: String,
    pub layers: Vec<MetricLayer>,
    pub normalized: bool,
}

pub fn compute_metric(fractions: &[LayerFractions], kind: MetricKind, key: &str) -> MetricTable {
    MetricTable {
        kind,
        key: key.into(),
        layers: fractions
            .iter()
            .map(|f| MetricLayer {
                layer_id: f.layer_id,
                side: f.side,
                scores: (0..f.top1.len())
                    .map(|e| kind.score(f.top1[e], f.top2[e], f.mean[e], f.conf[e]))
                    .collect(),
            })
            .collect(),
        normalized: false,
    }
}

impl MetricTable {
    /// Divides every layer by its sum.
    pub fn normalize_per_layer(&self) -> Result<MetricTable> {
        let mut out = self.clone();
        for l in &mut out.layers {
            let sum: f64 = l.scores.iter().sum();
            if sum <= 0.0 || !sum.is_finite() {
                return Err(Error::ZeroLayer(l.layer_id));
            }
            for s in &mut l.scores {
                *s /= sum;
            }
        }
        out.normalized = true;
        Ok(out)
    }

    pub fn num_experts(&self) -> usize {
        self.layers.first().map_or(0, |l| l.scores.len())
    }

    fn side_table(&self, side: Side) -> MetricTable {
        MetricTable {
            layers: self.layers.iter().filter(|l| l.side == side).cloned().collect(),
            ..self.clone()
        }
    }

    fn mask(&self, layers: Vec<MaskLayer>, min_per_layer: usize) -> Result<PruningMask> {
        PruningMask::from_layers(
            self.kind.as_str(),
            self.key.clone(),
            min_per_layer,
            self.num_experts(),
            layers,
        )
    }
}

/// How a retention budget is divided between encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// The same quota in every MoE layer.
    Balanced,
    /// Per-layer quotas in proportion `encoder : decoder`.
    Ratio(usize, usize),
    /// Total encoder and decoder experts.
    Explicit(usize, usize),
}

impl Split {
    /// `balanced`, `ratio=E:D` or `explicit=E,D`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Budget(format!("cannot parse split `{s}`"));
        if s == "balanced" {
            return Ok(Split::Balanced);
        }
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        if let Some(r) = s.strip_prefix("ratio=") {
            let (e, d) = r.split_once(':').ok_or_else(bad)?;
            let (e, d) = (num(e)?, num(d)?);
            if e == 0 && d == 0 {
                return Err(bad());
            }
            return Ok(Split::Ratio(e, d));
        }
        if let Some(r) = s.strip_prefix("explicit=") {
            let (e, d) = r.split_once(',').ok_or_else(bad)?;
            return Ok(Split::Explicit(num(e)?, num(d)?));
        }
        Err(bad())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Balanced => f.write_str("balanced"),
            Split::Ratio(e, d) => write!(f, "ratio={e}:{d}"),
            Split::Explicit(e, d) => write!(f, "explicit={e},{d}"),
        }
    }
}

pub const DEFAULT_MIN_PER_LAYER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub total_retain: usize,
    pub split: Split,
    pub min_per_layer: usize,
}

/// Per-layer retention quotas on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quotas {
    pub encoder: usize,
    pub decoder: usize,
}

/// Experts kept when pruning `rate` of `total`, rounded to the nearest
/// integer.
pub fn retained_for_rate(total: usize, rate: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Budget(format!("pruning rate {rate} outside [0, 1]")));
    }
    Ok((total as f64 * (1.0 - rate)).round() as usize)
}

impl Budget {
    pub fn new(total_retain: usize, split: Split, min_per_layer: usize) -> Self {
        Self {
            total_retain,
            split,
            min_per_layer,
        }
    }

    pub fn from_rate(config: &ModelConfig, rate: f64, split: Split, min_per_layer: usize) -> Result<Self> {
        Ok(Self::new(
            retained_for_rate(config.total_experts(), rate)?,
            split,
            min_per_layer,
        ))
    }

    fn check_total(&self, config: &ModelConfig) -> Result<()> {
        if self.total_retain > config.total_experts() {
            return Err(Error::Budget(format!(
                "cannot retain {} of {} experts",
                self.total_retain,
                config.total_experts()
            )));
        }
        if let Split::Explicit(e, d) = self.split {
            if e + d != self.total_retain {
                return Err(Error::Budget(format!(
                    "explicit split {e} + {d} does not add up to {}",
                    self.total_retain
                )));
            }
        }
        Ok(())
    }

    /// Per-layer quotas for fixed-per-layer pruning.
    ///
    /// For a ratio `E:D` the unit is `floor(total / (E * enc_layers +
    /// D * dec_layers))`, so the retained total may fall short of
    /// `total_retain` when it does not divide evenly.
    pub fn quotas(&self, config: &ModelConfig) -> Result<Quotas> {
        self.check_total(config)?;
        let n_enc = config.moe_layers_on(Side::Encoder).len();
        let n_dec = config.moe_layers_on(Side::Decoder).len();
        let n_layers = n_enc + n_dec;
        let exact = |count: usize, layers: usize, what: &str| -> Result<usize> {
            if layers == 0 {
                return if count == 0 {
                    Ok(0)
                } else {
                    Err(Error::Budget(format!(
                        "{count} {what} experts but no {what} MoE layers"
                    )))
                };
            }
            if !count.is_multiple_of(layers) {
                return Err(Error::Budget(format!(
                    "{count} {what} experts do not divide evenly over {layers} layers"
                )));
            }
            Ok(count / layers)
        };
        let q = match self.split {
            Split::Balanced => {
                let per = exact(self.total_retain, n_layers, "retained")?;
                Quotas {
                    encoder: per,
                    decoder: per,
                }
            }
            Split::Ratio(e, d) => {
                let unit = self.total_retain / (e * n_enc + d * n_dec);
                Quotas {
                    encoder: e * unit,
                    decoder: d * unit,
                }
            }
            Split::Explicit(e, d) => Quotas {
                encoder: exact(e, n_enc, "encoder")?,
                decoder: exact(d, n_dec, "decoder")?,
            },
        };
        let floor = self.min_per_layer.min(config.num_experts);
        for (side, quota, layers) in [("encoder", q.encoder, n_enc), ("decoder", q.decoder, n_dec)] {
            if layers > 0 && (quota < floor || quota > config.num_experts) {
                return Err(Error::Budget(format!(
                    "{side} quota of {quota} per layer is outside [{floor}, {}]",
                    config.num_experts
                )));
            }
        }
        Ok(q)
    }

    /// Total experts for each side, for the encoder/decoder threshold
    /// algorithm. Balanced and ratio splits share the budget in proportion
    /// to `weight * layers` per side, rounding the encoder share down.
    pub fn side_counts(&self, config: &ModelConfig) -> Result<(usize, usize)> {
        self.check_total(config)?;
        let n_enc = config.moe_layers_on(Side::Encoder).len();
        let n_dec = config.moe_layers_on(Side::Decoder).len();
        let (we, wd) = match self.split {
            Split::Explicit(e, d) => return Ok((e, d)),
            Split::Balanced => (n_enc, n_dec),
            Split::Ratio(e, d) => (e * n_enc, d * n_dec),
        };
        let enc = self.total_retain * we / (we + wd);
        Ok((enc, self.total_retain - enc))
    }
}

fn top_ranked(layer: &MetricLayer, n: usize) -> MaskLayer {
    let mut retained: Vec<usize> = layer.ranking().into_iter().take(n).collect();
    retained.sort_unstable();
    MaskLayer {
        layer_id: layer.layer_id,
        side: layer.side,
        retained,
    }
}

/// Keeps the best `quota` experts of every layer.
pub fn prune_fixed_per_layer(table: &MetricTable, budget: &Budget, config: &ModelConfig) -> Result<PruningMask> {
    let q = budget.quotas(config)?;
    let layers = table
        .layers
        .iter()
        .map(|l| {
            let n = match l.side {
                Side::Encoder => q.encoder,
                Side::Decoder => q.decoder,
            };
            top_ranked(l, n)
        })
        .collect();
    table.mask(layers, budget.min_per_layer)
}

/// Threshold grid: 0, 0.001, ..., 1.
pub const THRESHOLD_STEPS: usize = 1000;

/// Slack when comparing cumulative mass against a threshold, so a layer
/// whose normalized mass rounds to just under 1 still reaches 1.
const MASS_SLACK: f64 = 1e-12;

pub fn threshold(step: usize) -> f64 {
    step as f64 / THRESHOLD_STEPS as f64
}

/// Experts a layer keeps at `theta`: the fewest top experts whose mass
/// reaches `theta`, but never fewer than `floor`.
pub fn layer_count_at(layer: &MetricLayer, theta: f64, floor: usize) -> usize {
    let mut cum = 0.0;
    let mut n = 0;
    for e in layer.ranking() {
        if cum + MASS_SLACK >= theta {
            break;
        }
        cum += layer.scores[e];
        n += 1;
    }
    n.max(floor)
}

/// Per-layer counts at `theta`.
pub fn counts_at(table: &MetricTable, theta: f64, min_per_layer: usize) -> Vec<usize> {
    let floor = min_per_layer.min(table.num_experts());
    table.layers.iter().map(|l| layer_count_at(l, theta, floor)).collect()
}

/// Shared mass threshold across all layers of `table`, then exact-count
/// repair: the largest grid threshold whose counts fit the budget is used
/// and the remaining slots go one at a time to the best excluded expert.
pub fn prune_global_threshold(table: &MetricTable, count: usize, min_per_layer: usize) -> Result<PruningMask> {
    let layers = global_threshold_layers(table, count, min_per_layer)?;
    table.mask(layers, min_per_layer)
}

fn global_threshold_layers(table: &MetricTable, count: usize, min_per_layer: usize) -> Result<Vec<MaskLayer>> {
    if !table.normalized {
        return Err(Error::Invalid(
            "threshold pruning needs a normalized metric table".into(),
        ));
    }
    let n = table.num_experts();
    let floor = min_per_layer.min(n);
    let n_layers = table.layers.len();
    if count < n_layers * floor || count > n_layers * n {
        return Err(Error::Infeasible(format!(
            "{count} experts over {n_layers} layers with {floor} to {n} per layer"
        )));
    }
    let mut kept = counts_at(table, 0.0, min_per_layer);
    for step in 1..=THRESHOLD_STEPS {
        let c = counts_at(table, threshold(step), min_per_layer);
        if c.iter().sum::<usize>() <= count {
            kept = c;
        }
    }
    let rankings: Vec<Vec<usize>> = table.layers.iter().map(|l| l.ranking()).collect();
    let mut residual = count - kept.iter().sum::<usize>();
    while residual > 0 {
        // equal scores go to the layer holding fewer experts, then to the
        // lower layer id
        let mut best: Option<(usize, f64)> = None;
        for (k, l) in table.layers.iter().enumerate() {
            if kept[k] == n {
                continue;
            }
            let s = l.scores[rankings[k][kept[k]]];
            if best.is_none_or(|(b, bs)| s > bs || (s == bs && kept[k] < kept[b])) {
                best = Some((k, s));
            }
        }
        let (k, _) = best.expect("a layer with room exists while the count is feasible");
        kept[k] += 1;
        residual -= 1;
    }
    Ok(table.layers.iter().zip(&kept).map(|(l, &k)| top_ranked(l, k)).collect())
}

fn on_side(side: &str, e: Error) -> Error {
    match e {
        Error::Infeasible(m) => Error::Infeasible(format!("{side}: {m}")),
        other => other,
    }
}

/// Independent thresholds for the encoder and the decoder.
pub fn prune_encdec_thresholds(
    table: &MetricTable,
    enc_count: usize,
    dec_count: usize,
    min_per_layer: usize,
) -> Result<PruningMask> {
    let mut layers = global_threshold_layers(&table.side_table(Side::Encoder), enc_count, min_per_layer)
        .map_err(|e| on_side("encoder", e))?;
    layers.extend(
        global_threshold_layers(&table.side_table(Side::Decoder), dec_count, min_per_layer)
            .map_err(|e| on_side("decoder", e))?,
    );
    layers.sort_by_key(|l| l.layer_id);
    table.mask(layers, min_per_layer)
}

/// Uniformly random experts with the same per-layer quotas as
/// [`prune_fixed_per_layer`].
pub fn prune_random(config: &ModelConfig, budget: &Budget, seed: u64) -> Result<PruningMask> {
    let q = budget.quotas(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config
        .moe_layers()
        .into_iter()
        .map(|l| {
            let n = match l.side {
                Side::Encoder => q.encoder,
                Side::Decoder => q.decoder,
            };
            let mut retained = sample(&mut rng, config.num_experts, n).into_vec();
            retained.sort_unstable();
            MaskLayer {
                layer_id: l.id,
                side: l.side,
                retained,
            }
        })
        .collect();
    PruningMask::from_layers(
        "random",
        format!("seed={seed}"),
        budget.min_per_layer,
        config.num_experts,
        layers,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    FixedPerLayer,
    GlobalThreshold,
    EncDecThreshold,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Algorithm::FixedPerLayer),
            "global-threshold" => Ok(Algorithm::GlobalThreshold),
            "encdec-threshold" => Ok(Algorithm::EncDecThreshold),
            other => Err(Error::Invalid(format!("unknown pruning algorithm `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::FixedPerLayer => "fixed",
            Algorithm::GlobalThreshold => "global-threshold",
            Algorithm::EncDecThreshold => "encdec-threshold",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Normalizes `table` and applies `algo` under `budget`.
pub fn prune(table: &MetricTable, algo: Algorithm, budget: &Budget, config: &ModelConfig) -> Result<PruningMask> {
    let table = if table.normalized {
        table.clone()
    } else {
        table.normalize_per_layer()?
    };
    match algo {
        Algorithm::FixedPerLayer => prune_fixed_per_layer(&table, budget, config),
        Algorithm::GlobalThreshold => {
            budget.check_total(config)?;
            prune_global_threshold(&table, budget.total_retain, budget.min_per_layer)
        }
        Algorithm::EncDecThreshold => {
            let (e, d) = budget.side_counts(config)?;
            prune_encdec_thresholds(&table, e, d, budget.min_per_layer)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(layers: &[&[f64]]) -> MetricTable {
        MetricTable {
            kind: MetricKind::Importance,
            key: "test".into(),
            layers: layers
                .iter()
                .enumerate()
                .map(|(i, s)| MetricLayer {
                    layer_id: i,
                    side: Side::Encoder,
                    scores: s.to_vec(),
                })
                .collect(),
            normalized: true,
        }
    }

    #[test]
    fn metric_formulas() {
        let v = MetricKind::ImportanceVanilla.score(0.5, 0.0, 0.0, 0.8);
        assert!((v - 0.40).abs() < 1e-12);
        let i = MetricKind::Importance.score(0.5, 0.0, 0.0, 0.8);
        assert!((i - 1.1127705).abs() < 1e-6);
        for k in MetricKind::ALL {
            assert_eq!(k.score(0.0, 0.0, 0.0, 0.0), 0.0, "{k}");
            assert_eq!(MetricKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(matches!(MetricKind::parse("entropy"), Err(Error::UnknownMetric(_))));
    }

    #[test]
    fn metrics_can_disagree_on_order() {
        let a = (0.30, 0.90);
        let b = (0.35, 0.10);
        let van = |(t, c): (f64, f64)| MetricKind::ImportanceVanilla.score(t, 0.0, 0.0, c);
        let imp = |(t, c): (f64, f64)| MetricKind::Importance.score(t, 0.0, 0.0, c);
        assert!((van(a) - 0.270).abs() < 1e-12 && (van(b) - 0.035).abs() < 1e-12);
        assert!((imp(a) - 0.7378).abs() < 1e-4 && (imp(b) - 0.3868).abs() < 1e-4);
        assert!(van(a) > van(b) && imp(a) > imp(b));
        assert!(MetricKind::Top1.score(b.0, 0.0, 0.0, b.1) > MetricKind::Top1.score(a.0, 0.0, 0.0, a.1));
    }

    #[test]
    fn normalization() {
        let mut t = table(&[&[1.0, 1.0, 2.0]]);
        t.normalized = false;
        let n = t.normalize_per_layer().unwrap();
        assert_eq!(n.layers[0].scores, vec![0.25, 0.25, 0.5]);
        assert_eq!(n.normalize_per_layer().unwrap().layers[0].scores, n.layers[0].scores);
        let z = table(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(z.normalize_per_layer(), Err(Error::ZeroLayer(1))));
    }

    #[test]
    fn full_scale_budgets() {
        let c = ModelConfig::nllb_moe();
        let b = Budget::from_rate(&c, 0.75, Split::Balanced, 4).unwrap();
        assert_eq!(b.total_retain, 384);
        assert_eq!(
            b.quotas(&c).unwrap(),
            Quotas {
                encoder: 32,
                decoder: 32
            }
        );
        let b = Budget::new(384, Split::Explicit(240, 144), 4);
        assert_eq!(
            b.quotas(&c).unwrap(),
            Quotas {
                encoder: 40,
                decoder: 24
            }
        );
        let b = Budget::from_rate(&c, 0.80, Split::Ratio(3, 1), 4).unwrap();
        let q = b.quotas(&c).unwrap();
        assert_eq!((q.encoder, q.decoder), (36, 12));
        assert_eq!((q.encoder * 6, q.decoder * 6), (216, 72));
        let b = Budget::new(384, Split::Balanced, 4);
        assert_eq!(b.side_counts(&c).unwrap(), (192, 192));
    }

    #[test]
    fn indivisible_budget_is_rejected() {
        let c = ModelConfig::nllb_moe();
        assert!(matches!(
            Budget::new(385, Split::Balanced, 4).quotas(&c),
            Err(Error::Budget(_))
        ));
        assert!(Budget::new(384, Split::Explicit(241, 143), 4).quotas(&c).is_err());
        assert!(Budget::new(384, Split::Explicit(240, 140), 4).quotas(&c).is_err());
        // below the per-layer floor
        assert!(Budget::new(36, Split::Balanced, 4).quotas(&c).is_err());
    }

    #[test]
    fn split_parsing() {
        assert_eq!(Split::parse("balanced").unwrap(), Split::Balanced);
        assert_eq!(Split::parse("ratio=3:1").unwrap(), Split::Ratio(3, 1));
        assert_eq!(Split::parse("explicit=240,144").unwrap(), Split::Explicit(240, 144));
        for s in ["ratio=3", "explicit=1", "ratio=0:0", "even"] {
            assert!(Split::parse(s).is_err(), "{s}");
        }
    }

    #[test]
    fn fixed_keeps_top_with_low_id_ties() {
        let mut c = ModelConfig::toy(16);
        c.num_experts = 4;
        let t = MetricTable {
            layers: c
                .moe_layers()
                .iter()
                .map(|l| MetricLayer {
                    layer_id: l.id,
                    side: l.side,
                    scores: vec![0.1, 0.4, 0.1, 0.4],
                })
                .collect(),
            ..table(&[])
        };
        let m = prune_fixed_per_layer(&t, &Budget::new(8, Split::Balanced, 2), &c).unwrap();
        assert!(m.layers.iter().all(|l| l.retained == vec![1, 3]));
        let m = prune_fixed_per_layer(&t, &Budget::new(12, Split::Balanced, 2), &c).unwrap();
        assert!(m.layers.iter().all(|l| l.retained == vec![0, 1, 3]));
    }

    #[test]
    fn worked_threshold_example() {
        let t = table(&[&[0.7, 0.2, 0.06, 0.04], &[0.4, 0.3, 0.2, 0.1]]);
        // θ = 0.9 is the largest grid point with 2 + 3 ≤ 5; at 0.901 the
        // counts jump to 3 + 4
        assert_eq!(counts_at(&t, 0.9, 1), vec![2, 3]);
        assert_eq!(counts_at(&t, 0.901, 1), vec![3, 4]);
        let m = prune_global_threshold(&t, 5, 1).unwrap();
        assert_eq!(m.layers[0].retained, vec![0, 1]);
        assert_eq!(m.layers[1].retained, vec![0, 1, 2]);
        assert_eq!(m.layers, oracle(&t, 5, 1));
    }

    #[test]
    fn full_count_gives_full_mask() {
        let t = table(&[&[0.5, 0.5, 0.0], &[1.0, 0.0, 0.0]]);
        let m = prune_global_threshold(&t, 6, 1).unwrap();
        assert!(m.layers.iter().all(|l| l.retained == vec![0, 1, 2]));
    }

    #[test]
    fn infeasible_counts() {
        let t = table(&[&[0.5, 0.5, 0.0], &[1.0, 0.0, 0.0]]);
        assert!(matches!(prune_global_threshold(&t, 3, 2), Err(Error::Infeasible(_))));
        assert!(matches!(prune_global_threshold(&t, 7, 1), Err(Error::Infeasible(_))));
    }

    #[test]
    fn encdec_on_symmetric_table() {
        let c = ModelConfig::toy(16);
        let scores = [0.3, 0.05, 0.2, 0.1, 0.15, 0.05, 0.1, 0.05];
        let t = MetricTable {
            layers: c
                .moe_layers()
                .iter()
                .map(|l| MetricLayer {
                    layer_id: l.id,
                    side: l.side,
                    scores: scores.to_vec(),
                })
                .collect(),
            ..table(&[])
        };
        let m = prune_encdec_thresholds(&t, 10, 10, 4).unwrap();
        assert_eq!(m.total_retained(), 20);
        assert_eq!(m.layers[0].retained, m.layers[2].retained);
        assert_eq!(m.layers[1].retained, m.layers[3].retained);
        let full = prune_encdec_thresholds(&t, 16, 16, 4).unwrap();
        assert!(full.is_full());
    }

    #[test]
    fn random_baseline_uses_fixed_quotas() {
        let c = ModelConfig::toy(16);
        let b = Budget::new(16, Split::Balanced, 4);
        let a = prune_random(&c, &b, 1).unwrap();
        assert!(a.layers.iter().all(|l| l.retained.len() == 4));
        assert_eq!(a, prune_random(&c, &b, 1).unwrap());
        assert_ne!(a.layers, prune_random(&c, &b, 2).unwrap().layers);
    }

    /// Subset enumeration: the fewest experts reaching θ is the smallest
    /// subset size whose mass reaches θ; among subsets of the chosen size
    /// the kept one has the largest mass, ties to lexicographically lower
    /// ids. Leftover budget goes to the best excluded expert by score, then
    /// smaller layer, lower layer id, lower expert id.
    fn oracle(t: &MetricTable, count: usize, min_per_layer: usize) -> Vec<MaskLayer> {
        let n = t.num_experts();
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
        let mut best_sizes = None;
        for step in 0..=1000 {
            let theta = step as f64 / 1000.0;
            let sizes: Vec<usize> = t.layers.iter().map(|l| size_at(l, theta)).collect();
            if sizes.iter().sum::<usize>() <= count {
                best_sizes = Some(sizes);
            }
        }
        let sizes = best_sizes.unwrap();
        let mut kept: Vec<Vec<usize>> = t
            .layers
            .iter()
            .zip(&sizes)
            .map(|(l, &k)| {
                let mut cands: Vec<&Vec<usize>> = subsets.iter().filter(|s| s.len() == k).collect();
                cands.sort_by(|a, b| mass(l, b).total_cmp(&mass(l, a)).then(a.cmp(b)));
                let top = mass(l, cands[0]);
                // near-equal masses are ties; keep the lowest ids
                let tied: Vec<&&Vec<usize>> = cands.iter().filter(|s| (mass(l, s) - top).abs() < 1e-12).collect();
                let mut pick = tied.into_iter().min_by(|a, b| a.cmp(b)).unwrap().to_vec();
                pick.sort_unstable();
                pick
            })
            .collect();
        let mut left = count - sizes.iter().sum::<usize>();
        while left > 0 {
            let mut excluded: Vec<(f64, usize, usize)> = Vec::new();
            for (k, l) in t.layers.iter().enumerate() {
                for e in 0..n {
                    if !kept[k].contains(&e) {
                        excluded.push((l.scores[e], k, e));
                    }
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

    fn random_table(layers: usize, n: usize, seed: u64, zero_prob: f64) -> MetricTable {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..layers)
            .map(|_| {
                let mut r: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < zero_prob {
                            0.0
                        } else {
                            rng.random::<f64>()
                        }
                    })
                    .collect();
                r[rng.random_range(0..n)] += 0.5;
                r
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut t = table(&refs);
        t.normalized = false;
        t.normalize_per_layer().unwrap()
    }

    #[test]
    fn uniform_metrics_spread_evenly() {
        for layers in 2..6 {
            let rows = vec![vec![0.125; 8]; layers];
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let t = table(&refs);
            for count in layers..=layers * 8 {
                let m = prune_global_threshold(&t, count, 1).unwrap();
                let sizes: Vec<usize> = m.layers.iter().map(|l| l.retained.len()).collect();
                let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
                assert!(spread <= 1, "{sizes:?}");
                assert_eq!(m.layers, oracle(&t, count, 1));
            }
        }
    }

    proptest! {
        #[test]
        fn threshold_matches_oracle_on_small_tables(layers in 1usize..=3, n in 2usize..=5, seed in any::<u64>(), min in 1usize..=3) {
            let t = random_table(layers, n, seed, 0.2);
            let floor = min.min(n);
            for count in layers * floor..=layers * n {
                let m = prune_global_threshold(&t, count, min).unwrap();
                prop_assert_eq!(m.total_retained(), count);
                prop_assert_eq!(&m.layers, &oracle(&t, count, min));
            }
        }

        #[test]
        fn threshold_counts_are_monotone(layers in 2usize..=12, n in prop::sample::select(vec![4usize, 8, 16]), seed in any::<u64>()) {
            let t = random_table(layers, n, seed, 0.1);
            let mut prev = counts_at(&t, 0.0, 4);
            for step in 1..=THRESHOLD_STEPS {
                let c = counts_at(&t, threshold(step), 4);
                prop_assert!(c.iter().zip(&prev).all(|(a, b)| a >= b));
                prev = c;
            }
        }

        #[test]
        fn scaling_a_layer_keeps_masks(seed in any::<u64>(), c in 0.01f64..100.0) {
            let t = random_table(4, 8, seed, 0.0);
            let mut raw = t.clone();
            raw.normalized = false;
            for s in &mut raw.layers[1].scores {
                *s *= c;
            }
            let renorm = raw.normalize_per_layer().unwrap();
            let a = prune_global_threshold(&t, 14, 2).unwrap();
            let b = prune_global_threshold(&renorm, 14, 2).unwrap();
            prop_assert_eq!(a.layers, b.layers);
        }

        #[test]
        fn normalization_keeps_ranking(seed in any::<u64>()) {
            let t = random_table(3, 8, seed, 0.0);
            let mut raw = t.clone();
            for s in &mut raw.layers[0].scores {
                *s *= 7.0;
            }
            raw.normalized = false;
            let n = raw.normalize_per_layer().unwrap();
            for (a, b) in raw.layers.iter().zip(&n.layers) {
                prop_assert_eq!(a.ranking(), b.ranking());
            }
        }

        #[test]
        fn fixed_respects_rank_order(seed in any::<u64>()) {
            let c = ModelConfig::toy(16);
            let mut t = random_table(4, 8, seed, 0.3);
            for (l, info) in t.layers.iter_mut().zip(c.moe_layers()) {
                l.layer_id = info.id;
                l.side = info.side;
            }
            let m = prune_fixed_per_layer(&t, &Budget::new(20, Split::Balanced, 4), &c).unwrap();
            for (ml, tl) in m.layers.iter().zip(&t.layers) {
                prop_assert_eq!(ml.retained.len(), 5);
                for e in 0..8 {
                    if ml.retained.contains(&e) {
                        continue;
                    }
                    for &r in &ml.retained {
                        prop_assert!(tl.scores[r] > tl.scores[e] || (tl.scores[r] == tl.scores[e] && r < e));
                    }
                }
            }
        }
    }
}
