//! Retained-expert masks and their text file format.
//!
//! ```text
//! moeprune-mask v1
//! metric importance
//! key lang_pair:aa-bb
//! min_per_layer 4
//! num_experts 8
//! layer 0 encoder 0 2 5 7
//! layer 1 encoder 1 2 3 6
//! ```

use std::fmt::Write as _;

use crate::config::{ModelConfig, Side};
use crate::error::{Error, Result};

pub const MASK_HEADER: &str = "moeprune-mask v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskLayer {
    pub layer_id: usize,
    pub side: Side,
    /// Sorted, unique expert ids.
    pub retained: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruningMask {
    pub metric: String,
    pub key: String,
    pub min_per_layer: usize,
    pub num_experts: usize,
    pub layers: Vec<MaskLayer>,
}

impl PruningMask {
    /// Mask that keeps every expert.
    pub fn full(config: &ModelConfig) -> Self {
        Self {
            metric: "none".into(),
            key: "full".into(),
            min_per_layer: 0,
            num_experts: config.num_experts,
            layers: config
                .moe_layers()
                .into_iter()
                .map(|l| MaskLayer {
                    layer_id: l.id,
                    side: l.side,
                    retained: (0..config.num_experts).collect(),
                })
                .collect(),
        }
    }

    pub fn from_layers(
        metric: impl Into<String>,
        key: impl Into<String>,
        min_per_layer: usize,
        num_experts: usize,
        mut layers: Vec<MaskLayer>,
    ) -> Result<Self> {
        layers.sort_by_key(|l| l.layer_id);
        for l in &mut layers {
            l.retained.sort_unstable();
        }
        let mask = Self {
            metric: metric.into(),
            key: key.into(),
            min_per_layer,
            num_experts,
            layers,
        };
        mask.check_ids()?;
        Ok(mask)
    }

    pub fn retained(&self, layer_id: usize) -> Option<&[usize]> {
        self.layers
            .iter()
            .find(|l| l.layer_id == layer_id)
            .map(|l| l.retained.as_slice())
    }

    pub fn total_retained(&self) -> usize {
        self.layers.iter().map(|l| l.retained.len()).sum()
    }

    pub fn retained_on(&self, side: Side) -> usize {
        self.layers
            .iter()
            .filter(|l| l.side == side)
            .map(|l| l.retained.len())
            .sum()
    }

    pub fn is_full(&self) -> bool {
        self.layers.iter().all(|l| l.retained.len() == self.num_experts)
    }

    fn check_ids(&self) -> Result<()> {
        for l in &self.layers {
            if l.retained.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Mask(format!("layer {} has duplicate expert ids", l.layer_id)));
            }
            if let Some(&bad) = l.retained.iter().find(|&&e| e >= self.num_experts) {
                return Err(Error::Mask(format!(
                    "layer {} retains expert {bad}, only {} exist",
                    l.layer_id, self.num_experts
                )));
            }
        }
        Ok(())
    }

    /// Checks the mask against a model layout: every MoE layer present with
    /// matching side, ids in range, and the per-layer floor respected.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.num_experts != config.num_experts {
            return Err(Error::Mask(format!(
                "mask is for {} experts per layer, model has {}",
                self.num_experts, config.num_experts
            )));
        }
        self.check_ids()?;
        let layers = config.moe_layers();
        if layers.len() != self.layers.len() {
            return Err(Error::Mask(format!(
                "mask covers {} MoE layers, model has {}",
                self.layers.len(),
                layers.len()
            )));
        }
        let floor = self.min_per_layer.min(self.num_experts);
        for (info, l) in layers.iter().zip(&self.layers) {
            if info.id != l.layer_id || info.side != l.side {
                return Err(Error::Mask(format!("unexpected layer entry {} {}", l.layer_id, l.side)));
            }
            if l.retained.len() < floor {
                return Err(Error::Mask(format!(
                    "layer {} keeps {} experts, below the floor of {floor}",
                    l.layer_id,
                    l.retained.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MASK_HEADER}").unwrap();
        writeln!(out, "metric {}", self.metric).unwrap();
        writeln!(out, "key {}", self.key).unwrap();
        writeln!(out, "min_per_layer {}", self.min_per_layer).unwrap();
        writeln!(out, "num_experts {}", self.num_experts).unwrap();
        for l in &self.layers {
            write!(out, "layer {} {}", l.layer_id, l.side).unwrap();
            for e in &l.retained {
                write!(out, " {e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::parse("mask file", line, msg);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, MASK_HEADER)) => {}
            _ => return Err(err(1, "missing header")),
        }
        let mut field = |name: &str| -> Result<(usize, String)> {
            let (n, line) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(|v| (n, v.to_string()))
                .ok_or_else(|| err(n, &format!("expected `{name}`")))
        };
        let (_, metric) = field("metric")?;
        let (_, key) = field("key")?;
        let (n, min) = field("min_per_layer")?;
        let min_per_layer = min.parse().map_err(|_| err(n, "bad min_per_layer"))?;
        let (n, ne) = field("num_experts")?;
        let num_experts = ne.parse().map_err(|_| err(n, "bad num_experts"))?;
        let mut layers = Vec::new();
        for (n, line) in lines {
            let mut parts = line.split(' ');
            if parts.next() != Some("layer") {
                return Err(err(n, "expected `layer`"));
            }
            let layer_id = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| err(n, "bad layer id"))?;
            let side = parts.next().and_then(Side::parse).ok_or_else(|| err(n, "bad side"))?;
            let retained = parts
                .map(|p| p.parse::<usize>().map_err(|_| err(n, "bad expert id")))
                .collect::<Result<Vec<_>>>()?;
            layers.push(MaskLayer {
                layer_id,
                side,
                retained,
            });
        }
        let mask = Self {
            metric,
            key,
            min_per_layer,
            num_experts,
            layers,
        };
        mask.check_ids()?;
        if mask.layers.windows(2).any(|w| w[0].layer_id >= w[1].layer_id) {
            return Err(err(0, "layers must be listed in increasing id order"));
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_mask_validates() {
        let c = ModelConfig::toy(20);
        let m = PruningMask::full(&c);
        m.validate(&c).unwrap();
        assert!(m.is_full());
        assert_eq!(m.total_retained(), 32);
        assert_eq!(m.retained_on(Side::Decoder), 16);
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        let bad = MaskLayer {
            layer_id: 0,
            side: Side::Encoder,
            retained: vec![1, 9],
        };
        assert!(PruningMask::from_layers("top1", "global", 1, 8, vec![bad]).is_err());
        let text = "moeprune-mask v1\nmetric top1\nkey global\nmin_per_layer 1\nnum_experts 8\nlayer 0 encoder 1 1\n";
        assert!(PruningMask::parse(text).is_err());
    }

    #[test]
    fn floor_is_checked() {
        let c = ModelConfig::toy(20);
        let mut m = PruningMask::full(&c);
        m.min_per_layer = 4;
        m.layers[2].retained = vec![0, 1, 2];
        assert!(m.validate(&c).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(sets in proptest::collection::vec(proptest::collection::btree_set(0usize..16, 0..16), 1..6)) {
            let layers = sets
                .into_iter()
                .enumerate()
                .map(|(i, s)| MaskLayer {
                    layer_id: i,
                    side: if i % 2 == 0 { Side::Encoder } else { Side::Decoder },
                    retained: s.into_iter().collect(),
                })
                .collect();
            let m = PruningMask::from_layers("importance", "lang_pair:aa-bb", 4, 16, layers).unwrap();
            let text = m.to_text();
            let back = PruningMask::parse(&text).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
