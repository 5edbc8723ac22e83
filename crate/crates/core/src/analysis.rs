//! Expert-specialization analysis: overlap of retained expert sets,
//! clustering of per-language importance vectors, and output-length
//! diagnostics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::config::Side;
use crate::error::{Error, Result};
use crate::mask::PruningMask;
use crate::pruning::{compute_metric, MetricKind};
use crate::stats::{KeyedStats, StatsKey};

/// Retained `(layer_id, expert_id)` pairs of one side of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertSet {
    pub side: Side,
    pub experts: BTreeSet<(usize, usize)>,
}

impl ExpertSet {
    pub fn from_mask(mask: &PruningMask, side: Side) -> Self {
        Self {
            side,
            experts: mask
                .layers
                .iter()
                .filter(|l| l.side == side)
                .flat_map(|l| l.retained.iter().map(move |&e| (l.layer_id, e)))
                .collect(),
        }
    }
}

/// Intersection over union; two empty sets count as identical.
pub fn jaccard(a: &ExpertSet, b: &ExpertSet) -> Result<f64> {
    if a.side != b.side {
        return Err(Error::Invalid(format!(
            "cannot compare {} and {} expert sets",
            a.side, b.side
        )));
    }
    let union = a.experts.union(&b.experts).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.experts.intersection(&b.experts).count() as f64 / union as f64)
}

/// Mean pairwise Jaccard of decoder sets whose directions share the target
/// language, and of those whose targets differ.
pub fn target_jaccard_contrast(sets: &[((String, String), ExpertSet)]) -> Result<(f64, f64)> {
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let s = jaccard(&sets[i].1, &sets[j].1)?;
            if sets[i].0 .1 == sets[j].0 .1 {
                same.push(s);
            } else {
                diff.push(s);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok((mean(&same), mean(&diff)))
}

/// Pairwise Jaccard table with labelled rows and columns.
pub fn similarity_matrix(labelled: &[(String, ExpertSet)]) -> Result<String> {
    let mut out = String::new();
    for (l, _) in labelled {
        write!(out, "\t{l}").unwrap();
    }
    out.push('\n');
    for (l, a) in labelled {
        out.push_str(l);
        for (_, b) in labelled {
            write!(out, "\t{:.4}", jaccard(a, b)?).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector {
    pub language: String,
    pub side: Side,
    pub values: Vec<f64>,
}

/// Per-layer normalized importance of every expert on `side`, layer by
/// layer, for each language's language-specific statistics.
pub fn build_importance_vectors(stats: &KeyedStats, side: Side, languages: &[String]) -> Result<Vec<ImportanceVector>> {
    languages
        .iter()
        .map(|lang| {
            let key = StatsKey::lang_specific(side, lang);
            let s = stats
                .get(&key)
                .ok_or_else(|| Error::Invalid(format!("no {side} statistics for language `{lang}`")))?;
            let label = key.to_string();
            let table = compute_metric(&s.finalize(&label)?, MetricKind::Importance, &label).normalize_per_layer()?;
            let mut layers = table.layers;
            layers.sort_by_key(|l| l.layer_id);
            Ok(ImportanceVector {
                language: lang.clone(),
                side,
                values: layers.into_iter().flat_map(|l| l.scores).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Linkage {
    Single,
    Complete,
    Average,
}

impl Linkage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            "average" => Ok(Linkage::Average),
            other => Err(Error::Invalid(format!("unknown linkage `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Euclidean,
    Manhattan,
    Cosine,
}

impl Distance {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "manhattan" => Ok(Distance::Manhattan),
            "cosine" => Ok(Distance::Cosine),
            other => Err(Error::Invalid(format!("unknown distance `{other}`"))),
        }
    }

    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Distance::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

/// Binary merge tree; a merge's height is the linkage distance at which
/// its two children were joined.
#[derive(Clone, Debug, PartialEq)]
pub enum Dendrogram {
    Leaf(String),
    Merge {
        left: Box<Dendrogram>,
        right: Box<Dendrogram>,
        height: f64,
    },
}

impl Dendrogram {
    pub fn height(&self) -> f64 {
        match self {
            Dendrogram::Leaf(_) => 0.0,
            Dendrogram::Merge { height, .. } => *height,
        }
    }

    pub fn leaves(&self) -> Vec<&str> {
        match self {
            Dendrogram::Leaf(l) => vec![l.as_str()],
            Dendrogram::Merge { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    fn min_label(&self) -> &str {
        match self {
            Dendrogram::Leaf(l) => l,
            Dendrogram::Merge { left, right, .. } => left.min_label().min(right.min_label()),
        }
    }

    /// Same tree with the child holding the smaller label always on the
    /// left.
    pub fn canonical(&self) -> Dendrogram {
        match self {
            Dendrogram::Leaf(l) => Dendrogram::Leaf(l.clone()),
            Dendrogram::Merge { left, right, height } => {
                let (l, r) = (left.canonical(), right.canonical());
                let (l, r) = if r.min_label() < l.min_label() { (r, l) } else { (l, r) };
                Dendrogram::Merge {
                    left: Box::new(l),
                    right: Box::new(r),
                    height: *height,
                }
            }
        }
    }

    /// Same shape and labels, heights equal within `tol`.
    pub fn approx_eq(&self, other: &Dendrogram, tol: f64) -> bool {
        match (self, other) {
            (Dendrogram::Leaf(a), Dendrogram::Leaf(b)) => a == b,
            (
                Dendrogram::Merge {
                    left: la,
                    right: ra,
                    height: ha,
                },
                Dendrogram::Merge {
                    left: lb,
                    right: rb,
                    height: hb,
                },
            ) => (ha - hb).abs() <= tol && la.approx_eq(lb, tol) && ra.approx_eq(rb, tol),
            _ => false,
        }
    }

    /// Newick text. A merge sits at half its height, so the path between
    /// two leaves has the length at which they were joined.
    pub fn to_newick(&self) -> String {
        fn emit(t: &Dendrogram, parent: f64, out: &mut String) {
            match t {
                Dendrogram::Leaf(l) => out.push_str(&newick_label(l)),
                Dendrogram::Merge { left, right, height } => {
                    out.push('(');
                    emit(left, *height, out);
                    out.push(',');
                    emit(right, *height, out);
                    out.push(')');
                }
            }
            if parent.is_finite() {
                write!(out, ":{}", (parent - t.height()) / 2.0).unwrap();
            }
        }
        let mut out = String::new();
        emit(self, f64::NAN, &mut out);
        out.push(';');
        out
    }

    pub fn parse_newick(text: &str) -> Result<Dendrogram> {
        let mut p = NewickParser {
            chars: text.trim().chars().collect(),
            pos: 0,
        };
        let (tree, _) = p.node()?;
        p.expect(';')?;
        if p.pos != p.chars.len() {
            return Err(p.error("trailing characters"));
        }
        Ok(tree)
    }

    /// Standalone SVG: leaves along the bottom, merge height upwards. Leaf
    /// labels carry the class `group-<name>` from `group_of`.
    pub fn to_svg(&self, group_of: &dyn Fn(&str) -> Option<String>) -> String {
        const PALETTE: [&str; 8] = [
            "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
        ];
        let leaves = self.leaves();
        let (step, top, plot_h, label_h) = (40.0, 20.0, 240.0, 60.0);
        let width = step * leaves.len() as f64 + 40.0;
        let max_h = self.height().max(f64::MIN_POSITIVE);
        let y_of = |h: f64| top + plot_h * (1.0 - h / max_h);
        let mut groups: BTreeSet<String> = BTreeSet::new();
        for l in &leaves {
            if let Some(g) = group_of(l) {
                groups.insert(g);
            }
        }
        let mut svg = String::new();
        writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="12">"#,
            top + plot_h + label_h
        )
        .unwrap();
        svg.push_str("<style>\n.link { stroke: #333; fill: none; }\n");
        for (i, g) in groups.iter().enumerate() {
            writeln!(
                svg,
                ".group-{} {{ fill: {}; }}",
                css_ident(g),
                PALETTE[i % PALETTE.len()]
            )
            .unwrap();
        }
        svg.push_str("</style>\n");
        let mut next_leaf = 0usize;
        fn draw(
            t: &Dendrogram,
            svg: &mut String,
            next_leaf: &mut usize,
            step: f64,
            y_of: &dyn Fn(f64) -> f64,
            group_of: &dyn Fn(&str) -> Option<String>,
        ) -> (f64, f64) {
            match t {
                Dendrogram::Leaf(l) => {
                    let x = 40.0 + step * *next_leaf as f64;
                    *next_leaf += 1;
                    let y = y_of(0.0);
                    let class = match group_of(l) {
                        Some(g) => format!("leaf group-{}", css_ident(&g)),
                        None => "leaf".into(),
                    };
                    writeln!(
                        svg,
                        r#"<text class="{class}" x="{x}" y="{}" text-anchor="end" transform="rotate(-60 {x} {})">{}</text>"#,
                        y + 14.0,
                        y + 14.0,
                        xml_escape(l)
                    )
                    .unwrap();
                    (x, y)
                }
                Dendrogram::Merge { left, right, height } => {
                    let (xl, yl) = draw(left, svg, next_leaf, step, y_of, group_of);
                    let (xr, yr) = draw(right, svg, next_leaf, step, y_of, group_of);
                    let y = y_of(*height);
                    writeln!(svg, r#"<path class="link" d="M{xl},{yl} V{y} H{xr} V{yr}"/>"#).unwrap();
                    ((xl + xr) / 2.0, y)
                }
            }
        }
        draw(self, &mut svg, &mut next_leaf, step, &y_of, group_of);
        svg.push_str("</svg>\n");
        svg
    }
}

fn css_ident(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn newick_label(l: &str) -> String {
    if l.chars().any(|c| "()[]',:; \t".contains(c)) {
        format!("'{}'", l.replace('\'', "''"))
    } else {
        l.to_string()
    }
}

struct NewickParser {
    chars: Vec<char>,
    pos: usize,
}

impl NewickParser {
    fn error(&self, msg: &str) -> Error {
        Error::parse("newick", 1, format!("{msg} at column {}", self.pos + 1))
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{c}`")))
        }
    }

    fn label(&mut self) -> Result<String> {
        if self.peek() == Some('\'') {
            self.pos += 1;
            let mut s = String::new();
            loop {
                match self.peek() {
                    None => return Err(self.error("unterminated quoted label")),
                    Some('\'') if self.chars.get(self.pos + 1) == Some(&'\'') => {
                        s.push('\'');
                        self.pos += 2;
                    }
                    Some('\'') => {
                        self.pos += 1;
                        return Ok(s);
                    }
                    Some(c) => {
                        s.push(c);
                        self.pos += 1;
                    }
                }
            }
        }
        let start = self.pos;
        while self.peek().is_some_and(|c| !"(),:;".contains(c)) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a label"));
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }

    fn branch(&mut self) -> Result<f64> {
        if self.peek() != Some(':') {
            return Ok(0.0);
        }
        self.pos += 1;
        let start = self.pos;
        while self.peek().is_some_and(|c| !"(),:;".contains(c)) {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        s.parse().map_err(|_| self.error("bad branch length"))
    }

    /// A subtree and its branch length to the parent.
    fn node(&mut self) -> Result<(Dendrogram, f64)> {
        let tree = if self.peek() == Some('(') {
            self.pos += 1;
            let (left, bl) = self.node()?;
            self.expect(',')?;
            let (right, br) = self.node()?;
            self.expect(')')?;
            // depth below this node, measured through the left child
            let height = left.height() + 2.0 * bl;
            if (right.height() + 2.0 * br - height).abs() > 1e-9 * height.max(1.0) {
                return Err(self.error("tree is not ultrametric"));
            }
            Dendrogram::Merge {
                left: Box::new(left),
                right: Box::new(right),
                height,
            }
        } else {
            Dendrogram::Leaf(self.label()?)
        };
        let b = self.branch()?;
        Ok((tree, b))
    }
}

/// Agglomerative clustering of labelled vectors. Clusters are merged at
/// the smallest linkage distance; ties go to the pair whose smallest
/// labels sort first. Inter-cluster distances are updated with the
/// Lance-Williams recurrences.
pub fn hcluster(items: &[(String, Vec<f64>)], linkage: Linkage, distance: Distance) -> Result<Dendrogram> {
    if items.len() < 2 {
        return Err(Error::Invalid("clustering needs at least two vectors".into()));
    }
    let dim = items[0].1.len();
    if items.iter().any(|(_, v)| v.len() != dim) {
        return Err(Error::Shape("importance vectors differ in length".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].0.cmp(&items[b].0));
    let mut clusters: Vec<Option<(Dendrogram, usize)>> = order
        .iter()
        .map(|&i| Some((Dendrogram::Leaf(items[i].0.clone()), 1)))
        .collect();
    let m = clusters.len();
    let mut d = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            d[i][j] = distance.between(&items[order[i]].1, &items[order[j]].1);
        }
    }
    for _ in 1..m {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..m {
            if clusters[i].is_none() {
                continue;
            }
            for j in i + 1..m {
                if clusters[j].is_none() {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => {
                        d[i][j] < bd || (d[i][j] == bd && pair_labels(&clusters, i, j) < pair_labels(&clusters, bi, bj))
                    }
                };
                if better {
                    best = Some((d[i][j], i, j));
                }
            }
        }
        let (h, i, j) = best.expect("two live clusters remain");
        let (ti, ni) = clusters[i].take().expect("live");
        let (tj, nj) = clusters[j].take().expect("live");
        for k in 0..m {
            if k == i || clusters[k].is_none() {
                continue;
            }
            let v = match linkage {
                Linkage::Single => d[k][i].min(d[k][j]),
                Linkage::Complete => d[k][i].max(d[k][j]),
                Linkage::Average => (ni as f64 * d[k][i] + nj as f64 * d[k][j]) / (ni + nj) as f64,
            };
            d[k][i] = v;
            d[i][k] = v;
        }
        clusters[i] = Some((
            Dendrogram::Merge {
                left: Box::new(ti),
                right: Box::new(tj),
                height: h,
            },
            ni + nj,
        ));
    }
    let root = clusters.into_iter().flatten().next().expect("one cluster left").0;
    Ok(root.canonical())
}

fn pair_labels(clusters: &[Option<(Dendrogram, usize)>], i: usize, j: usize) -> (String, String) {
    let a = clusters[i].as_ref().expect("live").0.min_label().to_string();
    let b = clusters[j].as_ref().expect("live").0.min_label().to_string();
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Total hypothesis whitespace tokens over total reference tokens.
pub fn length_ratio(hypotheses: &[&str], references: &[&str]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let count = |xs: &[&str]| xs.iter().map(|s| s.split_whitespace().count()).sum::<usize>();
    let r = count(references);
    if r == 0 {
        return Err(Error::Invalid("references are empty".into()));
    }
    Ok(count(hypotheses) as f64 / r as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthRatioReport {
    pub per_direction: Vec<(String, f64)>,
    pub mean: f64,
    /// Population standard deviation across directions.
    pub std: f64,
}

impl LengthRatioReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("direction\tlength_ratio\n");
        for (d, r) in &self.per_direction {
            writeln!(out, "{d}\t{r:.4}").unwrap();
        }
        writeln!(out, "mean\t{:.4}\nstd\t{:.4}", self.mean, self.std).unwrap();
        out
    }
}

pub fn length_ratio_report(directions: &[(String, Vec<&str>, Vec<&str>)]) -> Result<LengthRatioReport> {
    if directions.is_empty() {
        return Err(Error::Invalid("no directions to report".into()));
    }
    let per_direction: Vec<(String, f64)> = directions
        .iter()
        .map(|(name, h, r)| Ok((name.clone(), length_ratio(h, r)?)))
        .collect::<Result<_>>()?;
    let n = per_direction.len() as f64;
    let mean = per_direction.iter().map(|(_, r)| r).sum::<f64>() / n;
    let var = per_direction.iter().map(|(_, r)| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(LengthRatioReport {
        per_direction,
        mean,
        std: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn set(side: Side, pairs: &[(usize, usize)]) -> ExpertSet {
        ExpertSet {
            side,
            experts: pairs.iter().copied().collect(),
        }
    }

    #[test]
    fn jaccard_cases() {
        let a = set(Side::Encoder, &[(0, 1), (0, 2)]);
        let b = set(Side::Encoder, &[(0, 3), (0, 4)]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
        let e = set(Side::Encoder, &[]);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert!(jaccard(&a, &set(Side::Decoder, &[(0, 1)])).is_err());
    }

    #[test]
    fn length_ratios() {
        let r = length_ratio_report(&[
            ("aa-bb".into(), vec!["a b", "c"], vec!["a b", "c"]),
            ("aa-cc".into(), vec!["a b a b", "c c"], vec!["a b", "c"]),
        ])
        .unwrap();
        assert_eq!(r.per_direction[0].1, 1.0);
        assert_eq!(r.per_direction[1].1, 2.0);
        assert_eq!((r.mean, r.std), (1.5, 0.5));
        assert!(length_ratio(&["a"], &[""]).is_err());
    }

    fn items(points: &[(&str, Vec<f64>)]) -> Vec<(String, Vec<f64>)> {
        points.iter().map(|(l, v)| (l.to_string(), v.clone())).collect()
    }

    #[test]
    fn two_points_merge_at_their_distance() {
        let t = hcluster(
            &items(&[("A", vec![0.0, 0.0]), ("B", vec![3.0, 4.0])]),
            Linkage::Average,
            Distance::Euclidean,
        )
        .unwrap();
        assert_eq!(t.height(), 5.0);
    }

    #[test]
    fn close_pair_merges_first() {
        // A and B are 1 apart, C is 10 beyond B
        let pts = items(&[("A", vec![0.0]), ("B", vec![1.0]), ("C", vec![11.0])]);
        let t = hcluster(&pts, Linkage::Average, Distance::Euclidean).unwrap();
        match &t {
            Dendrogram::Merge { left, right, height } => {
                assert_eq!(left.leaves(), vec!["A", "B"]);
                assert_eq!(right.leaves(), vec!["C"]);
                assert_eq!(*height, 10.5);
            }
            _ => panic!("expected a merge"),
        }
    }

    #[test]
    fn newick_midpoint() {
        let t = Dendrogram::Merge {
            left: Box::new(Dendrogram::Leaf("A".into())),
            right: Box::new(Dendrogram::Leaf("B".into())),
            height: 2.0,
        };
        assert_eq!(t.to_newick(), "(A:1,B:1);");
        assert_eq!(Dendrogram::parse_newick("(A:1,B:1);").unwrap(), t);
        assert!(Dendrogram::parse_newick("(A:1,B:3);").is_err());
        assert!(Dendrogram::parse_newick("(A:1,B:1)").is_err());
    }

    #[test]
    fn quoted_labels_round_trip() {
        let t = Dendrogram::Merge {
            left: Box::new(Dendrogram::Leaf("it's (x)".into())),
            right: Box::new(Dendrogram::Leaf("y".into())),
            height: 0.5,
        };
        assert_eq!(Dendrogram::parse_newick(&t.to_newick()).unwrap(), t);
    }

    #[test]
    fn svg_has_one_label_per_leaf() {
        let pts = items(&[
            ("aa", vec![0.0]),
            ("bb", vec![1.0]),
            ("cc", vec![5.0]),
            ("dd", vec![9.0]),
        ]);
        let t = hcluster(&pts, Linkage::Average, Distance::Euclidean).unwrap();
        let svg = t.to_svg(&|l| Some(if l < "cc" { "x".into() } else { "y".into() }));
        assert_eq!(svg.matches("<text class=\"leaf").count(), 4);
        assert!(svg.contains(".group-x") && svg.contains(".group-y"));
    }

    /// Recomputes every linkage distance from the original points at each
    /// step instead of updating a matrix.
    fn brute_force(points: &[(String, Vec<f64>)], linkage: Linkage) -> Dendrogram {
        let dist = |a: usize, b: usize| Distance::Euclidean.between(&points[a].1, &points[b].1);
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
                    let ds: Vec<f64> = clusters[i]
                        .0
                        .iter()
                        .flat_map(|&a| clusters[j].0.iter().map(move |&b| (a, b)))
                        .map(|(a, b)| dist(a, b))
                        .collect();
                    let v = match linkage {
                        Linkage::Single => ds.iter().cloned().fold(f64::INFINITY, f64::min),
                        Linkage::Complete => ds.iter().cloned().fold(0.0, f64::max),
                        Linkage::Average => ds.iter().sum::<f64>() / ds.len() as f64,
                    };
                    let (a, b) = (min_label(&clusters[i].0), min_label(&clusters[j].0));
                    let key = if a <= b { (a, b) } else { (b, a) };
                    let replace = match &best {
                        None => true,
                        Some((bv, bk, _, _)) => v < *bv - 1e-12 || ((v - *bv).abs() <= 1e-12 && key < *bk),
                    };
                    if replace {
                        best = Some((v, key, i, j));
                    }
                }
            }
            let (v, _, i, j) = best.unwrap();
            let cj = clusters.remove(j);
            let ci = clusters.remove(i);
            let mut members = ci.0;
            members.extend(cj.0);
            clusters.push((
                members,
                Dendrogram::Merge {
                    left: Box::new(ci.1),
                    right: Box::new(cj.1),
                    height: v,
                },
            ));
        }
        clusters.pop().unwrap().1.canonical()
    }

    fn random_points(seed: u64, n: usize, dim: usize) -> Vec<(String, Vec<f64>)> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| (format!("p{i}"), (0..dim).map(|_| rng.random_range(0.0..10.0)).collect()))
            .collect()
    }

    #[test]
    fn planar_four_points() {
        let pts = items(&[
            ("A", vec![0.0, 0.0]),
            ("B", vec![1.0, 0.0]),
            ("C", vec![5.0, 0.0]),
            ("D", vec![5.0, 2.0]),
        ]);
        let t = hcluster(&pts, Linkage::Average, Distance::Euclidean).unwrap();
        assert!(t.approx_eq(&brute_force(&pts, Linkage::Average), 1e-12));
        // {A,B} at 1, {C,D} at 2, root at the mean of the four cross distances
        let cross = (5.0 + 29f64.sqrt() + 4.0 + 20f64.sqrt()) / 4.0;
        assert!((t.height() - cross).abs() < 1e-12);
    }

    #[test]
    fn identical_vectors_have_zero_distance() {
        let pts = items(&[("aa", vec![0.2, 0.8]), ("bb", vec![0.2, 0.8])]);
        assert_eq!(
            hcluster(&pts, Linkage::Average, Distance::Euclidean).unwrap().height(),
            0.0
        );
    }

    #[test]
    fn clustering_rejects_bad_input() {
        assert!(hcluster(&items(&[("a", vec![0.0])]), Linkage::Average, Distance::Euclidean).is_err());
        let pts = items(&[("a", vec![0.0]), ("b", vec![0.0, 1.0])]);
        assert!(matches!(
            hcluster(&pts, Linkage::Average, Distance::Euclidean),
            Err(Error::Shape(_))
        ));
    }

    fn heights_monotone(t: &Dendrogram) -> bool {
        match t {
            Dendrogram::Leaf(_) => true,
            Dendrogram::Merge { left, right, height } => {
                left.height() <= *height
                    && right.height() <= *height
                    && heights_monotone(left)
                    && heights_monotone(right)
            }
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in any::<u64>(), n in 2usize..=6, dim in 1usize..4) {
            let pts = random_points(seed, n, dim);
            for linkage in [Linkage::Single, Linkage::Complete, Linkage::Average] {
                let t = hcluster(&pts, linkage, Distance::Euclidean).unwrap();
                prop_assert!(t.approx_eq(&brute_force(&pts, linkage), 1e-9));
                prop_assert!(heights_monotone(&t));
            }
        }

        #[test]
        fn input_order_does_not_matter(seed in any::<u64>(), n in 2usize..=7) {
            let pts = random_points(seed, n, 3);
            let mut rev = pts.clone();
            rev.reverse();
            let a = hcluster(&pts, Linkage::Average, Distance::Euclidean).unwrap();
            let b = hcluster(&rev, Linkage::Average, Distance::Euclidean).unwrap();
            prop_assert!(a.approx_eq(&b, 1e-12));
        }

        #[test]
        fn newick_round_trip(seed in any::<u64>(), n in 2usize..=8) {
            let t = hcluster(&random_points(seed, n, 2), Linkage::Average, Distance::Euclidean).unwrap();
            let back = Dendrogram::parse_newick(&t.to_newick()).unwrap();
            prop_assert!(back.approx_eq(&t, 1e-9 * t.height().max(1.0)));
        }

        #[test]
        fn jaccard_laws(a in prop::collection::btree_set((0usize..3, 0usize..6), 0..10),
                        b in prop::collection::btree_set((0usize..3, 0usize..6), 0..10)) {
            let (sa, sb) = (ExpertSet { side: Side::Decoder, experts: a.clone() }, ExpertSet { side: Side::Decoder, experts: b.clone() });
            let ab = jaccard(&sa, &sb).unwrap();
            prop_assert_eq!(ab, jaccard(&sb, &sa).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(jaccard(&sa, &sa).unwrap(), 1.0);
            if a.len() == b.len() && !a.is_empty() {
                let i = a.intersection(&b).count() as f64;
                prop_assert!((ab - i / (2.0 * a.len() as f64 - i)).abs() < 1e-12);
            }
        }
    }
}
