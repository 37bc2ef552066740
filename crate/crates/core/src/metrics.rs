//! Navigation and text-generation metrics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navgraph::{euclidean, NavGraph, NodeId};

/// Success radius in meters (inclusive).
pub const SUCCESS_RADIUS: f64 = 3.0;

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    Euclidean,
    Geodesic,
}

fn distance(graph: &NavGraph, a: &NodeId, b: &NodeId, mode: DistanceMode) -> Result<f64> {
    match mode {
        DistanceMode::Euclidean => graph.euclidean_distance(a, b),
        DistanceMode::Geodesic => graph.geodesic_distance(a, b),
    }
}

/// Reduction in distance to `target` between `start` and `end`.
pub fn goal_progress(graph: &NavGraph, start: &NodeId, end: &NodeId, target: &NodeId, mode: DistanceMode) -> Result<f64> {
    Ok(distance(graph, start, target, mode)? - distance(graph, end, target, mode)?)
}

pub fn is_success_distance(d: f64) -> bool {
    d <= SUCCESS_RADIUS
}

pub fn success(graph: &NavGraph, end: &NodeId, target: &NodeId) -> Result<bool> {
    Ok(is_success_distance(graph.euclidean_distance(end, target)?))
}

/// Success weighted by path length: `S * l / max(p, l)`.
pub fn spl(success: bool, shortest: f64, taken: f64) -> Result<f64> {
    if !(shortest > 0.0) {
        return Err(Error::InvalidLength(shortest));
    }
    if !(taken >= 0.0) {
        return Err(Error::InvalidLength(taken));
    }
    Ok(if success { shortest / taken.max(shortest) } else { 0.0 })
}

/// Dynamic time warping cost with Euclidean point distance.
pub fn dtw(reference: &[[f64; 3]], query: &[[f64; 3]]) -> Result<f64> {
    if reference.is_empty() || query.is_empty() {
        return Err(Error::EmptyPath);
    }
    let m = query.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for r in reference {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = euclidean(r, &query[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `exp(-DTW(R, Q) / (|R| * threshold))`.
pub fn ndtw(reference: &[[f64; 3]], query: &[[f64; 3]], threshold: f64) -> Result<f64> {
    let cost = dtw(reference, query)?;
    Ok((-cost / (reference.len() as f64 * threshold)).exp())
}

/// Positions of a node sequence.
pub fn positions(graph: &NavGraph, nodes: &[NodeId]) -> Result<Vec<[f64; 3]>> {
    nodes.iter().map(|n| graph.node(n).map(|n| n.position)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub id: String,
    pub goal_progress: f64,
    pub success: bool,
    pub spl: f64,
    pub ndtw: f64,
    pub distance_to_target: f64,
    pub path_length: f64,
    pub shortest_length: f64,
    pub steps: usize,
    pub questions: usize,
}

impl EpisodeMetrics {
    /// Scores a trajectory against the shortest path to `target`.
    pub fn compute(
        graph: &NavGraph,
        id: &str,
        trajectory: &[NodeId],
        target: &NodeId,
        reference: &[NodeId],
        mode: DistanceMode,
        questions: usize,
    ) -> Result<Self> {
        let start = trajectory.first().ok_or(Error::EmptyPath)?;
        let end = trajectory.last().expect("non-empty");
        let taken = crate::navgraph::Path::from_nodes(graph, trajectory.to_vec())?.length;
        let shortest = graph.geodesic_distance(start, target)?;
        let ok = success(graph, end, target)?;
        let spl_value = if shortest > 0.0 {
            spl(ok, shortest, taken)?
        } else if ok {
            1.0
        } else {
            0.0
        };
        Ok(EpisodeMetrics {
            id: id.to_string(),
            goal_progress: goal_progress(graph, start, end, target, mode)?,
            success: ok,
            spl: spl_value,
            ndtw: ndtw(&positions(graph, reference)?, &positions(graph, trajectory)?, SUCCESS_RADIUS)?,
            distance_to_target: graph.euclidean_distance(end, target)?,
            path_length: taken,
            shortest_length: shortest,
            steps: trajectory.len() - 1,
            questions,
        })
    }
}

/// Aggregate navigation metrics over per-episode records kept in id order,
/// so merging partial reports is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavMetricsReport {
    pub episodes: usize,
    pub gp: f64,
    pub sr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub mean_questions: f64,
    pub records: Vec<EpisodeMetrics>,
}

impl NavMetricsReport {
    pub fn from_records(mut records: Vec<EpisodeMetrics>) -> Self {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let n = records.len();
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        NavMetricsReport {
            episodes: n,
            gp: mean(&|r| r.goal_progress),
            sr: mean(&|r| if r.success { 1.0 } else { 0.0 }),
            spl: mean(&|r| r.spl),
            ndtw: mean(&|r| r.ndtw),
            mean_questions: mean(&|r| r.questions as f64),
            records,
        }
    }

    pub fn merge(self, other: NavMetricsReport) -> Self {
        let mut records = self.records;
        records.extend(other.records);
        NavMetricsReport::from_records(records)
    }

    /// Per-episode table as CSV.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("id,goal_progress,success,spl,ndtw,distance_to_target,path_length,shortest_length,steps,questions\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.id,
                r.goal_progress,
                r.success as u8,
                r.spl,
                r.ndtw,
                r.distance_to_target,
                r.path_length,
                r.shortest_length,
                r.steps,
                r.questions
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Text metrics

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total candidate n-grams.
fn clipped_counts(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let matched = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn bleu_from_counts(matched: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if matched.contains(&0) || cand_len == 0 {
        return 0.0;
    }
    let log_p: f64 = matched
        .iter()
        .zip(totals)
        .map(|(m, t)| (*m as f64 / *t as f64).ln())
        .sum::<f64>()
        / matched.len() as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

/// Sentence BLEU-n against a single reference.
pub fn bleu(candidate: &[String], reference: &[String], n: usize) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidConfig(format!("BLEU order {n} outside 1..=4")));
    }
    let (matched, totals): (Vec<usize>, Vec<usize>) = (1..=n).map(|k| clipped_counts(candidate, reference, k)).unzip();
    Ok(bleu_from_counts(&matched, &totals, candidate.len(), reference.len()))
}

/// Corpus BLEU-n: clipped counts and lengths summed before combining.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidConfig(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in pairs {
        if cand.is_empty() {
            return Err(Error::EmptyCandidate);
        }
        for k in 1..=n {
            let (m, t) = clipped_counts(cand, reference, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
        c += cand.len();
        r += reference.len();
    }
    Ok(bleu_from_counts(&matched, &totals, c, r))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weight [`ROUGE_BETA`].
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// CIDEr with document frequencies from a reference corpus.
#[derive(Clone, Debug)]
pub struct Cider {
    documents: usize,
    df: Vec<HashMap<Vec<String>, usize>>,
}

impl Cider {
    pub fn new(corpus: &[Vec<String>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut df = vec![HashMap::new(); 4];
        for doc in corpus {
            for (n, table) in df.iter_mut().enumerate() {
                for g in ngrams(doc, n + 1).keys() {
                    *table.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(Cider {
            documents: corpus.len(),
            df,
        })
    }

    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df[gram.len() - 1].get(gram).copied().unwrap_or(0).max(1);
        (self.documents as f64 / df as f64).ln()
    }

    fn vector<'a>(&self, tokens: &'a [String], n: usize) -> HashMap<&'a [String], f64> {
        let counts = ngrams(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| (g, c as f64 / total as f64 * self.idf(g)))
            .collect()
    }

    /// Mean over n = 1..4 of 10 × cosine(tf-idf(candidate), tf-idf(reference)).
    pub fn score(&self, candidate: &[String], reference: &[String]) -> f64 {
        let mut total = 0.0;
        for n in 1..=4 {
            let c = self.vector(candidate, n);
            let r = self.vector(reference, n);
            let dot: f64 = c.iter().map(|(g, v)| v * r.get(g).copied().unwrap_or(0.0)).sum();
            let nc = c.values().map(|v| v * v).sum::<f64>().sqrt();
            let nr = r.values().map(|v| v * v).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                total += 10.0 * dot / (nc * nr);
            }
        }
        total / 4.0
    }
}

/// Corpus-level CIDEr of `candidates` against aligned `references`; the
/// references form the idf corpus.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch("candidate and reference counts differ".into()));
    }
    let scorer = Cider::new(references)?;
    Ok(candidates.iter().zip(references).map(|(c, r)| scorer.score(c, r)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetricsReport {
    pub pairs: usize,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    /// Unigram document frequencies of the reference corpus.
    pub document_frequencies: BTreeMap<String, usize>,
}

/// Corpus BLEU-1..4, mean ROUGE-L and mean CIDEr over candidate/reference pairs.
pub fn evaluate_text(pairs: &[(Vec<String>, Vec<String>)]) -> Result<TextMetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut bleu_scores = [0.0; 4];
    for (n, b) in bleu_scores.iter_mut().enumerate() {
        *b = corpus_bleu(pairs, n + 1)?;
    }
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.1.clone()).collect();
    let cands: Vec<Vec<String>> = pairs.iter().map(|p| p.0.clone()).collect();
    let cider_scores = cider(&cands, &refs)?;
    let n = pairs.len() as f64;
    let mut df = BTreeMap::new();
    for r in &refs {
        let mut seen: Vec<&String> = r.iter().collect();
        seen.sort();
        seen.dedup();
        for t in seen {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
    }
    Ok(TextMetricsReport {
        pairs: pairs.len(),
        bleu: bleu_scores,
        rouge_l: pairs.iter().map(|(c, r)| rouge_l(c, r)).sum::<f64>() / n,
        cider: cider_scores.iter().sum::<f64>() / n,
        document_frequencies: df,
    })
}
