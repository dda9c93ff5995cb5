//! The five-table evaluation report.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_judgment_groups, gap_words, influence_from_vectors, paired_permutation_test, permutation_test,
    AnalyticsError, AuthoringBlock, Embedder, JudgmentGroup, JudgmentResponse, PermutationTestResult,
    PreferenceDistribution, Source, SourceCounts,
};
use crate::prompts::Difficulty;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { n_resamples: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTest {
    pub comparison: String,
    /// `paired` or `two-sample`.
    pub method: String,
    /// Absent when either side has no observations.
    pub result: Option<PermutationTestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTable {
    pub subset: String,
    pub empty: bool,
    pub distribution: Option<PreferenceDistribution>,
    pub tests: Vec<NamedTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapWordsRow {
    pub difficulty: Difficulty,
    pub n_sentences: usize,
    pub mean_gap: Option<f64>,
    pub mean_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapWordsTable {
    pub empty: bool,
    pub rows: Vec<GapWordsRow>,
    pub test: NamedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub subset: String,
    pub n_pre: usize,
    pub mean_pre: Option<f64>,
    pub n_post: usize,
    pub mean_post: Option<f64>,
    pub test: NamedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub empty: bool,
    pub rows: Vec<SimilarityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSimilarityTable {
    pub empty: bool,
    pub n_preferred: usize,
    pub mean_preferred: Option<f64>,
    pub n_not_preferred: usize,
    pub mean_not_preferred: Option<f64>,
    pub test: NamedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ReportConfig,
    pub n_blocks: usize,
    pub n_groups: usize,
    pub n_responses: usize,
    /// Overall preference distribution.
    pub preferences: PreferenceTable,
    /// Words between prompt words in human sentences, by difficulty.
    pub gap_words: GapWordsTable,
    /// Preference distribution per difficulty level.
    pub preferences_by_difficulty: Vec<PreferenceTable>,
    /// Similarity of PRE and POST sentences to the GEN examples.
    pub similarity: SimilarityTable,
    /// Similarity of POST sentences by whether the rater preferred them.
    pub similarity_by_preference: PreferenceSimilarityTable,
}

impl Report {
    /// True if any table had no data.
    pub fn has_empty_tables(&self) -> bool {
        self.preferences.empty
            || self.gap_words.empty
            || self.preferences_by_difficulty.iter().any(|t| t.empty)
            || self.similarity.empty
            || self.similarity_by_preference.empty
    }
}

fn mean(x: &[f64]) -> Option<f64> {
    (!x.is_empty()).then(|| x.iter().sum::<f64>() / x.len() as f64)
}

struct Tester<'a> {
    cfg: &'a ReportConfig,
}

impl Tester<'_> {
    fn seed(&self, label: &str) -> u64 {
        seed::derive(self.cfg.seed, &format!("report/{label}"))
    }

    fn two_sample(&self, label: &str, comparison: &str, a: &[f64], b: &[f64]) -> Result<NamedTest, AnalyticsError> {
        let result = if a.is_empty() || b.is_empty() {
            None
        } else {
            Some(permutation_test(a, b, self.cfg.n_resamples, self.seed(label))?)
        };
        Ok(NamedTest { comparison: comparison.into(), method: "two-sample".into(), result })
    }

    fn paired(&self, label: &str, comparison: &str, a: &[f64], b: &[f64]) -> Result<NamedTest, AnalyticsError> {
        let result = if a.is_empty() {
            None
        } else {
            Some(paired_permutation_test(a, b, self.cfg.n_resamples, self.seed(label))?)
        };
        Ok(NamedTest { comparison: comparison.into(), method: "paired".into(), result })
    }
}

fn preference_table(
    tester: &Tester<'_>,
    subset: &str,
    prefs: &[Source],
) -> Result<PreferenceTable, AnalyticsError> {
    let mut counts = SourceCounts::default();
    prefs.iter().for_each(|&s| counts.add(s));
    let indicator = |src: Source| -> Vec<f64> { prefs.iter().map(|&p| f64::from(u8::from(p == src))).collect() };
    let (pre, post, gen) = (indicator(Source::Pre), indicator(Source::Post), indicator(Source::Gen));
    let tests = vec![
        tester.paired(&format!("pref/{subset}/pre-post"), "PRE vs POST", &pre, &post)?,
        tester.paired(&format!("pref/{subset}/post-gen"), "POST vs GEN", &post, &gen)?,
        tester.paired(&format!("pref/{subset}/pre-gen"), "PRE vs GEN", &pre, &gen)?,
    ];
    Ok(PreferenceTable {
        subset: subset.into(),
        empty: prefs.is_empty(),
        distribution: PreferenceDistribution::from_counts(counts).ok(),
        tests,
    })
}

/// Build the report. Pure: identical inputs and config give identical output.
pub fn build_report<E: Embedder + ?Sized>(
    blocks: &[AuthoringBlock],
    responses: &[JudgmentResponse],
    embedder: &E,
    config: &ReportConfig,
) -> Result<Report, AnalyticsError> {
    if config.n_resamples < super::MIN_RESAMPLES {
        return Err(AnalyticsError::TooFewResamples(config.n_resamples));
    }
    let groups = build_judgment_groups(blocks)?;
    let by_id: HashMap<&str, &JudgmentGroup> = groups.iter().map(|g| (g.group_id.as_str(), g)).collect();
    let dangling: BTreeSet<String> =
        responses.iter().filter(|r| !by_id.contains_key(r.group_id.as_str())).map(|r| r.group_id.clone()).collect();
    if !dangling.is_empty() {
        return Err(AnalyticsError::Dangling(dangling.into_iter().collect()));
    }
    let tester = Tester { cfg: config };

    // Preferences, overall and by difficulty.
    let prefs: Vec<Source> = responses.iter().map(|r| r.preferred).collect();
    let preferences = preference_table(&tester, "all", &prefs)?;
    let mut preferences_by_difficulty = Vec::new();
    for d in [Difficulty::Easy, Difficulty::Hard] {
        let sub: Vec<Source> =
            responses.iter().filter(|r| by_id[r.group_id.as_str()].difficulty == d).map(|r| r.preferred).collect();
        preferences_by_difficulty.push(preference_table(&tester, label(d), &sub)?);
    }

    // Gap words over human sentences.
    let mut gaps: HashMap<Difficulty, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for b in blocks {
        for s in b.pre.iter().chain(&b.post) {
            let g = gap_words(s, &b.prompt_words)?;
            let e = gaps.entry(b.difficulty).or_default();
            e.0.push(g.mean);
            e.1.push(g.total as f64);
        }
    }
    let empty = (Vec::new(), Vec::new());
    let rows = [Difficulty::Easy, Difficulty::Hard]
        .iter()
        .map(|d| {
            let (m, t) = gaps.get(d).unwrap_or(&empty);
            GapWordsRow { difficulty: *d, n_sentences: m.len(), mean_gap: mean(m), mean_total: mean(t) }
        })
        .collect();
    let easy_gaps = &gaps.get(&Difficulty::Easy).unwrap_or(&empty).0;
    let hard_gaps = &gaps.get(&Difficulty::Hard).unwrap_or(&empty).0;
    let gap_words = GapWordsTable {
        empty: blocks.is_empty(),
        rows,
        test: tester.two_sample("gap/easy-hard", "easy vs hard", easy_gaps, hard_gaps)?,
    };

    // Similarity to GEN examples.
    let mut texts: BTreeSet<&str> = BTreeSet::new();
    for b in blocks {
        texts.extend(b.pre.iter().chain(&b.post).chain(&b.gen).map(String::as_str));
    }
    let texts: Vec<&str> = texts.into_iter().collect();
    let vectors = texts.par_iter().map(|t| embedder.embed(t)).collect::<Result<Vec<_>, _>>()?;
    let vec_of: HashMap<&str, &Vec<f64>> = texts.iter().copied().zip(vectors.iter()).collect();
    let mut influence: HashMap<(&str, &str), f64> = HashMap::new();
    for b in blocks {
        let gs: Vec<Vec<f64>> = b.gen.iter().map(|g| vec_of[g.as_str()].clone()).collect();
        for s in b.pre.iter().chain(&b.post) {
            let score = influence_from_vectors(vec_of[s.as_str()], &gs)?.score;
            influence.insert((b.block_id.as_str(), s.as_str()), score);
        }
    }
    let mut sim_rows = Vec::new();
    for (subset, filter) in [("all", None), ("easy", Some(Difficulty::Easy)), ("hard", Some(Difficulty::Hard))] {
        let chosen: Vec<&AuthoringBlock> = blocks.iter().filter(|b| filter.is_none_or(|d| b.difficulty == d)).collect();
        let collect = |f: fn(&AuthoringBlock) -> &Vec<String>| -> Vec<f64> {
            chosen.iter().flat_map(|b| f(b).iter().map(|s| influence[&(b.block_id.as_str(), s.as_str())])).collect()
        };
        let pre = collect(|b| &b.pre);
        let post = collect(|b| &b.post);
        sim_rows.push(SimilarityRow {
            subset: subset.into(),
            n_pre: pre.len(),
            mean_pre: mean(&pre),
            n_post: post.len(),
            mean_post: mean(&post),
            test: tester.two_sample(&format!("sim/{subset}"), "PRE vs POST", &pre, &post)?,
        });
    }
    let similarity = SimilarityTable { empty: blocks.is_empty(), rows: sim_rows };

    let mut preferred = Vec::new();
    let mut not_preferred = Vec::new();
    for r in responses {
        let g = by_id[r.group_id.as_str()];
        let score = influence[&(g.block_id.as_str(), g.post.as_str())];
        if r.preferred == Source::Post {
            preferred.push(score);
        } else {
            not_preferred.push(score);
        }
    }
    let similarity_by_preference = PreferenceSimilarityTable {
        empty: responses.is_empty(),
        n_preferred: preferred.len(),
        mean_preferred: mean(&preferred),
        n_not_preferred: not_preferred.len(),
        mean_not_preferred: mean(&not_preferred),
        test: tester.two_sample("sim-pref", "preferred vs not preferred", &preferred, &not_preferred)?,
    };

    Ok(Report {
        config: config.clone(),
        n_blocks: blocks.len(),
        n_groups: groups.len(),
        n_responses: responses.len(),
        preferences,
        gap_words,
        preferences_by_difficulty,
        similarity,
        similarity_by_preference,
    })
}

fn label(d: Difficulty) -> &'static str {
    match d {
        Difficulty::Easy => "easy",
        Difficulty::Hard => "hard",
        Difficulty::Unlabeled => "unlabeled",
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn test_line(t: &NamedTest) -> String {
    match &t.result {
        Some(r) => format!("  {} ({}): diff {:+.4}, p = {:.4}", t.comparison, t.method, r.observed_stat, r.p_value),
        None => format!("  {} ({}): not computable", t.comparison, t.method),
    }
}

fn render_preferences(out: &mut String, t: &PreferenceTable) {
    match &t.distribution {
        None => writeln!(out, "  [{}] (empty)", t.subset).unwrap(),
        Some(d) => {
            writeln!(
                out,
                "  [{}] PRE {:.3} ({})  POST {:.3} ({})  GEN {:.3} ({})  n = {}",
                t.subset,
                d.fractions.pre,
                d.counts.pre,
                d.fractions.post,
                d.counts.post,
                d.fractions.gen,
                d.counts.gen,
                d.total
            )
            .unwrap();
            for test in &t.tests {
                writeln!(out, "  {}", test_line(test)).unwrap();
            }
        }
    }
}

/// Plain-text rendering of the report.
pub fn render_text(r: &Report) -> String {
    let mut out = String::new();
    writeln!(out, "blocks {}  groups {}  responses {}", r.n_blocks, r.n_groups, r.n_responses).unwrap();
    writeln!(out, "\n1. Preference distribution").unwrap();
    render_preferences(&mut out, &r.preferences);

    writeln!(out, "\n2. Words between prompt words").unwrap();
    if r.gap_words.empty {
        writeln!(out, "  (empty)").unwrap();
    } else {
        for row in &r.gap_words.rows {
            writeln!(
                out,
                "  {:<5} n = {:<5} mean gap {}  mean total {}",
                label(row.difficulty),
                row.n_sentences,
                opt(row.mean_gap),
                opt(row.mean_total)
            )
            .unwrap();
        }
        writeln!(out, "{}", test_line(&r.gap_words.test)).unwrap();
    }

    writeln!(out, "\n3. Preference distribution by difficulty").unwrap();
    for t in &r.preferences_by_difficulty {
        render_preferences(&mut out, t);
    }

    writeln!(out, "\n4. Similarity to GEN examples").unwrap();
    if r.similarity.empty {
        writeln!(out, "  (empty)").unwrap();
    } else {
        for row in &r.similarity.rows {
            writeln!(
                out,
                "  {:<4} PRE {} (n = {})  POST {} (n = {})",
                row.subset,
                opt(row.mean_pre),
                row.n_pre,
                opt(row.mean_post),
                row.n_post
            )
            .unwrap();
            writeln!(out, "  {}", test_line(&row.test)).unwrap();
        }
    }

    writeln!(out, "\n5. POST similarity by preference").unwrap();
    let t = &r.similarity_by_preference;
    if t.empty {
        writeln!(out, "  (empty)").unwrap();
    } else {
        writeln!(
            out,
            "  preferred {} (n = {})  not preferred {} (n = {})",
            opt(t.mean_preferred),
            t.n_preferred,
            opt(t.mean_not_preferred),
            t.n_not_preferred
        )
        .unwrap();
        writeln!(out, "{}", test_line(&t.test)).unwrap();
    }
    out
}
