//! Attention-based interpretation: which subnetworks MCI subjects attend
//! from, which report tokens separate the groups, and how the two link up.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{prepare_inputs, Label, SubjectRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::Vocabulary;

pub const REPORT_FILE: &str = "interaction_report.toml";
pub const SALIENCE_CSV: &str = "subnetwork_salience.csv";
pub const TOKEN_CSV: &str = "token_influence.csv";
pub const INTERACTIONS_CSV: &str = "interactions.csv";

/// How one region's brain-to-text attention row is reduced to a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalienceMode {
    #[default]
    RowMax,
    RowMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    /// Subnetworks reported (and the top-k used for voting).
    pub subnetworks: usize,
    pub tokens: usize,
    /// Tokens per subnetwork, connections per subnetwork and regions per token.
    pub per_item: usize,
    pub salience: SalienceMode,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            subnetworks: 6,
            tokens: 5,
            per_item: 5,
            salience: SalienceMode::RowMax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub name: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subnetwork {
    pub index: usize,
    pub region: String,
    pub salience: f64,
    pub tokens: Vec<Scored>,
    /// Partner regions by mean fiber count over MCI subjects.
    pub connections: Vec<Scored>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub index: usize,
    pub region: String,
    /// MCI subjects whose own top-k contains the region.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkReport {
    /// Every region, most salient first.
    pub ranking: Vec<Scored>,
    pub top: Vec<Subnetwork>,
    pub voting: Vec<Vote>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenInfluence {
    pub token: String,
    pub score_mci: f64,
    pub score_nc: f64,
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    #[serde(flatten)]
    pub influence: TokenInfluence,
    pub regions: Vec<Scored>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    /// Every token seen in the dataset, most influential first.
    pub ranking: Vec<TokenInfluence>,
    pub top: Vec<TokenEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionReport {
    pub subnetworks: SubnetworkReport,
    pub tokens: TokenReport,
}

/// Attention of one subject restricted to its real tokens.
struct SubjectMaps {
    label: Label,
    /// Vocabulary id per real local token.
    tokens: Vec<usize>,
    /// N rows over real tokens.
    b2t: Vec<Vec<f64>>,
    /// One row over regions per real token.
    t2b: Vec<Vec<f64>>,
}

fn collect_maps(model: &Model, vocab: &Vocabulary, records: &[SubjectRecord]) -> Result<Vec<SubjectMaps>> {
    if !model.config.is_bimodal() {
        return Err(Error::Config(
            "interpretation needs a model with both modalities".into(),
        ));
    }
    if vocab.len() != model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the model was built for {}",
            vocab.len(),
            model.vocab_size
        )));
    }
    if records.is_empty() {
        return Err(Error::Validation("cannot interpret an empty dataset".into()));
    }
    let cfg = &model.config;
    let inputs = prepare_inputs(records, vocab, cfg.max_len, cfg.input_transform)?;
    records
        .iter()
        .zip(&inputs)
        .map(|(r, input)| {
            let maps = model.attention_maps(input)?;
            let real: Vec<usize> = (0..input.local_mask().len())
                .filter(|&j| input.local_mask()[j])
                .collect();
            let n = maps.b2t.rows();
            Ok(SubjectMaps {
                label: r.label,
                tokens: real.iter().map(|&j| input.token_ids[j + 1]).collect(),
                b2t: (0..n)
                    .map(|i| real.iter().map(|&j| maps.b2t.at(i, j)).collect())
                    .collect(),
                t2b: real.iter().map(|&j| maps.t2b.row(j).to_vec()).collect(),
            })
        })
        .collect()
}

/// Indices ordered by descending score, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn ranked_map(scores: &BTreeMap<usize, f64>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = scores.iter().map(|(&k, &v)| (k, v)).collect();
    out.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    out
}

fn row_score(row: &[f64], mode: SalienceMode) -> f64 {
    match mode {
        SalienceMode::RowMax => row.iter().copied().fold(0.0, f64::max),
        SalienceMode::RowMean => row.iter().sum::<f64>() / row.len().max(1) as f64,
    }
}

fn token_name(vocab: &Vocabulary, id: usize) -> String {
    vocab.token(id).unwrap_or("[UNK]").to_string()
}

fn subnetworks_from(
    maps: &[SubjectMaps],
    records: &[SubjectRecord],
    vocab: &Vocabulary,
    cfg: &InterpretConfig,
) -> Result<SubnetworkReport> {
    let mci: Vec<usize> = (0..maps.len()).filter(|&s| maps[s].label == Label::Mci).collect();
    if mci.is_empty() {
        return Err(Error::Validation(
            "subnetwork salience needs at least one MCI subject".into(),
        ));
    }
    let names = records[0].sc.region_names();
    let n = names.len();
    let count = mci.len() as f64;

    let mut salience = vec![0.0; n];
    let mut votes = vec![0usize; n];
    for &s in &mci {
        let own: Vec<f64> = maps[s].b2t.iter().map(|row| row_score(row, cfg.salience)).collect();
        for (total, v) in salience.iter_mut().zip(&own) {
            *total += v / count;
        }
        for &i in ranked(&own).iter().take(cfg.subnetworks) {
            votes[i] += 1;
        }
    }
    let order = ranked(&salience);

    let top = order
        .iter()
        .take(cfg.subnetworks)
        .map(|&i| {
            let mut weights = BTreeMap::new();
            for &s in &mci {
                for (&tok, &w) in maps[s].tokens.iter().zip(&maps[s].b2t[i]) {
                    *weights.entry(tok).or_insert(0.0) += w / count;
                }
            }
            let tokens = ranked_map(&weights)
                .into_iter()
                .take(cfg.per_item)
                .map(|(tok, score)| Scored {
                    name: token_name(vocab, tok),
                    score,
                })
                .collect();
            let fibers: Vec<f64> = (0..n)
                .map(|j| {
                    if j == i {
                        f64::NEG_INFINITY
                    } else {
                        mci.iter().map(|&s| records[s].sc.at(i, j)).sum::<f64>() / count
                    }
                })
                .collect();
            let connections = ranked(&fibers)
                .into_iter()
                .filter(|&j| j != i)
                .take(cfg.per_item)
                .map(|j| Scored {
                    name: names[j].clone(),
                    score: fibers[j],
                })
                .collect();
            Subnetwork {
                index: i,
                region: names[i].clone(),
                salience: salience[i],
                tokens,
                connections,
            }
        })
        .collect();

    let vote_scores: Vec<f64> = votes.iter().map(|&v| v as f64).collect();
    Ok(SubnetworkReport {
        ranking: order
            .iter()
            .map(|&i| Scored {
                name: names[i].clone(),
                score: salience[i],
            })
            .collect(),
        top,
        voting: ranked(&vote_scores)
            .into_iter()
            .map(|i| Vote {
                index: i,
                region: names[i].clone(),
                count: votes[i],
            })
            .collect(),
    })
}

fn tokens_from(
    maps: &[SubjectMaps],
    records: &[SubjectRecord],
    vocab: &Vocabulary,
    cfg: &InterpretConfig,
) -> Result<TokenReport> {
    let group_size = |label| maps.iter().filter(|m| m.label == label).count();
    let (n_mci, n_nc) = (group_size(Label::Mci), group_size(Label::Nc));
    if n_mci == 0 || n_nc == 0 {
        return Err(Error::Validation(format!(
            "token influence needs both groups; got {n_mci} MCI and {n_nc} NC subjects"
        )));
    }
    let names = records[0].sc.region_names();
    let n = names.len();

    // Per subject, a token's salience is its mean row-max over occurrences;
    // subjects without the token contribute zero to their group mean.
    let mut sums: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
    let mut region_sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for m in maps {
        let mut per_token: BTreeMap<usize, (f64, Vec<f64>, usize)> = BTreeMap::new();
        for (&tok, row) in m.tokens.iter().zip(&m.t2b) {
            let e = per_token.entry(tok).or_insert_with(|| (0.0, vec![0.0; n], 0));
            e.0 += row_score(row, SalienceMode::RowMax);
            for (acc, w) in e.1.iter_mut().zip(row) {
                *acc += w;
            }
            e.2 += 1;
        }
        for (tok, (sal, regions, occurrences)) in per_token {
            let k = occurrences as f64;
            sums.entry(tok).or_insert([0.0; 2])[m.label.index()] += sal / k;
            let e = region_sums.entry(tok).or_insert_with(|| (vec![0.0; n], 0));
            for (acc, w) in e.0.iter_mut().zip(&regions) {
                *acc += w / k;
            }
            e.1 += 1;
        }
    }
    let mut ranking: Vec<(usize, TokenInfluence)> = sums
        .into_iter()
        .map(|(tok, [nc, mci])| {
            let (score_mci, score_nc) = (mci / n_mci as f64, nc / n_nc as f64);
            (
                tok,
                TokenInfluence {
                    token: token_name(vocab, tok),
                    score_mci,
                    score_nc,
                    diff: (score_mci - score_nc).abs(),
                },
            )
        })
        .collect();
    ranking.sort_by(|a, b| b.1.diff.total_cmp(&a.1.diff).then(a.0.cmp(&b.0)));

    let top = ranking
        .iter()
        .take(cfg.tokens)
        .map(|(tok, influence)| {
            let (totals, subjects) = &region_sums[tok];
            let means: Vec<f64> = totals.iter().map(|t| t / *subjects as f64).collect();
            TokenEntry {
                influence: influence.clone(),
                regions: ranked(&means)
                    .into_iter()
                    .take(cfg.per_item)
                    .map(|r| Scored {
                        name: names[r].clone(),
                        score: means[r],
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(TokenReport {
        ranking: ranking.into_iter().map(|(_, t)| t).collect(),
        top,
    })
}

fn check(cfg: &InterpretConfig) -> Result<()> {
    if cfg.subnetworks == 0 || cfg.tokens == 0 || cfg.per_item == 0 {
        return Err(Error::Config("interpretation list sizes must be at least 1".into()));
    }
    Ok(())
}

/// Subnetwork salience over the MCI subjects of `records`.
pub fn top_subnetworks(
    model: &Model,
    vocab: &Vocabulary,
    records: &[SubjectRecord],
    cfg: &InterpretConfig,
) -> Result<SubnetworkReport> {
    check(cfg)?;
    let maps = collect_maps(model, vocab, records)?;
    subnetworks_from(&maps, records, vocab, cfg)
}

/// Tokens ranked by the MCI−NC gap in text-to-brain attention salience.
pub fn top_tokens(
    model: &Model,
    vocab: &Vocabulary,
    records: &[SubjectRecord],
    cfg: &InterpretConfig,
) -> Result<TokenReport> {
    check(cfg)?;
    let maps = collect_maps(model, vocab, records)?;
    tokens_from(&maps, records, vocab, cfg)
}

/// Both analyses from one pass over the dataset.
pub fn interpret(
    model: &Model,
    vocab: &Vocabulary,
    records: &[SubjectRecord],
    cfg: &InterpretConfig,
) -> Result<InteractionReport> {
    check(cfg)?;
    let maps = collect_maps(model, vocab, records)?;
    Ok(InteractionReport {
        subnetworks: subnetworks_from(&maps, records, vocab, cfg)?,
        tokens: tokens_from(&maps, records, vocab, cfg)?,
    })
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let fail = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for row in rows {
        w.serialize(row).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct InteractionRow<'a> {
    region: &'a str,
    token: &'a str,
    weight: f64,
}

#[derive(Serialize)]
struct SalienceRow<'a> {
    region: &'a str,
    score: f64,
}

/// Writes the report and its companion CSV files into `dir`.
pub fn write_report(report: &InteractionReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string(report).map_err(|e| Error::Validation(format!("cannot encode report: {e}")))?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_csv(
        &dir.join(SALIENCE_CSV),
        report.subnetworks.ranking.iter().map(|s| SalienceRow {
            region: &s.name,
            score: s.score,
        }),
    )?;
    write_csv(&dir.join(TOKEN_CSV), &report.tokens.ranking)?;
    write_csv(
        &dir.join(INTERACTIONS_CSV),
        report.subnetworks.top.iter().flat_map(|sub| {
            sub.tokens.iter().map(|t| InteractionRow {
                region: &sub.region,
                token: &t.name,
                weight: t.score,
            })
        }),
    )
}
