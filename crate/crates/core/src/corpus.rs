//! Corpus curation: per-source length filtering, then merge/shuffle/sample
//! of the web/news pools, combined with the encyclopedic subset.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// One curated text record with its provenance label and token length under
/// the active vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub text: String,
    pub source: String,
    pub token_len: usize,
}

/// Before/after bookkeeping for one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceStat {
    pub source: String,
    pub before: usize,
    pub after_filter: usize,
    /// Records from this source that made it into the sampled pool output.
    /// Equals `after_filter` for the encyclopedic source, which is not
    /// subsampled.
    pub sampled: usize,
}

/// Totals for one curation run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurationReport {
    pub per_source: Vec<SourceStat>,
    pub sampled_total: usize,
    pub total: usize,
    pub seed: u64,
    pub max_len: usize,
}

impl CurationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("mdlm-curation-report v1\n");
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("max_len = {}\n", self.max_len));
        for s in &self.per_source {
            out.push_str(&format!(
                "source {} before={} after_filter={} sampled={}\n",
                s.source, s.before, s.after_filter, s.sampled
            ));
        }
        out.push_str(&format!("sampled_total = {}\n", self.sampled_total));
        out.push_str(&format!("total = {}\n", self.total));
        out
    }
}

/// Wrap raw lines as records, computing token lengths under `vocab`.
pub fn measure_records(lines: &[String], source: &str, vocab: &Vocabulary) -> Vec<CorpusRecord> {
    lines
        .par_iter()
        .map(|text| CorpusRecord {
            text: text.clone(),
            source: source.to_string(),
            token_len: vocab.encode(text).len(),
        })
        .collect()
}

/// Keep records whose token length does not exceed `max_len` (length 512
/// survives a 512 limit; 513 does not). Order is preserved.
pub fn filter_by_length(records: Vec<CorpusRecord>, max_len: usize) -> Vec<CorpusRecord> {
    records
        .into_iter()
        .filter(|r| r.token_len <= max_len)
        .collect()
}

/// Concatenate the pools, apply a seeded Fisher-Yates permutation, and take
/// the first `n` records.
pub fn merge_shuffle_sample(
    pools: Vec<Vec<CorpusRecord>>,
    n: usize,
    seed: u64,
) -> Result<Vec<CorpusRecord>> {
    let mut merged: Vec<CorpusRecord> = pools.into_iter().flatten().collect();
    if n > merged.len() {
        return Err(Error::SampleTooLarge {
            n,
            pool: merged.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    merged.shuffle(&mut rng);
    merged.truncate(n);
    Ok(merged)
}

/// Full curation: filter the encyclopedic records, filter each web/news pool,
/// sample `n_sample` from the merged pools, and concatenate.
pub fn assemble_corpus(
    encyclopedic: Vec<CorpusRecord>,
    web_news: Vec<Vec<CorpusRecord>>,
    n_sample: usize,
    max_len: usize,
    seed: u64,
) -> Result<(Vec<CorpusRecord>, CurationReport)> {
    if encyclopedic.is_empty() && web_news.iter().all(|p| p.is_empty()) {
        return Err(Error::EmptyCorpus);
    }

    let enc_before = encyclopedic.len();
    let enc_source = encyclopedic
        .first()
        .map(|r| r.source.clone())
        .unwrap_or_else(|| "encyclopedic".to_string());
    let enc = filter_by_length(encyclopedic, max_len);

    let mut per_source = vec![SourceStat {
        source: enc_source,
        before: enc_before,
        after_filter: enc.len(),
        sampled: enc.len(),
    }];

    let mut filtered_pools = Vec::with_capacity(web_news.len());
    for pool in web_news {
        let before = pool.len();
        let source = pool
            .first()
            .map(|r| r.source.clone())
            .unwrap_or_else(|| "pool".to_string());
        let filtered = filter_by_length(pool, max_len);
        per_source.push(SourceStat {
            source,
            before,
            after_filter: filtered.len(),
            sampled: 0,
        });
        filtered_pools.push(filtered);
    }

    let sampled = merge_shuffle_sample(filtered_pools, n_sample, seed)?;
    for stat in per_source.iter_mut().skip(1) {
        stat.sampled = sampled.iter().filter(|r| r.source == stat.source).count();
    }

    let mut output = enc;
    output.extend(sampled);

    let report = CurationReport {
        per_source,
        sampled_total: n_sample,
        total: output.len(),
        seed,
        max_len,
    };
    Ok((output, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, TokenizerMode};

    fn rec(len: usize, source: &str) -> CorpusRecord {
        CorpusRecord {
            text: "x".repeat(len),
            source: source.to_string(),
            token_len: len,
        }
    }

    #[test]
    fn measure_uses_active_vocabulary() {
        let v = build_vocab("abc", TokenizerMode::Char, 16).unwrap();
        let recs = measure_records(&["abca".to_string()], "enc", &v);
        assert_eq!(recs[0].token_len, 4);
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let recs = vec![rec(100, "a"), rec(512, "a"), rec(513, "a")];
        let kept = filter_by_length(recs, 512);
        assert_eq!(
            kept.iter().map(|r| r.token_len).collect::<Vec<_>>(),
            vec![100, 512]
        );
    }

    #[test]
    fn filter_empty_input() {
        assert!(filter_by_length(vec![], 512).is_empty());
    }

    #[test]
    fn filter_can_remove_everything() {
        let recs = vec![rec(600, "a"), rec(700, "a")];
        assert!(filter_by_length(recs, 512).is_empty());
    }

    #[test]
    fn filter_is_idempotent() {
        let recs: Vec<_> = (500..520).map(|n| rec(n, "a")).collect();
        let once = filter_by_length(recs, 512);
        let twice = filter_by_length(once.clone(), 512);
        assert_eq!(once, twice);
    }

    #[test]
    fn sample_all_is_a_permutation() {
        let pools = vec![
            (0..10).map(|i| rec(i + 1, "a")).collect::<Vec<_>>(),
            (0..10).map(|i| rec(i + 100, "b")).collect::<Vec<_>>(),
        ];
        let out = merge_shuffle_sample(pools, 20, 7).unwrap();
        assert_eq!(out.len(), 20);
        let mut lens: Vec<_> = out.iter().map(|r| r.token_len).collect();
        lens.sort_unstable();
        let mut expect: Vec<usize> = (1..=10).chain(100..110).collect();
        expect.sort_unstable();
        assert_eq!(lens, expect);
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let mk = || {
            vec![
                (0..50).map(|i| rec(i + 1, "a")).collect::<Vec<_>>(),
                (0..50).map(|i| rec(i + 100, "b")).collect::<Vec<_>>(),
            ]
        };
        let x = merge_shuffle_sample(mk(), 30, 99).unwrap();
        let y = merge_shuffle_sample(mk(), 30, 99).unwrap();
        assert_eq!(x, y);
        let z = merge_shuffle_sample(mk(), 30, 100).unwrap();
        assert_ne!(x, z);
    }

    #[test]
    fn sample_without_replacement() {
        let pools = vec![(0..100).map(|i| rec(i + 1, "a")).collect::<Vec<_>>()];
        let out = merge_shuffle_sample(pools, 60, 3).unwrap();
        let mut lens: Vec<_> = out.iter().map(|r| r.token_len).collect();
        lens.sort_unstable();
        lens.dedup();
        assert_eq!(lens.len(), 60);
    }

    #[test]
    fn oversample_rejected() {
        let pools = vec![(0..5).map(|i| rec(i + 1, "a")).collect::<Vec<_>>()];
        assert!(matches!(
            merge_shuffle_sample(pools, 6, 0),
            Err(Error::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn sample_proportions_track_pool_sizes() {
        // Pools of 600 and 900; sampling 1000 without replacement is
        // hypergeometric with mean 400 from the first pool. Averaging over
        // 50 fixed seeds, the sample mean stays within 3 standard errors.
        let mk = || {
            vec![
                (0..600).map(|_| rec(1, "a")).collect::<Vec<_>>(),
                (0..900).map(|_| rec(1, "b")).collect::<Vec<_>>(),
            ]
        };
        let runs = 50usize;
        let mut total_a = 0usize;
        for seed in 0..runs as u64 {
            let out = merge_shuffle_sample(mk(), 1000, seed).unwrap();
            total_a += out.iter().filter(|r| r.source == "a").count();
        }
        let mean_a = total_a as f64 / runs as f64;
        let n = 1000.0;
        let p = 600.0 / 1500.0;
        let fpc = (1500.0 - n) / (1500.0 - 1.0);
        let sigma = f64::sqrt(n * p * (1.0 - p) * fpc);
        let se = sigma / (runs as f64).sqrt();
        assert!(
            (mean_a - 400.0).abs() < 3.0 * se,
            "mean {mean_a} deviates from 400 by more than {:.2}",
            3.0 * se
        );
    }

    #[test]
    fn assemble_counts_mirror_inputs() {
        let enc: Vec<_> = (0..406).map(|_| rec(10, "wiki")).collect();
        let web: Vec<_> = (0..1200).map(|_| rec(10, "web")).collect();
        let news: Vec<_> = (0..800).map(|_| rec(10, "news")).collect();
        let (out, report) = assemble_corpus(enc, vec![web, news], 1600, 512, 42).unwrap();
        assert_eq!(out.len(), 2006);
        assert_eq!(report.total, out.len());
        assert_eq!(report.sampled_total, 1600);
        assert_eq!(report.per_source[0].sampled, 406);
        assert_eq!(
            report.per_source[1].sampled + report.per_source[2].sampled,
            1600
        );
    }

    #[test]
    fn assemble_with_zero_sample_is_encyclopedic_only() {
        let enc: Vec<_> = (0..10).map(|_| rec(10, "wiki")).collect();
        let web: Vec<_> = (0..10).map(|_| rec(10, "web")).collect();
        let (out, report) = assemble_corpus(enc, vec![web], 0, 512, 1).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|r| r.source == "wiki"));
        assert_eq!(report.total, 10);
    }

    #[test]
    fn assemble_is_deterministic() {
        let mk = || {
            (
                (0..20).map(|i| rec(i + 1, "wiki")).collect::<Vec<_>>(),
                vec![(0..30).map(|i| rec(i + 1, "web")).collect::<Vec<_>>()],
            )
        };
        let (a, _) = {
            let (e, w) = mk();
            assemble_corpus(e, w, 15, 512, 5).unwrap()
        };
        let (b, _) = {
            let (e, w) = mk();
            assemble_corpus(e, w, 15, 512, 5).unwrap()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn assemble_applies_filter_before_sampling() {
        let enc = vec![rec(10, "wiki"), rec(600, "wiki")];
        let web = vec![rec(10, "web"), rec(700, "web"), rec(20, "web")];
        let (out, report) = assemble_corpus(enc, vec![web], 2, 512, 3).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|r| r.token_len <= 512));
        assert_eq!(report.per_source[0].after_filter, 1);
        assert_eq!(report.per_source[1].after_filter, 2);
    }
}
