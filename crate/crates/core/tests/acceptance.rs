//! Acceptance criteria 1-9, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the report is always printed:
//! `cargo test -p styleqg-core --test acceptance`.

use std::collections::HashSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use styleqg::config::TrainerConfig;
use styleqg::corpus::{
    build_corpus, deduplicate, jaccard, Question, RuleTagger, Template, TemplateCorpus,
};
use styleqg::dataset::into_samples;
use styleqg::generator::{self, GradientBuffer, SequenceModel, TabularLm, Trainable};
use styleqg::metrics::{self, bleu4, overall_bleu, pairwise_bleu_of, MetricReport, Overall};
use styleqg::pipeline::Workspace;
use styleqg::retriever::{build_index, RetrieverParams};
use styleqg::reward::{
    consistency_from_loss, consistency_reward, diversity_reward, qa_answer_loss, total_reward,
    QaBackend,
};
use styleqg::sampler::{choose_styles, cluster_templates, SampleMode};
use styleqg::synth::{generate_world, SyntheticOracle};
use styleqg::text::Lexicon;
use styleqg::trainer::{accumulate_trajectory, reinforce_estimate};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// 1. Overall BLEU = Top-1 x Oracle / Pairwise against the published table

/// (dataset, model, top1, oracle, pairwise, overall) as printed in Table 2.
const TABLE2: &[(&str, &str, f64, f64, f64, f64)] = &[
    ("SQuAD/1", "Mixture-Decoder", 15.17, 21.97, 58.73, 5.67),
    ("SQuAD/1", "Mixture-Selector", 15.67, 22.45, 58.82, 5.88),
    ("SQuAD/1", "CVAE", 15.34, 21.15, 54.18, 5.99),
    ("SQuAD/1", "Composition", 16.5, 25.7, 58.99, 7.21),
    ("SQuAD/1", "Nucleus-T5", 12.98, 23.45, 50.28, 6.05),
    ("SQuAD/1", "RAST", 19.25, 23.23, 48.91, 9.14),
    ("SQuAD/2", "Composition", 15.94, 24.90, 60.05, 6.61),
    ("SQuAD/2", "Nucleus-T5", 13.31, 24.42, 55.54, 5.85),
    ("SQuAD/2", "RAST", 19.36, 22.59, 56.42, 7.75),
    ("NewsQA", "Mixture-Decoder", 10.02, 17.04, 55.07, 3.10),
    ("NewsQA", "Mixture-Selector", 10.90, 17.51, 52.61, 3.63),
    ("NewsQA", "CVAE", 9.90, 15.48, 41.37, 3.70),
    ("NewsQA", "Nucleus-T5", 5.29, 14.63, 27.47, 2.82),
    ("NewsQA", "RAST", 11.02, 16.26, 23.16, 7.74),
];

/// Rows whose printed Overall is not Top-1 x Oracle / Pairwise of the printed
/// inputs to within 0.02 (no rounding of the inputs reaches the printed value
/// for the first; the second misses by 0.0015).
const KNOWN_INCONSISTENT: &[(&str, &str)] =
    &[("SQuAD/1", "Mixture-Selector"), ("SQuAD/1", "Composition")];

fn criterion_1() -> Outcome {
    let mut bad = Vec::new();
    for &(ds, model, t, o, p, printed) in TABLE2 {
        let Overall::Value(v) = overall_bleu(t, o, p) else {
            bad.push(format!("{ds} {model}: infinite"));
            continue;
        };
        if (v - printed).abs() > 0.02 {
            bad.push(format!(
                "{ds} {model}: {v:.4} vs {printed} (off {:.4})",
                v - printed
            ));
        }
    }
    let ok = TABLE2.len() - bad.len();
    Outcome::new(
        bad.is_empty(),
        format!(
            "{ok}/{} rows within ±0.02; {}",
            TABLE2.len(),
            bad.join("; ")
        ),
    )
}

fn criterion_1_failures_are_the_known_rows() -> bool {
    TABLE2
        .iter()
        .filter(|&&(_, _, t, o, p, printed)| match overall_bleu(t, o, p) {
            Overall::Value(v) => (v - printed).abs() > 0.02,
            _ => true,
        })
        .map(|&(ds, m, ..)| (ds, m))
        .eq(KNOWN_INCONSISTENT.iter().copied())
}

// ---------------------------------------------------------------------------
// 2. REINFORCE vs exact enumeration on a tabular policy

fn toy_reward(tokens: &[String]) -> f64 {
    let a = tokens.iter().filter(|t| *t == "a").count() as f64;
    let b_first = tokens.first().is_some_and(|t| t == "b") as u8 as f64;
    1.0 + 0.5 * a + 0.5 * b_first
}

fn trajectories(model: &TabularLm, len: usize) -> Vec<Vec<usize>> {
    let end = model.end_index(&());
    let mut out = Vec::new();
    let mut stack = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        for (v, lp) in model.log_probs(&(), &prefix).into_iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let mut next = prefix.clone();
            next.push(v);
            if v == end || next.len() == len {
                out.push(next);
            } else {
                stack.push(next);
            }
        }
    }
    out
}

fn words(model: &TabularLm, ids: &[usize]) -> Vec<String> {
    let end = model.end_index(&());
    ids.iter()
        .filter(|&&i| i != end)
        .map(|&i| model.candidates(&())[i].clone())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn criterion_2() -> Outcome {
    const LEN: usize = 3;
    const DRAWS: usize = 4_000_000;
    const CHUNKS: usize = 32;
    let mut model = TabularLm::new(&["a", "b", "c"], LEN);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for w in model.params_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }

    let mut exact = model.zero_grad();
    let mut total_p = 0.0;
    for ids in trajectories(&model, LEN) {
        let p = generator::trajectory_log_prob(&model, &(), &ids).exp();
        total_p += p;
        accumulate_trajectory(
            &model,
            &(),
            &ids,
            p * toy_reward(&words(&model, &ids)),
            &mut exact,
        );
    }

    let greedy = generator::generate_greedy_prepared(&model, &(), LEN).unwrap();
    let baseline = toy_reward(greedy.question.tokens());
    let n = model.num_params();
    // per chunk: sums and sums of squares of both estimators
    let chunks: Vec<[Vec<f64>; 4]> = (0..CHUNKS as u64)
        .into_par_iter()
        .map(|c| {
            let mut acc = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            let mut rng = ChaCha8Rng::seed_from_u64(20 + c);
            for _ in 0..DRAWS / CHUNKS {
                let out =
                    generator::sample_nucleus_prepared(&model, &(), 1.0, 0, LEN, &mut rng).unwrap();
                let ids = generator::candidate_ids(&model, &(), &out.tokens).unwrap();
                let r = toy_reward(out.question.tokens());
                let gu = reinforce_estimate(&model, &(), &ids, r);
                let gb = reinforce_estimate(&model, &(), &ids, r - baseline);
                for j in 0..n {
                    acc[0][j] += gu.0[j];
                    acc[1][j] += gu.0[j] * gu.0[j];
                    acc[2][j] += gb.0[j];
                    acc[3][j] += gb.0[j] * gb.0[j];
                }
            }
            acc
        })
        .collect();
    let total = |k: usize| -> Vec<f64> {
        (0..n)
            .map(|j| chunks.iter().map(|c| c[k][j]).sum())
            .collect()
    };
    let (sum_u, sq_u, sum_b, sq_b) = (total(0), total(1), total(2), total(3));
    let m = DRAWS as f64;
    let mean_u: Vec<f64> = sum_u.iter().map(|s| s / m).collect();
    let mean_b: Vec<f64> = sum_b.iter().map(|s| s / m).collect();
    let var = |sum: &[f64], sq: &[f64]| -> f64 {
        sum.iter()
            .zip(sq)
            .map(|(s, q)| (q - s * s / m) / (m - 1.0))
            .sum()
    };
    let (var_u, var_b) = (var(&sum_u, &sq_u), var(&sum_b, &sq_b));
    let rel = |est: &[f64]| {
        let diff: Vec<f64> = est.iter().zip(&exact.0).map(|(a, b)| a - b).collect();
        norm(&diff) / norm(&exact.0)
    };
    let (rel_u, rel_b) = (rel(&mean_u), rel(&mean_b));
    let pass = (total_p - 1.0).abs() < 1e-9 && rel_u <= 0.02 && rel_b <= 0.02 && var_b < var_u;
    Outcome::new(
        pass,
        format!(
            "{DRAWS} draws, |grad|={:.4}; relative error {rel_u:.4} (plain), {rel_b:.4} (baselined); total variance {var_u:.4} -> {var_b:.4}",
            exact.norm()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Index top-k against brute force on 10k random templates

fn criterion_3() -> Outcome {
    const VOCAB: &[&str] = &[
        "who", "what", "when", "where", "which", "how", "why", "is", "was", "did", "does", "the",
        "a", "of", "in", "on", "by", "for", "city", "year", "company", "person", "river", "team",
        "born", "founded", "built", "named", "called", "located", "many", "much", "first", "last",
        "largest", "?",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random_template = |rng: &mut ChaCha8Rng| loop {
        let len = rng.gen_range(2..10);
        let toks: Vec<String> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    "[MASK]".to_string()
                } else {
                    VOCAB[rng.gen_range(0..VOCAB.len())].to_string()
                }
            })
            .collect();
        if let Ok(t) = Template::new(toks, None) {
            return t;
        }
    };
    let templates: Vec<Template> = (0..10_000).map(|_| random_template(&mut rng)).collect();
    let corpus = TemplateCorpus::from_deduplicated(templates, 1.0);
    let params = RetrieverParams::random(64, 3, 0.2);
    let index = build_index(&corpus, &params).unwrap();
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..20 {
        let q = params.encode_query(&random_template(&mut rng));
        let mut brute: Vec<(usize, f64)> = (0..index.len())
            .map(|i| {
                (
                    i,
                    index
                        .row(i)
                        .iter()
                        .zip(&q.0)
                        .map(|(a, b)| *a as f64 * b)
                        .sum(),
                )
            })
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for k in [1, 5, 100] {
            let got: Vec<usize> = index
                .top_k(&q, k)
                .unwrap()
                .into_iter()
                .map(|(i, _)| i)
                .collect();
            let want: Vec<usize> = brute[..k].iter().map(|(i, _)| *i).collect();
            checked += 1;
            if got != want {
                mismatches += 1;
            }
        }
    }
    Outcome::new(
        mismatches == 0,
        format!(
            "{} templates, {checked} (query, K) checks, {mismatches} mismatches",
            index.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Corpus deduplication on the synthetic world

fn criterion_4() -> Outcome {
    let lex = Lexicon::default();
    let samples = into_samples(generate_world(4, 500)).unwrap();
    let built = build_corpus(&samples, &RuleTagger::new(lex.clone()), &lex, 0.8).unwrap();
    let ts = built.corpus.templates();
    let sets: Vec<HashSet<&str>> = ts
        .iter()
        .map(|t| t.tokens().iter().map(String::as_str).collect())
        .collect();
    let mut max = 0.0f64;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            max = max.max(jaccard(&sets[i], &sets[j]));
        }
    }
    let again = deduplicate(ts, 0.8).unwrap();
    let idempotent = again.templates() == ts;
    Outcome::new(
        max <= 0.8 && idempotent,
        format!("{} templates from 500 samples ({} skipped), max pairwise Jaccard {max:.3}, idempotent {idempotent}", ts.len(), built.skipped),
    )
}

// ---------------------------------------------------------------------------
// 5 and 8. Full pipeline runs

struct PipelineRun {
    report: MetricReport,
    samples: Vec<metrics::TopNSample>,
    generations: Vec<u8>,
    report_bytes: Vec<u8>,
}

fn run_pipeline(dir: &Path, lambda: f64) -> styleqg::Result<PipelineRun> {
    let cfg = TrainerConfig::desk().with_overrides(&[format!("lambda={lambda}")])?;
    let mut ws = Workspace::open(dir, cfg)?;
    ws.synth([500, 100, 200], None)?;
    ws.build_corpus(None, None, 0.8)?;
    ws.build_index(None, None, None)?;
    let qa = SyntheticOracle::new(ws.config.qa_epsilon);
    ws.train(&qa)?;
    let run = ws.generate(None, None, None, None)?;
    let report = ws.evaluate(None, None, None)?;
    let read = |name: &str| {
        std::fs::read(dir.join(name)).map_err(|e| styleqg::Error::io(dir.join(name), e))
    };
    Ok(PipelineRun {
        report,
        samples: run.samples,
        generations: read("generations.jsonl")?,
        report_bytes: read("report.json")?,
    })
}

fn criterion_5(low: &PipelineRun, high: &PipelineRun) -> Outcome {
    let (a, b) = (&low.report, &high.report);
    let pass = b.pairwise < a.pairwise && (b.f1 - a.f1).abs() <= 10.0;
    Outcome::new(
        pass,
        format!(
            "pairwise {:.2} (λ=0.05) -> {:.2} (λ=0.5); F1 {:.2} -> {:.2}",
            a.pairwise, b.pairwise, a.f1, b.f1
        ),
    )
}

fn criterion_8(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    let same_gen = a.generations == b.generations;
    let same_rep = a.report_bytes == b.report_bytes;
    Outcome::new(
        same_gen && same_rep,
        format!(
            "generation dumps identical: {same_gen} ({} bytes); reports identical: {same_rep}",
            a.generations.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Reward examples

struct UniformQa(f64);

impl QaBackend for UniformQa {
    fn answer_log_probs(&self, _: &[String], _: &Question, answer: &[String]) -> Vec<f64> {
        vec![self.0.ln(); answer.len()]
    }

    fn predict(&self, _: &[String], _: &Question) -> String {
        String::new()
    }
}

fn criterion_6() -> Outcome {
    let q = |s: &str| Question::parse(s).unwrap();
    let t = |s: &str| Template::parse(s).unwrap();
    let world = into_samples(generate_world(6, 1)).unwrap();
    let s = &world[0];
    let oracle = SyntheticOracle::default();
    let checks: Vec<(&str, bool)> = vec![
        (
            "loss 0 for a certain QA model",
            qa_answer_loss(&UniformQa(1.0), &[], &q("who ?"), &["x".into()]) == 0.0,
        ),
        (
            "loss ln V for a uniform QA model",
            (qa_answer_loss(
                &UniformQa(0.25),
                &[],
                &q("who ?"),
                &["x".into(), "y".into()],
            ) - 4f64.ln())
            .abs()
                < 1e-12,
        ),
        (
            "oracle on its gold question: exp(ln 0.95)",
            (consistency_reward(
                &oracle,
                s.input.context_tokens(),
                &s.question,
                s.input.answer_tokens(),
            ) - 0.95)
                .abs()
                < 1e-12,
        ),
        ("exp(0) = 1", consistency_from_loss(0.0) == 1.0),
        ("exp(-ln 2) = 0.5", consistency_from_loss(2f64.ln()) == 0.5),
        (
            "exp(-2)",
            (consistency_from_loss(2.0) - 0.1353352832366127).abs() < 1e-15,
        ),
        (
            "equal sets -> 1",
            diversity_reward(&q("what is"), &t("what is [MASK]")) == 1.0,
        ),
        (
            "disjoint -> 0",
            diversity_reward(&q("who founded it ?"), &t("when [MASK] .")) == 0.0,
        ),
        (
            "2/4 = 0.5",
            diversity_reward(&q("what is the capital"), &t("what is [MASK]")) == 0.5,
        ),
        (
            "0.5 + 0.5 * 0.4 = 0.7",
            total_reward(0.5, 0.4, 0.5).total == 0.7,
        ),
        (
            "λ = 0 -> consistency",
            total_reward(0.3, 0.9, 0.0).total == 0.3,
        ),
        ("upper bound 2", total_reward(1.0, 1.0, 1.0).total == 2.0),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    Outcome::new(
        failed.is_empty(),
        format!(
            "{}/{} examples exact{}",
            checks.len() - failed.len(),
            checks.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failed.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. BLEU against the reference scorer, Oracle >= Top-1, Pairwise = 100 iff identical

#[derive(serde::Deserialize)]
struct GoldenPair {
    hyp: String,
    #[serde(rename = "ref")]
    reference: String,
    bleu: f64,
}

fn criterion_7(runs: &[&PipelineRun]) -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/bleu_golden.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let pairs: Vec<GoldenPair> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let worst = pairs
        .iter()
        .map(|p| {
            let h: Vec<&str> = p.hyp.split_whitespace().collect();
            let r: Vec<&str> = p.reference.split_whitespace().collect();
            (bleu4(&h, &[r]) - p.bleu).abs()
        })
        .fold(0.0f64, f64::max);

    let mut oracle_ok = true;
    for run in runs {
        oracle_ok &= metrics::oracle_bleu(&run.samples) >= metrics::top1_bleu(&run.samples);
        for s in &run.samples {
            oracle_ok &= metrics::oracle_bleu(std::slice::from_ref(s))
                >= metrics::top1_bleu(std::slice::from_ref(s));
        }
        oracle_ok &= run.report.oracle >= run.report.top1;
    }

    // pairwise = 100 iff every hypothesis in the list is the same
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words = ["who", "what", "is", "was", "the", "city", "Oslo", "?"];
    let mut iff_ok = true;
    let mut lists = 0;
    for _ in 0..2000 {
        let n = rng.gen_range(2..6);
        let base: Vec<String> = (0..rng.gen_range(1..7))
            .map(|_| words[rng.gen_range(0..words.len())].to_string())
            .collect();
        let hyps: Vec<Question> = (0..n)
            .map(|_| {
                let mut toks = base.clone();
                if rng.gen_bool(0.3) {
                    let i = rng.gen_range(0..toks.len());
                    toks[i] = words[rng.gen_range(0..words.len())].to_string();
                }
                Question::from_tokens(toks).unwrap()
            })
            .collect();
        let identical = hyps.windows(2).all(|w| w[0] == w[1]);
        let p = pairwise_bleu_of(&hyps).unwrap();
        iff_ok &= identical == ((p - 100.0).abs() < 1e-9);
        lists += 1;
    }
    Outcome::new(
        worst <= 0.01 && oracle_ok && iff_ok,
        format!(
            "{} golden pairs, max |Δ| {worst:.2e}; oracle >= top-1 on {} generated corpora: {oracle_ok}; pairwise=100 iff identical on {lists} lists: {iff_ok}",
            pairs.len(),
            runs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Style sampling

fn criterion_9() -> Outcome {
    let pool: Vec<Template> = [
        "who [MASK] ?",
        "who was [MASK] ?",
        "who is the [MASK] of [MASK] ?",
        "when did [MASK] acquire [MASK] ?",
        "when was [MASK] founded ?",
        "in what year was [MASK] ?",
        "where was [MASK] born ?",
        "in which city is [MASK] ?",
        "where is [MASK] based ?",
        "what company did [MASK] buy ?",
        "which company was [MASK] by [MASK] ?",
        "[MASK] in which year ?",
    ]
    .iter()
    .map(|s| Template::parse(s).unwrap())
    .collect();
    let clusters = cluster_templates(&pool, 3);
    let mut members: Vec<usize> = clusters.iter().flat_map(|c| c.members.clone()).collect();
    members.sort_unstable();
    let partition = members == (0..pool.len()).collect::<Vec<_>>()
        && clusters.iter().all(|c| !c.members.is_empty());

    let probs = vec![1.0 / pool.len() as f64; pool.len()];
    let mut counts = vec![0usize; pool.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    const DRAWS: usize = 10_000;
    for _ in 0..DRAWS {
        for i in choose_styles(&clusters, &probs, SampleMode::Training, &mut rng) {
            counts[i] += 1;
        }
    }
    let (mut stat, mut df) = (0.0, 0usize);
    for c in &clusters {
        let expected = DRAWS as f64 / c.members.len() as f64;
        for &m in &c.members {
            stat += (counts[m] as f64 - expected).powi(2) / expected;
        }
        df += c.members.len() - 1;
    }
    let p_value = if df == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(df as f64).unwrap().cdf(stat)
    };

    let mut argmax_ok = true;
    for trial in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
        let logits: Vec<f64> = (0..pool.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let probs = styleqg::retriever::softmax(&logits);
        let chosen = choose_styles(&clusters, &probs, SampleMode::Inference, &mut rng);
        for (c, &i) in clusters.iter().zip(&chosen) {
            let best = c.members.iter().copied().fold(c.members[0], |b, m| {
                if probs[m] > probs[b] {
                    m
                } else {
                    b
                }
            });
            argmax_ok &= best == i;
        }
    }
    Outcome::new(
        partition && p_value > 0.01 && argmax_ok,
        format!(
            "partition {partition}; training-mode chi-square {stat:.2} on {df} df, p = {p_value:.3}; inference argmax on 200 enumerations: {argmax_ok}"
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    results.push((1, criterion_1()));
    results.push((2, criterion_2()));
    results.push((3, criterion_3()));
    results.push((4, criterion_4()));

    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let runs = [
        run_pipeline(dirs[0].path(), 0.05),
        run_pipeline(dirs[1].path(), 0.5),
        run_pipeline(dirs[2].path(), 0.5),
    ];
    let runs: Vec<PipelineRun> = match runs.into_iter().collect::<styleqg::Result<Vec<_>>>() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("pipeline run failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    results.push((5, criterion_5(&runs[0], &runs[1])));
    results.push((6, criterion_6()));
    results.push((7, criterion_7(&[&runs[0], &runs[1]])));
    results.push((8, criterion_8(&runs[1], &runs[2])));
    results.push((9, criterion_9()));

    for (n, o) in &results {
        println!(
            "{} criterion {n}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!(
        "{passed}/{} criteria pass ({:.0?})",
        results.len(),
        start.elapsed()
    );

    // Criterion 1 is checked against the table as printed; two of its rows
    // are internally inconsistent, so its FAIL is expected as long as the
    // failing rows are exactly those.
    let unexpected: Vec<usize> = results
        .iter()
        .filter(|(n, o)| !o.pass && !(*n == 1 && criterion_1_failures_are_the_known_rows()))
        .map(|(n, _)| *n)
        .collect();
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
