use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;

use grape_core::bridge::{
    BridgeEnv, Dispatcher, LookupEmbedder, MockAdapter, MockChannel, StdioChannel,
};
use grape_core::experiment::{inflate_demo_on, ModeRun, ACCEPTANCE_LEARNING_RATE};
use grape_core::optim::{train, RunSummary, TrainFailure, TrainOutput, RECALL_TABLE_KS};
use grape_core::policy::{
    greedy_action, policy_probs, read_checkpoint, write_checkpoint, ActionTable, PolicyParams,
};
use grape_core::reward::{rank_reward, OutcomeRecord};
use grape_core::synthenv::{
    make_testbed, read_testbed, write_testbed, Testbed, TestbedEnv, CORPUS_FILE, MANIFEST_FILE,
};
use grape_core::vecindex::io::{index_digest, read_corpus, write_index};
use grape_core::vecindex::{cosine, l2_normalize, Embedding};
use grape_core::{GrapeError, Result};

use crate::config::{Backend, RunConfig};
use crate::run::{jsonl, RunDir};

pub struct Globals {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
}

impl Globals {
    /// Defaults, then the config file, then `--seed`.
    fn load_config(&self, run: Option<&mut RunDir>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_text(&fs::read_to_string(path)?)?;
            if let Some(run) = run {
                run.input(path);
            }
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }
}

pub fn index(g: &Globals, corpus: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let idx = read_corpus(corpus)?;
    let mut run = RunDir::create(&g.out_dir, "index")?;
    run.input(corpus);
    let target = match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            p.to_path_buf()
        }
        None => run.output("index.txt")?,
    };
    write_index(&idx, fs::File::create(&target)?)?;
    println!("N={} d={} sha256={}", idx.len(), idx.dim(), index_digest(&idx));
    println!("index written to {}", target.display());
    run.finish(Default::default(), None)?;
    Ok(ExitCode::SUCCESS)
}

pub fn rank(
    index: &Path,
    vector: Option<&str>,
    item: Option<u64>,
    k: usize,
    target: Option<u64>,
) -> Result<ExitCode> {
    let idx = read_corpus(index)?;
    let q: Embedding = match (vector, item) {
        (Some(v), None) => {
            let vals = v
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| GrapeError::Parameter(format!("bad number `{t}` in query")))
                })
                .collect::<Result<Vec<f64>>>()?;
            l2_normalize(&vals)?
        }
        (None, Some(id)) => idx.get(id).cloned().ok_or(GrapeError::TargetNotFound(id))?,
        _ => {
            return Err(GrapeError::Parameter(
                "give exactly one of --vector or --item".into(),
            ))
        }
    };
    let ranked = idx.rank_all(&q)?;
    let top = idx.top_k(&q, k)?;
    println!("rank\tid\tscore");
    for (i, id) in top.iter().enumerate() {
        println!("{}\t{}\t{:.6}", i + 1, id, ranked.scores[i]);
    }
    if let Some(t) = target {
        println!("target {t} rank {} of {}", idx.rank_of_target(&q, t)?, idx.len());
    }
    Ok(ExitCode::SUCCESS)
}

/// Load the configured testbed, or build it and save it under `testbed/`.
fn obtain_testbed(cfg: &RunConfig, run: &mut RunDir) -> Result<Testbed> {
    match &cfg.testbed_dir {
        Some(dir) => {
            run.input(&dir.join(CORPUS_FILE));
            run.input(&dir.join(MANIFEST_FILE));
            read_testbed(dir)
        }
        None => {
            let tb = make_testbed(&cfg.spec)?;
            write_testbed(&tb, &run.dir.join("testbed"))?;
            run.output(&format!("testbed/{CORPUS_FILE}"))?;
            run.output(&format!("testbed/{MANIFEST_FILE}"))?;
            Ok(tb)
        }
    }
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    record: &'static str,
    #[serde(flatten)]
    summary: &'a RunSummary,
}

#[derive(Serialize)]
struct OutcomeLine<'a> {
    step: usize,
    #[serde(flatten)]
    outcome: &'a OutcomeRecord,
}

fn step_stream(out: &TrainOutput) -> Result<Vec<u8>> {
    let mut bytes = jsonl(&out.reports)?;
    if let Some(s) = &out.summary {
        bytes.extend(jsonl([SummaryLine {
            record: "summary",
            summary: s,
        }])?);
    }
    Ok(bytes)
}

fn outcome_stream(out: &TrainOutput, per_step: usize) -> Result<Vec<u8>> {
    jsonl(out.outcomes.iter().enumerate().map(|(i, o)| OutcomeLine {
        step: i / per_step.max(1),
        outcome: o,
    }))
}

pub fn action_tables(tb: &Testbed) -> Vec<ActionTable> {
    tb.queries
        .iter()
        .zip(&tb.actions)
        .map(|(q, row)| ActionTable {
            query_id: q.query_id,
            entries: row
                .iter()
                .map(|a| {
                    let reference = format!("{MANIFEST_FILE}:q{}:a{}", q.query_id, a.action_id);
                    (a.action_id, a.label.clone(), reference)
                })
                .collect(),
        })
        .collect()
}

fn run_training(
    cfg: &RunConfig,
    tb: &Testbed,
    params: &mut PolicyParams,
) -> std::result::Result<TrainOutput, TrainFailure> {
    let early = |error| TrainFailure {
        step: 0,
        error,
        partial: TrainOutput::default(),
    };
    match cfg.backend {
        Backend::Testbed => train(&mut TestbedEnv::new(tb), params, &cfg.train),
        Backend::Mock => {
            let adapter = MockAdapter::new(LookupEmbedder::from_testbed(tb), cfg.malform_rate, tb.spec.dim);
            let dispatcher = Dispatcher::new(MockChannel::new(adapter), cfg.timeout_ms);
            let mut env = BridgeEnv::for_testbed(tb, cfg.template, dispatcher).map_err(early)?;
            train(&mut env, params, &cfg.train)
        }
        Backend::Adapter => {
            let channel = StdioChannel::from_env().map_err(early)?;
            let dispatcher = Dispatcher::new(channel, cfg.timeout_ms);
            let mut env = BridgeEnv::for_testbed(tb, cfg.template, dispatcher).map_err(early)?;
            train(&mut env, params, &cfg.train)
        }
    }
}

pub fn train_cmd(g: &Globals, exclude_invalid: bool) -> Result<ExitCode> {
    let mut run = RunDir::create(&g.out_dir, "train")?;
    let mut cfg = g.load_config(Some(&mut run))?;
    if exclude_invalid {
        cfg.set("exclude_invalid_from_stats", "true")?;
    }
    cfg.train.validate()?;
    let tb = obtain_testbed(&cfg, &mut run)?;
    run.write("config.txt", cfg.to_text().as_bytes())?;

    let mut params = PolicyParams::zeros(tb.spec.featurizer().dim(), tb.action_count(), cfg.temperature)?;
    let per_step = cfg.train.batch_queries.min(tb.queries.len()) * cfg.train.group_size;
    let result = run_training(&cfg, &tb, &mut params);
    let (out, failure) = match result {
        Ok(out) => (out, None),
        Err(f) => (f.partial, Some((f.step, f.error))),
    };

    run.write("reports/steps.jsonl", &step_stream(&out)?)?;
    run.write("reports/outcomes.jsonl", &outcome_stream(&out, per_step)?)?;

    if let Some((step, error)) = failure {
        eprintln!("training failed at step {step}: {error}");
        if let Some(last) = out.reports.last() {
            eprintln!("last completed step: {}", serde_json::to_string(last)?);
        }
        run.finish(cfg.snapshot(), Some(format!("step {step}: {error}")))?;
        return Err(error);
    }

    let ckpt = run.output("checkpoints/final.ckpt")?;
    write_checkpoint(&params, &action_tables(&tb), fs::File::create(&ckpt)?)?;
    match &out.summary {
        Some(s) => {
            println!("steps: {}", out.reports.len());
            println!("k\tinitial\tfinal");
            for (i, k) in s.initial.ks.iter().enumerate() {
                println!("R@{k}\t{:.4}\t{:.4}", s.initial.recall[i], s.final_.recall[i]);
            }
        }
        None => println!("steps: 0 (empty report stream)"),
    }
    println!("run directory: {}", run.dir.display());
    run.finish(cfg.snapshot(), None)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyChoice {
    /// Parameters read from `--checkpoint`.
    Checkpoint,
    /// All-zero parameters.
    Uniform,
    /// Always the action built to rank each target first.
    Oracle,
}

#[derive(Debug, Serialize)]
struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<usize>,
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    Histogram { lo, hi, counts }
}

#[derive(Debug, Serialize)]
struct EvalReport {
    policy: String,
    queries: usize,
    ks: Vec<usize>,
    /// Recall of the greedy rewrite.
    recall: Vec<f64>,
    /// Recall in expectation over the policy's action distribution.
    expected_recall: Vec<f64>,
    rank_reward_histogram: Histogram,
    similarity_histogram: Histogram,
}

fn check_compatible(params: &PolicyParams, tables: &[ActionTable], tb: &Testbed) -> Result<()> {
    let incompatible = |m: String| Err(GrapeError::Parameter(format!("checkpoint does not fit testbed: {m}")));
    let fdim = tb.spec.featurizer().dim();
    if params.feature_dim() != fdim {
        return incompatible(format!("feature_dim {} vs {fdim}", params.feature_dim()));
    }
    if params.action_count() != tb.action_count() {
        return incompatible(format!("{} actions vs {}", params.action_count(), tb.action_count()));
    }
    if tables.len() != tb.queries.len() {
        return incompatible(format!("{} action tables vs {} queries", tables.len(), tb.queries.len()));
    }
    for ((t, q), row) in tables.iter().zip(&tb.queries).zip(&tb.actions) {
        if t.query_id != q.query_id {
            return incompatible(format!("query {} vs {}", t.query_id, q.query_id));
        }
        let same = t.entries.len() == row.len()
            && t.entries.iter().zip(row).all(|((id, label, _), a)| *id == a.action_id && *label == a.label);
        if !same {
            return incompatible(format!("action table of query {} differs", q.query_id));
        }
    }
    Ok(())
}

pub fn eval(
    g: &Globals,
    checkpoint: Option<&Path>,
    testbed: &Path,
    ks: Option<&[usize]>,
    policy: PolicyChoice,
    bins: usize,
) -> Result<ExitCode> {
    let mut run = RunDir::create(&g.out_dir, "eval")?;
    let tb = read_testbed(testbed)?;
    run.input(&testbed.join(CORPUS_FILE));
    run.input(&testbed.join(MANIFEST_FILE));
    let n = tb.index.len();

    let ks: Vec<usize> = match ks {
        Some(ks) => ks.to_vec(),
        None => RECALL_TABLE_KS.iter().copied().filter(|&k| k <= n).collect(),
    };
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(GrapeError::Parameter(format!("k = {bad} outside 1..={n}")));
    }
    if bins == 0 {
        return Err(GrapeError::Parameter("bins must be positive".into()));
    }

    let params = match (policy, checkpoint) {
        (PolicyChoice::Checkpoint, Some(path)) => {
            run.input(path);
            let (params, tables) = read_checkpoint(BufReader::new(fs::File::open(path)?))?;
            check_compatible(&params, &tables, &tb)?;
            Some(params)
        }
        (PolicyChoice::Checkpoint, None) => {
            return Err(GrapeError::Parameter("--checkpoint is required for --policy checkpoint".into()))
        }
        (PolicyChoice::Uniform, _) => Some(PolicyParams::zeros(tb.spec.featurizer().dim(), tb.action_count(), 1.0)?),
        (PolicyChoice::Oracle, _) => None,
    };

    let mut hits = vec![0.0; ks.len()];
    let mut expected = vec![0.0; ks.len()];
    let mut rank_rewards = Vec::new();
    let mut sims = Vec::new();
    for (qi, q) in tb.queries.iter().enumerate() {
        let target = tb.index.get(q.target_id).ok_or(GrapeError::TargetNotFound(q.target_id))?;
        let ranks: Vec<usize> = tb.actions[qi]
            .iter()
            .map(|a| tb.index.rank_of_target(&a.embedding, q.target_id))
            .collect::<Result<_>>()?;
        let (chosen, probs) = match &params {
            Some(p) => (greedy_action(p, q)?, policy_probs(p, q)?.to_vec()),
            None => {
                let good = tb.good_action(qi).ok_or_else(|| {
                    GrapeError::Parameter(format!("query {} has no good action", q.query_id))
                })?;
                let mut probs = vec![0.0; ranks.len()];
                probs[good] = 1.0;
                (good, probs)
            }
        };
        for (j, &k) in ks.iter().enumerate() {
            hits[j] += f64::from(u8::from(ranks[chosen] <= k));
            expected[j] += ranks.iter().zip(&probs).filter(|(&r, _)| r <= k).map(|(_, &p)| p).sum::<f64>();
        }
        rank_rewards.push(rank_reward(ranks[chosen], n)?);
        sims.push(cosine(&tb.actions[qi][chosen].embedding, target)?);
    }
    let qn = tb.queries.len() as f64;
    let report = EvalReport {
        policy: format!("{policy:?}").to_lowercase(),
        queries: tb.queries.len(),
        ks: ks.clone(),
        recall: hits.iter().map(|h| h / qn).collect(),
        expected_recall: expected.iter().map(|e| e / qn).collect(),
        rank_reward_histogram: histogram(&rank_rewards, -1.0, 1.0, bins),
        similarity_histogram: histogram(&sims, -1.0, 1.0, bins),
    };

    println!("policy: {}  queries: {}", report.policy, report.queries);
    println!("k\tgreedy\texpected");
    for (j, k) in ks.iter().enumerate() {
        println!("R@{k}\t{:.4}\t{:.4}", report.recall[j], report.expected_recall[j]);
    }
    print_histogram("rank reward of greedy rewrite", &report.rank_reward_histogram);
    print_histogram("similarity of greedy rewrite to target", &report.similarity_histogram);

    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    run.write("eval.json", &bytes)?;
    run.finish(Default::default(), None)?;
    Ok(ExitCode::SUCCESS)
}

fn print_histogram(title: &str, h: &Histogram) {
    println!("{title}:");
    let width = (h.hi - h.lo) / h.counts.len() as f64;
    let peak = h.counts.iter().copied().max().unwrap_or(0).max(1);
    for (i, &c) in h.counts.iter().enumerate() {
        let lo = h.lo + width * i as f64;
        let bar = "#".repeat((c * 40).div_ceil(peak));
        println!("  [{lo:+.2}, {:+.2}) {c:>5} {bar}", lo + width);
    }
}

#[derive(Serialize)]
struct CurveRow {
    step: usize,
    rank_similarity: f64,
    rank_recall_at_1: f64,
    similarity_similarity: f64,
    similarity_recall_at_1: f64,
}

fn mode_stream(m: &ModeRun) -> Result<Vec<u8>> {
    let mut bytes = jsonl(&m.reports)?;
    bytes.extend(jsonl([SummaryLine {
        record: "summary",
        summary: &m.summary,
    }])?);
    Ok(bytes)
}

pub fn inflate_demo(g: &Globals, spec: Option<&Path>, check: bool) -> Result<ExitCode> {
    let mut run = RunDir::create(&g.out_dir, "inflate-demo")?;
    let mut cfg = g.load_config(Some(&mut run))?;
    if let Some(path) = spec {
        cfg.merge_text(&fs::read_to_string(path)?)?;
        run.input(path);
        if let Some(seed) = g.seed {
            cfg.set("seed", &seed.to_string())?;
        }
    }
    if !cfg.is_set("learning_rate") {
        cfg.train.learning_rate = ACCEPTANCE_LEARNING_RATE;
    }
    if cfg.backend != Backend::Testbed {
        return Err(GrapeError::Parameter("inflate-demo runs on the in-process testbed only".into()));
    }
    if cfg.temperature != 1.0 {
        log::warn!("inflate-demo trains at temperature 1; ignoring temperature = {}", cfg.temperature);
    }
    cfg.train.validate()?;
    let tb = obtain_testbed(&cfg, &mut run)?;
    run.write("config.txt", cfg.to_text().as_bytes())?;

    let demo = match inflate_demo_on(&tb, &cfg.train) {
        Ok(d) => d,
        Err(f) => {
            run.finish(cfg.snapshot(), Some(f.to_string()))?;
            return Err(f.error);
        }
    };
    run.write("rank/steps.jsonl", &mode_stream(&demo.rank)?)?;
    run.write("similarity/steps.jsonl", &mode_stream(&demo.similarity)?)?;

    let mut csv = String::from("step,rank_similarity,rank_recall_at_1,similarity_similarity,similarity_recall_at_1\n");
    let rows = demo.rank.reports.iter().zip(&demo.similarity.reports).map(|(r, s)| CurveRow {
        step: r.step,
        rank_similarity: r.mean_similarity_to_target,
        rank_recall_at_1: r.recall_at_1,
        similarity_similarity: s.mean_similarity_to_target,
        similarity_recall_at_1: s.recall_at_1,
    });
    for row in rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.rank_similarity, row.rank_recall_at_1, row.similarity_similarity, row.similarity_recall_at_1
        ));
    }
    run.write("curves.csv", csv.as_bytes())?;
    let mut verdict = serde_json::to_vec_pretty(&demo.verdict)?;
    verdict.push(b'\n');
    run.write("verdict.json", &verdict)?;

    println!("mode\tR@1 start\tR@1 end\tdelta\tsim start\tsim end\tsim slope");
    for m in [&demo.rank, &demo.similarity] {
        let first = m.reports.first().map_or(0.0, |r| r.mean_similarity_to_target);
        let last = m.reports.last().map_or(0.0, |r| r.mean_similarity_to_target);
        println!(
            "{}\t{:.4}\t\t{:.4}\t{:+.4}\t{:.4}\t\t{:.4}\t{:.3e}",
            m.reward_mode,
            m.summary.initial.recall[0],
            m.summary.final_.recall[0],
            m.recall_delta(),
            first,
            last,
            m.similarity_slope()
        );
    }
    let v = demo.verdict;
    println!(
        "sim_mode_sim_slope={:.3e} sim_mode_recall_delta={:+.4} rank_mode_recall_delta={:+.4}",
        v.sim_mode_sim_slope, v.sim_mode_recall_delta, v.rank_mode_recall_delta
    );
    println!(
        "inflation {}",
        if v.reproduced() { "reproduced" } else { "not reproduced" }
    );
    run.finish(cfg.snapshot(), None)?;
    Ok(if check && !v.reproduced() {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}
