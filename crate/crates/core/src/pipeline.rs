//! End-to-end orchestration over a working directory.
//!
//! Stages run in the order corpus → index → supervised → RL → generate →
//! evaluate. A `manifest.json` in the working directory records artifact
//! paths (relative to the directory), the config hash and the completed
//! stages; a stage refuses to run when an input it needs is missing.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainerConfig;
use crate::corpus::{build_corpus, extract_template, RuleTagger, Tagger, Template, TemplateCorpus};
use crate::dataset::{read_dataset, write_records, Sample};
use crate::error::{Error, Result};
use crate::generator::{self, GenerationRecord, PointerLm};
use crate::hashing::hash_str;
use crate::metrics::{MetricReport, TopNSample};
use crate::retriever::{build_index, PoolScores, RetrievalIndex, RetrieverParams};
use crate::reward::QaBackend;
use crate::sampler::{choose_styles, cluster_templates, retrieve_pool, SampleMode};
use crate::synth::{generate_world, SyntheticOracle};
use crate::text::Lexicon;
use crate::trainer::{self, derive_seed, TrainInputs};

/// Top-N generations for a set of samples.
#[derive(Debug, Clone)]
pub struct GenerationRun {
    pub samples: Vec<TopNSample>,
    pub records: Vec<GenerationRecord>,
}

const STAGE_GENERATE: u64 = 11;

/// The retrieval query for `sample`: the template of the vanilla model's
/// greedy question, or the question itself when it masks to nothing.
pub fn query_template(
    vanilla: &PointerLm,
    sample: &Sample,
    tagger: &(dyn Tagger + Sync),
    lexicon: &Lexicon,
) -> Result<Template> {
    let v = generator::vanilla_generate(vanilla, &sample.input)?;
    let spans = tagger.tag(v.tokens());
    match extract_template(&v, &sample.input.context_token_set(), &spans, lexicon) {
        Ok(t) => Ok(t),
        Err(Error::AllMasked) => Template::new(v.tokens().to_vec(), None),
        Err(e) => Err(e),
    }
}

/// For each sample: vanilla greedy question → query template → retrieved
/// pool clustered into `outputs_n` groups → per-cluster top style → one
/// nucleus-sampled question per style. The cluster holding the overall best
/// retrieved template is generated with an empty template segment and
/// ranked first; the others follow by retrieval probability.
#[allow(clippy::too_many_arguments)]
pub fn generate_top_n(
    vanilla: &PointerLm,
    style: &PointerLm,
    index: &RetrievalIndex,
    params: &RetrieverParams,
    samples: &[Sample],
    cfg: &TrainerConfig,
    tagger: &(dyn Tagger + Sync),
    lexicon: &Lexicon,
) -> Result<GenerationRun> {
    let scfg = cfg.inference_sampling();
    let per_sample: Vec<(TopNSample, Vec<GenerationRecord>)> = samples
        .par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[STAGE_GENERATE, hash_str(&s.id)],
            ));
            let z0 = query_template(vanilla, s, tagger, lexicon)?;
            let pool = retrieve_pool(index, params, &z0, scfg.pool_size)?;
            let scores = PoolScores::new(params, &z0, &pool)?;
            let clusters = cluster_templates(&pool, scfg.k);
            let chosen = choose_styles(&clusters, &scores.probs, SampleMode::Inference, &mut rng);
            let best = (0..pool.len())
                .min_by(|&a, &b| scores.probs[b].total_cmp(&scores.probs[a]).then(a.cmp(&b)))
                .unwrap();
            let mut slots: Vec<(bool, usize)> = clusters
                .iter()
                .zip(&chosen)
                .map(|(c, &i)| (c.members.contains(&best), i))
                .collect();
            slots.sort_by(|a, b| {
                b.0.cmp(&a.0)
                    .then(scores.probs[b.1].total_cmp(&scores.probs[a.1]))
                    .then(a.1.cmp(&b.1))
            });
            let mut hyps = Vec::with_capacity(slots.len());
            let mut recs = Vec::with_capacity(slots.len());
            for (rank, (vanilla_slot, i)) in slots.into_iter().enumerate() {
                let z = (!vanilla_slot).then_some(&pool[i]);
                let out = generator::sample_nucleus(
                    style,
                    &s.input,
                    z,
                    scfg.top_p,
                    scfg.top_k,
                    scfg.max_len,
                    &mut rng,
                )?;
                recs.push(GenerationRecord {
                    id: s.id.clone(),
                    rank: rank + 1,
                    template: z.map(Template::text).unwrap_or_default(),
                    question: out.question.raw().to_string(),
                    log_prob: out.total_log_prob,
                });
                hyps.push(out.question);
            }
            Ok((
                TopNSample {
                    id: s.id.clone(),
                    hypotheses: hyps,
                    references: vec![s.question.clone()],
                    input: s.input.clone(),
                },
                recs,
            ))
        })
        .collect::<Result<_>>()?;
    let mut run = GenerationRun {
        samples: Vec::with_capacity(per_sample.len()),
        records: Vec::new(),
    };
    for (s, r) in per_sample {
        run.samples.push(s);
        run.records.extend(r);
    }
    Ok(run)
}

pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?,
        );
    }
    Ok(out)
}

/// Joins generation records with the dataset (by id, ordered by rank) and
/// computes the metric report.
pub fn evaluate_records(
    records: &[GenerationRecord],
    samples: &[Sample],
    qa: &(impl QaBackend + ?Sized),
) -> Result<MetricReport> {
    let mut by_id: HashMap<&str, Vec<&GenerationRecord>> = HashMap::new();
    for r in records {
        by_id.entry(r.id.as_str()).or_default().push(r);
    }
    let known: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    if let Some(r) = records.iter().find(|r| !known.contains_key(r.id.as_str())) {
        return Err(Error::Validation(format!(
            "generation for unknown sample id {:?}",
            r.id
        )));
    }
    let mut outputs = Vec::new();
    for s in samples {
        let Some(mut recs) = by_id.remove(s.id.as_str()) else {
            continue;
        };
        recs.sort_by_key(|r| r.rank);
        let hypotheses = recs
            .iter()
            .map(|r| crate::corpus::Question::parse(&r.question))
            .collect::<Result<Vec<_>>>()?;
        outputs.push(TopNSample {
            id: s.id.clone(),
            hypotheses,
            references: vec![s.question.clone()],
            input: s.input.clone(),
        });
    }
    if outputs.is_empty() {
        return Err(Error::Validation("no generations match the dataset".into()));
    }
    MetricReport::compute(&outputs, qa)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        let line =
            serde_json::to_string(it).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Corpus,
    Index,
    Supervised,
    Rl,
    Generate,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Corpus => "corpus",
            Stage::Index => "index",
            Stage::Supervised => "supervised",
            Stage::Rl => "rl",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Artifact paths (relative to the working directory) and stage flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub root_seed: Option<u64>,
    pub config_hash: Option<String>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub completed: BTreeMap<Stage, bool>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".styleqg.lock";
pub const CONFIG_FILE: &str = "config.toml";

impl PipelineManifest {
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.completed.get(&stage).copied().unwrap_or(false)
    }

    pub fn mark(&mut self, stage: Stage) {
        self.completed.insert(stage, true);
    }

    /// Clears `stage` and everything after it.
    pub fn invalidate_from(&mut self, stage: Stage) {
        self.completed.retain(|s, _| *s < stage);
    }
}

/// Exclusive ownership of a working directory for the lifetime of the guard.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Validation(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn config_hash(cfg: &TrainerConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml_string().as_bytes()))
}

/// A locked working directory with its manifest and effective config.
pub struct Workspace {
    pub dir: PathBuf,
    pub config: TrainerConfig,
    pub manifest: PipelineManifest,
    pub lexicon: Lexicon,
    _lock: DirLock,
}

fn stage_error(stage: Stage, missing: impl Into<String>) -> Error {
    Error::StageDependency {
        stage: stage.name().to_string(),
        missing: missing.into(),
    }
}

impl Workspace {
    pub fn open(dir: &Path, config: TrainerConfig) -> Result<Self> {
        let lock = DirLock::acquire(dir)?;
        let mut manifest = PipelineManifest::load_or_default(dir)?;
        if manifest.root_seed.is_none() {
            manifest.root_seed = Some(config.seed);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
            lexicon: Lexicon::default(),
            _lock: lock,
        })
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.dir.join(rel)
        }
    }

    fn relative(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.dir)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    }

    /// An explicit path, else the manifest entry; it must exist on disk.
    fn input(
        &self,
        stage: Stage,
        what: &str,
        explicit: Option<&Path>,
        recorded: &Option<PathBuf>,
    ) -> Result<PathBuf> {
        let p = match (explicit, recorded) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(r)) => self.path(r),
            (None, None) => return Err(stage_error(stage, what)),
        };
        if !p.exists() {
            return Err(stage_error(stage, format!("{what} ({})", p.display())));
        }
        Ok(p)
    }

    fn require(&self, stage: Stage, prereq: Stage) -> Result<()> {
        if !self.manifest.is_done(prereq) {
            return Err(stage_error(stage, format!("stage {}", prereq.name())));
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        self.manifest.save(&self.dir)
    }

    /// Writes train/dev/test splits of the synthetic world.
    pub fn synth(&mut self, sizes: [usize; 3], out_dir: Option<&Path>) -> Result<[PathBuf; 3]> {
        let out = out_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.dir.join("data"));
        let seed = self.config.seed;
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let names = ["train", "dev", "test"];
        let mut paths = Vec::new();
        for (k, (name, n)) in names.iter().zip(sizes).enumerate() {
            if n == 0 {
                return Err(Error::Validation(format!(
                    "{name} split size must be positive"
                )));
            }
            let p = out.join(format!("{name}.jsonl"));
            write_records(&p, &generate_world(seed.wrapping_add(k as u64), n))?;
            paths.push(p);
        }
        self.manifest.train = Some(self.relative(&paths[0]));
        self.manifest.dev = Some(self.relative(&paths[1]));
        self.manifest.test = Some(self.relative(&paths[2]));
        self.manifest.mark(Stage::Data);
        self.manifest.invalidate_from(Stage::Corpus);
        self.save()?;
        Ok([paths[0].clone(), paths[1].clone(), paths[2].clone()])
    }

    pub fn build_corpus(
        &mut self,
        dataset: Option<&Path>,
        out: Option<&Path>,
        threshold: f64,
    ) -> Result<(TemplateCorpus, usize)> {
        let dataset = self.input(
            Stage::Corpus,
            "training dataset",
            dataset,
            &self.manifest.train.clone(),
        )?;
        if self.manifest.train.is_none() {
            self.manifest.train = Some(self.relative(&dataset));
        }
        let samples = read_dataset(&dataset)?;
        let tagger = RuleTagger::new(self.lexicon.clone());
        let built = build_corpus(&samples, &tagger, &self.lexicon, threshold)?;
        let out = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.dir.join("corpus.jsonl"));
        built.corpus.write_jsonl(&out)?;
        self.manifest.corpus = Some(self.relative(&out));
        self.manifest.invalidate_from(Stage::Corpus);
        self.manifest.mark(Stage::Corpus);
        self.save()?;
        Ok((built.corpus, built.skipped))
    }

    fn load_corpus(
        &self,
        stage: Stage,
        explicit: Option<&Path>,
    ) -> Result<(PathBuf, TemplateCorpus)> {
        let p = self.input(stage, "template corpus", explicit, &self.manifest.corpus)?;
        let corpus = TemplateCorpus::read_jsonl(&p, self.config.dedup_threshold)?;
        Ok((p, corpus))
    }

    /// Embeds the corpus with retriever weights from `checkpoint`
    /// (`dir/name` of a saved retriever) or the initial identity encoder.
    pub fn build_index(
        &mut self,
        corpus: Option<&Path>,
        checkpoint: Option<(&Path, &str)>,
        out: Option<&Path>,
    ) -> Result<RetrievalIndex> {
        let (corpus_path, corpus) = self.load_corpus(Stage::Index, corpus)?;
        let params = match checkpoint {
            Some((dir, name)) => RetrieverParams::load(dir, name)?,
            None => RetrieverParams::identity(self.config.embedding_dim),
        };
        let index = build_index(&corpus, &params)?;
        let out = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.dir.join("index").join("index.json"));
        let manifest_dir = out.parent().unwrap_or(Path::new("."));
        let corpus_ref = pathdiff(&corpus_path, manifest_dir);
        index.save(&out, &corpus_ref)?;
        self.manifest.index = Some(self.relative(&out));
        self.manifest.mark(Stage::Index);
        self.save()?;
        Ok(index)
    }

    /// Supervised then RL training; a stage already completed under the
    /// same config is not rerun.
    pub fn train(&mut self, qa: &dyn QaBackend) -> Result<usize> {
        self.require(Stage::Supervised, Stage::Index)?;
        let train_path = self.input(
            Stage::Supervised,
            "training dataset",
            None,
            &self.manifest.train.clone(),
        )?;
        let dev_path = self.input(
            Stage::Supervised,
            "development dataset",
            None,
            &self.manifest.dev.clone(),
        )?;
        let (_, corpus) = self.load_corpus(Stage::Supervised, None)?;
        let hash = config_hash(&self.config);
        if self.manifest.config_hash.as_deref() != Some(hash.as_str()) {
            self.manifest.invalidate_from(Stage::Supervised);
            self.manifest.config_hash = Some(hash);
        }
        let ckpt = self.dir.join("checkpoints");
        if self.manifest.is_done(Stage::Rl) && ckpt.join("model").join("style.json").exists() {
            return fs::read_to_string(ckpt.join("best_epoch.txt"))
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Validation("missing best_epoch.txt".into()));
        }
        fs::write(self.dir.join(CONFIG_FILE), self.config.to_toml_string())
            .map_err(|e| Error::io(&self.dir, e))?;
        let train = read_dataset(&train_path)?;
        let dev = read_dataset(&dev_path)?;
        let tagger = RuleTagger::new(self.lexicon.clone());
        let inputs = TrainInputs {
            train: &train,
            dev: &dev,
            corpus: &corpus,
            tagger: &tagger,
            lexicon: &self.lexicon,
            qa,
        };
        let outcome = trainer::train(&inputs, &self.config, Some(&ckpt))?;
        self.manifest.checkpoints = Some(self.relative(&ckpt));
        self.manifest.mark(Stage::Supervised);
        self.manifest.mark(Stage::Rl);
        self.manifest.invalidate_from(Stage::Generate);
        self.save()?;
        Ok(outcome.best_epoch)
    }

    /// Top-N generation for a dataset split (default: test).
    pub fn generate(
        &mut self,
        checkpoint: Option<&Path>,
        dataset: Option<&Path>,
        n: Option<usize>,
        out: Option<&Path>,
    ) -> Result<GenerationRun> {
        let model_dir = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => {
                self.require(Stage::Generate, Stage::Rl)?;
                self.input(
                    Stage::Generate,
                    "checkpoints",
                    None,
                    &self.manifest.checkpoints.clone(),
                )?
                .join("model")
            }
        };
        if !model_dir.join("style.json").exists() {
            return Err(stage_error(
                Stage::Generate,
                format!("model checkpoint in {}", model_dir.display()),
            ));
        }
        let dataset = self.input(
            Stage::Generate,
            "evaluation dataset",
            dataset,
            &self.manifest.test.clone(),
        )?;
        let (_, corpus) = self.load_corpus(Stage::Generate, None)?;
        let vanilla = PointerLm::load(&model_dir, "vanilla")?.with_lexicon(self.lexicon.clone());
        let style = PointerLm::load(&model_dir, "style")?.with_lexicon(self.lexicon.clone());
        let params = RetrieverParams::load(&model_dir, "retriever")?;
        let index = build_index(&corpus, &params)?;
        let mut cfg = self.config.clone();
        if let Some(n) = n {
            if n == 0 {
                return Err(Error::Validation("N must be positive".into()));
            }
            cfg.outputs_n = n;
        }
        let samples = read_dataset(&dataset)?;
        let tagger = RuleTagger::new(self.lexicon.clone());
        let run = generate_top_n(
            &vanilla,
            &style,
            &index,
            &params,
            &samples,
            &cfg,
            &tagger,
            &self.lexicon,
        )?;
        let out = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.dir.join("generations.jsonl"));
        write_generations(&out, &run.records)?;
        if self.manifest.test.is_none() {
            self.manifest.test = Some(self.relative(&dataset));
        }
        self.manifest.generations = Some(self.relative(&out));
        self.manifest.mark(Stage::Generate);
        self.manifest.invalidate_from(Stage::Evaluate);
        self.save()?;
        Ok(run)
    }

    /// Scores a generation dump against its dataset with the synthetic oracle.
    pub fn evaluate(
        &mut self,
        outputs: Option<&Path>,
        dataset: Option<&Path>,
        out: Option<&Path>,
    ) -> Result<MetricReport> {
        let outputs = self.input(
            Stage::Evaluate,
            "generation dump",
            outputs,
            &self.manifest.generations.clone(),
        )?;
        let dataset = self.input(
            Stage::Evaluate,
            "evaluation dataset",
            dataset,
            &self.manifest.test.clone(),
        )?;
        let records = read_generations(&outputs)?;
        let samples = read_dataset(&dataset)?;
        let qa = SyntheticOracle::new(self.config.qa_epsilon);
        let report = evaluate_records(&records, &samples, &qa)?;
        let out = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.dir.join("report.json"));
        write_json(&out, &report)?;
        self.manifest.report = Some(self.relative(&out));
        self.manifest.mark(Stage::Evaluate);
        self.save()?;
        Ok(report)
    }
}

/// `target` relative to `base` when both share a prefix, else `target`.
fn pathdiff(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return target.to_path_buf();
    }
    let mut p = PathBuf::new();
    for _ in common..b.len() {
        p.push("..");
    }
    for c in &t[common..] {
        p.push(c);
    }
    p
}
