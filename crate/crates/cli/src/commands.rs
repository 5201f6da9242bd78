//! Every subcommand except `serve`. Output goes to the writer handed in.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ovis_core::encoder::{EncoderConfig, ModelParams};
use ovis_core::eval::{error_analysis, map_and_precision, Detection, EvalConfig, GroundTruthSet};
use ovis_core::formats;
use ovis_core::index::{self, SearchIndex};
use ovis_core::store::{self, validate_corpus, CorpusManifest, InstanceStore};
use ovis_core::synth::{self, generate, SynthConfig};
use ovis_core::training::{train, AdamWConfig, MetricsLog, TrainConfig};
use ovis_core::Vocabulary;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::api::{fingerprint_hex, SearchResponse};
use crate::args::{
    AnalyzeArgs, BuildIndexArgs, Command, EvalArgs, GenSynthArgs, SearchArgs, Split, TrainArgs, ValidateArgs,
};
use crate::error::{data, runtime, CommandError};
use crate::{images_sidecar, vocab_sidecar};

/// Runs a non-serving subcommand.
pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CommandError> {
    match command {
        Command::GenSynth(a) => gen_synth(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::BuildIndex(a) => build_index(&a, out),
        Command::Search(a) => search(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::AnalyzeErrors(a) => analyze_errors(&a, out),
        Command::Validate(a) => validate(&a, out),
        Command::Serve(_) => Err(CommandError::Usage("serve is handled by the binary".into())),
    }
}

fn emit(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<(), CommandError> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(runtime("writing output"))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => { emit($out, format_args!($($arg)*)) };
}

fn gen_synth(a: &GenSynthArgs, out: &mut dyn Write) -> Result<(), CommandError> {
    let cfg = SynthConfig {
        concepts: a.concepts,
        feature_dim: a.feature_dim,
        train_images: a.train_images,
        heldout_images: a.heldout_images,
        noise: a.noise,
        label_fraction: a.label_fraction,
        labelled_concepts: a.labelled_concepts,
        clutter_fraction: a.clutter,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CommandError::Usage(e.to_string()))?;
    let corpus = generate(&cfg).map_err(runtime("generating corpus"))?;
    corpus.write(&a.out).map_err(runtime(a.out.display()))?;
    say!(
        out,
        "wrote {}: {} training images ({} instances), {} held-out images ({} instances), {} ground-truth queries",
        a.out.display(),
        corpus.train.num_images(),
        corpus.train.num_instances(),
        corpus.heldout.num_images(),
        corpus.heldout.num_instances(),
        corpus.ground_truth.len()
    )
}

struct Corpus {
    dir: std::path::PathBuf,
    manifest: CorpusManifest,
}

impl Corpus {
    fn open(dir: &Path) -> Result<Self, CommandError> {
        let path = dir.join(synth::MANIFEST_FILE);
        let manifest = CorpusManifest::load(&path).map_err(data(path.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn path(&self, role: &str) -> Result<std::path::PathBuf, CommandError> {
        self.manifest
            .resolve(&self.dir, role)
            .ok_or_else(|| CommandError::Data(format!("manifest in {} has no {role} entry", self.dir.display())))
    }

    fn vocab(&self) -> Result<Vocabulary, CommandError> {
        let p = self.path(store::ROLE_VOCAB)?;
        Vocabulary::load(&p).map_err(data(p.display()))
    }

    fn store(&self, split: Split) -> Result<InstanceStore, CommandError> {
        let (meta, feats) = match split {
            Split::Train => (store::ROLE_TRAIN_META, store::ROLE_TRAIN_FEATURES),
            Split::Heldout => (store::ROLE_HELDOUT_META, store::ROLE_HELDOUT_FEATURES),
        };
        let (meta, feats) = (self.path(meta)?, self.path(feats)?);
        store::load_store(&meta, &feats).map_err(data(meta.display()))
    }
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CommandError> {
    let corpus = Corpus::open(&a.corpus)?;
    let vocab = corpus.vocab()?;
    let store = corpus.store(Split::Train)?;
    let examples = store.training_examples::<f32>(&vocab).map_err(data("training split"))?;
    if examples.is_empty() {
        return Err(CommandError::Data("training split has no images".into()));
    }
    let cfg = EncoderConfig {
        layers: a.layers,
        hidden: a.hidden,
        heads: a.heads,
        ffn_dim: a.ffn_dim,
        ..EncoderConfig::desk(vocab.len(), store.feature_dim())
    };
    cfg.validate().map_err(|e| CommandError::Usage(e.to_string()))?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..AdamWConfig::desk()
        },
        objective: a.objective.into(),
        seed: a.seed,
        ..TrainConfig::desk()
    };
    let mut params = ModelParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(a.model_seed))
        .map_err(|e| CommandError::Usage(e.to_string()))?;
    let mut metrics = match &a.metrics {
        Some(p) => {
            let f = fs::File::create(p).map_err(runtime(p.display()))?;
            Some(MetricsLog::new(BufWriter::new(f)).map_err(runtime(p.display()))?)
        }
        None => None,
    };
    let mut io_error = None;
    let report = train(&mut params, &examples, &tc, vocab.mask_id(), |r| {
        if let Some(m) = metrics.as_mut() {
            if let Err(e) = m.record(r) {
                io_error.get_or_insert(e);
            }
        }
    })
    .map_err(runtime("training"))?;
    if let Some(e) = io_error {
        return Err(CommandError::Runtime(format!("writing metrics: {e}")));
    }
    if let Some(m) = metrics {
        m.into_inner().flush().map_err(runtime("writing metrics"))?;
    }
    if !params.is_finite() {
        return Err(CommandError::Runtime(
            "training diverged to non-finite parameters".into(),
        ));
    }
    let fp = formats::save_checkpoint(&a.out, &params).map_err(runtime(a.out.display()))?;
    let first = report.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    say!(
        out,
        "trained {} epochs ({} steps) on {} images: loss {first:.4} -> {last:.4}; checkpoint {} fingerprint {}",
        a.epochs,
        report.steps,
        examples.len(),
        a.out.display(),
        fingerprint_hex(fp)
    )
}

fn build_index(a: &BuildIndexArgs, out: &mut dyn Write) -> Result<(), CommandError> {
    let (params, fp) = formats::load_checkpoint::<f32>(&a.checkpoint).map_err(data(a.checkpoint.display()))?;
    let corpus = Corpus::open(&a.corpus)?;
    let vocab = corpus.vocab()?;
    if params.config.vocab_size != vocab.len() {
        return Err(CommandError::Data(format!(
            "checkpoint was trained with {} tokens, corpus vocabulary has {}",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    let store = corpus.store(a.split)?;
    let idx = SearchIndex::build(&store, &params, a.measure, fp).map_err(data("building index"))?;
    idx.save(&a.out).map_err(runtime(a.out.display()))?;
    let vp = vocab_sidecar(&a.out);
    vocab.save(&vp).map_err(runtime(vp.display()))?;
    let ip = images_sidecar(&a.out);
    let mut meta = Vec::new();
    store.write_metadata(&mut meta).map_err(runtime(ip.display()))?;
    fs::write(&ip, meta).map_err(runtime(ip.display()))?;
    say!(
        out,
        "indexed {} instances x {} tokens ({}), fingerprint {} -> {}",
        idx.len(),
        idx.vocab_size(),
        idx.measure(),
        fingerprint_hex(fp),
        a.out.display()
    )
}

/// Index plus its vocabulary, optionally pinned to a checkpoint.
pub fn open_index(
    index_path: &Path,
    vocab: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<(SearchIndex, Vocabulary), CommandError> {
    let idx = match checkpoint {
        Some(c) => {
            let fp = index::checkpoint_fingerprint_of(c).map_err(data(c.display()))?;
            index::load_verified(index_path, fp)
        }
        None => SearchIndex::load(index_path),
    }
    .map_err(data(index_path.display()))?;
    let vp = vocab
        .map(Path::to_path_buf)
        .unwrap_or_else(|| vocab_sidecar(index_path));
    let vocab = Vocabulary::load(&vp).map_err(data(vp.display()))?;
    if vocab.len() != idx.vocab_size() {
        return Err(CommandError::Data(format!(
            "{} has {} tokens but the index expects {}",
            vp.display(),
            vocab.len(),
            idx.vocab_size()
        )));
    }
    Ok((idx, vocab))
}

/// Queries from plain lines or JSON lines carrying a "query" field, first
/// occurrence order, duplicates dropped.
pub fn read_queries(path: &Path) -> Result<Vec<String>, CommandError> {
    #[derive(Deserialize)]
    struct Line {
        query: String,
    }
    let f = fs::File::open(path).map_err(data(path.display()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(data(path.display()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let q = if line.starts_with('{') {
            serde_json::from_str::<Line>(line)
                .map_err(data(format!("{} line {}", path.display(), i + 1)))?
                .query
        } else {
            line.to_string()
        };
        if seen.insert(q.clone()) {
            out.push(q);
        }
    }
    Ok(out)
}

fn search(a: &SearchArgs, out: &mut dyn Write) -> Result<(), CommandError> {
    let (idx, vocab) = open_index(&a.index, a.vocab.as_deref(), a.checkpoint.as_deref())?;
    let run = |q: &str| -> Result<SearchResponse, CommandError> {
        if q.trim().is_empty() {
            return Err(CommandError::Usage("query must not be empty".into()));
        }
        let r = idx.score_query(&vocab, q, a.k).map_err(data(format!("query {q:?}")))?;
        Ok(SearchResponse::new(&r, idx.measure()))
    };
    if let Some(qf) = &a.queries {
        let queries = read_queries(qf)?;
        let mut file;
        let sink: &mut dyn Write = match &a.out {
            Some(p) => {
                file = BufWriter::new(fs::File::create(p).map_err(runtime(p.display()))?);
                &mut file
            }
            None => out,
        };
        for q in &queries {
            let line = serde_json::to_string(&run(q)?).map_err(runtime("serialising results"))?;
            emit(sink, format_args!("{line}"))?;
        }
        sink.flush().map_err(runtime("writing results"))?;
        if a.out.is_some() {
            log::info!("ran {} queries", queries.len());
        }
        return Ok(());
    }
    let q = a.q.as_deref().unwrap_or_default();
    let res = run(q)?;
    if a.json {
        let line = serde_json::to_string(&res).map_err(runtime("serialising results"))?;
        return say!(out, "{line}");
    }
    if res.unk_flag {
        eprintln!("note: query contains unknown words; tokens: {}", res.tokens.join(" "));
    }
    if res.truncated {
        eprintln!("note: only {} instances in the index", res.hits.len());
    }
    for h in &res.hits {
        let b = h.bbox;
        say!(
            out,
            "{:>4}  {:>10.6}  {:>8}  [{}, {}, {}, {}]",
            h.rank,
            h.score,
            h.image_id,
            b.x,
            b.y,
            b.w,
            b.h
        )?;
    }
    Ok(())
}

/// Results JSON lines in rank order: `{"query", "hits": [{"image_id", "box"}, ...]}`.
/// Extra fields, such as the rest of a search response, are ignored.
pub fn read_results(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>, CommandError> {
    #[derive(Deserialize)]
    struct Line {
        query: String,
        #[serde(default)]
        hits: Vec<Detection>,
    }
    let f = fs::File::open(path).map_err(data(path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(data(path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let where_ = format!("{} line {}", path.display(), i + 1);
        let parsed: Line = serde_json::from_str(&line).map_err(data(&where_))?;
        if out.insert(parsed.query.clone(), parsed.hits).is_some() {
            return Err(CommandError::Data(format!(
                "{where_}: query {:?} appears twice",
                parsed.query
            )));
        }
    }
    Ok(out)
}

fn read_gt(path: &Path) -> Result<GroundTruthSet, CommandError> {
    let f = fs::File::open(path).map_err(data(path.display()))?;
    GroundTruthSet::read_jsonl(BufReader::new(f)).map_err(data(path.display()))
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CommandError> {
    let gt = read_gt(&a.gt)?;
    let results = read_results(&a.results)?;
    let cfg = EvalConfig {
        iou_thresholds: a.thresholds.clone(),
        ..EvalConfig::new(a.k)
    };
    let report = map_and_precision(&results, &gt, &cfg).map_err(data("evaluating"))?;
    if let Some(p) = &a.csv {
        let f = fs::File::create(p).map_err(runtime(p.display()))?;
        let mut w = BufWriter::new(f);
        report
            .write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(runtime(p.display()))?;
    }
    if a.json {
        let text = serde_json::to_string_pretty(&report).map_err(runtime("serialising report"))?;
        return say!(out, "{text}");
    }
    say!(out, "queries {}  k {}", report.per_query.len(), report.k)?;
    if !report.zero_gt_queries.is_empty() {
        say!(
            out,
            "queries without positives (AP 0): {}",
            report.zero_gt_queries.len()
        )?;
    }
    say!(out, "IoU    mAP@k   prec@k")?;
    for t in &report.per_threshold {
        say!(
            out,
            "{:<5}  {:>5.1}   {:>5.1}",
            t.threshold,
            100.0 * t.map,
            100.0 * t.precision
        )?;
    }
    say!(out, "mAP_all {:.1}", 100.0 * report.map_all)?;
    say!(out, "prec_all {:.1}", 100.0 * report.prec_all)
}

fn analyze_errors(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<(), CommandError> {
    let gt = read_gt(&a.gt)?;
    let results = read_results(&a.results)?;
    if let Some(q) = results.keys().find(|q| gt.get(q).is_none()) {
        return Err(CommandError::Data(format!(
            "results contain query {q:?} absent from ground truth"
        )));
    }
    if !(a.low_iou < a.threshold) {
        return Err(CommandError::Usage("--low-iou must be below --threshold".into()));
    }
    let mut sum = [0.0f64; 4];
    let mut n = 0usize;
    if !a.json {
        say!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>7}",
            "query",
            "AP",
            "E_ord",
            "E_iou",
            "E_bg"
        )?;
    }
    for (query, regions) in gt.queries() {
        let hits = results.get(query).map(Vec::as_slice).unwrap_or(&[]);
        let b = error_analysis(hits, regions, a.threshold, a.k, a.low_iou);
        if a.json {
            let line = serde_json::json!({
                "query": query, "ap": b.ap, "e_ord": b.e_ord, "e_iou": b.e_iou, "e_bg": b.e_bg,
            });
            say!(out, "{line}")?;
        } else {
            say!(
                out,
                "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                query,
                b.ap,
                b.e_ord,
                b.e_iou,
                b.e_bg
            )?;
        }
        for (s, v) in sum.iter_mut().zip([b.ap, b.e_ord, b.e_iou, b.e_bg]) {
            *s += v;
        }
        n += 1;
    }
    if !a.json && n > 0 {
        let m = sum.map(|s| s / n as f64);
        say!(
            out,
            "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            "(mean)",
            m[0],
            m[1],
            m[2],
            m[3]
        )?;
    }
    Ok(())
}

fn validate(a: &ValidateArgs, out: &mut dyn Write) -> Result<(), CommandError> {
    let path = a.corpus.join(synth::MANIFEST_FILE);
    let report = validate_corpus(&path).map_err(data(path.display()))?;
    for w in &report.warnings {
        say!(out, "warning: {w}")?;
    }
    for e in &report.errors {
        say!(out, "error: {e}")?;
    }
    if report.is_ok() {
        say!(out, "ok: {} warnings", report.warnings.len())
    } else {
        Err(CommandError::Data(format!("{} validation errors", report.errors.len())))
    }
}
