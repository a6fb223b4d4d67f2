use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phenocompose::annotate::{
    annotate_documents, calibrate_thresholds, check_percentile, write_alpha_table, Aggregation, AnnotateOptions,
    ThresholdSet, DEFAULT_PERCENTILE,
};
use phenocompose::corpus::synthetic::{self, SyntheticConfig};
use phenocompose::corpus::{
    build_vocabulary, fragment_document, load_jsonl, load_mimic, ontology_documents, split_train_test, write_jsonl,
    Document, Fragment, Vocabulary, DEFAULT_VOCAB_CAP,
};
use phenocompose::eval::{corpus_stats, evaluate};
use phenocompose::manifest::RunManifest;
use phenocompose::model::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use phenocompose::ontology::{categories_with_closure, load_ontology, write_obo, write_snapshot, Ontology, PhenotypeCategories, PHENOTYPIC_ABNORMALITY};
use phenocompose::silver::{
    compose_mapping, labels_to_records, random_annotate, read_icd_to_omim, read_label_records, read_omim_to_hpo,
    records_to_labels, silver_labels, write_label_records, write_pairs, KeywordMatcher, LabelRecord,
};
use phenocompose::training::{train_with, write_loss_row, write_timing_log, Pools, TrainConfig, LOSS_LOG_HEADER};

const TRAIN_FILE: &str = "train.jsonl";
const TEST_FILE: &str = "test.jsonl";
const VOCAB_FILE: &str = "vocab.txt";
const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
const THRESHOLD_FILE: &str = "thresholds.tsv";

#[derive(Parser)]
#[command(name = "phenocompose", version, about = "Unsupervised phenotype-category annotation of clinical notes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to runs/<manifest hash>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct OntologyArgs {
    /// OBO file or snapshot written by parse-ontology.
    #[arg(long)]
    ontology: PathBuf,
    /// Parent of the general categories.
    #[arg(long, default_value = PHENOTYPIC_ABNORMALITY)]
    root: String,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an ontology, select the general categories and close them.
    ParseOntology {
        #[command(flatten)]
        ontology: OntologyArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Load notes, split them and build the vocabulary.
    BuildCorpus {
        #[command(flatten)]
        ontology: OntologyArgs,
        /// JSONL notes ({doc_id, text, icd9}).
        #[arg(long, conflicts_with_all = ["mimic_notes", "mimic_diagnoses"])]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "mimic_diagnoses")]
        mimic_notes: Option<PathBuf>,
        #[arg(long, requires = "mimic_notes")]
        mimic_diagnoses: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        train_ratio: f64,
        #[arg(long, default_value_t = DEFAULT_VOCAB_CAP)]
        vocab_cap: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a synthetic ontology, notes, ground truth and mapping tables.
    GenSynthetic {
        /// TOML generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        notes: Option<usize>,
        #[arg(long)]
        categories: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the encoder, generator and latent classifier.
    Train {
        /// TOML training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        ontology: OntologyArgs,
        /// Corpus directory written by build-corpus.
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Calibrate per-category thresholds on training fragments.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory or JSONL file of calibration notes.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
        percentile: f64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Annotate notes with the trained model and calibrated thresholds.
    Annotate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Corpus directory (its test split) or JSONL file.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, value_enum, default_value_t = Aggregation::Union)]
        aggregation: Aggregation,
        /// Also write the per-fragment alpha table.
        #[arg(long)]
        keep_alpha: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Build silver labels and the keyword and random baselines.
    BuildSilver {
        #[command(flatten)]
        ontology: OntologyArgs,
        /// Corpus directory (all splits) or JSONL file.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mapping_icd_omim: PathBuf,
        #[arg(long)]
        mapping_omim_hpo: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        random_rate: f64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score predictions against silver labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        silver: PathBuf,
        /// Lifts specific term ids in predictions to their categories.
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long, default_value = PHENOTYPIC_ABNORMALITY)]
        root: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Corpus statistics: codes and keyword-matched terms per note.
    Stats {
        #[command(flatten)]
        ontology: OntologyArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Collects a manifest and resolves the run directory once inputs are known.
struct Run {
    manifest: RunManifest,
    out: Option<PathBuf>,
    dir: Option<PathBuf>,
}

impl Run {
    fn new(command: &str, args: &RunArgs, config: serde_json::Value) -> Self {
        Self { manifest: RunManifest::new(command, args.seed, config), out: args.out.clone(), dir: None }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        if !path.exists() {
            bail!("missing {role}: {} does not exist", path.display());
        }
        self.manifest.add_input(role, path).with_context(|| format!("reading {}", path.display()))
    }

    fn dir(&mut self) -> Result<PathBuf> {
        if self.dir.is_none() {
            let dir = match &self.out {
                Some(d) => d.clone(),
                None => PathBuf::from("runs").join(&self.manifest.identity_hash()[..16]),
            };
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            self.dir = Some(dir);
        }
        Ok(self.dir.clone().expect("set above"))
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir()?.join(name);
        self.manifest.add_artifact(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }

    fn finish(mut self) -> Result<PathBuf> {
        let dir = self.dir()?;
        self.manifest.write(&dir)?;
        println!("artifacts in {}", dir.display());
        Ok(dir)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn load_categories(args: &OntologyArgs) -> Result<(Ontology, PhenotypeCategories)> {
    let ont = load_ontology(&args.ontology).with_context(|| format!("loading ontology {}", args.ontology.display()))?;
    let cats = categories_with_closure(&ont, &args.root)?;
    Ok((ont, cats))
}

fn read_notes(path: &Path) -> Result<Vec<Document>> {
    Ok(load_jsonl(open(path)?, &path.display().to_string())?.0)
}

/// A directory stands for the listed split files inside it.
fn corpus_files(path: &Path, names: &[&str]) -> Vec<PathBuf> {
    if path.is_dir() {
        names.iter().map(|n| path.join(n)).collect()
    } else {
        vec![path.to_path_buf()]
    }
}

fn read_corpus(path: &Path, names: &[&str]) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for f in corpus_files(path, names) {
        if !f.exists() {
            bail!("missing corpus file {}", f.display());
        }
        docs.extend(read_notes(&f)?);
    }
    Ok(docs)
}

fn load_model(run: &mut Run, checkpoint: &Path) -> Result<(Checkpoint, Vocabulary)> {
    run.input("checkpoint", checkpoint)?;
    let vocab_path = checkpoint.with_file_name(VOCAB_FILE);
    run.input("vocabulary", &vocab_path)?;
    let vocab = Vocabulary::read(open(&vocab_path)?)?;
    let ckpt = load_checkpoint(checkpoint, Some(&vocab.hash()))?;
    Ok((ckpt, vocab))
}

fn fragments_of(docs: &[Document], vocab: &Vocabulary, window: usize) -> Vec<(String, Vec<Fragment>)> {
    docs.iter().map(|d| (d.doc_id.clone(), fragment_document(d, vocab, window))).collect()
}

fn labels_to_file(
    run: &mut Run,
    name: &str,
    labels: &BTreeMap<String, BTreeSet<usize>>,
    cats: &PhenotypeCategories,
) -> Result<()> {
    let mut w = run.create(name)?;
    write_label_records(&labels_to_records(labels, cats), &mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_ontology(ontology: OntologyArgs, args: RunArgs) -> Result<()> {
    let mut run = Run::new("parse-ontology", &args, serde_json::json!({ "root": ontology.root }));
    run.input("ontology", &ontology.ontology)?;
    let (ont, cats) = load_categories(&ontology)?;
    let mut w = run.create("ontology.snapshot")?;
    write_snapshot(ont.terms(), &mut w)?;
    w.flush()?;
    let mut w = run.create("categories.tsv")?;
    writeln!(w, "index\tid\tname\tsubclasses")?;
    for (j, id) in cats.categories.iter().enumerate() {
        let n = cats.subclasses().filter(|(_, m)| m.contains(&j)).count();
        let name = ont.get(id).map_or("", |t| t.name.as_str());
        writeln!(w, "{j}\t{id}\t{name}\t{n}")?;
    }
    w.flush()?;
    let mut w = run.create("closure.tsv")?;
    for (id, members) in &cats.closure {
        writeln!(w, "{id}\t{}", cats.category_ids(members).join(","))?;
    }
    w.flush()?;
    println!("{} terms, {} categories, {} subclasses", ont.len(), cats.len(), cats.subclass_count());
    run.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_corpus(
    ontology: OntologyArgs,
    corpus: Option<PathBuf>,
    mimic_notes: Option<PathBuf>,
    mimic_diagnoses: Option<PathBuf>,
    train_ratio: f64,
    vocab_cap: usize,
    args: RunArgs,
) -> Result<()> {
    let seed = args.seed.unwrap_or(0);
    let mut run = Run::new(
        "build-corpus",
        &args,
        serde_json::json!({ "root": ontology.root, "train_ratio": train_ratio, "vocab_cap": vocab_cap }),
    );
    run.input("ontology", &ontology.ontology)?;
    let (docs, report) = match (corpus, mimic_notes, mimic_diagnoses) {
        (Some(c), _, _) => {
            run.input("corpus", &c)?;
            load_jsonl(open(&c)?, &c.display().to_string())?
        }
        (None, Some(n), Some(d)) => {
            run.input("mimic_notes", &n)?;
            run.input("mimic_diagnoses", &d)?;
            load_mimic(&n, &d)?
        }
        _ => bail!("give either --corpus or both --mimic-notes and --mimic-diagnoses"),
    };
    let (ont, cats) = load_categories(&ontology)?;
    let (train, test) = split_train_test(&docs, train_ratio, seed)?;
    let mut vocab_docs = train.clone();
    vocab_docs.extend(ontology_documents(&ont, &cats));
    let vocab = build_vocabulary(&vocab_docs, vocab_cap);
    for (name, part) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        let mut w = run.create(name)?;
        write_jsonl(part, &mut w)?;
        w.flush()?;
    }
    let mut w = run.create(VOCAB_FILE)?;
    vocab.write(&mut w)?;
    w.flush()?;
    println!(
        "{} documents ({} train, {} test), {} ICD codes ({} supplementary), vocabulary {}",
        report.documents,
        train.len(),
        test.len(),
        report.icd_codes,
        report.supplementary_codes,
        vocab.len()
    );
    run.finish()?;
    Ok(())
}

fn gen_synthetic(config: Option<PathBuf>, notes: Option<usize>, categories: Option<usize>, args: RunArgs) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => toml::from_str::<SyntheticConfig>(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = notes {
        cfg.notes = n;
    }
    if let Some(m) = categories {
        cfg.categories = m;
    }
    let mut run = Run::new("gen-synthetic", &args, serde_json::to_value(&cfg)?);
    if let Some(p) = &config {
        run.input("config", p)?;
    }
    let syn = synthetic::generate(&cfg);
    let mut w = run.create("ontology.obo")?;
    write_obo(&syn.terms, &mut w)?;
    w.flush()?;
    let mut w = run.create("notes.jsonl")?;
    write_jsonl(&syn.notes, &mut w)?;
    w.flush()?;
    let truth: Vec<LabelRecord> = syn
        .notes
        .iter()
        .map(|n| LabelRecord { doc_id: n.doc_id.clone(), categories: syn.truth_ids(&n.doc_id), alpha_path: None })
        .collect();
    let mut w = run.create("truth.jsonl")?;
    write_label_records(&truth, &mut w)?;
    w.flush()?;
    let mut w = run.create("mentions.jsonl")?;
    for (doc_id, mentions) in &syn.mentions {
        serde_json::to_writer(&mut w, &serde_json::json!({ "doc_id": doc_id, "mentions": mentions }))?;
        writeln!(w)?;
    }
    w.flush()?;
    let mut w = run.create("icd_omim.tsv")?;
    write_pairs(&syn.icd_to_omim, &mut w)?;
    w.flush()?;
    let mut w = run.create("omim_hpo.tsv")?;
    write_pairs(&syn.omim_to_hpo, &mut w)?;
    w.flush()?;
    println!("{} notes over {} categories, {} terms", syn.notes.len(), syn.category_ids.len(), syn.terms.len());
    run.finish()?;
    Ok(())
}

fn train_cmd(config: Option<PathBuf>, ontology: OntologyArgs, corpus: PathBuf, args: RunArgs) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let mut run = Run::new("train", &args, serde_json::to_value(&cfg)?);
    if let Some(p) = &config {
        run.input("config", p)?;
    }
    run.input("ontology", &ontology.ontology)?;
    let train_path = corpus.join(TRAIN_FILE);
    let vocab_path = corpus.join(VOCAB_FILE);
    run.input("corpus", &train_path)?;
    run.input("vocabulary", &vocab_path)?;
    let (ont, cats) = load_categories(&ontology)?;
    let vocab = Vocabulary::read(open(&vocab_path)?)?;
    let mut docs = read_notes(&train_path)?;
    docs.extend(ontology_documents(&ont, &cats));
    let model_config = cfg.model.build(vocab.len(), cats.len());
    let pools = Pools::from_documents(&docs, &vocab, model_config.window);
    let mut model = Model::new(model_config, cfg.seed)?;
    log::info!("pools (ehr, category, subclass) = {:?}; {} parameters", pools.sizes(), model.params.num_parameters());

    let mut w = run.create("config.toml")?;
    w.write_all(cfg.to_toml().as_bytes())?;
    w.flush()?;
    let mut log_file = run.create("loss_log.tsv")?;
    writeln!(log_file, "{LOSS_LOG_HEADER}")?;
    let mut io_error = None;
    let report = train_with(&mut model, &pools, &cfg, |row, elapsed, _| {
        if let Err(e) = write_loss_row(row, &mut log_file) {
            io_error.get_or_insert(e);
        }
        if row.step % 100 == 0 {
            log::info!("{row} ({:.1}s)", elapsed.as_secs_f64());
        }
    });
    log_file.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let report = report?;
    let mut w = run.create("timing.tsv")?;
    write_timing_log(&report, &mut w)?;
    w.flush()?;
    let dir = run.dir()?;
    let ckpt = Checkpoint {
        model,
        vocab_hash: vocab.hash(),
        seed: cfg.seed,
        category_ids: cats.categories.clone(),
        steps: report.steps(),
    };
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    run.manifest.add_artifact(CHECKPOINT_FILE);
    let mut w = run.create(VOCAB_FILE)?;
    vocab.write(&mut w)?;
    w.flush()?;
    let last = report.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("{} steps, final combined loss {last:.4}, converged: {}", report.steps(), report.converged);
    run.finish()?;
    Ok(())
}

fn calibrate_cmd(checkpoint: PathBuf, corpus: PathBuf, percentile: f64, args: RunArgs) -> Result<()> {
    check_percentile(percentile)?;
    let mut run = Run::new("calibrate", &args, serde_json::json!({ "percentile": percentile }));
    let (ckpt, vocab) = load_model(&mut run, &checkpoint)?;
    run.input("corpus", &corpus)?;
    let docs = read_corpus(&corpus, &[TRAIN_FILE])?;
    let frags: Vec<Fragment> =
        docs.iter().flat_map(|d| fragment_document(d, &vocab, ckpt.model.config.window)).collect();
    let t = calibrate_thresholds(&ckpt.model, &frags, percentile, &ckpt.category_ids, 64)?;
    let mut w = run.create(THRESHOLD_FILE)?;
    t.write(&mut w)?;
    w.flush()?;
    println!("calibrated {} thresholds at the {percentile}th percentile over {} fragments", t.len(), frags.len());
    run.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn annotate_cmd(
    checkpoint: Option<PathBuf>,
    thresholds: Option<PathBuf>,
    corpus: PathBuf,
    workers: usize,
    aggregation: Aggregation,
    keep_alpha: bool,
    args: RunArgs,
) -> Result<()> {
    let checkpoint = checkpoint.context("missing checkpoint: pass --checkpoint")?;
    let thresholds = thresholds.context("missing thresholds: pass --thresholds")?;
    let mut run = Run::new(
        "annotate",
        &args,
        serde_json::json!({ "aggregation": aggregation, "keep_alpha": keep_alpha }),
    );
    let (ckpt, vocab) = load_model(&mut run, &checkpoint)?;
    run.input("thresholds", &thresholds)?;
    run.input("corpus", &corpus)?;
    let t = ThresholdSet::read(open(&thresholds)?)?;
    if t.category_ids != ckpt.category_ids {
        bail!("thresholds in {} were calibrated for different categories than the checkpoint", thresholds.display());
    }
    let docs = read_corpus(&corpus, &[TEST_FILE])?;
    let frags = fragments_of(&docs, &vocab, ckpt.model.config.window);
    let options = AnnotateOptions { strategy: aggregation, keep_alpha, ..Default::default() };
    let results = annotate_documents(&ckpt.model, &frags, &t, &options, workers.max(1))?;
    let alpha_name = "alpha.tsv";
    let records: Vec<LabelRecord> = results
        .iter()
        .map(|r| LabelRecord {
            doc_id: r.doc_id.clone(),
            categories: r.categories.iter().map(|&j| t.category_ids[j].clone()).collect(),
            alpha_path: keep_alpha.then(|| alpha_name.to_string()),
        })
        .collect();
    let mut w = run.create("annotations.jsonl")?;
    write_label_records(&records, &mut w)?;
    w.flush()?;
    if keep_alpha {
        let mut w = run.create(alpha_name)?;
        write_alpha_table(&results, &t.category_ids, &mut w)?;
        w.flush()?;
    }
    let labeled = results.iter().filter(|r| !r.categories.is_empty()).count();
    println!("annotated {} documents ({labeled} with at least one category)", results.len());
    run.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_silver(
    ontology: OntologyArgs,
    corpus: PathBuf,
    mapping_icd_omim: PathBuf,
    mapping_omim_hpo: PathBuf,
    random_rate: f64,
    args: RunArgs,
) -> Result<()> {
    let mut run = Run::new(
        "build-silver",
        &args,
        serde_json::json!({ "root": ontology.root, "random_rate": random_rate }),
    );
    run.input("ontology", &ontology.ontology)?;
    run.input("corpus", &corpus)?;
    run.input("mapping_icd_omim", &mapping_icd_omim)?;
    run.input("mapping_omim_hpo", &mapping_omim_hpo)?;
    let (ont, cats) = load_categories(&ontology)?;
    let docs = read_corpus(&corpus, &[TRAIN_FILE, TEST_FILE])?;
    let icd = read_icd_to_omim(open(&mapping_icd_omim)?, &mapping_icd_omim.display().to_string())?;
    let omim = read_omim_to_hpo(open(&mapping_omim_hpo)?, &mapping_omim_hpo.display().to_string())?;
    let table = compose_mapping(icd, omim, Some(&ont), &cats);
    let silver = silver_labels(&docs, &table);
    labels_to_file(&mut run, "silver.jsonl", &silver.labels, &cats)?;

    let matcher = KeywordMatcher::new(&ont, &cats);
    let keyword: BTreeMap<String, BTreeSet<usize>> =
        docs.iter().map(|d| (d.doc_id.clone(), matcher.annotate(&d.text))).collect();
    labels_to_file(&mut run, "keyword.jsonl", &keyword, &cats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(0));
    let random: BTreeMap<String, BTreeSet<usize>> =
        docs.iter().map(|d| (d.doc_id.clone(), random_annotate(cats.len(), &mut rng, random_rate))).collect();
    labels_to_file(&mut run, "random.jsonl", &random, &cats)?;

    let mut w = run.create("warnings.txt")?;
    for msg in &table.warnings {
        writeln!(w, "{msg}")?;
    }
    for code in table.unmapped_codes() {
        writeln!(w, "ICD code {code} maps to no category")?;
    }
    w.flush()?;
    println!(
        "{} documents, {} covered by the mapping, {} with empty silver labels, {} warnings",
        docs.len(),
        silver.covered,
        silver.empty,
        table.warnings.len()
    );
    run.finish()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<LabelRecord>> {
    Ok(read_label_records(open(path)?, &path.display().to_string())?)
}

fn evaluate_cmd(predictions: PathBuf, silver: PathBuf, ontology: Option<PathBuf>, root: String, args: RunArgs) -> Result<()> {
    let mut run = Run::new("evaluate", &args, serde_json::json!({ "root": root, "lift": ontology.is_some() }));
    run.input("predictions", &predictions)?;
    run.input("silver", &silver)?;
    let pred_records = read_records(&predictions)?;
    let silver_records = read_records(&silver)?;
    let (preds, gold) = match &ontology {
        Some(path) => {
            run.input("ontology", path)?;
            let (_, cats) = load_categories(&OntologyArgs { ontology: path.clone(), root: root.clone() })?;
            let lift = |records: &[LabelRecord]| -> BTreeMap<String, BTreeSet<usize>> {
                records
                    .iter()
                    .map(|r| {
                        let set = r.categories.iter().flat_map(|id| cats.membership(id).into_iter().flatten().copied()).collect();
                        (r.doc_id.clone(), set)
                    })
                    .collect()
            };
            (lift(&pred_records), lift(&silver_records))
        }
        None => {
            let ids: BTreeSet<String> =
                pred_records.iter().chain(&silver_records).flat_map(|r| r.categories.iter().cloned()).collect();
            let cats = PhenotypeCategories {
                root_id: root.clone(),
                categories: ids.into_iter().collect(),
                closure: BTreeMap::new(),
            };
            (records_to_labels(&pred_records, &cats).0, records_to_labels(&silver_records, &cats).0)
        }
    };
    let report = evaluate(&preds, &gold);
    let mut w = run.create("report.tsv")?;
    report.write_tsv(&mut w)?;
    w.flush()?;
    let mut w = run.create("summary.txt")?;
    writeln!(w, "{report}")?;
    w.flush()?;
    println!("{report}");
    run.finish()?;
    Ok(())
}

fn stats_cmd(ontology: OntologyArgs, corpus: PathBuf, args: RunArgs) -> Result<()> {
    let mut run = Run::new("stats", &args, serde_json::json!({ "root": ontology.root }));
    run.input("ontology", &ontology.ontology)?;
    run.input("corpus", &corpus)?;
    let (ont, cats) = load_categories(&ontology)?;
    let docs = read_corpus(&corpus, &[TRAIN_FILE, TEST_FILE])?;
    let stats = corpus_stats(&docs, &KeywordMatcher::new(&ont, &cats));
    let mut w = run.create("stats.txt")?;
    write!(w, "{stats}")?;
    w.flush()?;
    println!("documents: {}", stats.documents);
    println!("mean ICD codes per document: {:.2}", stats.mean_icd_per_document);
    println!("mean keyword-matched terms per document: {:.2}", stats.mean_matched_terms_per_document);
    run.finish()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ParseOntology { ontology, run } => parse_ontology(ontology, run),
        Command::BuildCorpus { ontology, corpus, mimic_notes, mimic_diagnoses, train_ratio, vocab_cap, run } => {
            build_corpus(ontology, corpus, mimic_notes, mimic_diagnoses, train_ratio, vocab_cap, run)
        }
        Command::GenSynthetic { config, notes, categories, run } => gen_synthetic(config, notes, categories, run),
        Command::Train { config, ontology, corpus, run } => train_cmd(config, ontology, corpus, run),
        Command::Calibrate { checkpoint, corpus, percentile, run } => calibrate_cmd(checkpoint, corpus, percentile, run),
        Command::Annotate { checkpoint, thresholds, corpus, workers, aggregation, keep_alpha, run } => {
            annotate_cmd(checkpoint, thresholds, corpus, workers, aggregation, keep_alpha, run)
        }
        Command::BuildSilver { ontology, corpus, mapping_icd_omim, mapping_omim_hpo, random_rate, run } => {
            build_silver(ontology, corpus, mapping_icd_omim, mapping_omim_hpo, random_rate, run)
        }
        Command::Evaluate { predictions, silver, ontology, root, run } => {
            evaluate_cmd(predictions, silver, ontology, root, run)
        }
        Command::Stats { ontology, corpus, run } => stats_cmd(ontology, corpus, run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
