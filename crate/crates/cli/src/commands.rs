//! Subcommand bodies. Each reads its inputs, verifies upstream manifests,
//! writes its outputs and then the manifest of its primary output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use semrec::checkpoint::snap_to_f32;
use semrec::dataset::{split_dataset, InteractionDataset};
use semrec::decoder::{decode_topn, CatalogTrie};
use semrec::embedding::{load_embeddings, stub_embed, write_embeddings, EmbeddingCatalog};
use semrec::eval::{
    cold_start_cases, evaluate_cases, fit_power_law, fraction_subset, run_scaling_with, zero_shot_cases, EvalCase,
    FitOutcome, PreparedDomain, ScalingRecord, TIE_CONVENTION,
};
use semrec::fsq::{read_token_catalog, write_token_catalog, ItemTokenSequence};
use semrec::model::{mean_loss, train_model, write_loss_trace, ItemTable, SequenceModel, TokenizedSequence};
use semrec::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use semrec::tokenizer::{train_quantizer, FsqCodebook};
use semrec::Error;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{verify_artifact, Manifest};
use crate::{
    EmbedArgs, EvaluateArgs, Protocol, ScalingArgs, SynthesizeArgs, TokenizeArgs, TrainArgs, TrainTokenizerArgs,
};

/// Lineage key under which the codebook digest travels downstream.
const CODEBOOK_LINEAGE: &str = "codebook";

/// Planted curve for `scaling --planted-self-test`.
const PLANTED: (f64, f64, f64) = (4.0, 0.3, 1.5);

fn default_trace(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".trace");
    PathBuf::from(name)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Loads embeddings whose width must match `dim`. A header that declares a
/// different width means the file and the configuration disagree.
fn load_catalog(path: &Path, dim: usize) -> CliResult<EmbeddingCatalog> {
    load_embeddings(path, dim).map_err(|e| match e {
        Error::DimensionMismatch { row: 0, expected, found } => CliError::Config(format!(
            "{}: embeddings have dimension {found} but the configuration expects {expected}",
            path.display()
        )),
        other => other.into(),
    })
}

fn upstream_codebook(manifest: &Option<Manifest>) -> Option<String> {
    manifest.as_ref().and_then(|m| m.lineage.get(CODEBOOK_LINEAGE).cloned())
}

pub fn embed(mut config: RunConfig, args: EmbedArgs) -> CliResult<()> {
    if let Some(dim) = args.dim {
        config.embedding.dim = dim;
    }
    if let Some(seed) = args.seed {
        config.embedding.seed = seed;
    }
    let file = File::open(&args.items).map_err(|e| CliError::io(&args.items, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&args.items, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| {
            CliError::Data(format!("{} row {}: expected `item_id<TAB>text`", args.items.display(), i + 1))
        })?;
        let id = id.trim();
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(CliError::Data(format!(
                "{} row {}: item id must be non-empty without whitespace",
                args.items.display(),
                i + 1
            )));
        }
        entries.push(stub_embed(id, text, config.embedding.dim, config.embedding.seed)?);
    }
    let catalog = EmbeddingCatalog::new(config.embedding.dim, entries)?;
    write_embeddings(&args.out, &catalog)?;

    let mut m = Manifest::new("embed", &config);
    m.input("items", &args.items)?;
    m.output("embeddings", &args.out)?;
    m.summary = json!({ "items": catalog.len(), "dim": catalog.dim(), "l2_normalized": true });
    m.write(&args.out)
}

pub fn train_tokenizer(mut config: RunConfig, args: TrainTokenizerArgs) -> CliResult<()> {
    if let Some(e) = args.epochs {
        config.quantizer.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        config.quantizer.learning_rate = lr;
    }
    if let Some(s) = args.seed {
        config.quantizer.seed = s;
    }
    config.validate()?;
    verify_artifact(&args.embeddings)?;
    let catalog = load_catalog(&args.embeddings, config.embedding.dim)?;
    let fsq = config.fsq_config()?;
    let start = Instant::now();
    let mut run = train_quantizer(&catalog, &fsq, &config.quantizer_training())?;
    snap_to_f32(&mut run.codebook);
    run.codebook.save(&args.out)?;

    let trace_path = args.trace.unwrap_or_else(|| default_trace(&args.out));
    let mut w = create(&trace_path)?;
    (|| {
        for (epoch, loss) in run.loss_trace.iter().enumerate() {
            writeln!(w, "{epoch} {loss:?}")?;
        }
        w.flush()
    })()
    .map_err(|e| CliError::io(&trace_path, e))?;

    let mut m = Manifest::new("train-tokenizer", &config);
    m.input("embeddings", &args.embeddings)?;
    m.output("codebook", &args.out)?;
    m.output("trace", &trace_path)?;
    m.summary = json!({
        "initial_loss": run.initial_loss(),
        "final_loss": run.final_loss(),
        "codebook_size": fsq.codebook_size(),
        // loading accepts any finite vectors; record whether these were unit norm
        "inputs_unit_norm": catalog
            .iter()
            .all(|e| (e.vector.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6),
        "elapsed_seconds": start.elapsed().as_secs_f64(),
    });
    m.write(&args.out)
}

/// Reads the optional id list: first field of each non-empty line.
fn read_id_list(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_string)
        .collect())
}

pub fn tokenize(config: RunConfig, args: TokenizeArgs) -> CliResult<()> {
    let (_, codebook_sha) = verify_artifact(&args.codebook)?;
    verify_artifact(&args.embeddings)?;
    let codebook = FsqCodebook::load(&args.codebook)?;
    let catalog = load_catalog(&args.embeddings, codebook.config().embedding_dim)?;
    let catalog = match &args.items {
        Some(list) => {
            let ids = read_id_list(list)?;
            catalog.subset(ids.iter().map(String::as_str))?
        }
        None => catalog,
    };
    let tokens = codebook.tokenize_catalog(&catalog)?;
    write_token_catalog(&args.out, &tokens)?;

    let distinct = tokens
        .iter()
        .map(|t| &t.tokens)
        .collect::<std::collections::HashSet<_>>()
        .len();
    let mut m = Manifest::new("tokenize", &config);
    m.input("codebook", &args.codebook)?;
    m.input("embeddings", &args.embeddings)?;
    if let Some(list) = &args.items {
        m.input("items", list)?;
    }
    m.output("tokens", &args.out)?;
    m.lineage.insert(CODEBOOK_LINEAGE.into(), codebook_sha);
    m.summary = json!({ "items": tokens.len(), "distinct_token_sequences": distinct });
    m.write(&args.out)
}

/// Token catalog, embeddings and dataset joined into model inputs.
struct Corpus {
    tokens: Vec<ItemTokenSequence>,
    table: ItemTable,
    dataset: InteractionDataset,
    vocab: usize,
    sub_dim: usize,
    codebook_lineage: Option<String>,
}

fn load_corpus(config: &RunConfig, tokens: &Path, embeddings: &Path, dataset: &Path) -> CliResult<Corpus> {
    let (tokens_manifest, _) = verify_artifact(tokens)?;
    verify_artifact(embeddings)?;
    let fsq = config.fsq_config()?;
    let catalog = load_catalog(embeddings, config.embedding.dim)?;
    let token_catalog = read_token_catalog(tokens, &fsq)?;
    let table = ItemTable::build(&token_catalog, &catalog)?;
    let domain = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dataset_parsed = InteractionDataset::load(dataset, domain)?;
    dataset_parsed.validate_items(|id| table.contains(id))?;
    Ok(Corpus {
        tokens: token_catalog,
        table,
        dataset: dataset_parsed,
        vocab: fsq.codebook_size(),
        sub_dim: fsq.sub_dim(),
        codebook_lineage: upstream_codebook(&tokens_manifest),
    })
}

fn to_sequences(table: &ItemTable, data: &InteractionDataset) -> CliResult<Vec<TokenizedSequence>> {
    data.sequences
        .iter()
        .map(|s| table.sequence(&s.items).map_err(CliError::from))
        .collect()
}

pub fn train(mut config: RunConfig, args: TrainArgs) -> CliResult<()> {
    if let Some(e) = args.epochs {
        config.training.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        config.training.learning_rate = lr;
    }
    if let Some(s) = args.seed {
        config.training.seed = s;
    }
    config.validate()?;
    let corpus = load_corpus(&config, &args.tokens, &args.embeddings, &args.dataset)?;
    let model_config = config.model_config(corpus.vocab, corpus.sub_dim)?;
    let model = match &args.resume {
        Some(path) => {
            verify_artifact(path)?;
            let m = SequenceModel::load(path)?;
            if *m.config() != model_config {
                return Err(CliError::Config(format!(
                    "{}: checkpoint architecture {:?} differs from the configuration {:?}",
                    path.display(),
                    m.config(),
                    model_config
                )));
            }
            m
        }
        None => SequenceModel::new(model_config, config.model.seed)?,
    };
    let (train_side, eval_side) = split_dataset(&corpus.dataset, &config.split)?;
    let train_seqs = to_sequences(&corpus.table, &train_side)?;
    let eval_seqs = to_sequences(&corpus.table, &eval_side)?;

    let start = Instant::now();
    let (mut model, report) = train_model(model, &train_seqs, &eval_seqs, &config.model_training())?;
    snap_to_f32(&mut model);
    model.save(&args.out)?;

    let trace_path = args.trace.unwrap_or_else(|| default_trace(&args.out));
    let mut w = create(&trace_path)?;
    write_loss_trace(&mut w, &report.trace)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&trace_path, e))?;

    let last = report.trace.last().expect("trace has the initial entry");
    // Trace losses average over an epoch's batches; this is the saved model.
    let final_train_loss = mean_loss(&model, &train_seqs)?;
    let mut m = Manifest::new("train", &config);
    m.input("tokens", &args.tokens)?;
    m.input("embeddings", &args.embeddings)?;
    m.input("dataset", &args.dataset)?;
    if let Some(path) = &args.resume {
        m.input("resume", path)?;
    }
    m.output("model", &args.out)?;
    m.output("trace", &trace_path)?;
    if let Some(cb) = corpus.codebook_lineage {
        m.lineage.insert(CODEBOOK_LINEAGE.into(), cb);
    }
    m.summary = json!({
        "train_sequences": train_seqs.len(),
        "eval_sequences": eval_seqs.len(),
        "catalog_items": corpus.tokens.len(),
        "epochs": report.trace.len() - 1,
        "initial_train_loss": report.trace[0].train_loss,
        "last_epoch_train_loss": last.train_loss,
        "final_train_loss": final_train_loss,
        "final_eval_loss": last.eval_loss,
        "tokens_seen": report.tokens_seen,
        "elapsed_seconds": start.elapsed().as_secs_f64(),
    });
    m.write(&args.out)
}

pub fn evaluate(mut config: RunConfig, args: EvaluateArgs) -> CliResult<()> {
    if let Some(s) = args.seed {
        config.eval.seed = s;
    }
    let (model_manifest, _) = verify_artifact(&args.model)?;
    let (_, codebook_sha) = verify_artifact(&args.codebook)?;
    verify_artifact(&args.embeddings)?;
    if let Some(expected) = upstream_codebook(&model_manifest) {
        if expected != codebook_sha {
            return Err(CliError::Stale {
                path: args.codebook.clone(),
                message: format!(
                    "the model was trained on tokens from codebook {expected}, this codebook is {codebook_sha}"
                ),
            });
        }
    }
    let model = SequenceModel::load(&args.model)?;
    let codebook = FsqCodebook::load(&args.codebook)?;
    let fsq = codebook.config();
    if model.config().vocab != fsq.codebook_size() || model.config().tokens_per_item != fsq.sub_vectors {
        return Err(CliError::Config(format!(
            "model expects {} tokens of vocabulary {}, codebook produces {} tokens of vocabulary {}",
            model.config().tokens_per_item,
            model.config().vocab,
            fsq.sub_vectors,
            fsq.codebook_size()
        )));
    }
    let catalog = load_catalog(&args.embeddings, fsq.embedding_dim)?;
    let catalog = match &args.catalog {
        Some(list) => catalog.subset(read_id_list(list)?.iter().map(String::as_str))?,
        None => catalog,
    };
    let tokens = codebook.tokenize_catalog(&catalog)?;
    let domain = PreparedDomain {
        table: ItemTable::build(&tokens, &catalog)?,
        trie: CatalogTrie::build(&tokens, fsq.sub_vectors)?,
    };
    let name = args
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut data = InteractionDataset::load(&args.dataset, name)?;
    data.validate_items(|id| domain.table.contains(id))?;
    if args.held_out {
        data = split_dataset(&data, &config.split)?.1;
    }
    let (cases, protocol): (Vec<EvalCase>, &str) = match args.protocol {
        Protocol::ZeroShot => (zero_shot_cases(&data), "zero-shot"),
        Protocol::ColdStart => (cold_start_cases(&data, config.eval.seed), "cold-start"),
    };
    let metrics = evaluate_cases(&model, &domain, &cases, protocol)?;

    let mut m = Manifest::new("evaluate", &config);
    m.input("model", &args.model)?;
    m.input("codebook", &args.codebook)?;
    m.input("embeddings", &args.embeddings)?;
    m.input("dataset", &args.dataset)?;
    if let Some(list) = &args.catalog {
        m.input("catalog", list)?;
    }
    m.lineage.insert(CODEBOOK_LINEAGE.into(), codebook_sha);
    if let Some(rec_path) = &args.recommendations {
        let mut w = create(rec_path)?;
        for (case, seq) in cases.iter().zip(&data.sequences) {
            let history = domain.table.sequence(&case.history)?;
            let ranked = decode_topn(&history, &model, &domain.trie, config.beam.width, config.beam.top_n)?;
            for (rank, (item, score)) in ranked.entries.iter().enumerate() {
                writeln!(w, "{} {} {} {:?}", seq.user_id, rank + 1, item, score)
                    .map_err(|e| CliError::io(rec_path, e))?;
            }
        }
        w.flush().map_err(|e| CliError::io(rec_path, e))?;
        m.output("recommendations", rec_path)?;
    }
    let mut history_lengths = std::collections::BTreeMap::<usize, usize>::new();
    for c in &cases {
        *history_lengths.entry(c.history.len()).or_default() += 1;
    }
    m.summary = json!({
        "cases": metrics.n_cases,
        "history_length_counts": history_lengths,
        "tie_convention": TIE_CONVENTION,
    });
    let report = json!({ "metrics": metrics, "manifest": m });
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(&args.out, text + "\n").map_err(|e| CliError::io(&args.out, e))?;
    m.output("report", &args.out)?;
    m.write(&args.out)
}

/// Fits the planted curve sampled at scaling-like token counts and checks
/// that the exponent comes back within 10%.
fn planted_self_test() -> CliResult<(serde_json::Value, bool)> {
    let (a, b, c) = PLANTED;
    let x: Vec<f64> = (0..8).map(|i| 1e3 * 2f64.powi(i)).collect();
    let y: Vec<f64> = x.iter().map(|&x| a * x.powf(-b) + c).collect();
    let outcome = fit_power_law(&x, &y)?;
    let (fit, pass) = match &outcome {
        FitOutcome::Fitted(f) => (json!(f), ((f.b - b) / b).abs() <= 0.1),
        FitOutcome::InsufficientPoints { .. } => (serde_json::Value::Null, false),
    };
    Ok((json!({ "planted": { "a": a, "b": b, "c": c }, "fit": fit, "pass": pass }), pass))
}

pub fn scaling(mut config: RunConfig, args: ScalingArgs) -> CliResult<()> {
    if let Some(f) = args.fractions {
        config.scaling.fractions = f;
    }
    let mut m = Manifest::new("scaling", &config);
    if args.planted_self_test {
        let (summary, pass) = planted_self_test()?;
        let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(&args.out, text + "\n").map_err(|e| CliError::io(&args.out, e))?;
        m.output("self_test", &args.out)?;
        m.summary = summary;
        m.write(&args.out)?;
        return if pass {
            Ok(())
        } else {
            Err(CliError::Other("planted power-law exponent was not recovered within 10%".into()))
        };
    }
    let (tokens, embeddings, dataset) = match (&args.tokens, &args.embeddings, &args.dataset) {
        (Some(t), Some(e), Some(d)) => (t, e, d),
        _ => return Err(CliError::Config("scaling needs --tokens, --embeddings and --dataset".into())),
    };
    let corpus = load_corpus(&config, tokens, embeddings, dataset)?;
    let model_config = config.model_config(corpus.vocab, corpus.sub_dim)?;
    let (train_side, eval_side) = split_dataset(&corpus.dataset, &config.split)?;
    let train_seqs = to_sequences(&corpus.table, &train_side)?;
    let eval_seqs = to_sequences(&corpus.table, &eval_side)?;
    let hyper = config.scaling_training();
    let inject = args.inject_divergence;

    let result = run_scaling_with(&config.scaling.fractions, |f| {
        if inject.is_some_and(|g| (g - f).abs() < 1e-9) {
            return Err(Error::Divergence {
                epoch: 1,
                detail: "injected divergence".into(),
            });
        }
        let subset = fraction_subset(&train_seqs, f, hyper.seed);
        let model = SequenceModel::new(model_config, config.model.seed)?;
        let (_, report) = train_model(model, &subset, &eval_seqs, &hyper)?;
        Ok(ScalingRecord {
            fraction: f,
            sequences: subset.len(),
            tokens: report.tokens_seen,
            eval_loss: report.best_eval_loss,
            epochs: report.trace.len() - 1,
        })
    })?;

    let mut w = create(&args.out)?;
    result
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&args.out, e))?;
    m.input("tokens", tokens)?;
    m.input("embeddings", embeddings)?;
    m.input("dataset", dataset)?;
    m.output("scaling", &args.out)?;
    if let Some(cb) = corpus.codebook_lineage {
        m.lineage.insert(CODEBOOK_LINEAGE.into(), cb);
    }
    m.summary = serde_json::to_value(&result).map_err(|e| CliError::Other(e.to_string()))?;
    m.write(&args.out)?;
    if result.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial(format!(
            "{} of {} fractions failed: {}",
            result.failures.len(),
            config.scaling.fractions.len(),
            result
                .failures
                .iter()
                .map(|f| format!("{:?} ({})", f.fraction, f.reason))
                .collect::<Vec<_>>()
                .join("; ")
        )))
    }
}

pub fn synthesize(config: RunConfig, args: SynthesizeArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        items_per_domain: args.items_per_domain,
        users_per_domain: args.users_per_domain,
        embedding_dim: config.embedding.dim,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let items_path = args.out_dir.join("items.tsv");
    let mut w = create(&items_path)?;
    (|| {
        for (id, text) in &corpus.item_texts {
            writeln!(w, "{id}\t{text}")?;
        }
        w.flush()
    })()
    .map_err(|e| CliError::io(&items_path, e))?;

    let mut m = Manifest::new("synthesize", &config);
    m.output("items", &items_path)?;
    for d in &corpus.datasets {
        let path = args.out_dir.join(format!("{}.txt", d.domain));
        d.save(&path)?;
        m.output(&format!("dataset.{}", d.domain), &path)?;
        let catalog_path = args.out_dir.join(format!("{}.items", d.domain));
        let catalog = corpus.domain_catalog(&d.domain)?;
        let ids: Vec<&str> = catalog.iter().map(|e| e.item_id.as_str()).collect();
        std::fs::write(&catalog_path, ids.join("\n") + "\n").map_err(|e| CliError::io(&catalog_path, e))?;
        m.output(&format!("catalog.{}", d.domain), &catalog_path)?;
    }
    m.summary = serde_json::to_value(&spec).map_err(|e| CliError::Other(e.to_string()))?;
    m.write(&items_path)
}
