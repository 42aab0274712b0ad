//! The four subcommands: artifact preparation, training, prediction, and
//! evaluation. Each returns the library error type; the binary maps error
//! categories onto process exit codes.

use crate::config::RunConfig;
use seqmatch_core::checkpoint::load_checkpoint;
use seqmatch_core::data::{corpus_sentences, load_dataset, prepare_dialogue, PreparedDialogue};
use seqmatch_core::embedding::{combine_embeddings, load_embedding_file, EmbeddingTable};
use seqmatch_core::metrics::{
    default_ks, ensemble_average, ensemble_average_scores, rank_dialogue, read_score_file, report,
    write_score_file, ScoreRecord,
};
use seqmatch_core::model::Model;
use seqmatch_core::scorer::softmax;
use seqmatch_core::skipgram::train_task_embeddings;
use seqmatch_core::trainer::{predict, train};
use seqmatch_core::vocab::Vocabulary;
use seqmatch_core::{Error, Result};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Build the vocabulary and the combined embedding table from the corpus.
pub fn cmd_prepare(config: &RunConfig) -> Result<()> {
    let corpus_path = config.corpus()?;
    let sentences = corpus_sentences(&corpus_path, config.speaker_tags)?;
    let vocab = Vocabulary::build(&sentences, config.min_count)?;

    let general: HashMap<String, Vec<f32>> = match &config.general_embeddings_path {
        Some(path) => load_embedding_file(Path::new(path), config.general_dim)?,
        None => HashMap::new(),
    };
    let task = train_task_embeddings(&sentences, &vocab, config.skipgram_config())?;
    let table = combine_embeddings(&vocab, &general, &task, config.general_dim, config.task_dim)?;

    vocab.save(Path::new(&config.vocab_path))?;
    table.save(Path::new(&config.embedding_path))?;

    println!(
        "{}",
        serde_json::json!({
            "vocab_size": vocab.len(),
            "embedding_width": table.width(),
            "general_coverage": table.general_coverage(&vocab),
            "vocab_path": config.vocab_path,
            "embedding_path": config.embedding_path,
        })
    );
    Ok(())
}

fn load_artifacts(config: &RunConfig) -> Result<(Vocabulary, EmbeddingTable)> {
    let vocab = Vocabulary::load(Path::new(&config.vocab_path))?;
    let table = EmbeddingTable::load(Path::new(&config.embedding_path))?;
    if table.vocab_size() != vocab.len() {
        return Err(Error::Mismatch(format!(
            "embedding table {} holds {} rows but vocabulary {} holds {} tokens",
            config.embedding_path,
            table.vocab_size(),
            config.vocab_path,
            vocab.len()
        )));
    }
    Ok((vocab, table))
}

fn load_prepared(
    config: &RunConfig,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<Vec<PreparedDialogue>> {
    load_dataset(path, vocab, config.speaker_tags)?
        .iter()
        .map(|example| prepare_dialogue(example, config.max_context_len, config.max_candidate_len))
        .collect()
}

/// Train from the prepared artifacts, streaming the log and keeping the best
/// checkpoint on disk.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let (vocab, table) = load_artifacts(config)?;
    let train_path = RunConfig::require(&config.train_path, "train_path")?;
    let train_set = load_prepared(config, &vocab, &train_path)?;
    let dev_set = match &config.dev_path {
        Some(path) => load_prepared(config, &vocab, Path::new(path))?,
        None => {
            eprintln!("note: dev_path not set, evaluating on the training set");
            train_set.clone()
        }
    };

    let model = Model::init(&config.model_config(), &table, config.seed)?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(&config.log_path)?);
    // first log line: the full effective configuration, defaults included
    writeln!(log, "{}", serde_json::json!({ "config": config }))?;

    let checkpoint_path = PathBuf::from(&config.checkpoint_path);
    let outcome = train(
        model,
        &train_set,
        &dev_set,
        &config.train_config(),
        Some(&checkpoint_path),
        |record| {
            if let Ok(line) = serde_json::to_string(record) {
                let _ = writeln!(log, "{line}");
                let _ = log.flush();
            }
        },
    )?;

    println!(
        "{}",
        serde_json::json!({
            "best_step": outcome.best_step,
            "best_metric": outcome.best_metric,
            "evaluations": outcome.log.len(),
            "checkpoint_path": config.checkpoint_path,
            "log_path": config.log_path,
        })
    );
    Ok(())
}

/// Score a dataset with one checkpoint, or with several averaged together.
pub fn cmd_predict(
    config: &RunConfig,
    checkpoints: &[PathBuf],
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let vocab = Vocabulary::load(Path::new(&config.vocab_path))?;
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None => RunConfig::require(&config.test_path, "test_path")?,
    };
    let dialogues = load_prepared(config, &vocab, &data_path)?;

    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        vec![PathBuf::from(&config.checkpoint_path)]
    } else {
        checkpoints.to_vec()
    };

    let mut raw_rows: Vec<Vec<Vec<f64>>> = Vec::with_capacity(paths.len());
    for path in &paths {
        let loaded = load_checkpoint(path)?;
        let model = loaded.model;
        let rows = model.params().get("embedding.table")?.value.shape()[0];
        if rows != vocab.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint {} was trained over {rows} vocabulary rows but {} holds {} tokens",
                path.display(),
                config.vocab_path,
                vocab.len()
            )));
        }
        raw_rows.push(predict(&model, &dialogues)?);
    }

    let mean_scores = if raw_rows.len() == 1 {
        raw_rows[0].clone()
    } else {
        ensemble_average_scores(&raw_rows)?
    };
    let probabilities: Vec<Vec<f64>> = if config.raw_ensemble || raw_rows.len() == 1 {
        mean_scores.iter().map(|row| softmax(row)).collect()
    } else {
        let prob_rows: Vec<Vec<Vec<f64>>> = raw_rows
            .iter()
            .map(|rows| rows.iter().map(|row| softmax(row)).collect())
            .collect();
        ensemble_average(&prob_rows)?
    };

    let records: Vec<ScoreRecord> = dialogues
        .iter()
        .zip(mean_scores.into_iter().zip(probabilities))
        .map(|(dialogue, (scores, probabilities))| ScoreRecord {
            example_id: dialogue.example_id.clone(),
            scores,
            probabilities,
        })
        .collect();

    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(&config.scores_path),
    };
    write_score_file(&out_path, &records)?;
    println!(
        "{}",
        serde_json::json!({
            "dialogues": records.len(),
            "models": paths.len(),
            "scores_path": out_path,
        })
    );
    Ok(())
}

/// Rank score files against a labeled dataset and print the metrics report.
/// Several score files are ensembled before ranking.
pub fn cmd_eval(config: &RunConfig, scores: &[PathBuf], data: Option<&Path>) -> Result<()> {
    let vocab = Vocabulary::load(Path::new(&config.vocab_path))?;
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None => RunConfig::require(&config.dev_path, "dev_path")?,
    };
    let dataset = load_dataset(&data_path, &vocab, config.speaker_tags)?;

    let paths: Vec<PathBuf> = if scores.is_empty() {
        vec![PathBuf::from(&config.scores_path)]
    } else {
        scores.to_vec()
    };

    let mut score_grids: Vec<Vec<Vec<f64>>> = Vec::with_capacity(paths.len());
    let mut prob_grids: Vec<Vec<Vec<f64>>> = Vec::with_capacity(paths.len());
    for path in &paths {
        let records = read_score_file(path)?;
        if records.len() != dataset.len() {
            return Err(Error::Mismatch(format!(
                "score file {} holds {} rows but {} holds {} dialogues",
                path.display(),
                records.len(),
                data_path.display(),
                dataset.len()
            )));
        }
        for (i, (record, example)) in records.iter().zip(&dataset).enumerate() {
            if record.example_id != example.example_id {
                return Err(Error::Mismatch(format!(
                    "score file {} row {i}: example id {} does not match dataset id {}",
                    path.display(),
                    record.example_id,
                    example.example_id
                )));
            }
            if record.scores.len() != example.candidates.len() {
                return Err(Error::Mismatch(format!(
                    "score file {} row {i}: {} scores for {} candidates",
                    path.display(),
                    record.scores.len(),
                    example.candidates.len()
                )));
            }
        }
        score_grids.push(records.iter().map(|r| r.scores.clone()).collect());
        prob_grids.push(records.iter().map(|r| r.probabilities.clone()).collect());
    }

    let values: Vec<Vec<f64>> = if paths.len() == 1 {
        score_grids.into_iter().next().unwrap()
    } else if config.raw_ensemble {
        ensemble_average_scores(&score_grids)?
    } else {
        ensemble_average(&prob_grids)?
    };

    let mut ranked = Vec::with_capacity(dataset.len());
    let mut max_candidates = 0usize;
    for (example, row) in dataset.iter().zip(&values) {
        let label = example.label.ok_or_else(|| {
            Error::MissingLabels(format!(
                "example {} in {} has no label",
                example.example_id,
                data_path.display()
            ))
        })?;
        max_candidates = max_candidates.max(row.len());
        ranked.push(rank_dialogue(&example.example_id, row, Some(label)));
    }

    let metrics = report(&ranked, &default_ks(max_candidates))?;
    println!(
        "{}",
        serde_json::to_string(&metrics).expect("metrics report serializes")
    );
    Ok(())
}
