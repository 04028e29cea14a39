//! The five subcommands. Each one validates its input paths up front,
//! computes, and writes its outputs under the resolved locations without
//! touching any input file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sketchret_core::data::{gen_synthetic, load_features, make_split, save_features, Modality};
use sketchret_core::retrieval::{self, build_index};
use sketchret_core::semantics::{build_semantic_table, HierarchyMeasure, SemanticTable, Taxonomy, TextEmbeddingTable};
use sketchret_core::trainer::{self, checkpoint_load, checkpoint_save, ModelBundle, ValidationSet};
use sketchret_core::{Error, Real};

use crate::config::{require_input, resolve, unseen_classes, RunConfig};
use crate::CliError;

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Core(Error::Io(e)))
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "text".to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn gen_synth(config: &RunConfig, out: &Path, alt_text: bool) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let data = gen_synthetic(&config.synthetic, config.train.seed)?;

    let features_path = resolve(&config.paths.features, out, "features.csv");
    let taxonomy_path = resolve(&config.paths.taxonomy, out, "taxonomy.json");
    let text_path = resolve(&config.paths.text_embeddings, out, "text_embeddings.txt");
    save_features(&features_path, &data.records)?;
    data.taxonomy.save(&taxonomy_path)?;
    data.text_primary.save(&text_path)?;
    println!("wrote {}", features_path.display());
    println!("wrote {}", taxonomy_path.display());
    println!("wrote {}", text_path.display());
    if alt_text {
        let alt_path = resolve(&config.paths.text_embeddings_alt, out, "text_embeddings_alt.txt");
        data.text_alt.save(&alt_path)?;
        println!("wrote {}", alt_path.display());
    }
    println!(
        "{} records, {} classes ({} unseen)",
        data.records.len(),
        config.synthetic.n_classes,
        data.unseen_classes.len()
    );
    Ok(())
}

fn embed_one(
    config: &RunConfig,
    text_path: &Path,
    measure: HierarchyMeasure,
    taxonomy: &Taxonomy,
    seen: &[String],
    all: &[String],
    out_path: &Path,
) -> Result<(), CliError> {
    let text = TextEmbeddingTable::load(text_path)?;
    let (table, _) = build_semantic_table(
        &text,
        taxonomy,
        measure,
        seen,
        all,
        &stem_of(text_path),
        &config.embed.combiner,
    )?;
    table.save(out_path)?;
    println!("wrote {} ({} classes, measure {measure})", out_path.display(), table.codes.len());
    Ok(())
}

pub fn embed(config: &RunConfig, out: &Path, grid: bool) -> Result<(), CliError> {
    let features_path = resolve(&config.paths.features, out, "features.csv");
    let taxonomy_path = resolve(&config.paths.taxonomy, out, "taxonomy.json");
    let text_path = resolve(&config.paths.text_embeddings, out, "text_embeddings.txt");
    require_input(&features_path)?;
    require_input(&taxonomy_path)?;
    require_input(&text_path)?;
    ensure_out_dir(out)?;

    let records = load_features(&features_path)?;
    let unseen = unseen_classes(config, &records)?;
    let observed: std::collections::BTreeSet<String> = records.iter().map(|r| r.class.clone()).collect();
    let seen: Vec<String> = observed.difference(&unseen).cloned().collect();
    let all: Vec<String> = observed.iter().cloned().collect();
    if seen.is_empty() {
        return Err(CliError::Config("no seen classes left after removing unseen_classes".into()));
    }
    let taxonomy = Taxonomy::load(&taxonomy_path)?;

    if grid {
        let alt_path = config.paths.text_embeddings_alt.clone().ok_or_else(|| {
            CliError::Config("--grid needs paths.text_embeddings_alt (a second text source)".into())
        })?;
        require_input(&alt_path)?;
        for source in [&text_path, &alt_path] {
            for measure in [HierarchyMeasure::Path, HierarchyMeasure::JiangConrath] {
                let name = format!("semantic_{}_{measure}.json", stem_of(source));
                embed_one(config, source, measure, &taxonomy, &seen, &all, &out.join(name))?;
            }
        }
    } else {
        let out_path = resolve(&config.paths.semantic_table, out, "semantic_table.json");
        embed_one(config, &text_path, config.embed.measure, &taxonomy, &seen, &all, &out_path)?;
    }
    Ok(())
}

pub fn train(config: &RunConfig, out: &Path, validate: bool) -> Result<(), CliError> {
    let features_path = resolve(&config.paths.features, out, "features.csv");
    let semantic_path = resolve(&config.paths.semantic_table, out, "semantic_table.json");
    require_input(&features_path)?;
    require_input(&semantic_path)?;
    ensure_out_dir(out)?;

    let records = load_features(&features_path)?;
    let unseen = unseen_classes(config, &records)?;
    let split = make_split(records, &unseen)?;
    let semantic = SemanticTable::load(&semantic_path)?;

    let validation = if validate {
        Some(ValidationSet {
            queries: split.test.iter().filter(|r| r.modality == Modality::Sketch).cloned().collect(),
            gallery: split.test.iter().filter(|r| r.modality == Modality::Image).cloned().collect(),
            options: config.metric.clone(),
        })
    } else {
        None
    };

    let (bundle, log) = trainer::train(&split, &semantic, &config.train, validation.as_ref())?;

    let checkpoint_path = resolve(&config.paths.checkpoint, out, "checkpoint.bin");
    let log_path = resolve(&config.paths.train_log, out, "train_log.json");
    checkpoint_save(&bundle, &checkpoint_path)?;
    std::fs::write(&log_path, log.to_json_string()?).map_err(Error::Io)?;
    println!("wrote {}", checkpoint_path.display());
    println!("wrote {}", log_path.display());
    if let (Some(first), Some(last)) = (log.iterations.first(), log.iterations.last()) {
        println!(
            "{} iterations: ps_total {:.4} -> {:.4}, code_gap {:.4} -> {:.4}",
            log.iterations.len(),
            first.losses.ps_total,
            last.losses.ps_total,
            first.code_gap,
            last.code_gap
        );
    }
    if let Some(v) = log.validation.last() {
        println!("validation mAP after epoch {}: {:.4}", v.epoch, v.map);
    }
    Ok(())
}

struct EvalInputs {
    bundle: ModelBundle,
    queries: Vec<sketchret_core::data::FeatureRecord>,
    gallery: Vec<sketchret_core::data::FeatureRecord>,
    test: Vec<sketchret_core::data::FeatureRecord>,
}

fn load_eval_inputs(config: &RunConfig, out: &Path) -> Result<EvalInputs, CliError> {
    let checkpoint_path = resolve(&config.paths.checkpoint, out, "checkpoint.bin");
    let features_path = resolve(&config.paths.features, out, "features.csv");
    require_input(&checkpoint_path)?;
    require_input(&features_path)?;

    let bundle = checkpoint_load(&checkpoint_path)?;
    let records = load_features(&features_path)?;
    if let Some(first) = records.first() {
        if first.feature.len() != bundle.model.feature_dim() {
            return Err(CliError::Core(Error::shape(
                "checkpoint vs feature file",
                bundle.model.feature_dim(),
                first.feature.len(),
            )));
        }
    }
    let unseen = unseen_classes(config, &records)?;
    let split = make_split(records, &unseen)?;
    Ok(EvalInputs {
        bundle,
        queries: split.test.iter().filter(|r| r.modality == Modality::Sketch).cloned().collect(),
        gallery: split.test.iter().filter(|r| r.modality == Modality::Image).cloned().collect(),
        test: split.test,
    })
}

pub fn eval(config: &RunConfig, out: &Path, dump_rankings: bool, dump_codes: bool) -> Result<(), CliError> {
    let inputs = load_eval_inputs(config, out)?;
    ensure_out_dir(out)?;
    let report = retrieval::evaluate(
        &inputs.bundle.model,
        &inputs.queries,
        &inputs.gallery,
        &config.metric,
        config.echo(),
    )?;
    let report_path = resolve(&config.paths.report, out, "report.json");
    std::fs::write(&report_path, report.to_json_string()?).map_err(Error::Io)?;
    println!("wrote {}", report_path.display());
    println!(
        "mAP {:.4} ({}), Prec@{} {:.4}, {} queries / {} gallery",
        report.map, report.map_averaging, report.precision_k, report.precision_at_k, report.query_count, report.gallery_size
    );

    if dump_rankings {
        let index = build_index(&inputs.bundle.model, &inputs.gallery)?;
        let mut csv = String::from("query_id,rank,gallery_id,distance,relevant\n");
        for query in &inputs.queries {
            let ranked = retrieval::retrieve(&inputs.bundle.model, &index, query, config.metric.distance, None)?;
            for (rank_idx, entry) in ranked.entries.iter().enumerate() {
                writeln!(csv, "{},{},{},{},{}", query.id, rank_idx + 1, entry.id, entry.distance, entry.relevant)
                    .expect("string write");
            }
        }
        let path = out.join("rankings.csv");
        std::fs::write(&path, csv).map_err(Error::Io)?;
        println!("wrote {}", path.display());
    }

    if dump_codes {
        let codes = retrieval::encode_records(&inputs.bundle.model, &inputs.test)?;
        let dim = inputs.bundle.model.code_dim();
        let mut csv = String::from("id,class,modality");
        for j in 0..dim {
            write!(csv, ",c{j}").expect("string write");
        }
        csv.push('\n');
        for (id, class, modality, code) in codes {
            write!(csv, "{id},{class},{modality}").expect("string write");
            for v in code {
                write!(csv, ",{v}").expect("string write");
            }
            csv.push('\n');
        }
        let path = out.join("codes.csv");
        std::fs::write(&path, csv).map_err(Error::Io)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn retrieve(config: &RunConfig, out: &Path, query_ids: &[String], k: usize) -> Result<(), CliError> {
    let checkpoint_path = resolve(&config.paths.checkpoint, out, "checkpoint.bin");
    let features_path = resolve(&config.paths.features, out, "features.csv");
    require_input(&checkpoint_path)?;
    require_input(&features_path)?;
    ensure_out_dir(out)?;

    let bundle = checkpoint_load(&checkpoint_path)?;
    let records = load_features(&features_path)?;
    let unseen = unseen_classes(config, &records)?;
    let split = make_split(records, &unseen)?;
    let gallery: Vec<_> = split.test.iter().filter(|r| r.modality == Modality::Image).cloned().collect();
    let sketches: Vec<_> = split
        .train
        .iter()
        .chain(split.test.iter())
        .filter(|r| r.modality == Modality::Sketch)
        .cloned()
        .collect();
    let index = build_index(&bundle.model, &gallery)?;

    let mut csv = String::from("query_id,rank,gallery_id,distance,relevant\n");
    for id in query_ids {
        let query = sketches.iter().find(|r| &r.id == id).ok_or_else(|| {
            let mut valid: Vec<&str> = sketches.iter().map(|r| r.id.as_str()).collect();
            valid.sort_unstable();
            CliError::Core(Error::Validation(format!(
                "unknown query id {id:?}; valid sketch ids: {}",
                valid.join(", ")
            )))
        })?;
        let ranked = retrieval::retrieve(&bundle.model, &index, query, config.metric.distance, Some(k))?;
        for (rank_idx, entry) in ranked.entries.iter().enumerate() {
            writeln!(csv, "{},{},{},{},{}", query.id, rank_idx + 1, entry.id, entry.distance, entry.relevant)
                .expect("string write");
        }
    }
    let path: PathBuf = out.join("retrieval.csv");
    std::fs::write(&path, csv).map_err(Error::Io)?;
    println!("wrote {}", path.display());
    Ok(())
}
