//! End-to-end demo on generated data: build a dataset, derive semantic
//! codes, train, and evaluate zero-shot retrieval on the unseen classes.
//!
//!     cargo run --example train_synthetic -- [iterations] [hidden] [batch] [seed] [adv_only]

use std::time::Instant;

use sketchret_core::data::{gen_synthetic, make_split, Modality, SyntheticSpec};
use sketchret_core::losses::LossWeights;
use sketchret_core::retrieval::{evaluate, EvalOptions};
use sketchret_core::semantics::{build_semantic_table, CombinerConfig, HierarchyMeasure};
use sketchret_core::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let iterations = arg(0, 2000);
    let hidden = arg(1, 64) as usize;
    let batch = arg(2, 32) as usize;
    let seed = arg(3, 7);
    let adv_only = arg(4, 0) == 1;

    let spec = SyntheticSpec::default();
    let t0 = Instant::now();
    let data = gen_synthetic(&spec, seed).expect("generate");
    let split = make_split(data.records.clone(), &data.unseen_classes).expect("split");
    println!(
        "generated {} records ({} seen / {} unseen classes) in {:.2?}",
        data.records.len(),
        split.seen_classes.len(),
        split.unseen_classes.len(),
        t0.elapsed()
    );

    let t1 = Instant::now();
    let seen: Vec<String> = split.seen_classes.iter().cloned().collect();
    let all: Vec<String> = split
        .seen_classes
        .iter()
        .chain(split.unseen_classes.iter())
        .cloned()
        .collect();
    let (semantic, _) = build_semantic_table(
        &data.text_primary,
        &data.taxonomy,
        HierarchyMeasure::JiangConrath,
        &seen,
        &all,
        "synthetic",
        &CombinerConfig {
            seed,
            ..CombinerConfig::default()
        },
    )
    .expect("semantic table");
    println!("semantic table in {:.2?}", t1.elapsed());

    let config = TrainConfig {
        max_iterations: iterations,
        batch_size: batch,
        generator_hidden: vec![hidden],
        critic_hidden: vec![hidden],
        seed,
        weights: if adv_only {
            LossWeights {
                adversarial: 1.0,
                cycle: 0.0,
                classification: 0.0,
                identity: 0.0,
            }
        } else {
            LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let t2 = Instant::now();
    let (bundle, log) = train(&split, &semantic, &config, None).expect("train");
    let train_time = t2.elapsed();
    let first = &log.iterations[0].losses;
    let last = &log.iterations[log.iterations.len() - 1].losses;
    println!(
        "trained {iterations} iterations in {train_time:.2?} ({:.1} ms/iter)",
        train_time.as_secs_f64() * 1e3 / iterations as f64
    );
    println!(
        "  cyc+iml {:.3} -> {:.3}   cls {:.3} -> {:.3}   code_gap {:.4} -> {:.4}",
        first.cyc_sk + first.cyc_im + first.iml,
        last.cyc_sk + last.cyc_im + last.iml,
        first.cls_sk + first.cls_im,
        last.cls_sk + last.cls_im,
        log.iterations[0].code_gap,
        log.iterations[log.iterations.len() - 1].code_gap,
    );

    let queries: Vec<_> = split.test.iter().filter(|r| r.modality == Modality::Sketch).cloned().collect();
    let gallery: Vec<_> = split.test.iter().filter(|r| r.modality == Modality::Image).cloned().collect();
    let t3 = Instant::now();
    let report = evaluate(
        &bundle.model,
        &queries,
        &gallery,
        &EvalOptions::default(),
        serde_json::json!({"example": "train_synthetic", "seed": seed}),
    )
    .expect("evaluate");
    println!(
        "unseen-class retrieval: mAP {:.4}, Prec@{} {:.4} over {} queries / {} gallery ({:.2?})",
        report.map,
        report.precision_k,
        report.precision_at_k,
        report.query_count,
        report.gallery_size,
        t3.elapsed()
    );
}
