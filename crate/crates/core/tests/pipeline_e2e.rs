mod common;

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread;

use promptpack::lexicon::count_tokens;
use promptpack::pipeline::{
    ablation_grid, Attachment, EmbedderKind, FailureKind, Pipeline, PipelineConfig, PipelineInput, ScorerKind, Stage,
};
use promptpack::samples;
use promptpack::table::Table;

fn sample_input() -> PipelineInput {
    PipelineInput::new(
        samples::PROMPT,
        vec![
            Attachment::text("report.txt", samples::REPORT),
            Attachment::table("table.csv", samples::TABLE),
        ],
    )
}

#[test]
fn sample_compresses_past_targets() {
    let pipeline = Pipeline::new(PipelineConfig::default()).unwrap();
    let out = pipeline.run(&sample_input()).unwrap();
    let r = &out.bundle.report;
    assert!(r.ratio >= 1.5, "end-to-end ratio {}", r.ratio);
    assert!(r.text_attachments.ratio() >= 1.1, "abbreviation ratio {}", r.text_attachments.ratio());
    assert_eq!(r.ratio, r.original_tokens as f64 / r.compressed_tokens as f64);
    let recount = count_tokens(&out.bundle.compressed_prompt)
        + out.bundle.attachments.iter().map(|a| count_tokens(&a.content)).sum::<usize>();
    assert_eq!(r.compressed_tokens, recount);
    assert!(r.est_savings > 0.0);
    assert!(r.fidelity.is_some());
}

#[test]
fn runs_are_deterministic() {
    let a = Pipeline::new(PipelineConfig::default()).unwrap().run(&sample_input()).unwrap();
    let b = Pipeline::new(PipelineConfig::default()).unwrap().run(&sample_input()).unwrap();
    assert_eq!(a.bundle.compressed_prompt, b.bundle.compressed_prompt);
    assert_eq!(a.bundle.attachments, b.bundle.attachments);
    assert_eq!(a.bundle.report.without_timings(), b.bundle.report.without_timings());
    assert_eq!(a.token_detail, b.token_detail);
}

#[test]
fn concurrent_runs_agree() {
    let pipeline = Arc::new(Pipeline::new(PipelineConfig::default()).unwrap());
    let reference = pipeline.run(&sample_input()).unwrap();
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let p = Arc::clone(&pipeline);
            thread::spawn(move || p.run(&sample_input()).unwrap())
        })
        .collect();
    for h in handles {
        let out = h.join().unwrap();
        assert_eq!(out.bundle.compressed_prompt, reference.bundle.compressed_prompt);
        assert_eq!(out.bundle.report.without_timings(), reference.bundle.report.without_timings());
    }
}

#[test]
fn attachments_are_reconstructable() {
    let out = Pipeline::new(PipelineConfig::default()).unwrap().run(&sample_input()).unwrap();
    let bundle = out.bundle;
    assert_eq!(bundle.restore_attachment("report.txt").unwrap(), samples::REPORT);
    let json = serde_json::to_string(&bundle).unwrap();
    let back: promptpack::Bundle = serde_json::from_str(&json).unwrap();
    assert_eq!(back.restore_attachment("report.txt").unwrap(), samples::REPORT);

    let original = Table::parse(samples::TABLE).unwrap();
    let restored = Table::parse(&back.restore_attachment("table.csv").unwrap()).unwrap();
    for q in &back.quant_params[0].sidecar.columns {
        let eps = q.column.max_error().unwrap();
        for (a, b) in original.rows.iter().zip(&restored.rows) {
            let x: f64 = a[q.index].parse().unwrap();
            let y: f64 = b[q.index].parse().unwrap();
            assert!((x - y).abs() <= eps);
        }
    }
}

#[test]
fn token_detail_lines_up_with_prompt() {
    let out = Pipeline::new(PipelineConfig::default()).unwrap().run(&sample_input()).unwrap();
    let joined: String = out.token_detail.iter().map(|t| t.surface.as_str()).collect();
    assert_eq!(joined, samples::PROMPT);
    let kept: usize = out
        .token_detail
        .iter()
        .filter(|t| t.kept && t.s_combined.is_some())
        .count();
    assert_eq!(kept, out.bundle.report.prompt.compressed);
    assert!(out.token_detail.iter().all(|t| t.s_combined.is_some() == t.phrase_id.is_some()));
}

#[test]
fn grid_covers_every_cell_in_order() {
    let pipeline = Pipeline::new(PipelineConfig::default()).unwrap();
    let input = sample_input();
    let cells = ablation_grid(&pipeline, &input, &[1, 3], &[2, 3]).unwrap();
    let axes: Vec<(usize, usize)> = cells.iter().map(|c| (c.t, c.g)).collect();
    assert_eq!(axes, [(1, 2), (1, 3), (3, 2), (3, 3)]);
    for c in &cells {
        assert!(c.report.dictionary[0].dictionary.len() <= c.t);
        assert_eq!(c.report.dictionary[0].dictionary.n, c.g);
    }
    let again = ablation_grid(&pipeline, &input, &[1, 3], &[2, 3]).unwrap();
    for (a, b) in cells.iter().zip(&again) {
        assert_eq!(a.report.without_timings(), b.report.without_timings());
    }
    assert!(ablation_grid(&pipeline, &input, &[], &[2]).is_err());
}

#[test]
fn remote_scorer_is_used_and_cached() {
    let stub = common::serve(|_| (200, "{\"p\":0.25}".into()));
    let mut config = PipelineConfig::default();
    config.providers.scorer.kind = ScorerKind::Remote;
    config.providers.scorer.endpoint = Some(stub.url.clone());
    let pipeline = Pipeline::new(config).unwrap();
    let input = PipelineInput::new("alpha beta. gamma delta.", vec![]);
    let out = pipeline.run(&input).unwrap();
    assert!(out.token_detail.iter().filter_map(|t| t.s_dyn).all(|s| s == 2.0));
    let hits = stub.hits.load(Ordering::SeqCst);
    assert_eq!(hits, 6);
    pipeline.run(&input).unwrap();
    assert_eq!(stub.hits.load(Ordering::SeqCst), hits);
    assert!(pipeline.provider_health().scorer);
}

#[test]
fn provider_faults_name_their_stage() {
    let mut config = PipelineConfig::default();
    config.providers.scorer.kind = ScorerKind::Remote;
    config.providers.scorer.endpoint = Some(common::dead_url());
    config.providers.scorer.timeout_secs = 2;
    let pipeline = Pipeline::new(config).unwrap();
    assert!(!pipeline.provider_health().scorer);
    let err = pipeline.run(&PipelineInput::new("some words", vec![])).unwrap_err();
    assert_eq!((err.stage, err.kind), (Stage::TokenProbability, FailureKind::Provider));

    let stub = common::serve(|_| (503, "{}".into()));
    let mut config = PipelineConfig::default();
    config.providers.embedder.kind = EmbedderKind::Remote;
    config.providers.embedder.endpoint = Some(stub.url.clone());
    let err = Pipeline::new(config)
        .unwrap()
        .run(&PipelineInput::new("some words here.", vec![]))
        .unwrap_err();
    assert_eq!((err.stage, err.kind), (Stage::SemanticSimilarity, FailureKind::Provider));
}

#[test]
fn malformed_table_is_a_data_error() {
    let input = PipelineInput::new("q", vec![Attachment::table("bad.csv", "a,b\n1,2,3\n")]);
    let err = Pipeline::new(PipelineConfig::default()).unwrap().run(&input).unwrap_err();
    assert_eq!((err.stage, err.kind), (Stage::Compression, FailureKind::Data));
}

#[test]
fn config_round_trips_through_json() {
    let mut config = PipelineConfig::default();
    config.ngram.top_k = 7;
    config.append_dictionary_as_context = true;
    let json = serde_json::to_string(&config).unwrap();
    assert_eq!(PipelineConfig::from_json(&json).unwrap(), config);
}

#[test]
fn custom_corpus_changes_static_scores() {
    let dir = std::env::temp_dir().join(format!("cp-corpus-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("corpus.txt");
    std::fs::write(&path, "zebra zebra zebra\n\nquokka").unwrap();
    let mut config = PipelineConfig::default();
    config.providers.corpus_path = Some(path);
    let pipeline = Pipeline::new(config).unwrap();
    assert_eq!(pipeline.frequency_model().count("zebra"), 3);

    let mut config = PipelineConfig::default();
    config.providers.corpus_path = Some(dir.join("missing.txt"));
    let err = Pipeline::new(config).unwrap_err();
    assert_eq!((err.stage, err.kind), (Stage::Initialization, FailureKind::Config));
}
