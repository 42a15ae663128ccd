//! The full in-memory chain on the synthetic corpus: corpus, split,
//! features, encoder, residual SOM, SIDs, continuity and prompts.

use std::collections::BTreeMap;

use sidforge_core::continuity::{self, IdSpace};
use sidforge_core::dataset::{build_trajectories, preprocess, split_chronological, synth, FilterConfig, SplitRatios, DAY};
use sidforge_core::encoder::{train_encoder, EncoderConfig};
use sidforge_core::features::{FeatureConfig, FeatureTable};
use sidforge_core::hsom::{residual_contraction, topology_permutation_test, HsomConfig, HsomModel, SemanticId};
use sidforge_core::prompting::{build_split_prompts, format_time, PromptConfig};
use sidforge_core::seeded_rng;

struct Run {
    pois: Vec<String>,
    cluster: Vec<usize>,
    categories: BTreeMap<String, String>,
    embeddings: Vec<Vec<f64>>,
    model: HsomModel,
    sids: BTreeMap<String, SemanticId>,
    encoder_digest: String,
    split: sidforge_core::dataset::DatasetSplit,
}

fn run(seed: u64) -> Run {
    let corpus = synth::generate(&synth::SynthConfig { seed, ..Default::default() });
    let records = preprocess(corpus.records.clone(), FilterConfig::default()).unwrap();
    let split = split_chronological(build_trajectories(&records, DAY).unwrap(), SplitRatios::default()).unwrap();
    let table = FeatureTable::build(&split, &FeatureConfig::default()).unwrap();
    let features = table.dense_matrix();
    let encoder = train_encoder(&features, &EncoderConfig { epochs: 20, seed, ..Default::default() }).unwrap();
    let hsom = HsomConfig { seed, ..Default::default() };
    let (model, reports) = HsomModel::train(&encoder.embeddings, &hsom).unwrap();
    for r in &reports {
        assert!(r.final_qe <= r.initial_qe, "layer {} {} > {}", r.layer, r.final_qe, r.initial_qe);
    }
    let pois: Vec<String> = table.vectors.iter().map(|v| v.poi.clone()).collect();
    let sids = model
        .assign_sids(pois.iter().map(String::as_str).zip(encoder.embeddings.iter().map(Vec::as_slice)))
        .unwrap();
    let categories = records.iter().map(|r| (r.poi.clone(), r.category.clone())).collect();
    Run {
        cluster: pois.iter().map(|p| corpus.poi_cluster[p]).collect(),
        pois,
        categories,
        encoder_digest: encoder.params.digest(),
        embeddings: encoder.embeddings,
        model,
        sids,
        split,
    }
}

fn layer1(run: &Run) -> BTreeMap<String, Vec<f64>> {
    run.sids
        .iter()
        .map(|(p, s)| (p.clone(), vec![s.codes[0].row as f64, s.codes[0].col as f64]))
        .collect()
}

#[test]
fn synthetic_chain_has_local_ids_and_contracting_residuals() {
    let r = run(7);
    let coords: Vec<(usize, usize)> = r.pois.iter().map(|p| (r.sids[p].codes[0].row, r.sids[p].codes[0].col)).collect();
    let (_, p) = topology_permutation_test(&coords, &r.cluster, 100, &mut seeded_rng(7));
    assert!(p < 0.01, "p = {p}");

    let (before, after) = residual_contraction(&r.model, &r.embeddings).unwrap();
    assert!(after < before);

    let space = IdSpace::grid(4, 6).unwrap();
    let report = continuity::evaluate(&layer1(&r), &r.categories, &space, 200, 7).unwrap();
    assert!(report.global_avg_nicc < 1.0);
    assert!(report.global_avg_nics > 1.0);

    let rendered: Vec<String> = r.sids.values().map(|s| s.render().unwrap()).collect();
    let unique: std::collections::BTreeSet<&String> = rendered.iter().collect();
    assert_eq!(unique.len(), rendered.len());
}

#[test]
fn same_seed_reproduces_sids_prompts_and_leaves_encoder_untouched() {
    let a = run(3);
    let b = run(3);
    assert_eq!(a.sids, b.sids);
    assert_eq!(a.model.digest(), b.model.digest());
    assert_eq!(a.encoder_digest, b.encoder_digest);

    // Quantizing again must not move any prototype.
    let before = a.model.digest();
    let _ = a.model.assign_sids(a.pois.iter().map(String::as_str).zip(a.embeddings.iter().map(Vec::as_slice)));
    assert_eq!(a.model.digest(), before);

    let rendered: BTreeMap<String, String> = a.sids.iter().map(|(p, s)| (p.clone(), s.render().unwrap())).collect();
    let cfg = PromptConfig::default();
    let pa = build_split_prompts(&a.split, &rendered, &cfg).unwrap();
    let pb = build_split_prompts(&b.split, &rendered, &cfg).unwrap();
    assert!(!pa.is_empty());
    let text = |v: &[(sidforge_core::prompting::Part, sidforge_core::prompting::PromptInstance)]| {
        v.iter().map(|(_, p)| p.prompt_text()).collect::<Vec<_>>()
    };
    assert_eq!(text(&pa), text(&pb));
    for (_, p) in &pa {
        let body = p.prompt_text();
        let hidden = body.split("</current>").next().unwrap();
        // Minute-resolution times can coincide, so scan for the full line head.
        let target = format!("{} | {}", format_time(p.target_time, p.tz_offset_secs), p.ground_truth_sid);
        assert!(!hidden.contains(&target), "target check-in leaked: {target}");
    }
}
