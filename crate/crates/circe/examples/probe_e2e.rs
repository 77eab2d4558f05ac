// Temporary development probe for end-to-end learning dynamics.
use std::time::Instant;

use circe::corpus::{synth_corpus, SynthConfig};
use circe::curation::{curate_dataset, CurateOptions, PromptSet, TemplateGenerator};
use circe::encoder::{init_params, EncoderConfig};
use circe::metrics::{evaluate_suite, MetricSpec};
use circe::retrieval::{build_index, generate_query_target_text, QueryBundle, RetrievalMode};
use circe::training::{train, TrainConfig};

fn main() {
    let seed = 1u64;
    let synth = SynthConfig::default(); // 500 images, 3x4 attrs, sigma 0.05
    let t0 = Instant::now();
    let (images, cases) = synth_corpus(&synth, seed).unwrap();
    let gen = TemplateGenerator::new(synth.attrs.clone(), seed);
    let prompts = PromptSet::default();
    let out = curate_dataset(&images, &gen, &prompts, &CurateOptions::default()).unwrap();
    println!("synth+curate: {:?}", t0.elapsed());

    let enc = EncoderConfig {
        image_dim: synth.dim,
        ..EncoderConfig::default()
    };
    let tcfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };

    let t1 = Instant::now();
    let (params, trace) = train(&images, &out.triplets, &out.captions, &enc, &tcfg).unwrap();
    println!("train 30 epochs: {:?}", t1.elapsed());
    println!(
        "loss: initial {:.4} final {:.4} (ratio {:.3})",
        trace.loss_total[0],
        trace.loss_total[trace.loss_total.len() - 1],
        trace.loss_total[trace.loss_total.len() - 1] / trace.loss_total[0]
    );

    let t2 = Instant::now();
    let index = build_index(&images, &params).unwrap();
    println!("index build: {:?}", t2.elapsed());

    let spec = MetricSpec::parse("R@1,R@10").unwrap();
    let tq = |case: &circe::corpus::EvalCase| {
        let pos = index.position(&case.ref_id).unwrap();
        let mut bundle = QueryBundle::new(index.record(pos).tokens.clone(), &case.modification).unwrap();
        generate_query_target_text(&mut bundle, index.record(pos), &gen, &prompts)?;
        Ok(bundle.generated_target_text)
    };

    let t3 = Instant::now();
    for mode in [RetrievalMode::Fused, RetrievalMode::VlmOnly, RetrievalMode::TextOnlyGenerated] {
        let report = evaluate_suite(&cases, &index, mode, &params, &spec, &tq).unwrap();
        println!(
            "{mode}: R@1 {:.3} R@10 {:.3}",
            report.overall["R@1"], report.overall["R@10"]
        );
    }
    println!("eval 3 modes: {:?}", t3.elapsed());

    // untrained baseline
    let untrained = init_params(&enc, seed).unwrap();
    let index0 = build_index(&images, &untrained).unwrap();
    let tq0 = |case: &circe::corpus::EvalCase| {
        let pos = index0.position(&case.ref_id).unwrap();
        let mut bundle = QueryBundle::new(index0.record(pos).tokens.clone(), &case.modification).unwrap();
        generate_query_target_text(&mut bundle, index0.record(pos), &gen, &prompts)?;
        Ok(bundle.generated_target_text)
    };
    let report0 = evaluate_suite(&cases, &index0, RetrievalMode::Fused, &untrained, &spec, &tq0).unwrap();
    println!("untrained fused: R@1 {:.3} R@10 {:.3}", report0.overall["R@1"], report0.overall["R@10"]);
    println!("total: {:?}", t0.elapsed());
}
