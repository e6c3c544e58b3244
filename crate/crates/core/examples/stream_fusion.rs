// Train separate RGB and flow models and fuse their per-class distances,
// weighting flow twice as much as RGB.

use std::error::Error;

use transformhead::dataset::{Dataset, Part};
use transformhead::eval::{evaluate, fuse_scores, report_from_scores, DEFAULT_FLOW_WEIGHT};
use transformhead::features::Stream;
use transformhead::parallel::Parallelism;
use transformhead::synth::{generate, SynthConfig};
use transformhead::train::{train, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let config = SynthConfig {
        flow: true,
        noise: 0.3,
        train_per_class: 16,
        test_per_class: 10,
        seed: 5,
        ..SynthConfig::default()
    };
    let synth = generate(&config)?;
    let par = Parallelism::sequential();

    let mut tables = Vec::new();
    for (stream, seqs) in [(Stream::Rgb, &synth.rgb), (Stream::Flow, synth.flow.as_ref().unwrap())] {
        let data = Dataset::from_sequences(synth.manifest.clone(), stream, config.t, seqs.clone())?;
        let tc = TrainConfig {
            base_lr: 0.05,
            d: config.embed_dim,
            ..TrainConfig::for_stream(stream).scaled_to(300)
        };
        let params = train(&data.examples("standard", Part::Train)?, config.classes, &tc, &par)?.state.params;
        let (report, table) = evaluate(&data, "standard", &params, &par)?;
        println!("{:>4} accuracy {:.3}", stream.as_str(), report.overall);
        tables.push(table);
    }

    let fused = fuse_scores(&tables[0], &tables[1], DEFAULT_FLOW_WEIGHT)?;
    let report = report_from_scores(&synth.manifest, "standard", &fused)?;
    println!("fused accuracy {:.3} (flow weight {DEFAULT_FLOW_WEIGHT})", report.overall);
    let row = &fused.rows[0];
    println!("{}: fused distances {:.3?} -> class {}", row.video_id, row.scores, row.pred);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
