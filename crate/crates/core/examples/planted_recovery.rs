// Train on a planted dataset and check what the model recovered: the class
// of every held-out video and, within a frame, where its action happens.

use std::error::Error;

use transformhead::dataset::{Dataset, Part};
use transformhead::eval::evaluate;
use transformhead::features::Stream;
use transformhead::parallel::Parallelism;
use transformhead::synth::{generate, SynthConfig};
use transformhead::train::{train, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let config = SynthConfig {
        train_per_class: 20,
        test_per_class: 10,
        seed: 3,
        ..SynthConfig::default()
    };
    let synth = generate(&config)?;
    let data = Dataset::from_sequences(synth.manifest.clone(), Stream::Rgb, config.t, synth.rgb.clone())?;
    let examples = data.examples("standard", Part::Train)?;

    // The default three-stage schedule, compressed, with a step size suited
    // to unit-scale features.
    let tc = TrainConfig {
        base_lr: 0.05,
        d: config.embed_dim,
        ..TrainConfig::rgb().scaled_to(600)
    };
    let par = Parallelism::sequential();
    let outcome = train(&examples, config.classes, &tc, &par)?;
    let first = &outcome.metrics[0];
    let last = outcome.metrics.last().unwrap();
    println!("loss {:.3} -> {:.3} over {} iterations", first.loss_total, last.loss_total, tc.max_iters);

    let (report, scores) = evaluate(&data, "standard", &outcome.state.params, &par)?;
    let planted: std::collections::HashMap<_, _> =
        synth.truth.videos.iter().map(|v| (v.id.as_str(), v.seg)).collect();
    let near = scores
        .rows
        .iter()
        .filter(|r| {
            let s = planted[r.video_id.as_str()];
            r.z_p.abs_diff(s.z_p) <= 1 && r.z_e.abs_diff(s.z_e) <= 1
        })
        .count();
    println!("held-out accuracy {:.3}", report.overall);
    println!("segmentation within one frame: {near}/{}", scores.rows.len());
    if report.overall < 0.9 {
        return Err(format!("accuracy {:.3} is too low", report.overall).into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
