// Stop training, save a checkpoint, resume from it, and land on exactly
// the parameters of an uninterrupted run.

use std::error::Error;

use transformhead::dataset::{Dataset, Part};
use transformhead::features::Stream;
use transformhead::parallel::Parallelism;
use transformhead::synth::{generate, SynthConfig};
use transformhead::train::{load_checkpoint, resume, save_checkpoint, train, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let config = SynthConfig {
        train_per_class: 8,
        test_per_class: 2,
        ..SynthConfig::default()
    };
    let synth = generate(&config)?;
    let data = Dataset::from_sequences(synth.manifest.clone(), Stream::Rgb, config.t, synth.rgb.clone())?;
    let examples = data.examples("standard", Part::Train)?;
    let tc = TrainConfig {
        base_lr: 0.05,
        batch_size: 12,
        d: config.embed_dim,
        seed: 11,
        ..TrainConfig::rgb().scaled_to(120)
    };
    let par = Parallelism::sequential();

    let straight = train(&examples, config.classes, &tc, &par)?;

    let halfway = TrainConfig { max_iters: 50, ..tc.clone() };
    let first = train(&examples, config.classes, &halfway, &par)?;
    let path = std::env::temp_dir().join(format!("transformhead-resume-{}.tfhs", std::process::id()));
    save_checkpoint(&first.state, &path)?;
    let restored = load_checkpoint(&path)?;
    std::fs::remove_file(&path)?;
    let finished = resume(restored, &examples, &tc, &par)?;

    let same = finished.state.to_bytes() == straight.state.to_bytes();
    println!(
        "stopped at {}, resumed to {}: identical to the uninterrupted run: {same}",
        first.state.iteration, finished.state.iteration
    );
    if !same {
        return Err("resumed training diverged".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
