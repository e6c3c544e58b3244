// Hold out one sub-category of every action and score at the super-class
// level: only the shared transformation carries over to the unseen one.

use std::error::Error;

use transformhead::dataset::{Dataset, Part};
use transformhead::eval::evaluate;
use transformhead::features::Stream;
use transformhead::parallel::Parallelism;
use transformhead::synth::{generate, SynthConfig};
use transformhead::train::{train, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let config = SynthConfig {
        classes: 5,
        sub_categories: 5,
        code_spread: 3.0,
        train_per_class: 30,
        test_per_class: 10,
        seed: 8,
        ..SynthConfig::default()
    };
    let synth = generate(&config)?;
    let data = Dataset::from_sequences(synth.manifest.clone(), Stream::Rgb, config.t, synth.rgb.clone())?;
    let examples = data.examples("cross", Part::Train)?;
    let held_out: Vec<&str> = synth
        .manifest
        .classes
        .iter()
        .filter(|c| c.index % config.sub_categories == 0)
        .map(|c| c.name.as_str())
        .collect();
    println!("training on {} videos; held-out sub-categories {held_out:?}", examples.len());

    let tc = TrainConfig {
        base_lr: 0.05,
        d: config.embed_dim,
        ..TrainConfig::rgb().scaled_to(1500)
    };
    let par = Parallelism::sequential();
    let params = train(&examples, config.classes, &tc, &par)?.state.params;
    let (report, _) = evaluate(&data, "cross", &params, &par)?;
    println!("super-class accuracy on unseen sub-categories {:.3}", report.overall);
    for (name, acc) in &report.per_class {
        println!("  {name}: {}", acc.map_or("-".into(), |a| format!("{a:.2}")));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
