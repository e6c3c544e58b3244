// Datasets on disk: feature files, a manifest, and loading them back with
// every clip resampled to the same length.

use std::error::Error;

use ndarray::Array2;

use transformhead::dataset::{Dataset, Part};
use transformhead::features::{load_features, resample_indices, save_features, FrameFeatureSequence, Stream};
use transformhead::manifest::load_manifest;
use transformhead::synth::{generate, SynthConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = std::env::temp_dir().join(format!("transformhead-feature-files-{}", std::process::id()));

    // A 40-frame clip of 8-dimensional features, written and read back.
    let frames = Array2::from_shape_fn((40, 8), |(k, j)| (k * 8 + j) as f64 / 320.0);
    let clip = FrameFeatureSequence::new("clip", None, Stream::Rgb, frames)?;
    std::fs::create_dir_all(&dir)?;
    save_features(&clip, dir.join("clip.tfhv"))?;
    let back = load_features(dir.join("clip.tfhv"))?;
    println!("clip: {} frames x {} features, stream {}", back.len(), back.dim(), back.stream.as_str());
    println!("40 -> 25 frames keeps source frames {:?}", resample_indices(40, 25));

    // A whole planted dataset: manifest plus one feature file per video.
    let synth = generate(&SynthConfig {
        train_per_class: 3,
        test_per_class: 1,
        ..SynthConfig::default()
    })?;
    synth.write(dir.join("planted"))?;
    let manifest = load_manifest(dir.join("planted/manifest.json"))?;
    println!("{} classes, {} videos, splits {:?}", manifest.num_classes(), manifest.videos.len(),
        manifest.splits.keys().collect::<Vec<_>>());

    let data = Dataset::load(dir.join("planted/manifest.json"), Stream::Rgb, 25)?;
    let train = data.examples("standard", Part::Train)?;
    println!("loaded {} videos; {} for training", data.videos().len(), train.len());

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
