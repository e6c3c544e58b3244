// Retrieval in the learned space: nearest whole videos, and the gallery
// effects that best match what a query's precondition predicts.

use std::error::Error;

use transformhead::dataset::{Dataset, Part, Video};
use transformhead::eval::{effect_gallery, embed_videos, nearest_neighbors, predict_effect, ClassFilter};
use transformhead::features::Stream;
use transformhead::manifest::LabelSpace;
use transformhead::parallel::Parallelism;
use transformhead::synth::{generate, oracle_params, SynthConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let config = SynthConfig {
        train_per_class: 10,
        test_per_class: 2,
        seed: 2,
        ..SynthConfig::default()
    };
    let synth = generate(&config)?;
    let data = Dataset::from_sequences(synth.manifest.clone(), Stream::Rgb, config.t, synth.rgb.clone())?;
    let params = oracle_params(&synth.truth);
    let par = Parallelism::sequential();

    let split = data.manifest.split("standard")?;
    let train_videos: Vec<&Video> = data.examples("standard", Part::Train)?.iter().map(|e| e.video).collect();
    let gallery = embed_videos(&train_videos, &params, &par)?;
    let effects = effect_gallery(&data, &split.train, &params, LabelSpace::Class, &par)?;

    for id in split.test.iter().take(3) {
        let query = data.video(id)?;
        let q = &embed_videos(&[query], &params, &par)?[0];
        let hits = nearest_neighbors(q, &gallery, 3)?;
        let classes: Vec<usize> = hits.iter().map(|h| train_videos[h.index].class + 1).collect();
        println!("{id} (class {}): neighbors {:?} of classes {classes:?}", query.class + 1,
            hits.iter().map(|h| h.video_id.as_str()).collect::<Vec<_>>());

        for filter in [ClassFilter::Same, ClassFilter::Different] {
            let best = &predict_effect(&query.sums, &params, &effects, filter, 1)?[0];
            println!(
                "    {filter:?}-class effect: {} frames {}..={} (class {}, distance {:.3})",
                best.video_id, best.effect_frames.0, best.effect_frames.1, best.class, best.distance
            );
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
