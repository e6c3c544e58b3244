// Where does the action happen? Search the admissible window for the
// precondition end and effect start of a planted video.

use std::error::Error;

use transformhead::features::Stream;
use transformhead::search::{estimate_latents, infer, latent_range};
use transformhead::synth::{generate, oracle_params, SynthConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let r = latent_range(25)?;
    println!("t = 25: z_p in {:?}, z_e in {:?} ({} candidates)", r.pre, r.eff, r.len());
    for t in [3, 4, 5] {
        match latent_range(t) {
            Ok(r) => println!("t = {t}: z_p in {:?}, z_e in {:?}", r.pre, r.eff),
            Err(e) => println!("t = {t}: {e}"),
        }
    }

    let synth = generate(&SynthConfig {
        noise: 0.0,
        train_per_class: 2,
        test_per_class: 0,
        ..SynthConfig::default()
    })?;
    let params = oracle_params(&synth.truth);
    for (seq, truth) in synth.sequences(Stream::Rgb).unwrap().iter().zip(&synth.truth.videos).take(4) {
        let sums = seq.prefix_sums();
        let known = estimate_latents(&sums, truth.class, &params)?;
        let joint = infer(&sums, &params)?;
        println!(
            "{}: planted class {} at ({}, {}); known-class search ({}, {}); joint search class {} at ({}, {}), distance {:.1e}",
            seq.video_id,
            truth.class + 1,
            truth.seg.z_p,
            truth.seg.z_e,
            known.seg.z_p,
            known.seg.z_e,
            joint.class + 1,
            joint.seg.z_p,
            joint.seg.z_e,
            joint.distance
        );
        if joint.seg != truth.seg || joint.class != truth.class {
            return Err(format!("{} was not recovered", seq.video_id).into());
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
