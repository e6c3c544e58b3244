// Compare the hand-written backward pass with central finite differences
// on a random model and video.

use std::error::Error;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use transformhead::features::PrefixSums;
use transformhead::grad::{backward, finite_diff_check, ParamGroup};
use transformhead::model::{SiameseParams, DEFAULT_MARGIN};
use transformhead::search::latent_range;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let (n, d, f, t) = (4, 6, 12, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = SiameseParams {
        w_pre: normal(&mut rng, d, f, 0.3),
        b_pre: Array1::from_elem(d, 0.05),
        w_eff: normal(&mut rng, d, f, 0.3),
        b_eff: Array1::from_elem(d, -0.05),
        transforms: (0..n).map(|_| normal(&mut rng, d, d, 0.4)).collect(),
    };
    let sums = PrefixSums::new(&(normal(&mut rng, t, f, 1.0) + 0.5));
    let seg = latent_range(t)?.segmentations().nth(5).unwrap();

    let (loss, grads) = backward(&sums, 2, seg, &params, DEFAULT_MARGIN)?;
    println!("loss {:.4}: positive {:.4}, hinges {:?}", loss.total, loss.positive, loss.negatives);
    for g in ParamGroup::all(n) {
        let norm = grads.group(g).iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  |dL/d{}| = {norm:.4}", g.name());
    }

    let report = finite_diff_check(&sums, 2, seg, &params, DEFAULT_MARGIN, 1e-5)?;
    println!(
        "max relative error {:.2e} over {} coordinates ({} skipped at hinge kinks)",
        report.max_rel_error, report.checked, report.skipped
    );
    if report.max_rel_error >= 1e-4 {
        return Err("analytic and numeric gradients disagree".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
