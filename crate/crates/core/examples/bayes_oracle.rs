//! The Bayes-optimal predictor of the base objective and of each
//! self-training iteration, along a ray from a class centre outwards.

use odst::oracle::{bayes_base, bayes_iter_closed, bayes_iter_recursive, bayes_limit, OraclePoint};
use odst::WorldSpec;

fn main() -> odst::Result<()> {
    let world = WorldSpec::default_ring().compile()?;
    println!("{:>5} {:>7} {:>8} {:>8} {:>8} {:>8}", "s", "r", "base", "t=1", "t=3", "limit");
    for i in 0..=12 {
        let s = 0.5 * i as f64;
        let x = [s * std::f64::consts::FRAC_1_SQRT_2, s * std::f64::consts::FRAC_1_SQRT_2];
        let pt = OraclePoint::from_world(&world, &x)?;
        println!(
            "{s:>5.1} {:>7.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            pt.ratio()?,
            bayes_base(&pt)?.max(),
            bayes_iter_closed(&pt, 1)?.max(),
            bayes_iter_closed(&pt, 3)?.max(),
            bayes_limit(&pt)?.max()
        );
    }

    let pt = OraclePoint::from_world(&world, &[1.2, 0.4])?;
    let worst = (0..=50)
        .map(|t| {
            let a = bayes_iter_closed(&pt, t).unwrap();
            let b = bayes_iter_recursive(&pt, t).unwrap();
            a.l1_distance(&b)
        })
        .fold(0.0, f64::max);
    println!("closed form vs recursion, t <= 50: max L1 difference {worst:e}");
    Ok(())
}
