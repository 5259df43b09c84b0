//! Builds the default open world, draws a pool, and compares its
//! in-distribution fraction and densities with the exact mixture.

use odst::{RngSeed, WorldSpec};

fn main() -> odst::Result<()> {
    let world = WorldSpec::default_ring().compile()?;
    println!(
        "d = {}, K = {}, components = {}",
        world.dim(),
        world.num_classes(),
        world.num_components()
    );

    let pool = world.sample_unlabeled(200_000, RngSeed(2))?;
    println!(
        "in-distribution fraction of the pool: {:.4} (pi_in = {})",
        pool.in_distribution_fraction(),
        world.spec().pi_in
    );

    for x in [[0.0, 0.0], [1.0, 1.0], [1.9, 0.0], [3.5, 0.0], [8.0, 8.0]] {
        let post = world.posterior_in(&x)?;
        println!(
            "x = {x:?}: p_in = {:.3e}, p_all = {:.3e}, argmax p_in(k|x) = {}, max = {:.3}",
            world.density_in(&x)?,
            world.density_all(&x)?,
            post.argmax(),
            post.max()
        );
    }

    let t = world.sample_labeled(4000, RngSeed(3))?;
    println!("class counts of 4000 labeled draws: {:?}", t.class_counts());
    Ok(())
}
