//! Near-duplicate removal: plants exact and perturbed copies of reference
//! images in a random corpus and checks what each stage removes.

use odst::dedup::{dedup_run, DedupConfig, DedupStage, ImageSet, ImageTensor};
use rand::Rng;

fn main() -> odst::Result<()> {
    let (h, w, c) = (16, 16, 3);
    let mut rng = odst::RngSeed(9).rng();
    let random_image = |rng: &mut odst::rng::Rng| {
        let v: Vec<f64> = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(h, w, c, v)
    };
    let refs: Vec<ImageTensor> = (0..200).map(|_| random_image(&mut rng)).collect::<odst::Result<_>>()?;
    let mut corpus: Vec<ImageTensor> = (0..5000).map(|_| random_image(&mut rng)).collect::<odst::Result<_>>()?;

    // exact copies, light noise (L2 about 0.5) and heavy noise (about 5)
    for i in 0..10 {
        corpus[i * 100] = refs[i].clone();
        for (slot, src, scale) in [(i * 100 + 30, i + 10, 0.5), (i * 100 + 60, i + 20, 5.0)] {
            let noise: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
            let v = refs[src]
                .values()
                .iter()
                .zip(&noise)
                .map(|(a, n)| (a + scale * n / norm).clamp(0.0, 1.0))
                .collect();
            corpus[slot] = ImageTensor::new(h, w, c, v)?;
        }
    }

    let outcome = dedup_run(
        &ImageSet::from_images(&corpus)?,
        &[ImageSet::from_images(&refs)?],
        &DedupConfig::default(),
    )?;
    let hard = outcome.audit.iter().filter(|a| a.stage == DedupStage::HardRadius).count();
    println!("removed {} of {} ({} within the hard radius)", outcome.removed(), corpus.len(), hard);
    for a in outcome.audit.iter().filter(|a| a.corpus_index < 100) {
        println!(
            "  corpus {} -> reference {}: L2 {:.3}, 1 - SSIM {:?}, stage {:?}, removed {}",
            a.corpus_index, a.reference_index, a.l2, a.ssim_distance, a.stage, a.removed
        );
    }
    Ok(())
}
