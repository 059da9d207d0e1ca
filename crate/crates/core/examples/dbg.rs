use cardiomotion::analysis::lv_volume_curve;
use cardiomotion::phantom::{generate, PhantomConfig};

fn main() {
    let c = PhantomConfig {
        dims: [32, 32, 16],
        spacing_mm: [2.0, 2.0, 2.5],
        endo_radii_mm: [10.0, 10.0, 11.25],
        epi_radii_mm: [16.0, 16.0, 18.0],
        center_mm: [32.0, 32.0, 26.0],
        frames: 8,
        contraction: 0.25,
        shortening: 0.1,
        twist: 0.0,
        noise_sigma: 0.01,
        misalignment_mm: 0.0,
        seed: 2,
    };
    let study = generate(&c).unwrap();
    let curve = lv_volume_curve(&study, &study.gt_fields).unwrap();
    println!("warped-label curve: {:?}", curve.ml);
    let direct: Vec<usize> = (0..8).map(|t| study.cavity_volume_voxels(t)).collect();
    println!("direct label counts: {direct:?}");
}
