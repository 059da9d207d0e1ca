use cardiomotion::grid::{warp_labels, DisplacementField, LABEL_MYOCARDIUM};
use cardiomotion::metrics::*;
use cardiomotion::phantom::{generate, PhantomConfig};
use cardiomotion::tracker::*;

fn main() {
    let mut cfg = TrackerConfig::default();
    if let Some(arg) = std::env::args().nth(1) {
        if arg == "nobeta" || std::env::args().any(|a| a == "nobeta") { cfg.weights.beta = 0.0; }
        if arg == "nolax" { /* handled below */ }
    }
    let views = if std::env::args().nth(1).as_deref() == Some("nolax") {
        ViewSelection::SaxOnly
    } else {
        ViewSelection::SaxAndLax
    };
    let mut c = PhantomConfig::default();
    c.seed = 1234;
    if std::env::args().any(|a| a == "mis") {
        c.misalignment_mm = 3.0;
    }
    let study = generate(&c).unwrap();
    let es = study.es_index();
    let t0 = std::time::Instant::now();
    let ctx = build_context(&study, es, &cfg, views).unwrap();
    let (field, trace) = track_pair(&ctx, &cfg).unwrap();
    let el = t0.elapsed().as_secs_f64();
    let warped = warp_labels(&study.labels[0], &field).unwrap();
    let d = dice(&warped, &study.labels[es], LABEL_MYOCARDIUM).unwrap();
    let d0 = dice(&study.labels[0], &study.labels[es], LABEL_MYOCARDIUM).unwrap();
    let vd = volume_difference_pct(&study.labels[0], &warped, LABEL_MYOCARDIUM).unwrap();
    let nj = negative_jacobian_fraction_pct(&field, &study.labels[es], LABEL_MYOCARDIUM).unwrap();
    let epe = end_point_error(&field, &study.gt_fields[es], &study.labels[es], LABEL_MYOCARDIUM).unwrap();
    let sx = study.spacing.x;
    println!("time {:.1}s iters {}  dice {:.4} (zero-field {:.4})  vd {:.2}%  negjac {:.3}%  epe {:.3} mm (~{:.3} vox x)  axis mm [{:.3} {:.3} {:.3}]",
        el, trace.len(), d, d0, vd, nj, epe.mean_mm, epe.mean_mm / sx,
        epe.per_axis_mm[0], epe.per_axis_mm[1], epe.per_axis_mm[2]);
    let zerof = DisplacementField::zeros(study.dims, study.spacing);
    let epe0 = end_point_error(&zerof, &study.gt_fields[es], &study.labels[es], LABEL_MYOCARDIUM).unwrap();
    println!("zero-field epe {:.3} mm axis [{:.3} {:.3} {:.3}]  | tracked mean|phi| {:.4} vox",
        epe0.mean_mm, epe0.per_axis_mm[0], epe0.per_axis_mm[1], epe0.per_axis_mm[2], field.mean_norm_voxels());
    let gt_warp = warp_labels(&study.labels[0], &study.gt_fields[es]).unwrap();
    println!("gt-field: dice {:.4} vd {:.2}%",
        dice(&gt_warp, &study.labels[es], LABEL_MYOCARDIUM).unwrap(),
        volume_difference_pct(&study.labels[0], &gt_warp, LABEL_MYOCARDIUM).unwrap());
    let _ = DisplacementField::zeros(study.dims, study.spacing);
}
