//! Runs the desk-scale benchmark end to end and prints detection and
//! recovery figures. Expect several minutes on one core.

use adg_core::corrupt::apply;
use adg_core::pipeline::{compare_detectors, evaluate_zeta, run_pipeline_with_detector, RunInputs};
use adg_core::{data, CorruptionFamily, CorruptionSpec, RunConfig, SyntheticSpec};

fn main() -> adg_core::Result<()> {
    let clean = data::generate_synthetic(&SyntheticSpec::benchmark(0))?;
    let (corrupted, mask) = apply(&clean, &CorruptionSpec::new(CorruptionFamily::UniformState, 0.3, 1.0, 0))?;
    let cfg = RunConfig::default();

    let mut compared = compare_detectors(&cfg, &corrupted, &mask, &[30], true, 250)?;
    for c in &compared {
        let fns: Vec<String> = c.curve.points.iter().map(|p| format!("{:.3}", p.fn_rate)).collect();
        println!("{} fn curve: {}", c.curve.label, fns.join(" "));
    }
    let ambient = compared.remove(0);
    let inputs = RunInputs {
        corrupted: &corrupted,
        mask: Some(&mask),
        ground_truth: Some(&clean),
    };
    let out = run_pipeline_with_detector(&cfg, &inputs, Some((ambient.params, ambient.log)), &mut |_| Ok(()))?;
    println!("detection: {:?}", out.report.detection);
    println!("mse: {:?}", out.report.mse);
    for zeta in [0.05, 0.10, 0.20, 0.50] {
        let (row, _) = evaluate_zeta(&cfg, &corrupted, &mask, &clean, &out.detection, &out.detector, zeta)?;
        println!("sweep: {row:?}");
    }
    Ok(())
}
