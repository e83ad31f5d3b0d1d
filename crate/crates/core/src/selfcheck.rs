//! Quick invariant suite behind `softreset selfcheck`. Every check is small
//! enough to finish in well under a second.

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::bench::{csv_header, SCHEMA_ID};
use crate::drift::{closed_form_gamma, ou_sample, CellMap, DriftState, SharingScheme};
use crate::error::Result;
use crate::model::{
    draw_init, loss_and_grad, MlpObjective, MlpSpec, Objective, ParamSet, PriorSpec, TaskKind,
};
use crate::optim::{
    gaussian_kl, group_labels, hard_reset, l2_init_step, sgd_step, shrink_perturb_step,
    soft_reset_update, ResetMask,
};
use crate::rng::{lane, Lane};
use crate::streams::{Batch, Targets};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

/// Random classification batch for `spec`.
fn random_batch(spec: &MlpSpec, rows: usize, rng: &mut Lane) -> Result<Batch> {
    let inputs = Tensor::matrix(
        rows,
        spec.input_width(),
        rng.normals(rows * spec.input_width()),
    )?;
    let labels = (0..rows).map(|_| rng.below(spec.output_width())).collect();
    Ok(Batch::new(inputs, Targets::Classes(labels)))
}

fn mlp_gradients(seed: u64) -> Result<Check> {
    let mut rng = Lane::new(seed, &[lane::SYNTHETIC, 1]);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let sizes: Vec<usize> = (0..3).map(|_| 2 + rng.below(6)).collect();
        let spec = MlpSpec::new(sizes, TaskKind::Classification)?;
        let batch = random_batch(&spec, 1 + rng.below(4), &mut rng)?;
        let theta = rng.normals(spec.num_params());
        let (_, grad) = loss_and_grad(&spec, &theta, &batch)?;
        let obj = MlpObjective {
            spec: &spec,
            batch: &batch,
        };
        let h = 1e-5;
        let mut probe = theta.clone();
        for i in 0..theta.len() {
            probe[i] = theta[i] + h;
            let up = obj.loss(&probe)?;
            probe[i] = theta[i] - h;
            let down = obj.loss(&probe)?;
            probe[i] = theta[i];
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((grad[i] - numeric).abs() / grad[i].abs().max(1.0));
        }
    }
    Ok(check(
        "mlp_gradients",
        worst <= 1e-5,
        format!("max rel err {worst:.2e}"),
    ))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn variant_lattice(seed: u64) -> Result<Check> {
    let mut rng = Lane::new(seed, &[lane::SYNTHETIC, 2]);
    let spec = MlpSpec::new(vec![4, 6, 3], TaskKind::Classification)?;
    let batch = random_batch(&spec, 4, &mut rng)?;
    let obj = MlpObjective {
        spec: &spec,
        batch: &batch,
    };
    let theta = draw_init(&spec, seed, &[lane::INIT]);
    let mu0 = draw_init(&spec, seed + 1, &[lane::INIT]);
    let alpha = 0.1;
    let (sgd, _) = sgd_step(&theta, &obj, alpha)?;
    let ones = vec![1.0; theta.len()];
    let soft = soft_reset_update(&theta, &mu0, &ones, alpha, 0.7, &obj)?.theta;
    let (l2, _) = l2_init_step(&theta, &mu0, &obj, alpha, 0.0)?;
    let (sp, _) = shrink_perturb_step(&theta, &mu0, &obj, alpha, 1.0, 0.0)?;
    let params = ParamSet {
        values: theta.clone(),
        groups: spec.groups(),
    };
    let kept = hard_reset(&params, &mu0, ResetMask::None);
    let worst = [
        max_diff(&soft, &sgd),
        max_diff(&l2, &sgd),
        max_diff(&sp, &sgd),
        max_diff(&kept.values, &theta),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(check(
        "variant_lattice",
        worst <= 1e-12,
        format!("max deviation from sgd {worst:.2e}"),
    ))
}

fn ou_stationary(seed: u64) -> Result<Check> {
    let spec = MlpSpec::new(vec![1, 1], TaskKind::Regression)?;
    let groups = spec.groups();
    let cells = CellMap::new(SharingScheme::Global, &groups);
    let n = spec.num_params();
    let prior = PriorSpec {
        mu0: vec![0.0; n],
        sigma0: vec![1.0; n],
        sigma_base: vec![1.0; n],
        p: 1.0,
    };
    let drift = DriftState::constant(1, 0.9);
    let mut rng = Lane::new(seed, &[lane::OU]);
    let mut theta = vec![0.0; n];
    let (mut sum, mut sq, mut count) = (0.0, 0.0, 0.0);
    for _ in 0..20_000 {
        theta = ou_sample(&theta, &drift, &prior, &cells, &mut rng);
        for t in &theta {
            sum += t;
            sq += t * t;
            count += 1.0;
        }
    }
    let mean = sum / count;
    let var = sq / count - mean * mean;
    Ok(check(
        "ou_stationary",
        mean.abs() < 0.1 && (0.85..=1.15).contains(&var),
        format!("mean {mean:.4} var {var:.4}"),
    ))
}

fn closed_form_example() -> Result<Check> {
    let spec = MlpSpec::new(vec![1, 1], TaskKind::Regression)?;
    let groups = spec.groups();
    let cells = CellMap::new(SharingScheme::PerLayer, &groups);
    // the bias slot carries a zero gradient so it cannot move its cell
    let cf = closed_form_gamma(
        &[1.0, 0.0],
        &[0.0, 0.0],
        &[0.5, 0.5],
        &[1.0, 1.0],
        &[1.0, 0.0],
        1.0,
        &[1.0, 1.0],
        &cells,
    )?;
    let ok = (cf.unclipped[0] - 8.0 / 7.0).abs() < 1e-12 && cf.drift.gamma[0] == 1.0;
    Ok(check(
        "closed_form_example",
        ok,
        format!(
            "unclipped {:.6} clipped {}",
            cf.unclipped[0], cf.drift.gamma[0]
        ),
    ))
}

fn kl_identity() -> Check {
    let same = gaussian_kl(0.3, 0.7, 0.3, 0.7).abs();
    let apart = gaussian_kl(1.0, 1.0, 0.0, 1.0);
    check(
        "kl_identity",
        same < 1e-15 && (apart - 0.5).abs() < 1e-15,
        format!("kl(p,p) {same:.1e} kl shifted {apart:.6}"),
    )
}

fn csv_schema() -> Result<Check> {
    let spec = MlpSpec::new(vec![3, 4, 2], TaskKind::Classification)?;
    let header = csv_header(&group_labels(&spec));
    let ok = header.first().map(String::as_str) == Some("schema")
        && header.iter().any(|h| h == "gamma_min_w0")
        && !header.iter().any(|h| h.contains("time"));
    Ok(check(
        "csv_schema",
        ok,
        format!("{} columns, schema {SCHEMA_ID}", header.len()),
    ))
}

/// Runs every check. Errors from the library count as failures.
pub fn run_all(seed: u64) -> Vec<Check> {
    let wrap = |name: &'static str, r: Result<Check>| {
        r.unwrap_or_else(|e| check(name, false, format!("error: {e}")))
    };
    vec![
        wrap("mlp_gradients", mlp_gradients(seed)),
        wrap("variant_lattice", variant_lattice(seed)),
        wrap("ou_stationary", ou_stationary(seed)),
        wrap("closed_form_example", closed_form_example()),
        kl_identity(),
        wrap("csv_schema", csv_schema()),
    ]
}
