//! Central finite-difference verification of the three analytic
//! gradients (component weights λ, task heads β, factor rows u) against
//! their frozen-surrogate objectives.

use densecore::augment::{batch_aux, task_aux};
use densecore::infer::{grad_beta, grad_factor, grad_lambda, seeded_stream};
use densecore::model::{init_state, Hyperparams, LabelMode, LabelSet, ModelState};
use densecore::objective::{log_post_beta, log_post_factor, log_post_lambda};
use densecore::tensor::{Cell, EntityMap, MiniBatch, TensorScheme};
use rand::Rng;

const DIMS: [usize; 3] = [7, 6, 5];
const H: f64 = 1e-5;

fn scheme() -> TensorScheme {
    let mut entity_maps = Vec::new();
    for (k, &n) in DIMS.iter().enumerate() {
        let mut m = EntityMap::default();
        for i in 0..n {
            m.intern(&format!("m{k}e{i}"));
        }
        entity_maps.push(m);
    }
    TensorScheme {
        mode_names: vec!["user".into(), "item".into(), "slot".into()],
        cardinalities: DIMS.to_vec(),
        entity_maps,
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn main() {
    let labels = {
        let entries: Vec<(usize, usize, f64)> = (0..DIMS[0])
            .map(|e| (e, 0, if e % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        LabelSet::new(0, vec!["fraud".into()], &entries).unwrap()
    };
    let mut worst: f64 = 0.0;

    for trial in 0..10 {
        let mut rng = seeded_stream(trial, 17);
        let hyper = Hyperparams { rank: 4, seed: trial, ..Default::default() };
        let state: ModelState =
            init_state(&scheme(), std::slice::from_ref(&labels), &hyper, &mut rng, None).unwrap();
        let cells: Vec<Cell> = (0..16)
            .map(|i| Cell {
                indices: DIMS.iter().map(|&n| rng.random_range(0..n)).collect(),
                y: (i % 2) as u8,
            })
            .collect();
        let batch = MiniBatch { cells, t: 0 };
        let aux = batch_aux(&state, &batch, LabelMode::Observed);
        let t_aux = vec![task_aux(&state, 0, 0, labels.task_entries(0))];

        // λ block
        let g = grad_lambda(&state, &batch, &aux);
        for r in 0..4 {
            let mut plus = state.clone();
            plus.lambda[r] += H;
            let mut minus = state.clone();
            minus.lambda[r] -= H;
            let numeric = (log_post_lambda(&plus, &batch, &aux).total()
                - log_post_lambda(&minus, &batch, &aux).total())
                / (2.0 * H);
            worst = worst.max(rel_err(g[r], numeric));
        }

        // β block
        let g = grad_beta(&state, 0, 0, &labels, &t_aux[0]);
        for r in 0..5 {
            let mut plus = state.clone();
            plus.heads.get_mut(&0).unwrap()[0][r] += H;
            let mut minus = state.clone();
            minus.heads.get_mut(&0).unwrap()[0][r] -= H;
            let numeric = (log_post_beta(&plus, 0, 0, &labels, &t_aux[0]).total()
                - log_post_beta(&minus, 0, 0, &labels, &t_aux[0]).total())
                / (2.0 * H);
            worst = worst.max(rel_err(g[r], numeric));
        }

        // one factor row, with the supervision term active
        let entity = batch.cells[0].indices[0];
        let cell_ids: Vec<usize> = (0..batch.cells.len())
            .filter(|&i| batch.cells[i].indices[0] == entity)
            .collect();
        let g = grad_factor(&state, 0, entity, &batch, &cell_ids, &aux, Some(&labels), Some(&t_aux));
        for r in 0..4 {
            let mut plus = state.clone();
            plus.factors[0][(entity, r)] += H;
            let mut minus = state.clone();
            minus.factors[0][(entity, r)] -= H;
            let numeric = (log_post_factor(&plus, 0, entity, &batch, &aux, Some(&labels), Some(&t_aux))
                .total()
                - log_post_factor(&minus, 0, entity, &batch, &aux, Some(&labels), Some(&t_aux))
                    .total())
                / (2.0 * H);
            worst = worst.max(rel_err(g[r], numeric));
        }
        println!("trial {trial}: worst relative error so far {worst:.3e}");
    }

    println!(
        "\nall three gradient families vs central differences (h = {H:.0e}): worst {worst:.3e}"
    );
    assert!(worst < 1e-5, "gradient check failed");
    println!("PASS");
}
