//! Automatic rank selection through the multiplicative gamma prior: plant
//! a rank-2 structure, fit with rank bound 5, and watch the surplus
//! component weights shrink toward zero.

use densecore::infer::{fit, lambda_small_count, seeded_stream, FitOptions};
use densecore::model::Hyperparams;
use densecore::synth::{generate, CoreSpec, SynthConfig};

fn main() {
    // two reviewer-product blocks spanning every rating and week, with no
    // background noise: the observed tensor is exactly two rank-1 boxes
    let config = SynthConfig {
        entity_names: vec!["reviewer".into(), "product".into()],
        entity_sizes: vec![500, 300],
        weeks: 20,
        background_tuples: 0,
        cores: vec![
            CoreSpec {
                groups: vec![(0, 20), (0, 50)],
                rating_band: (1, 5),
                window: (0, 19),
                density: 0.5,
                tasks: vec![0],
            },
            CoreSpec {
                groups: vec![(20, 20), (50, 50)],
                rating_band: (1, 5),
                window: (0, 19),
                density: 0.5,
                tasks: vec![0],
            },
        ],
        tasks: 1,
        label_fraction: 0.3,
    };

    for seed in 0..5u64 {
        let mut rng = seeded_stream(9000 + seed, u64::MAX);
        let data = generate(&config, &mut rng).unwrap();
        let hyper = Hyperparams {
            rank: 5,
            max_iters: 1000,
            batch_size: 4096,
            init_scale: 0.4,
            b1: 2.0,
            delay: 512.0,
            seed,
            ..Default::default()
        };
        let (state, _) = fit(&data.tensor, &data.labels, &hyper, &FitOptions::default()).unwrap();
        let mut mags: Vec<f64> = state.lambda.iter().map(|l| l.abs()).collect();
        mags.sort_by(f64::total_cmp);
        mags.reverse();
        let small = lambda_small_count(&state.lambda);
        println!(
            "seed {seed}: |lambda| sorted {:?}, {small}/5 below 0.1 x max",
            mags.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>()
        );
    }
}
