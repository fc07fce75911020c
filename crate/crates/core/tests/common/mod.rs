#![allow(dead_code)]

use dfgl_core::ddpg::{state_dim, AgentConfig, DdpgController, Transition};
use dfgl_core::Result;

/// Stationary bandit over worker 0's decoded ratio: `u = 1 - 4 (r0 - 0.6)^2`, optimum 1.
pub fn concave_reward(r0: f64) -> f64 {
    1.0 - 4.0 * (r0 - 0.6).powi(2)
}

/// Runs `steps` act/store/train cycles and returns the reward trace.
pub fn run_concave_env(seed: u64, steps: usize, config: AgentConfig) -> Result<Vec<f64>> {
    let m = 2;
    let mut ctl = DdpgController::new(m, config, seed)?;
    let state: Vec<f64> = (0..state_dim(m)).map(|k| (k % 5) as f64).collect();
    ctl.observe(&state);
    let mut rewards = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = ctl.act(&state, true)?;
        let u = concave_reward(action.ratios[0]);
        ctl.store(Transition {
            state: state.clone(),
            action: action.raw,
            reward: u,
            next_state: state.clone(),
        });
        ctl.train()?;
        rewards.push(u);
    }
    Ok(rewards)
}

pub fn tail_mean(xs: &[f64], n: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

use dfgl_core::gcn::{self, ForwardInput, LayerPlan, ModelParams};
use dfgl_core::rng::{seeded, SimRng};
use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut SimRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Random neighbour rows drawn from `0..table_rows`, possibly empty.
fn random_layer(outputs: usize, table_rows: usize, rng: &mut SimRng) -> LayerPlan {
    let neighbor_rows = (0..outputs)
        .map(|_| {
            let k = rng.random_range(0..=table_rows.min(3));
            index::sample(rng, table_rows, k).into_vec()
        })
        .collect();
    LayerPlan {
        self_rows: (0..outputs).collect(),
        neighbor_rows,
    }
}

/// Smallest pre-activation magnitude a finite-difference probe may see. Central
/// differences straddling a ReLU kink measure no derivative at all, so instances
/// with a unit this close to zero are redrawn.
const KINK_MARGIN: f64 = 2e-3;

/// A random 2-layer instance on at most 8 distinct nodes: 3 batch nodes, 5 level-1
/// rows, 7 level-0 rows, and one fetched row at each level.
pub fn tiny_gcn_instance(seed: u64) -> (ModelParams, ForwardInput, Vec<usize>) {
    let mut rng = seeded(seed);
    loop {
        let (params, input, labels) = draw_instance(&mut rng);
        let (_, acts) = gcn::forward(&params, &input, &labels).unwrap();
        let nearest = acts
            .layers
            .iter()
            .flat_map(|c| c.pre.iter())
            .fold(f64::MAX, |m, x| m.min(x.abs()));
        if nearest >= KINK_MARGIN {
            return (params, input, labels);
        }
    }
}

fn draw_instance(rng: &mut SimRng) -> (ModelParams, ForwardInput, Vec<usize>) {
    let (d0, d1, d2, classes) = (3, 4, 4, 3);
    let mut params = ModelParams::init(&[d0, d1, d2], classes, rng).unwrap();
    let flat: Vec<f64> = (0..params.num_params())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.7 * z
        })
        .collect();
    params.set_flat(&flat).unwrap();
    let (n2, n1, n0) = (3, 5, 7);
    let input = ForwardInput {
        features: normal_matrix(n0, d0, 1.0, rng),
        remote: vec![
            normal_matrix(1, d0, 1.0, rng),
            normal_matrix(1, d1, 1.0, rng),
        ],
        layers: vec![random_layer(n1, n0 + 1, rng), random_layer(n2, n1 + 1, rng)],
    };
    let labels = (0..n2).map(|_| rng.random_range(0..classes)).collect();
    (params, input, labels)
}

/// Max relative error of the analytic gradient against central differences.
pub fn gcn_gradient_error(
    params: &ModelParams,
    input: &ForwardInput,
    labels: &[usize],
    eps: f64,
) -> f64 {
    let (_, acts) = gcn::forward(params, input, labels).unwrap();
    let analytic = gcn::backward(params, &acts, labels).flatten();
    let base = params.flatten();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut at = |delta: f64| {
            let mut x = base.clone();
            x[k] += delta;
            probe.set_flat(&x).unwrap();
            gcn::forward(&probe, input, labels).unwrap().0
        };
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    worst
}
