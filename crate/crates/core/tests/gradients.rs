//! Analytic gradients against central finite differences.

use onebyte_core::rng::GaussianStream;
use onebyte_core::tasks::{Task, TaskKind};

const H: f64 = 1e-3;

fn finite_difference(task: &Task, theta: &[f64], batch: &onebyte_core::Batch) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let plus = task.loss_at(&x, batch).unwrap();
            x[i] = orig - H;
            let minus = task.loss_at(&x, batch).unwrap();
            x[i] = orig;
            (plus - minus) / (2.0 * H)
        })
        .collect()
}

fn max_relative_error(task: &Task, points: usize, scale: f64) -> f64 {
    let mut z = GaussianStream::new(0x5EED ^ task.dim() as u64);
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let theta: Vec<f64> = (0..task.dim()).map(|_| scale * z.next_normal()).collect();
        let batch = task.batch(0, p as u64);
        let exact = task.analytic_gradient(&theta, &batch).unwrap();
        let fd = finite_difference(task, &theta, &batch);
        let norm = exact.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let diff = exact.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff / norm.max(1e-12));
    }
    worst
}

#[test]
fn quadratic_matches_finite_differences() {
    let task = Task::new(TaskKind::Quadratic { dim: 12 }, 1);
    assert!(max_relative_error(&task, 20, 1.0) < 1e-4);
}

#[test]
fn linear_matches_finite_differences() {
    let task = Task::new(TaskKind::Linear { dim: 12 }, 2);
    assert!(max_relative_error(&task, 20, 1.0) < 1e-4);
}

#[test]
fn logistic_matches_finite_differences() {
    let task = Task::new(TaskKind::Logistic { features: 8 }, 3);
    let e = max_relative_error(&task, 20, 0.5);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn mlp_matches_finite_differences() {
    let task = Task::new(
        TaskKind::Mlp {
            inputs: 6,
            hidden: 10,
            classes: 3,
        },
        4,
    );
    let e = max_relative_error(&task, 20, 0.5);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn logistic_gradient_at_origin_is_batch_mean() {
    let task = Task::new(TaskKind::Logistic { features: 5 }, 9).with_batch_size(64);
    let batch = task.batch(2, 7);
    let theta = vec![0.0f32; task.dim()];
    let g = task.analytic_gradient(&theta, &batch).unwrap();
    let n = batch.len() as f64;
    for j in 0..5 {
        let want: f64 = (0..batch.len())
            .map(|i| (0.5 - batch.labels[i] as f64) * batch.row(i)[j] as f64)
            .sum::<f64>()
            / n;
        assert!((g[j] - want).abs() < 1e-12);
    }
    let bias: f64 = batch.labels.iter().map(|y| 0.5 - *y as f64).sum::<f64>() / n;
    assert!((g[5] - bias).abs() < 1e-12);
}
