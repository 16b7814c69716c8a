//! Scene-object interaction: additive attention between each object and the
//! shared scene feature, the class-weighted multi-label scene loss, and the
//! object classification head used when labels must be predicted.

use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("class counts are all zero")]
    EmptyCounts,
    #[error("multi-label target has no positive entry")]
    NoPositiveLabel,
    #[error("multi-label target entries must be 0 or 1")]
    NonBinaryTarget,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `a_i = relu(w_g · (f_o + f_s))`, one scalar per object.
pub fn interaction_coefficient(
    g: &mut Graph<'_>,
    f_o: Var,
    f_s: Var,
    w_g: Var,
) -> Result<Var, SceneError> {
    let sum = g.add(f_o, f_s)?;
    let z = g.dot(w_g, sum)?;
    Ok(g.relu(z))
}

/// `f̃_o = f_o + a_i · f_s`.
pub fn refine_object_feature(
    g: &mut Graph<'_>,
    f_o: Var,
    f_s: Var,
    a_i: Var,
) -> Result<Var, SceneError> {
    let scaled = g.scale_by(f_s, a_i)?;
    Ok(g.add(f_o, scaled)?)
}

/// Inverse-frequency class weights rescaled to mean 1.
///
/// A class that never occurs gets the weight of the rarest observed class.
pub fn class_weights(counts: &[u64]) -> Result<Vec<f64>, SceneError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(SceneError::EmptyCounts);
    }
    let min_seen = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(1);
    let inv: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 / c.max(min_seen) as f64)
        .collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Binary multi-label target over object classes from the labels present in a scene.
pub fn multilabel_target(labels: impl IntoIterator<Item = usize>, n_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_classes];
    for l in labels {
        t[l] = 1.0;
    }
    t
}

/// `Σ_c W_c · BCE(sigmoid(head · f_s + bias)_c, l_c)`.
pub fn scene_multilabel_loss(
    g: &mut Graph<'_>,
    f_s: Var,
    head: Var,
    bias: Var,
    target: &[f64],
    weights: &[f64],
) -> Result<Var, SceneError> {
    if target.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(SceneError::NonBinaryTarget);
    }
    if !target.iter().any(|&l| l == 1.0) {
        return Err(SceneError::NoPositiveLabel);
    }
    let z = g.matvec(head, f_s)?;
    let z = g.add(z, bias)?;
    Ok(g.weighted_bce_with_logits(z, target, weights)?)
}

/// Object-class logits from a refined feature.
pub fn object_logits(g: &mut Graph<'_>, f: Var, head: Var, bias: Var) -> Result<Var, SceneError> {
    let z = g.matvec(head, f)?;
    Ok(g.add(z, bias)?)
}

/// Distribution over object classes.
pub fn classify_objects(
    g: &mut Graph<'_>,
    f: Var,
    head: Var,
    bias: Var,
) -> Result<Var, SceneError> {
    let z = object_logits(g, f, head, bias)?;
    Ok(g.softmax(z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{numeric_grad, rel_err};
    use crate::numerics::{weighted_bce, DiffTensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coefficient_examples() {
        let mut g = Graph::new();
        let f_o = g.vector(vec![2.0, 0.0], false);
        let f_s = g.vector(vec![1.0, 1.0], false);
        let zero = g.vector(vec![0.0, 0.0], false);
        let a = interaction_coefficient(&mut g, f_o, f_s, zero).unwrap();
        assert_eq!(g.item(a), 0.0);

        let w = g.vector(vec![1.0, -1.0], false);
        let a = interaction_coefficient(&mut g, f_o, f_s, w).unwrap();
        assert_eq!(g.item(a), 2.0);

        let neg = g.vector(vec![-1.0, 1.0], false);
        let a = interaction_coefficient(&mut g, f_o, f_s, neg).unwrap();
        assert_eq!(g.item(a), 0.0);

        let short = g.vector(vec![1.0], false);
        assert!(interaction_coefficient(&mut g, f_o, f_s, short).is_err());
    }

    #[test]
    fn refine_examples() {
        let mut g = Graph::new();
        let f_o = g.vector(vec![0.3, -1.7, 2.5], false);
        let f_s = g.vector(vec![9.0, 9.0, 9.0], false);
        let zero = g.scalar(0.0, false);
        let r = refine_object_feature(&mut g, f_o, f_s, zero).unwrap();
        assert_eq!(g.value(r), g.value(f_o));

        let o = g.vector(vec![0.0; 3], false);
        let one = g.scalar(1.0, false);
        let r = refine_object_feature(&mut g, o, f_s, one).unwrap();
        assert_eq!(g.value(r), g.value(f_s));

        let f_o = g.vector(vec![1.0, 1.0], false);
        let f_s = g.vector(vec![0.5, -0.5], false);
        let two = g.scalar(2.0, false);
        let r = refine_object_feature(&mut g, f_o, f_s, two).unwrap();
        assert_eq!(g.value(r), &[2.0, 0.0]);
    }

    #[test]
    fn coefficient_ignores_other_objects() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let objs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let scene: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coeffs = |order: &[usize]| -> Vec<f64> {
            let mut g = Graph::new();
            let fs = g.input(&scene);
            let wv = g.input(&w);
            let mut out = vec![0.0; objs.len()];
            for &i in order {
                let fo = g.input(&objs[i]);
                let a = interaction_coefficient(&mut g, fo, fs, wv).unwrap();
                out[i] = g.item(a);
            }
            out
        };
        assert_eq!(coeffs(&[0, 1, 2, 3, 4]), coeffs(&[4, 2, 0, 3, 1]));
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[10, 10]).unwrap(), vec![1.0, 1.0]);
        let w = class_weights(&[90, 10]).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 1.8).abs() < 1e-12);
        assert_eq!(class_weights(&[0, 0]), Err(SceneError::EmptyCounts));
        let w = class_weights(&[5, 0, 1]).unwrap();
        assert_eq!(w[1], w[2]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let counts: Vec<u64> = (0..rng.gen_range(1..40))
                .map(|_| rng.gen_range(1..1000))
                .collect();
            let w = class_weights(&counts).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            assert!((mean - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn multilabel_loss_examples() {
        assert_eq!(
            weighted_bce(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], &[0.5, 1.0, 1.5]),
            0.0
        );

        // Zero logits give p = 0.5 for every class.
        let head = DiffTensor::zeros(vec![2, 3], true);
        let bias = DiffTensor::zeros(vec![2], true);
        let mut g = Graph::new();
        let fs = g.vector(vec![0.2, -0.3, 0.9], false);
        let (h, b) = (g.param(&head), g.param(&bias));
        let l = scene_multilabel_loss(&mut g, fs, h, b, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((g.item(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let l2 = scene_multilabel_loss(&mut g, fs, h, b, &[1.0, 0.0], &[2.0, 2.0]).unwrap();
        assert!((g.item(l2) - 2.0 * g.item(l)).abs() < 1e-12);

        assert_eq!(
            scene_multilabel_loss(&mut g, fs, h, b, &[1.0, 0.5], &[1.0, 1.0]).unwrap_err(),
            SceneError::NonBinaryTarget
        );
        assert_eq!(
            scene_multilabel_loss(&mut g, fs, h, b, &[0.0, 0.0], &[1.0, 1.0]).unwrap_err(),
            SceneError::NoPositiveLabel
        );
    }

    #[test]
    fn multilabel_loss_gradient_and_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n_c, d) = (4, 3);
        let fs: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = [1.0, 0.0, 0.0, 1.0];
        let weights = class_weights(&[5, 20, 10, 1]).unwrap();
        let loss_of = |w: &[f64]| {
            let head = DiffTensor::new(vec![n_c, d], w.to_vec(), true).unwrap();
            let bias = DiffTensor::zeros(vec![n_c], false);
            let mut g = Graph::new();
            let (h, b) = (g.param(&head), g.param(&bias));
            let f = g.input(&fs);
            let l = scene_multilabel_loss(&mut g, f, h, b, &target, &weights).unwrap();
            let grad = {
                g.backward(l).unwrap();
                g.grad(h).to_vec()
            };
            (g.item(l), grad)
        };
        let mut w: Vec<f64> = (0..n_c * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (_, analytic) = loss_of(&w);
        let numeric = numeric_grad(&mut |x| loss_of(x).0, &w, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-4);
        }
        let initial = loss_of(&w).0;
        assert!(initial >= 0.0);
        for _ in 0..50 {
            let (_, grad) = loss_of(&w);
            w.iter_mut().zip(&grad).for_each(|(x, g)| *x -= 0.05 * g);
        }
        assert!(loss_of(&w).0 < initial);
    }

    #[test]
    fn zero_object_head_is_uniform() {
        let head = DiffTensor::zeros(vec![5, 3], true);
        let bias = DiffTensor::zeros(vec![5], true);
        let mut g = Graph::new();
        let (h, b) = (g.param(&head), g.param(&bias));
        let f = g.vector(vec![1.0, 2.0, 3.0], false);
        let p = classify_objects(&mut g, f, h, b).unwrap();
        for v in g.value(p) {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!((g.value(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn object_head_learns_separable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n_c, d) = (4, 6);
        let protos: Vec<Vec<f64>> = (0..n_c)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let samples: Vec<(Vec<f64>, usize)> = (0..200)
            .map(|i| {
                let c = i % n_c;
                (
                    protos[c]
                        .iter()
                        .map(|x| x + rng.gen_range(-0.1..0.1))
                        .collect(),
                    c,
                )
            })
            .collect();
        let mut head = DiffTensor::zeros(vec![n_c, d], true);
        let mut bias = DiffTensor::zeros(vec![n_c], true);
        for _ in 0..30 {
            for (x, c) in &samples {
                let (gh, gb) = {
                    let mut g = Graph::new();
                    let (h, b) = (g.param(&head), g.param(&bias));
                    let f = g.input(x);
                    let z = object_logits(&mut g, f, h, b).unwrap();
                    let l = g.cross_entropy(z, *c).unwrap();
                    g.backward(l).unwrap();
                    (g.grad(h).to_vec(), g.grad(b).to_vec())
                };
                head.value_mut()
                    .iter_mut()
                    .zip(&gh)
                    .for_each(|(w, g)| *w -= 0.1 * g);
                bias.value_mut()
                    .iter_mut()
                    .zip(&gb)
                    .for_each(|(w, g)| *w -= 0.1 * g);
            }
        }
        let correct = samples
            .iter()
            .filter(|(x, c)| {
                let mut g = Graph::new();
                let (h, b) = (g.param(&head), g.param(&bias));
                let f = g.input(x);
                let p = classify_objects(&mut g, f, h, b).unwrap();
                let v = g.value(p);
                let arg = (0..n_c).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
                arg == *c
            })
            .count();
        assert!(correct as f64 / samples.len() as f64 >= 0.95);
    }
}
