//! Central finite-difference gradient checker.
//!
//! The numeric side only ever evaluates the forward pass on constant leaves,
//! so it shares no code path with the backward rules it audits.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// (input index, element index) where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Floor on the relative-error denominator so that gradients which are
/// zero analytically are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t)).collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = perturbed.iter().map(|t| g.constant(t)).collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        Ok(g.scalar(root))
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Reduces any output to a scalar through a fixed random weighting, so that
/// ops whose plain sum is constant (softmax, normalization) still get a
/// non-trivial gradient.
fn weighted(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (((i as u64 + 1) * 2_654_435_761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
    let w = g.input(&shape, w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Runs the finite-difference check over every tape operator on random inputs.
pub fn operator_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::autodiff::Reduction;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    // relu is checked away from its kink
    let mut relu_in = r(&[3, 4]);
    relu_in.data_mut().iter_mut().for_each(|x| {
        if x.abs() < 0.1 {
            *x += 0.3;
        }
    });
    let mut positive = r(&[3, 1]);
    positive.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.5);

    let cases: Vec<Case> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|g, v| { let o = g.matmul(v[0], v[1])?; weighted(g, o, 1) })),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| { let o = g.add(v[0], v[1])?; weighted(g, o, 2) })),
        ("add_row", vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| { let o = g.add(v[0], v[1])?; weighted(g, o, 3) })),
        ("add_col", vec![r(&[3, 4]), r(&[3, 1])], Box::new(|g, v| { let o = g.add(v[0], v[1])?; weighted(g, o, 4) })),
        ("sub", vec![r(&[3, 4]), r(&[1])], Box::new(|g, v| { let o = g.sub(v[0], v[1])?; weighted(g, o, 5) })),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| { let o = g.mul(v[0], v[1])?; weighted(g, o, 6) })),
        ("mul_col", vec![r(&[3, 4]), r(&[3, 1])], Box::new(|g, v| { let o = g.mul(v[0], v[1])?; weighted(g, o, 7) })),
        ("div", vec![r(&[3, 4]), positive], Box::new(|g, v| { let o = g.div(v[0], v[1])?; weighted(g, o, 8) })),
        ("scale", vec![r(&[2, 3])], Box::new(|g, v| { let o = g.scale(v[0], -1.7)?; weighted(g, o, 9) })),
        ("softmax", vec![r(&[3, 5])], Box::new(|g, v| { let o = g.softmax(v[0], false)?; weighted(g, o, 10) })),
        ("softmax_causal", vec![r(&[4, 4])], Box::new(|g, v| { let o = g.softmax(v[0], true)?; weighted(g, o, 11) })),
        (
            "layer_norm",
            vec![r(&[3, 5]), r(&[5]), r(&[5])],
            Box::new(|g, v| { let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted(g, o, 12) }),
        ),
        ("gelu", vec![r(&[3, 4])], Box::new(|g, v| { let o = g.gelu(v[0])?; weighted(g, o, 13) })),
        ("relu", vec![relu_in], Box::new(|g, v| { let o = g.relu(v[0])?; weighted(g, o, 14) })),
        (
            "embedding",
            vec![r(&[6, 3])],
            Box::new(|g, v| { let o = g.embedding(v[0], &[4, 1, 4, 0])?; weighted(g, o, 15) }),
        ),
        ("reshape", vec![r(&[3, 4])], Box::new(|g, v| { let o = g.reshape(v[0], &[2, 6])?; weighted(g, o, 16) })),
        ("transpose", vec![r(&[3, 4])], Box::new(|g, v| { let o = g.transpose(v[0])?; weighted(g, o, 17) })),
        ("sum", vec![r(&[3, 4])], Box::new(|g, v| { let o = g.mul(v[0], v[0])?; g.sum(o) })),
        ("mean", vec![r(&[3, 4])], Box::new(|g, v| { let o = g.mul(v[0], v[0])?; g.mean(o) })),
        ("mean_rows", vec![r(&[3, 4])], Box::new(|g, v| { let o = g.mean_rows(v[0])?; weighted(g, o, 18) })),
        ("row_sums", vec![r(&[3, 4])], Box::new(|g, v| { let o = g.row_sums(v[0])?; weighted(g, o, 19) })),
        ("slice_cols", vec![r(&[3, 5])], Box::new(|g, v| { let o = g.slice_cols(v[0], 1, 4)?; weighted(g, o, 20) })),
        (
            "concat_cols",
            vec![r(&[3, 2]), r(&[3, 3])],
            Box::new(|g, v| { let o = g.concat_cols(&[v[0], v[1]])?; weighted(g, o, 21) }),
        ),
        ("l2_normalize_rows", vec![r(&[3, 4])], Box::new(|g, v| { let o = g.l2_normalize_rows(v[0])?; weighted(g, o, 22) })),
        (
            "cross_entropy_mean",
            vec![r(&[4, 5])],
            Box::new(|g, v| g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)], Reduction::Mean)),
        ),
        (
            "cross_entropy_sum",
            vec![r(&[3, 5])],
            Box::new(|g, v| g.cross_entropy(v[0], &[Some(2), Some(2), Some(3)], Reduction::Sum)),
        ),
    ];

    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_gradients(&inputs, 1e-5, f)?)))
        .collect()
}
