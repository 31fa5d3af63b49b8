//! Records a small two-layer network on the tape, runs reverse mode and
//! compares every parameter gradient against central differences.

use mmalign::autodiff::grad_check_finite_diff;
use mmalign::rng::Stream;
use mmalign::{ParamSet, Result, Tape, Tensor, Var};

fn random(rng: &mut Stream, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, std)).expect("shape matches data")
}

fn network<'p>(tape: &mut Tape<'p, f64>, p: &'p ParamSet<f64>, x: &Tensor<f64>) -> Result<Var> {
    let input = tape.constant(x.clone())?;
    let w1 = tape.param(p, "w1")?;
    let b1 = tape.param(p, "b1")?;
    let gain = tape.param(p, "gain")?;
    let w2 = tape.param(p, "w2")?;
    let h = tape.matmul(input, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.silu(h)?;
    let h = tape.rms_norm(h, gain)?;
    let y = tape.matmul(h, w2)?;
    let y = tape.l2_normalize(y)?;
    let sq = tape.mul(y, y)?;
    let sq = tape.exp(sq)?;
    tape.mean(sq)
}

fn main() -> Result<()> {
    let mut rng = Stream::new(7, 0);
    let x = random(&mut rng, 5, 6, 1.0);

    let mut params = ParamSet::new();
    params.insert("w1", random(&mut rng, 6, 8, 0.4));
    params.insert("b1", Tensor::vector(rng.normal_vec(8, 0.1)));
    params.insert("gain", Tensor::vector(vec![1.0; 8]));
    params.insert("w2", random(&mut rng, 8, 3, 0.4));

    let mut tape = Tape::new();
    let out = network(&mut tape, &params, &x)?;
    println!("forward value {:.6}", tape.value(out).data()[0]);
    let grads = tape.backward(out)?;
    for (name, g) in grads.params(&tape) {
        println!("  d/d{name:<5} norm {:.6}", g.norm());
    }

    let report = grad_check_finite_diff(|tape, p| network(tape, p, &x), &params, 1e-5)?;
    println!(
        "{} coordinates checked, worst relative error {:.2e} at {}[{}]",
        report.coordinates, report.max_rel_error, report.worst_param, report.worst_index
    );
    Ok(())
}
