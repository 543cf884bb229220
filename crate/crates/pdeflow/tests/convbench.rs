use pdeflow::model::VectorFieldModel;
use pdeflow::rng::{standard_normal, stream_rng};
use pdeflow::tensor::Tensor;
use std::time::Instant;

#[test]
#[ignore]
fn conv_throughput() {
    let m = VectorFieldModel::init(1, 12, 1);
    let mut rng = stream_rng(1, 0);
    let x = Tensor::new(vec![1, 33, 33], standard_normal(&mut rng, 33 * 33)).unwrap();
    let start = Instant::now();
    let n = 300;
    for i in 0..n {
        let t = i as f64 / n as f64;
        let _ = m.forward_base(&x, t).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    // rough flop count per eval at hidden 12, 33x33
    println!("forward: {:.1} evals/s", n as f64 / dt);
    let cot = Tensor::new(vec![1, 33, 33], standard_normal(&mut rng, 33 * 33)).unwrap();
    let start = Instant::now();
    for i in 0..n {
        let t = i as f64 / n as f64;
        let _ = m.param_gradient(&x, t, &cot).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    println!("fwd+bwd: {:.1} evals/s", n as f64 / dt);
}
