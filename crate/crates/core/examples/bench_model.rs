use biaslab::model::{Model, ModelConfig};
use biaslab::types::{TokenSeq, VisualContext};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::init(cfg.clone(), 1).unwrap();
    let vis = VisualContext::new("a", vec![vec![0.3; 16]; 4]).unwrap();
    let x = TokenSeq::new(vec![2, 3], 64).unwrap();
    let y = TokenSeq::new((0..25).map(|i| 10 + i % 40).collect(), 64).unwrap();
    let mut g = vec![0f32; m.n_params()];
    let t = Instant::now();
    for _ in 0..200 {
        m.accumulate_gradient(Some(&vis), &x, &y, 1.0, &mut g)
            .unwrap();
    }
    println!("fwd+bwd: {:?} per seq", t.elapsed() / 200);
    let t = Instant::now();
    for _ in 0..200 {
        m.score_sequence(None, &x, &y).unwrap();
    }
    println!(
        "fwd: {:?} per seq, params {}",
        t.elapsed() / 200,
        m.n_params()
    );
}
