use spaceedit_tensor::{Graph, Tensor};

fn main() {
    let x = Tensor::<f32>::from_fn(vec![16, 32, 32, 32], |i| {
        ((i * 7919) % 1000) as f32 / 1000.0
    });
    let w = Tensor::<f32>::from_fn(vec![32, 32, 3, 3], |i| {
        ((i * 31) % 100) as f32 / 100.0 - 0.5
    });
    let t = std::time::Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let wv = g.variable(w.clone());
        let y = g.conv2d(xv, wv, 1);
        let y = g.leaky_relu(y, 0.2);
        let l = g.sum_all(y);
        let _ = g.backward(l);
    }
    println!("conv fwd+bwd: {:?}/iter", t.elapsed() / 10);
}
