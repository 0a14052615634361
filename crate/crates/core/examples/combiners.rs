//! Shows how each combiner merges the summary vector into the learned
//! attractor slots.
//!
//! `cargo run --example combiners`

use eend::attractors_ta::{combine, CombinerKind};
use eend::numerics::{Graph, ParamStore, Tensor};

fn main() -> eend::Result<()> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let global = g.constant(Tensor::from_fn(3, 2, |i, j| (i + 2 * j) as f64 - 1.0));
    let u = g.constant(Tensor::from_fn(3, 1, |i, _| i as f64 - 1.0));
    println!("global slots (3x2): {:?}", g.value(global).data());
    println!("summary (3x1):      {:?}", g.value(u).data());
    for kind in [CombinerKind::None, CombinerKind::Add, CombinerKind::Mult, CombinerKind::Amp(1.0), CombinerKind::Amp(2.0)] {
        let out = combine(&mut g, Some(u), global, kind)?;
        let vals: Vec<String> = g.value(out).data().iter().map(|v| format!("{v:6.3}")).collect();
        println!("{:10} {}", format!("{kind:?}"), vals.join(" "));
    }
    Ok(())
}
