use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eend::commands::loglog_slope;
use eend::encoder::EmbeddingMatrix;
use eend::model::{AttractorKind, Model, ModelConfig};
use eend::numerics::{Graph, Tensor};

const FRAMES: [usize; 4] = [250, 500, 1000, 2000];
const REPEATS: usize = 11;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// With the encoder output fixed, decoding S+1 transformer attractors costs
// time linear in the number of frames.
#[test]
fn transformer_attractor_decoding_scales_linearly() {
    let cfg = ModelConfig {
        attractor: AttractorKind::Ta,
        ..ModelConfig::default()
    };
    let (store, model) = Model::build::<f32>(&cfg, 0).unwrap();
    let k = cfg.max_speakers + 1;
    let d = cfg.encoder.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let secs: Vec<f64> = pool.install(|| {
        FRAMES
            .iter()
            .map(|&t| {
                let emb = EmbeddingMatrix {
                    e: Tensor::<f32>::from_fn(d, t, |_, _| rng.random_range(-1.0..1.0)),
                    csv: Some(Tensor::from_fn(d, 1, |_, _| rng.random_range(-1.0..1.0))),
                };
                let run = || {
                    let mut g = Graph::inference(&store);
                    let enc = emb.to_graph(&mut g);
                    let a = model.attractors(&mut g, enc, k, None).unwrap();
                    std::hint::black_box(g.value(a.attractors).sum());
                };
                run();
                median(
                    (0..REPEATS)
                        .map(|_| {
                            let t0 = Instant::now();
                            run();
                            t0.elapsed().as_secs_f64()
                        })
                        .collect(),
                )
            })
            .collect()
    });
    let x: Vec<f64> = FRAMES.iter().map(|&t| t as f64).collect();
    let slope = loglog_slope(&x, &secs);
    println!("frames {FRAMES:?} seconds {secs:?} exponent {slope:.3}");
    assert!((0.8..=1.3).contains(&slope), "exponent {slope:.3}, seconds {secs:?}");
}
