//! Permutation-invariant diarization loss: the loss of a prediction does not
//! depend on the order of its speaker columns.
//!
//! `cargo run --example pit_loss`

use eend::numerics::Tensor;
use eend::training::{pit_loss, PitSearch};

fn main() -> eend::Result<()> {
    let y = Tensor::from_fn(6, 3, |t, s| (t / 2 == s) as u8 as f64);
    let p = Tensor::from_fn(6, 3, |t, s| if t / 2 == (s + 1) % 3 { 0.9 } else { 0.1 });
    for search in [PitSearch::Exhaustive, PitSearch::Hungarian] {
        let r = pit_loss(&p, &y, search)?;
        println!("{search:?}: loss {:.4}, permutation {:?}", r.loss, r.permutation);
    }
    Ok(())
}
