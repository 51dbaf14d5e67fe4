use ndarray::Array2;
use nmfhmm::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Frames drawn from a sticky two-state chain; state 0 only excites the
/// lower half of the bins, state 1 only the upper half.
fn planted(rng: &mut ChaCha8Rng, bins: usize, frames: usize) -> (Array2<f64>, Vec<usize>) {
    let half = bins / 2;
    let shapes: Vec<Vec<f64>> = (0..2)
        .map(|s| {
            (0..bins)
                .map(|f| if (f < half) == (s == 0) { rng.gen_range(0.5..1.5) } else { 0.0 })
                .collect()
        })
        .collect();
    let mut state = rng.gen_range(0..2);
    let mut labels = Vec::with_capacity(frames);
    let mut v = Array2::zeros((bins, frames));
    for n in 0..frames {
        if n > 0 && rng.gen::<f64>() < 0.1 {
            state = 1 - state;
        }
        labels.push(state);
        let level = rng.gen_range(5.0..50.0);
        for f in 0..bins {
            v[[f, n]] = shapes[state][f] * level * rng.gen_range(0.8..1.2);
        }
    }
    (v, labels)
}

#[test]
fn planted_two_state_model_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<_> = (0..3).map(|_| planted(&mut rng, 16, 120)).collect();
    let specs: Vec<Array2<f64>> = data.iter().map(|(v, _)| v.clone()).collect();
    let cfg = TrainConfig {
        states: 2,
        basis: 2,
        iterations: 20,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&specs, &cfg).unwrap();

    // best of the two state labellings
    let mut best = 0.0;
    for perm in [[0usize, 1], [1, 0]] {
        let (mut mass, mut frames) = (0.0, 0);
        for ((_, labels), post) in data.iter().zip(&out.posteriors) {
            for (n, &s) in labels.iter().enumerate() {
                mass += post.gamma[[perm[s], n]];
                frames += 1;
            }
        }
        best = f64::max(best, mass / frames as f64);
    }
    assert!(best >= 0.99, "posterior mass on the planted partition {best}");
}
