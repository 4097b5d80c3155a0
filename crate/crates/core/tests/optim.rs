use dflora::backbone::Target;
use dflora::optim::fwa::allocate_sparks;
use dflora::optim::{CmaState, FwaConfig, FwaState};
use dflora::subspace::LayerSubspace;
use dflora::tensors::{read_tensors, write_tensors, NamedTensor};
use proptest::prelude::*;

fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spark_allocation_is_exact_bounded_and_rank_ordered(
        keys in prop::collection::vec(-1e3f64..1e3, 1..12),
        lo in 0usize..3,
        span in 0usize..12,
        extra in 0usize..40,
    ) {
        let hi = lo + span;
        let n = keys.len();
        let budget = (n * lo + extra).min(n * hi);
        let counts = allocate_sparks(&keys, budget, (lo, hi));
        prop_assert_eq!(counts.iter().sum::<usize>(), budget);
        prop_assert!(counts.iter().all(|&c| (lo..=hi).contains(&c)));
        for i in 0..n {
            for j in 0..n {
                if keys[i] < keys[j] {
                    prop_assert!(counts[i] >= counts[j]);
                }
            }
        }
    }

    #[test]
    fn fireworks_stay_inside_the_search_box(
        dim in 1usize..6,
        fireworks in 1usize..5,
        extra_sparks in 0usize..16,
        half in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let sparks = fireworks + extra_sparks;
        let cfg = FwaConfig::with_box(dim, fireworks, sparks, (1, sparks), (1e-6, 2.0 * half), -half, half)
            .initial_amplitude(half)
            .horizon(30);
        let mut s = FwaState::new(cfg, seed).unwrap();
        for _ in 0..10 {
            let batch = s.ask();
            prop_assert_eq!(batch.len(), fireworks + sparks);
            for c in &batch.candidates {
                prop_assert!(c.iter().all(|v| (-half..=half).contains(v)));
            }
            let f: Vec<f64> = batch.candidates.iter().map(|c| sphere(c)).collect();
            s.tell(&batch, &f).unwrap();
        }
        for fw in s.fireworks() {
            prop_assert!(fw.amplitude >= 1e-6 && fw.amplitude <= 2.0 * half);
        }
    }

    #[test]
    fn cma_is_reproducible_and_monotone_in_best(seed in any::<u64>(), dim in 2usize..8) {
        let drive = |seed| {
            let mut s = CmaState::new(dim, 8, vec![1.0; dim], 0.5, seed).unwrap();
            let mut bests = Vec::new();
            for _ in 0..15 {
                let b = s.ask();
                let f: Vec<f64> = b.candidates.iter().map(|c| sphere(c)).collect();
                s.tell(&b, &f).unwrap();
                bests.push(s.best().unwrap().1);
            }
            (bests, s.mean().to_vec())
        };
        let (a, mean_a) = drive(seed);
        let (b, mean_b) = drive(seed);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(mean_a, mean_b);
        prop_assert!(a.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn tensor_files_round_trip(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5), seed in any::<u32>()) {
        let tensors: Vec<NamedTensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let data = (0..r * c).map(|k| ((k as f64 + seed as f64) * 0.731).sin()).collect();
                NamedTensor::new(format!("t.{i}"), vec![r, c], data).unwrap()
            })
            .collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        prop_assert_eq!(read_tensors(buf.as_slice()).unwrap(), tensors);
        let last = buf.len() - 40;
        buf[last] ^= 1;
        prop_assert!(read_tensors(buf.as_slice()).is_err());
    }
}

#[test]
fn cma_rejects_non_finite_fitness() {
    let mut s = CmaState::new(3, 6, vec![0.0; 3], 1.0, 1).unwrap();
    let b = s.ask();
    let mut f = vec![1.0; 6];
    f[2] = f64::NAN;
    assert!(s.tell(&b, &f).is_err());
}

#[test]
fn subspace_map_is_bilinear_per_role() {
    let s = LayerSubspace::new(1, &[Target::Q, Target::K], 6, 2, 5, 4, 0.3, 9).unwrap();
    assert_eq!(s.search_dim(), 24);
    let m: Vec<f64> = (0..24).map(|i| (i as f64).cos()).collect();
    let doubled: Vec<f64> = m.iter().map(|v| 2.0 * v).collect();
    let a = s.materialize(&m).unwrap();
    let b = s.materialize(&doubled).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let px = x.product();
        let py = y.product();
        for (u, v) in px.as_slice().iter().zip(py.as_slice()) {
            assert!((4.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }
    assert!(s.materialize(&m[..23]).is_err());
}
