//! Wall-clock shape of the two product orders. Everything runs inside one
//! test so that no other test competes for the CPU while timing.

use lmec_core::attention::{dynamic_dispatch, OrderPolicy, ProductOrder};
use lmec_core::bench::{run_latency_sweep, variant_specs, BenchConfig, BenchRecord};
use lmec_core::kernels::{ActivationKind, PeKind};
use lmec_core::numerics::Rng;

const LENGTHS: [usize; 8] = [16, 32, 64, 128, 256, 512, 1024, 2048];
const D_K: usize = 64;
const ROUNDS: usize = 15;

fn fastest(records: &[BenchRecord], pe: PeKind, order: ProductOrder, label_order: &str) -> Vec<f64> {
    LENGTHS
        .iter()
        .map(|&n| {
            records
                .iter()
                .find(|r| r.pe == pe && r.order == order && r.n == n && r.label.ends_with(label_order))
                .unwrap_or_else(|| panic!("missing record {pe} {order} {n}"))
                .median_s
        })
        .collect()
}

#[test]
fn product_order_timing_shape() {
    let mut rng = Rng::new(5);
    let mut variants = Vec::new();
    for order in [OrderPolicy::Left, OrderPolicy::Right, OrderPolicy::Dynamic] {
        variants.extend(variant_specs(
            &[PeKind::LmApe],
            ActivationKind::EluPlusOne,
            order,
            true,
            D_K,
            1,
            2048,
            &mut rng,
        ));
    }
    let mut cfg = BenchConfig {
        variants,
        seq_lengths: LENGTHS.to_vec(),
        batch: 1,
        warmup_iters: 1,
        measured_iters: 1,
        seed: 5,
        output_path: None,
    };
    run_latency_sweep(&cfg).unwrap();
    cfg.warmup_iters = 0;

    // rounds interleave all lengths so background load hits each alike; the
    // fastest round per length estimates its intrinsic cost
    let mut records = run_latency_sweep(&cfg).unwrap();
    for _ in 1..ROUNDS {
        for (best, r) in records.iter_mut().zip(run_latency_sweep(&cfg).unwrap()) {
            best.median_s = best.median_s.min(r.median_s);
        }
    }
    // dynamic records carry the order the dispatch rule picks
    for r in records.iter().filter(|r| r.label.ends_with("dynamic")) {
        assert_eq!(r.order, dynamic_dispatch(&cfg.variants[2], r.n), "n = {}", r.n);
    }

    let left = fastest(&records, PeKind::LmApe, ProductOrder::Left, "left");
    let right = fastest(&records, PeKind::LmApe, ProductOrder::Right, "right");
    for (i, n) in LENGTHS.iter().enumerate() {
        eprintln!("n={n:5} left={:.6}s right={:.6}s", left[i], right[i]);
    }

    // quadratic against linear growth over the two largest doublings
    for i in LENGTHS.len() - 2..LENGTHS.len() {
        let lg = left[i] / left[i - 1];
        let rg = right[i] / right[i - 1];
        assert!(lg > 3.0, "left growth {lg:.2} at n={}", LENGTHS[i]);
        assert!(rg < 3.0, "right growth {rg:.2} at n={}", LENGTHS[i]);
        assert!(lg > rg);
    }

    // some N* past which right is never slower, allowing one noisy
    // inversion; it has to leave at least three lengths to be meaningful
    let last = LENGTHS.len() - 1;
    let crossover = (0..=last).find(|&start| {
        (start..=last).filter(|&i| right[i] > left[i]).count() <= 1 && right[last] <= left[last]
    });
    let start = crossover.expect("right product never overtakes left");
    assert!(start + 3 <= LENGTHS.len(), "crossover only at n={}", LENGTHS[start]);
    assert!(right[LENGTHS.len() - 1] * 2.0 < left[LENGTHS.len() - 1]);
}
