use r3d_tensor::gradcheck::check_all_ops;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences_over_twenty_seeds() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (op, report) in check_all_ops(&mut rng).unwrap() {
            assert!(
                report.passes(1e-5),
                "seed {seed} op {op}: max relative error {:.3e}",
                report.max_rel_error
            );
        }
    }
}
