//! Every Gibbs kernel against the joint density.

mod common;

use common::kernels::kernel_errors;

#[test]
fn full_conditionals_match_joint_ratios() {
    for seed in [1, 2, 3] {
        for (kernel, err) in kernel_errors(seed) {
            assert!(err <= 1e-8, "seed {seed}, {kernel}: error {err:e}");
        }
    }
}
