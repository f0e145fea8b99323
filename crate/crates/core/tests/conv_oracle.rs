mod common;

use handseg::kernels::{conv2d_forward, conv2d_forward_par};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fast_conv_matches_naive_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let c = common::conv_case(&mut rng);
        let gap = common::conv_oracle_gap(&c);
        assert!(gap <= 1e-5, "case {case}: {:?} * {:?} s{} p{}: {gap}", c.x.shape(), c.w.shape(), c.stride, c.pad);
        let serial = conv2d_forward(&c.x, &c.w, &c.bias, c.stride, c.pad).unwrap();
        assert_eq!(conv2d_forward_par(&c.x, &c.w, &c.bias, c.stride, c.pad).unwrap(), serial);
    }
}
