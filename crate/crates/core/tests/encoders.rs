use mvalign::autodiff::{Tape, Tensor};
use mvalign::encoders::{
    encode_batch, fuse_complementarity_factor, infer_features, CfNet, EncoderDims, EncoderStack,
};
use mvalign::rng;
use proptest::prelude::*;
use rand::Rng;

fn rows(n: usize, d: usize, r: &mut impl Rng) -> Tensor {
    Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn dims(c1: usize, c2: usize, h: usize, w: usize) -> EncoderDims {
    EncoderDims {
        c1,
        c2,
        h,
        w,
        extract_hidden: 16,
        map_hidden: 16,
    }
}

#[test]
fn default_shapes() {
    let mut r = rng::stream(1, &[]);
    let d = EncoderDims::default();
    let stack = EncoderStack::new(d.clone(), &[12, 7, 9], &mut r);
    let cfnet = CfNet::new(d, 3, &mut r);
    let mut tape = Tape::new();
    let vars = stack.attach(&mut tape, false);
    let xs: Vec<_> = [12, 7, 9]
        .iter()
        .map(|&k| tape.constant(rows(2, k, &mut r)))
        .collect();
    let mut pack = encode_batch(&stack, &mut tape, &vars, &xs).unwrap();
    assert_eq!(tape.shape(pack.z[0]), &[2, 4, 4, 32]);
    assert_eq!(tape.shape(pack.h[2]), &[2, 64]);
    let cv = cfnet.attach(&mut tape, false);
    let cf = fuse_complementarity_factor(&cfnet, &mut tape, &cv, &mut pack).unwrap();
    assert_eq!(tape.shape(pack.fused.unwrap()), &[2, 4, 4, 288]);
    assert_eq!(tape.shape(cf), &[2, 64]);
}

#[test]
fn single_view_fusion() {
    let mut r = rng::stream(2, &[]);
    let d = dims(5, 3, 2, 2);
    let stack = EncoderStack::new(d.clone(), &[4], &mut r);
    let cfnet = CfNet::new(d, 1, &mut r);
    let mut tape = Tape::new();
    let vars = stack.attach(&mut tape, false);
    let x = tape.constant(rows(3, 4, &mut r));
    let mut pack = encode_batch(&stack, &mut tape, &vars, &[x]).unwrap();
    let cv = cfnet.attach(&mut tape, false);
    fuse_complementarity_factor(&cfnet, &mut tape, &cv, &mut pack).unwrap();
    let fused = tape.value(pack.fused.unwrap()).clone();
    assert_eq!(fused.shape(), &[3, 2, 2, 8]);
    // the first C1 channels of every cell hold the tiled h
    let h = tape.value(pack.h[0]).clone();
    let z = tape.value(pack.z[0]).clone();
    for i in 0..3 {
        for cell in 0..4 {
            let at = &fused.data()[(i * 4 + cell) * 8..(i * 4 + cell + 1) * 8];
            assert_eq!(&at[..5], h.row(i));
            assert_eq!(
                &at[5..],
                &z.data()[(i * 4 + cell) * 3..(i * 4 + cell + 1) * 3]
            );
        }
    }
}

#[test]
fn every_extractor_feeds_the_factor() {
    let mut r = rng::stream(3, &[]);
    let d = dims(4, 2, 2, 1);
    let stack = EncoderStack::new(d.clone(), &[3, 5], &mut r);
    let cfnet = CfNet::new(d, 2, &mut r);
    let mut tape = Tape::new();
    let vars = stack.attach(&mut tape, true);
    let xs = vec![
        tape.constant(rows(6, 3, &mut r)),
        tape.constant(rows(6, 5, &mut r)),
    ];
    let mut pack = encode_batch(&stack, &mut tape, &vars, &xs).unwrap();
    let cv = cfnet.attach(&mut tape, false);
    let cf = fuse_complementarity_factor(&cfnet, &mut tape, &cv, &mut pack).unwrap();
    let w = tape.constant(
        Tensor::new(
            vec![6, 4],
            (0..24).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap(),
    );
    let p = tape.mul(cf, w).unwrap();
    let s = tape.sum(p, None).unwrap();
    let g = tape.backward(s).unwrap();
    for (name, v) in stack.omega.names().iter().zip(&vars.omega) {
        if name.ends_with(".w") {
            let norm: f64 = g.get(*v).unwrap().iter().map(|x| x.abs()).sum();
            assert!(norm > 0.0, "{name} has no gradient");
        }
    }
}

#[test]
fn mismatched_views_rejected() {
    let mut r = rng::stream(4, &[]);
    let stack = EncoderStack::new(dims(3, 2, 1, 1), &[4, 4], &mut r);
    assert!(infer_features(&stack, None, &[rows(2, 4, &mut r)]).is_err());
    assert!(infer_features(&stack, None, &[rows(2, 4, &mut r), rows(2, 5, &mut r)]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn shapes_norms_and_equivariance(
        seed in 0u64..10_000,
        m in 1usize..4,
        c1 in 1usize..6,
        c2 in 1usize..4,
        h in 1usize..3,
        w in 1usize..3,
        n in 2usize..6,
    ) {
        let mut r = rng::stream(seed, &[]);
        let d = dims(c1, c2, h, w);
        let inputs: Vec<usize> = (0..m).map(|_| r.random_range(1..6)).collect();
        let stack = EncoderStack::new(d.clone(), &inputs, &mut r);
        let cfnet = CfNet::new(d, m, &mut r);
        let xs: Vec<Tensor> = inputs.iter().map(|&k| rows(n, k, &mut r)).collect();
        let (hs, cf) = infer_features(&stack, Some(&cfnet), &xs).unwrap();
        let cf = cf.unwrap();
        prop_assert_eq!(cf.shape(), &[n, c1]);
        for t in hs.iter().chain([&cf]) {
            prop_assert_eq!(t.shape(), &[n, c1]);
            prop_assert!(t.is_finite());
            for i in 0..n {
                let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                // an all-zero pre-activation maps to the zero vector
                prop_assert!((norm - 1.0).abs() < 1e-9 || norm < 1e-9);
            }
        }
        let perm: Vec<usize> = (0..n).rev().collect();
        let shuffled: Vec<Tensor> = xs.iter().map(|x| {
            Tensor::new(x.shape().to_vec(), perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap()
        }).collect();
        let (hs2, cf2) = infer_features(&stack, Some(&cfnet), &shuffled).unwrap();
        let cf2 = cf2.unwrap();
        for (a, b) in hs.iter().chain([&cf]).zip(hs2.iter().chain([&cf2])) {
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a.row(i), b.row(k));
            }
        }
    }
}
