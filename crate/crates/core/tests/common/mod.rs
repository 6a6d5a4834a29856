//! Helpers shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereo_depth::loss::{
    consistency_loss, l1_reconstruction, siamese_loss, LossWeights, SiameseInputs,
};
use stereo_depth::ops::{BnMode, BnStats, ConvGeom};
use stereo_depth::tensor::grad_check;
use stereo_depth::warp::DispSign;
use stereo_depth::{Result, Tape, Tensor, Var};

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign, away from zero.
pub fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Distinct values on a 0.05 grid plus small jitter, so max pooling has a
/// clear winner in every window.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|k| k as f64 * 0.05 - 1.0).collect();
    v.shuffle(rng);
    let v = v
        .into_iter()
        .map(|x| x + rng.gen_range(0.0..0.01))
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Disparities whose fractional part stays in `[0.2, 0.8]`, away from the
/// interpolation kinks.
pub fn fractional_disparity(rng: &mut ChaCha8Rng, shape: &[usize], max_int: usize) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| rng.gen_range(0..=max_int) as f64 + rng.gen_range(0.2..0.8))
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Reduces `v` to a scalar with fixed random weights, so every output
/// element contributes a distinct gradient.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xA5A5);
    let weights = signed(&mut r, tape.shape(v), 0.5, 1.5);
    let w = tape.constant(weights);
    let p = tape.mul(v, w)?;
    tape.mean(p)
}

type Check = fn(u64) -> Result<f64>;

/// One entry per differentiable primitive. Each check returns the worst
/// relative error over every input of one seeded random instance.
pub fn primitives() -> Vec<(&'static str, Check)> {
    vec![
        ("conv2d", conv2d as Check),
        ("deconv2d", deconv2d),
        ("pool/unpool", pool_unpool),
        ("batchnorm", batchnorm),
        ("relu", relu),
        ("sigmoid head", sigmoid_head),
        ("warp_horizontal", warp),
        ("resample_disparity", resample),
        ("l1_reconstruction", l1),
        ("consistency_loss", consistency),
        ("siamese_loss", siamese),
    ]
}

/// Checks `f` with respect to each tensor of `inputs` in turn, holding the
/// others fixed.
fn check_each(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let err = grad_check(
            |tape, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == k { x } else { tape.constant(t.clone()) })
                    .collect();
                f(tape, &vars)
            },
            &inputs[k],
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

const GEOMS: [ConvGeom; 2] = [
    ConvGeom::SAME3,
    ConvGeom {
        kernel: 3,
        stride: 2,
        padding: 0,
    },
];

fn conv2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let geom = GEOMS[seed as usize % 2];
    let inputs = [
        uniform(&mut r, &[2, 3, 5, 6], -1.0, 1.0),
        uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5),
        uniform(&mut r, &[4], -0.5, 0.5),
    ];
    check_each(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], geom)?;
        project(t, y, seed)
    })
}

fn deconv2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let geom = GEOMS[seed as usize % 2];
    let inputs = [
        uniform(&mut r, &[2, 3, 4, 5], -1.0, 1.0),
        uniform(&mut r, &[3, 4, 3, 3], -0.5, 0.5),
        uniform(&mut r, &[4], -0.5, 0.5),
    ];
    check_each(&inputs, |t, v| {
        let y = t.deconv2d(v[0], v[1], v[2], geom)?;
        project(t, y, seed)
    })
}

fn pool_unpool(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [distinct(&mut r, &[2, 2, 4, 6])];
    check_each(&inputs, |t, v| {
        let (p, idx) = t.maxpool2(v[0])?;
        let u = t.maxunpool2(p, &idx)?;
        project(t, u, seed)
    })
}

fn batchnorm(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [
        uniform(&mut r, &[2, 3, 3, 4], -2.0, 2.0),
        uniform(&mut r, &[3], 0.5, 1.5),
        uniform(&mut r, &[3], -0.5, 0.5),
    ];
    let stats = BnStats::new(3);
    check_each(&inputs, |t, v| {
        let (y, _) = t.batchnorm(v[0], v[1], v[2], &stats, BnMode::Train)?;
        project(t, y, seed)
    })
}

fn relu(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [signed(&mut r, &[2, 3, 4], 0.1, 2.0)];
    check_each(&inputs, |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, seed)
    })
}

fn sigmoid_head(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[1, 1, 4, 5], -4.0, 4.0)];
    check_each(&inputs, |t, v| {
        let s = t.sigmoid(v[0])?;
        let d = t.scale(s, 12.0)?;
        project(t, d, seed)
    })
}

fn sign_of(seed: u64) -> DispSign {
    if seed.is_multiple_of(2) {
        DispSign::Positive
    } else {
        DispSign::Negative
    }
}

fn warp(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [
        uniform(&mut r, &[2, 3, 3, 8], 0.0, 1.0),
        fractional_disparity(&mut r, &[2, 1, 3, 8], 3),
    ];
    check_each(&inputs, |t, v| {
        let y = t.warp_horizontal(v[0], v[1], sign_of(seed))?;
        project(t, y, seed)
    })
}

fn resample(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [
        uniform(&mut r, &[2, 1, 3, 8], 0.0, 4.0),
        fractional_disparity(&mut r, &[2, 1, 3, 8], 3),
    ];
    check_each(&inputs, |t, v| {
        let y = t.resample_disparity(v[0], v[1], sign_of(seed))?;
        project(t, y, seed)
    })
}

fn l1(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let target = uniform(&mut r, &[1, 3, 4, 5], 0.0, 1.0);
    let offset = signed(&mut r, &[1, 3, 4, 5], 0.05, 0.5);
    let recon = Tensor::from_vec(
        target.shape(),
        target
            .data()
            .iter()
            .zip(offset.data())
            .map(|(a, b)| a + b)
            .collect(),
    )?;
    check_each(&[target, recon], |t, v| l1_reconstruction(t, v[0], v[1]))
}

/// Left and right maps chosen so every `|D_l − D_r(i + sign·D_l)|` stays
/// well away from zero.
fn consistency_pair(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let d_l = fractional_disparity(&mut r, &[1, 1, 4, 9], 2);
    let d_r = uniform(&mut r, &[1, 1, 4, 9], 4.0, 6.0);
    (d_l, d_r)
}

fn consistency(seed: u64) -> Result<f64> {
    let (d_l, d_r) = consistency_pair(seed);
    check_each(&[d_l, d_r], |t, v| {
        consistency_loss(t, v[0], v[1], sign_of(seed))
    })
}

fn siamese(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (d_l, d_r) = consistency_pair(seed);
    let left = uniform(&mut r, &[1, 3, 4, 9], 0.0, 0.4);
    let right = uniform(&mut r, &[1, 3, 4, 9], 0.6, 1.0);
    let sign = sign_of(seed);
    // Reconstructions are warps of the opposite view by the predicted maps,
    // so the check covers the full differentiable path.
    check_each(&[d_l, d_r], |t, v| {
        let l = t.constant(left.clone());
        let rv = t.constant(right.clone());
        let left_recon = t.warp_horizontal(rv, v[0], sign)?;
        let right_recon = t.warp_horizontal(l, v[1], sign.flipped())?;
        let inputs = SiameseInputs {
            left: l,
            right: rv,
            left_recon,
            right_recon,
            disp_left: v[0],
            disp_right: v[1],
        };
        Ok(siamese_loss(t, inputs, LossWeights::default(), sign)?.0)
    })
}
