#![allow(dead_code)]

use std::cell::RefCell;

use astro_float::{BigFloat, Consts, RoundingMode};
use fa_ood_core::{ImageFeatures, SimilarityPair, TextFeatureSet};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.gen_range(-1.0..1.0)));
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn feature_set(rng: &mut ChaCha8Rng, c: usize, d: usize) -> TextFeatureSet {
    let mut rows = Array2::zeros((c, d));
    for mut r in rows.rows_mut() {
        r.assign(&unit(rng, d));
    }
    TextFeatureSet::from_rows(rows).unwrap()
}

pub fn image(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ImageFeatures {
    let mut locals = Array2::zeros((n, d));
    for mut r in locals.rows_mut() {
        r.assign(&unit(rng, d));
    }
    ImageFeatures::new(unit(rng, d), locals).unwrap()
}

/// Cosine-valued pair with `c` classes.
pub fn pair(rng: &mut ChaCha8Rng, c: usize) -> SimilarityPair {
    let forced = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let original = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SimilarityPair::new(forced, original, rng.gen_range(0..c)).unwrap()
}

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

/// 256-bit float with the handful of operations the oracles need.
#[derive(Clone, Debug)]
pub struct Big(BigFloat);

thread_local! {
    static CONSTS: RefCell<Consts> = RefCell::new(Consts::new().unwrap());
}

impl Big {
    pub fn new(x: f64) -> Self {
        Big(BigFloat::from_f64(x, PREC))
    }
    pub fn add(&self, o: &Big) -> Big {
        Big(self.0.add(&o.0, PREC, RM))
    }
    pub fn sub(&self, o: &Big) -> Big {
        Big(self.0.sub(&o.0, PREC, RM))
    }
    pub fn mul(&self, o: &Big) -> Big {
        Big(self.0.mul(&o.0, PREC, RM))
    }
    pub fn div(&self, o: &Big) -> Big {
        Big(self.0.div(&o.0, PREC, RM))
    }
    pub fn exp(&self) -> Big {
        CONSTS.with(|cc| Big(self.0.exp(PREC, RM, &mut cc.borrow_mut())))
    }
    pub fn ln(&self) -> Big {
        CONSTS.with(|cc| Big(self.0.ln(PREC, RM, &mut cc.borrow_mut())))
    }
    /// Correctly rounded to the nearest f64.
    pub fn to_f64(&self) -> f64 {
        self.0.to_string().parse().unwrap()
    }
}

pub fn big_sum<'a>(values: impl IntoIterator<Item = &'a Big>) -> Big {
    values.into_iter().fold(Big::new(0.0), |a, b| a.add(b))
}

pub fn big_dot(a: &[f64], b: &[f64]) -> Big {
    let terms: Vec<Big> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| Big::new(x).mul(&Big::new(y)))
        .collect();
    big_sum(&terms)
}

fn scaled_exps(sims: &[f64], tau: f64) -> Vec<Big> {
    sims.iter()
        .map(|&s| Big::new(s).div(&Big::new(tau)).exp())
        .collect()
}

/// `-log(e^{f_y/tau} / (sum e^{f/tau} + K sum e^{o/tau}))` at 256 bits.
pub fn fce_k_oracle(p: &SimilarityPair, tau: f64, k: f64) -> f64 {
    let mut denom = big_sum(&scaled_exps(&p.forced, tau));
    if k != 0.0 {
        denom = denom.add(&Big::new(k).mul(&big_sum(&scaled_exps(&p.original, tau))));
    }
    let target = Big::new(p.forced[p.label]).div(&Big::new(tau));
    denom.ln().sub(&target).to_f64()
}

/// Softmax cross-entropy over the forced similarities only.
pub fn ce_oracle(p: &SimilarityPair, tau: f64) -> f64 {
    let denom = big_sum(&scaled_exps(&p.forced, tau));
    let target = Big::new(p.forced[p.label]).div(&Big::new(tau));
    denom.ln().sub(&target).to_f64()
}

/// Enumerates all 2C candidates of the dual softmax for one feature vector.
pub fn mcm_oracle(
    z: &[f64],
    forced: &TextFeatureSet,
    original: &TextFeatureSet,
    k: f64,
    tau0: f64,
) -> f64 {
    let e = |t: &TextFeatureSet, j: usize| {
        big_dot(z, t.row(j).as_slice().unwrap())
            .div(&Big::new(tau0))
            .exp()
    };
    let c = forced.num_classes();
    let mut candidates: Vec<Big> = (0..c).map(|j| e(forced, j)).collect();
    if k > 0.0 {
        candidates.extend((0..c).map(|j| Big::new(k).mul(&e(original, j))));
    }
    let denom = big_sum(&candidates);
    candidates
        .iter()
        .map(|n| n.div(&denom).to_f64())
        .fold(f64::NEG_INFINITY, f64::max)
}
