//! Shared test oracles, independent of the library's computation paths.
#![allow(dead_code)]

use astro_float::{BigFloat, Consts, RoundingMode};

/// Arbitrary-precision direct summation of the subsampled-Gaussian RDP
/// binomial series, in linear space:
///
/// `ln( sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1)/(2 sigma^2)) ) / (alpha-1)`
///
/// The library evaluates this in f64 log space; this oracle works with
/// `prec`-bit floats end to end, so terms like `exp(1984)` are summed
/// exactly rather than shifted.
pub fn rdp_subsampled_oracle(q: f64, sigma: f64, alpha: u32, prec: usize) -> f64 {
    let rm = RoundingMode::ToEven;
    let mut cc = Consts::new().expect("constants cache");
    let qb = BigFloat::from_f64(q, prec);
    let one = BigFloat::from_f64(1.0, prec);
    let omq = one.sub(&qb, prec, rm);
    let sb = BigFloat::from_f64(sigma, prec);
    let two = BigFloat::from_f64(2.0, prec);
    let denom = two.mul(&sb, prec, rm).mul(&sb, prec, rm);

    let mut total = BigFloat::from_f64(0.0, prec);
    let mut binom = BigFloat::from_f64(1.0, prec);
    for k in 0..=alpha {
        let kk = BigFloat::from_f64(f64::from(k) * (f64::from(k) - 1.0), prec);
        let expo = kk.div(&denom, prec, rm).exp(prec, rm, &mut cc);
        let p_keep = omq.powi((alpha - k) as usize, prec, rm);
        let p_pick = qb.powi(k as usize, prec, rm);
        let term = binom
            .mul(&p_keep, prec, rm)
            .mul(&p_pick, prec, rm)
            .mul(&expo, prec, rm);
        total = total.add(&term, prec, rm);
        if k < alpha {
            let num = BigFloat::from_f64(f64::from(alpha - k), prec);
            let den = BigFloat::from_f64(f64::from(k + 1), prec);
            binom = binom.mul(&num, prec, rm).div(&den, prec, rm);
        }
    }
    let ln_total = total.ln(prec, rm, &mut cc);
    let am1 = BigFloat::from_f64(f64::from(alpha) - 1.0, prec);
    let ratio = ln_total.div(&am1, prec, rm);
    parse_bigfloat(&ratio)
}

fn parse_bigfloat(v: &BigFloat) -> f64 {
    format!("{v}").parse::<f64>().expect("bigfloat formats as a float")
}
