use num_bigint::BigUint;
use num_traits::float::FloatCore;
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::carriers::CarrierSet;
use crate::error::{Error, Result};

/// `k` payload bits, each exactly `+1` or `-1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct Message {
    bits: Vec<i8>,
}

impl Message {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::param("message must carry at least one bit"));
        }
        if let Some(b) = bits.iter().find(|b| **b != 1 && **b != -1) {
            return Err(Error::param(format!("message bit {b} is not +1/-1")));
        }
        Ok(Message { bits })
    }

    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        Message::new((0..k).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    /// `"+-+-..."` rendering used in reports.
    pub fn to_sign_string(&self) -> String {
        self.bits.iter().map(|&b| if b > 0 { '+' } else { '-' }).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Message::new(
            text.trim()
                .chars()
                .map(|c| match c {
                    '+' | '1' => Ok(1),
                    '-' | '0' => Ok(-1),
                    other => Err(Error::param(format!("invalid message character {other:?}"))),
                })
                .collect::<Result<_>>()?,
        )
    }
}

impl TryFrom<Vec<i8>> for Message {
    type Error = Error;

    fn try_from(bits: Vec<i8>) -> Result<Self> {
        Message::new(bits)
    }
}

impl From<Message> for Vec<i8> {
    fn from(m: Message) -> Self {
        m.bits
    }
}

/// `sign(p)` per projection with `sign(0) = +1`.
pub fn decode_projections(projections: &[f64]) -> Message {
    Message {
        bits: projections
            .iter()
            .map(|&p| if p >= 0.0 { 1 } else { -1 })
            .collect(),
    }
}

pub fn decode(embedding: &[f64], carriers: &CarrierSet) -> Result<Message> {
    let p = carriers.project(embedding)?;
    if p.is_empty() {
        return Err(Error::param("no carriers"));
    }
    Ok(decode_projections(&p))
}

fn check_margin(margin: f64) -> Result<()> {
    if !(margin >= 0.0) {
        return Err(Error::param(format!("margin must be nonnegative, got {margin}")));
    }
    Ok(())
}

/// `(1/k) sum max(0, mu - p_i m_i)` and its gradient with respect to `p`.
pub fn hinge_loss_projections(
    projections: &[f64],
    message: &Message,
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    check_margin(margin)?;
    if projections.len() != message.len() {
        return Err(Error::Shape {
            expected: format!("{} projections", message.len()),
            actual: format!("{}", projections.len()),
        });
    }
    let k = message.len() as f64;
    let mut loss = 0.0;
    let grad = projections
        .iter()
        .zip(message.bits())
        .map(|(&p, &m)| {
            let m = f64::from(m);
            let gap = margin - p * m;
            if gap > 0.0 {
                loss += gap;
                -m / k
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / k, grad))
}

pub fn msg_loss(embedding: &[f64], carriers: &CarrierSet, message: &Message, margin: f64) -> Result<f64> {
    Ok(msg_loss_and_grad(embedding, carriers, message, margin)?.0)
}

/// Hinge loss and its gradient with respect to the embedding.
pub fn msg_loss_and_grad(
    embedding: &[f64],
    carriers: &CarrierSet,
    message: &Message,
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    let p = carriers.project(embedding)?;
    let (loss, gp) = hinge_loss_projections(&p, message, margin)?;
    Ok((loss, carriers.project_vjp(&gp)?))
}

pub fn matched_bits(a: &Message, b: &Message) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::param(format!(
            "message lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count())
}

pub fn bit_accuracy(m: &Message, decoded: &Message) -> Result<f64> {
    Ok(matched_bits(m, decoded)? as f64 / m.len() as f64)
}

/// Smallest `tau` with `P(Binomial(k, 1/2) >= tau) <= fpr`, or `k + 1` when none exists.
pub fn detection_threshold(k: usize, fpr: f64) -> Result<usize> {
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::param(format!("fpr must be in (0, 1), got {fpr}")));
    }
    // fpr = mantissa * 2^exponent exactly; compare tail counts against fpr * 2^k.
    let (mantissa, exponent, _) = fpr.integer_decode();
    let shift = i64::from(exponent) + k as i64;
    let bound = |tail: &BigUint| -> bool {
        let mant = BigUint::from(mantissa);
        if shift >= 0 {
            *tail <= mant << (shift as u64)
        } else {
            tail.clone() << ((-shift) as u64) <= mant
        }
    };
    let mut tail = BigUint::zero();
    let mut binom = BigUint::one();
    let mut threshold = k + 1;
    // Walk j = k, k-1, ..., 0 accumulating C(k, j).
    for j in (0..=k).rev() {
        if j < k {
            binom = binom * BigUint::from(j + 1) / BigUint::from(k - j);
        }
        tail += &binom;
        if bound(&tail) {
            threshold = j;
        } else {
            break;
        }
    }
    Ok(threshold)
}

/// Fraction of images whose matched-bit count reaches `detection_threshold(k, fpr)`.
pub fn tpr_at_fpr(counts: &[usize], k: usize, fpr: f64) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Report("no detection counts".into()));
    }
    if let Some(c) = counts.iter().find(|&&c| c > k) {
        return Err(Error::param(format!("matched count {c} exceeds k={k}")));
    }
    let tau = detection_threshold(k, fpr)?;
    Ok(counts.iter().filter(|&&c| c >= tau).count() as f64 / counts.len() as f64)
}
