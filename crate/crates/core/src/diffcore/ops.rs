//! Plain-value numeric kernels shared by the tape and by tape-free callers.

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const L2_EPS: f64 = 1e-8;

fn check_mask(len: usize, mask: Option<&[bool]>) -> Result<()> {
    match mask {
        Some(m) if m.len() != len => Err(Error::shape(
            "mask",
            format!("mask length {} for vector of length {len}", m.len()),
        )),
        Some(m) if !m.iter().any(|&keep| keep) => Err(Error::EmptySupport),
        _ => Ok(()),
    }
}

fn kept(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

/// Max-shifted softmax. `mask[i] == false` forces output `i` to exactly zero.
pub fn softmax(v: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptySupport);
    }
    check_mask(v.len(), mask)?;
    let max = v
        .iter()
        .enumerate()
        .filter(|(i, _)| kept(mask, *i))
        .map(|(_, x)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v
        .iter()
        .enumerate()
        .map(|(i, x)| if kept(mask, i) { (x - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    Ok(out)
}

/// `log Σ exp(v_i)` over unmasked entries.
pub fn log_sum_exp(v: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptySupport);
    }
    check_mask(v.len(), mask)?;
    let max = v
        .iter()
        .enumerate()
        .filter(|(i, _)| kept(mask, *i))
        .map(|(_, x)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v
        .iter()
        .enumerate()
        .filter(|(i, _)| kept(mask, *i))
        .map(|(_, x)| (x - max).exp())
        .sum();
    Ok(max + s.ln())
}

/// Unit-L2 rescaling; vectors with norm `<= L2_EPS` map to the zero vector.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= L2_EPS {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Index of the largest unmasked entry; ties go to the lowest index.
pub fn argmax(v: &[f64], mask: Option<&[bool]>) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::EmptySupport);
    }
    check_mask(v.len(), mask)?;
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        if !kept(mask, i) {
            continue;
        }
        match best {
            Some(b) if v[b] >= *x => {}
            _ => best = Some(i),
        }
    }
    best.ok_or(Error::EmptySupport)
}

pub fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `[rows, cols] x [cols]` product.
pub fn matvec(w: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    w.chunks_exact(cols).map(|row| dot(row, x)).collect()
}
