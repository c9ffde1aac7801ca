//! Deterministic text embedder for object titles.
//!
//! The prompt `"a photo of a <title>"` is lower-cased, padded with one space
//! on each side and split into character trigrams. Each trigram is hashed
//! with 64-bit FNV-1a; the hash selects a dimension (`hash % dim`) and a sign
//! (bit 63). The signed counts are L2-normalized.

use crate::error::{Error, Result};
use crate::features::FeatureVector;

pub fn prompt(title: &str) -> String {
    format!("a photo of a {title}")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn embed_title(title: &str, dim: usize) -> Result<FeatureVector> {
    let title = title.trim();
    if title.is_empty() {
        return Err(Error::Empty("title"));
    }
    if dim == 0 {
        return Err(Error::config("text embedding dimension must be positive"));
    }
    let text: Vec<char> = format!(" {} ", prompt(title).to_lowercase()).chars().collect();
    let mut v = vec![0.0; dim];
    for w in text.windows(3) {
        let gram: String = w.iter().collect();
        let h = fnv1a(gram.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(FeatureVector(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::catalog_titles;

    #[test]
    fn prompt_format() {
        assert_eq!(prompt("wallet"), "a photo of a wallet");
    }

    #[test]
    fn deterministic_and_normalized() {
        let a = embed_title("wallet", 64).unwrap();
        assert_eq!(a, embed_title("wallet", 64).unwrap());
        let n: f64 = a.0.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(embed_title("  ", 64).is_err());
    }

    #[test]
    fn catalog_titles_are_distinguishable() {
        let titles = catalog_titles();
        assert!(titles.len() > 10);
        let embs: Vec<_> = titles.iter().map(|t| embed_title(t, 64).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let cos: f64 = embs[i].0.iter().zip(&embs[j].0).map(|(a, b)| a * b).sum();
                assert!(cos < 0.99, "{} vs {}: {cos}", titles[i], titles[j]);
            }
        }
    }
}
