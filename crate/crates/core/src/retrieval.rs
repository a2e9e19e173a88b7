//! Bit-packed hash codes, Hamming ranking and mean average precision.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pyramid::FeaturePyramid;

pub const CODES_MAGIC: &[u8; 4] = b"AQHC";
pub const CODES_VERSION: u32 = 1;

/// `count` codes of `k` bits, `⌈k/64⌉` words each. Bit `b` of a code sits at
/// position `b mod 64` of word `b / 64`; `+1` is a set bit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodes {
    bits: usize,
    count: usize,
    words: Vec<u64>,
}

fn words_per_code(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl PackedCodes {
    pub fn pack(codes: &[Vec<i8>]) -> Result<Self> {
        let bits = codes.first().map_or(0, Vec::len);
        Self::pack_with_bits(bits, codes)
    }

    pub fn pack_with_bits(bits: usize, codes: &[Vec<i8>]) -> Result<Self> {
        if bits == 0 {
            return Err(Error::Invalid("codes must have at least one bit".into()));
        }
        let wpc = words_per_code(bits);
        let mut words = vec![0u64; wpc * codes.len()];
        for (i, code) in codes.iter().enumerate() {
            if code.len() != bits {
                return Err(Error::shape("pack", &[bits], &[code.len()]));
            }
            for (b, &v) in code.iter().enumerate() {
                match v {
                    1 => words[i * wpc + b / 64] |= 1u64 << (b % 64),
                    -1 => {}
                    other => return Err(Error::Invalid(format!("code {i} bit {b} is {other}, not ±1"))),
                }
            }
        }
        let packed = PackedCodes {
            bits,
            count: codes.len(),
            words,
        };
        debug_assert!(packed.unused_bits_clear());
        Ok(packed)
    }

    pub fn from_words(bits: usize, count: usize, words: Vec<u64>) -> Result<Self> {
        if bits == 0 || words.len() != count * words_per_code(bits) {
            return Err(Error::Invalid(format!(
                "{} words for {count} codes of {bits} bits",
                words.len()
            )));
        }
        let packed = PackedCodes { bits, count, words };
        if !packed.unused_bits_clear() {
            return Err(Error::Invalid("unused high bits are set".into()));
        }
        Ok(packed)
    }

    fn unused_bits_clear(&self) -> bool {
        let rem = self.bits % 64;
        if rem == 0 {
            return true;
        }
        let wpc = words_per_code(self.bits);
        let mask = !((1u64 << rem) - 1);
        (0..self.count).all(|i| self.words[i * wpc + wpc - 1] & mask == 0)
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> &[u64] {
        let wpc = words_per_code(self.bits);
        &self.words[i * wpc..(i + 1) * wpc]
    }

    pub fn unpack(&self) -> Vec<Vec<i8>> {
        (0..self.count)
            .map(|i| {
                let c = self.code(i);
                (0..self.bits)
                    .map(|b| if c[b / 64] >> (b % 64) & 1 == 1 { 1 } else { -1 })
                    .collect()
            })
            .collect()
    }

    /// Subset of codes, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let words = indices.iter().flat_map(|&i| self.code(i).iter().copied()).collect();
        PackedCodes {
            bits: self.bits,
            count: indices.len(),
            words,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.words.len());
        out.extend_from_slice(CODES_MAGIC);
        out.extend_from_slice(&CODES_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.bits as u32).to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != CODES_MAGIC {
            return Err(Error::data(path, "not a codes file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CODES_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CODES_VERSION,
            });
        }
        let bits = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        let expected = count
            .checked_mul(words_per_code(bits))
            .and_then(|w| w.checked_mul(8))
            .ok_or_else(|| Error::data(path, "code count overflows"))?;
        if body.len() != expected {
            return Err(Error::data(
                path,
                format!("expected {} bytes, found {}", 20 + expected, bytes.len()),
            ));
        }
        let words = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_words(bits, count, words).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Number of differing bits.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::shape("hamming", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Gallery indices for one query, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub query: usize,
    pub order: Vec<usize>,
}

/// Orders the gallery by ascending Hamming distance to `query`, ties by
/// ascending index (a stable counting sort over distances `0..=k`).
pub fn rank_query(query_id: usize, query: &[u64], gallery: &PackedCodes) -> Result<RankedList> {
    if query.len() != words_per_code(gallery.bits) {
        return Err(Error::shape("rank_query", &[query.len()], &[words_per_code(gallery.bits)]));
    }
    let dist: Vec<u32> = (0..gallery.len())
        .map(|i| hamming(query, gallery.code(i)))
        .collect::<Result<_>>()?;
    let mut starts = vec![0usize; gallery.bits + 2];
    for &d in &dist {
        starts[d as usize + 1] += 1;
    }
    for i in 1..starts.len() {
        starts[i] += starts[i - 1];
    }
    let mut order = vec![0; gallery.len()];
    for (i, &d) in dist.iter().enumerate() {
        order[starts[d as usize]] = i;
        starts[d as usize] += 1;
    }
    Ok(RankedList { query: query_id, order })
}

pub fn rank_all(queries: &PackedCodes, gallery: &PackedCodes) -> Result<Vec<RankedList>> {
    if queries.bits != gallery.bits {
        return Err(Error::Invalid(format!(
            "query codes have {} bits, gallery codes {}",
            queries.bits, gallery.bits
        )));
    }
    (0..queries.len())
        .into_par_iter()
        .map(|q| rank_query(q, queries.code(q), gallery))
        .collect()
}

/// AP of one ranking: mean precision at each relevant position, 0 when
/// nothing is relevant.
pub fn average_precision(relevance: impl IntoIterator<Item = bool>) -> f64 {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (pos, rel) in relevance.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Mean AP over full rankings; `relevant(query, item)` decides relevance.
pub fn mean_average_precision(rankings: &[RankedList], relevant: impl Fn(usize, usize) -> bool + Sync) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Invalid("empty query set".into()));
    }
    let aps: Vec<f64> = rankings
        .par_iter()
        .map(|r| average_precision(r.order.iter().map(|&i| relevant(r.query, i))))
        .collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// mAP with label-equality relevance.
pub fn label_map(rankings: &[RankedList], query_labels: &[usize], gallery_labels: &[usize]) -> Result<f64> {
    mean_average_precision(rankings, |q, i| query_labels[q] == gallery_labels[i])
}

pub const RANKINGS_MAGIC: &str = "attrhash-rankings 1";

/// Text form: a magic line, then `query: i1 i2 …` per ranking.
pub fn rankings_to_text(rankings: &[RankedList]) -> String {
    let mut s = String::with_capacity(rankings.len() * 16);
    s.push_str(RANKINGS_MAGIC);
    s.push('\n');
    for r in rankings {
        s.push_str(&r.query.to_string());
        s.push(':');
        for i in &r.order {
            s.push(' ');
            s.push_str(&i.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn rankings_from_text(text: &str, path: &Path) -> Result<Vec<RankedList>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RANKINGS_MAGIC) {
        return Err(Error::data(path, format!("missing '{RANKINGS_MAGIC}' header")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::data(path, format!("line {}: {what}", n + 2));
        let (q, rest) = line.split_once(':').ok_or_else(|| bad("expected 'query: items'"))?;
        let query = q.trim().parse().map_err(|_| bad("bad query id"))?;
        let order = rest
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad gallery index")))
            .collect::<Result<Vec<usize>>>()?;
        out.push(RankedList { query, order });
    }
    Ok(out)
}

/// `sign(H(I, Q, Θ))` for every image, packed.
pub fn encode_database<'a>(model: &Model, images: impl IntoIterator<Item = &'a FeaturePyramid>) -> Result<PackedCodes> {
    let images: Vec<&FeaturePyramid> = images.into_iter().collect();
    let codes = images
        .par_iter()
        .map(|img| model.forward_infer(img))
        .collect::<Result<Vec<_>>>()?;
    PackedCodes::pack_with_bits(model.config.bits, &codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_codes(count: usize, bits: usize, seed: u64) -> Vec<Vec<i8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (0..bits).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
            .collect()
    }

    #[test]
    fn layout_examples() {
        let p = PackedCodes::pack(&[vec![1, -1, 1, -1]]).unwrap();
        assert_eq!(p.words(), &[0b0101]);
        let p = PackedCodes::pack(&[vec![1; 64]]).unwrap();
        assert_eq!(p.words(), &[u64::MAX]);
        assert!(PackedCodes::pack(&[vec![1, 0]]).is_err());
        assert!(PackedCodes::from_words(4, 1, vec![0b10000]).is_err());
    }

    #[test]
    fn round_trip_random_matrix() {
        let codes = random_codes(1000, 37, 1);
        assert_eq!(PackedCodes::pack(&codes).unwrap().unpack(), codes);
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&[0b1010], &[0b1010]).unwrap(), 0);
        assert_eq!(hamming(&[0b1010], &[0b0110]).unwrap(), 2);
        assert!(hamming(&[0, 0], &[0]).is_err());
    }

    #[test]
    fn hamming_matches_naive_loop() {
        let codes = random_codes(200, 100, 2);
        let p = PackedCodes::pack(&codes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let (i, j) = (rng.gen_range(0..200), rng.gen_range(0..200));
            let naive = codes[i].iter().zip(&codes[j]).filter(|(a, b)| a != b).count() as u32;
            assert_eq!(hamming(p.code(i), p.code(j)).unwrap(), naive);
        }
    }

    #[test]
    fn ties_and_self_match() {
        let g = PackedCodes::pack(&[vec![1, 1], vec![-1, -1], vec![1, -1], vec![-1, 1]]).unwrap();
        let r = rank_query(0, g.code(2), &g).unwrap();
        assert_eq!(r.order, vec![2, 0, 1, 3]);
    }

    #[test]
    fn average_precision_examples() {
        assert!((average_precision([true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision([true, true]), 1.0);
        assert_eq!(average_precision([false, false]), 0.0);
        assert!(mean_average_precision(&[], |_, _| true).is_err());
    }

    #[test]
    fn rankings_text_round_trip() {
        let r = vec![
            RankedList { query: 0, order: vec![2, 0, 1] },
            RankedList { query: 1, order: vec![1, 2, 0] },
        ];
        let p = Path::new("r");
        assert_eq!(rankings_from_text(&rankings_to_text(&r), p).unwrap(), r);
        assert!(rankings_from_text("0: 1 2\n", p).is_err());
    }

    #[test]
    fn codes_file_round_trip_and_errors() {
        let p = PackedCodes::pack(&random_codes(17, 65, 4)).unwrap();
        let bytes = p.to_bytes();
        let path = Path::new("codes");
        assert_eq!(PackedCodes::from_bytes(&bytes, path).unwrap(), p);
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(PackedCodes::from_bytes(&v2, path), Err(Error::Version { found: 2, .. })));
        assert!(PackedCodes::from_bytes(&bytes[..bytes.len() - 1], path).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(PackedCodes::from_bytes(&bad, path).is_err());
    }
}
