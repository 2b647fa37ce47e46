//! Inner-product hash family, small-bias string generator, and the composed
//! (double) hash.
//!
//! The hash of an input of up to L bits under a seed of τ·L bits is the
//! concatenation of τ inner products, one per L-bit seed slice. Seeds are
//! normally not materialized: they are consecutive slices of a lazily
//! evaluated powering stream over GF(2^k) whose bit t is ⟨x^{t+1}, y⟩, and an
//! inner product of an input against a stream range collapses to a single
//! field multiplication. [`StreamHasher`] implements that fast path;
//! [`ip_hash`] is the direct definition, used by tests and wherever seeds are
//! short enough to hold.

use crate::gf2::{pairing, Field, FixedMul};

/// Shape of one inner-product hash family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashParams {
    /// Maximum input length L in bits; shorter inputs are zero-padded.
    pub input_len: usize,
    /// Output width τ in bits.
    pub output_bits: usize,
}

impl HashParams {
    pub fn new(input_len: usize, output_bits: usize) -> HashParams {
        assert!(input_len > 0 && output_bits > 0);
        HashParams { input_len, output_bits }
    }

    /// Seed length τ·L in bits.
    pub fn seed_len(&self) -> usize {
        self.input_len * self.output_bits
    }
}

/// Concatenation of τ inner products of the zero-padded input against the
/// τ·L-bit seed. Panics if the seed length is wrong or the input exceeds L.
pub fn ip_hash(input: &[bool], seed: &[bool], params: HashParams) -> Vec<bool> {
    assert!(
        input.len() <= params.input_len,
        "hash input of {} bits exceeds capacity {}",
        input.len(),
        params.input_len
    );
    assert_eq!(seed.len(), params.seed_len(), "hash seed length mismatch");
    let l = params.input_len;
    (0..params.output_bits)
        .map(|j| {
            input
                .iter()
                .zip(&seed[j * l..(j + 1) * l])
                .fold(false, |acc, (&x, &s)| acc ^ (x & s))
        })
        .collect()
}

/// Composition h2(h1(input)): the outer hash compresses to p1.output_bits,
/// the inner hash maps that digest to p2.output_bits.
pub fn composed_hash(
    input: &[bool],
    outer_seed: &[bool],
    inner_seed: &[bool],
    p1: HashParams,
    p2: HashParams,
) -> Vec<bool> {
    assert!(p2.input_len >= p1.output_bits, "inner hash narrower than outer digest");
    let digest = ip_hash(input, outer_seed, p1);
    ip_hash(&digest, inner_seed, p2)
}

/// Appends the 2-bit encoding of each ternary symbol (0→00, 1→01, silence→10)
/// followed by the chunk index as a 32-bit big-endian integer. The embedded
/// index keeps transcripts that differ only in chunk numbering distinct, and
/// prevents the trailing-zero ambiguity of raw-symbol encodings.
pub fn serialize_chunk(symbols: &[Option<bool>], index: u32, out: &mut Vec<bool>) {
    for s in symbols {
        match s {
            Some(false) => out.extend([false, false]),
            Some(true) => out.extend([false, true]),
            None => out.extend([true, false]),
        }
    }
    append_u32_be(index, out);
}

/// 32-bit big-endian integer serialization, used both inside chunk encoding
/// and for hashing bare counters.
pub fn append_u32_be(v: u32, out: &mut Vec<bool>) {
    for i in (0..32).rev() {
        out.push(v >> i & 1 == 1);
    }
}

/// Shape of the small-bias generator: `output_len` = ℓ output bits at bias at
/// most 2^-`neg_log2_bias`, realized by the powering construction over
/// GF(2^k) with k = min(128, neg_log2_bias + ⌈log2 ℓ⌉).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeltaBiasedSpec {
    pub output_len: u64,
    pub neg_log2_bias: u32,
}

impl DeltaBiasedSpec {
    pub fn new(output_len: u64, neg_log2_bias: u32) -> DeltaBiasedSpec {
        assert!(output_len > 0 && neg_log2_bias > 0);
        DeltaBiasedSpec { output_len, neg_log2_bias }
    }

    /// Field degree k of the powering construction. The nominal requirement is
    /// ⌈log2(1/δ)⌉ + ⌈log2 ℓ⌉; degrees above 128 are clamped to 128 (bias at
    /// most ℓ/2^128, far below any measurable requirement).
    pub fn field_bits(&self) -> u32 {
        let ceil_log_ell = 64 - (self.output_len - 1).leading_zeros().min(63);
        let ceil_log_ell = if self.output_len == 1 { 0 } else { ceil_log_ell };
        (self.neg_log2_bias + ceil_log_ell).min(128)
    }

    /// Seed length r = 2k: one field element for x and one for y.
    pub fn seed_len(&self) -> usize {
        2 * self.field_bits() as usize
    }
}

/// Expands a 2k-bit seed (x then y, each little-endian over the field's bit
/// basis) into ℓ output bits: bit i = ⟨x^{i+1}, y⟩.
pub fn expand_delta_biased(seed: &[bool], spec: DeltaBiasedSpec) -> Vec<bool> {
    assert_eq!(seed.len(), spec.seed_len(), "small-bias seed length mismatch");
    let k = spec.field_bits();
    let field = Field::new(k);
    let stream = PowerStream::new(field, pack_bits(&seed[..k as usize]), pack_bits(&seed[k as usize..]));
    stream.bits(0, spec.output_len as u128)
}

fn pack_bits(bits: &[bool]) -> u128 {
    bits.iter()
        .enumerate()
        .fold(0u128, |acc, (i, &b)| acc | (u128::from(b) << i))
}

/// The powering stream: bit t = ⟨x^{t+1}, y⟩ over a binary field. Serves both
/// as the small-bias generator's core and as the byte-addressable shared
/// randomness from which per-iteration hash seeds are sliced.
#[derive(Debug, Clone)]
pub struct PowerStream {
    field: Field,
    x: u128,
    y: u128,
}

impl PowerStream {
    pub fn new(field: Field, x: u128, y: u128) -> PowerStream {
        PowerStream { field, x, y }
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn x(&self) -> u128 {
        self.x
    }

    pub fn y(&self) -> u128 {
        self.y
    }

    /// x^(t+1), the pairing partner of stream position t.
    pub fn x_power_at(&self, t: u128) -> u128 {
        self.field.pow(self.x, t + 1)
    }

    /// Materializes `len` stream bits starting at `offset`. Cost is linear in
    /// `len`; intended for tests and short expansions.
    pub fn bits(&self, offset: u128, len: u128) -> Vec<bool> {
        let mut w = self.x_power_at(offset);
        let mut out = Vec::with_capacity(len as usize);
        for _ in 0..len {
            out.push(pairing(w, self.y));
            w = self.field.mul(w, self.x);
        }
        out
    }

    /// Inner product of an input bit string against the stream range starting
    /// at `offset`, given the input's evaluation P = Σ s_i x^i. Equals
    /// Σ s_i · stream(offset + i) = ⟨x^{offset+1}·P, y⟩.
    pub fn inner_product_at(&self, offset: u128, input_eval: u128) -> bool {
        pairing(self.field.mul(self.x_power_at(offset), input_eval), self.y)
    }

    /// Evaluation Σ bits[i]·x^i, the stream-side fingerprint of a bit string.
    pub fn eval_bits(&self, bits: &[bool]) -> u128 {
        let mut acc = 0u128;
        for &b in bits.iter().rev() {
            acc = self.field.mul(acc, self.x);
            if b {
                acc ^= 1;
            }
        }
        acc
    }

    /// Extends a cached (evaluation, x^len) pair of some prefix by more bits,
    /// so growing strings are fingerprinted incrementally.
    pub fn extend_eval(&self, eval: u128, x_pow_len: u128, bits: &[bool]) -> (u128, u128) {
        let add = self.field.mul(x_pow_len, self.eval_bits(bits));
        let next_pow = self.field.mul(x_pow_len, self.field.pow(self.x, bits.len() as u128));
        (eval ^ add, next_pow)
    }
}

/// Fast hashing against stream-sliced seeds: output bit j of the hash at seed
/// offset o is ⟨x^{o + jL + 1}·P, y⟩, so a full τ-bit hash is τ windowed
/// multiplications plus τ steps of a precomputed ×x^L table.
pub struct StreamHasher {
    stream: PowerStream,
    params: HashParams,
    step_l: FixedMul,
    /// Byte-window table for multiplying by the generator itself, for
    /// incremental input evaluations.
    step_x: FixedMul,
}

impl StreamHasher {
    pub fn new(stream: PowerStream, params: HashParams) -> StreamHasher {
        let step_l = FixedMul::new(*stream.field(), stream.field().pow(stream.x(), params.input_len as u128));
        let step_x = FixedMul::new(*stream.field(), stream.x());
        StreamHasher { stream, params, step_l, step_x }
    }

    pub fn params(&self) -> HashParams {
        self.params
    }

    pub fn stream(&self) -> &PowerStream {
        &self.stream
    }

    /// Hash of the input whose evaluation is `input_eval`, under the seed
    /// slice whose first pairing partner is `w_base` = x^(seed_offset + 1).
    pub fn hash_eval(&self, w_base: u128, input_eval: u128) -> Vec<bool> {
        self.hash_dual(w_base, self.dual(input_eval))
    }

    /// Folds an input evaluation P and the stream's y into the dual vector g
    /// with g_i = <x^i*P, y>. Since <a*P, y> is linear in a, a hash bit under
    /// any seed position w is then the single pairing <w, g>, so one dual
    /// serves every hash of the same input.
    pub fn dual(&self, input_eval: u128) -> u128 {
        let field = self.stream.field();
        let y = self.stream.y();
        let mut g = 0u128;
        let mut s = input_eval;
        for i in 0..field.degree() {
            if pairing(s, y) {
                g |= 1u128 << i;
            }
            s = field.mul_x(s);
        }
        g
    }

    /// Hash of the input whose dual vector is `g` (see [`Self::dual`]).
    pub fn hash_dual(&self, w_base: u128, g: u128) -> Vec<bool> {
        let mut w = w_base;
        let mut out = Vec::with_capacity(self.params.output_bits);
        for _ in 0..self.params.output_bits {
            out.push(pairing(w, g));
            w = self.step_l.mul(w);
        }
        out
    }

    /// Evaluation Σ bits[i]·x^i via the byte-window table; same value as the
    /// stream's own, at a fraction of the cost.
    pub fn eval_bits(&self, bits: &[bool]) -> u128 {
        let mut acc = 0u128;
        for &b in bits.iter().rev() {
            acc = self.step_x.mul(acc);
            if b {
                acc ^= 1;
            }
        }
        acc
    }

    /// Fast path of the stream's `extend_eval`, using the byte-window table
    /// for the per-bit generator products.
    pub fn extend_eval(&self, eval: u128, x_pow_len: u128, bits: &[bool]) -> (u128, u128) {
        let field = self.stream.field();
        let add = field.mul(x_pow_len, self.eval_bits(bits));
        let next_pow = field.mul(x_pow_len, field.pow(self.stream.x(), bits.len() as u128));
        (eval ^ add, next_pow)
    }
}
