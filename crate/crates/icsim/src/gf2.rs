//! Arithmetic in the binary extension fields GF(2^k) for k up to 128.
//!
//! Elements are bit-polynomials packed into a `u128` (bit i = coefficient of
//! x^i), reduced modulo a fixed irreducible polynomial per degree. The table
//! of reduction polynomials lists, for each k, the lexicographically smallest
//! irreducible polynomial of degree k with its leading term stripped.

mod polys;

pub(crate) use polys::REDUCTION_POLYS;

/// One binary extension field GF(2^k), 1 <= k <= 128.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Field {
    k: u32,
    poly_low: u128,
    mask: u128,
}

impl Field {
    pub fn new(k: u32) -> Field {
        assert!((1..=128).contains(&k), "field degree {k} out of range");
        let mask = if k == 128 { u128::MAX } else { (1u128 << k) - 1 };
        Field {
            k,
            poly_low: REDUCTION_POLYS[(k - 1) as usize],
            mask,
        }
    }

    pub fn degree(&self) -> u32 {
        self.k
    }

    /// Multiply an element by x, reducing once.
    #[inline]
    pub fn mul_x(&self, a: u128) -> u128 {
        let carry = a >> (self.k - 1) & 1;
        let shifted = (a << 1) & self.mask;
        if carry == 1 {
            shifted ^ self.poly_low
        } else {
            shifted
        }
    }

    /// Product in the field. Windowed over 4-bit digits of `b`.
    pub fn mul(&self, a: u128, b: u128) -> u128 {
        if a == 0 || b == 0 {
            return 0;
        }
        let tab = self.nibble_table(a);
        self.mul_with_table(&tab, b)
    }

    /// Multiples {0a, 1a, ..., 15a} of `a`, for repeated products against a
    /// fixed left operand.
    pub fn nibble_table(&self, a: u128) -> [u128; 16] {
        let a2 = self.mul_x(a);
        let a4 = self.mul_x(a2);
        let a8 = self.mul_x(a4);
        let mut tab = [0u128; 16];
        for i in 1..16usize {
            let mut v = 0;
            if i & 1 != 0 {
                v ^= a;
            }
            if i & 2 != 0 {
                v ^= a2;
            }
            if i & 4 != 0 {
                v ^= a4;
            }
            if i & 8 != 0 {
                v ^= a8;
            }
            tab[i] = v;
        }
        tab
    }

    /// Product `a * b` where `tab = nibble_table(a)`.
    pub fn mul_with_table(&self, tab: &[u128; 16], b: u128) -> u128 {
        let top = 128 - b.leading_zeros();
        let digits = top.div_ceil(4);
        let mut acc = 0u128;
        for d in (0..digits).rev() {
            acc = self.mul_x(self.mul_x(self.mul_x(self.mul_x(acc))));
            acc ^= tab[(b >> (4 * d) & 0xf) as usize];
        }
        acc
    }

    pub fn pow(&self, a: u128, mut e: u128) -> u128 {
        let mut base = a;
        let mut acc = 1u128;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            e >>= 1;
        }
        acc
    }

    /// x^e in this field.
    pub fn x_pow(&self, e: u128) -> u128 {
        if self.k == 1 {
            return 1;
        }
        self.pow(2, e)
    }
}

/// The standard bit-basis pairing <a, b> = XOR of a_i AND b_i.
#[inline]
pub fn pairing(a: u128, b: u128) -> bool {
    (a & b).count_ones() & 1 == 1
}

/// Precomputed byte-window table for multiplying arbitrary elements by one
/// fixed element. Sixteen rows of 256 entries; a product is 16 lookups.
#[derive(Debug, Clone)]
pub struct FixedMul {
    field: Field,
    rows: Vec<[u128; 256]>,
}

impl FixedMul {
    pub fn new(field: Field, m: u128) -> FixedMul {
        let nrows = field.degree().div_ceil(8) as usize;
        let mut rows = vec![[0u128; 256]; nrows];
        // m * x^(8r + j) for row r, bit j, built by chained mul_x.
        let mut shifted = m;
        for row in rows.iter_mut() {
            let mut bitmul = [0u128; 8];
            for b in bitmul.iter_mut() {
                *b = shifted;
                shifted = field.mul_x(shifted);
            }
            for byte in 1..256usize {
                let low = byte.trailing_zeros();
                row[byte] = row[byte & (byte - 1)] ^ bitmul[low as usize];
            }
        }
        FixedMul { field, rows }
    }

    #[inline]
    pub fn mul(&self, a: u128) -> u128 {
        let mut acc = 0u128;
        let mut rest = a;
        let mut row = 0;
        while rest != 0 {
            acc ^= self.rows[row][(rest & 0xff) as usize];
            rest >>= 8;
            row += 1;
        }
        acc
    }

    pub fn field(&self) -> &Field {
        &self.field
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Schoolbook reference: shift-and-add with per-step reduction.
    fn mul_ref(f: &Field, mut a: u128, b: u128) -> u128 {
        let mut acc = 0u128;
        for i in 0..f.degree() {
            if b >> i & 1 == 1 {
                acc ^= a;
            }
            a = f.mul_x(a);
        }
        acc
    }

    #[test]
    fn small_field_known_products() {
        // GF(2^3) with x^3 + x + 1: (x+1)(x^2+1) = x^3+x^2+x+1 = x^2 (mod p).
        let f = Field::new(3);
        assert_eq!(f.mul(0b011, 0b101), 0b100);
        // GF(2^8) AES-adjacent check in the 0x11b-free field x^8+x^4+x^3+x+1... our
        // table holds the lexicographically smallest poly, so just cross-check
        // against the reference multiplier.
        let f8 = Field::new(8);
        assert_eq!(f8.mul(0x57, 0x83), mul_ref(&f8, 0x57, 0x83));
    }

    #[test]
    fn mul_matches_reference_across_degrees() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        for k in [1u32, 2, 3, 5, 6, 8, 13, 31, 32, 33, 64, 65, 100, 127, 128] {
            let f = Field::new(k);
            let mask = f.mask;
            for _ in 0..50 {
                let a = rng.gen::<u128>() & mask;
                let b = rng.gen::<u128>() & mask;
                assert_eq!(f.mul(a, b), mul_ref(&f, a, b), "k={k}");
            }
        }
    }

    #[test]
    fn field_axioms_sampled() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(8);
        for k in [4u32, 29, 64, 128] {
            let f = Field::new(k);
            let mask = f.mask;
            for _ in 0..30 {
                let a = rng.gen::<u128>() & mask;
                let b = rng.gen::<u128>() & mask;
                let c = rng.gen::<u128>() & mask;
                assert_eq!(f.mul(a, b), f.mul(b, a));
                assert_eq!(f.mul(a, f.mul(b, c)), f.mul(f.mul(a, b), c));
                assert_eq!(f.mul(a, b ^ c), f.mul(a, b) ^ f.mul(a, c));
                assert_eq!(f.mul(a, 1), a);
            }
        }
    }

    #[test]
    fn fixed_mul_agrees_with_mul() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        for k in [6u32, 17, 64, 128] {
            let f = Field::new(k);
            let m = rng.gen::<u128>() & f.mask;
            let fm = FixedMul::new(f, m);
            for _ in 0..40 {
                let a = rng.gen::<u128>() & f.mask;
                assert_eq!(fm.mul(a), f.mul(m, a));
            }
        }
    }

    #[test]
    fn pow_and_x_pow() {
        let f = Field::new(12);
        let a = 0xabc & f.mask;
        let mut acc = 1;
        for e in 0..20u128 {
            assert_eq!(f.pow(a, e), acc);
            acc = f.mul(acc, a);
        }
        assert_eq!(f.x_pow(5), f.pow(2, 5));
        // Multiplicative order divides 2^k - 1, so x^(2^k - 1) = 1.
        assert_eq!(f.x_pow((1 << 12) - 1), 1);
    }

    #[test]
    fn pairing_parity() {
        assert!(!pairing(0, u128::MAX));
        assert!(pairing(1, 1));
        assert!(!pairing(0b1011, 0b1110)); // overlap 1010: even parity
        assert!(pairing(0b1011, 0b0110)); // overlap 0010: odd parity
        assert!(!pairing(0b1001, 0b0110));
    }

    /// Rabin's irreducibility test over GF(2) applied to every table entry.
    mod irreducibility {
        use super::super::REDUCTION_POLYS;

        /// Polynomials over GF(2) as (lo, hi) 256-bit packs; degree <= 129 occurs
        /// only as the modulus itself, intermediate values stay below 2^129.
        type P = (u128, u128);

        fn deg(p: P) -> i32 {
            if p.1 != 0 {
                255 - p.1.leading_zeros() as i32
            } else if p.0 != 0 {
                127 - p.0.leading_zeros() as i32
            } else {
                -1
            }
        }

        fn shl(p: P, s: u32) -> P {
            if s == 0 {
                p
            } else if s < 128 {
                (p.0 << s, p.1 << s | p.0 >> (128 - s))
            } else {
                (0, p.0 << (s - 128))
            }
        }

        fn xor(a: P, b: P) -> P {
            (a.0 ^ b.0, a.1 ^ b.1)
        }

        fn rem(mut a: P, m: P) -> P {
            let dm = deg(m);
            while deg(a) >= dm {
                a = xor(a, shl(m, (deg(a) - dm) as u32));
            }
            a
        }

        fn gcd(mut a: P, mut b: P) -> P {
            while b != (0, 0) {
                let r = rem(a, b);
                a = b;
                b = r;
            }
            a
        }

        /// a*b mod m where everything fits in 129 bits.
        fn mulmod(a: P, b: P, m: P) -> P {
            let mut acc = (0u128, 0u128);
            let mut sh = a;
            for i in 0..=deg(b) as u32 {
                let word = if i < 128 { b.0 >> i & 1 } else { b.1 >> (i - 128) & 1 };
                if word == 1 {
                    acc = xor(acc, sh);
                }
                sh = rem(shl(sh, 1), m);
            }
            acc
        }

        /// x^(2^e) mod m by repeated squaring of x.
        fn x_pow_pow2(e: u32, m: P) -> P {
            let mut v = rem((2, 0), m);
            for _ in 0..e {
                v = mulmod(v, v, m);
            }
            v
        }

        fn prime_divisors(mut n: u32) -> Vec<u32> {
            let mut out = vec![];
            let mut d = 2;
            while d * d <= n {
                if n % d == 0 {
                    out.push(d);
                    while n % d == 0 {
                        n /= d;
                    }
                }
                d += 1;
            }
            if n > 1 {
                out.push(n);
            }
            out
        }

        #[test]
        fn all_reduction_polys_irreducible() {
            for k in 1..=128u32 {
                let low = REDUCTION_POLYS[(k - 1) as usize];
                let m: P = if k == 128 { (low, 1) } else { (low | 1 << k, 0) };
                // x^(2^k) == x (mod m)
                assert_eq!(x_pow_pow2(k, m), rem((2, 0), m), "k={k}: not a divisor of x^(2^k)-x");
                for q in prime_divisors(k) {
                    let h = xor(x_pow_pow2(k / q, m), (2, 0));
                    let g = gcd(m, h);
                    assert_eq!(deg(g), 0, "k={k}: shares a factor of degree dividing {}", k / q);
                }
            }
        }
    }
}
