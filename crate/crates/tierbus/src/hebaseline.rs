//! Additive homomorphic aggregation baseline for the benchmark
//! comparison.
//!
//! Distributed-key exponential ElGamal over a safe-prime group: each
//! meter holds a key share, encryption is `(g^r, g^m * y^r)`, aggregation
//! is the componentwise ciphertext product, and decryption needs a
//! partial result from every share before a small-range discrete log
//! (baby-step giant-step) recovers the sum. No strict subset of shares
//! can decrypt.

use std::collections::HashMap;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use thiserror::Error;

#[derive(Error, Debug, PartialEq, Eq)]
pub enum HeError {
    #[error("message {0} exceeds the configured maximum {1}")]
    MessageOutOfRange(u64, u64),
    #[error("cannot aggregate an empty batch")]
    EmptyBatch,
    #[error("discrete log not found within bound {0} (sum out of range or bad partials)")]
    DlogNotFound(u64),
    #[error("need {expected} partial decryptions, got {got}")]
    MissingPartials { expected: usize, got: usize },
}

/// Largest plaintext a single encryption accepts (milliwatt readings).
pub const DEFAULT_M_MAX: u64 = 1 << 24;
/// Default recovery bound for the aggregate sum.
pub const DEFAULT_BOUND: u64 = 1 << 32;

/// Safe-prime group: `p = 2q + 1`, both prime; `g` generates the
/// order-`q` subgroup of quadratic residues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupParams {
    pub p: BigUint,
    pub q: BigUint,
    pub g: BigUint,
}

// RFC 3526 MODP group 14 modulus (2048-bit safe prime).
const RFC3526_2048_P_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF"
);

// 257-bit safe prime for fast correctness testing: p = 2q + 1 with
// q = 2^255 + 0x1c197.
const TEST_P_HEX: &str = "1000000000000000000000000000000000000000000000000000000000003832f";

impl GroupParams {
    /// The benchmark group: 2048-bit modulus, the security regime an HE
    /// smart-metering deployment would actually run.
    pub fn rfc3526_2048() -> GroupParams {
        let p = BigUint::parse_bytes(RFC3526_2048_P_HEX.as_bytes(), 16).expect("constant parses");
        let q = (&p - BigUint::one()) >> 1;
        // 4 = 2^2 is a quadratic residue, hence in (and generating) the
        // order-q subgroup
        GroupParams {
            p,
            q,
            g: BigUint::from(4u32),
        }
    }

    /// Small group for correctness tests where 2048-bit arithmetic would
    /// dominate the runtime. Same structure, 257-bit modulus.
    pub fn test_small() -> GroupParams {
        let p = BigUint::parse_bytes(TEST_P_HEX.as_bytes(), 16).expect("constant parses");
        let q = (&p - BigUint::one()) >> 1;
        GroupParams {
            p,
            q,
            g: BigUint::from(4u32),
        }
    }

    pub fn is_subgroup_member(&self, x: &BigUint) -> bool {
        !x.is_zero() && x < &self.p && x.modpow(&self.q, &self.p).is_one()
    }
}

/// One meter's secret exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyShare {
    pub meter_index: usize,
    pub exponent: BigUint,
}

/// `y = g^(sum of shares) mod p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointPublicKey {
    pub y: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HECiphertext {
    pub c1: BigUint,
    pub c2: BigUint,
}

/// Generate `n` random shares and the joint public key.
pub fn setup<R: Rng>(n: usize, params: &GroupParams, rng: &mut R) -> (Vec<KeyShare>, JointPublicKey) {
    assert!(n >= 1, "need at least one share");
    let one = BigUint::one();
    let mut sum = BigUint::zero();
    let shares: Vec<KeyShare> = (0..n)
        .map(|meter_index| {
            let exponent = rng.gen_biguint_range(&one, &params.q);
            sum += &exponent;
            KeyShare {
                meter_index: meter_index + 1,
                exponent,
            }
        })
        .collect();
    let y = params.g.modpow(&(sum % &params.q), &params.p);
    (shares, JointPublicKey { y })
}

/// `(c1, c2) = (g^r, g^m * y^r) mod p` with caller-supplied randomness.
pub fn he_encrypt_with(
    params: &GroupParams,
    y: &JointPublicKey,
    m: u64,
    r: &BigUint,
    m_max: u64,
) -> Result<HECiphertext, HeError> {
    if m > m_max {
        return Err(HeError::MessageOutOfRange(m, m_max));
    }
    let c1 = params.g.modpow(r, &params.p);
    let gm = params.g.modpow(&BigUint::from(m), &params.p);
    let c2 = (gm * y.y.modpow(r, &params.p)) % &params.p;
    Ok(HECiphertext { c1, c2 })
}

/// Randomized encryption with `r` drawn from `[1, q-1]`.
pub fn he_encrypt<R: Rng>(
    params: &GroupParams,
    y: &JointPublicKey,
    m: u64,
    rng: &mut R,
) -> Result<HECiphertext, HeError> {
    let r = rng.gen_biguint_range(&BigUint::one(), &params.q);
    he_encrypt_with(params, y, m, &r, DEFAULT_M_MAX)
}

/// Componentwise product: encrypts the sum of the batch's plaintexts.
pub fn he_aggregate(params: &GroupParams, cts: &[HECiphertext]) -> Result<HECiphertext, HeError> {
    if cts.is_empty() {
        return Err(HeError::EmptyBatch);
    }
    let mut c1 = BigUint::one();
    let mut c2 = BigUint::one();
    for ct in cts {
        c1 = (c1 * &ct.c1) % &params.p;
        c2 = (c2 * &ct.c2) % &params.p;
    }
    Ok(HECiphertext { c1, c2 })
}

/// One share-holder's contribution to decryption: `c1^(x_i) mod p`.
pub fn partial_decrypt(params: &GroupParams, share: &KeyShare, ct: &HECiphertext) -> BigUint {
    ct.c1.modpow(&share.exponent, &params.p)
}

/// Precomputed baby steps for recovering exponents in `[0, bound]`.
pub struct BsgsTable {
    table: HashMap<Vec<u8>, u64>,
    giant_factor: BigUint,
    steps: u64,
    bound: u64,
}

impl BsgsTable {
    pub fn new(params: &GroupParams, bound: u64) -> BsgsTable {
        let steps = ((bound as f64).sqrt().ceil() as u64).max(1);
        let mut table = HashMap::with_capacity(steps as usize);
        let mut acc = BigUint::one();
        for j in 0..steps {
            table.entry(acc.to_bytes_le()).or_insert(j);
            acc = (acc * &params.g) % &params.p;
        }
        // g^(-steps) = (g^steps)^(p-2) by Fermat
        let g_steps = params.g.modpow(&BigUint::from(steps), &params.p);
        let giant_factor = g_steps.modpow(&(&params.p - BigUint::from(2u32)), &params.p);
        BsgsTable {
            table,
            giant_factor,
            steps,
            bound,
        }
    }

    pub fn bound(&self) -> u64 {
        self.bound
    }

    /// Solve `g^x = target (mod p)` for `x` in `[0, bound]`.
    pub fn find(&self, params: &GroupParams, target: &BigUint) -> Result<u64, HeError> {
        let mut gamma = target.clone();
        let giant_steps = self.bound / self.steps + 1;
        for i in 0..=giant_steps {
            if let Some(&j) = self.table.get(&gamma.to_bytes_le()) {
                let x = i * self.steps + j;
                if x <= self.bound {
                    return Ok(x);
                }
            }
            gamma = (gamma * &self.giant_factor) % &params.p;
        }
        Err(HeError::DlogNotFound(self.bound))
    }
}

/// Cooperative decryption: divide out the product of all partials, then
/// recover the sum by discrete log over `[0, bound]`.
pub fn he_combine(
    params: &GroupParams,
    ct: &HECiphertext,
    partials: &[BigUint],
    expected_shares: usize,
    bound: u64,
) -> Result<u64, HeError> {
    let table = BsgsTable::new(params, bound);
    he_combine_with(params, &table, ct, partials, expected_shares)
}

/// [`he_combine`] against a reusable precomputed table.
pub fn he_combine_with(
    params: &GroupParams,
    table: &BsgsTable,
    ct: &HECiphertext,
    partials: &[BigUint],
    expected_shares: usize,
) -> Result<u64, HeError> {
    if partials.len() != expected_shares {
        return Err(HeError::MissingPartials {
            expected: expected_shares,
            got: partials.len(),
        });
    }
    let mut blind = BigUint::one();
    for partial in partials {
        blind = (blind * partial) % &params.p;
    }
    let blind_inv = blind.modpow(&(&params.p - BigUint::from(2u32)), &params.p);
    let g_sum = (&ct.c2 * blind_inv) % &params.p;
    table.find(params, &g_sum)
}

/// One measured benchmark row; timings in microseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRow {
    pub scheme: &'static str,
    pub size: usize,
    pub run: u32,
    pub encrypt_us: u64,
    pub aggregate_us: u64,
    pub decrypt_us: u64,
}

impl BenchRow {
    pub fn total_us(&self) -> u64 {
        self.encrypt_us + self.aggregate_us + self.decrypt_us
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scheme,
            self.size,
            self.run,
            self.encrypt_us,
            self.aggregate_us,
            self.decrypt_us,
            self.total_us()
        )
    }
}

pub const BENCH_CSV_HEADER: &str = "scheme,size,run,encrypt_us,aggregate_us,decrypt_us,total_us";

/// Mean and sample standard deviation of the total over a scheme's runs.
pub fn total_mean_stddev(rows: &[BenchRow]) -> (f64, f64) {
    let totals: Vec<f64> = rows.iter().map(|r| r.total_us() as f64).collect();
    let n = totals.len() as f64;
    if totals.is_empty() {
        return (0.0, 0.0);
    }
    let mean = totals.iter().sum::<f64>() / n;
    if totals.len() < 2 {
        return (mean, 0.0);
    }
    let var = totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Time the homomorphic pipeline (encrypt all, aggregate, cooperative
/// decrypt) against the symmetric path (seal all, open all, integer sum)
/// on identical batches. Key setup and the dlog table are precomputation
/// and stay outside the timed regions; every run cross-checks the
/// recovered sum.
pub fn he_benchmark<R: Rng>(
    params: &GroupParams,
    sizes: &[usize],
    runs: u32,
    reading_max: u64,
    rng: &mut R,
) -> Vec<BenchRow> {
    use std::time::Instant;
    let mut rows = Vec::with_capacity(sizes.len() * runs as usize * 2);
    for &size in sizes {
        let (shares, y) = setup(size, params, rng);
        let bound = reading_max
            .checked_mul(size as u64)
            .expect("sum bound fits in u64");
        let table = BsgsTable::new(params, bound);
        let sym_key = crate::crypto::DataKey::generate(0);
        for run in 0..runs {
            let readings: Vec<u64> = (0..size).map(|_| rng.gen_range(0..=reading_max)).collect();
            let expected: u64 = readings.iter().sum();

            // homomorphic path
            let t0 = Instant::now();
            let cts: Vec<HECiphertext> = readings
                .iter()
                .map(|&m| he_encrypt_with(params, &y, m, &rng.gen_biguint_range(&BigUint::one(), &params.q), reading_max).expect("reading in range"))
                .collect();
            let t1 = Instant::now();
            let agg = he_aggregate(params, &cts).expect("non-empty batch");
            let t2 = Instant::now();
            let partials: Vec<BigUint> = shares
                .iter()
                .map(|s| partial_decrypt(params, s, &agg))
                .collect();
            let sum =
                he_combine_with(params, &table, &agg, &partials, size).expect("sum within bound");
            let t3 = Instant::now();
            assert_eq!(sum, expected, "homomorphic sum mismatch");
            rows.push(BenchRow {
                scheme: "he",
                size,
                run,
                encrypt_us: (t1 - t0).as_micros() as u64,
                aggregate_us: (t2 - t1).as_micros() as u64,
                decrypt_us: (t3 - t2).as_micros() as u64,
            });

            // symmetric path over the same batch
            let s0 = Instant::now();
            let sealed: Vec<Vec<u8>> = readings
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    crate::crypto::seal_message(&sym_key, 1, i as u64, &m.to_le_bytes())
                })
                .collect();
            let s1 = Instant::now();
            let opened: Vec<u64> = sealed
                .iter()
                .map(|ct| {
                    let plain =
                        crate::crypto::open_message(&sym_key, 1, ct).expect("well-formed payload");
                    u64::from_le_bytes(plain.try_into().expect("8-byte reading"))
                })
                .collect();
            let s2 = Instant::now();
            let sym_sum: u64 = opened.iter().sum();
            let s3 = Instant::now();
            assert_eq!(sym_sum, expected, "symmetric sum mismatch");
            rows.push(BenchRow {
                scheme: "symmetric",
                size,
                run,
                encrypt_us: (s1 - s0).as_micros() as u64,
                decrypt_us: (s2 - s1).as_micros() as u64,
                aggregate_us: (s3 - s2).as_micros() as u64,
            });
        }
    }
    rows
}

/// Deterministic Miller-Rabin for the group-parameter sanity checks.
pub fn is_probable_prime(n: &BigUint, rounds: usize) -> bool {
    let two = BigUint::from(2u32);
    let three = BigUint::from(3u32);
    if n < &two {
        return false;
    }
    if n == &two || n == &three {
        return true;
    }
    if n.is_even() {
        return false;
    }
    let n_minus_one = n - BigUint::one();
    let trailing = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> trailing;
    // fixed small bases plus pseudorandom ones derived from n
    let mut bases: Vec<BigUint> = [2u32, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37]
        .iter()
        .map(|&b| BigUint::from(b))
        .collect();
    let mut seed = n.clone();
    while bases.len() < rounds {
        seed = (&seed * BigUint::from(6_364_136_223_846_793_005u64) + BigUint::from(1u32))
            % (n - &two);
        bases.push(&seed % (n - &three) + &two);
    }
    'outer: for a in bases.iter().take(rounds) {
        if a.gcd(n) != BigUint::one() {
            return false;
        }
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 0..trailing.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'outer;
            }
        }
        return false;
    }
    true
}
