//! Surrogate cipher suite.
//!
//! The real silicon's primitives are proprietary; this suite reproduces the
//! three algebraic properties the attacks need and nothing else:
//!
//! 1. an XOR-malleable counter-mode keystream (bit flips in ciphertext land
//!    at the same positions in plaintext),
//! 2. a key-dependent GF(2^32) block checksum evaluated every 8th word of an
//!    encrypted stream (7 payload words + 1 checksum word per block),
//! 3. a public-key signature whose public key is pinned by a 256-bit digest
//!    burned into fuses.
//!
//! All constants are normative so golden vectors stay portable.

use std::fmt;
use std::path::Path;

use num_bigint::BigUint;
use thiserror::Error;

use crate::bitstream::Word;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Low 32 bits of the GF(2^32) reduction polynomial
/// x^32 + x^7 + x^3 + x^2 + 1.
pub const GF_POLY_TAIL: u32 = 0x8D;

/// Element of GF(2^32); plain words double as field elements.
pub type GfElement = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("expected {expected} {what}, got {got}")]
    BadLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("RSA modulus of {0} bits is too small; the digest reduction rule needs n >= 2^255")]
    ModulusTooSmall(u64),
    #[error("bad hex value {0:?}")]
    BadHex(String),
    #[error("key file is missing field {0:?}")]
    MissingField(&'static str),
    #[error("key file {path}: {message}")]
    KeyFile { path: String, message: String },
}

/// A 256-bit cipher key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AesKey(pub [u8; 32]);

impl AesKey {
    pub fn from_hex(s: &str) -> Result<AesKey, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|_| CryptoError::BadHex(s.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|v: Vec<u8>| CryptoError::BadLength {
                what: "key bytes",
                expected: 32,
                got: v.len(),
            })?;
        Ok(AesKey(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

/// A 128-bit IV, kept as the 4 words written to the GCM IV register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GcmIv(pub [Word; 4]);

impl GcmIv {
    pub fn bytes(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        for (i, w) in self.0.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&w.to_be_bytes());
        }
        out
    }
}

fn fnv1a64(seed: u64, data: &[u8]) -> u64 {
    let mut h = seed;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix_final(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Keystream word for a (key, iv, counter) triple: FNV-1a-64 over
/// `key || iv || counter_be64`, splitmix-finalized, upper 32 bits.
pub fn keystream_word(key: &AesKey, iv: &GcmIv, counter: u64) -> Word {
    let mut h = fnv1a64(FNV_OFFSET, &key.0);
    h = fnv1a64(h, &iv.bytes());
    h = fnv1a64(h, &counter.to_be_bytes());
    (splitmix_final(h) >> 32) as Word
}

/// Counter-mode transform: word `i` is XORed with the keystream word for
/// counter `i`. Encryption and decryption are the same operation.
pub fn encrypt_ctr(key: &AesKey, iv: &GcmIv, words: &[Word]) -> Vec<Word> {
    words
        .iter()
        .enumerate()
        .map(|(i, &w)| w ^ keystream_word(key, iv, i as u64))
        .collect()
}

pub fn decrypt_ctr(key: &AesKey, iv: &GcmIv, words: &[Word]) -> Vec<Word> {
    encrypt_ctr(key, iv, words)
}

/// Per-stream checksum key, drawn from a reserved counter slot and forced
/// nonzero so the block fold has no zero divisor.
pub fn derive_h(key: &AesKey, iv: &GcmIv) -> GfElement {
    keystream_word(key, iv, 0xFFFF_FFFE) | 1
}

/// Carry-less multiply in GF(2^32) reduced mod x^32 + x^7 + x^3 + x^2 + 1.
pub fn gf_mul(a: GfElement, b: GfElement) -> GfElement {
    let mut acc = 0u32;
    let mut a = a;
    let mut b = b;
    while b != 0 {
        if b & 1 != 0 {
            acc ^= a;
        }
        b >>= 1;
        let carry = a & 0x8000_0000 != 0;
        a <<= 1;
        if carry {
            a ^= GF_POLY_TAIL;
        }
    }
    acc
}

/// Checksum word closing one 8-word block: a Horner fold of the 7 payload
/// words under `h`, masked with a keystream word from the dedicated
/// block-counter domain (`0x80000000 | block_index`).
pub fn block_checksum(
    h: GfElement,
    key: &AesKey,
    iv: &GcmIv,
    block_index: u32,
    payload: &[Word],
) -> Result<Word, CryptoError> {
    if payload.len() != 7 {
        return Err(CryptoError::BadLength {
            what: "payload words",
            expected: 7,
            got: payload.len(),
        });
    }
    let mut acc = 0;
    for &w in payload {
        acc = gf_mul(acc ^ w, h);
    }
    Ok(acc ^ keystream_word(key, iv, 0x8000_0000u64 | block_index as u64))
}

/// A 256-bit digest.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Digest256(pub [u8; 32]);

impl Digest256 {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Digest256, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|_| CryptoError::BadHex(s.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|v: Vec<u8>| CryptoError::BadLength {
                what: "digest bytes",
                expected: 32,
                got: v.len(),
            })?;
        Ok(Digest256(arr))
    }
}

impl fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest256({})", self.to_hex())
    }
}

/// 256-bit digest over a word sequence: four FNV-1a-64 lanes, lane `L`
/// seeded with the FNV offset XOR `L`, each fed every word's 4 big-endian
/// bytes; the result is the lanes concatenated big-endian.
pub fn digest256(words: &[Word]) -> Digest256 {
    let mut out = [0u8; 32];
    for lane in 0..4u64 {
        let mut h = FNV_OFFSET ^ lane;
        for &w in words {
            h = fnv1a64(h, &w.to_be_bytes());
        }
        out[lane as usize * 8..lane as usize * 8 + 8].copy_from_slice(&h.to_be_bytes());
    }
    Digest256(out)
}

// ---------------------------------------------------------------------------
// RSA
// ---------------------------------------------------------------------------

/// An RSA public key plus its fixed word width on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RsaPublicKey {
    pub e: u32,
    pub n: BigUint,
    /// Width of `n` (and of signatures) in words when serialized.
    pub n_words: usize,
}

impl RsaPublicKey {
    pub fn new(e: u32, n: BigUint) -> RsaPublicKey {
        let n_words = (n.bits() as usize).div_ceil(32);
        RsaPublicKey { e, n, n_words }
    }

    /// Wire form: `e` as one word followed by `n` big-endian, fixed width.
    pub fn words(&self) -> Vec<Word> {
        let mut out = vec![self.e];
        out.extend(biguint_to_words(&self.n, self.n_words));
        out
    }

    /// The digest burned into fuses to pin this key.
    pub fn digest(&self) -> Digest256 {
        digest256(&self.words())
    }
}

/// A keypair; the private exponent never leaves this type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RsaKeypair {
    pub public: RsaPublicKey,
    d: BigUint,
}

impl RsaKeypair {
    pub fn new(e: u32, n: BigUint, d: BigUint) -> RsaKeypair {
        RsaKeypair {
            public: RsaPublicKey::new(e, n),
            d,
        }
    }
}

pub fn biguint_to_words(v: &BigUint, width: usize) -> Vec<Word> {
    let bytes = v.to_bytes_be();
    let mut out = vec![0u8; width * 4];
    let start = out.len().saturating_sub(bytes.len());
    out[start..].copy_from_slice(&bytes[bytes.len().saturating_sub(width * 4)..]);
    out.chunks_exact(4)
        .map(|c| Word::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn words_to_biguint(words: &[Word]) -> BigUint {
    let mut bytes = Vec::with_capacity(words.len() * 4);
    for w in words {
        bytes.extend_from_slice(&w.to_be_bytes());
    }
    BigUint::from_bytes_be(&bytes)
}

/// Textbook signature: `(digest mod n) ^ d mod n`, fixed-width words.
/// The digest-reduction rule needs `n >= 2^255`.
pub fn rsa_sign(keypair: &RsaKeypair, digest: &Digest256) -> Result<Vec<Word>, CryptoError> {
    let n = &keypair.public.n;
    if n.bits() < 256 {
        return Err(CryptoError::ModulusTooSmall(n.bits()));
    }
    let m = BigUint::from_bytes_be(&digest.0) % n;
    let s = m.modpow(&keypair.d, n);
    Ok(biguint_to_words(&s, keypair.public.n_words))
}

/// Verify a signature against a digest. Pure in all four inputs.
pub fn rsa_verify(e: u32, n: &BigUint, signature: &[Word], digest: &Digest256) -> bool {
    if n.bits() < 256 {
        return false;
    }
    let s = words_to_biguint(signature);
    if s >= *n {
        return false;
    }
    let m = BigUint::from_bytes_be(&digest.0) % n;
    s.modpow(&BigUint::from(e), n) == m
}

// ---------------------------------------------------------------------------
// Key fixture files
// ---------------------------------------------------------------------------

/// Key material loaded from a fixture file: plain text with hex fields
/// `key=`, `e=`, `n=`, `d=`. Any subset of fields may be present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyMaterial {
    pub aes: Option<AesKey>,
    pub rsa_e: Option<u32>,
    pub rsa_n: Option<BigUint>,
    rsa_n_hex_width: usize,
    pub rsa_d: Option<BigUint>,
}

impl KeyMaterial {
    pub fn from_aes(key: AesKey) -> KeyMaterial {
        KeyMaterial {
            aes: Some(key),
            ..KeyMaterial::default()
        }
    }

    pub fn parse(text: &str) -> Result<KeyMaterial, CryptoError> {
        let mut out = KeyMaterial::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (field, value) = line
                .split_once('=')
                .ok_or_else(|| CryptoError::BadHex(line.to_string()))?;
            let value = value.trim();
            match field.trim() {
                "key" => out.aes = Some(AesKey::from_hex(value)?),
                "e" => {
                    out.rsa_e = Some(
                        u32::from_str_radix(value, 16)
                            .map_err(|_| CryptoError::BadHex(value.to_string()))?,
                    )
                }
                "n" => {
                    out.rsa_n_hex_width = value.len();
                    out.rsa_n = Some(parse_biguint_hex(value)?);
                }
                "d" => out.rsa_d = Some(parse_biguint_hex(value)?),
                other => return Err(CryptoError::BadHex(other.to_string())),
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<KeyMaterial, CryptoError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CryptoError::KeyFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        KeyMaterial::parse(&text).map_err(|e| CryptoError::KeyFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn aes_key(&self) -> Result<AesKey, CryptoError> {
        self.aes.ok_or(CryptoError::MissingField("key"))
    }

    pub fn public_key(&self) -> Result<RsaPublicKey, CryptoError> {
        let e = self.rsa_e.ok_or(CryptoError::MissingField("e"))?;
        let n = self.rsa_n.clone().ok_or(CryptoError::MissingField("n"))?;
        let mut key = RsaPublicKey::new(e, n);
        // Preserve the file's declared width so leading-zero moduli keep
        // their wire size.
        key.n_words = key.n_words.max(self.rsa_n_hex_width.div_ceil(8));
        Ok(key)
    }

    pub fn keypair(&self) -> Result<RsaKeypair, CryptoError> {
        let public = self.public_key()?;
        let d = self.rsa_d.clone().ok_or(CryptoError::MissingField("d"))?;
        Ok(RsaKeypair { public, d })
    }
}

fn parse_biguint_hex(s: &str) -> Result<BigUint, CryptoError> {
    let s = s.trim();
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(CryptoError::BadHex(s.to_string()));
    }
    Ok(BigUint::parse_bytes(s.as_bytes(), 16).expect("validated hex"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn fixture_key() -> AesKey {
        let mut bytes = [0u8; 32];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = i as u8;
        }
        AesKey(bytes)
    }

    pub(crate) fn fixture_iv() -> GcmIv {
        GcmIv([0x0BAD_CAFE, 0xDEAD_BEEF, 0x0123_4567, 0x89AB_CDEF])
    }

    #[test]
    fn keystream_golden_vectors() {
        // Frozen from a scratch FNV-1a + splitmix implementation written
        // before this module.
        let zk = AesKey([0u8; 32]);
        let zi = GcmIv([0; 4]);
        assert_eq!(keystream_word(&zk, &zi, 0), 0x2C06_4A35);
        assert_eq!(keystream_word(&zk, &zi, 1), 0x35E4_C49D);
        assert_eq!(
            keystream_word(&fixture_key(), &fixture_iv(), 0),
            0x80BD_88E5
        );
        assert_eq!(
            keystream_word(&fixture_key(), &fixture_iv(), 1),
            0x2F28_E138
        );
        // Determinism.
        assert_eq!(
            keystream_word(&fixture_key(), &fixture_iv(), 7),
            keystream_word(&fixture_key(), &fixture_iv(), 7)
        );
    }

    #[test]
    fn derive_h_golden_and_nonzero() {
        let zk = AesKey([0u8; 32]);
        let zi = GcmIv([0; 4]);
        assert_eq!(derive_h(&zk, &zi), 0xE3DA_E461);
        assert_eq!(derive_h(&fixture_key(), &fixture_iv()), 0x182E_AF59);
        assert_eq!(derive_h(&zk, &zi) & 1, 1);
    }

    #[test]
    fn ctr_of_zero_plaintext_is_keystream() {
        let key = fixture_key();
        let iv = fixture_iv();
        let ct = encrypt_ctr(&key, &iv, &[0, 0, 0]);
        for (i, &w) in ct.iter().enumerate() {
            assert_eq!(w, keystream_word(&key, &iv, i as u64));
        }
    }

    #[test]
    fn ctr_bit_flip_locality_exhaustive() {
        let key = fixture_key();
        let iv = fixture_iv();
        let plain = vec![0x1234_5678, 0x9ABC_DEF0, 0x0F0F_0F0F];
        let ct = encrypt_ctr(&key, &iv, &plain);
        for bit in 0..32 {
            let mut mutated = ct.clone();
            mutated[1] ^= 1 << bit;
            let pt = decrypt_ctr(&key, &iv, &mutated);
            assert_eq!(pt[0], plain[0]);
            assert_eq!(pt[1], plain[1] ^ (1 << bit));
            assert_eq!(pt[2], plain[2]);
        }
    }

    #[test]
    fn gf_mul_identities() {
        assert_eq!(gf_mul(0xDEAD_C0DE, 1), 0xDEAD_C0DE);
        assert_eq!(gf_mul(1, 0xDEAD_C0DE), 0xDEAD_C0DE);
        assert_eq!(gf_mul(0, 0xFFFF_FFFF), 0);
        // x * x^31 = x^32 = reduction tail.
        assert_eq!(gf_mul(0x0000_0002, 0x8000_0000), 0x0000_008D);
        // Frozen products from the scratch oracle.
        assert_eq!(gf_mul(0x1234, 0xABCD), 0x0BF6_2044);
        assert_eq!(gf_mul(0xDEAD_C0DE, 0x0BAD_CAFE), 0xA2F6_2267);
    }

    /// Test-only oracle: full 64-bit carry-less product followed by long
    /// division by the 33-bit modulus.
    pub(crate) fn gf_mul_oracle(a: u32, b: u32) -> u32 {
        let mut prod: u64 = 0;
        for i in 0..32 {
            if (b >> i) & 1 == 1 {
                prod ^= (a as u64) << i;
            }
        }
        let modulus: u64 = (1u64 << 32) | GF_POLY_TAIL as u64;
        for bit in (32..64).rev() {
            if (prod >> bit) & 1 == 1 {
                prod ^= modulus << (bit - 32);
            }
        }
        prod as u32
    }

    #[test]
    fn block_checksum_goldens() {
        let key = fixture_key();
        let iv = fixture_iv();
        let h = derive_h(&key, &iv);
        // All-zero payload: the fold is zero, leaving only the mask word.
        let zero = block_checksum(h, &key, &iv, 0, &[0; 7]).unwrap();
        assert_eq!(zero, 0x637C_2561);
        assert_eq!(zero, keystream_word(&key, &iv, 0x8000_0000));
        let seq = block_checksum(h, &key, &iv, 3, &[1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(seq, 0xB2EE_04B4);
    }

    #[test]
    fn block_checksum_rejects_bad_length() {
        let key = fixture_key();
        let iv = fixture_iv();
        assert!(matches!(
            block_checksum(1, &key, &iv, 0, &[0; 6]),
            Err(CryptoError::BadLength { .. })
        ));
    }

    #[test]
    fn digest_goldens() {
        assert_eq!(
            digest256(&[]).to_hex(),
            "cbf29ce484222325cbf29ce484222324cbf29ce484222327cbf29ce484222326"
        );
        assert_eq!(
            digest256(&[0xDEAD_C0DE]).to_hex(),
            "25de34760b868b96cc6d5a6d4db806bf08323869fb7d10284d78b66073a5fd49"
        );
        assert_eq!(
            digest256(&[0, 1, 2, 3]).to_hex(),
            "db580706d1c59ea5e5ea22a3dd2411e4ac0fbb40ed2d71e7512ac58a0e109fa6"
        );
    }

    #[test]
    fn key_material_file_roundtrip() {
        let text = "# test fixture\nkey = 000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f\n";
        let km = KeyMaterial::parse(text).unwrap();
        assert_eq!(km.aes_key().unwrap(), fixture_key());
        assert!(km.public_key().is_err());
    }

    #[test]
    fn rsa_sign_rejects_small_modulus() {
        let kp = RsaKeypair::new(65537, BigUint::from(0xFFFF_FFFFu64), BigUint::from(3u8));
        assert!(matches!(
            rsa_sign(&kp, &digest256(&[1])),
            Err(CryptoError::ModulusTooSmall(_))
        ));
    }

    fn fixture_keypair(name: &str) -> RsaKeypair {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures/keys")
            .join(name);
        KeyMaterial::load(path).unwrap().keypair().unwrap()
    }

    #[test]
    fn rsa_sign_verify_roundtrip_with_fixture_keys() {
        let right = fixture_keypair("right_rsa.key");
        let wrong = fixture_keypair("wrong_rsa.key");
        assert_eq!(right.public.n_words, 16, "512-bit fixture modulus");
        let digest = digest256(&[0xDEAD_C0DE, 0x0BAD_CAFE]);

        let signature = rsa_sign(&right, &digest).unwrap();
        assert_eq!(signature.len(), 16);
        assert!(rsa_verify(
            right.public.e,
            &right.public.n,
            &signature,
            &digest
        ));
        // A different digest does not verify.
        assert!(!rsa_verify(
            right.public.e,
            &right.public.n,
            &signature,
            &digest256(&[1])
        ));
        // A signature from the wrong keypair fails against the right key.
        let forged = rsa_sign(&wrong, &digest).unwrap();
        assert!(!rsa_verify(
            right.public.e,
            &right.public.n,
            &forged,
            &digest
        ));
        // The all-zero signature never verifies a nonzero digest.
        assert!(!rsa_verify(
            right.public.e,
            &right.public.n,
            &[0; 16],
            &digest
        ));
        // The two fixture keys pin different fuse digests.
        assert_ne!(right.public.digest(), wrong.public.digest());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn ctr_is_an_involution(words in proptest::collection::vec(any::<u32>(), 0..32)) {
            let key = fixture_key();
            let iv = fixture_iv();
            prop_assert_eq!(decrypt_ctr(&key, &iv, &encrypt_ctr(&key, &iv, &words)), words);
        }

        #[test]
        fn gf_matches_oracle(a in any::<u32>(), b in any::<u32>()) {
            prop_assert_eq!(gf_mul(a, b), gf_mul_oracle(a, b));
        }

        #[test]
        fn gf_commutative(a in any::<u32>(), b in any::<u32>()) {
            prop_assert_eq!(gf_mul(a, b), gf_mul(b, a));
        }

        #[test]
        fn gf_associative(a in any::<u32>(), b in any::<u32>(), c in any::<u32>()) {
            prop_assert_eq!(gf_mul(a, gf_mul_oracle(b, c)), gf_mul_oracle(gf_mul(a, b), c));
        }

        #[test]
        fn gf_distributive(a in any::<u32>(), b in any::<u32>(), c in any::<u32>()) {
            prop_assert_eq!(gf_mul(a, b ^ c), gf_mul(a, b) ^ gf_mul(a, c));
        }

        #[test]
        fn gf_no_zero_divisors(a in 1u32.., b in 1u32..) {
            prop_assert_ne!(gf_mul(a, b), 0);
        }

        /// Changing any single payload word changes the block checksum.
        #[test]
        fn block_checksum_detects_word_changes(
            payload in proptest::collection::vec(any::<u32>(), 7),
            idx in 0usize..7,
            delta in 1u32..,
        ) {
            let key = fixture_key();
            let iv = fixture_iv();
            let h = derive_h(&key, &iv);
            let before = block_checksum(h, &key, &iv, 1, &payload).unwrap();
            let mut mutated = payload.clone();
            mutated[idx] ^= delta;
            let after = block_checksum(h, &key, &iv, 1, &mutated).unwrap();
            prop_assert_ne!(before, after);
        }
    }
}
