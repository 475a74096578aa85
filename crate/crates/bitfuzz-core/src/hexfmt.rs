//! Serde helpers for lowercase fixed-width hex fields in JSON formats.

pub(crate) mod word {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(w: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:08x}", w))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        let s = String::deserialize(d)?;
        let t = s.trim().trim_start_matches("0x");
        u32::from_str_radix(t, 16)
            .map_err(|_| serde::de::Error::custom(format!("bad hex word {s:?}")))
    }
}

pub(crate) mod u64hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:016x}", v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        let t = s.trim().trim_start_matches("0x");
        u64::from_str_radix(t, 16)
            .map_err(|_| serde::de::Error::custom(format!("bad hex value {s:?}")))
    }
}

pub(crate) mod bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Vec<u8>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s.trim()).map_err(|_| serde::de::Error::custom(format!("bad hex bytes {s:?}")))
    }
}

/// Lowercase 8-hex-char rendering of a word, the wire format for dumps.
pub fn word_to_hex(w: u32) -> String {
    format!("{:08x}", w)
}

pub fn word_from_hex(s: &str) -> Option<u32> {
    u32::from_str_radix(s.trim().trim_start_matches("0x"), 16).ok()
}

/// One long lowercase hex string, 8 chars per word.
pub fn words_to_hex(words: &[u32]) -> String {
    let mut out = String::with_capacity(words.len() * 8);
    for w in words {
        out.push_str(&format!("{:08x}", w));
    }
    out
}

pub fn words_from_hex(s: &str) -> Option<Vec<u32>> {
    let s = s.trim();
    if !s.len().is_multiple_of(8) {
        return None;
    }
    s.as_bytes()
        .chunks(8)
        .map(|c| u32::from_str_radix(std::str::from_utf8(c).ok()?, 16).ok())
        .collect()
}
