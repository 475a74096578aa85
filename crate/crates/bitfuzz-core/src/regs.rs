//! Configuration register map and documented bit names.
//!
//! Addresses follow the public register numbering used by the UltraScale(+)
//! configuration engine. Slots without a public name are `UNKNOWN_<n>`. The
//! GCM IV register sits at the slot the older families use for their cipher
//! IV; it consumes 4 words.

pub const CRC: u8 = 0;
pub const FAR: u8 = 1;
pub const FDRI: u8 = 2;
pub const FDRO: u8 = 3;
pub const CMD: u8 = 4;
pub const CTL0: u8 = 5;
pub const MASK: u8 = 6;
pub const STAT: u8 = 7;
pub const GCM_IV: u8 = 11;
pub const WBSTAR: u8 = 16;
pub const TIMER: u8 = 17;
pub const UNKNOWN_20: u8 = 20;
pub const BOOTSTS: u8 = 22;
pub const UNKNOWN_23: u8 = 23;
pub const CTL1: u8 = 24;
pub const RSA_DATA_IN: u8 = 26;
pub const UNKNOWN_29: u8 = 29;
pub const BSPI: u8 = 31;

/// Registers that survive a security reset and a JPROGRAM reset. Only a
/// power cycle clears them.
pub const STICKY: [u8; 4] = [WBSTAR, TIMER, UNKNOWN_20, BSPI];

pub const STAT_CRC_ERROR: u32 = 1 << 0;
pub const STAT_SECURITY_ERROR: u32 = 1 << 5;
pub const STAT_DONE_INTERNAL: u32 = 1 << 13;
pub const STAT_DONE_PIN: u32 = 1 << 14;
pub const BOOTSTS_STATUS_VALID_0: u32 = 1 << 0;
pub const CTL0_DEC: u32 = 1 << 6;
pub const CTL0_FALLBACK_DISABLE: u32 = 1 << 10;

pub fn is_sticky(addr: u8) -> bool {
    STICKY.contains(&addr)
}

pub fn register_name(addr: u8) -> Option<&'static str> {
    Some(match addr {
        0 => "CRC",
        1 => "FAR",
        2 => "FDRI",
        3 => "FDRO",
        4 => "CMD",
        5 => "CTL0",
        6 => "MASK",
        7 => "STAT",
        11 => "GCM_IV",
        16 => "WBSTAR",
        17 => "TIMER",
        20 => "UNKNOWN_20",
        22 => "BOOTSTS",
        23 => "UNKNOWN_23",
        24 => "CTL1",
        26 => "RSA_DATA_IN",
        29 => "UNKNOWN_29",
        31 => "BSPI",
        _ => return None,
    })
}

/// Documented single-bit names for a register, as `(mask, name)` pairs.
/// Used by crash inspection output.
pub fn bit_names(addr: u8) -> &'static [(u32, &'static str)] {
    match addr {
        7 => &[
            (STAT_CRC_ERROR, "BIT00_CRC_ERROR"),
            (STAT_SECURITY_ERROR, "BIT05_SECURITY_ERROR"),
            (STAT_DONE_INTERNAL, "BIT13_DONE_INTERNAL_SIGNAL_STATUS"),
            (STAT_DONE_PIN, "BIT14_DONE_PIN"),
        ],
        22 => &[(BOOTSTS_STATUS_VALID_0, "BIT00_STATUS_VALID_0")],
        5 => &[
            (CTL0_DEC, "BIT06_DEC"),
            (CTL0_FALLBACK_DISABLE, "BIT10_CONFIG_FALLBACK_DISABLE"),
        ],
        _ => &[],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_cover_the_documented_map() {
        assert_eq!(register_name(CMD), Some("CMD"));
        assert_eq!(register_name(RSA_DATA_IN), Some("RSA_DATA_IN"));
        assert_eq!(register_name(8), None);
        assert!(is_sticky(WBSTAR));
        assert!(!is_sticky(CMD));
    }
}
