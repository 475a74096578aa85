//! Device geometry shared between the template renderer and the simulator.
//!
//! An RSA-authenticated block has a fixed length computed from these
//! parameters; the renderer and the engine must agree on them or the engine
//! rejects the block as malformed.

use serde::{Deserialize, Serialize};

/// Frame and buffer geometry of a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceGeometry {
    /// Words per fabric frame.
    pub frame_length: usize,
    /// Fabric size in frames.
    pub frames: usize,
    /// Frames expected for an RSA block whose DLC has the test-mode bit set.
    pub test_mode_frames: usize,
    /// RSA modulus width in 32-bit words (16 = 512-bit).
    pub rsa_modulus_words: usize,
    /// Fixed length of the RSA header-command buffer, in words.
    pub header_buffer_words: usize,
    /// Fixed length of the RSA footer-command buffer, in words.
    pub footer_buffer_words: usize,
}

impl Default for DeviceGeometry {
    fn default() -> Self {
        DeviceGeometry {
            frame_length: 93,
            frames: 32,
            test_mode_frames: 24,
            rsa_modulus_words: 16,
            header_buffer_words: 32,
            footer_buffer_words: 160,
        }
    }
}

/// Padding words between the public key and the signature in an RSA block.
pub const RSA_PADDING_WORDS: usize = 4;

impl DeviceGeometry {
    /// Fabric words carried by an RSA block (test mode or full fabric).
    pub fn rsa_fabric_words(&self, test_mode: bool) -> usize {
        let frames = if test_mode {
            self.test_mode_frames
        } else {
            self.frames
        };
        frames * self.frame_length
    }

    /// Word offset of the DLC within the RSA block: e, n, padding,
    /// signature, then the 4-word IV.
    pub fn rsa_dlc_offset(&self) -> usize {
        1 + self.rsa_modulus_words + RSA_PADDING_WORDS + self.rsa_modulus_words + 4
    }

    /// Total fixed length of an RSA block with the given DLC test-mode bit.
    pub fn rsa_block_words(&self, test_mode: bool) -> usize {
        self.rsa_dlc_offset()
            + 1
            + self.header_buffer_words
            + self.rsa_fabric_words(test_mode)
            + self.footer_buffer_words
    }

    pub fn fabric_words(&self) -> usize {
        self.frames * self.frame_length
    }
}
