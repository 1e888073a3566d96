//! Byte-level tokenizer: ids `0..256` are bytes, then BOS, PAD and meta ids.

use crate::error::{Error, Result};
use crate::model::BOS;

pub fn byte_tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`byte_tokenize`]. BOS, PAD and meta ids below `vocab`
/// carry no bytes and are dropped; anything at or above `vocab` is an error.
pub fn detokenize(ids: &[usize], vocab: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            out.push(id as u8);
        } else if id >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
    }
    Ok(out)
}

/// BOS, PAD or a meta id.
pub fn is_special(id: usize) -> bool {
    id >= BOS
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::{DEFAULT_VOCAB, META_BASE};

    #[test]
    fn ab_round_trip() {
        assert_eq!(byte_tokenize(b"ab"), vec![97, 98]);
        assert_eq!(detokenize(&[97, 98], DEFAULT_VOCAB).unwrap(), b"ab");
    }

    #[test]
    fn empty_is_empty() {
        assert!(byte_tokenize(b"").is_empty());
        assert!(detokenize(&[], DEFAULT_VOCAB).unwrap().is_empty());
    }

    #[test]
    fn specials_are_dropped_and_unknown_ids_rejected() {
        assert_eq!(detokenize(&[BOS, 104, 105, META_BASE], DEFAULT_VOCAB).unwrap(), b"hi");
        assert!(matches!(
            detokenize(&[1, DEFAULT_VOCAB], DEFAULT_VOCAB),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(is_special(BOS) && is_special(META_BASE + 1) && !is_special(255));
    }

    proptest! {
        #[test]
        fn blobs_round_trip(blob in proptest::collection::vec(any::<u8>(), 0..1024)) {
            prop_assert_eq!(detokenize(&byte_tokenize(&blob), DEFAULT_VOCAB).unwrap(), blob);
        }
    }

    #[test]
    fn kibibyte_blob_round_trips() {
        let blob: Vec<u8> = (0..1024u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        assert_eq!(detokenize(&byte_tokenize(&blob), DEFAULT_VOCAB).unwrap(), blob);
    }
}
