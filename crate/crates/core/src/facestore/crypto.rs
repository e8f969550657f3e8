//! Authenticated encryption of individual manifest fields.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chacha20poly1305::aead::{Aead, Generate, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CIPHER_NAME: &str = "chacha20poly1305";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedField {
    pub cipher: String,
    pub nonce: String,
    pub data: String,
}

#[derive(Debug, PartialEq, Eq)]
pub enum OpenError {
    UnsupportedCipher(String),
    Encoding,
    Authentication,
}

/// Symmetric key derived from a secret with SHA-256.
#[derive(Clone)]
pub struct FieldKey(ChaCha20Poly1305);

impl FieldKey {
    pub fn from_secret(secret: &[u8]) -> Self {
        let digest: [u8; 32] = Sha256::digest(secret).into();
        FieldKey(ChaCha20Poly1305::new(&Key::from(digest)))
    }

    /// `context` is bound as associated data so a field cannot be moved to
    /// another record or slot without failing authentication.
    pub fn seal(&self, plaintext: &str, context: &str) -> SealedField {
        let nonce = Nonce::generate();
        let data = self
            .0
            .encrypt(
                &nonce,
                Payload {
                    msg: plaintext.as_bytes(),
                    aad: context.as_bytes(),
                },
            )
            .expect("in-memory encryption does not fail");
        SealedField {
            cipher: CIPHER_NAME.to_string(),
            nonce: BASE64.encode(nonce.as_slice()),
            data: BASE64.encode(data),
        }
    }

    pub fn open(&self, field: &SealedField, context: &str) -> Result<String, OpenError> {
        if field.cipher != CIPHER_NAME {
            return Err(OpenError::UnsupportedCipher(field.cipher.clone()));
        }
        let nonce_bytes = BASE64.decode(&field.nonce).map_err(|_| OpenError::Encoding)?;
        let nonce = Nonce::try_from(nonce_bytes.as_slice()).map_err(|_| OpenError::Encoding)?;
        let data = BASE64.decode(&field.data).map_err(|_| OpenError::Encoding)?;
        let plain = self
            .0
            .decrypt(
                &nonce,
                Payload {
                    msg: &data,
                    aad: context.as_bytes(),
                },
            )
            .map_err(|_| OpenError::Authentication)?;
        String::from_utf8(plain).map_err(|_| OpenError::Encoding)
    }
}

impl std::fmt::Debug for FieldKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FieldKey(..)")
    }
}
