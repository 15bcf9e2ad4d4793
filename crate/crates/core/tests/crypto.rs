use dossier_core::crypto::{
    check_upper_hex, decrypt_row, encrypt_row, generate_keypair, generate_row_key, hex_decode, hex_encode, sign,
    unwrap_key, verify, wrap_key, Ciphertext, KeyPair, PublicKey, SymmetricKey,
};
use proptest::prelude::*;

fn key_from(bytes: [u8; 32]) -> SymmetricKey {
    SymmetricKey::from_bytes(bytes)
}

#[test]
fn wrapped_key_is_92_bytes() {
    // ephemeral X25519 public key, nonce, sealed row key, tag
    let expected = 32 + 12 + 32 + 16;
    let kp = generate_keypair().unwrap();
    let blob = wrap_key(&generate_row_key().unwrap(), &kp.public()).unwrap();
    assert_eq!(blob.len(), expected);
    assert_eq!(expected, 92);
}

#[test]
fn ciphertext_overhead_is_nonce_and_tag() {
    let ct = encrypt_row(b"abc", &generate_row_key().unwrap()).unwrap();
    assert_eq!(ct.to_bytes().len(), 3 + 12 + 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rows_roundtrip(plain in prop::collection::vec(any::<u8>(), 0..512), k in any::<[u8; 32]>()) {
        let key = key_from(k);
        let ct = encrypt_row(&plain, &key).unwrap();
        prop_assert_eq!(decrypt_row(&ct, &key).unwrap(), plain.clone());
        let again = Ciphertext::from_hex(&ct.to_hex()).unwrap();
        prop_assert_eq!(decrypt_row(&again, &key).unwrap(), plain);
    }

    #[test]
    fn any_flipped_bit_is_rejected(plain in prop::collection::vec(any::<u8>(), 1..128), bit in any::<prop::sample::Index>()) {
        let key = generate_row_key().unwrap();
        let mut bytes = encrypt_row(&plain, &key).unwrap().to_bytes();
        let i = bit.index(bytes.len() * 8);
        bytes[i / 8] ^= 1 << (i % 8);
        let tampered = Ciphertext::from_bytes(&bytes).unwrap();
        prop_assert!(decrypt_row(&tampered, &key).is_err());
    }

    #[test]
    fn other_keys_do_not_decrypt(plain in prop::collection::vec(any::<u8>(), 0..64), a in any::<[u8; 32]>(), b in any::<[u8; 32]>()) {
        prop_assume!(a != b);
        let ct = encrypt_row(&plain, &key_from(a)).unwrap();
        prop_assert!(decrypt_row(&ct, &key_from(b)).is_err());
    }

    #[test]
    fn wrap_opens_only_for_the_receiver(k in any::<[u8; 32]>()) {
        let (bob, eve) = (generate_keypair().unwrap(), generate_keypair().unwrap());
        let key = key_from(k);
        let blob = wrap_key(&key, &bob.public()).unwrap();
        let opened = unwrap_key(&blob, &bob).unwrap();
        prop_assert_eq!(opened.as_bytes(), key.as_bytes());
        prop_assert!(unwrap_key(&blob, &eve).is_err());
        prop_assert!(unwrap_key(&blob[..blob.len() - 1], &bob).is_err());
    }

    #[test]
    fn signatures_bind_message_and_signer(msg in prop::collection::vec(any::<u8>(), 0..256), flip in any::<prop::sample::Index>()) {
        let (alice, mallory) = (generate_keypair().unwrap(), generate_keypair().unwrap());
        let sig = sign(&msg, &alice);
        prop_assert!(verify(&msg, &sig, &alice.public()));
        prop_assert!(!verify(&msg, &sig, &mallory.public()));
        let mut other = msg.clone();
        if other.is_empty() {
            other.push(0);
        } else {
            let i = flip.index(other.len());
            other[i] ^= 0x80;
        }
        prop_assert!(!verify(&other, &sig, &alice.public()));
    }

    #[test]
    fn hex_is_uppercase_and_roundtrips(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let h = hex_encode(&bytes);
        prop_assert_eq!(h.len(), bytes.len() * 2);
        prop_assert!(check_upper_hex(&h).is_ok());
        prop_assert_eq!(h.clone(), h.to_uppercase());
        prop_assert_eq!(hex_decode(&h).unwrap(), bytes);
    }

    #[test]
    fn keys_roundtrip_through_bytes(_seed in any::<u8>()) {
        let kp = generate_keypair().unwrap();
        let restored = KeyPair::from_secret_bytes(&kp.secret_bytes()).unwrap();
        prop_assert_eq!(restored.public(), kp.public());
        let pk = PublicKey::from_hex(&kp.public().to_hex()).unwrap();
        prop_assert_eq!(pk.key_id(), kp.key_id());
    }
}
