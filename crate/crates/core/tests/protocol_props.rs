//! Property tests: canonical tensor serialization round-trips, message codec
//! totality, and decoder fuzz safety.

use proptest::prelude::*;

use splitnn_core::protocol::{
    decode_frame, tensor_message, LabelPolicy, Message, TensorMode, MAX_FRAME_LEN,
};
use splitnn_core::tensor::{checksum, Tensor};

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..4)
        .prop_flat_map(|rank| proptest::collection::vec(1usize..5, rank))
        .prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            proptest::collection::vec(-1e12f64..1e12, n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
}

fn arb_checksum() -> impl Strategy<Value = String> {
    proptest::collection::vec(any::<u8>(), 32).prop_map(hex::encode)
}

fn arb_client() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,12}"
}

fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (arb_checksum(), any::<u64>(), arb_client()).prop_map(|(checksum, n_iter, client_id)| {
            Message::TrainingRequest {
                checksum,
                n_iter,
                client_id,
            }
        }),
        "[0-9a-f]{32}".prop_map(|token| Message::TrainingAllowed { token }),
        Just(Message::TrainingDenied),
        (arb_client(), "[ -~]{0,24}").prop_map(|(client, address)| Message::RefreshRequired {
            client,
            address,
        }),
        (arb_tensor(), any::<bool>(), any::<bool>()).prop_map(|(t, training, with_label)| {
            let label_tensor;
            let label = if with_label {
                let rows = t.shape()[0];
                let mut data = vec![0.0; rows * 3];
                for i in 0..rows {
                    data[i * 3 + i % 3] = 1.0;
                }
                label_tensor = Tensor::new(vec![rows, 3], data).unwrap();
                Some(&label_tensor)
            } else {
                None
            };
            tensor_message(
                LabelPolicy::Allowed,
                &t,
                label,
                if training {
                    TensorMode::Training
                } else {
                    TensorMode::Validation
                },
            )
            .unwrap()
        }),
        (arb_checksum(), proptest::collection::vec(any::<u8>(), 0..128), arb_client()).prop_map(
            |(checksum, weights, client_id)| Message::WeightUpload {
                checksum,
                weights,
                client_id,
            }
        ),
        arb_client().prop_map(|client_id| Message::WeightRequest { client_id }),
        proptest::collection::vec(any::<u8>(), 0..128)
            .prop_map(|weights| Message::WeightPayload { weights }),
        "[ -~]{0,48}".prop_map(|reason| Message::WeightDenied { reason }),
        (arb_checksum(), arb_client()).prop_map(|(checksum, client_id)| Message::Snapshot {
            checksum,
            client_id,
        }),
        any::<bool>().prop_map(|ok| Message::SyncResult { ok }),
        any::<bool>().prop_map(|ok| Message::TensorAck { ok }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn tensor_bytes_round_trip_bitwise(t in arb_tensor()) {
        let decoded = Tensor::from_bytes(&t.to_bytes()).unwrap();
        prop_assert!(decoded.bitwise_eq(&t));
        // Canonicality: re-serialization is byte-identical.
        prop_assert_eq!(decoded.to_bytes(), t.to_bytes());
    }

    #[test]
    fn checksums_separate_distinct_payloads(a in arb_tensor(), b in arb_tensor()) {
        let (ba, bb) = (a.to_bytes(), b.to_bytes());
        prop_assert_eq!(checksum(&ba) == checksum(&bb), ba == bb);
    }

    #[test]
    fn every_message_encodes_and_decodes_to_itself(msg in arb_message()) {
        let frame = msg.to_frame();
        let decoded = decode_frame(&frame, MAX_FRAME_LEN).unwrap();
        prop_assert_eq!(decoded, msg);
    }

    #[test]
    fn decode_never_panics_on_arbitrary_frames(bytes in proptest::collection::vec(any::<u8>(), 0..600)) {
        let _ = decode_frame(&bytes, MAX_FRAME_LEN);
    }

    #[test]
    fn decode_never_panics_on_plausible_frames(payload in proptest::collection::vec(any::<u8>(), 0..400)) {
        // Correct length prefix, garbage payload.
        let mut frame = (payload.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(&payload);
        let _ = decode_frame(&frame, MAX_FRAME_LEN);
    }

    #[test]
    fn decode_never_panics_on_mutated_valid_frames(
        msg in arb_message(),
        idx in any::<prop::sample::Index>(),
        flip in 1u8..=255,
    ) {
        let mut frame = msg.to_frame();
        let i = idx.index(frame.len());
        frame[i] ^= flip;
        let _ = decode_frame(&frame, MAX_FRAME_LEN);
    }
}
