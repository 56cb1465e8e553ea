mod common;

use std::time::{Duration, Instant};

use csicl_core::data::CsiMatrix;
use csicl_core::numeric::Tensor2;
use csicl_edge::bundle::{deserialize, serialize_full, serialize_light};
use csicl_edge::wire::{Frame, WireMessage};
use csicl_edge::{EdgeService, EndClient};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 10_000;
const KNOWN_CODES: &[u16] = &[1, 2, 3, 20, 21, 22, 23, 30, 31, 40, 41, 42, 43, 44, 45, 46];

fn random_matrix(rng: &mut ChaCha8Rng) -> CsiMatrix {
    let (n, d) = (rng.gen_range(1..20), rng.gen_range(1..16));
    let values = Tensor2::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap();
    let mut m = CsiMatrix::new(values).unwrap();
    for _ in 0..rng.gen_range(0..4) {
        m.set_missing(rng.gen_range(0..n), rng.gen_range(0..d));
    }
    m
}

fn random_message(rng: &mut ChaCha8Rng, csv: &str, bundle: &[u8]) -> WireMessage {
    match rng.gen_range(0..8) {
        0 => WireMessage::Hello,
        1 => WireMessage::DataBatch(csv[..rng.gen_range(0..csv.len())].to_string()),
        2 => WireMessage::TrainDone,
        3 => WireMessage::ModelPush(bundle.to_vec()),
        4 => WireMessage::Ack,
        5 => WireMessage::InferReq(random_matrix(rng)),
        6 => WireMessage::InferResp {
            class: rng.gen(),
            logits: (0..rng.gen_range(0..10)).map(|_| f32::from_bits(rng.gen())).collect(),
        },
        _ => WireMessage::error(rng.gen(), "x".repeat(rng.gen_range(0..30))),
    }
}

fn mutate(rng: &mut ChaCha8Rng, bytes: &mut Vec<u8>) {
    match rng.gen_range(0..4) {
        0 if !bytes.is_empty() => {
            for _ in 0..rng.gen_range(1..4) {
                let i = rng.gen_range(0..bytes.len());
                bytes[i] ^= 1 << rng.gen_range(0..8);
            }
        }
        1 => bytes.truncate(rng.gen_range(0..=bytes.len())),
        2 => bytes.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>())),
        _ => {
            let i = rng.gen_range(0..=bytes.len());
            bytes.insert(i, rng.gen());
        }
    }
}

fn check_reply(reply: Option<WireMessage>) {
    if let Some(msg) = reply {
        let frame = msg.to_frame();
        let (back, _) = Frame::decode(&frame.encode()).unwrap().unwrap();
        let back = WireMessage::from_frame(&back).unwrap();
        if let WireMessage::Error { code, .. } = back {
            assert!(KNOWN_CODES.contains(&code), "unlisted code {code}");
        }
    }
}

#[test]
fn frames_and_bundles_survive_arbitrary_input() {
    let start = Instant::now();
    let learner = common::learner(1);
    let light = serialize_light(learner.lwm().unwrap());
    let full = serialize_full(learner.fsm());
    let csv = common::task(&common::corpus(), 2).filter_classes(&[4]).to_csv();

    let mut edge = EdgeService::new(common::quick_config()).unwrap();
    let end = EndClient::new();
    end.install(&light).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut accepted, mut rejected) = (0, 0);

    for case in 0..CASES {
        match case % 4 {
            // valid messages survive a round trip bit for bit
            0 => {
                let msg = random_message(&mut rng, &csv, &light);
                let bytes = msg.to_frame().encode();
                let (frame, used) = Frame::decode(&bytes).unwrap().unwrap();
                assert_eq!(used, bytes.len());
                let back = WireMessage::from_frame(&frame).unwrap();
                assert_eq!(back.to_frame().encode(), bytes);
            }
            // damaged frames get a well-formed reply or none
            1 => {
                let mut bytes = random_message(&mut rng, &csv, &light).to_frame().encode();
                mutate(&mut rng, &mut bytes);
                if let Ok(Some((frame, _))) = Frame::decode(&bytes) {
                    if frame.kind == csicl_edge::wire::TRAIN_DONE {
                        continue;
                    }
                    check_reply(edge.handle(&frame));
                    check_reply(end.handle(&frame));
                }
            }
            // damaged bundles are rejected with a bundle code
            2 => {
                let mut bytes = if rng.gen_bool(0.5) { light.clone() } else { full.clone() };
                mutate(&mut rng, &mut bytes);
                match deserialize(&bytes) {
                    Ok(_) => accepted += 1,
                    Err(e) => {
                        assert!((41..=45).contains(&e.code()));
                        rejected += 1;
                    }
                }
            }
            // pure noise
            _ => {
                let len = rng.gen_range(0..64);
                let noise: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                assert!(deserialize(&noise).is_err());
                if let Ok(Some((frame, _))) = Frame::decode(&noise) {
                    check_reply(end.handle(&frame));
                }
            }
        }
    }
    assert!(rejected > 0);
    // extensions past the checksum are the only way a mutation can pass
    assert!(accepted < rejected / 10);
    assert_eq!(end.current().unwrap().meta.task, 1);
    assert!(start.elapsed() < Duration::from_secs(120));
}
