mod common;

use csicl_core::numeric::ParamStore;
use csicl_edge::bundle::{deserialize, serialize_full, serialize_light, BundleError, BundleModel, ModelKind};

fn bits(store: &ParamStore) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| (*v as f32).to_bits()).collect()))
        .collect()
}

#[test]
fn light_bundle_round_trips_bit_for_bit() {
    let l = common::learner(2);
    let lwm = l.lwm().unwrap();
    let bytes = serialize_light(lwm);
    let back = deserialize(&bytes).unwrap();
    assert_eq!(back.meta.kind, ModelKind::Light);
    assert_eq!(back.meta.task, 2);
    assert_eq!(back.meta.classes, vec![0, 1, 2, 3]);
    let BundleModel::Light(m) = &back.model else { panic!("expected a light model") };
    assert_eq!(serialize_light(m), bytes);

    let mut want = bits(&lwm.net.store);
    let mut got = bits(&m.net.store);
    want.sort();
    got.sort();
    assert_eq!(got, want);

    let x = common::corpus().samples[0].matrix.values().clone();
    assert_eq!(m.net.logits(&x).unwrap(), lwm.net.logits(&x).unwrap());
}

#[test]
fn full_bundle_round_trips_bit_for_bit() {
    let l = common::learner(2);
    let bytes = serialize_full(l.fsm());
    let back = deserialize(&bytes).unwrap();
    assert_eq!(back.meta.kind, ModelKind::Full);
    let BundleModel::Full(m) = &back.model else { panic!("expected a full model") };
    assert_eq!(serialize_full(m), bytes);
    let tasks = |n: &csicl_core::model::Network| n.prefixes.blocks().iter().map(|b| b.task).collect::<Vec<_>>();
    assert_eq!(tasks(&m.net), tasks(&l.fsm().net));
    assert_eq!(tasks(&m.net), vec![2, 1]);
}

#[test]
fn damaged_bundles_are_rejected() {
    let bytes = serialize_light(common::learner(1).lwm().unwrap());

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 64;
    flipped[mid] ^= 0x10;
    assert!(matches!(deserialize(&flipped), Err(BundleError::Checksum { .. })));

    let mut crc = bytes.clone();
    *crc.last_mut().unwrap() ^= 1;
    assert_eq!(deserialize(&crc).unwrap_err().code(), 43);

    for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = deserialize(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, BundleError::Truncated { .. }), "cut {cut}: {err}");
    }

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert_eq!(deserialize(&magic).unwrap_err(), BundleError::BadMagic);

    let mut version = bytes;
    version[4] = 9;
    assert_eq!(deserialize(&version).unwrap_err(), BundleError::UnsupportedVersion(9));
}
