mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sparsetrain::compressed::*;
use sparsetrain::masking::{ck_mask, window_mask};
use sparsetrain::tensor::{apply_mask, ConvDims, ConvWeight, PruneMask};

fn bits_of(w: &ConvWeight) -> Vec<u64> {
    w.values().iter().map(|v| v.to_bits()).collect()
}

fn layer(r: &mut ChaCha8Rng) -> ConvWeight {
    let side = [1, 3, 5][r.random_range(0..3)];
    let d = ConvDims::new(r.random_range(1..8), r.random_range(1..8), side, side);
    ConvWeight::new(d, values(r, d.len())).unwrap()
}

/// A CK mask, either from pruning or from random whole kernels.
fn kernel_mask(r: &mut ChaCha8Rng, w: &ConvWeight) -> PruneMask {
    if r.random_bool(0.5) {
        return ck_mask(w, r.random_range(0.0..=1.0), None);
    }
    let d = w.dims();
    let keep: Vec<bool> = (0..d.kernel_count()).map(|_| r.random_bool(0.4)).collect();
    let bits = keep.iter().flat_map(|&b| std::iter::repeat_n(b, d.kernel_len())).collect();
    PruneMask::from_bits(&d.to_vec(), bits).unwrap()
}

pub fn ck_roundtrip(seed: u64) {
    let mut r = rng(seed);
    let w = layer(&mut r);
    let m = kernel_mask(&mut r, &w);
    let packed = compress_ck(&w, &m).unwrap();
    let bytes = packed.to_bytes();
    let parsed = CkSparseLayer::from_bytes(&bytes).unwrap();
    assert_eq!(parsed, packed);
    let back = decompress_ck(&parsed).unwrap();
    assert_eq!(bits_of(&back), bits_of(&apply_mask(&w, &m).unwrap()));
    let kept = m.kept();
    assert_eq!(packed.payload.len(), kept);
    assert_eq!(packed.surviving_kernels.len() * w.dims().kernel_len(), kept);
}

pub fn window_roundtrip(seed: u64) {
    let mut r = rng(seed);
    let w = layer(&mut r);
    let klen = w.dims().kernel_len();
    let cap = r.random_range(1..=klen);
    let m = window_mask(&w, r.random_range(0.0..=1.0), Some(cap));
    let packed = compress_window(&w, &m, cap).unwrap();
    let bytes = packed.to_bytes();
    assert_eq!(bytes.len(), WindowSparseLayer::byte_len(w.dims(), cap));
    let parsed = WindowSparseLayer::from_bytes(&bytes).unwrap();
    assert_eq!(parsed, packed);
    let back = decompress_window(&parsed).unwrap();
    assert_eq!(bits_of(&back), bits_of(&apply_mask(&w, &m).unwrap()));
}

proptest! {
    #[test]
    fn ck_format_roundtrips(seed in any::<u64>()) {
        ck_roundtrip(seed);
    }

    #[test]
    fn window_format_roundtrips(seed in any::<u64>()) {
        window_roundtrip(seed);
    }

    #[test]
    fn corrupted_buffers_are_rejected(seed in any::<u64>(), cut in any::<prop::sample::Index>(), flip in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut r = rng(seed);
        let w = layer(&mut r);
        let m = kernel_mask(&mut r, &w);
        let ck = compress_ck(&w, &m).unwrap().to_bytes();
        let wn = compress_window(&w, &PruneMask::keep_all(&w), w.dims().kernel_len()).unwrap().to_bytes();
        for bytes in [ck, wn] {
            let n = cut.index(bytes.len());
            prop_assert!(CkSparseLayer::from_bytes(&bytes[..n]).is_err());
            prop_assert!(WindowSparseLayer::from_bytes(&bytes[..n]).is_err());
            let mut extended = bytes.clone();
            extended.push(byte);
            prop_assert!(CkSparseLayer::from_bytes(&extended).is_err());
            prop_assert!(WindowSparseLayer::from_bytes(&extended).is_err());
            // single byte edits either fail cleanly or decode to a valid layer
            let mut edited = bytes.clone();
            let i = flip.index(edited.len());
            edited[i] = byte;
            if let Ok(l) = CkSparseLayer::from_bytes(&edited) {
                prop_assert!(decompress_ck(&l).is_ok());
            }
            if let Ok(l) = WindowSparseLayer::from_bytes(&edited) {
                prop_assert!(decompress_window(&l).is_ok());
            }
        }
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = CkSparseLayer::from_bytes(&bytes);
        let _ = WindowSparseLayer::from_bytes(&bytes);
        let mut tagged = b"CKSP\x01\0\0\0".to_vec();
        tagged.extend_from_slice(&bytes);
        let _ = CkSparseLayer::from_bytes(&tagged);
        tagged[..4].copy_from_slice(b"WNSP");
        let _ = WindowSparseLayer::from_bytes(&tagged);
    }

    #[test]
    fn window_size_ignores_which_weights_survive(seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = layer(&mut r);
        let cap = r.random_range(1..=w.dims().kernel_len());
        let a = window_mask(&w, r.random_range(0.0..=1.0), Some(cap));
        let b = window_mask(&w, 1.0, Some(cap));
        prop_assert_eq!(
            compress_window(&w, &a, cap).unwrap().to_bytes().len(),
            compress_window(&w, &b, cap).unwrap().to_bytes().len()
        );
    }
}

#[test]
fn window_slots_by_example() {
    let w = ConvWeight::new(ConvDims::new(1, 2, 1, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let m = PruneMask::from_bits(&[1, 2, 1, 3], vec![true, false, true, false, false, false]).unwrap();
    let full = compress_window(&w, &m, 2).unwrap();
    assert_eq!(full.slots[0], WindowSlot { position: 0, value: 1.0 });
    assert_eq!(full.slots[1], WindowSlot { position: 2, value: 3.0 });
    // empty kernel: all sentinels
    assert!(full.slots[2..].iter().all(|s| s.position == SENTINEL));
    assert!(compress_window(&w, &PruneMask::keep_all(&w), 2).is_err());
    let non_uniform = PruneMask::from_bits(&[1, 2, 1, 3], vec![true, false, true, true, true, true]).unwrap();
    assert!(compress_ck(&w, &non_uniform).is_err());
}

fn toy_shape() -> ModelShape {
    ModelShape { channels: 3, size: 6, conv3: 6, conv1: 5, pool: 2, classes: 4 }
}

#[test]
fn multiply_count_matches_instrumented_forward() {
    let mut r = rng(31);
    for trial in 0..20 {
        let keep = [1.0, 0.4, 0.0][trial % 3];
        let model = random_model(&mut r, &toy_shape(), Some(keep));
        let (x, _) = random_input(&mut r, &model, 1);
        let mut ctr = Counter::default();
        reference_forward(&model, &x, &mut ctr);
        let macs = multiply_count(&model);
        assert_eq!(macs.sparse_macs, ctr.multiplies, "trial {trial}");
        if keep == 1.0 {
            assert_eq!(macs.sparse_macs, macs.dense_macs);
        }
    }
}

#[test]
fn half_mask_halves_layer_macs() {
    let mut r = rng(1);
    let mut model = random_model(&mut r, &toy_shape(), None);
    if let sparsetrain::trainer::Layer::Conv(p) = &mut model.layers_mut()[0] {
        let n = p.mask.len();
        p.mask = PruneMask::from_bits(p.mask.dims(), (0..n).map(|i| i % 2 == 0).collect()).unwrap();
    }
    model.apply_masks();
    let macs = multiply_count(&model);
    let (_, dense, sparse) = macs.per_layer[0];
    assert_eq!(2 * sparse, dense);
}
