//! Client-painted label grids survive the indexed-PNG wire format.

use facialgan::wire::{b64_decode, b64_encode, decode_mask, encode_indexed, encode_mask, CLASS_PALETTE};
use facialgan_core::datapipe::{SegMask, NUM_CLASSES};
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (1usize..40, 1usize..40).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u8..NUM_CLASSES as u8, h * w).prop_map(move |l| (h, w, l))
    })
}

proptest! {
    #[test]
    fn painted_grid_round_trips((h, w, labels) in grid()) {
        let png = encode_indexed(w, h, &labels, &CLASS_PALETTE).unwrap();
        let text = b64_encode(&png);
        let mask = decode_mask(&b64_decode(&text).unwrap(), None).unwrap();
        prop_assert_eq!((mask.height(), mask.width()), (h, w));
        prop_assert_eq!(mask.labels(), &labels[..]);
    }

    #[test]
    fn server_masks_decode_to_themselves((h, w, labels) in grid()) {
        let m = SegMask::from_labels(h, w, labels).unwrap();
        let back = decode_mask(&encode_mask(&m).unwrap(), None).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn square_grids_keep_every_class_when_resized(side in 2usize..12, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..side * side)
            .map(|i| ((i as u64).wrapping_mul(seed | 1) % NUM_CLASSES as u64) as u8)
            .collect();
        let png = encode_indexed(side, side, &labels, &CLASS_PALETTE).unwrap();
        let m = decode_mask(&png, Some(side * 2)).unwrap();
        for c in 0..NUM_CLASSES as u8 {
            prop_assert_eq!(labels.contains(&c), m.labels().contains(&c));
        }
    }
}

#[test]
fn grayscale_grids_are_accepted() {
    let labels = [0u8, 1, 2, 3, 4, 4];
    let mut png = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut png, 3, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&labels).unwrap();
    }
    assert_eq!(decode_mask(&png, None).unwrap().labels(), &labels);
}
