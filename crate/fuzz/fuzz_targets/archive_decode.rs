//! Input: seven little-endian u32 lengths, then the manifest JSON and the
//! audio, visual, text_clip, text_clap, labels and splits blobs back to back.
#![no_main]

use avgzsl::data::{ArchiveBlobs, FeatureArchive, LoadOptions};
use libfuzzer_sys::fuzz_target;

fn frames(data: &[u8]) -> Option<[&[u8]; 7]> {
    let (header, mut rest) = data.split_at_checked(28)?;
    let mut out = [&[][..]; 7];
    for (i, len) in header.chunks_exact(4).enumerate() {
        let len = u32::from_le_bytes(len.try_into().ok()?) as usize;
        let (head, tail) = rest.split_at_checked(len.min(rest.len()))?;
        out[i] = head;
        rest = tail;
    }
    Some(out)
}

fuzz_target!(|data: &[u8]| {
    let Some([manifest, audio, visual, text_clip, text_clap, labels, splits]) = frames(data) else {
        return;
    };
    let blobs = ArchiveBlobs {
        audio,
        visual,
        text_clip,
        text_clap,
        labels,
        splits,
    };
    for renormalize in [false, true] {
        if let Ok(archive) = FeatureArchive::decode(manifest, blobs, LoadOptions { renormalize }) {
            archive.validate().expect("decoded archive validates");
            if !renormalize {
                // what decodes must re-encode to the same bytes
                let encoded = archive.encode_blobs();
                assert_eq!(encoded[0].1, audio);
                assert_eq!(encoded[5].1, splits);
            }
        }
    }
});
