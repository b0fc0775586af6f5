//! Stage 1 works purely on cached latents; stage 2 goes through the decoder.
//! Kept in its own test binary because the codec counters are process-global.

use vividforge::codec::{decode_calls, encode_calls, make_basis};
use vividforge::degrade::{degrade_clip, sample_params};
use vividforge::media_io::synth_clip;
use vividforge::train::{cache_latents, train_stage1, train_stage2, ClipPair, LossConfig, PixelTargets, TrainConfig};

#[test]
fn stage_one_never_touches_the_codec() {
    let basis = make_basis();
    let pairs: Vec<ClipPair> = (0..3)
        .map(|s| {
            let (hq, masks) = synth_clip(s, 5, 16).unwrap();
            let lq = degrade_clip(&hq, &sample_params(s)).unwrap();
            ClipPair { id: format!("c{s}"), lq, hq, masks }
        })
        .collect();
    let cache = cache_latents(&pairs, &basis).unwrap();
    let targets: PixelTargets = pairs.iter().map(|p| (p.id.clone(), p.hq.clone())).collect();

    let (enc, dec) = (encode_calls(), decode_calls());
    let cfg = TrainConfig { steps: 10, batch: 2, seed: 1, ..Default::default() };
    let s1 = train_stage1(&cfg, &LossConfig::default(), &cache).unwrap();
    assert_eq!((encode_calls(), decode_calls()), (enc, dec));

    let cfg2 = TrainConfig { stage: 2, steps: 3, ..cfg };
    train_stage2(&cfg2, &LossConfig::default(), &cache, &targets, &s1.checkpoint, &basis).unwrap();
    assert_eq!(encode_calls(), enc);
    assert!(decode_calls() >= dec + 3 * 2);
}
