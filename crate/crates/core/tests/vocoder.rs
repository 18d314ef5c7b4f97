use proptest::prelude::*;

use pslm::vocoder::{
    fragment_schedule, stream_through_channel, synthesize_offline, toy_waveform, StreamingSynthesizer,
    VocoderSpec,
};

fn spec(receptive_field: usize) -> VocoderSpec {
    VocoderSpec { receptive_field, upsample: 16 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streaming_matches_offline(tokens in prop::collection::vec(0u32..128, 1..80), rf in 1usize..30) {
        let spec = spec(rf);
        let mut synth = StreamingSynthesizer::new(spec).unwrap();
        let mut fragments = Vec::new();
        for &t in &tokens {
            fragments.extend(synth.push(t));
        }
        fragments.extend(synth.finish());
        let plans = fragment_schedule(tokens.len(), &spec).unwrap();
        prop_assert_eq!(fragments.len(), tokens.len());
        for (f, p) in fragments.iter().zip(&plans) {
            prop_assert_eq!(f.index, p.index);
            prop_assert!(f.tokens_seen >= p.ready_after);
        }
        let streamed: Vec<f64> = fragments.into_iter().flat_map(|f| f.samples).collect();
        prop_assert_eq!(&streamed, &synthesize_offline(&tokens, &spec).unwrap());
        let threaded: Vec<f64> = stream_through_channel(tokens.clone(), spec, 3)
            .unwrap()
            .into_iter()
            .flat_map(|f| f.samples)
            .collect();
        prop_assert_eq!(streamed, threaded);
    }

    #[test]
    fn fragments_ignore_tokens_outside_their_window(
        tokens in prop::collection::vec(0u32..128, 1..60),
        rf in 1usize..30,
        at in 0usize..60,
        replacement in 0u32..128,
    ) {
        let spec = spec(rf);
        let at = at % tokens.len();
        let mut mutated = tokens.clone();
        mutated[at] = replacement;
        let a = synthesize_offline(&tokens, &spec).unwrap();
        let b = synthesize_offline(&mutated, &spec).unwrap();
        for p in fragment_schedule(tokens.len(), &spec).unwrap() {
            if at < p.window.0 || at > p.window.1 {
                prop_assert_eq!(&a[p.samples.clone()], &b[p.samples]);
            }
        }
    }

    #[test]
    fn schedule_tiles_the_waveform(len in 1usize..200, rf in 1usize..40) {
        let spec = spec(rf);
        let plans = fragment_schedule(len, &spec).unwrap();
        let mut next = 0;
        for p in &plans {
            prop_assert_eq!(p.samples.start, next);
            next = p.samples.end;
            prop_assert!(p.window.0 <= p.index && p.index <= p.window.1 && p.window.1 < len);
            prop_assert!(p.ready_after > p.window.1 && p.ready_after <= len);
        }
        prop_assert_eq!(next, len * spec.upsample);
    }
}

#[test]
fn waveform_stays_bounded() {
    let mut x = 1u32;
    for n in 0..10_000usize {
        let len = 1 + n % 27;
        let window: Vec<u32> = (0..len)
            .map(|_| {
                x = x.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                (x >> 8) % 128
            })
            .collect();
        let samples = toy_waveform(&window, n % len, 32);
        assert!(samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
    }
}
