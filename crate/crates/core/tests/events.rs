mod common;

use proptest::prelude::*;

use hmnet::events::{
    decode_events, encode_events, generate_synthetic_stream, EventFormat, EventStream, ObjectShape, Polarity,
    SceneObject, SceneParams,
};

use common::events::{arb_stream, check_invariants};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stream_invariants(s in arb_stream(0..=10_000usize), dt in 1u64..20_000, stride in 1usize..=16) {
        prop_assert_eq!(check_invariants(&s, dt, stride), Ok(()));
    }

    #[test]
    fn csv_records_tolerate_whitespace(s in arb_stream(0..=200usize)) {
        let fmt = EventFormat::Csv { width: s.width(), height: s.height() };
        let text = String::from_utf8(encode_events(&s, fmt)).unwrap();
        let mut lines = text.lines();
        let mut spaced = format!("{}\n", lines.next().unwrap());
        for l in lines {
            spaced.push_str(&format!(" {} \n\n", l.replace(',', " , ")));
        }
        prop_assert_eq!(decode_events(spaced.as_bytes(), fmt).unwrap(), s);
    }

    #[test]
    fn truncated_binary_is_rejected(s in arb_stream(1..=50usize), cut in 1usize..16) {
        let bytes = encode_events(&s, EventFormat::Hmev);
        prop_assert!(decode_events(&bytes[..bytes.len() - cut], EventFormat::Hmev).is_err());
    }
}

/// Frame differencing of a rendered scene, pixel by pixel.
fn brute_force_events(scene: &SceneParams) -> Vec<(u64, u16, u16, Polarity)> {
    let mut out = Vec::new();
    let mut prev = scene.render(0);
    for m in 1..=scene.duration_us / 1000 {
        let cur = scene.render(m * 1000);
        for (i, (&a, &b)) in prev.iter().zip(&cur).enumerate() {
            if a != b {
                let (x, y) = ((i % scene.width as usize) as u16, (i / scene.width as usize) as u16);
                out.push((m * 1000, x, y, if b { Polarity::On } else { Polarity::Off }));
            }
        }
        prev = cur;
    }
    out
}

#[test]
fn moving_dot_emits_one_on_and_one_off_per_millisecond() {
    let scene = SceneParams {
        width: 32,
        height: 8,
        duration_us: 20_000,
        step_us: 5000,
        objects: vec![SceneObject {
            shape: ObjectShape::Dot { size: 1 },
            x0: 3.0,
            y0: 4.0,
            vx: 1000.0,
            vy: 0.0,
        }],
    };
    let (s, truth) = generate_synthetic_stream(&scene, 0.0, 0).unwrap();
    let got: Vec<_> = s.events().iter().map(|e| (e.t, e.x, e.y, e.p)).collect();
    assert_eq!(got, brute_force_events(&scene));
    assert_eq!(got.len(), 40);
    for m in 1..=20u64 {
        let at: Vec<_> = got.iter().filter(|e| e.0 == m * 1000).collect();
        let x = 3 + m as u16;
        assert_eq!(at.len(), 2);
        assert!(at.contains(&&(m * 1000, x, 4, Polarity::On)));
        assert!(at.contains(&&(m * 1000, x - 1, 4, Polarity::Off)));
    }
    assert_eq!(truth.velocities, vec![(1000.0, 0.0); 4]);
}

#[test]
fn bar_scene_with_noise_is_deterministic_and_valid() {
    let scene = SceneParams::vertical_bar(48, 40, 4, 1.0, 700.0, 50_000);
    let (a, _) = generate_synthetic_stream(&scene, 50.0, 9).unwrap();
    let (b, _) = generate_synthetic_stream(&scene, 50.0, 9).unwrap();
    let (c, _) = generate_synthetic_stream(&scene, 50.0, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.len() > brute_force_events(&scene).len());
    assert_eq!(check_invariants(&a, 5000, 4), Ok(()));
}

#[test]
fn invalid_streams_are_rejected() {
    use hmnet::events::Event;
    assert!(EventStream::new(4, 4, vec![Event::new(5, 4, 0, Polarity::On)]).is_err());
    assert!(EventStream::new(4, 4, vec![Event::new(5, 0, 0, Polarity::On), Event::new(4, 0, 0, Polarity::On)]).is_err());
    let fmt = EventFormat::Csv { width: 4, height: 4 };
    assert!(decode_events(b"t_us,x,y,p\n1,2,3\n", fmt).is_err());
    assert!(decode_events(b"x,y\n", fmt).is_err());
}
