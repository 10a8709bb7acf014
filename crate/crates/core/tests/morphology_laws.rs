use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpd::morphology::{apply_filter, close, dilate, erode, open, FilterOrder, MorphFilterSpec};
use vpd::passage_metric::extract_intervals;
use vpd::{Channel, FrameSeries};

fn all_strings(max_len: usize) -> impl Iterator<Item = Vec<bool>> {
    (0..=max_len).flat_map(|n| (0u32..1 << n).map(move |m| (0..n).map(|i| m >> i & 1 == 1).collect()))
}

/// Maximal runs of `value` as `(start, len)`.
fn runs(s: &[bool], value: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        if s[i] == value {
            let start = i;
            while i < s.len() && s[i] == value {
                i += 1;
            }
            out.push((start, i - start));
        } else {
            i += 1;
        }
    }
    out
}

/// Drops one-runs shorter than `k`.
fn open_oracle(s: &[bool], k: usize) -> Vec<bool> {
    let mut out = s.to_vec();
    for (start, len) in runs(s, true) {
        if len < k {
            out[start..start + len].iter_mut().for_each(|b| *b = false);
        }
    }
    out
}

/// Fills zero-runs shorter than `k` that have ones on both sides.
fn close_oracle(s: &[bool], k: usize) -> Vec<bool> {
    let mut out = s.to_vec();
    for (start, len) in runs(s, false) {
        let interior = start > 0 && start + len < s.len();
        if interior && len < k {
            out[start..start + len].iter_mut().for_each(|b| *b = true);
        }
    }
    out
}

fn leq(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(&x, &y)| !x || y)
}

#[test]
fn exhaustive_laws_up_to_length_twelve() {
    let strings: Vec<Vec<bool>> = all_strings(12).collect();
    for k in 1..=4 {
        for s in &strings {
            let o = open(s, k).unwrap();
            let c = close(s, k).unwrap();
            assert_eq!(open(&o, k).unwrap(), o, "open idempotent k={k} {s:?}");
            assert_eq!(close(&c, k).unwrap(), c, "close idempotent k={k} {s:?}");
            assert!(leq(&o, s), "open anti-extensive k={k} {s:?}");
            assert!(leq(s, &c), "close extensive k={k} {s:?}");
            assert_eq!(o, open_oracle(s, k), "short-run removal k={k} {s:?}");
            assert_eq!(c, close_oracle(s, k), "gap fill k={k} {s:?}");
        }
    }
}

#[test]
fn exhaustive_monotonicity() {
    // every pair s ≤ t obtained by switching on a subset of zeros of s
    for n in 0..=10usize {
        for m in 0u32..1 << n {
            let s: Vec<bool> = (0..n).map(|i| m >> i & 1 == 1).collect();
            let zeros: Vec<usize> = (0..n).filter(|&i| !s[i]).collect();
            for extra in 0u32..1 << zeros.len() {
                let mut t = s.clone();
                for (j, &z) in zeros.iter().enumerate() {
                    if extra >> j & 1 == 1 {
                        t[z] = true;
                    }
                }
                for k in 1..=4 {
                    assert!(leq(&open(&s, k).unwrap(), &open(&t, k).unwrap()));
                    assert!(leq(&close(&s, k).unwrap(), &close(&t, k).unwrap()));
                    assert!(leq(&erode(&s, k).unwrap(), &erode(&t, k).unwrap()));
                    assert!(leq(&dilate(&s, k).unwrap(), &dilate(&t, k).unwrap()));
                }
            }
        }
    }
}

#[test]
fn erosion_and_dilation_match_window_scan() {
    for k in 1..=4usize {
        let (left, right) = ((k - 1) / 2, k / 2);
        for s in all_strings(12) {
            let n = s.len() as isize;
            let at = |i: isize| i >= 0 && i < n && s[i as usize];
            let e: Vec<bool> = (0..n)
                .map(|i| (i - left as isize..=i + right as isize).all(at))
                .collect();
            let d: Vec<bool> = (0..n)
                .map(|i| (i - right as isize..=i + left as isize).any(at))
                .collect();
            assert_eq!(erode(&s, k).unwrap(), e);
            assert_eq!(dilate(&s, k).unwrap(), d);
        }
    }
}

#[test]
fn odd_width_duality_away_from_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in [1usize, 3, 5] {
        for _ in 0..500 {
            let n = rng.gen_range(k..60);
            let s: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let not_s: Vec<bool> = s.iter().map(|b| !b).collect();
            let d = dilate(&s, k).unwrap();
            let dual: Vec<bool> = erode(&not_s, k).unwrap().iter().map(|b| !b).collect();
            let margin = k / 2;
            assert_eq!(d[margin..n - margin], dual[margin..n - margin]);
        }
    }
}

#[test]
fn filter_removes_short_flicker_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = MorphFilterSpec {
        open_width: 4,
        close_width: 1,
        order: FilterOrder::CloseThenOpen,
    };
    for _ in 0..100 {
        let n = 300;
        let noisy: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
        let mut map = BTreeMap::new();
        map.insert(Channel::Cor, noisy.clone());
        map.insert(Channel::Ref, vec![false; n]);
        let series = FrameSeries::new(10, map).unwrap();
        let filtered = apply_filter(&series, Channel::Cor, &spec).unwrap();
        let runs_after = extract_intervals(filtered.channel(Channel::Cor).unwrap(), 10);
        assert!(runs_after.iter().all(|r| r.frame_count() >= 4));
        let long_before: Vec<_> = extract_intervals(&noisy, 10)
            .into_iter()
            .filter(|r| r.frame_count() >= 4)
            .collect();
        assert_eq!(runs_after, long_before);
        assert_eq!(
            filtered.channel(Channel::Ref).unwrap(),
            series.channel(Channel::Ref).unwrap()
        );
    }
}

#[test]
fn unit_widths_are_identity() {
    let spec = MorphFilterSpec {
        open_width: 1,
        close_width: 1,
        order: FilterOrder::OpenThenClose,
    };
    for s in all_strings(8) {
        assert_eq!(spec.apply(&s).unwrap(), s);
    }
}
