use proptest::prelude::*;

use edge_offload::guidance::{retrieve, Choice, Memory, MemoryItem, MemoryKind, MemoryQuery};

/// Relevance written out term by term.
fn score(q: &MemoryQuery, m: &MemoryItem, w: &[f64; 4]) -> f64 {
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    w[0] * f64::from(u8::from(q.node == m.node))
        + w[1] * f64::from(u8::from(q.task_type == m.task_type))
        + w[2] * (1.0 - l1(&q.profile, &m.profile))
        + w[3] * (1.0 - l1(&q.load, &m.load))
}

fn item(node: usize, task_type: u8, profile: [f64; 3], load: [f64; 2], index: u64) -> MemoryItem {
    MemoryItem {
        node,
        task_type,
        profile,
        load,
        action: Choice::Local,
        reward: 1.0,
        kind: MemoryKind::Trajectory,
        index,
        outcome: None,
        note: String::new(),
        summary: None,
    }
}

fn arb_item() -> impl Strategy<Value = (usize, u8, [f64; 3], [f64; 2])> {
    // coarse grids make exact ties common
    let u = (0u8..=4).prop_map(|k| f64::from(k) / 4.0);
    (0usize..4, 0u8..9, [u.clone(), u.clone(), u.clone()], [u.clone(), u])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_matches_brute_force(
        raw in prop::collection::vec(arb_item(), 0..1000),
        q in arb_item(),
        k in 0usize..8,
        w0 in 0.0f64..1.0, w1 in 0.0f64..1.0, w2 in 0.0f64..1.0,
    ) {
        let s = w0 + w1 + w2 + 0.5;
        let w = [w0 / s, w1 / s, w2 / s, 0.5 / s];
        let items: Vec<MemoryItem> = raw.iter().enumerate().map(|(i, r)| item(r.0, r.1, r.2, r.3, i as u64)).collect();
        let query = MemoryQuery { node: q.0, task_type: q.1, profile: q.2, load: q.3 };
        let got = retrieve(&query, &items, &w, k);
        prop_assert_eq!(got.len(), k.min(items.len()));
        // an item belongs to the top k iff fewer than k items outrank it
        let outranks = |a: &MemoryItem, b: &MemoryItem| {
            let (sa, sb) = (score(&query, a, &w), score(&query, b, &w));
            sa > sb || (sa == sb && a.index > b.index)
        };
        let mut want: Vec<&MemoryItem> = items.iter().filter(|m| items.iter().filter(|o| outranks(o, m)).count() < k).collect();
        want.sort_by(|a, b| if outranks(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
        let got_idx: Vec<u64> = got.iter().map(|m| m.index).collect();
        let want_idx: Vec<u64> = want.iter().map(|m| m.index).collect();
        prop_assert_eq!(got_idx, want_idx);
    }
}

#[test]
fn memory_compacts_into_bounded_long_store() {
    let mut m = Memory::new(8, 3, 4);
    for i in 0..100u64 {
        m.push_short(item((i % 3) as usize, 0, [0.5; 3], [0.1, 0.2], 0));
        assert!(m.short.len() <= 8);
        assert!(m.long.len() <= 3);
    }
    assert!(m.long.iter().all(|s| s.kind == MemoryKind::Summary && s.summary.as_ref().is_some_and(|st| st.count >= 1)));
    // stamps are unique and increasing
    let idx: Vec<u64> = m.items().map(|x| x.index).collect();
    let mut sorted = idx.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), idx.len());
}
