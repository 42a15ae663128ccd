use proptest::prelude::*;
use sidforge_core::rewards::{
    distinct_reward, format_reward, parse_completion, parse_completion_bytes, rr_reward, score_parsed, total_reward,
    RewardWeights,
};

fn sid(i: usize) -> String {
    format!("<A_{}_{}><B_{}_{}><C_{}_0><D_0_0><Z#{}>", i % 4, i % 6, i / 6 % 4, i % 5, i % 8, i % 2)
}

fn items(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec((0usize..30).prop_map(sid), len)
}

fn render(think: &str, items: &[String]) -> String {
    format!("<think>{think}</think><answer>{}</answer>", items.join(", "))
}

/// Fragments that recombine into near-miss completions.
fn fragments() -> impl Strategy<Value = String> {
    let pieces = prop::sample::select(vec![
        "<think>", "</think>", "<answer>", "</answer>", "<A_1_2>", "<B_0_0>", "<Z#3>", "<Z#>", "<A_x_1>", ", ",
        " word ", "<", ">", "\n", "<think></think>",
    ]);
    prop::collection::vec(pieces, 0..24).prop_map(|v| v.concat())
}

fn weights() -> impl Strategy<Value = RewardWeights> {
    (prop::array::uniform5(0.0f64..2.0), 1usize..12, 1usize..64).prop_map(|(w, k, t)| RewardWeights {
        format: w[0],
        rr: w[1],
        soft: w[2],
        distinct: w[3],
        length: w[4],
        k,
        target_length: t,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parser_never_panics_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let p = parse_completion_bytes(&bytes);
        if !p.syntax_ok {
            prop_assert!(p.items.is_empty());
        }
    }

    #[test]
    fn format_failure_gates_rr_and_distinct(text in fragments(), k in 1usize..12, gt in (0usize..30).prop_map(sid)) {
        let p = parse_completion(&text);
        if format_reward(&p, k) == 0.0 {
            prop_assert_eq!(rr_reward(&p, &gt, k), 0.0);
            prop_assert_eq!(distinct_reward(&p, k), 0.0);
        }
    }

    #[test]
    fn total_is_bounded(list in items(0..14), gt in (0usize..30).prop_map(sid), w in weights(), noise in fragments()) {
        for text in [render("reason", &list), noise.clone(), format!("{noise}{}", render("", &list))] {
            let b = total_reward(&text, &gt, &w);
            prop_assert!(b.total >= 0.0);
            prop_assert!(b.total <= w.max_total() + 1e-12);
        }
    }

    #[test]
    fn earlier_truth_never_scores_less(list in items(10..11), gt in 100usize..130, from in 0usize..10, to in 0usize..10) {
        let truth = sid(gt);
        let w = RewardWeights::default();
        let mut later = list.clone();
        let (hi, lo) = (from.max(to), from.min(to));
        later[hi] = truth.clone();
        let mut earlier = list.clone();
        earlier[lo] = truth.clone();
        // Keep every other position identical by moving the displaced item.
        earlier[hi] = list[lo].clone();
        let mut later_fixed = later.clone();
        later_fixed[lo] = list[lo].clone();
        let a = total_reward(&render("t", &earlier), &truth, &w).total;
        let b = total_reward(&render("t", &later_fixed), &truth, &w).total;
        prop_assert!(a >= b - 1e-12, "{} < {}", a, b);
    }

    #[test]
    fn permuting_other_items_keeps_total(
        list in items(10..11),
        gt_pos in 0usize..10,
        perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
        w in weights(),
    ) {
        let truth = sid(200);
        let mut a = list.clone();
        a[gt_pos] = truth.clone();
        let others: Vec<String> = a.iter().enumerate().filter(|(i, _)| *i != gt_pos).map(|(_, s)| s.clone()).collect();
        let mut b = Vec::with_capacity(10);
        let mut shuffled = perm.iter().map(|&i| others[i].clone());
        for i in 0..10 {
            b.push(if i == gt_pos { truth.clone() } else { shuffled.next().unwrap() });
        }
        let pa = parse_completion(&render("same", &a));
        let pb = parse_completion(&render("same", &b));
        prop_assert_eq!(score_parsed(&pa, &truth, &w).total, score_parsed(&pb, &truth, &w).total);
    }
}
