use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use unter_core::kb::{filter_frequent_relations, scrub_leakage, Alignment, FactTriple};

fn alignments() -> impl Strategy<Value = Vec<Alignment>> {
    prop::collection::vec((0u8..6, 0u8..4, 0u8..4, 0usize..5), 1..40).prop_map(|raw| {
        raw.into_iter()
            .map(|(r, h, t, sent)| Alignment {
                doc_id: format!("d{}", sent % 2),
                sent,
                span: (0, 0),
                fact: FactTriple::new(&format!("e{h}"), &format!("rel{r}"), &format!("e{t}")),
            })
            .collect()
    })
}

fn relations(al: &[Alignment]) -> BTreeSet<String> {
    al.iter().map(|a| a.fact.relation.clone()).collect()
}

proptest! {
    #[test]
    fn larger_top_k_keeps_a_subsequence(al in alignments()) {
        let distinct = relations(&al).len();
        let mut previous = al.clone();
        for k in 0..distinct {
            let (kept, table) = filter_frequent_relations(al.clone(), k).unwrap();
            let dropped: HashSet<&str> = table.top(k).into_iter().collect();
            let expected: usize = table.ranked.iter().take(k).map(|(_, n)| n).sum();
            prop_assert_eq!(kept.len(), al.len() - expected);
            prop_assert!(kept.iter().all(|a| !dropped.contains(a.fact.relation.as_str())));
            // the kept list is the input order restricted to surviving relations
            let mut it = previous.iter();
            prop_assert!(kept.iter().all(|a| it.any(|p| p == a)));
            previous = kept;
        }
        prop_assert!(!previous.is_empty());
        // dropping every relation would leave nothing to train on
        prop_assert!(filter_frequent_relations(al, distinct).is_err());
    }

    #[test]
    fn counts_are_ranked_descending(al in alignments()) {
        let (_, table) = filter_frequent_relations(al.clone(), 0).unwrap();
        prop_assert!(table.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert_eq!(table.ranked.iter().map(|(_, n)| n).sum::<usize>(), al.len());
    }

    #[test]
    fn scrub_removes_exactly_the_held_out_facts(al in alignments(), pick in prop::collection::vec(any::<prop::sample::Index>(), 0..5)) {
        let held: HashSet<FactTriple> = pick.iter().map(|i| i.get(&al).fact.clone()).collect();
        let (kept, removed) = scrub_leakage(al.clone(), &held);
        prop_assert_eq!(removed, al.iter().filter(|a| held.contains(&a.fact)).count());
        prop_assert_eq!(kept.len() + removed, al.len());
        prop_assert!(kept.iter().all(|a| !held.contains(&a.fact)));
        let (again, none) = scrub_leakage(kept.clone(), &held);
        prop_assert_eq!(none, 0);
        prop_assert_eq!(again, kept);
    }
}
