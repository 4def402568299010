use std::collections::BTreeMap;

use promptpack::lexicon::{build_frequency_model, count_tokens, tokenize, FrequencyModel, TokenKind};
use proptest::prelude::*;

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            "[a-zA-Z]{1,8}",
            "[0-9]{1,4}(\\.[0-9]{1,3})?",
            "[ \t\n]{1,3}",
            "[.,;:!?()'’\"$%-]",
            "[éßΩ中😀]",
        ],
        0..60,
    )
    .prop_map(|parts| parts.concat())
}

proptest! {
    #[test]
    fn surfaces_concatenate_to_input(text in text_strategy()) {
        let stream = tokenize(&text);
        let joined: String = stream.tokens().iter().map(|t| t.surface.as_str()).collect();
        prop_assert_eq!(&joined, &text);
        let mut offset = 0;
        for t in stream.tokens() {
            prop_assert_eq!(t.span.start, offset);
            prop_assert_eq!(&text[t.span.clone()], t.surface.as_str());
            offset = t.span.end;
        }
    }

    #[test]
    fn arbitrary_strings_round_trip(text in any::<String>()) {
        let joined: String = tokenize(&text).tokens().iter().map(|t| t.surface.as_str()).collect();
        prop_assert_eq!(joined, text);
    }

    #[test]
    fn whitespace_never_repeats(text in text_strategy()) {
        let stream = tokenize(&text);
        for w in stream.tokens().windows(2) {
            prop_assert!(!(w[0].kind == TokenKind::Whitespace && w[1].kind == TokenKind::Whitespace));
        }
        prop_assert_eq!(count_tokens(&text), stream.content_len());
    }

    #[test]
    fn frequency_counts_are_additive(a in prop::collection::vec(text_strategy(), 1..5), b in prop::collection::vec(text_strategy(), 1..5)) {
        let both: Vec<String> = a.iter().chain(&b).cloned().collect();
        let (ma, mb, mab) = match (build_frequency_model(&a), build_frequency_model(&b), build_frequency_model(&both)) {
            (Ok(x), Ok(y), Ok(z)) => (x, y, z),
            _ => return Ok(()),
        };
        let mut sum: BTreeMap<String, u64> = ma.counts().clone();
        for (k, v) in mb.counts() {
            *sum.entry(k.clone()).or_default() += v;
        }
        prop_assert_eq!(mab.counts(), &sum);
        prop_assert_eq!(mab.total(), ma.total() + mb.total());
    }

    #[test]
    fn higher_count_means_lower_information(counts in prop::collection::btree_map("[a-z]{1,5}", 1u64..50, 1..20), query in "[a-z]{1,6}") {
        let model = FrequencyModel::from_counts(counts.clone()).unwrap();
        let mut keys: Vec<&String> = counts.keys().collect();
        keys.push(&query);
        for x in &keys {
            let sx = model.self_information(x);
            prop_assert!(sx.is_finite() && sx > 0.0);
            for y in &keys {
                if model.count(x) > model.count(y) {
                    prop_assert!(sx <= model.self_information(y));
                }
            }
        }
    }
}

#[test]
fn model_json_round_trips() {
    let model = build_frequency_model(&["net income rose", "net income fell"]).unwrap();
    let back = FrequencyModel::from_json(&model.to_json()).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.count("net"), 2);
    assert_eq!(back.total(), 6);
}
