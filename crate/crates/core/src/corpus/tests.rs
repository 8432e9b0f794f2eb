use proptest::prelude::*;

use super::*;

fn surfaces(s: &Sentence) -> Vec<String> {
    s.tokens
        .iter()
        .map(|t| match t.filler {
            Some(k) => format!("{}*", k.surface()),
            None => t.surface.clone(),
        })
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn review(id: &str, split: Split, text: &[&str], confidence: &[u8]) -> Review {
    Review {
        id: id.into(),
        sentences: text.iter().map(|s| normalize_fillers(s)).collect(),
        stars: None,
        confidence_raw: confidence.to_vec(),
        sentiment_raw: confidence.to_vec(),
        persuasiveness_raw: Vec::new(),
        split,
    }
}

#[test]
fn splits_table_one_sentence() {
    let s = normalize_fillers("(umm) Things that (uhh) you usually wouldn't find funny were in this movie.");
    let expected = [
        "um*", "things", "that", "uh*", "you", "usually", "wouldn", "'", "t", "find", "funny", "were", "in", "this",
        "movie", ".",
    ];
    assert_eq!(surfaces(&s), expected);
}

#[test]
fn splits_supplementary_example() {
    let s = normalize_fillers("(umm) It's an interesting movie to say the least.");
    let expected = ["um*", "it", "'", "s", "an", "interesting", "movie", "to", "say", "the", "least", "."];
    assert_eq!(surfaces(&s), expected);
}

#[test]
fn bare_fillers_and_punctuation() {
    assert_eq!(surfaces(&normalize_fillers("Umm, yeah.")), ["um*", ",", "yeah", "."]);
    assert_eq!(surfaces(&normalize_fillers("great movie")), ["great", "movie"]);
    assert_eq!(surfaces(&normalize_fillers("UH (UMM) uhh um")), ["uh*", "um*", "uh*", "um*"]);
    // unclosed parenthesis keeps the bracket as punctuation
    assert_eq!(surfaces(&normalize_fillers("(um")), ["(", "um*"]);
    assert!(normalize_fillers("   ").is_empty());
}

proptest! {
    #[test]
    fn normalization_is_idempotent(raw in "[a-zA-Z ,.'()]{0,60}") {
        let once = normalize_fillers(&raw);
        let again = normalize_fillers(&render_sentence(&once));
        prop_assert_eq!(&once, &again);
        let joined: Vec<&str> = once.tokens.iter().map(|t| t.surface.as_str()).collect();
        prop_assert_eq!(normalize_fillers(&joined.join(" ")), once);
    }

    #[test]
    fn rms_dominates_mean(labels in proptest::collection::vec(1u8..=7, 1..8)) {
        let r = review("x", Split::Train, &["a"], &labels);
        let agg = aggregate_labels(&r).unwrap();
        let mean = labels.iter().map(|&x| f64::from(x)).sum::<f64>() / labels.len() as f64;
        prop_assert!(agg.confidence >= mean - 1e-12);
        let all_equal = labels.iter().all(|&x| x == labels[0]);
        prop_assert_eq!(all_equal, (agg.confidence - mean).abs() < 1e-12);
        prop_assert!((1.0..=7.0).contains(&agg.confidence));
    }
}

#[test]
fn label_aggregation_examples() {
    let r = review("a", Split::Train, &[], &[3, 5, 7]);
    assert!((aggregate_labels(&r).unwrap().confidence - (83.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((aggregate_labels(&r).unwrap().confidence - 5.26).abs() < 0.005);
    let r = review("b", Split::Train, &[], &[1, 7]);
    assert_eq!(aggregate_labels(&r).unwrap().confidence, 5.0);
    let r = review("c", Split::Train, &[], &[4, 4, 4]);
    let agg = aggregate_labels(&r).unwrap();
    assert_eq!((agg.confidence, agg.sentiment, agg.persuasiveness), (4.0, 4.0, None));
    let r = review("d", Split::Train, &[], &[]);
    assert!(matches!(aggregate_labels(&r), Err(Error::UnlabeledReview(id)) if id == "d"));
}

#[test]
fn parses_records_and_flags_unlabeled() {
    let src = concat!(
        r#"{"id":"r1","split":"train","stars":4,"transcript":["(umm) It's an interesting movie to say the least."],"confidence":[5,6,7],"sentiment":[4,4,5],"persuasiveness":[3,3,3]}"#,
        "\n\n",
        r#"{"id":"r2","split":"test","stars":null,"transcript":["fine"],"confidence":null,"sentiment":[4],"persuasiveness":null}"#,
        "\n"
    );
    let d = parse_corpus(src.as_bytes()).unwrap();
    assert_eq!((d.train.len(), d.dev.len(), d.test.len()), (1, 0, 1));
    assert_eq!(d.train[0].sentences[0].tokens[0].filler, Some(FillerKind::Um));
    assert!(d.train[0].is_labeled());
    assert!(!d.test[0].is_labeled());
    assert!(d.labeled(Split::Test, Target::Confidence).is_empty());

    let mut out = Vec::new();
    write_corpus(&d, &mut out).unwrap();
    assert_eq!(parse_corpus(&out[..]).unwrap(), d);
}

#[test]
fn empty_stream_gives_empty_splits() {
    let d = parse_corpus(&b""[..]).unwrap();
    assert!(d.is_empty());
}

#[test]
fn parse_errors() {
    let bad_json = "{\"id\":\"a\",\"split\":\"train\",\"stars\":null,\"transcript\":[],\"confidence\":null,\"sentiment\":null,\"persuasiveness\":null}\n{oops\n";
    match parse_corpus(bad_json.as_bytes()) {
        Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
    let dup = "{\"id\":\"a\",\"split\":\"train\",\"stars\":null,\"transcript\":[],\"confidence\":null,\"sentiment\":null,\"persuasiveness\":null}\n".repeat(2);
    assert!(matches!(parse_corpus(dup.as_bytes()), Err(Error::DuplicateReviewId(id)) if id == "a"));
    let out_of_range = "{\"id\":\"a\",\"split\":\"dev\",\"stars\":null,\"transcript\":[],\"confidence\":[8],\"sentiment\":[1],\"persuasiveness\":null}\n";
    match parse_corpus(out_of_range.as_bytes()) {
        Err(Error::MalformedRecord { line, message }) => {
            assert_eq!(line, 1);
            assert!(message.contains('8'), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn stats_count_fillers_and_positions() {
    let reviews = vec![
        review("a", Split::Train, &["(umm) great movie .", "fine (uhh) ."], &[4]),
        review("b", Split::Dev, &["plain text"], &[4]),
    ];
    let s = corpus_stats(&reviews);
    assert_eq!((s.n_reviews, s.n_reviews_with_fillers, s.n_sentences), (2, 1, 3));
    assert_eq!((s.n_tokens, s.n_um, s.n_uh), (9, 1, 1));
    assert!((s.filler_fraction - 2.0 / 9.0).abs() < 1e-15);
    assert_eq!(s.position_histogram, BTreeMap::from([(0, 1), (1, 1)]));
    assert_eq!(corpus_stats(&[]), CorpusStats::default());
}

#[test]
fn stats_reproduce_table_four_ratio() {
    // 792 reviews with fillers plus 108 without, totals as in the published table
    let n_with = 792usize;
    let (um_total, uh_total, tokens_total) = (4969usize, 4967usize, 230462usize);
    let mut reviews = Vec::new();
    let mut remaining_tokens = tokens_total;
    for i in 0..900 {
        let (um, uh) = if i < n_with {
            (um_total / n_with + usize::from(i < um_total % n_with), uh_total / n_with + usize::from(i < uh_total % n_with))
        } else {
            (0, 0)
        };
        let words = if i == 899 { remaining_tokens - um - uh } else { 256 - um - uh };
        remaining_tokens -= um + uh + words;
        let mut tokens: Vec<Token> = Vec::new();
        tokens.extend((0..um).map(|_| Token::filler(FillerKind::Um)));
        tokens.extend((0..uh).map(|_| Token::filler(FillerKind::Uh)));
        tokens.extend((0..words).map(|_| Token::word("w")));
        reviews.push(Review {
            id: i.to_string(),
            sentences: vec![Sentence::new(tokens)],
            stars: None,
            confidence_raw: vec![],
            sentiment_raw: vec![],
            persuasiveness_raw: vec![],
            split: Split::Train,
        });
    }
    let s = corpus_stats(&reviews);
    assert_eq!((s.n_um, s.n_uh, s.n_tokens, s.n_reviews_with_fillers), (4969, 4967, 230462, 792));
    assert!((s.filler_fraction - 9936.0 / 230462.0).abs() < 1e-15);
    assert!((s.filler_fraction * 100.0 - 4.31).abs() < 0.005);
}

fn small(rule: LabelRule, rate: f64) -> SynthConfig {
    SynthConfig {
        n_reviews: 2000,
        filler_rate: rate,
        label_rule: rule,
        ..SynthConfig::default()
    }
}

#[test]
fn generator_hits_filler_rate() {
    let d = generate_synthetic(&small(LabelRule::FillerDependent, 0.04), 3).unwrap();
    // independent count straight from the tokens
    let (mut fillers, mut tokens) = (0usize, 0usize);
    for r in d.all() {
        for s in &r.sentences {
            tokens += s.tokens.len();
            fillers += s.tokens.iter().filter(|t| matches!(t.surface.as_str(), "um" | "uh")).count();
        }
    }
    let rate = fillers as f64 / tokens as f64;
    assert!((rate - 0.04).abs() <= 0.003, "rate {rate}");
    assert!((corpus_stats(d.all()).filler_fraction - rate).abs() < 1e-15);
}

#[test]
fn generator_zero_rate_has_no_fillers() {
    let d = generate_synthetic(&small(LabelRule::FillerDependent, 0.0), 1).unwrap();
    assert!(d.all().all(|r| r.n_fillers() == 0));
}

#[test]
fn generator_respects_sentence_initial_mass() {
    let cfg = SynthConfig {
        n_reviews: 9000,
        filler_rate: 0.04,
        position_profile: PositionProfile::uniform_rest(0.6, 15),
        ..SynthConfig::default()
    };
    let d = generate_synthetic(&cfg, 11).unwrap();
    let stats = corpus_stats(d.all());
    let total = stats.n_um + stats.n_uh;
    assert!(total >= 10_000, "only {total} fillers");
    let initial = stats.position_histogram.get(&0).copied().unwrap_or(0);
    assert!(initial as f64 / total as f64 >= 0.55, "{initial}/{total}");
}

#[test]
fn generator_is_deterministic_and_split_by_index() {
    let cfg = SynthConfig {
        n_reviews: 100,
        ..SynthConfig::default()
    };
    let render = |d: &DatasetSplits| {
        let mut buf = Vec::new();
        write_corpus(d, &mut buf).unwrap();
        buf
    };
    let a = generate_synthetic(&cfg, 5).unwrap();
    let b = generate_synthetic(&cfg, 5).unwrap();
    assert_eq!(render(&a), render(&b));
    assert_ne!(render(&a), render(&generate_synthetic(&cfg, 6).unwrap()));
    assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (70, 15, 15));
    assert_eq!(a.dev[0].id, "synth-00070");
    // the written corpus parses back to the same reviews
    assert_eq!(parse_corpus(&render(&a)[..]).unwrap(), a);
}

#[test]
fn generator_label_rules() {
    for seed in [0, 1, 2] {
        for (rule, dependent) in [(LabelRule::FillerDependent, true), (LabelRule::FillerIndependent, false)] {
            let d = generate_synthetic(&small(rule, 0.04), seed).unwrap();
            let ff: Vec<f64> = d.all().map(Review::filler_fraction).collect();
            let conf: Vec<f64> = d.all().map(|r| r.label(Target::Confidence).unwrap()).collect();
            let pers: Vec<f64> = d.all().map(|r| r.label(Target::Persuasiveness).unwrap()).collect();
            let r = pearson(&ff, &conf);
            if dependent {
                assert!(r.abs() >= 0.3 && r < 0.0, "seed {seed}: r = {r}");
            } else {
                assert!(r.abs() <= 0.1, "seed {seed}: r = {r}");
            }
            assert!(pearson(&ff, &pers).abs() <= 0.1);
            for rv in d.all() {
                assert!(rv.is_labeled());
                assert!(rv.stars.is_some_and(|s| (1..=5).contains(&s)));
            }
        }
    }
}

#[test]
fn generator_rejects_bad_configs() {
    let mut cfg = SynthConfig::default();
    cfg.position_profile = PositionProfile::new(BTreeMap::from([(0, 0.5), (1, 0.5 + 1e-6)]));
    assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::InvalidConfig(_))));
    let cfg = SynthConfig {
        filler_rate: 1.0,
        ..SynthConfig::default()
    };
    assert!(generate_synthetic(&cfg, 0).is_err());
    let cfg = SynthConfig {
        vocab_size: 19,
        ..SynthConfig::default()
    };
    assert!(generate_synthetic(&cfg, 0).is_err());
}
