use std::path::PathBuf;

use nmtforge::corpus::{corpus_stats, load_parallel, normalize_text, strip_verse_annotations, LangCode, NormalizationPolicy};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn jw_lines() -> Vec<String> {
    std::fs::read_to_string(fixture("lines/jw_style.txt")).unwrap().lines().map(str::to_string).collect()
}

fn is_num(t: &str) -> bool {
    !t.is_empty() && t.chars().all(|c| c.is_ascii_digit())
}

fn is_book(t: &str) -> bool {
    t.chars().any(char::is_alphabetic) && t.chars().all(|c| c.is_alphanumeric() || "'’.-".contains(c) || unicode_mark(c))
}

fn unicode_mark(c: char) -> bool {
    ('\u{300}'..='\u{36f}').contains(&c)
}

/// `16`, `16-17` or `16 - 17`; returns tokens consumed.
fn range_at(t: &[&str]) -> Option<usize> {
    let first = *t.first()?;
    if let Some((a, b)) = first.split_once('-') {
        return (is_num(a) && is_num(b)).then_some(1);
    }
    if !is_num(first) {
        return None;
    }
    if t.len() >= 3 && t[1] == "-" && is_num(t[2]) {
        Some(3)
    } else {
        Some(1)
    }
}

/// Length in tokens of a citation starting at `t[0] == "("`.
fn citation_at(t: &[&str]) -> Option<usize> {
    let mut i = 1;
    if t.get(i).is_some_and(|x| is_num(x)) && t.get(i + 1).is_some_and(|x| is_book(x)) {
        i += 1;
    }
    let start = i;
    while t.get(i).is_some_and(|x| is_book(x)) {
        i += 1;
    }
    if i == start || !t.get(i).is_some_and(|x| is_num(x)) || t.get(i + 1) != Some(&":") {
        return None;
    }
    i += 2;
    i += range_at(&t[i..])?;
    while t.get(i) == Some(&",") {
        i += 1 + range_at(&t[i + 1..])?;
    }
    (t.get(i) == Some(&")")).then_some(i + 1)
}

/// Token-level scanner, independent of the library's regular expression.
fn oracle_strip(s: &str) -> String {
    let toks: Vec<&str> = s.split_whitespace().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if toks[i] == "(" {
            if let Some(n) = citation_at(&toks[i..]) {
                i += n;
                continue;
            }
        }
        out.push(toks[i]);
        i += 1;
    }
    out.join(" ")
}

#[test]
fn appendix_cases() {
    assert_eq!(strip_verse_annotations("( 1 Pita 3 : 1 ) Ẹkẹvuọvo , die yen egbomọphẹ"), "Ẹkẹvuọvo , die yen egbomọphẹ");
    let keep = "Nonẹna , ọ ga vwẹ Bẹtẹl .";
    assert_eq!(strip_verse_annotations(keep), keep);
    assert_eq!(strip_verse_annotations("A ( Jọn 3 : 16 , 17 ) B"), "A B");
    assert_eq!(oracle_strip("A ( Jọn 3 : 16 , 17 ) B"), "A B");
}

#[test]
fn appendix_files_load_and_clean() {
    let policy = NormalizationPolicy::default();
    let mut sentences = 0;
    let mut stripped = 0;
    for lang in [LangCode::Bin, LangCode::Ish, LangCode::Urh, LangCode::Iso] {
        let code = lang.code();
        let corpus = load_parallel(
            fixture(&format!("appendix/{code}.eng")),
            fixture(&format!("appendix/{code}.{code}")),
            LangCode::Eng,
            lang,
        )
        .unwrap();
        sentences += corpus_stats(&corpus).sentences;
        for p in &corpus.pairs {
            assert_eq!(normalize_text(&p.tgt, &policy), p.tgt, "fixture is not normalized");
            let clean = strip_verse_annotations(&p.tgt);
            assert_eq!(clean, oracle_strip(&p.tgt));
            if clean != p.tgt {
                stripped += 1;
                assert!(!clean.contains('('));
            }
        }
    }
    assert_eq!(sentences, 10);
    assert_eq!(stripped, 1);
}

#[test]
fn fixture_lines_agree_with_oracle() {
    let lines = jw_lines();
    assert!(lines.len() >= 1000);
    let mut changed = 0;
    for line in &lines {
        let got = strip_verse_annotations(line);
        assert_eq!(got, oracle_strip(line), "on {line:?}");
        changed += usize::from(got != *line);
    }
    assert!(changed > 300, "only {changed} lines had citations");
}

#[test]
fn cleaning_is_idempotent_on_fixture_lines() {
    let policy = NormalizationPolicy::default();
    for line in jw_lines() {
        let once = strip_verse_annotations(&normalize_text(&line, &policy));
        assert_eq!(strip_verse_annotations(&once), once);
        assert_eq!(normalize_text(&once, &policy), once);
    }
}

#[test]
fn unparenthesized_text_is_kept() {
    for line in jw_lines() {
        let kept: Vec<&str> = line.split_whitespace().collect();
        let out = strip_verse_annotations(&line);
        // Every surviving token appears in the input in the same order.
        let mut it = kept.iter();
        for tok in out.split_whitespace() {
            assert!(it.any(|k| *k == tok), "{tok} not in {line}");
        }
        if !line.contains('(') {
            assert_eq!(out, line);
        }
    }
}
