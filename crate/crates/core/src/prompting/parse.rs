//! Mapping free-form LLM output back onto the candidate list.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::ehr::CcsId;

/// A candidate code with the display name used in the prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedCandidate {
    pub id: CcsId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    /// A permutation of the candidate codes.
    pub ranked: Vec<CcsId>,
    /// How many leading entries came from the text rather than backfill.
    pub matched_count: usize,
    pub raw_text: String,
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

/// Byte offsets of `needle` in `hay` that are not glued to surrounding word characters.
fn bounded_matches(hay: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    let first_is_word = needle.chars().next().is_some_and(is_word);
    let last_is_word = needle.chars().last().is_some_and(is_word);
    hay.match_indices(needle)
        .filter(|(i, _)| {
            let before = hay[..*i].chars().next_back();
            let after = hay[i + needle.len()..].chars().next();
            !(first_is_word && before.is_some_and(is_word)) && !(last_is_word && after.is_some_and(is_word))
        })
        .map(|(i, _)| i)
        .collect()
}

fn clean_token(t: &str) -> &str {
    let t = t.trim();
    // leading list numbering such as "1." or "2)"
    let t = match t.find(|c: char| !c.is_ascii_digit()) {
        Some(p) if p > 0 && matches!(t[p..].chars().next(), Some('.') | Some(')')) => t[p + 1..].trim_start(),
        _ => t,
    };
    t.trim_matches(|c: char| matches!(c, '"' | '\'' | '<' | '>' | '*' | '`' | '.' | ';') || c.is_whitespace())
}

fn match_token(token: &str, by_name: &HashMap<String, usize>, folded: &[String]) -> Option<usize> {
    let t = fold(clean_token(token));
    if t.is_empty() {
        return None;
    }
    if let Some(&i) = by_name.get(&t) {
        return Some(i);
    }
    // longest candidate name found inside the token
    folded
        .iter()
        .enumerate()
        .filter(|(_, n)| !bounded_matches(&t, n).is_empty())
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
        .map(|(i, _)| i)
}

/// Candidate indices in order of first mention anywhere in `text`, giving
/// longer names priority where mentions overlap.
fn scan_mentions(text: &str, folded: &[String]) -> Vec<usize> {
    let hay = text.to_lowercase();
    let mut hits: Vec<(usize, usize, usize)> = Vec::new();
    for (i, n) in folded.iter().enumerate() {
        for p in bounded_matches(&hay, n) {
            hits.push((p, n.len(), i));
        }
    }
    hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut covered_to = 0usize;
    let mut out = Vec::new();
    for (p, len, i) in hits {
        if p < covered_to {
            continue;
        }
        covered_to = p + len;
        out.push(i);
    }
    out
}

/// Reads a ranking from LLM output.
///
/// Uses the last line starting with `answer:` (any case) and matches its
/// comma-separated entries to candidate names. Without such a line, candidates
/// are ordered by first mention in the text. Unmentioned candidates are
/// appended in their given order.
pub fn parse_answer(text: &str, candidates: &[NamedCandidate]) -> ParsedPrediction {
    let folded: Vec<String> = candidates.iter().map(|c| fold(&c.name)).collect();
    let mut by_name: HashMap<String, usize> = HashMap::new();
    for (i, n) in folded.iter().enumerate() {
        by_name.entry(n.clone()).or_insert(i);
    }
    let answer_line = text
        .lines()
        .rev()
        .map(str::trim_start)
        .find(|l| l.len() >= 7 && l.is_char_boundary(7) && l[..7].eq_ignore_ascii_case("answer:"));
    let mentioned: Vec<usize> = match answer_line {
        Some(line) => line[7..].split(',').filter_map(|t| match_token(t, &by_name, &folded)).collect(),
        None => scan_mentions(text, &folded),
    };
    let mut seen = HashSet::new();
    let mut ranked: Vec<CcsId> = Vec::with_capacity(candidates.len());
    for i in mentioned {
        if seen.insert(i) {
            ranked.push(candidates[i].id.clone());
        }
    }
    let matched_count = ranked.len();
    for (i, c) in candidates.iter().enumerate() {
        if !seen.contains(&i) {
            ranked.push(c.id.clone());
        }
    }
    ParsedPrediction { ranked, matched_count, raw_text: text.to_string() }
}

/// Renders a ranking in the exact answer format.
pub fn render_answer<'a>(names: impl IntoIterator<Item = &'a str>) -> String {
    format!("Answer: {}", names.into_iter().collect::<Vec<_>>().join(", "))
}

/// Borda fusion of several rankings of one candidate set: a candidate at
/// 0-based position `i` of a `K`-list earns `K − i`. Ties go to the lower
/// mean position, then the lower code id.
pub fn sc_aggregate(rankings: &[ParsedPrediction]) -> Result<ParsedPrediction, PromptError> {
    let first = rankings.first().ok_or(PromptError::NoSamples)?;
    let k = first.ranked.len();
    let reference: HashSet<&CcsId> = first.ranked.iter().collect();
    let mut score: HashMap<&CcsId, (usize, usize)> = HashMap::new();
    for r in rankings {
        let set: HashSet<&CcsId> = r.ranked.iter().collect();
        if r.ranked.len() != k || set != reference {
            return Err(PromptError::MismatchedCandidates);
        }
        for (pos, c) in r.ranked.iter().enumerate() {
            let e = score.entry(c).or_insert((0, 0));
            e.0 += k - pos;
            e.1 += pos;
        }
    }
    let mut ranked: Vec<CcsId> = first.ranked.clone();
    // equal sample counts, so comparing position sums compares means
    ranked.sort_by(|a, b| {
        let (sa, pa) = score[a];
        let (sb, pb) = score[b];
        sb.cmp(&sa).then(pa.cmp(&pb)).then(a.cmp(b))
    });
    Ok(ParsedPrediction {
        ranked,
        matched_count: rankings.iter().map(|r| r.matched_count).max().unwrap_or(0),
        raw_text: rankings.iter().map(|r| r.raw_text.as_str()).collect::<Vec<_>>().join("\n---\n"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(names: &[&str]) -> Vec<NamedCandidate> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| NamedCandidate { id: CcsId::new(format!("c{i}")), name: n.to_string() })
            .collect()
    }

    fn names(p: &ParsedPrediction, c: &[NamedCandidate]) -> Vec<String> {
        p.ranked.iter().map(|id| c.iter().find(|x| &x.id == id).unwrap().name.clone()).collect()
    }

    #[test]
    fn exact_format_with_backfill() {
        let c = cands(&["Anemia", "Hypertension", "Diabetes"]);
        let p = parse_answer("Answer: Hypertension, Diabetes", &c);
        assert_eq!(names(&p, &c), ["Hypertension", "Diabetes", "Anemia"]);
        assert_eq!(p.matched_count, 2);
        let p = parse_answer("answer: diabetes", &c);
        assert_eq!(names(&p, &c), ["Diabetes", "Anemia", "Hypertension"]);
        assert_eq!(p.matched_count, 1);
    }

    #[test]
    fn free_text_mentions() {
        let c = cands(&["Anemia", "Hypertension", "Diabetes"]);
        let p = parse_answer("Most likely Diabetes given the labs, then Anemia.", &c);
        assert_eq!(names(&p, &c), ["Diabetes", "Anemia", "Hypertension"]);
        assert_eq!(p.matched_count, 2);
    }

    #[test]
    fn last_answer_line_wins() {
        let c = cands(&["A x", "B y"]);
        let p = parse_answer("Answer: A x\nreconsidering\nANSWER: B y, A x", &c);
        assert_eq!(names(&p, &c), ["B y", "A x"]);
    }

    #[test]
    fn containment_prefers_longest_bounded_name() {
        let c = cands(&["CCS-1", "CCS-12", "Diabetes", "Diabetes mellitus"]);
        let p = parse_answer("Answer: 1. \"CCS-12\", probably Diabetes mellitus., CCS-1 (weak), nothing", &c);
        assert_eq!(names(&p, &c)[..3], ["CCS-12", "Diabetes mellitus", "CCS-1"]);
        assert_eq!(p.matched_count, 3);
        let p = parse_answer("I think CCS-12 and Diabetes mellitus", &c);
        assert_eq!(names(&p, &c)[..2], ["CCS-12", "Diabetes mellitus"]);
        assert_eq!(p.matched_count, 2);
    }

    #[test]
    fn duplicates_and_unknowns_dropped() {
        let c = cands(&["A", "B", "C"]);
        let p = parse_answer("Answer: B, Z, B, C", &c);
        assert_eq!(names(&p, &c), ["B", "C", "A"]);
        assert_eq!(p.matched_count, 2);
        let p = parse_answer("", &c);
        assert_eq!(names(&p, &c), ["A", "B", "C"]);
        assert_eq!(p.matched_count, 0);
    }

    #[test]
    fn render_round_trip() {
        let c = cands(&["Anemia", "Hypertension", "Diabetes"]);
        let text = render_answer(["Diabetes", "Anemia", "Hypertension"]);
        assert_eq!(names(&parse_answer(&text, &c), &c), ["Diabetes", "Anemia", "Hypertension"]);
    }

    fn pred(ids: &[&str]) -> ParsedPrediction {
        ParsedPrediction { ranked: ids.iter().map(|i| CcsId::new(*i)).collect(), matched_count: ids.len(), raw_text: String::new() }
    }

    #[test]
    fn borda_fusion() {
        let same = [pred(&["b", "a", "c"]), pred(&["b", "a", "c"])];
        assert_eq!(sc_aggregate(&same).unwrap().ranked, pred(&["b", "a", "c"]).ranked);
        let rev = [pred(&["b", "a"]), pred(&["a", "b"])];
        assert_eq!(sc_aggregate(&rev).unwrap().ranked, pred(&["a", "b"]).ranked);
        // scores: a=4+1+3=8, b=3+4+2=9, c=2+2+4=8, d=1+3+1=5; a and c tie, mean position 4/3 vs 4/3, id breaks
        let three = [pred(&["a", "b", "c", "d"]), pred(&["b", "d", "c", "a"]), pred(&["c", "a", "b", "d"])];
        assert_eq!(sc_aggregate(&three).unwrap().ranked, pred(&["b", "a", "c", "d"]).ranked);
        assert_eq!(sc_aggregate(&[pred(&["a"]), pred(&["b"])]), Err(PromptError::MismatchedCandidates));
        assert_eq!(sc_aggregate(&[]), Err(PromptError::NoSamples));
    }
}
