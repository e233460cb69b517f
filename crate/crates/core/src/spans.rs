//! Span anchoring, overlap groups, and enumeration of non-overlapping
//! combinations inside a group.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{MentionCandidate, Sentence, Span};

/// Default number of ranked options offered to the disambiguation panel.
pub const DEFAULT_MAX_OPTIONS: usize = 5;
/// Groups with more members than this are resolved without enumeration.
pub const DEFAULT_MAX_GROUP_MEMBERS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpanError {
    #[error("mention text {0:?} has no word-aligned occurrence in the sentence")]
    NoMatch(String),
    #[error("overlap group has {members} members, above the enumeration bound of {bound}")]
    GroupTooLarge { members: usize, bound: usize },
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(char::is_alphanumeric)
}

/// Anchors `mention` at its first word-boundary-aligned occurrence in the
/// sentence.
pub fn resolve_span(mention: &str, sentence: &Sentence) -> Result<Span, SpanError> {
    let text = sentence.text.as_str();
    if mention.is_empty() {
        return Err(SpanError::NoMatch(String::new()));
    }
    let mention_chars = mention.chars().count();
    for (char_pos, (byte_pos, _)) in text.char_indices().enumerate() {
        if text[byte_pos..].starts_with(mention) {
            let before = text[..byte_pos].chars().next_back();
            let after = text[byte_pos + mention.len()..].chars().next();
            if !is_word_char(before) && !is_word_char(after) {
                return Ok(Span::new(char_pos, char_pos + mention_chars));
            }
        }
    }
    Err(SpanError::NoMatch(mention.to_string()))
}

pub fn overlap(a: Span, b: Span) -> bool {
    a.overlaps(&b)
}

/// A connected component (of size two or more) of the overlap graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapGroup {
    pub sentence_id: String,
    pub members: Vec<MentionCandidate>,
}

impl OverlapGroup {
    pub fn extent(&self) -> Span {
        let start = self.members.iter().map(|m| m.span.start).min().unwrap_or(0);
        let end = self.members.iter().map(|m| m.span.end).max().unwrap_or(0);
        Span::new(start, end)
    }
}

/// Mentions that overlap nothing, and the groups that need disambiguation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub singletons: Vec<MentionCandidate>,
    pub groups: Vec<OverlapGroup>,
}

/// Splits candidates into connected components of the overlap graph.
///
/// Overlap graphs of intervals are interval graphs, so after sorting by
/// start every component is a contiguous run whose members keep extending
/// the running right edge.
pub fn build_groups(candidates: &[MentionCandidate]) -> Partition {
    let mut sorted: Vec<&MentionCandidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));

    let mut components: Vec<Vec<MentionCandidate>> = Vec::new();
    let mut reach = 0;
    for mention in sorted {
        match components.last_mut() {
            Some(current) if mention.span.start < reach => {
                current.push(mention.clone());
                reach = reach.max(mention.span.end);
            }
            _ => {
                components.push(vec![mention.clone()]);
                reach = mention.span.end;
            }
        }
    }

    let mut partition = Partition::default();
    for mut component in components {
        if component.len() == 1 {
            partition.singletons.push(component.pop().unwrap());
        } else {
            partition.groups.push(OverlapGroup {
                sentence_id: component[0].sentence_id.clone(),
                members: component,
            });
        }
    }
    partition
}

/// A pairwise non-overlapping subset of a group's members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisambiguationOption {
    /// Ordered by span.
    pub mentions: Vec<MentionCandidate>,
    pub total_length: usize,
}

impl DisambiguationOption {
    pub fn new(mut mentions: Vec<MentionCandidate>) -> Self {
        mentions.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let total_length = mentions.iter().map(|m| m.span.len()).sum();
        Self {
            mentions,
            total_length,
        }
    }

    fn first_start(&self) -> usize {
        self.mentions.first().map_or(usize::MAX, |m| m.span.start)
    }
}

/// Total ranking order for options: longest first, then earliest first
/// start, then label sequence, then span sequence.
pub fn rank_order(a: &DisambiguationOption, b: &DisambiguationOption) -> Ordering {
    b.total_length
        .cmp(&a.total_length)
        .then_with(|| a.first_start().cmp(&b.first_start()))
        .then_with(|| {
            let la = a.mentions.iter().map(|m| m.label.as_str());
            let lb = b.mentions.iter().map(|m| m.label.as_str());
            la.cmp(lb)
        })
        .then_with(|| {
            let sa = a.mentions.iter().map(|m| m.span);
            let sb = b.mentions.iter().map(|m| m.span);
            sa.cmp(sb)
        })
}

/// Enumerates every non-empty non-overlapping subset of the group and
/// returns the `k` best under [`rank_order`].
pub fn enumerate_options(
    group: &OverlapGroup,
    k: usize,
    max_members: usize,
) -> Result<Vec<DisambiguationOption>, SpanError> {
    if group.members.len() > max_members {
        return Err(SpanError::GroupTooLarge {
            members: group.members.len(),
            bound: max_members,
        });
    }
    let mut members: Vec<&MentionCandidate> = group.members.iter().collect();
    members.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));

    let mut options = Vec::new();
    let mut chosen: Vec<usize> = Vec::new();
    collect_independent(&members, 0, &mut chosen, &mut options);

    options.sort_by(rank_order);
    options.truncate(k);
    Ok(options)
}

// Depth-first include/exclude over members sorted by span; a member can be
// included only if it overlaps nothing already chosen.
fn collect_independent(
    members: &[&MentionCandidate],
    next: usize,
    chosen: &mut Vec<usize>,
    out: &mut Vec<DisambiguationOption>,
) {
    if next == members.len() {
        if !chosen.is_empty() {
            out.push(DisambiguationOption::new(
                chosen.iter().map(|&i| members[i].clone()).collect(),
            ));
        }
        return;
    }
    let fits = chosen.iter().all(|&i| !members[i].span.overlaps(&members[next].span));
    if fits {
        chosen.push(next);
        collect_independent(members, next + 1, chosen, out);
        chosen.pop();
    }
    collect_independent(members, next + 1, chosen, out);
}

/// Maximum total-length non-overlapping subset by weighted interval
/// scheduling. Used when a group is too large to enumerate.
pub fn largest_option(group: &OverlapGroup) -> DisambiguationOption {
    let mut members: Vec<&MentionCandidate> = group.members.iter().collect();
    members.sort_by(|a, b| (a.span.end, a.span.start, &a.label).cmp(&(b.span.end, b.span.start, &b.label)));

    // best[i] = best total over the first i members (by end offset).
    let n = members.len();
    let mut best = vec![0usize; n + 1];
    let mut take = vec![false; n + 1];
    let mut prev = vec![0usize; n + 1];
    for i in 1..=n {
        let current = members[i - 1];
        prev[i] = members[..i - 1].partition_point(|m| m.span.end <= current.span.start);
        let with = best[prev[i]] + current.span.len();
        if with > best[i - 1] {
            best[i] = with;
            take[i] = true;
        } else {
            best[i] = best[i - 1];
        }
    }

    let mut picked = Vec::new();
    let mut i = n;
    while i > 0 {
        if take[i] {
            picked.push(members[i - 1].clone());
            i = prev[i];
        } else {
            i -= 1;
        }
    }
    DisambiguationOption::new(picked)
}
