//! Entity-marker token sequences shared with the relation-representation
//! trainer. The trainer reads spans from the corpus JSONL and must insert
//! markers exactly as rendered here.

use crate::corpus::{EntityMention, REInstance};

pub const SEQUENCE_START: &str = "[CLS]";
pub const SEQUENCE_END: &str = "[SEP]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedSequence {
    pub tokens: Vec<String>,
    /// Position of the subject-begin marker.
    pub subject_marker: usize,
    /// Position of the object-begin marker.
    pub object_marker: usize,
}

impl MarkedSequence {
    pub fn render(&self) -> String {
        self.tokens.join(" ")
    }

    /// Removes the sequence and entity markers, recovering the original
    /// tokens.
    pub fn demark(&self) -> Vec<String> {
        let n = self.tokens.len();
        let (open_s, open_o) = (self.subject_marker, self.object_marker);
        let close_s = self.closing_after(open_s);
        let close_o = self.closing_after(open_o);
        self.tokens
            .iter()
            .enumerate()
            .filter(|&(i, _)| {
                i != 0 && i != n - 1 && i != open_s && i != open_o && i != close_s && i != close_o
            })
            .map(|(_, t)| t.clone())
            .collect()
    }

    fn closing_after(&self, open: usize) -> usize {
        let close = format!("[/{}", &self.tokens[open][1..]);
        (open + 1..self.tokens.len())
            .find(|&i| self.tokens[i] == close)
            .expect("every begin marker has a matching end marker")
    }
}

fn marker_pair(prefix: &str, mention: &EntityMention) -> (String, String) {
    match &mention.entity_type {
        Some(t) => (format!("[{prefix}_{t}]"), format!("[/{prefix}_{t}]")),
        None => (format!("[{prefix}]"), format!("[/{prefix}]")),
    }
}

/// Wraps the subject and object spans in typed (or untyped) markers and
/// brackets the whole sequence with start and end markers.
pub fn mark_entities(instance: &REInstance) -> MarkedSequence {
    let (sub_open, sub_close) = marker_pair("SUB", &instance.subject);
    let (obj_open, obj_close) = marker_pair("OBJ", &instance.object);
    let s = &instance.subject;
    let o = &instance.object;
    let mut tokens = Vec::with_capacity(instance.tokens.len() + 6);
    tokens.push(SEQUENCE_START.to_string());
    let (mut subject_marker, mut object_marker) = (0, 0);
    for (i, tok) in instance.tokens.iter().enumerate() {
        if i == s.start {
            subject_marker = tokens.len();
            tokens.push(sub_open.clone());
        }
        if i == o.start {
            object_marker = tokens.len();
            tokens.push(obj_open.clone());
        }
        tokens.push(tok.clone());
        if i + 1 == s.end {
            tokens.push(sub_close.clone());
        }
        if i + 1 == o.end {
            tokens.push(obj_close.clone());
        }
    }
    tokens.push(SEQUENCE_END.to_string());
    MarkedSequence {
        tokens,
        subject_marker,
        object_marker,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RelationLabel, Role};
    use proptest::prelude::*;

    fn instance(
        tokens: &str,
        subj: (usize, usize),
        obj: (usize, usize),
        ty: Option<&str>,
    ) -> REInstance {
        let tokens: Vec<String> = tokens.split(' ').map(String::from).collect();
        let mention = |(start, end): (usize, usize), role| EntityMention {
            text: tokens[start..end].join(" "),
            start,
            end,
            entity_type: ty.map(String::from),
            role,
        };
        REInstance {
            id: "x".into(),
            subject: mention(subj, Role::Subject),
            object: mention(obj, Role::Object),
            tokens,
            gold_label: RelationLabel::null("NULL"),
        }
    }

    #[test]
    fn typed_worked_example() {
        let inst = instance("He has a sister Lisa .", (0, 1), (4, 5), Some("PER"));
        let marked = mark_entities(&inst);
        assert_eq!(
            marked.render(),
            "[CLS] [SUB_PER] He [/SUB_PER] has a sister [OBJ_PER] Lisa [/OBJ_PER] . [SEP]"
        );
        assert_eq!(marked.subject_marker, 1);
        assert_eq!(marked.object_marker, 7);
    }

    #[test]
    fn untyped_markers() {
        let inst = instance("the burst was caused by pressure", (1, 2), (5, 6), None);
        assert_eq!(
            mark_entities(&inst).render(),
            "[CLS] the [SUB] burst [/SUB] was caused by [OBJ] pressure [/OBJ] [SEP]"
        );
    }

    #[test]
    fn object_before_subject() {
        let inst = instance("Lisa is the sister of the man", (5, 7), (0, 1), Some("PER"));
        let marked = mark_entities(&inst);
        assert_eq!(
            marked.render(),
            "[CLS] [OBJ_PER] Lisa [/OBJ_PER] is the sister of [SUB_PER] the man [/SUB_PER] [SEP]"
        );
        assert_eq!(marked.tokens[marked.subject_marker], "[SUB_PER]");
        assert_eq!(marked.tokens[marked.object_marker], "[OBJ_PER]");
        assert_eq!(marked.demark(), inst.tokens);
    }

    #[test]
    fn adjacent_spans() {
        let inst = instance("a b", (0, 1), (1, 2), None);
        assert_eq!(
            mark_entities(&inst).render(),
            "[CLS] [SUB] a [/SUB] [OBJ] b [/OBJ] [SEP]"
        );
    }

    proptest! {
        #[test]
        fn demark_round_trip(len in 2usize..12, cuts in proptest::collection::vec(0usize..100, 4), typed in any::<bool>()) {
            let mut points: Vec<usize> = cuts.iter().map(|c| c % (len + 1)).collect();
            points.sort_unstable();
            let (a, b, c, d) = (points[0], points[1], points[2], points[3]);
            prop_assume!(a < b && c < d && b <= c);
            let words: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
            let inst = instance(&words.join(" "), (c, d), (a, b), typed.then_some("ORG"));
            let marked = mark_entities(&inst);
            prop_assert_eq!(marked.demark(), inst.tokens.clone());
            prop_assert_eq!(marked.tokens.len(), inst.tokens.len() + 6);
        }
    }
}
