//! Rule-based oracle. Questions are slot-filled templates over the current
//! node's labels; answers spell out the turn sequence of the shortest path so
//! that a listener can re-trace it exactly.

use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use serde::Deserialize;

use super::context::{DialogueContext, TurnClass, TurnDirective};
use super::tokenize::tokenize;
use super::{DialogueBackend, QaPair, SpanEnd};
use crate::error::{Error, Result};
use crate::util::rng;

const TEMPLATE_SOURCE: &str = include_str!("../../data/templates.json");

#[derive(Clone, Debug, Deserialize)]
pub struct TemplateSet {
    pub version: u32,
    pub questions: Vec<QuestionTemplate>,
    pub answer: AnswerPhrases,
}

#[derive(Clone, Debug, Deserialize)]
pub struct QuestionTemplate {
    pub text: String,
    pub slots: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct AnswerPhrases {
    pub straight: String,
    pub straight_run: String,
    pub left: String,
    pub right: String,
    pub around: String,
    pub ordinal: String,
    pub ways: Ways,
    pub ordinals: Vec<String>,
    pub enter_room: String,
    pub goal: String,
    pub arrived: String,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Ways {
    pub straight: String,
    pub left: String,
    pub right: String,
    pub around: String,
}

impl TemplateSet {
    /// The template set bundled with the crate.
    pub fn bundled() -> &'static TemplateSet {
        static SET: OnceLock<TemplateSet> = OnceLock::new();
        SET.get_or_init(|| serde_json::from_str(TEMPLATE_SOURCE).expect("bundled templates are valid JSON"))
    }

    /// Every word the templates can produce for the given label vocabularies.
    pub fn vocabulary_words<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let mut push = |s: &str| words.extend(tokenize(&strip_slots(s)));
        for q in &self.questions {
            push(&q.text);
        }
        let a = &self.answer;
        for s in [
            &a.straight,
            &a.straight_run,
            &a.left,
            &a.right,
            &a.around,
            &a.ordinal,
            &a.enter_room,
            &a.goal,
            &a.arrived,
            &a.ways.straight,
            &a.ways.left,
            &a.ways.right,
            &a.ways.around,
        ] {
            push(s);
        }
        for o in &a.ordinals {
            push(o);
        }
        for n in 2..=super::context::DEFAULT_MAX_FUTURE {
            push(&n.to_string());
        }
        for l in labels {
            push(l);
        }
        words
    }

    fn way(&self, class: TurnClass) -> &str {
        match class {
            TurnClass::Straight => &self.answer.ways.straight,
            TurnClass::Left => &self.answer.ways.left,
            TurnClass::Right => &self.answer.ways.right,
            TurnClass::Around => &self.answer.ways.around,
        }
    }

    fn directive_phrase(&self, turn: TurnDirective) -> String {
        if turn.ordinal == 0 {
            match turn.class {
                TurnClass::Straight => self.answer.straight.clone(),
                TurnClass::Left => self.answer.left.clone(),
                TurnClass::Right => self.answer.right.clone(),
                TurnClass::Around => self.answer.around.clone(),
            }
        } else {
            let ordinal = self
                .answer
                .ordinals
                .get(turn.ordinal)
                .cloned()
                .unwrap_or_else(|| format!("{}th", turn.ordinal + 1));
            self.answer
                .ordinal
                .replace("{ordinal}", &ordinal)
                .replace("{way}", self.way(turn.class))
        }
    }

    /// Question and answer for `context`; the seed only affects the choice
    /// of question template.
    pub fn generate(&self, context: &DialogueContext, seed: u64) -> Result<QaPair> {
        let here = context.current().ok_or(Error::EmptyPath)?;
        let mut r = rng(seed);
        let object = here.objects.choose(&mut r).cloned();
        let usable: Vec<&QuestionTemplate> = self
            .questions
            .iter()
            .filter(|q| q.slots.iter().all(|s| s != "object" || object.is_some()))
            .collect();
        let template = usable.choose(&mut r).expect("slot-free templates always apply");
        let mut question = template
            .text
            .replace("{room}", &here.room)
            .replace("{target}", &context.target_object);
        if let Some(o) = &object {
            question = question.replace("{object}", o);
        }

        Ok(QaPair {
            question: tokenize(&question),
            answer: tokenize(&self.describe_route(context)),
            answer_end: SpanEnd::Eos,
        })
    }

    fn describe_route(&self, context: &DialogueContext) -> String {
        let a = &self.answer;
        if context.waypoints.len() == 1 && !context.truncated {
            return a.arrived.replace("{target}", &context.target_object);
        }
        let mut clauses: Vec<String> = Vec::new();
        let mut straight_run = 0usize;
        let flush = |run: &mut usize, clauses: &mut Vec<String>| {
            match *run {
                0 => {}
                1 => clauses.push(a.straight.clone()),
                n => clauses.push(a.straight_run.replace("{n}", &n.to_string())),
            }
            *run = 0;
        };
        for pair in context.waypoints.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            let turn = next.turn.expect("every waypoint after the first has a turn");
            let enters = next.room != prev.room;
            if turn.class == TurnClass::Straight && turn.ordinal == 0 && !enters {
                straight_run += 1;
                continue;
            }
            flush(&mut straight_run, &mut clauses);
            let mut clause = self.directive_phrase(turn);
            if enters {
                clause.push(' ');
                clause.push_str(&a.enter_room.replace("{room}", &next.room));
            }
            clauses.push(clause);
        }
        flush(&mut straight_run, &mut clauses);
        clauses.push(
            a.goal
                .replace("{target}", &context.target_object)
                .replace("{room}", &context.target_room),
        );
        clauses.join(" , ")
    }
}

fn strip_slots(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut depth = 0;
    for ch in s.chars() {
        match ch {
            '{' => depth += 1,
            '}' => depth -= 1,
            _ if depth == 0 => out.push(ch),
            _ => {}
        }
    }
    out
}

/// The template oracle as a dialogue backend.
#[derive(Clone, Debug, Default)]
pub struct TemplateBackend;

impl DialogueBackend for TemplateBackend {
    fn name(&self) -> &'static str {
        "template"
    }

    fn generate(&self, context: &DialogueContext, seed: u64) -> Result<QaPair> {
        TemplateSet::bundled().generate(context, seed)
    }
}

/// Free-function form of [`TemplateSet::generate`] over the bundled set.
pub fn template_generate(context: &DialogueContext, seed: u64) -> Result<QaPair> {
    TemplateSet::bundled().generate(context, seed)
}
