use std::fmt::Write;

use crate::definition::{
    Anchor, Comparator, EventQuery, ExitStrategy, Occurrence, PhenotypeDefinition,
};

/// Renders a definition as `.phen` text. The output is deterministic and
/// parses back to an equal definition.
pub fn print(def: &PhenotypeDefinition) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "phenotype {} v{} {{", quote(&def.definition_id), def.version);

    let meta = &def.metadata;
    if !meta.intent.is_empty() {
        let _ = writeln!(w, "  intent {}", quote(&meta.intent));
    }
    for r in &meta.literature_refs {
        let _ = writeln!(w, "  ref {}", quote(r));
    }
    for a in &meta.authors {
        let _ = writeln!(w, "  author {}", quote(a));
    }
    if let Some(waiver) = &meta.role_waiver {
        let _ = writeln!(w, "  waive {}", quote(waiver));
    }

    for set in &def.concept_sets {
        let _ = write!(w, "  conceptset {}", set.set_id);
        if set.name != set.set_id {
            let _ = write!(w, " {}", quote(&set.name));
        }
        let items: Vec<String> = set
            .items
            .iter()
            .map(|i| {
                let mut s = i.concept_id.to_string();
                if i.include_descendants {
                    s.push_str(" +descendants");
                }
                if i.is_excluded {
                    s.push_str(" -exclude");
                }
                s
            })
            .collect();
        if items.is_empty() {
            let _ = writeln!(w, " {{ }}");
        } else {
            let _ = writeln!(w, " {{ {} }}", items.join(", "));
        }
    }

    let _ = writeln!(w, "  entry {}", query(&def.entry, true));
    let _ = writeln!(w, "  observation prior {} days", def.prior_observation_days);

    if let Some(demo) = &def.demographic_constraints {
        let mut parts = Vec::new();
        if let Some(age) = demo.age_at_index {
            parts.push(format!("age [{}, {}]", age.min, age.max));
        }
        if let Some(g) = &demo.gender {
            parts.push(format!("gender {}", g.iter().map(|s| quote(s)).collect::<Vec<_>>().join(", ")));
        }
        if let Some(r) = &demo.race {
            parts.push(format!("race {}", r.iter().map(|s| quote(s)).collect::<Vec<_>>().join(", ")));
        }
        if parts.is_empty() {
            let _ = writeln!(w, "  demographics {{ }}");
        } else {
            let _ = writeln!(w, "  demographics {{ {} }}", parts.join(" "));
        }
    }

    for rule in &def.rules {
        let role = match rule.role {
            crate::definition::Role::Inclusion => "include",
            crate::definition::Role::Exclusion => "exclude",
            crate::definition::Role::Strengthener => "strengthen",
            crate::definition::Role::Disqualifier => "disqualify",
        };
        let _ = write!(
            w,
            "  {role} {}: {} within [{}, {}]",
            quote(&rule.name),
            query(&rule.query, false),
            rule.window.start_offset_days,
            rule.window.end_offset_days
        );
        if rule.window.anchor != Anchor::IndexDate {
            let _ = write!(w, " from {}", rule.window.anchor.as_str());
        }
        let _ = writeln!(w, " count {} {}", comparator(rule.count_comparator), rule.count);
    }

    match &def.exit {
        ExitStrategy::FixedOffset { days } => {
            let _ = writeln!(w, "  exit offset {days}");
        }
        ExitStrategy::EndOfContinuousExposure {
            concept_set_ref,
            persistence_gap_days,
        } => {
            let _ = writeln!(w, "  exit end_of_exposure {concept_set_ref} persistence {persistence_gap_days}");
        }
        ExitStrategy::EventBased { query: q } => {
            let _ = writeln!(w, "  exit event {}", query(q, false));
        }
    }
    if def.era_gap_days != 0 {
        let _ = writeln!(w, "  era_gap {}", def.era_gap_days);
    }
    out.push_str("}\n");
    out
}

fn comparator(c: Comparator) -> &'static str {
    c.symbol()
}

fn query(q: &EventQuery, always_occurrence: bool) -> String {
    let mut s = String::new();
    match q.occurrence {
        Occurrence::FirstEver => s.push_str("first "),
        Occurrence::Nth(n) => {
            let _ = write!(s, "nth {n} ");
        }
        Occurrence::Any if always_occurrence => s.push_str("any "),
        Occurrence::Any => {}
    }
    let _ = write!(s, "{} in {}", q.domain, q.concept_set_ref);
    if let Some(vp) = &q.value_predicate {
        let _ = write!(s, " {} {}", vp.comparator, vp.threshold);
        if let Some(unit) = vp.unit_concept_id {
            let _ = write!(s, " unit {unit}");
        }
    }
    s
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
