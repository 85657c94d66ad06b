use crate::kg::Triplet;

/// Relation → infix template used to verbalize a triplet.
pub const RELATION_TEMPLATES: [(&str, &str); 29] = [
    ("UsedFor", "is used for"),
    ("ReceivesAction", "receives action"),
    ("HasA", "has a"),
    ("Causes", "causes"),
    ("HasProperty", "has a property"),
    ("CreatedBy", "is created by"),
    ("DefinedAs", "is defined as"),
    ("AtLocation", "is at location of"),
    ("HasSubEvent", "has"),
    ("MadeUpOf", "is made of"),
    ("HasPrerequisite", "has prerequisite to"),
    ("Desires", "desires"),
    ("NotDesires", "not desires"),
    ("IsA", "is a"),
    ("CapableOf", "is capable of"),
    ("shape", "shape is"),
    ("color", "color is"),
    ("width", "width is"),
    ("distribution", "distribution is"),
    ("height", "height is"),
    ("next_to", "next to"),
    ("stop_at", "stop at"),
    ("pass_through", "pass through"),
    ("intersect_at", "intersect at"),
    ("marked_on", "is marked on"),
    ("connected_to", "is connected to"),
    ("is_component_of", "is component of"),
    ("is_part_of", "is part of"),
    ("is_member_of", "is member of"),
];

/// Template for a relation; unknown relations fall back to their name with
/// underscores as spaces.
pub fn relation_template(relation: &str) -> String {
    RELATION_TEMPLATES
        .iter()
        .find(|(r, _)| *r == relation)
        .map(|(_, t)| t.to_string())
        .unwrap_or_else(|| relation.replace('_', " "))
}

/// `"{head} {template} {tail}"`.
pub fn triplet_to_sentence(t: &Triplet) -> String {
    format!("{} {} {}", t.head, relation_template(&t.relation), t.tail)
}

/// Sentences joined with `". "` and closed with `"."`; empty for no triplets.
pub fn build_knowledge_sentence(triplets: &[Triplet]) -> String {
    if triplets.is_empty() {
        return String::new();
    }
    let parts: Vec<String> = triplets.iter().map(triplet_to_sentence).collect();
    format!("{}.", parts.join(". "))
}
