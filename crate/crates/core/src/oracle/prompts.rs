//! Prompt templates for the triplet-assignment and hierarchy-ranking queries.

pub const TRIPLET_TEMPLATE: &str = "\
You are given an anchor text query that describes a state of a scene. Given two other text queries describing the state of a scene, you will help determine which of the two queries is more similar to the anchor query.

Consider the semantic meaning of the states and the specific aspects of the scene they describe. Additionally, think about how many objects and what kinds of object properties and features you would need to verify if evaluating these states against an image.

The anchor query is the following: {anchor}

The other two queries are:
Query 1: {query1}
Query 2: {query2}

You must choose one of the queries as your answer. Respond using the following format:
Answer: [Query 1 or Query 2]
";

pub const RANK_TEMPLATE: &str = "\
You are an expert in scene understanding and state hierarchy determination. Given three text descriptions each outlining a potential state of a scene, your task is to establish a hierarchy among these descriptions by identifying which one is the most general, which is the most specific, and which lies in between.

Consider the following when determining the hierarchy:
- The variety and number of objects required by the state.
- The important features of the objects and/or relationships between the objects.
- The level of detail provided about the scene.
- The semantic meaning of each description.

Your goal is to rank these descriptions in order of specificity, from least specific (1) to most specific (3).

The three descriptions are:
1. {anchor}
2. {query1}
3. {query2}

You must provide your ranking using the following format:
Least Specific: [content of Description 1, 2, or 3]
Intermediate Specific: [content of Description 1, 2, or 3]
Most Specific: [content of Description 1, 2, or 3]
";

/// Single left-to-right pass, so substituted text is never rescanned.
fn fill(template: &str, anchor: &str, query1: &str, query2: &str) -> String {
    let slots = [("{anchor}", anchor), ("{query1}", query1), ("{query2}", query2)];
    let mut out = String::with_capacity(template.len() + anchor.len() + query1.len() + query2.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        match slots.iter().find(|(k, _)| rest.starts_with(k)) {
            Some((k, v)) => {
                out.push_str(v);
                rest = &rest[k.len()..];
            }
            None => {
                out.push('{');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_triplet_prompt(anchor: &str, query1: &str, query2: &str) -> String {
    fill(TRIPLET_TEMPLATE, anchor, query1, query2)
}

pub fn render_rank_prompt(a: &str, b: &str, c: &str) -> String {
    fill(RANK_TEMPLATE, a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_placeholder_is_substituted_once() {
        let p = render_triplet_prompt("A {query1}", "B", "C");
        assert_eq!(p.matches("A {query1}").count(), 1);
        assert_eq!(p.matches("Query 1: B\n").count(), 1);
        assert_eq!(p.matches("Query 2: C\n").count(), 1);
        assert!(p.ends_with("Answer: [Query 1 or Query 2]\n"));
        let r = render_rank_prompt("x", "y", "z");
        assert!(r.contains("1. x\n2. y\n3. z\n"));
        assert!(!r.contains("{anchor}") && !r.contains("{query"));
        assert!(r.contains("Least Specific: [content of Description 1, 2, or 3]\n"));
    }

    #[test]
    fn rendering_is_injective_on_sampled_triples() {
        let words = ["Is the cup Open", "Is the cup NextTo the plate", "a", "b", "Is the lamp TurnedOn"];
        let mut seen = std::collections::BTreeMap::new();
        for a in words {
            for b in words {
                for c in words {
                    assert!(seen.insert(render_triplet_prompt(a, b, c), (a, b, c)).is_none());
                    assert!(seen.insert(render_rank_prompt(a, b, c), (a, b, c)).is_none());
                }
            }
        }
    }
}
