use std::collections::BTreeMap;

use super::types::RoleMapping;

/// Sub-roles a user holding `parent_role` receives in each slot.
///
/// Slots with no mapping for the role are absent; the tool then falls back
/// to its own default role.
pub fn map_roles(mappings: &[RoleMapping], parent_role: &str) -> BTreeMap<String, String> {
    mappings
        .iter()
        .filter(|m| m.parent_role == parent_role)
        .map(|m| (m.slot_id.clone(), m.sub_role.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn course_mappings() -> Vec<RoleMapping> {
        vec![
            RoleMapping::new("professor", "doc-share", "presenter"),
            RoleMapping::new("professor", "audio", "orator"),
            RoleMapping::new("student", "doc-share", "viewer"),
        ]
    }

    #[test]
    fn professor_gets_presenter_and_orator() {
        let got = map_roles(&course_mappings(), "professor");
        let want: BTreeMap<_, _> = [("audio", "orator"), ("doc-share", "presenter")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn student_gets_viewer_only() {
        let got = map_roles(&course_mappings(), "student");
        assert_eq!(got.len(), 1);
        assert_eq!(got["doc-share"], "viewer");
        assert!(!got.contains_key("audio"));
    }

    #[test]
    fn empty_mappings() {
        assert!(map_roles(&[], "professor").is_empty());
        assert!(map_roles(&[], "anyone").is_empty());
    }
}
