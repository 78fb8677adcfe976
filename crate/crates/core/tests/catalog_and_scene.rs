mod common;

use std::collections::BTreeSet;

use common::{random_instance, ACCEPTANCE_SHAPE};
use guardad_core::rules::{
    default_catalog, parse_catalog, CatalogError, Constraint, RuleCatalog, DEFAULT_CATALOG_TEXT,
};
use guardad_core::scene::{
    parse_observation, Action, ActionDistribution, ActionSet, Entity, Observation,
};
use proptest::prelude::*;

fn with_text(catalog: &RuleCatalog, says: &str) -> RuleCatalog {
    let constraints = catalog
        .constraints()
        .iter()
        .map(|c| Constraint {
            says: format!("{} {says}", c.says),
            ..c.clone()
        })
        .collect();
    RuleCatalog::new(
        catalog.predicates().to_vec(),
        constraints,
        catalog.horn_rules().to_vec(),
        catalog.temporal_rules().to_vec(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rendered_catalogs_parse_back(seed in any::<u64>(), says in "[ -~]{0,24}") {
        let catalog = with_text(&random_instance(seed, &ACCEPTANCE_SHAPE).catalog, &says);
        let text = catalog.to_string();
        let reparsed = parse_catalog(&text).unwrap();
        prop_assert_eq!(reparsed, catalog);
    }

    #[test]
    fn action_set_behaves_like_a_set(a in 0u8..=255, b in 0u8..=255) {
        let decode = |bits: u8| -> (ActionSet, BTreeSet<Action>) {
            let model: BTreeSet<Action> = Action::ALL.iter().copied().filter(|x| bits & (1 << x.index()) != 0).collect();
            (model.iter().copied().collect(), model)
        };
        let (sa, ma) = decode(a);
        let (sb, mb) = decode(b);
        let inter: BTreeSet<Action> = ma.intersection(&mb).copied().collect();
        prop_assert_eq!(sa.intersect(sb).iter().collect::<BTreeSet<_>>(), inter);
        prop_assert_eq!(sa.len(), ma.len());
        prop_assert_eq!(sa.is_empty(), ma.is_empty());
        prop_assert_eq!(sa.is_subset(sb), ma.is_subset(&mb));
        for &x in Action::ALL {
            prop_assert_eq!(sa.contains(x), ma.contains(&x));
        }
        let json = serde_json::to_string(&sa).unwrap();
        prop_assert_eq!(serde_json::from_str::<ActionSet>(&json).unwrap(), sa);
    }

    #[test]
    fn distributions_round_trip(scores in prop::array::uniform8(-10.0f64..10.0)) {
        let d = ActionDistribution::from_scores(scores);
        let json = serde_json::to_string(&d).unwrap();
        prop_assert_eq!(serde_json::from_str::<ActionDistribution>(&json).unwrap(), d);
    }
}

#[test]
fn shipped_catalog_matches_embedded_text() {
    assert_eq!(
        &parse_catalog(DEFAULT_CATALOG_TEXT).unwrap(),
        default_catalog()
    );
    let on_disk =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/rules/default.gsl")).unwrap();
    assert_eq!(on_disk, DEFAULT_CATALOG_TEXT);
}

#[test]
fn shipped_catalog_has_no_vacuous_rules() {
    let cat = default_catalog();
    let empty = Observation::new(0, vec![Entity::ego()]).unwrap();
    for &action in Action::ALL {
        let atoms = guardad_core::predicates::evaluate_predicates(&empty, action, cat);
        assert!(guardad_core::rules::activate(&atoms, cat, 0)
            .state
            .is_empty());
    }
}

#[test]
fn catalog_errors_name_the_problem() {
    let err = parse_catalog("rule R: Nope => C\n").unwrap_err();
    assert!(
        matches!(err, CatalogError::UnknownReference { .. }),
        "{err:?}"
    );
    let err = parse_catalog("constraint C allow {} severity 3 says \"x\"\n").unwrap_err();
    assert_eq!(err, CatalogError::EmptyAllowedSet("C".into()));
}

#[test]
fn observation_lines_round_trip() {
    let line = r#"{"t":3,"instruction":"Go.","entities":[{"id":"ego","kind":"Ego","motion":"Unknown"},{"id":"p","kind":"Pedestrian","region":"FrontCenter","motion":"Crossing","distance_band":"Near"}]}"#;
    let obs = parse_observation(line).unwrap();
    assert_eq!(parse_observation(&obs.to_json_line()).unwrap(), obs);
    assert!(parse_observation(r#"{"t":0,"entities":[]}"#).is_err());
}
