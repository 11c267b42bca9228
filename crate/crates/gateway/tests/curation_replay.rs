use codesign_core::catalog::CurateOp;
use codesign_gateway::service::CreateProject;
use codesign_gateway::{Gateway, ProjectState, WriteOptions};
use proptest::prelude::*;

fn op() -> impl Strategy<Value = (bool, usize, usize)> {
    (any::<bool>(), 0..30usize, 0..35usize)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_curation_replays_to_identical_view(ops in prop::collection::vec(op(), 50)) {
        let gw = Gateway::in_memory(0);
        let pid = gw.create_project(CreateProject { name: "c".into(), seed: Some(2), max_rounds: None, strategy: None }).unwrap().project_id;
        let ids: Vec<String> = gw
            .generate_library(&pid, 30, &WriteOptions::default())
            .unwrap()
            .items
            .into_iter()
            .map(|i| i.item_id)
            .collect();
        for (remove, i, rank) in ops {
            let item_id = ids[i].clone();
            let op = if remove { CurateOp::Remove { item_id } } else { CurateOp::Reorder { item_id, new_rank: rank } };
            // Ops on deleted items or out-of-range ranks are rejected and leave no event.
            let before = gw.events(&pid).unwrap().len();
            if gw.curate(&pid, vec![op], &WriteOptions::default()).is_err() {
                prop_assert_eq!(gw.events(&pid).unwrap().len(), before);
            }
        }
        let live = gw.snapshot(&pid).unwrap();
        let view: Vec<_> = live.catalog.view().into_iter().cloned().collect();
        for (k, item) in view.iter().enumerate() {
            prop_assert_eq!(item.display_rank, k);
        }
        let replayed = ProjectState::replay(&gw.events(&pid).unwrap(), None).unwrap();
        let again: Vec<_> = replayed.catalog.view().into_iter().cloned().collect();
        prop_assert_eq!(view, again);
        prop_assert_eq!(replayed.state_hash(), live.state_hash());
    }
}
