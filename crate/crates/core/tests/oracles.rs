mod support;

use support::oracle;

const INSTANCES: usize = 250;

#[test]
fn pooling_matches_group_by() {
    assert_eq!(oracle::pooling(INSTANCES, 11), Ok(INSTANCES));
}

#[test]
fn iou_matches_set_arithmetic() {
    assert_eq!(oracle::iou_sets(INSTANCES, 12), Ok(INSTANCES));
}

#[test]
fn region_gt_matches_distance_loop() {
    assert_eq!(oracle::region_gt(INSTANCES, 13), Ok(INSTANCES));
}

#[test]
fn dbscan_matches_union_find_reference() {
    assert_eq!(oracle::dbscan_suite(INSTANCES, 14), Ok(INSTANCES));
}

#[test]
fn voxels_and_grid_superpoints_match_bucketing() {
    assert_eq!(oracle::voxel_grouping(INSTANCES, 15), Ok(INSTANCES));
}

#[test]
fn dbscan_reference_handles_trivial_cases() {
    assert_eq!(oracle::dbscan_reference(&[[0.0; 3]], 0.1, 1), vec![0]);
    assert_eq!(oracle::dbscan_reference(&[[0.0; 3], [1.0, 0.0, 0.0]], 0.1, 2), vec![-1, -1]);
}
