"""Group layouts, the SSB mask and aggregation, and grouped-softmax inference."""
import numpy as np
import pytest

from longtail_lab import (Architecture, BagsHeads, ClassifierHead, GroupLayout,
                          LossSpec, OptimSpec, SSBMask, bags_infer, bags_scores,
                          bags_train_heads, build_group_layout, compute_class_stats,
                          softmax, ssb_aggregate, train_stage1)

from conftest import dataset_with_counts


def stats_for(counts):
    return compute_class_stats(dataset_with_counts(counts))


class TestGroupLayout:
    def test_ssb_layout_by_count(self):
        layout = build_group_layout(stats_for([5000, 500, 50, 5]), for_ssb=True)
        assert layout.group_of.tolist() == [4, 3, 2, 1]
        assert not layout.has_background_group
        mask = SSBMask.from_layout(layout)
        assert mask.as_matrix().trace() == 1

    def test_all_head_classes_identity_mask(self):
        layout = build_group_layout(stats_for([2000, 1500, 1000]), for_ssb=True)
        mask = SSBMask.from_layout(layout)
        np.testing.assert_array_equal(mask.as_matrix(), np.eye(3))

    def test_no_head_classes_zero_mask(self):
        layout = build_group_layout(stats_for([999, 50, 5]), for_ssb=True)
        mask = SSBMask.from_layout(layout)
        np.testing.assert_array_equal(mask.as_matrix(), np.zeros((3, 3)))

    def test_ssb_background_placed_by_count(self):
        stats = stats_for([5000, 50, 5])
        layout = build_group_layout(stats, background_class=0, for_ssb=True)
        assert layout.group_of.tolist() == [4, 2, 1]
        assert not layout.has_background_group

    def test_bags_background_group(self):
        layout = build_group_layout(stats_for([5000, 50, 5]), background_class=0)
        assert layout.has_background_group
        assert layout.group_of.tolist() == [0, 2, 1]
        assert layout.classes_in(0).tolist() == [0]

    def test_background_group_requires_background_class(self):
        with pytest.raises(ValueError, match="no background class"):
            build_group_layout(stats_for([5000, 50, 5]), with_background_group=True)

    def test_background_group_forced_off(self):
        layout = build_group_layout(stats_for([5000, 50, 5]), background_class=0,
                                    with_background_group=False)
        assert not layout.has_background_group
        assert layout.group_of.tolist() == [4, 2, 1]

    def test_layout_invariant_to_class_order(self):
        counts = [5000, 500, 50, 5]
        perm = [2, 0, 3, 1]
        direct = build_group_layout(stats_for(counts), for_ssb=True).group_of
        permuted = build_group_layout(stats_for([counts[p] for p in perm]),
                                      for_ssb=True).group_of
        assert permuted.tolist() == [int(direct[p]) for p in perm]

    def test_groups_partition_classes(self):
        layout = build_group_layout(stats_for([2000, 800, 30, 4, 120]), for_ssb=True)
        seen = np.concatenate([layout.classes_in(k) for k in range(5)])
        assert sorted(seen.tolist()) == list(range(5))


class TestSSBMask:
    def test_idempotent_and_diagonal(self):
        mask = SSBMask.from_layout(build_group_layout(stats_for([5000, 500, 5000, 5]),
                                                      for_ssb=True))
        q = mask.as_matrix()
        np.testing.assert_array_equal(q, q.T)
        np.testing.assert_array_equal(q @ q, q)
        np.testing.assert_array_equal(q @ (np.eye(4) - q), np.zeros((4, 4)))
        assert q.trace() == 2


class TestSSBAggregate:
    def test_coordinate_selection_example(self):
        mask = SSBMask(head_mask=np.array([True, False]))
        out = ssb_aggregate([0.7, 0.3], [0.4, 0.6], mask)
        np.testing.assert_allclose(out, [0.7, 0.6])
        assert out.sum() == pytest.approx(1.3)

    def test_identity_mask_returns_instance_branch(self):
        mask = SSBMask(head_mask=np.ones(3, dtype=bool))
        p_i = np.array([0.5, 0.2, 0.3])
        np.testing.assert_array_equal(ssb_aggregate(p_i, [0.1, 0.1, 0.8], mask), p_i)

    def test_zero_mask_returns_sqrt_branch(self):
        mask = SSBMask(head_mask=np.zeros(3, dtype=bool))
        p_sqrt = np.array([0.1, 0.1, 0.8])
        np.testing.assert_array_equal(ssb_aggregate([0.5, 0.2, 0.3], p_sqrt, mask), p_sqrt)

    def test_every_coordinate_comes_from_exactly_one_branch(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            c = int(rng.integers(2, 12))
            head = rng.random(c) < 0.5
            mask = SSBMask(head_mask=head)
            p_i, p_sqrt = rng.random(c), rng.random(c)
            out = ssb_aggregate(p_i, p_sqrt, mask)
            for a in range(c):
                assert out[a] == (p_i[a] if head[a] else p_sqrt[a])

    def test_batched_rows(self):
        mask = SSBMask(head_mask=np.array([True, False]))
        p_i = np.array([[0.7, 0.3], [0.6, 0.4]])
        p_sqrt = np.array([[0.4, 0.6], [0.5, 0.5]])
        np.testing.assert_allclose(ssb_aggregate(p_i, p_sqrt, mask),
                                   [[0.7, 0.6], [0.6, 0.5]])

    def test_length_mismatch_rejected(self):
        mask = SSBMask(head_mask=np.array([True, False]))
        with pytest.raises(ValueError):
            ssb_aggregate([0.5, 0.5, 0.0], [0.5, 0.5, 0.0], mask)
        with pytest.raises(ValueError):
            ssb_aggregate([0.5, 0.5], [0.5, 0.3, 0.2], mask)


def manual_bags(layout, weight_by_group, background_weight=None):
    heads = {k: ClassifierHead(weight=np.zeros((w, 1)), bias=np.zeros(w))
             for k, w in weight_by_group.items()}
    background = None
    if background_weight is not None:
        background = ClassifierHead(weight=np.zeros((2, 1)), bias=np.zeros(2))
    return BagsHeads(layout=layout, heads=heads, background_head=background)


class TestBagsInfer:
    def test_remap_drops_others(self):
        layout = build_group_layout(stats_for([50, 20]))
        bags = manual_bags(layout, {2: 3})
        logits = np.log(np.array([0.5, 0.3, 0.2]))
        scores = bags_infer(bags, {2: logits})
        np.testing.assert_allclose(scores, [0.5, 0.3], atol=1e-12)

    def test_foreground_rescaling(self):
        layout = build_group_layout(stats_for([50, 20, 5000]), background_class=2)
        bags = manual_bags(layout, {2: 3}, background_weight=True)
        group_logits = np.log(np.array([0.5, 0.3, 0.2]))
        background_logits = np.log(np.array([0.8, 0.2]))
        scores = bags_infer(bags, {2: group_logits}, background_logits)
        np.testing.assert_allclose(scores, [0.4, 0.24, 0.2], atol=1e-12)

    def test_no_background_group_unscaled(self):
        layout = build_group_layout(stats_for([50, 20]))
        bags = manual_bags(layout, {2: 3})
        scores = bags_infer(bags, {2: np.log(np.array([0.6, 0.3, 0.1]))})
        np.testing.assert_allclose(scores, [0.6, 0.3], atol=1e-12)

    def test_degenerate_single_group_equals_restricted_softmax(self):
        layout = build_group_layout(stats_for([50, 20, 30]))
        rng = np.random.default_rng(4)
        head = ClassifierHead(weight=rng.normal(size=(4, 6)), bias=rng.normal(size=4))
        bags = BagsHeads(layout=layout, heads={2: head})
        feats = rng.normal(size=(9, 6))
        scores = bags_scores(bags, feats)
        np.testing.assert_allclose(scores, softmax(head.logits(feats))[:, :3], atol=1e-15)

    def test_missing_background_logits_rejected(self):
        layout = build_group_layout(stats_for([50, 20, 5000]), background_class=2)
        bags = manual_bags(layout, {2: 3}, background_weight=True)
        with pytest.raises(ValueError, match="background"):
            bags_infer(bags, {2: np.zeros(3)})

    def test_arity_mismatch_rejected(self):
        layout = build_group_layout(stats_for([50, 20]))
        bags = manual_bags(layout, {2: 3})
        with pytest.raises(ValueError, match="outputs"):
            bags_infer(bags, {2: np.zeros((1, 5))})


@pytest.fixture(scope="module")
def toy():
    # Two tail classes (group 1) and two head-ish classes (group 3).
    ds = dataset_with_counts([7, 6, 300, 280], dim=6, seed=2)
    rng = np.random.default_rng(0)
    centers = rng.standard_normal((4, 6)) * 4.0
    feats = ds.features + centers[ds.labels]
    ds = type(ds)(features=feats, labels=ds.labels, class_names=ds.class_names)
    arch = Architecture(6, 4, ())
    model = train_stage1(ds, arch, OptimSpec(epochs=6, warmup_epochs=1, seed=1),
                         LossSpec(kind="cross_entropy"))
    return ds, model, centers


class TestBagsTraining:
    def test_backbone_untouched(self, toy):
        ds, model, _ = toy
        stats = compute_class_stats(ds)
        layout = build_group_layout(stats)
        head_before = model.head.weight.copy()
        bags_train_heads(model, ds, layout, OptimSpec(seed=3).for_classifier())
        assert np.array_equal(model.head.weight, head_before)

    def test_group_heads_have_expected_arity(self, toy):
        ds, model, _ = toy
        layout = build_group_layout(compute_class_stats(ds))
        bags, log = bags_train_heads(model, ds, layout, OptimSpec(seed=3).for_classifier())
        assert set(bags.heads) == {1, 3}
        assert bags.heads[1].num_outputs == 3  # 2 classes + others
        assert bags.heads[3].num_outputs == 3
        assert len(log) == 12

    def test_tail_group_head_beats_majority_baseline(self, toy):
        ds, model, centers = toy
        layout = build_group_layout(compute_class_stats(ds))
        bags, _ = bags_train_heads(model, ds, layout, OptimSpec(seed=3).for_classifier())
        rng = np.random.default_rng(9)
        val_feats = np.concatenate([centers[c] + rng.standard_normal((25, 6))
                                    for c in (0, 1)])
        val_labels = np.repeat([0, 1], 25)
        # The group head's own discrimination on its in-group slice: argmax
        # over its real-class outputs, "others" excluded.
        probs = softmax(bags.heads[1].logits(val_feats))
        preds = probs[:, :2].argmax(axis=1)
        majority_baseline = 0.5
        assert (preds == val_labels).mean() > majority_baseline

    def test_empty_group_skipped_with_warning(self, toy, caplog):
        ds, model, _ = toy
        layout = build_group_layout(compute_class_stats(ds))
        assert layout.classes_in(2).size == 0
        with caplog.at_level("WARNING"):
            bags, _ = bags_train_heads(model, ds, layout, OptimSpec(seed=3).for_classifier())
        assert 2 not in bags.heads
        assert any("group 2" in message for message in caplog.messages)

    def test_deterministic_given_seed(self, toy):
        ds, model, _ = toy
        layout = build_group_layout(compute_class_stats(ds))
        a, _ = bags_train_heads(model, ds, layout, OptimSpec(seed=3).for_classifier())
        b, _ = bags_train_heads(model, ds, layout, OptimSpec(seed=3).for_classifier())
        for k in a.heads:
            assert np.array_equal(a.heads[k].weight, b.heads[k].weight)

    def test_background_sharing_a_decade_with_another_class(self):
        # The background class is pulled into group 0 even though its count
        # decade also holds class 1; its rows must train as "others".
        ds = dataset_with_counts([300, 250, 40, 6], dim=5, seed=8,
                                 background_class=0)
        model = train_stage1(ds, Architecture(5, 4, ()),
                             OptimSpec(epochs=3, warmup_epochs=1, seed=1),
                             LossSpec(kind="cross_entropy"))
        layout = build_group_layout(compute_class_stats(ds), background_class=0)
        assert layout.group_of.tolist() == [0, 3, 2, 1]
        bags, _ = bags_train_heads(model, ds, layout, OptimSpec(seed=2).for_classifier())
        assert bags.heads[3].num_outputs == 2  # class 1 + others
        scores = bags_scores(bags, ds.features[:10])
        assert scores.shape == (10, 4)
        assert np.isfinite(scores).all()
