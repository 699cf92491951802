"""Meta-task sampling protocols, invariant validation, series persistence."""

import numpy as np
import pytest

from latentaug.metatask import (
    MetaTask,
    TaskProtocol,
    load_task_series,
    sample_series,
    sample_task,
    save_task_series,
    validate_task,
)
from latentaug.store import EmbeddingDataset


def labeled_ds(n_classes=5, per_class=30, d=4, seed=0, wsis_per_class=None):
    rng = np.random.default_rng(seed)
    n = n_classes * per_class
    labels = np.repeat(np.arange(n_classes), per_class)
    wsi = None
    if wsis_per_class:
        # samples of each class rotate through that many distinct slides
        wsi = np.concatenate(
            [
                np.arange(per_class) % wsis_per_class + cls * wsis_per_class
                for cls in range(n_classes)
            ]
        )
    return EmbeddingDataset(
        features=rng.standard_normal((n, d)).astype(np.float32),
        labels=labels,
        wsi_ids=wsi,
    )


class TestProtocolValidation:
    def test_defaults_valid(self):
        TaskProtocol()

    @pytest.mark.parametrize(
        "kwargs,msg",
        [
            ({"mode": "open"}, "mode"),
            ({"selection": "best"}, "selection"),
            ({"mode": "fsl"}, "n_way"),
            ({"k_shot": 0}, "k_shot"),
            ({"q_query": 0}, "q_query"),
            ({"num_tasks": 0}, "num_tasks"),
            ({"master_seed": -4}, "master_seed"),
        ],
    )
    def test_bad_fields_rejected(self, kwargs, msg):
        with pytest.raises(ValueError, match=msg):
            TaskProtocol(**kwargs)

    def test_hetero_one_shot_rejected(self):
        with pytest.raises(ValueError, match="k_shot=1"):
            TaskProtocol(selection="hetero_wsi", k_shot=1)

    def test_overlapping_pools_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            TaskProtocol(support_pool={1, 2}, query_pool={2, 3})

    def test_disjoint_pools_accepted(self):
        p = TaskProtocol(support_pool={1, 2}, query_pool={3, 4})
        assert p.support_pool == frozenset({1, 2})


class TestFslSampling:
    def test_five_way_one_shot(self):
        ds = labeled_ds(n_classes=5, per_class=30)
        proto = TaskProtocol(mode="fsl", n_way=5, k_shot=1, q_query=15, master_seed=3)
        t = sample_task(ds, proto, 0)
        assert t.support_indices.shape == (5,)
        assert t.query_indices.shape == (75,)
        assert np.intersect1d(t.support_indices, t.query_indices).size == 0
        assert sorted(t.task_classes.tolist()) == [0, 1, 2, 3, 4]

    def test_subset_of_classes(self):
        ds = labeled_ds(n_classes=8, per_class=25)
        proto = TaskProtocol(mode="fsl", n_way=3, k_shot=2, q_query=5, master_seed=1)
        t = sample_task(ds, proto, 4)
        assert t.task_classes.shape == (3,)
        assert set(t.task_classes.tolist()) <= set(range(8))
        assert np.array_equal(np.unique(t.support_labels), t.task_classes)

    def test_deterministic(self):
        ds = labeled_ds()
        proto = TaskProtocol(mode="fsl", n_way=4, k_shot=2, q_query=6, master_seed=9)
        t1 = sample_task(ds, proto, 7)
        t2 = sample_task(ds, proto, 7)
        assert np.array_equal(t1.support_indices, t2.support_indices)
        assert np.array_equal(t1.query_indices, t2.query_indices)

    def test_task_index_changes_sample(self):
        ds = labeled_ds()
        proto = TaskProtocol(mode="fsl", n_way=4, k_shot=2, q_query=6, master_seed=9)
        t1 = sample_task(ds, proto, 0)
        t2 = sample_task(ds, proto, 1)
        assert not np.array_equal(t1.support_indices, t2.support_indices)

    def test_insufficient_queries_rejected(self):
        ds = labeled_ds(per_class=10)
        proto = TaskProtocol(mode="fsl", n_way=5, k_shot=2, q_query=15)
        with pytest.raises(ValueError, match="query candidates"):
            sample_task(ds, proto, 0)

    def test_n_way_exceeding_classes_rejected(self):
        ds = labeled_ds(n_classes=3)
        proto = TaskProtocol(mode="fsl", n_way=5, k_shot=1, q_query=2)
        with pytest.raises(ValueError, match="exceeds"):
            sample_task(ds, proto, 0)

    def test_unlabeled_dataset_rejected(self):
        ds = EmbeddingDataset(features=np.ones((10, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="labels"):
            sample_task(ds, TaskProtocol(mode="fsl", n_way=2, q_query=1), 0)


class TestGfslSampling:
    def test_spans_all_classes(self):
        ds = labeled_ds(n_classes=9, per_class=20)
        proto = TaskProtocol(mode="gfsl", k_shot=1, q_query=15, master_seed=2)
        t = sample_task(ds, proto, 0)
        assert t.support_indices.shape == (9,)
        assert np.array_equal(t.task_classes, np.arange(9))
        assert np.array_equal(np.sort(t.support_labels), np.arange(9))

    def test_explicit_matching_n_way_ok(self):
        ds = labeled_ds(n_classes=4, per_class=25)
        proto = TaskProtocol(mode="gfsl", n_way=4, k_shot=2, q_query=10)
        t = sample_task(ds, proto, 1)
        assert t.task_classes.shape == (4,)

    def test_mismatched_n_way_rejected(self):
        ds = labeled_ds(n_classes=4)
        proto = TaskProtocol(mode="gfsl", n_way=9, k_shot=1, q_query=5)
        with pytest.raises(ValueError, match="does not match"):
            sample_task(ds, proto, 0)

    def test_per_class_counts(self):
        ds = labeled_ds(n_classes=6, per_class=30)
        proto = TaskProtocol(mode="gfsl", k_shot=3, q_query=12, master_seed=5)
        t = sample_task(ds, proto, 2)
        for cls in range(6):
            assert int(np.sum(t.support_labels == cls)) == 3
            assert int(np.sum(t.query_labels == cls)) == 12


class TestHeterogeneousSelection:
    def test_distinct_wsis_when_available(self):
        ds = labeled_ds(n_classes=3, per_class=40, wsis_per_class=8)
        proto = TaskProtocol(
            mode="gfsl", k_shot=5, q_query=10, selection="hetero_wsi", master_seed=4
        )
        for i in range(20):
            t = sample_task(ds, proto, i)
            for cls in t.task_classes:
                sup = t.support_indices[t.support_labels == cls]
                assert np.unique(ds.wsi_ids[sup]).size == 5
            assert validate_task(t, ds, proto) == []

    def test_maximally_distinct_fallback(self):
        # only 2 slides per class but 4 shots: expect exactly 2 distinct
        # slides, i.e. as distinct as the pool allows
        ds = labeled_ds(n_classes=3, per_class=20, wsis_per_class=2)
        proto = TaskProtocol(
            mode="gfsl", k_shot=4, q_query=5, selection="hetero_wsi", master_seed=8
        )
        t = sample_task(ds, proto, 0)
        for cls in t.task_classes:
            sup = t.support_indices[t.support_labels == cls]
            assert np.unique(ds.wsi_ids[sup]).size == 2
        assert validate_task(t, ds, proto) == []

    def test_requires_wsi_ids(self):
        ds = labeled_ds()
        proto = TaskProtocol(mode="gfsl", k_shot=2, q_query=5, selection="hetero_wsi")
        with pytest.raises(ValueError, match="wsi_ids"):
            sample_task(ds, proto, 0)


class TestHomogeneousSelection:
    def test_single_wsi_per_class(self):
        ds = labeled_ds(n_classes=4, per_class=40, wsis_per_class=4)
        proto = TaskProtocol(
            mode="gfsl", k_shot=5, q_query=10, selection="homo_wsi", master_seed=6
        )
        for i in range(20):
            t = sample_task(ds, proto, i)
            for cls in t.task_classes:
                sup = t.support_indices[t.support_labels == cls]
                assert np.unique(ds.wsi_ids[sup]).size == 1
            assert validate_task(t, ds, proto) == []

    def test_no_wsi_with_enough_samples_rejected(self):
        # 12 samples per class over 6 slides: 2 per slide, so K=5 cannot
        # come from a single slide
        ds = labeled_ds(n_classes=3, per_class=12, wsis_per_class=6)
        proto = TaskProtocol(mode="gfsl", k_shot=5, q_query=3, selection="homo_wsi")
        with pytest.raises(ValueError, match="no single WSI"):
            sample_task(ds, proto, 0)


class TestPools:
    def pooled_ds(self):
        return labeled_ds(n_classes=3, per_class=60, wsis_per_class=6, seed=7)

    def test_supports_and_queries_respect_pools(self):
        ds = self.pooled_ds()
        # class c occupies wsis [6c, 6c+6); first three are support slides
        support_pool = {c * 6 + j for c in range(3) for j in range(3)}
        query_pool = {c * 6 + j for c in range(3) for j in range(3, 6)}
        proto = TaskProtocol(
            mode="gfsl",
            k_shot=4,
            q_query=10,
            support_pool=support_pool,
            query_pool=query_pool,
            master_seed=11,
        )
        for i in range(10):
            t = sample_task(ds, proto, i)
            assert set(ds.wsi_ids[t.support_indices].tolist()) <= support_pool
            assert set(ds.wsi_ids[t.query_indices].tolist()) <= query_pool
            assert validate_task(t, ds, proto) == []

    def test_insufficient_pool_rejected(self):
        ds = self.pooled_ds()
        proto = TaskProtocol(
            mode="gfsl",
            k_shot=15,
            q_query=5,
            support_pool={0},  # only class 0's first slide: 10 samples
            master_seed=12,
        )
        with pytest.raises(ValueError, match="support candidates"):
            sample_task(ds, proto, 0)


class TestSeries:
    def test_length_and_indices(self):
        ds = labeled_ds()
        proto = TaskProtocol(mode="fsl", n_way=3, k_shot=2, q_query=5, num_tasks=17)
        tasks = sample_series(ds, proto)
        assert len(tasks) == 17
        assert [t.task_index for t in tasks] == list(range(17))

    def test_order_independent_generation(self):
        ds = labeled_ds()
        proto = TaskProtocol(mode="fsl", n_way=3, k_shot=2, q_query=5, num_tasks=20)
        series = sample_series(ds, proto)
        shuffled_order = np.random.default_rng(13).permutation(20)
        regenerated = {int(i): sample_task(ds, proto, int(i)) for i in shuffled_order}
        for t in series:
            r = regenerated[t.task_index]
            assert np.array_equal(t.support_indices, r.support_indices)
            assert np.array_equal(t.query_indices, r.query_indices)

    def test_all_tasks_validate(self):
        ds = labeled_ds(n_classes=6, per_class=30)
        proto = TaskProtocol(mode="gfsl", k_shot=2, q_query=8, num_tasks=50, master_seed=20)
        for t in sample_series(ds, proto):
            assert validate_task(t, ds, proto) == []


class TestValidateTask:
    def base_case(self):
        ds = labeled_ds(n_classes=4, per_class=25, seed=21)
        proto = TaskProtocol(mode="gfsl", k_shot=2, q_query=5, master_seed=22)
        return ds, proto, sample_task(ds, proto, 0)

    def test_clean_task(self):
        ds, proto, t = self.base_case()
        assert validate_task(t, ds, proto) == []

    def test_detects_overlap(self):
        ds, proto, t = self.base_case()
        bad = MetaTask(
            support_indices=t.support_indices,
            support_labels=t.support_labels,
            query_indices=np.concatenate([t.query_indices[:-1], t.support_indices[:1]]),
            query_labels=t.query_labels,
            task_classes=t.task_classes,
            task_index=0,
        )
        assert any("overlap" in v for v in validate_task(bad, ds, proto))

    def test_detects_wrong_counts(self):
        ds, proto, t = self.base_case()
        bad = MetaTask(
            support_indices=t.support_indices[:-1],
            support_labels=t.support_labels[:-1],
            query_indices=t.query_indices,
            query_labels=t.query_labels,
            task_classes=t.task_classes,
            task_index=0,
        )
        msgs = validate_task(bad, ds, proto)
        assert any("supports" in v for v in msgs)

    def test_detects_label_mismatch(self):
        ds, proto, t = self.base_case()
        wrong = t.support_labels.copy()
        wrong[0] = (wrong[0] + 1) % 4
        bad = MetaTask(
            support_indices=t.support_indices,
            support_labels=wrong,
            query_indices=t.query_indices,
            query_labels=t.query_labels,
            task_classes=t.task_classes,
            task_index=0,
        )
        assert any("disagree" in v for v in validate_task(bad, ds, proto))

    def test_detects_gfsl_class_mismatch(self):
        ds, proto, t = self.base_case()
        bad = MetaTask(
            support_indices=t.support_indices,
            support_labels=t.support_labels,
            query_indices=t.query_indices,
            query_labels=t.query_labels,
            task_classes=t.task_classes[:-1],
            task_index=0,
        )
        assert any("dataset classes" in v for v in validate_task(bad, ds, proto))

    def test_detects_homogeneity_violation(self):
        ds = labeled_ds(n_classes=3, per_class=40, wsis_per_class=4, seed=23)
        proto = TaskProtocol(mode="gfsl", k_shot=4, q_query=5, selection="homo_wsi", master_seed=24)
        t = sample_task(ds, proto, 0)
        # swap one support of class 0 for a sample on a different slide
        cls0 = t.support_indices[t.support_labels == 0]
        used_wsi = ds.wsi_ids[cls0[0]]
        replacement = next(
            int(i)
            for i in np.flatnonzero((ds.labels == 0) & (ds.wsi_ids != used_wsi))
            if i not in t.query_indices
        )
        sup = t.support_indices.copy()
        sup[np.flatnonzero(t.support_labels == 0)[0]] = replacement
        bad = MetaTask(
            support_indices=sup,
            support_labels=t.support_labels,
            query_indices=t.query_indices,
            query_labels=t.query_labels,
            task_classes=t.task_classes,
            task_index=0,
        )
        assert any("homogeneous violation" in v for v in validate_task(bad, ds, proto))

    def test_never_raises_on_garbage(self):
        ds, proto, _ = self.base_case()
        garbage = MetaTask(
            support_indices=np.array([10**6]),
            support_labels=np.array([0]),
            query_indices=np.array([10**6 + 1]),
            query_labels=np.array([1]),
            task_classes=np.array([0, 1, 2, 3]),
            task_index=0,
        )
        msgs = validate_task(garbage, ds, proto)
        assert msgs and any("out of range" in v for v in msgs)


class TestJsonl:
    def test_round_trip(self, tmp_path):
        ds = labeled_ds(n_classes=4, per_class=25)
        proto = TaskProtocol(mode="gfsl", k_shot=2, q_query=5, num_tasks=8, master_seed=30)
        tasks = sample_series(ds, proto)
        path = tmp_path / "series.jsonl"
        save_task_series(tasks, path)
        loaded = load_task_series(path)
        assert len(loaded) == 8
        for a, b in zip(tasks, loaded):
            assert a.task_index == b.task_index
            assert np.array_equal(a.support_indices, b.support_indices)
            assert np.array_equal(a.support_labels, b.support_labels)
            assert np.array_equal(a.query_indices, b.query_indices)
            assert np.array_equal(a.query_labels, b.query_labels)
            assert np.array_equal(a.task_classes, b.task_classes)

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("not json\n")
        with pytest.raises(ValueError, match="line 0"):
            load_task_series(path)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"task_index": 0}\n')
        with pytest.raises(ValueError, match="missing field"):
            load_task_series(path)
