"""Streams, synthetic data, embedding files, accuracy matrices, metrics."""

import struct

import numpy as np
import pytest

from hidecl.backbone import Backbone, BackboneConfig, PromptInjectionPlan
from hidecl.engine import HidePrompt, TrainConfig, load_model
from hidecl.harness import (
    EMB_MAGIC,
    EmbeddingParseError,
    accuracy_matrix,
    embedding_dataset,
    evaluate_accuracy,
    linear_probe_accuracy,
    load_embeddings,
    make_stream,
    metrics,
    save_embeddings,
    synth_dataset,
)


def square(ragged):
    """Time-major ragged rows [[A11],[A12,A22],...] -> square matrix."""
    T = len(ragged)
    a = np.full((T, T), np.nan)
    for t, row in enumerate(ragged):
        for i, v in enumerate(row):
            a[i, t] = v
    return a


class TestSynthDataset:
    def test_zero_noise_zero_shift_identical_samples(self):
        data = synth_dataset(3, 10, image_size=16, channels=1, noise=0.0,
                             shift=0, seed=0)
        for c in range(3):
            rows = data.train_x[data.train_y == c]
            assert np.all(rows == rows[0])

    def test_linear_probe_on_raw_pixels(self):
        data = synth_dataset(5, 30, image_size=16, channels=1, noise=0.05,
                             seed=1)
        acc = linear_probe_accuracy(data.train_x, data.train_y,
                                    data.test_x, data.test_y)
        assert acc >= 0.90

    def test_seed_determinism(self):
        a = synth_dataset(4, 8, image_size=16, channels=1, seed=9)
        b = synth_dataset(4, 8, image_size=16, channels=1, seed=9)
        np.testing.assert_array_equal(a.train_x, b.train_x)
        np.testing.assert_array_equal(a.test_y, b.test_y)

    def test_split_sizes(self):
        data = synth_dataset(3, 20, image_size=16, channels=1, seed=2)
        assert len(data.train_x) == 3 * 16
        assert len(data.test_x) == 3 * 4

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            synth_dataset(1, 5)


class TestMakeStream:
    def test_cil_hundred_classes_ten_tasks(self):
        data = synth_dataset(100, 4, image_size=16, channels=1, seed=3)
        stream = make_stream(data, "CIL", 10, seed=3)
        assert stream.T == 10
        sets = [set(t.classes) for t in stream.tasks]
        assert all(len(s) == 10 for s in sets)
        union = set().union(*sets)
        assert len(union) == 100  # pairwise disjoint

    def test_dil_shares_labels(self):
        data = synth_dataset(4, 10, image_size=16, channels=1, seed=4)
        stream = make_stream(data, "DIL", 3, seed=4)
        assert all(t.classes == stream.tasks[0].classes for t in stream.tasks)
        # transform regimes differ between tasks
        assert not np.allclose(stream.tasks[0].train_x, stream.tasks[1].train_x)

    def test_partition_deterministic(self):
        data = synth_dataset(12, 6, image_size=16, channels=1, seed=5)
        s1 = make_stream(data, "CIL", 3, seed=7)
        s2 = make_stream(data, "CIL", 3, seed=7)
        assert [t.classes for t in s1.tasks] == [t.classes for t in s2.tasks]

    def test_remainder_goes_to_last_task(self):
        data = synth_dataset(7, 6, image_size=16, channels=1, seed=6)
        stream = make_stream(data, "CIL", 3, seed=6)
        assert [len(t.classes) for t in stream.tasks] == [2, 2, 3]

    def test_invalid_task_counts(self):
        data = synth_dataset(4, 6, image_size=16, channels=1, seed=6)
        with pytest.raises(ValueError):
            make_stream(data, "CIL", 0, seed=0)
        with pytest.raises(ValueError):
            make_stream(data, "CIL", 5, seed=0)
        with pytest.raises(ValueError):
            make_stream(data, "weird", 2, seed=0)


class TestEmbeddings:
    def test_round_trip_lossless(self, tmp_path):
        rng = np.random.default_rng(8)
        vecs = rng.normal(size=(17, 6)).astype(np.float32)
        labels = rng.integers(0, 5, size=17)
        path = tmp_path / "emb.hemb"
        save_embeddings(path, vecs, labels)
        back_v, back_l = load_embeddings(path)
        np.testing.assert_array_equal(back_v, vecs)
        np.testing.assert_array_equal(back_l, labels)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty"
        path.write_bytes(b"")
        with pytest.raises(EmbeddingParseError) as exc:
            load_embeddings(path)
        assert exc.value.offset == 0

    def test_hand_built_fixture(self, tmp_path):
        rows = [(3, [1.0, 2.0, 3.0, 4.0]),
                (0, [0.5, -0.5, 0.0, 8.0]),
                (7, [9.0, 9.0, 9.0, 9.0])]
        blob = EMB_MAGIC + struct.pack("<II", 3, 4)
        for lab, vec in rows:
            blob += struct.pack("<I", lab) + np.array(vec, "<f4").tobytes()
        path = tmp_path / "fixture"
        path.write_bytes(blob)
        vecs, labels = load_embeddings(path)
        assert vecs.shape == (3, 4)
        np.testing.assert_array_equal(labels, [3, 0, 7])
        np.testing.assert_allclose(vecs[0], [1, 2, 3, 4])

    def test_truncated_row_offset(self, tmp_path):
        blob = EMB_MAGIC + struct.pack("<II", 2, 4)
        blob += struct.pack("<I", 1) + np.zeros(4, "<f4").tobytes()
        blob += struct.pack("<I", 2) + np.zeros(2, "<f4").tobytes()  # short row
        path = tmp_path / "trunc"
        path.write_bytes(blob)
        with pytest.raises(EmbeddingParseError, match="row 1"):
            load_embeddings(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        blob = EMB_MAGIC + struct.pack("<II", 1, 2)
        blob += struct.pack("<I", 0) + np.zeros(2, "<f4").tobytes() + b"xx"
        path = tmp_path / "trail"
        path.write_bytes(blob)
        with pytest.raises(EmbeddingParseError, match="trailing"):
            load_embeddings(path)


FIXTURES = [
    # (time-major ragged rows, faa, caa, ffm)
    ([[1.0]], 1.0, 1.0, None),
    ([[1.0], [0.8, 0.9]], 0.85, 0.925, 0.2),
    ([[0.5], [0.5, 0.5], [0.5, 0.5, 0.5]], 0.5, 0.5, 0.0),
    ([[0.9], [0.9, 0.6], [0.9, 0.6, 0.3]], 0.6, 0.75, 0.0),
    ([[1.0], [0.7, 0.8], [0.4, 0.5, 0.9]], 0.6, 0.7833333333333333, 0.45),
    ([[0.5], [0.9, 0.8]], 0.85, 0.675, -0.4),
    ([[0.0], [0.0, 0.0]], 0.0, 0.0, 0.0),
    ([[0.9], [0.8, 0.95], [0.85, 0.6, 0.7], [0.7, 0.65, 0.7, 1.0]],
     0.7625, 0.8135416666666667, 0.16666666666666666),
    ([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]], 1.0, 1.0, 0.0),
    ([[0.6], [0.4, 1.0]], 0.7, 0.65, 0.2),
]


class TestMetrics:
    @pytest.mark.parametrize("ragged,faa,caa,ffm", FIXTURES)
    def test_fixture(self, ragged, faa, caa, ffm):
        got_faa, got_caa, got_ffm = metrics(square(ragged))
        assert got_faa == pytest.approx(faa, abs=1e-12)
        assert got_caa == pytest.approx(caa, abs=1e-12)
        if ffm is None:
            assert got_ffm is None
        else:
            assert got_ffm == pytest.approx(ffm, abs=1e-12)

    def test_ffm_lower_bound_from_diagonal(self):
        # FFM >= mean_i(A[i][i] - A[i][T]) because each per-task max
        # includes the diagonal entry
        rng = np.random.default_rng(10)
        for _ in range(100):
            T = int(rng.integers(2, 7))
            a = np.full((T, T), np.nan)
            for i in range(T):
                a[i, i:] = rng.uniform(0, 1, size=T - i)
            _, _, ffm = metrics(a)
            bound = np.mean([a[i, i] - a[i, T - 1] for i in range(T - 1)])
            assert ffm >= bound - 1e-12

    def test_ffm_nonnegative_when_best_precedes_final(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            T = int(rng.integers(2, 6))
            a = np.full((T, T), np.nan)
            for i in range(T):
                vals = np.sort(rng.uniform(0, 1, size=T - i))[::-1]
                a[i, i:] = vals  # best accuracy occurs first, final is worst
            _, _, ffm = metrics(a)
            assert ffm >= -1e-12

    def test_faa_invariant_under_final_column_permutation(self):
        rng = np.random.default_rng(12)
        T = 5
        a = np.full((T, T), np.nan)
        for i in range(T):
            a[i, i:] = rng.uniform(0, 1, size=T - i)
        faa, _, _ = metrics(a)
        b = a.copy()
        b[:, T - 1] = a[rng.permutation(T), T - 1]
        faa_b, _, _ = metrics(b)
        assert faa_b == pytest.approx(faa, abs=1e-12)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            metrics(np.zeros((2, 3)))


class TestAccuracyMatrix:
    CFG = BackboneConfig(image_size=16, patch_size=4, channels=1, dim=32,
                         depth=2, heads=2)
    PLAN = PromptInjectionPlan("PreT", (0, 1), 8)

    def _model(self, seed=0, **kw):
        bb = Backbone.random_init(self.CFG, seed=seed)
        bb.freeze()
        args = dict(max_tasks=4, max_classes=8, epochs=3, batch_size=8,
                    pseudo_batch=16, head_steps=2, lr=0.01, seed=seed)
        args.update(kw)
        return HidePrompt(bb, self.PLAN, TrainConfig(**args))

    def test_single_task_matrix(self):
        data = synth_dataset(2, 12, image_size=16, channels=1, seed=13)
        stream = make_stream(data, "CIL", 1, seed=13)
        a = accuracy_matrix(self._model(), stream)
        assert a.shape == (1, 1)
        assert 0.0 <= a[0, 0] <= 1.0

    def test_lower_triangle_filled(self):
        data = synth_dataset(6, 10, image_size=16, channels=1, seed=14)
        stream = make_stream(data, "CIL", 3, seed=14)
        a = accuracy_matrix(self._model(max_tasks=3), stream)
        for i in range(3):
            for t in range(3):
                if i <= t:
                    assert np.isfinite(a[i, t])
                else:
                    assert np.isnan(a[i, t])

    def test_matches_checkpoint_replay_oracle(self, tmp_path):
        data = synth_dataset(6, 10, image_size=16, channels=1, seed=15)
        stream = make_stream(data, "CIL", 3, seed=15)
        a = accuracy_matrix(self._model(seed=15, max_tasks=3), stream,
                            snapshot_dir=tmp_path)
        for t in range(1, 4):
            replay = load_model(tmp_path / f"task_{t}.hide")
            for i in range(1, t + 1):
                oracle = evaluate_accuracy(replay, stream, i)
                assert oracle == pytest.approx(a[i - 1, t - 1], abs=1e-12)

    def test_til_uses_true_prompt(self):
        data = synth_dataset(4, 12, image_size=16, channels=1, seed=16)
        stream = make_stream(data, "TIL", 2, seed=16)
        a = accuracy_matrix(self._model(seed=16), stream)
        assert np.all(np.isfinite(a[np.tril_indices(2)[::-1]]))

    def test_entries_are_exact_count_ratios(self):
        data = synth_dataset(4, 10, image_size=16, channels=1, seed=17)
        stream = make_stream(data, "CIL", 2, seed=17)
        a = accuracy_matrix(self._model(seed=17), stream)
        for i in range(2):
            for t in range(i, 2):
                n = len(stream.tasks[i].test_y)
                assert (a[i, t] * n) == pytest.approx(round(a[i, t] * n), abs=1e-9)


class TestEmbeddingDataset:
    def test_wraps_vectors(self):
        rng = np.random.default_rng(18)
        vecs = rng.normal(size=(40, 5)).astype(np.float32)
        labels = np.repeat([0, 1], 20)
        data = embedding_dataset(vecs, labels, seed=18)
        assert len(data.train_x) + len(data.test_x) == 40
        assert set(np.unique(data.train_y)) == {0, 1}
