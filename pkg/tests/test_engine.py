"""Continual learner: per-task training, two-stage inference, baselines,
persistence, and representation diagnostics."""

import numpy as np
import pytest

from hidecl.backbone import (
    Backbone,
    BackboneConfig,
    PromptInjectionPlan,
    forward_uninstructed,
    pretrain_backbone,
)
from hidecl.engine import (
    AblationConfig,
    HidePrompt,
    TrainConfig,
    cka,
    key_match_tii,
    load_model,
    run_ablation,
    save_model,
)
from hidecl.harness import make_stream, synth_dataset

CFG = BackboneConfig(image_size=16, patch_size=4, channels=1, dim=32,
                     depth=2, heads=2)
PLAN = PromptInjectionPlan("PreT", (0, 1), 8)

_PRETRAINED: dict[int, Backbone] = {}


def frozen_backbone(seed=0):
    bb = Backbone.random_init(CFG, seed=seed)
    bb.freeze()
    return bb


def pretrained_backbone(seed=0):
    """Warm backbone on auxiliary classes disjoint from the streams."""
    if seed not in _PRETRAINED:
        aux = synth_dataset(8, 30, image_size=16, channels=1, noise=0.05,
                            seed=700 + seed)
        _PRETRAINED[seed] = pretrain_backbone(aux.train_x, aux.train_y, CFG,
                                              epochs=20, seed=seed)
    return _PRETRAINED[seed]


def small_stream(seed=0, n_classes=4, per_class=20, T=2):
    data = synth_dataset(n_classes, per_class, image_size=16, channels=1,
                         noise=0.05, seed=seed)
    return make_stream(data, "CIL", T, seed=seed)


def small_config(**kw):
    defaults = dict(max_tasks=6, max_classes=12, epochs=5, batch_size=8,
                    pseudo_batch=24, head_steps=3, lr=0.01, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestTrainTask:
    def test_out_of_order_task(self):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        stream = small_stream()
        with pytest.raises(RuntimeError):
            model.train_task(2, stream.tasks[1].train_x, stream.tasks[1].train_y)

    def test_stats_bookkeeping(self):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        stream = small_stream()
        t1 = stream.tasks[0]
        model.train_task(1, t1.train_x, t1.train_y)
        assert len(model.stats.uninstructed) == len(t1.classes)
        assert len(model.stats.instructed) == len(t1.classes)
        assert model.stats.classes_of(1) == t1.classes
        t2 = stream.tasks[1]
        model.train_task(2, t2.train_x, t2.train_y)
        assert len(model.stats.uninstructed) == len(t1.classes) + len(t2.classes)

    def test_frozen_prompts_unchanged_by_later_tasks(self):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        stream = small_stream()
        model.train_task(1, stream.tasks[0].train_x, stream.tasks[0].train_y)
        sums = model.pool.frozen_checksums()[0]
        model.train_task(2, stream.tasks[1].train_x, stream.tasks[1].train_y)
        model.pool.verify_frozen()
        assert model.pool.frozen_checksums()[0] == sums

    def test_backbone_untouched_by_training(self):
        bb = frozen_backbone()
        before = bb.frozen_checksum
        model = HidePrompt(bb, PLAN, small_config())
        stream = small_stream()
        model.train_task(1, stream.tasks[0].train_x, stream.tasks[0].train_y)
        assert bb.checksum() == before

    def test_stats_of_old_tasks_immutable(self):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        stream = small_stream()
        model.train_task(1, stream.tasks[0].train_x, stream.tasks[0].train_y)
        u1 = model.stats.checksum("u", model.stats.classes_of(1))
        i1 = model.stats.checksum("i", model.stats.classes_of(1))
        model.train_task(2, stream.tasks[1].train_x, stream.tasks[1].train_y)
        assert model.stats.checksum("u", model.stats.classes_of(1)) == u1
        assert model.stats.checksum("i", model.stats.classes_of(1)) == i1

    def test_within_task_accuracy_after_first_task(self):
        for seed in (0, 1, 2):
            model = HidePrompt(pretrained_backbone(seed), PLAN,
                               small_config(seed=seed, epochs=8))
            stream = small_stream(seed=seed)
            task = stream.tasks[0]
            model.train_task(1, task.train_x, task.train_y)
            _, pred = model.predict_batch(task.test_x)
            acc = np.mean(pred == task.test_y)
            assert acc >= 0.95, f"seed {seed}: {acc}"


class TestPredict:
    def test_single_task_always_task_one(self):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        stream = small_stream()
        task = stream.tasks[0]
        model.train_task(1, task.train_x, task.train_y)
        tasks, _ = model.predict_batch(task.test_x)
        assert np.all(tasks == 1)

    def test_untrained_model_rejects_predict(self):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        with pytest.raises(RuntimeError):
            model.predict(np.zeros((16, 16, 1), dtype=np.float32))

    def test_hand_built_omega_dominant_logit(self):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        stream = small_stream()
        for t in (1, 2):
            task = stream.tasks[t - 1]
            model.train_task(t, task.train_x, task.train_y)
        model.heads.omega.w[:] = 0.0
        model.heads.omega.b[:] = 0.0
        model.heads.omega.b[1] = 10.0  # dominant logit for task 2
        ti, _ = model.predict(stream.tasks[0].test_x[0])
        assert ti == 2

    def test_prediction_matches_exhaustive_oracle(self):
        data = synth_dataset(10, 12, image_size=16, channels=1, noise=0.05,
                             seed=5)
        stream = make_stream(data, "CIL", 5, seed=5)
        model = HidePrompt(frozen_backbone(5), PLAN,
                           small_config(max_tasks=5, max_classes=10, epochs=3,
                                        seed=5))
        for t, task in enumerate(stream.tasks, start=1):
            model.train_task(t, task.train_x, task.train_y)
        xs = np.concatenate([t.test_x for t in stream.tasks])
        tasks, labels = model.predict_batch(xs)
        active = model.heads.active_classes
        for x, ti, lab in zip(xs, tasks, labels):
            u = forward_uninstructed(model.backbone, x)
            logits = model.heads.omega.logits(u.astype(np.float64))[:5]
            oracle_task = int(np.argmax(logits)) + 1
            reps = model._instructed(x[None], model.final_prompts[oracle_task - 1])
            cls_logits = model.heads.psi.logits(reps.astype(np.float64))[0, active]
            oracle_label = active[int(np.argmax(cls_logits))]
            assert ti == oracle_task and lab == oracle_label

    def test_labels_inside_active_set(self):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        stream = small_stream()
        for t in (1, 2):
            task = stream.tasks[t - 1]
            model.train_task(t, task.train_x, task.train_y)
        rng = np.random.default_rng(0)
        noise_imgs = rng.uniform(0, 1, (20, 16, 16, 1)).astype(np.float32)
        _, labels = model.predict_batch(noise_imgs)
        assert set(labels.tolist()) <= set(model.heads.active_classes)


class TestKeyMatch:
    def test_exact_key_match(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert key_match_tii(np.array([0.0, 1.0]), keys) == 2

    def test_orthogonal_query_tie_break(self):
        keys = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert key_match_tii(np.array([0.0, 0.0, 1.0]), keys) == 1

    def test_zero_norm_query(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert key_match_tii(np.zeros(2), keys) == 1

    def test_against_brute_force(self):
        rng = np.random.default_rng(1)
        keys = rng.normal(size=(5, 8))
        for _ in range(100):
            q = rng.normal(size=8)
            sims = [q @ k / (np.linalg.norm(q) * np.linalg.norm(k))
                    for k in keys]
            assert key_match_tii(q, keys) == int(np.argmax(sims)) + 1

    def test_naive_pipeline_trains_keys(self):
        cfg = small_config(ablation=AblationConfig(pe=False, tii=False,
                                                   tap=False, cr=False))
        model = HidePrompt(frozen_backbone(), PLAN, cfg)
        stream = small_stream()
        for t in (1, 2):
            task = stream.tasks[t - 1]
            model.train_task(t, task.train_x, task.train_y)
        assert len(model.pool.keys) == 2
        tasks, labels = model.predict_batch(stream.tasks[0].test_x)
        # per-task masking: labels must come from the predicted task's classes
        for ti, lab in zip(tasks, labels):
            assert lab in model.stats.classes_of(int(ti))


class TestCka:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(2).normal(size=(50, 8))
        assert cka(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(60, 6))
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert cka(x, x @ q) == pytest.approx(1.0, abs=1e-9)

    def test_independent_inputs_near_zero(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(500, 16))
        y = rng.normal(size=(500, 16))
        assert cka(x, y) < 0.1

    def test_zero_variance_warns(self):
        with pytest.warns(UserWarning):
            assert cka(np.ones((5, 3)), np.random.default_rng(5).normal(size=(5, 3))) == 0.0


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        model = HidePrompt(frozen_backbone(), PLAN, small_config())
        stream = small_stream()
        for t in (1, 2):
            task = stream.tasks[t - 1]
            model.train_task(t, task.train_x, task.train_y)
        path = tmp_path / "model.hide"
        save_model(model, path)
        back = load_model(path)
        xs = np.concatenate([t.test_x for t in stream.tasks])
        t0, l0 = model.predict_batch(xs)
        t1, l1 = back.predict_batch(xs)
        np.testing.assert_array_equal(t0, t1)
        np.testing.assert_array_equal(l0, l1)

    def test_embedding_mode_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        bb = Backbone.embedding_mode(8)
        cfg = small_config(max_tasks=3, max_classes=6)
        model = HidePrompt(bb, None, cfg)
        vecs = np.concatenate([rng.normal(size=(30, 8)) + 4 * np.eye(8)[c]
                               for c in range(4)]).astype(np.float32)
        ys = np.repeat([0, 1, 2, 3], 30)
        model.train_task(1, vecs[:60], ys[:60])
        model.train_task(2, vecs[60:], ys[60:])
        path = tmp_path / "emb.hide"
        save_model(model, path)
        back = load_model(path)
        t0, l0 = model.predict_batch(vecs)
        t1, l1 = back.predict_batch(vecs)
        np.testing.assert_array_equal(l0, l1)
        np.testing.assert_array_equal(t0, t1)


class TestDeterminism:
    def test_same_seed_same_metrics(self):
        results = []
        for _ in range(2):
            model = HidePrompt(frozen_backbone(3), PLAN, small_config(seed=3))
            stream = small_stream(seed=3)
            from hidecl.harness import accuracy_matrix
            a = accuracy_matrix(model, stream)
            results.append(a.tobytes())
        assert results[0] == results[1]


class TestAblationRunner:
    def test_single_row_single_seed(self):
        rows = run_ablation(
            [AblationConfig()], [0],
            stream_fn=lambda s: small_stream(seed=s),
            backbone_fn=lambda s: frozen_backbone(s),
            plan=PLAN, config=small_config(epochs=3))
        assert len(rows) == 1
        assert 0.0 <= rows[0]["mean_faa"] <= 1.0
        assert len(rows[0]["faa"]) == 1

    def test_naive_row_definition(self):
        abl = AblationConfig(pe=False, tii=False, tap=False, cr=False)
        assert abl.label() == "naive"
        assert AblationConfig().label() == "WTP+TII+TAP w/ CR"
        assert AblationConfig(cr=False).label() == "WTP+TII+TAP"
        # TAP off forces CR off
        forced = AblationConfig(pe=True, tii=False, tap=False, cr=True)
        assert not forced.cr
