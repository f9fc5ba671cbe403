import math

import numpy as np
import pandas as pd
import pytest

from bridging import (
    DPDB_LOG_COLUMNS, EmaTeacher, PathConfig, build_bridging_batch, build_weight_map, confident_ratio,
    dpdb_stage, ema_update, make_pseudo_labels, path_loss, path_loss_terms, pseudo_labels_from_logits,
)
from mixing import MixedSample, apply_local_mix, labels_to_onehot
from model import clone_model, forward, init_model, make_optimizer
from numerics import RngState, softmax, weighted_cross_entropy
from utils import ArgumentError, ConfigurationError


def _loop_ce(probs, labels, weights):
    total = 0.0
    for index in np.ndindex(labels.shape):
        total -= weights[index] * math.log(max(probs[index][labels[index]], 1e-12))
    return total


class TestEma:
    def test_closed_form(self, tiny_arch):
        student = init_model(tiny_arch, None, RngState(1))
        teacher = EmaTeacher(init_model(tiny_arch, None, RngState(2)), alpha=0.99)
        phi = {n: p.data.copy() for n, p in teacher.model.params.items()}
        theta = {n: p.data.copy() for n, p in student.params.items()}
        done = 0
        for n_steps in (1, 10, 100):
            while done < n_steps:
                ema_update(teacher, student)
                done += 1
            for name, p in teacher.model.params.items():
                expected = theta[name] + 0.99 ** n_steps * (phi[name] - theta[name])
                np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-12)

    def test_alpha_zero_copies_and_alpha_one_freezes(self, tiny_arch):
        student = init_model(tiny_arch, None, RngState(1))
        start = init_model(tiny_arch, None, RngState(2))
        copy = EmaTeacher(clone_model(start), alpha=0.0)
        ema_update(copy, student)
        frozen = EmaTeacher(clone_model(start), alpha=1.0)
        ema_update(frozen, student)
        for name in student.params:
            assert np.array_equal(copy.model.params[name].data, student.params[name].data)
            assert np.array_equal(frozen.model.params[name].data, start.params[name].data)

    def test_teacher_never_requires_grad(self, tiny_model):
        teacher = EmaTeacher.from_student(tiny_model)
        assert not any(p.requires_grad for p in teacher.model.params.values())
        assert all(p.requires_grad for p in tiny_model.params.values())

    def test_arch_mismatch(self, tiny_arch):
        teacher = EmaTeacher(init_model(tiny_arch, None, RngState(0)))
        with pytest.raises(ArgumentError):
            ema_update(teacher, init_model(tiny_arch, 4, RngState(0)))

    def test_invalid_alpha(self, tiny_model):
        with pytest.raises(ArgumentError):
            EmaTeacher(tiny_model, alpha=1.5)


class TestConfidentRatio:
    def test_hand_example(self):
        confidence = np.array([[0.99, 0.5], [0.97, 0.6]])
        assert confident_ratio(confidence, 0.968) == 0.5

    def test_uniform_and_sharp_logits(self):
        flat = pseudo_labels_from_logits(np.zeros((4, 4, 3)), 0.968)
        assert flat.m_t == 0.0
        sharp = np.zeros((4, 4, 3))
        sharp[..., 1] = 50.0
        pack = pseudo_labels_from_logits(sharp, 0.968)
        assert pack.m_t == 1.0
        assert np.all(pack.labels == 1)

    def test_matches_direct_count(self):
        gen = np.random.default_rng(0)
        for _ in range(1000):
            confidence = gen.uniform(0.9, 1.0, size=(5, 6))
            count = 0
            for value in confidence.ravel():
                if value > 0.968:
                    count += 1
            assert confident_ratio(confidence, 0.968) == count / 30

    def test_batched_ratio(self):
        confidence = np.stack([np.full((2, 2), 0.99), np.full((2, 2), 0.5)])
        assert confident_ratio(confidence, 0.968).tolist() == [1.0, 0.0]

    def test_pseudo_labels_record_no_graph(self, tiny_model):
        x_t = np.random.default_rng(0).uniform(size=(2, 8, 8, 3))
        pack = make_pseudo_labels(EmaTeacher.from_student(tiny_model), x_t, 0.968)
        assert pack.labels.shape == (2, 8, 8)
        assert pack.m_t.shape == (2,)
        assert all(p.grad is None for p in tiny_model.params.values())


class TestWeightMap:
    def test_all_ones_mask(self):
        assert np.all(build_weight_map(np.ones((3, 3)), 0.2) == 1.0)

    def test_all_zero_mask(self):
        assert np.all(build_weight_map(np.zeros((3, 3)), 0.37) == 0.37)

    def test_checkerboard(self):
        mask = np.indices((4, 4)).sum(axis=0) % 2
        w = build_weight_map(mask, 0.5)
        for i in range(4):
            for j in range(4):
                assert w[i, j] == (1.0 if mask[i, j] == 1 else 0.5)

    def test_two_values_with_matching_provenance(self):
        gen = np.random.default_rng(1)
        for _ in range(1000):
            mask = (gen.uniform(size=(6, 6)) < 0.4).astype(np.uint8)
            m_t = confident_ratio(gen.uniform(0.9, 1.0, size=(6, 6)), 0.968)
            w = build_weight_map(mask, m_t)
            assert set(np.unique(w)) <= {1.0, m_t}
            assert np.all(w[mask == 1] == 1.0) and np.all(w[mask == 0] == m_t)

    def test_out_of_range(self):
        with pytest.raises(ArgumentError):
            build_weight_map(np.zeros((2, 2)), 1.5)


class TestPathLoss:
    def _batch(self, seed):
        gen = np.random.default_rng(seed)
        x_s = gen.uniform(size=(2, 8, 8, 3))
        y_s = gen.integers(0, 3, size=(2, 8, 8))
        x_t = gen.uniform(size=(2, 8, 8, 3))
        y_t = gen.integers(0, 3, size=(2, 8, 8))
        masks = (gen.uniform(size=(2, 8, 8)) < 0.3).astype(np.uint8)
        mixed = [apply_local_mix(x_s[b], y_s[b], x_t[b], y_t[b], masks[b]) for b in range(2)]
        return x_s, y_s, mixed

    def test_zero_weights_leave_source_term(self, tiny_model):
        x_s, y_s, mixed = self._batch(0)
        loss_src, loss_brg = path_loss_terms(tiny_model, x_s, y_s, mixed, np.zeros((2, 8, 8)))
        assert loss_brg.item() == 0.0
        assert path_loss(tiny_model, x_s, y_s, mixed, np.zeros((2, 8, 8))).item() == loss_src.item()

    def test_degenerate_mix_doubles_source_loss(self, tiny_model):
        x_s, y_s, _ = self._batch(1)
        same = [MixedSample(x_s[b], y_s[b], np.ones((8, 8), dtype=np.uint8), "region") for b in range(2)]
        loss_src, loss_brg = path_loss_terms(tiny_model, x_s, y_s, same, np.ones((2, 8, 8)))
        assert loss_brg.item() == pytest.approx(loss_src.item(), abs=1e-12)

    def test_matches_loop_oracle(self, tiny_model):
        x_s, y_s, mixed = self._batch(2)
        w = np.random.default_rng(3).uniform(size=(2, 8, 8))
        loss = path_loss(tiny_model, x_s, y_s, mixed, w).item()
        probs_src = softmax(forward(tiny_model, x_s)[1]).data
        images = np.stack([m.image for m in mixed])
        labels = np.stack([m.label for m in mixed])
        probs_mix = softmax(forward(tiny_model, images)[1]).data
        expected = _loop_ce(probs_src, y_s, np.ones(y_s.shape)) + _loop_ce(probs_mix, labels, w)
        assert loss == pytest.approx(expected, abs=1e-10)

    def test_interpolation_samples_use_soft_labels(self, tiny_model):
        gen = np.random.default_rng(4)
        x_s = gen.uniform(size=(8, 8, 3))
        y_s = gen.integers(0, 3, size=(8, 8))
        soft = 0.5 * labels_to_onehot(y_s, 3) + 0.5 / 3
        mixed = MixedSample(x_s, soft, None, "interpolation", lam=0.5)
        _, loss_brg = path_loss_terms(tiny_model, x_s, y_s, mixed, np.ones((8, 8)))
        probs = softmax(forward(tiny_model, x_s[None])[1]).data
        expected = weighted_cross_entropy(probs, soft[None]).item()
        assert loss_brg.item() == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self, tiny_model):
        x_s, y_s, mixed = self._batch(5)
        with pytest.raises(ArgumentError):
            path_loss(tiny_model, x_s, y_s, mixed, np.ones((2, 4, 4)))


class TestBridgingBatch:
    def _pack(self, model, x_t, tau=0.968):
        return make_pseudo_labels(model, x_t, tau)

    @pytest.mark.parametrize("kind", ["region", "class", "none"])
    def test_weight_map_values(self, tiny_model, kind):
        gen = np.random.default_rng(0)
        x_s = gen.uniform(size=(3, 8, 8, 3))
        y_s = gen.integers(0, 3, size=(3, 8, 8))
        x_t = gen.uniform(size=(3, 8, 8, 3))
        pack = self._pack(tiny_model, x_t, tau=0.34)
        mixed, weights = build_bridging_batch(PathConfig(kind=kind), x_s, y_s, x_t, pack, 3, gen)
        assert len(mixed) == 3 and weights.shape == (3, 8, 8)
        for b in range(3):
            assert np.all(weights[b][mixed[b].mask == 1] == 1.0)
            assert np.all(weights[b][mixed[b].mask == 0] == pack.m_t[b])
            if kind == "none":
                assert mixed[b].mask.sum() == 0
                assert np.array_equal(mixed[b].image, x_t[b])

    def test_interpolation_weight(self, tiny_model):
        gen = np.random.default_rng(1)
        x_s = gen.uniform(size=(2, 8, 8, 3))
        y_s = gen.integers(0, 3, size=(2, 8, 8))
        x_t = gen.uniform(size=(2, 8, 8, 3))
        pack = self._pack(tiny_model, x_t)
        mixed, weights = build_bridging_batch(PathConfig(kind="interpolation"), x_s, y_s, x_t, pack, 3, gen)
        for b in range(2):
            lam = mixed[b].lam
            assert np.all(weights[b] == lam + (1.0 - lam) * pack.m_t[b])
            assert mixed[b].label.shape == (8, 8, 3)


class TestPathConfig:
    @pytest.mark.parametrize("kwargs", [
        {"kind": "swap"}, {"tau": 1.0}, {"alpha": 1.0}, {"area_ratio": 0.0}, {"steps": -1},
        {"batch_size": 0}, {"reduction": "max"},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            PathConfig(**kwargs)


class TestStage:
    def test_zero_steps_leave_models_unchanged(self, tiny_model, tiny_data):
        before = tiny_model.state_dict()
        teacher = EmaTeacher.from_student(tiny_model)
        cfg = PathConfig(kind="region", steps=0, batch_size=2)
        student, teacher = dpdb_stage(tiny_model, teacher, tiny_data, cfg, RngState(0))
        for name, value in before.items():
            assert np.array_equal(student.params[name].data, value)
            assert np.array_equal(teacher.model.params[name].data, value)

    def test_zero_learning_rate_keeps_teacher_at_student(self, tiny_model, tiny_data):
        before = tiny_model.state_dict()
        teacher = EmaTeacher.from_student(tiny_model)
        cfg = PathConfig(kind="class", steps=3, batch_size=2)
        optimizer = make_optimizer(lr_head=0.0, lr_backbone=0.0, weight_decay=0.0, total_steps=3)
        dpdb_stage(tiny_model, teacher, tiny_data, cfg, RngState(0), optimizer=optimizer)
        for name, value in before.items():
            assert np.array_equal(tiny_model.params[name].data, value)
            np.testing.assert_allclose(teacher.model.params[name].data, value, rtol=1e-14, atol=1e-15)

    def test_short_stage_writes_step_log(self, tiny_model, tiny_data, tmp_path):
        teacher = EmaTeacher.from_student(tiny_model)
        cfg = PathConfig(kind="region", steps=4, batch_size=2)
        log_path = tmp_path / "dpdb.csv"
        dpdb_stage(tiny_model, teacher, tiny_data, cfg, RngState(1), log_path=str(log_path))
        df = pd.read_csv(log_path)
        assert list(df.columns) == DPDB_LOG_COLUMNS
        assert df["step"].tolist() == [1, 2, 3, 4]
        assert df["m_t_mean"].between(0.0, 1.0).all()
        assert np.all(np.isfinite(df[["loss_src", "loss_brg", "lr"]].to_numpy()))
        assert all(p.grad is None for p in teacher.model.params.values())

    def test_teacher_stays_in_hull_of_student_trajectory(self, tiny_model, tiny_data):
        teacher = EmaTeacher.from_student(tiny_model, alpha=0.9)
        trajectory = [tiny_model.state_dict()]
        optimizer = make_optimizer(total_steps=4)
        cfg = PathConfig(kind="region", steps=1, batch_size=2, alpha=0.9)
        for k in range(4):
            dpdb_stage(tiny_model, teacher, tiny_data, cfg, RngState(k), optimizer=optimizer)
            trajectory.append(tiny_model.state_dict())
        for name, p in teacher.model.params.items():
            stacked = np.stack([t[name] for t in trajectory])
            assert np.all(p.data >= stacked.min(axis=0) - 1e-12)
            assert np.all(p.data <= stacked.max(axis=0) + 1e-12)

    def test_same_seed_same_result(self, tiny_arch, tiny_data):
        results = []
        for _ in range(2):
            student = init_model(tiny_arch, None, RngState(3))
            teacher = EmaTeacher.from_student(student)
            cfg = PathConfig(kind="class", steps=2, batch_size=2)
            student, teacher = dpdb_stage(student, teacher, tiny_data, cfg, RngState(5))
            results.append((student.state_dict(), teacher.model.state_dict()))
        for name in results[0][0]:
            assert np.array_equal(results[0][0][name], results[1][0][name])
            assert np.array_equal(results[0][1][name], results[1][1][name])

    def test_arch_mismatch(self, tiny_arch, tiny_data):
        student = init_model(tiny_arch, None, RngState(0))
        teacher = EmaTeacher(init_model(tiny_arch, 4, RngState(0)))
        with pytest.raises(ArgumentError):
            dpdb_stage(student, teacher, tiny_data, PathConfig(steps=1, batch_size=1), RngState(0))
