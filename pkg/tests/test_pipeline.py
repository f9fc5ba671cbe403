import json

import numpy as np
import pytest

import pipeline
from benchmark import CONTEXT_PAIR, LAYOUT_PAIR, generate_benchmark
from bridging import EmaTeacher, PathConfig, dpdb_stage
from checkpoint import load_checkpoint
from ckd import DistillConfig, ckd_stage
from config import (
    DomainSpec, ExperimentConfig, OptimizerConfig, RoundPlan, config_from_dict, load_config, save_config,
)
from dataset import DomainData, load_dataset
from evaluation import Evaluator
from model import ArchSpec, init_model
from numerics import RngState
from pipeline import (
    DDBPipeline, init_run_models, run_ddb, run_experiment, run_self_training_baseline, run_single_path,
    stage_rng, train_source_only, train_target_oracle,
)
from tests.conftest import make_tiny_data
from utils import ArgumentError, ConfigurationError, TrainingError


def _plan(rounds=1, seed=0, steps=2, ckd_steps=2, **distill):
    return RoundPlan(
        rounds=rounds,
        seed=seed,
        region=PathConfig(kind="region", steps=steps, batch_size=2),
        class_path=PathConfig(kind="class", steps=steps, batch_size=2),
        distill=DistillConfig(steps=ckd_steps, batch_size=2, **distill),
    )


def _same_params(a, b):
    return all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


class TestRun:
    def test_single_round_equals_manual_composition(self, tiny_arch, tiny_data):
        plan = _plan(seed=4)
        result = run_ddb(plan, tiny_data, arch=tiny_arch)

        models = init_run_models(tiny_arch, 3, 4)
        t_region = EmaTeacher.from_student(models["region"], plan.region.alpha)
        t_class = EmaTeacher.from_student(models["class"], plan.class_path.alpha)
        dpdb_stage(models["region"], t_region, tiny_data, plan.region, stage_rng(4, 1, "dpdb_region"))
        dpdb_stage(models["class"], t_class, tiny_data, plan.class_path, stage_rng(4, 1, "dpdb_class"))
        student = ckd_stage(models["student"], t_region.model, t_class.model, tiny_data, plan.distill,
                            stage_rng(4, 1, "ckd"))

        assert _same_params(result.student, student)
        assert _same_params(result.teachers["region"], t_region.model)
        assert _same_params(result.teachers["class"], t_class.model)
        assert len(result.reports) == 1
        assert set(result.reports[0].summaries) == {"region", "class", "student"}

    def test_fixed_seed_is_bitwise_reproducible(self, tiny_arch, tiny_data, tmp_path):
        for name in ("a", "b"):
            run_ddb(_plan(rounds=2, seed=1), tiny_data, arch=tiny_arch, output_dir=str(tmp_path / name))
        for rel in ("round_1/ckd.ckpt", "round_2/ckd.ckpt", "round_2/dpdb_class.ckpt",
                    "round_2/prototypes.ckpt", "round_2/report.json", "round_2/ckd.csv"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_different_seeds_differ(self, tiny_arch, tiny_data):
        a = run_ddb(_plan(seed=1), tiny_data, arch=tiny_arch)
        b = run_ddb(_plan(seed=2), tiny_data, arch=tiny_arch)
        assert not _same_params(a.student, b.student)

    def test_stage_order_and_outputs(self, tiny_arch, tiny_data, tmp_path):
        result = run_ddb(_plan(rounds=2), tiny_data, arch=tiny_arch, output_dir=str(tmp_path), run_name="order")
        expected = {"dpdb_region": 1, "dpdb_class": 2, "prototypes": 3, "ckd": 4}
        for r in (1, 2):
            for stage, index in expected.items():
                ckpt = load_checkpoint(str(tmp_path / f"round_{r}" / f"{stage}.ckpt"))
                assert ckpt.stage == stage
                assert ckpt.round_index == r
                assert ckpt.stage_index == index + 4 * (r - 1)
            for stage in ("dpdb_region", "dpdb_class", "ckd"):
                assert (tmp_path / f"round_{r}" / f"{stage}.csv").exists()
            report = json.loads((tmp_path / f"round_{r}" / "report.json").read_text(encoding="utf-8"))
            assert report["round"] == r and set(report["models"]) == {"region", "class", "student"}
        history = pipeline.RunHistoryDB(str(tmp_path / "run_history.db")).get_all_results_df()
        assert len(history) == 6
        assert set(history["run_name"]) == {"order"}
        assert [r.round_index for r in result.reports] == [1, 2]

    def test_later_rounds_restart_paths_from_student(self, tiny_arch, tiny_data, tmp_path):
        plan = _plan(rounds=2, steps=0, ckd_steps=2)
        result = run_ddb(plan, tiny_data, arch=tiny_arch, output_dir=str(tmp_path))
        round1_student = load_checkpoint(str(tmp_path / "round_1" / "ckd.ckpt")).tensors
        for name, p in result.teachers["region"].params.items():
            assert np.array_equal(p.data, round1_student[name])
            assert np.array_equal(result.teachers["class"].params[name].data, round1_student[name])

    def test_raw_path_models_as_ckd_teachers(self, tiny_arch, tiny_data):
        plan = _plan()
        plan.ckd_uses_ema = False
        result = run_ddb(plan, tiny_data, arch=tiny_arch)
        models = init_run_models(tiny_arch, 3, 0)
        dpdb_stage(models["region"], EmaTeacher.from_student(models["region"]), tiny_data, plan.region,
                   stage_rng(0, 1, "dpdb_region"))
        assert _same_params(result.teachers["region"], models["region"])

    def test_stage_errors_carry_context(self, tiny_arch, tiny_data, monkeypatch):
        def explode(*args, **kwargs):
            raise TrainingError("loss became NaN")

        monkeypatch.setattr(pipeline, "dpdb_stage", explode)
        with pytest.raises(TrainingError, match="Round 1, stage dpdb_region: loss became NaN"):
            run_ddb(_plan(), tiny_data, arch=tiny_arch)

    def test_class_count_mismatch(self, tiny_data):
        arch = ArchSpec(widths=(4, 4), strides=(2, 2), num_classes=5, input_size=(8, 8))
        with pytest.raises(ConfigurationError):
            DDBPipeline(_plan(), tiny_data, arch=arch)

    def test_multi_source_and_multi_target(self, tiny_arch):
        data = make_tiny_data(sources=2)
        gen = np.random.default_rng(9)
        data.targets.append(DomainData("target1", "target", gen.uniform(size=(3, 8, 8, 3))))
        data.eval_sets["target1"] = DomainData("target1", "target", gen.uniform(size=(2, 8, 8, 3)),
                                               gen.integers(0, 3, size=(2, 8, 8)))
        result = run_ddb(_plan(), data, arch=tiny_arch)
        summary = result.reports[0].summaries["student"]
        assert list(summary.reports) == ["target0", "target1"]
        assert summary.mean_miou == pytest.approx(np.mean([r.miou for r in summary.reports.values()]))
        assert len(data.target_images) == 6 + 3

    def test_run_experiment_uses_config(self, tiny_arch, tiny_data, tmp_path):
        config = ExperimentConfig(arch=tiny_arch, plan=_plan(seed=3))
        result = run_experiment(config, tiny_data, output_dir=str(tmp_path))
        direct = run_ddb(_plan(seed=3), tiny_data, arch=tiny_arch)
        assert _same_params(result.student, direct.student)


class TestBaselines:
    def test_source_only_learns_something(self, tiny_arch, tiny_data, tmp_path):
        before = init_model(tiny_arch, 3, RngState(0).child("init/source_only"))
        log_path = tmp_path / "source_only.csv"
        model = train_source_only(tiny_data, tiny_arch, steps=3, batch_size=2, log_path=str(log_path))
        assert not _same_params(model, before)
        assert len(log_path.read_text(encoding="utf-8").splitlines()) == 4

    def test_oracle_needs_labelled_targets(self, tiny_arch, tiny_data):
        with pytest.raises(ArgumentError):
            train_target_oracle(tiny_data, tiny_arch, steps=1)
        gen = np.random.default_rng(0)
        tiny_data.oracle = DomainData("target0", "target", gen.uniform(size=(3, 8, 8, 3)),
                                      gen.integers(0, 3, size=(3, 8, 8)))
        model = train_target_oracle(tiny_data, tiny_arch, steps=2, batch_size=2)
        assert model.num_classes == 3

    @pytest.mark.parametrize("kind", ["region", "class", "interpolation", "none"])
    def test_single_path_kinds(self, tiny_arch, tiny_data, kind):
        teacher = run_single_path(tiny_data, PathConfig(kind=kind, steps=2, batch_size=2), tiny_arch, seed=1)
        assert isinstance(teacher, EmaTeacher)
        report = Evaluator(3).evaluate(teacher.model, tiny_data.eval_sets["target0"])
        assert 0.0 <= report.miou <= 1.0

    def test_self_training_requires_plain_kind(self, tiny_arch, tiny_data):
        with pytest.raises(ArgumentError):
            run_self_training_baseline(tiny_data, PathConfig(kind="region", steps=1), tiny_arch)
        teacher = run_self_training_baseline(tiny_data, PathConfig(kind="none", steps=1, batch_size=2), tiny_arch)
        assert not any(p.requires_grad for p in teacher.model.params.values())


class TestConfig:
    def test_defaults(self):
        config = ExperimentConfig()
        assert config.plan.rounds == 2
        assert config.plan.region.tau == 0.968 and config.plan.region.alpha == 0.99
        assert config.plan.distill.mode == "hard" and config.plan.distill.ensemble == "adaptive"
        assert [d.role for d in config.domains] == ["source", "target"]
        assert config.optimizer == OptimizerConfig()

    def test_round_trip(self, tmp_path):
        config = config_from_dict({
            "arch": {"widths": [4, 8], "strides": [2, 2], "input_size": [16, 16]},
            "plan": {"rounds": 3, "seed": 5, "distill": {"mode": "soft", "augment": {"blur_sigma": [0.1, 0.5]}}},
            "domains": [
                {"name": "gta", "role": "source"},
                {"name": "synthia", "role": "source", "palette_id": 2},
                {"name": "city", "role": "target", "oracle_count": 10, "context_rule_id": 1},
            ],
        })
        assert config.arch.widths == (4, 8)
        assert config.plan.distill.augment.blur_sigma == (0.1, 0.5)
        assert [d.name for d in config.source_domains()] == ["gta", "synthia"]
        path = tmp_path / "config.json"
        save_config(config, str(path))
        assert load_config(str(path)).to_dict() == config.to_dict()

    @pytest.mark.parametrize("data", [
        {"rounds": 2},
        {"plan": {"region": {"tua": 0.9}}},
        {"plan": {"distill": {"augment": {"hue": 0.1}}}},
        {"arch": {"depth": 3}},
        {"domains": [{"name": "a", "role": "source", "colour": 1}]},
        {"plan": {"rounds": 0}},
        {"domains": [{"name": "a", "role": "source"}]},
        {"domains": [{"name": "a", "role": "source"}, {"name": "a", "role": "target"}]},
        {"domains": [{"name": "a", "role": "source", "oracle_count": 3}, {"name": "b", "role": "target"}]},
        {"domains": [{"name": "a", "role": "observer"}, {"name": "b", "role": "target"}]},
        {"plan": "fast"},
        {"plan": {"region": [["kind", "region"]]}},
        {"optimizer": 3},
        [["plan", {}]],
    ])
    def test_rejects_invalid(self, data):
        with pytest.raises(ConfigurationError):
            config_from_dict(data)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{oops", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_config(str(path))

    def test_progress_follows_environment(self, monkeypatch):
        monkeypatch.setenv("DDB_PROGRESS", "1")
        assert ExperimentConfig().show_progress
        monkeypatch.setenv("DDB_PROGRESS", "0")
        assert not ExperimentConfig().show_progress
        assert ExperimentConfig(progress=True).show_progress


# ---------------------------------------------------------------------------
# End-to-end trends on the synthetic benchmark (minutes of CPU each)
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)


def _benchmark(tmp_path_factory, seed):
    domains = [
        DomainSpec(name="synth", role="source", sample_count=200, eval_count=50),
        DomainSpec(name="real", role="target", sample_count=200, eval_count=50, oracle_count=200,
                   palette_id=1, context_rule_id=1),
    ]
    out = tmp_path_factory.mktemp(f"bench{seed}")
    generate_benchmark(domains, str(out), RngState(seed).child("data"), (64, 64))
    return load_dataset(str(out))


def _score(model, data):
    return Evaluator(6).evaluate_domains(model, data.target_eval_sets()).mean_miou


@pytest.mark.slow
def test_domain_shift_is_real(tmp_path_factory):
    data = _benchmark(tmp_path_factory, 0)
    source_only = _score(train_source_only(data, steps=2000, seed=0), data)
    oracle = _score(train_target_oracle(data, steps=2000, seed=0), data)
    assert source_only < 0.60
    assert oracle > 0.90


@pytest.mark.slow
def test_bridging_and_distillation_trends(tmp_path_factory):
    region_wins_context, class_wins_layout = 0, 0
    for seed in SEEDS:
        data = _benchmark(tmp_path_factory, seed)
        source_only = _score(train_source_only(data, steps=2000, seed=seed), data)
        plan = RoundPlan(rounds=2, seed=seed)
        result = run_ddb(plan, data)
        first = result.reports[0]
        teachers = [first.miou("region"), first.miou("class")]
        assert min(teachers) >= source_only + 0.10
        assert first.miou("student") >= max(teachers) - 0.005
        assert first.miou("student") >= np.mean(teachers)
        assert result.reports[1].miou("student") >= first.miou("student") - 0.005

        reports = {name: s.reports["real"] for name, s in first.summaries.items()}
        evaluator = Evaluator(6)
        if evaluator.pair_iou(reports["region"], CONTEXT_PAIR) > evaluator.pair_iou(reports["class"], CONTEXT_PAIR):
            region_wins_context += 1
        if evaluator.pair_iou(reports["class"], LAYOUT_PAIR) > evaluator.pair_iou(reports["region"], LAYOUT_PAIR):
            class_wins_layout += 1
    assert region_wins_context >= 2
    assert class_wins_layout >= 2


@pytest.mark.slow
def test_adaptive_ensemble_not_worse_than_uniform(tmp_path_factory):
    gaps = []
    for seed in SEEDS:
        data = _benchmark(tmp_path_factory, seed)
        adaptive = run_ddb(RoundPlan(rounds=1, seed=seed), data).reports[0].miou("student")
        uniform_plan = RoundPlan(rounds=1, seed=seed, distill=DistillConfig(ensemble="uniform"))
        uniform = run_ddb(uniform_plan, data).reports[0].miou("student")
        gaps.append(adaptive - uniform)
    assert np.mean(gaps) >= -0.003


@pytest.mark.slow
def test_duplicated_source_matches_single_source(tmp_path_factory):
    gaps = []
    for seed in SEEDS:
        data = _benchmark(tmp_path_factory, seed)
        plan = RoundPlan(
            rounds=1, seed=seed,
            region=PathConfig(kind="region", steps=1000), class_path=PathConfig(kind="class", steps=1000),
            distill=DistillConfig(steps=1000),
        )
        single = run_ddb(plan, data).reports[0].miou("student")
        src = data.sources[0]
        data.sources.append(DomainData(f"{src.name}_copy", "source", src.images, src.labels))
        duplicated = run_ddb(plan, data).reports[0].miou("student")
        gaps.append(duplicated - single)
    assert abs(np.mean(gaps)) < 0.03
    assert max(abs(g) for g in gaps) < 0.08
