"""
Pipeline orchestrator for deliberated domain bridging.

Every round trains two path teachers by dual-path domain bridging (region
mix and class mix), summarises them with target prototypes, distils both
into the student, evaluates, and checkpoints. From round 2 on the path
models restart from the previous student.

Also houses the source-only, target-oracle and single-path baselines.
"""
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from bridging import EmaTeacher, PathConfig, dpdb_stage
from checkpoint import model_checkpoint, prototype_checkpoint, save_checkpoint
from ckd import compute_centroids, ckd_stage
from config import ExperimentConfig, OptimizerConfig, RoundPlan
from database import RunHistoryDB
from dataset import CyclicIndex, TrainingData
from evaluation import EvalSummary, Evaluator
from mixing import labels_to_onehot
from model import ArchSpec, SegModel, copy_params, forward, init_model, make_optimizer, optimizer_step
from numerics import RngState, backward, softmax, weighted_cross_entropy
from utils import (
    ArgumentError, ConfigurationError, TrainingError, StepLogger, ensure_directory_exists, get_logger, save_json,
)

logger = get_logger(__name__)

MODEL_NAMES = ("region", "class", "student")
STAGES = ("dpdb_region", "dpdb_class", "prototypes", "ckd")
SUPERVISED_LOG_COLUMNS = ["step", "loss_src", "lr"]


def stage_rng(seed: int, round_index: int, stage: str) -> RngState:
    """Random state of one stage; independent of every other stage and round."""
    return RngState(seed).child(f"round{round_index}/{stage}")


def init_run_models(arch: ArchSpec, num_classes: int, seed: int) -> Dict[str, SegModel]:
    """Fresh region-path, class-path and student models from independent streams."""
    root = RngState(seed)
    return {name: init_model(arch, num_classes, root.child(f"init/{name}")) for name in MODEL_NAMES}


def _optimizer(cfg: OptimizerConfig, steps: int):
    return make_optimizer(
        lr_head=cfg.lr_head,
        lr_backbone=cfg.lr_backbone,
        weight_decay=cfg.weight_decay,
        total_steps=steps,
        warmup_fraction=cfg.warmup_fraction,
    )


@dataclass
class RoundReport:
    """Evaluation summaries of one round, keyed by 'region', 'class', 'student'."""
    round_index: int
    summaries: Dict[str, EvalSummary] = field(default_factory=dict)

    def miou(self, model_name: str) -> float:
        return self.summaries[model_name].mean_miou

    def to_dict(self) -> Dict:
        return {
            "round": self.round_index,
            "models": {name: summary.to_dict() for name, summary in self.summaries.items()},
        }


@dataclass
class DDBResult:
    student: SegModel
    reports: List[RoundReport]
    teachers: Dict[str, SegModel] = field(default_factory=dict)


class DDBPipeline:
    """Orchestrates the alternating bridging / distillation rounds."""

    def __init__(
        self,
        plan: RoundPlan,
        data: TrainingData,
        arch: Optional[ArchSpec] = None,
        optimizer: Optional[OptimizerConfig] = None,
        output_dir: Optional[str] = None,
        eval_batch_size: int = 16,
        progress: bool = False,
        run_name: str = "ddb",
    ):
        """Initialize the pipeline; nothing is written unless ``output_dir`` is given."""
        self.plan = plan
        self.data = data
        self.arch = arch or ArchSpec(num_classes=data.num_classes)
        if data.num_classes and self.arch.num_classes != data.num_classes:
            raise ConfigurationError(
                f"Architecture has {self.arch.num_classes} classes, dataset has {data.num_classes}"
            )
        self.optimizer = optimizer or OptimizerConfig()
        self.output_dir = output_dir
        self.progress = progress
        self.run_name = run_name
        self.evaluator = Evaluator(self.arch.num_classes, data.class_names or None, eval_batch_size)
        self.history = None
        self._stage_index = 0
        if output_dir is not None:
            ensure_directory_exists(output_dir)
            self.history = RunHistoryDB(str(Path(output_dir) / "run_history.db"))

    def _round_dir(self, round_index: int) -> Optional[Path]:
        if self.output_dir is None:
            return None
        path = Path(self.output_dir) / f"round_{round_index}"
        ensure_directory_exists(str(path))
        return path

    def _log_path(self, round_index: int, stage: str) -> Optional[str]:
        round_dir = self._round_dir(round_index)
        return None if round_dir is None else str(round_dir / f"{stage}.csv")

    def _next_stage(self) -> int:
        self._stage_index += 1
        return self._stage_index

    def _checkpoint(self, model: SegModel, round_index: int, stage: str, stage_index: int) -> None:
        round_dir = self._round_dir(round_index)
        if round_dir is not None:
            ckpt = model_checkpoint(model, self.plan.seed, round_index, stage, stage_index)
            save_checkpoint(str(round_dir / f"{stage}.ckpt"), ckpt)

    def _run_stage(self, round_index: int, stage: str, fn: Callable):
        try:
            return fn()
        except (TrainingError, ConfigurationError, ArgumentError) as e:
            raise type(e)(f"Round {round_index}, stage {stage}: {e}") from e

    def dpdb_phase(self, round_index: int, path_models: Dict[str, SegModel]) -> Dict[str, EmaTeacher]:
        """Phase 1: train both bridging paths, each with its own EMA teacher."""
        logger.info(f"🌉 Phase 1: Dual-path domain bridging (round {round_index})")
        teachers = {}
        for name, cfg in (("region", self.plan.region), ("class", self.plan.class_path)):
            stage = f"dpdb_{name}"
            start_time = time.time()
            model = path_models[name]
            teacher = EmaTeacher.from_student(model, cfg.alpha)
            self._run_stage(round_index, stage, lambda: dpdb_stage(
                model, teacher, self.data, cfg,
                stage_rng(self.plan.seed, round_index, stage),
                optimizer=_optimizer(self.optimizer, cfg.steps),
                log_path=self._log_path(round_index, stage),
                progress=self.progress,
            ))
            stage_index = self._next_stage()
            self._checkpoint(self._ckd_teacher(model, teacher), round_index, stage, stage_index)
            teachers[name] = teacher
            logger.info(f"✅ {cfg.kind} path completed in {time.time() - start_time:.2f} seconds")
        return teachers

    def _ckd_teacher(self, model: SegModel, teacher: EmaTeacher) -> SegModel:
        return teacher.model if self.plan.ckd_uses_ema else model

    def ckd_phase(
        self,
        round_index: int,
        teachers: Dict[str, SegModel],
        student: SegModel,
    ) -> SegModel:
        """Phase 2: prototypes on the target set, then cross-path distillation."""
        logger.info(f"\n🧪 Phase 2: Cross-path knowledge distillation (round {round_index})")
        start_time = time.time()
        target_images = self.data.target_images
        prototypes = (
            compute_centroids(teachers["region"], target_images),
            compute_centroids(teachers["class"], target_images),
        )
        stage_index = self._next_stage()
        round_dir = self._round_dir(round_index)
        if round_dir is not None:
            dump = prototype_checkpoint({"region": prototypes[0], "class": prototypes[1]}, round_index, stage_index)
            save_checkpoint(str(round_dir / "prototypes.ckpt"), dump)
        for name, protos in zip(("region", "class"), prototypes):
            if np.any(protos.empty):
                logger.warning(f"⚠️ {name} teacher never predicts classes {np.flatnonzero(protos.empty).tolist()}")

        cfg = self.plan.distill
        self._run_stage(round_index, "ckd", lambda: ckd_stage(
            student, teachers["region"], teachers["class"], self.data, cfg,
            stage_rng(self.plan.seed, round_index, "ckd"),
            prototypes=prototypes,
            optimizer=_optimizer(self.optimizer, cfg.steps),
            log_path=self._log_path(round_index, "ckd"),
            progress=self.progress,
        ))
        self._checkpoint(student, round_index, "ckd", self._next_stage())
        logger.info(f"✅ Distillation completed in {time.time() - start_time:.2f} seconds")
        return student

    def evaluation_phase(self, round_index: int, models: Dict[str, SegModel]) -> RoundReport:
        """Phase 3: score teachers and student on every labelled target domain."""
        logger.info(f"\n📊 Phase 3: Evaluating round {round_index}...")
        report = RoundReport(round_index)
        eval_sets = self.data.target_eval_sets()
        if not eval_sets:
            logger.warning("⚠️ No labelled target eval split; skipping evaluation")
            return report
        for name, model in models.items():
            summary = self.evaluator.evaluate_domains(model, eval_sets)
            report.summaries[name] = summary
            if self.history is not None:
                self.history.insert_summary(self.run_name, self.plan.seed, round_index, name, summary)
        round_dir = self._round_dir(round_index)
        if round_dir is not None:
            save_json(report.to_dict(), str(round_dir / "report.json"))
        logger.info(self.evaluator.get_summary(report.summaries["student"], f"ROUND {round_index} STUDENT"))
        return report

    def run(self, models: Optional[Dict[str, SegModel]] = None) -> DDBResult:
        """
        Main execution flow.

        Args:
            models: Initial 'region', 'class' and 'student' models; fresh ones
                from the plan seed by default

        Returns:
            DDBResult with the final student and one report per round
        """
        logger.info(f"🚀 Initializing DDB | rounds: {self.plan.rounds} | seed: {self.plan.seed}")
        logger.info("=" * 60)
        pipeline_start = time.time()
        models = models or init_run_models(self.arch, self.arch.num_classes, self.plan.seed)
        path_models = {"region": models["region"], "class": models["class"]}
        student = models["student"]
        reports: List[RoundReport] = []
        ckd_teachers: Dict[str, SegModel] = {}

        for round_index in range(1, self.plan.rounds + 1):
            if round_index > 1:
                for model in path_models.values():
                    copy_params(student, model)
            ema = self.dpdb_phase(round_index, path_models)
            ckd_teachers = {name: self._ckd_teacher(path_models[name], ema[name]) for name in path_models}
            student = self.ckd_phase(round_index, ckd_teachers, student)
            reports.append(self.evaluation_phase(round_index, {**ckd_teachers, "student": student}))

        logger.info(f"\n✅ Pipeline completed in {time.time() - pipeline_start:.2f} seconds")
        return DDBResult(student=student, reports=reports, teachers=ckd_teachers)


def run_ddb(
    plan: RoundPlan,
    data: TrainingData,
    arch: Optional[ArchSpec] = None,
    optimizer: Optional[OptimizerConfig] = None,
    output_dir: Optional[str] = None,
    progress: bool = False,
    eval_batch_size: int = 16,
    run_name: str = "ddb",
) -> DDBResult:
    """External entry point for a full DDB run."""
    pipeline = DDBPipeline(
        plan=plan,
        data=data,
        arch=arch,
        optimizer=optimizer,
        output_dir=output_dir,
        eval_batch_size=eval_batch_size,
        progress=progress,
        run_name=run_name,
    )
    return pipeline.run()


def run_experiment(config: ExperimentConfig, data: TrainingData, output_dir: Optional[str] = None) -> DDBResult:
    """Run DDB with every setting taken from an ExperimentConfig."""
    return run_ddb(
        plan=config.plan,
        data=data,
        arch=config.arch,
        optimizer=config.optimizer,
        output_dir=output_dir,
        progress=config.show_progress,
        eval_batch_size=config.eval_batch_size,
    )


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _supervised_loop(
    model: SegModel,
    draw: Callable[[int], Tuple[np.ndarray, np.ndarray]],
    steps: int,
    batch_size: int,
    optimizer_cfg: OptimizerConfig,
    log_path: Optional[str],
    progress: bool,
    desc: str,
) -> SegModel:
    optimizer = _optimizer(optimizer_cfg, steps)
    step_log = StepLogger(log_path, SUPERVISED_LOG_COLUMNS)
    k = model.num_classes
    for step in tqdm(range(1, steps + 1), desc=desc, disable=not progress):
        x, y = draw(batch_size)
        model.zero_grad()
        _, logits = forward(model, x)
        loss = weighted_cross_entropy(softmax(logits), labels_to_onehot(y, k), None, "mean")
        backward(loss)
        optimizer_step(model, optimizer)
        step_log.log(step=step, loss_src=loss.item(), lr=optimizer.lr_for("classifier.weight", optimizer.step))
    step_log.close()
    return model


def train_source_only(
    data: TrainingData,
    arch: Optional[ArchSpec] = None,
    steps: int = 2000,
    batch_size: int = 4,
    seed: int = 0,
    optimizer: Optional[OptimizerConfig] = None,
    log_path: Optional[str] = None,
    progress: bool = False,
) -> SegModel:
    """Supervised training on the source domains only (lower reference)."""
    arch = arch or ArchSpec(num_classes=data.num_classes)
    root = RngState(seed)
    model = init_model(arch, data.num_classes, root.child("init/source_only"))
    sampler = data.stage_sampler(root.child("source_only").stream("batches"))
    return _supervised_loop(model, sampler.next_source, steps, batch_size,
                            optimizer or OptimizerConfig(), log_path, progress, "source-only")


def train_target_oracle(
    data: TrainingData,
    arch: Optional[ArchSpec] = None,
    steps: int = 2000,
    batch_size: int = 4,
    seed: int = 0,
    optimizer: Optional[OptimizerConfig] = None,
    log_path: Optional[str] = None,
    progress: bool = False,
) -> SegModel:
    """Supervised training on labelled target images (upper reference)."""
    if data.oracle is None or data.oracle.labels is None:
        raise ArgumentError("Dataset has no labelled target training images (set oracle_count)")
    arch = arch or ArchSpec(num_classes=data.num_classes)
    root = RngState(seed)
    model = init_model(arch, data.num_classes, root.child("init/oracle"))
    index = CyclicIndex(len(data.oracle), root.child("oracle").stream("batches"))

    def draw(batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
        picks = [index.next() for _ in range(batch_size)]
        return data.oracle.images[picks], data.oracle.labels[picks]

    return _supervised_loop(model, draw, steps, batch_size,
                            optimizer or OptimizerConfig(), log_path, progress, "oracle")


def run_single_path(
    data: TrainingData,
    cfg: PathConfig,
    arch: Optional[ArchSpec] = None,
    seed: int = 0,
    optimizer: Optional[OptimizerConfig] = None,
    log_path: Optional[str] = None,
    progress: bool = False,
    init: Optional[SegModel] = None,
) -> EmaTeacher:
    """
    Train one bridging path on its own (any kind, including 'interpolation' and 'none').

    Returns:
        The path's EMA teacher after the stage
    """
    arch = arch or ArchSpec(num_classes=data.num_classes)
    model = init or init_model(arch, data.num_classes, RngState(seed).child(f"init/{cfg.kind}"))
    teacher = EmaTeacher.from_student(model, cfg.alpha)
    dpdb_stage(
        model, teacher, data, cfg, RngState(seed).child(f"single/{cfg.kind}"),
        optimizer=_optimizer(optimizer or OptimizerConfig(), cfg.steps),
        log_path=log_path,
        progress=progress,
    )
    return teacher


def run_self_training_baseline(
    data: TrainingData,
    cfg: Optional[PathConfig] = None,
    arch: Optional[ArchSpec] = None,
    seed: int = 0,
    optimizer: Optional[OptimizerConfig] = None,
    log_path: Optional[str] = None,
    progress: bool = False,
) -> EmaTeacher:
    """Mean-teacher pseudo-label self-training without any cross-domain mixing."""
    cfg = cfg or PathConfig(kind="none")
    if cfg.kind != "none":
        raise ArgumentError(f"Self-training baseline needs kind='none', got '{cfg.kind}'")
    return run_single_path(data, cfg, arch, seed, optimizer, log_path, progress)
