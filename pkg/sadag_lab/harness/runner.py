"""Stage orchestration: data, teacher, generation, calibration, evaluation and sweeps."""

import itertools
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, replace
from multiprocessing import Pool, cpu_count
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..calibration import (
    calibrate,
    evaluate,
    measure_sharpness_curve,
    random_subset,
    select_subset,
)
from ..calibration.evaluation import EvalReport
from ..datasets import LabeledDataset
from ..errors import ArtifactMismatchError, StageError
from ..nets.teacher import TeacherNet
from ..nets.trainer import train_teacher
from ..quant.quantnet import QuantNet, init_quantnet
from ..seeding import derived_seed
from ..synthesis import SynthDataset, emit_dataset, load_synth_dataset, synthesize
from .config import ExperimentConfig
from .formats import atomic_write_bytes, load_checkpoint, save_checkpoint
from .metrics import MetricsRow, append_rows, format_bits, summarize
from .toy_data import TRAIN_FILE, VAL_FILE, load_labeled, write_toy_dataset

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "sweep_summary.csv"

PathLike = Union[str, Path]


class ExperimentRunner:
    """Runs one configuration, reusing on-disk artifacts whose stage hash matches.

    Artifacts are named by the hash of the fields that produced them, so runs that share a
    prefix of the pipeline (the toy data, the teacher) share files. An explicit artifact path
    whose embedded hash differs from the configuration is refused unless ``force`` is set.

    Args:
        cfg: Validated run configuration
        out_dir: Directory for artifacts and ``metrics.csv``; defaults to ``cfg.out_dir``
        force: Accept artifacts whose stage hash differs from ``cfg``
        teacher_file: Existing teacher checkpoint to use instead of the hashed one
        pool_file: Labeled dataset to select subsets from in ``select`` mode, instead of the
            first ``cfg.pool_size`` validation images
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        out_dir: Optional[PathLike] = None,
        force: bool = False,
        teacher_file: Optional[PathLike] = None,
        pool_file: Optional[PathLike] = None,
    ):
        self.cfg = cfg
        self.out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.force = force
        self.teacher_file = teacher_file
        self.pool_file = pool_file
        self.stage = "setup"

    # -- paths -----------------------------------------------------------------------------------

    @property
    def data_dir(self) -> Path:
        return self.out_dir / f"data-{self.cfg.stage_hash('data')[:12]}"

    @property
    def teacher_path(self) -> Path:
        return self.out_dir / f"teacher-{self.cfg.stage_hash('teacher')[:12]}.sadg"

    @property
    def synth_path(self) -> Path:
        return self.out_dir / f"synth-{self.cfg.stage_hash('generate')[:12]}.sadd"

    @property
    def quant_path(self) -> Path:
        return self.out_dir / f"quant-{self.cfg.stage_hash('calibrate')[:12]}.sadg"

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / METRICS_FILE

    @property
    def run_id(self) -> str:
        return f"{self.cfg.mode}-s{self.cfg.seed}-{self.cfg.stage_hash('calibrate')[:8]}"

    # -- helpers ---------------------------------------------------------------------------------

    @contextmanager
    def stage_scope(self, name: str) -> Iterator[None]:
        """Tag any failure inside the block with the stage name."""
        previous, self.stage = self.stage, name
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        finally:
            self.stage = previous

    def _check_hash(self, path: PathLike, stage: str, found: Optional[str]) -> None:
        expected = self.cfg.stage_hash(stage)
        if found == expected:
            return
        message = f"{path} was built with {stage} hash {found}, configuration has {expected}"
        if not self.force:
            raise ArtifactMismatchError(message + " (pass --force to use it anyway)")
        logger.warning(f"{message}; continuing because of --force")

    def _meta(self, stage: str) -> dict[str, Any]:
        return {
            "seed": int(self.cfg.seed),
            "stage": stage,
            "stage_hash": self.cfg.stage_hash(stage),
        }

    def _bits(self) -> tuple[dict[str, int], dict[str, int]]:
        return self.cfg.bit_maps()

    # -- stages ----------------------------------------------------------------------------------

    def ensure_data(self) -> tuple[LabeledDataset, LabeledDataset]:
        cfg = self.cfg
        with self.stage_scope("data"):
            train_path, val_path = self.data_dir / TRAIN_FILE, self.data_dir / VAL_FILE
            if not (train_path.exists() and val_path.exists()):
                write_toy_dataset(
                    self.data_dir,
                    metadata=self._meta("data"),
                    num_classes=cfg.num_classes,
                    image_size=cfg.image_size,
                    train_size=cfg.train_size,
                    val_size=cfg.val_size,
                    seed=cfg.data_seed,
                )
            return self.load_dataset(train_path, "data"), self.load_dataset(val_path, "data")

    def load_dataset(self, path: PathLike, stage: str = "data") -> LabeledDataset:
        with self.stage_scope(stage):
            ds = load_labeled(path)
            self._check_hash(path, stage, ds.metadata.get("stage_hash"))
            return ds

    def ensure_teacher(
        self, train: Optional[LabeledDataset] = None, val: Optional[LabeledDataset] = None
    ) -> TeacherNet:
        cfg = self.cfg
        if self.teacher_path.exists():
            return self.load_teacher(self.teacher_path)
        if train is None or val is None:
            train, val = self.ensure_data()
        with self.stage_scope("teacher"):
            result = train_teacher(
                train,
                epochs=cfg.teacher_epochs,
                seed=cfg.teacher_seed,
                val=val,
                lr=cfg.teacher_lr,
                batch_size=cfg.teacher_batch,
                floor=cfg.teacher_floor,
                progress=cfg.progress,
            )
            meta = dict(self._meta("teacher"), seed=int(cfg.teacher_seed), accuracy=result.accuracy)
            save_checkpoint(result.net, self.teacher_path, meta)
            logger.info(f"Teacher saved to {self.teacher_path}")
        # later stages always see the float32 values as stored
        return self.load_teacher(self.teacher_path)

    def load_teacher(self, path: PathLike) -> TeacherNet:
        with self.stage_scope("teacher"):
            net, meta = load_checkpoint(path)
            if not isinstance(net, TeacherNet):
                raise ArtifactMismatchError(f"{path} holds a quantized net, not a teacher")
            self._check_hash(path, "teacher", meta.get("stage_hash"))
            return net

    def fresh_quantnet(self, t: TeacherNet) -> QuantNet:
        return init_quantnet(t, *self._bits())

    def ensure_synthetic(self, t: TeacherNet) -> SynthDataset:
        if self.synth_path.exists():
            return self.load_synthetic(self.synth_path)
        with self.stage_scope("generate"):
            q = self.fresh_quantnet(t)
            ds = synthesize(t, q, self.cfg.generation_config(), self.cfg.seed, self.cfg.bn_only)
            ds.provenance.stage_hash = self.cfg.stage_hash("generate")
            emit_dataset(ds, self.synth_path)
        return self.load_synthetic(self.synth_path)

    def load_synthetic(self, path: PathLike) -> SynthDataset:
        with self.stage_scope("generate"):
            ds = load_synth_dataset(path)
            self._check_hash(path, "generate", ds.provenance.stage_hash)
            return ds

    def calibrate_on(
        self, t: TeacherNet, data: Union[LabeledDataset, np.ndarray], seed: Optional[int] = None
    ) -> QuantNet:
        with self.stage_scope("calibrate"):
            q = self.fresh_quantnet(t)
            seed = self.cfg.seed if seed is None else seed
            return calibrate(q, t, data, self.cfg.calib_config(), seed=seed)

    def ensure_quantnet(self, t: TeacherNet, synth: SynthDataset) -> QuantNet:
        if self.quant_path.exists():
            return self.load_quantnet(self.quant_path, t)
        q = self.calibrate_on(t, synth.images)
        with self.stage_scope("calibrate"):
            save_checkpoint(q, self.quant_path, self._meta("calibrate"))
        return self.load_quantnet(self.quant_path, t)

    def load_quantnet(self, path: PathLike, t: TeacherNet) -> QuantNet:
        with self.stage_scope("calibrate"):
            net, meta = load_checkpoint(path, teacher=t)
            if not isinstance(net, QuantNet):
                raise ArtifactMismatchError(f"{path} holds a teacher, not a quantized net")
            self._check_hash(path, "calibrate", meta.get("stage_hash"))
            return net

    def evaluate_on(self, net: Union[TeacherNet, QuantNet], val: LabeledDataset) -> EvalReport:
        with self.stage_scope("evaluate"):
            return evaluate(
                net,
                val,
                rho=self.cfg.rho_eval,
                eval_samples=self.cfg.eval_samples,
                seed=self.cfg.seed,
                config_hash=self.cfg.stage_hash("calibrate"),
            )

    # -- rows ------------------------------------------------------------------------------------

    def row(
        self, report: EvalReport, wall_s: float, mode: Optional[str] = None, suffix: str = ""
    ) -> MetricsRow:
        return MetricsRow(
            run_id=self.run_id + suffix,
            mode=mode or self.cfg.mode,
            seed=self.cfg.seed,
            bits_w=format_bits(self.cfg.bits_w),
            bits_a=format_bits(self.cfg.bits_a),
            top1=report.top1,
            recon=report.recon,
            sharpness=report.sharpness.sharpness,
            rho=report.sharpness.rho,
            wall_s=wall_s,
        )

    def failure_row(self, stage: str, wall_s: float) -> MetricsRow:
        return MetricsRow.failure(
            self.run_id,
            self.cfg.mode,
            stage,
            self.cfg.seed,
            format_bits(self.cfg.bits_w),
            format_bits(self.cfg.bits_a),
            wall_s,
        )

    # -- modes -----------------------------------------------------------------------------------

    def run(self, record: bool = True) -> list[MetricsRow]:
        """Execute the configured mode; on failure append a failure row and raise ``StageError``."""
        start = time.perf_counter()
        logger.info(f"Run {self.run_id}: mode {self.cfg.mode}, output {self.out_dir}")
        try:
            rows = {
                "sadag": self._run_generation,
                "bn-only": self._run_generation,
                "select": self._run_select,
                "sharpness": self._run_sharpness,
            }[self.cfg.mode](start)
        except StageError as exc:
            logger.error(str(exc))
            if record:
                failed = self.failure_row(exc.stage, time.perf_counter() - start)
                append_rows(self.metrics_path, [failed])
            raise
        if record:
            append_rows(self.metrics_path, rows)
        logger.info(f"Run {self.run_id} finished in {time.perf_counter() - start:.1f}s")
        return rows

    def _pipeline(self) -> tuple[TeacherNet, LabeledDataset, QuantNet]:
        train, val = self.ensure_data()
        t = self.ensure_teacher(train, val)
        synth = self.ensure_synthetic(t)
        return t, val, self.ensure_quantnet(t, synth)

    def _run_generation(self, start: float) -> list[MetricsRow]:
        _, val, q = self._pipeline()
        report = self.evaluate_on(q, val)
        return [self.row(report, time.perf_counter() - start)]

    def _run_sharpness(self, start: float) -> list[MetricsRow]:
        t, val, q = self._pipeline()
        report = self.evaluate_on(q, val)
        with self.stage_scope("sharpness"):
            probes = measure_sharpness_curve(
                q, t, val.images[: self.cfg.eval_samples], self.cfg.sharpness_radii
            )
        wall = time.perf_counter() - start
        return [
            replace(
                self.row(report, wall, suffix=f"-rho{probe.rho:g}"),
                sharpness=probe.sharpness,
                rho=probe.rho,
            )
            for probe in probes
        ]

    def _run_select(self, start: float) -> list[MetricsRow]:
        """Calibrate on gradient-matched and on random pool subsets of each size."""
        cfg = self.cfg
        train, val = self.ensure_data()
        if self.teacher_file:
            t = self.load_teacher(self.teacher_file)
        else:
            t = self.ensure_teacher(train, val)
        if self.pool_file:
            pool, held_out = self.load_dataset(self.pool_file), val
        else:
            pool = val.subset(np.arange(cfg.pool_size))
            held_out = val
            if len(val) > cfg.pool_size:
                held_out = val.subset(np.arange(cfg.pool_size, len(val)))
        logger.info(f"Selecting from a pool of {len(pool)}, evaluating on {len(held_out)}")
        rows = []
        for k in cfg.subset_sizes:
            with self.stage_scope("select"):
                chosen = select_subset(pool, k, self.fresh_quantnet(t), t, progress=cfg.progress)
                rand = random_subset(len(pool), k, derived_seed(cfg.seed, f"subset-{k}"))
            for arm, indices in (("grad", chosen.indices), ("random", rand)):
                q = self.calibrate_on(t, pool.images[indices])
                report = self.evaluate_on(q, held_out)
                rows.append(
                    self.row(report, time.perf_counter() - start, f"select-{arm}-{k}", f"-{arm}{k}")
                )
        return rows


# -- sweeps --------------------------------------------------------------------------------------


def expand_grid(
    base: ExperimentConfig, grid: Mapping[str, Sequence[Any]]
) -> list[ExperimentConfig]:
    """One config per point of the cartesian product of ``grid`` values, in key order."""
    keys = list(grid)
    return [
        base.with_overrides(dict(zip(keys, values)))
        for values in itertools.product(*(grid[k] for k in keys))
    ]


def _sweep_worker(job: tuple[dict[str, Any], str, bool]) -> list[dict[str, Any]]:
    values, out_dir, force = job
    runner = ExperimentRunner(ExperimentConfig(**values), out_dir, force)
    start = time.perf_counter()
    try:
        rows = runner.run(record=False)
    except StageError as exc:
        rows = [runner.failure_row(exc.stage, time.perf_counter() - start)]
    return [asdict(row) for row in rows]


def run_sweep(
    base: ExperimentConfig,
    grid: Mapping[str, Sequence[Any]],
    out_dir: Optional[PathLike] = None,
    workers: Optional[int] = None,
    force: bool = False,
) -> pd.DataFrame:
    """Run every grid point in its own process; append all rows and write a grouped summary.

    Shared artifacts (toy data, teacher) are built first in this process so the workers only
    read them.

    Args:
        base: Settings shared by every run
        grid: Config key to the values it sweeps; the cartesian product is run
        out_dir: Output root, defaults to ``base.out_dir``
        workers: Process count, defaults to one per run up to the CPU count
        force: Recompute cached stages

    Returns:
        Mean, standard deviation and count per mode and swept key, failures excluded

    Raises:
        ValueError: The grid expands to no runs
    """
    out_dir = Path(out_dir if out_dir is not None else base.out_dir)
    configs = [c.with_overrides({"progress": False}) for c in expand_grid(base, grid)]
    if not configs:
        raise ValueError("sweep grid is empty")
    for cfg in {c.stage_hash("teacher"): c for c in configs}.values():
        ExperimentRunner(cfg, out_dir, force).ensure_teacher()

    workers = workers or min(cpu_count(), len(configs))
    jobs = [(asdict(cfg), str(out_dir), force) for cfg in configs]
    logger.info(f"Sweep: {len(jobs)} runs over {list(grid)} with {workers} workers")
    if workers == 1:
        results = [_sweep_worker(job) for job in jobs]
    else:
        with Pool(processes=workers) as pool:
            results = pool.map(_sweep_worker, jobs)

    records = []
    for cfg, rows in zip(configs, results):
        append_rows(out_dir / METRICS_FILE, [MetricsRow(**row) for row in rows])
        for row in rows:
            records.append({**{k: _hashable(getattr(cfg, k)) for k in grid}, **row})
    frame = pd.DataFrame(records)
    by = list(dict.fromkeys(["mode", *(k for k in grid if k != "seed")]))
    summary = summarize(frame, by)
    atomic_write_bytes(out_dir / SUMMARY_FILE, summary.to_csv(index=False).encode("utf-8"))
    logger.info(f"Sweep summary written to {out_dir / SUMMARY_FILE}")
    return summary


def _hashable(value: Any) -> Any:
    if isinstance(value, dict):
        return format_bits(value)
    if isinstance(value, list):
        return ";".join(str(v) for v in value)
    return value

