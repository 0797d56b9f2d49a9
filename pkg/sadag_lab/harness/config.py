"""Experiment configuration: ``key = value`` files with YAML-typed values."""

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Union

import yaml

from ..calibration.calibrator import CalibConfig
from ..errors import ConfigError
from ..quant.quantizers import FULL_PRECISION_BITS
from ..quant.quantnet import act_point_names, default_bit_map, weight_layer_names
from ..synthesis.pipeline import GenerationConfig

logger = logging.getLogger(__name__)

MODES = ("sadag", "bn-only", "select", "sharpness")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

BitSpec = Union[int, dict[str, int]]

# fields feeding each artifact; a stage's hash covers its own fields and every earlier stage's
STAGE_FIELDS: dict[str, tuple[str, ...]] = {
    "data": ("data_seed", "num_classes", "image_size", "train_size", "val_size"),
    "teacher": ("teacher_seed", "teacher_epochs", "teacher_lr", "teacher_batch", "teacher_floor"),
    "generate": (
        "seed",
        "bits_w",
        "bits_a",
        "num_images",
        "warmup_iters",
        "gen_epochs",
        "nu",
        "zeta",
        "lambda1",
        "lambda2",
        "lr_g",
        "lr_z",
        "batch_gen",
        "gen_lr_decay",
    ),
    "calibrate": ("calib_iters", "alpha", "batch_cal", "finetune_weights"),
}
STAGE_ORDER = ("data", "teacher", "generate", "calibrate")


@dataclass
class ExperimentConfig:
    """
    Every knob of a run; defaults are sized for the toy task.

    Fields are grouped as commented below. ``bits_w`` and ``bits_a`` take a nominal width, which
    keeps the first and last layers at 8 bits, or an explicit per-layer map. Instances validate
    on construction.

    Raises:
        ConfigError: A field has the wrong type or lies out of range; the error names the key
    """

    seed: int = 0
    mode: str = "sadag"
    # quantization: nominal widths, or explicit per-layer maps
    bits_w: BitSpec = 4
    bits_a: BitSpec = 4
    # generation
    num_images: int = 1024
    warmup_iters: int = 200
    gen_epochs: int = 50
    nu: float = 2.0
    zeta: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr_g: float = 0.1
    lr_z: float = 0.01
    batch_gen: int = 128
    gen_lr_decay: float = 0.95
    # calibration and evaluation
    calib_iters: int = 500
    alpha: float = 0.01
    batch_cal: int = 32
    finetune_weights: bool = False
    rho_eval: float = 0.05
    eval_samples: int = 256
    sharpness_radii: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1])
    # subset selection
    pool_size: int = 256
    subset_sizes: list[int] = field(default_factory=lambda: [8, 16, 32])
    # toy dataset and teacher
    data_seed: int = 0
    num_classes: int = 4
    image_size: int = 16
    train_size: int = 2048
    val_size: int = 1024
    teacher_seed: int = 0
    teacher_epochs: int = 15
    teacher_lr: float = 0.05
    teacher_batch: int = 64
    teacher_floor: float = 0.9
    # housekeeping
    out_dir: str = "runs"
    progress: bool = True
    log_level: str = "INFO"

    def __post_init__(self) -> None:
        self.validate()

    # -- validation ------------------------------------------------------------------------------

    def validate(self) -> None:
        for f in fields(self):
            _check_type(f.name, getattr(self, f.name), f.type)
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {list(MODES)}, got {self.mode!r}", key="mode")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"must be one of {list(LOG_LEVELS)}", key="log_level")
        for key in ("nu", "lr_g", "lr_z", "teacher_lr", "gen_lr_decay"):
            _positive(key, getattr(self, key))
        for key in ("zeta", "lambda1", "lambda2", "rho_eval", "alpha"):
            _non_negative(key, getattr(self, key))
        for key in ("warmup_iters", "gen_epochs", "teacher_epochs"):
            _non_negative(key, getattr(self, key))
        if self.gen_lr_decay > 1:
            raise ConfigError("must be in (0, 1]", key="gen_lr_decay")
        if not 0 <= self.teacher_floor <= 1:
            raise ConfigError("must be in [0, 1]", key="teacher_floor")
        for key in ("num_images", "batch_gen"):
            if getattr(self, key) < 2:
                raise ConfigError("batch statistics need at least 2 images", key=key)
        for key in ("calib_iters", "batch_cal", "eval_samples", "pool_size", "teacher_batch"):
            if getattr(self, key) < 1:
                raise ConfigError("must be at least 1", key=key)
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes", key="num_classes")
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError("must be a multiple of 4 (at least 4)", key="image_size")
        for key in ("train_size", "val_size"):
            if getattr(self, key) < self.num_classes:
                raise ConfigError("must hold at least one image per class", key=key)
        if self.pool_size > self.val_size:
            raise ConfigError(f"exceeds val_size ({self.val_size})", key="pool_size")
        if not self.subset_sizes or any(k < 1 or k > self.pool_size for k in self.subset_sizes):
            raise ConfigError(f"sizes must lie in [1, {self.pool_size}]", key="subset_sizes")
        radii = self.sharpness_radii
        if not radii or any(r <= 0 for r in radii) or radii != sorted(radii):
            raise ConfigError("radii must be positive and ascending", key="sharpness_radii")
        self.bit_maps()

    def bit_maps(self) -> tuple[dict[str, int], dict[str, int]]:
        """Per-layer weight and activation widths; integers expand through the preset."""
        nominal_w = self.bits_w if isinstance(self.bits_w, int) else FULL_PRECISION_BITS
        nominal_a = self.bits_a if isinstance(self.bits_a, int) else FULL_PRECISION_BITS
        bits_w, bits_a = default_bit_map(nominal_w, nominal_a)
        for key, spec, target, names in (
            ("bits_w", self.bits_w, bits_w, weight_layer_names(3)),
            ("bits_a", self.bits_a, bits_a, act_point_names(3)),
        ):
            if isinstance(spec, dict):
                unknown = sorted(set(spec) - set(names))
                if unknown:
                    raise ConfigError(f"unknown layers {unknown}; expected {names}", key=key)
                target.update(spec)
            for name, bits in target.items():
                if not (2 <= bits <= 16 or bits == FULL_PRECISION_BITS):
                    raise ConfigError(
                        f"{name}: width {bits} outside [2, 16] (or {FULL_PRECISION_BITS})", key=key
                    )
        return bits_w, bits_a

    # -- derived configs -------------------------------------------------------------------------

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(
            num_images=self.num_images,
            warmup_iters=self.warmup_iters,
            gen_epochs=self.gen_epochs,
            nu=self.nu,
            zeta=self.zeta,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lr_g=self.lr_g,
            lr_z=self.lr_z,
            batch_gen=self.batch_gen,
            gen_lr_decay=self.gen_lr_decay,
            progress=self.progress,
        )

    def calib_config(self) -> CalibConfig:
        return CalibConfig(
            calib_iters=self.calib_iters,
            alpha=self.alpha,
            batch_cal=self.batch_cal,
            rho_eval=self.rho_eval,
            finetune_weights=self.finetune_weights,
            progress=self.progress,
        )

    @property
    def bn_only(self) -> bool:
        return self.mode == "bn-only" or (self.lambda1 == 0 and self.lambda2 == 0)

    def stage_hash(self, stage: str) -> str:
        """Hash of the fields that influence ``stage`` and the stages before it."""
        if stage not in STAGE_FIELDS:
            raise ValueError(f"unknown stage {stage!r}; expected one of {list(STAGE_ORDER)}")
        values = asdict(self)
        keys: list[str] = []
        for name in STAGE_ORDER[: STAGE_ORDER.index(stage) + 1]:
            keys.extend(STAGE_FIELDS[name])
        selected = {key: values[key] for key in keys}
        if stage in ("generate", "calibrate"):
            # bn-only and zero-weighted sadag generate the same data
            selected["lambda1"], selected["lambda2"] = (
                (0.0, 0.0) if self.bn_only else (self.lambda1, self.lambda2)
            )
        text = yaml.safe_dump(selected, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        values = asdict(self)
        for key, value in overrides.items():
            if key not in values:
                raise ConfigError("unknown key", key=key)
            values[key] = value
        return ExperimentConfig(**values)

    def to_text(self) -> str:
        """Canonical ``key = value`` rendering that ``parse_config_text`` reads back."""
        lines = []
        for key, value in asdict(self).items():
            rendered = yaml.safe_dump(value, default_flow_style=True, width=1_000_000).strip()
            lines.append(f"{key} = {rendered.removesuffix('...').strip()}")
        return "\n".join(lines) + "\n"


def _check_type(key: str, value: Any, declared: Any) -> None:
    text = declared if isinstance(declared, str) else getattr(declared, "__name__", str(declared))
    if "BitSpec" in text or key in ("bits_w", "bits_a"):
        ok = _is_int(value) or (
            isinstance(value, dict)
            and all(isinstance(k, str) and _is_int(v) for k, v in value.items())
        )
        expected = "an integer or a {layer: bits} map"
    elif key == "sharpness_radii":
        ok = isinstance(value, list) and all(_is_number(v) for v in value)
        expected = "a list of numbers"
    elif key == "subset_sizes":
        ok = isinstance(value, list) and all(_is_int(v) for v in value)
        expected = "a list of integers"
    elif text in ("int",):
        ok, expected = _is_int(value), "an integer"
    elif text in ("float",):
        ok, expected = _is_number(value), "a number"
    elif text in ("bool",):
        ok, expected = isinstance(value, bool), "true or false"
    else:
        ok, expected = isinstance(value, str), "a string"
    if not ok:
        raise ConfigError(f"expected {expected}, got {value!r}", key=key)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _positive(key: str, value: float) -> None:
    if not value > 0:
        raise ConfigError(f"must be positive, got {value}", key=key)


def _non_negative(key: str, value: float) -> None:
    if value < 0:
        raise ConfigError(f"must be non-negative, got {value}", key=key)


def coerce_value(key: str, value: Any) -> Any:
    """Promote integers to floats for float-typed fields so hashes stay canonical."""
    declared = {f.name: f.type for f in fields(ExperimentConfig)}.get(key)
    name = declared if isinstance(declared, str) else getattr(declared, "__name__", "")
    if name == "float" and _is_int(value):
        return float(value)
    if key == "sharpness_radii" and isinstance(value, list):
        return [float(v) if _is_int(v) else v for v in value]
    return value


def parse_value(key: str, text: str, line: Optional[int] = None) -> Any:
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}", key=key, line=line) from None
    return coerce_value(key, value)


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    """
    Parse ``key = value`` lines into a validated config.

    Args:
        text: Config text; ``#`` starts a comment
        source: Name used in log lines

    Returns:
        The config, defaults filled in for absent keys

    Raises:
        ConfigError: Unknown, duplicate or malformed keys, or values out of range, with the
            offending line number
    """
    known = {f.name for f in fields(ExperimentConfig)}
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in known:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in values:
            first = lines[key]
            raise ConfigError(f"duplicate key (first set on line {first})", key=key, line=lineno)
        if not value:
            raise ConfigError("missing value", key=key, line=lineno)
        values[key] = parse_value(key, value, lineno)
        lines[key] = lineno
    try:
        cfg = ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(exc.message, key=exc.key, line=lines.get(exc.key or "")) from None
    logger.debug(f"Parsed {len(values)} settings from {source}")
    return cfg


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a config file; an empty file gives the defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def parse_overrides(pairs: Iterable[str]) -> dict[str, Any]:
    """``key=value`` strings from the command line, typed like file values."""
    overrides: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, _, value = (part.strip() for part in pair.partition("="))
        overrides[key] = parse_value(key, value)
    return overrides
