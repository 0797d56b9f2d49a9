"""Calibration-set synthesis: BN-loss warm-up, then perturbation-aware generation."""

import hashlib
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from ..autodiff import Tensor, grad, no_grad
from ..datasets import LabeledDataset
from ..errors import ConfigError, DivergenceError
from ..harness.formats import read_dataset, write_dataset
from ..losses.generation import bn_loss, final_loss
from ..nets.generator import GeneratorNet, LatentBatch
from ..nets.optim import Adam, ExponentialLR, ReduceLROnPlateau
from ..nets.teacher import TeacherNet
from ..quant.quantnet import QuantNet
from ..seeding import derived_seed, rng_stream

logger = logging.getLogger(__name__)


@dataclass
class GenerationConfig:
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
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    fallback_warn_rate: float = 0.5
    progress: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.num_images < 2:
            raise ConfigError("need at least 2 images", key="num_images")
        if self.batch_gen < 2:
            raise ConfigError("batch statistics need at least 2 images", key="batch_gen")
        for key in ("warmup_iters", "gen_epochs", "plateau_patience"):
            if getattr(self, key) < 0:
                raise ConfigError("must be non-negative", key=key)
        for key in ("nu", "lr_g", "lr_z", "gen_lr_decay", "plateau_factor", "divergence_factor"):
            if not getattr(self, key) > 0:
                raise ConfigError("must be positive", key=key)
        for key in ("zeta", "lambda1", "lambda2"):
            if getattr(self, key) < 0:
                raise ConfigError("must be non-negative", key=key)

    def config_hash(self) -> str:
        fields = asdict(self)
        fields.pop("progress")
        text = yaml.safe_dump(fields, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class Provenance:
    seed: int
    config_hash: str
    warmup_only: bool = False
    mode: str = "sadag"
    warnings: list[str] = field(default_factory=list)
    drift: Optional[float] = None
    stage_hash: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Provenance":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass
class SynthDataset:
    """Generated images in [-1, 1] with teacher-predicted labels."""

    images: np.ndarray
    labels: np.ndarray
    provenance: Provenance
    history: list[dict[str, Any]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def to_labeled(self, num_classes: int) -> LabeledDataset:
        return LabeledDataset(self.images, self.labels, num_classes, self.provenance.to_dict())

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history)


# -- optimization loops ------------------------------------------------------------------------


def _check_finite(value: float, stage: str, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"{stage}: non-finite loss at step {step}")


def warmup(
    g_net: GeneratorNet,
    latents: LatentBatch,
    t: TeacherNet,
    cfg: GenerationConfig,
    trace: Optional[list[float]] = None,
) -> tuple[GeneratorNet, LatentBatch]:
    """``cfg.warmup_iters`` Adam steps on the BN loss, cycling over embedding minibatches."""
    if cfg.warmup_iters == 0:
        return g_net, latents
    params = g_net.parameters()
    opt_g = Adam(params, lr=cfg.lr_g)
    opt_z = Adam(latents.chunks, lr=cfg.lr_z)
    initial: Optional[float] = None
    over = 0
    recent: list[float] = []
    for step in tqdm(range(cfg.warmup_iters), desc="Warm-up", disable=not cfg.progress):
        k = step % len(latents)
        z = latents.chunks[k]
        loss = bn_loss(t, g_net(z))
        value = loss.item()
        _check_finite(value, "warm-up", step)
        recent = (recent + [value])[-5:]
        if trace is not None:
            trace.append(value)
        if initial is None:
            initial = value
        over = over + 1 if value > cfg.divergence_factor * initial else 0
        if over >= cfg.divergence_patience:
            trail = ", ".join(f"{v:.4g}" for v in recent)
            raise DivergenceError(
                f"warm-up: BN loss above {cfg.divergence_factor}x its initial value "
                f"{initial:.4g} for {over} steps (step {step}, last values {trail})"
            )
        grads = grad(loss, params + [z])
        opt_g.step(grads[:-1])
        opt_z.step_one(k, grads[-1])
        logger.debug(f"Warm-up step {step}: L_BN {value:.6f}")
    logger.info(f"Warm-up done: L_BN {initial:.4f} -> {recent[-1]:.4f}")
    return g_net, latents


def _run_generation(
    g_net: GeneratorNet,
    latents: LatentBatch,
    cfg: GenerationConfig,
    step_loss,
    desc: str,
) -> tuple[list[dict[str, Any]], list[str]]:
    """Shared epoch loop; ``step_loss(z, chunk_index)`` returns (loss tensor, term dict)."""
    params = g_net.parameters()
    opt_g = Adam(params, lr=cfg.lr_g)
    opt_z = Adam(latents.chunks, lr=cfg.lr_z)
    sched_g = ExponentialLR(opt_g, cfg.gen_lr_decay)
    sched_z = ReduceLROnPlateau(opt_z, factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    history: list[dict[str, Any]] = []
    warnings: list[str] = []
    for epoch in tqdm(range(cfg.gen_epochs), desc=desc, disable=not cfg.progress):
        sums: dict[str, float] = defaultdict(float)
        fallbacks = 0
        for k, z in enumerate(latents.chunks):
            loss, terms = step_loss(z, k)
            value = loss.item()
            _check_finite(value, desc, epoch)
            grads = grad(loss, params + [z])
            opt_g.step(grads[:-1])
            opt_z.step_one(k, grads[-1])
            for key, term in terms.items():
                if key == "fallbacks":
                    fallbacks += term
                elif term is not None:
                    sums[key] += term
            sums["final"] += value
        batches = len(latents)
        row: dict[str, Any] = {"epoch": epoch}
        row.update({key: total / batches for key, total in sums.items()})
        row["fallback_rate"] = fallbacks / latents.num_images
        row["lr_g"], row["lr_z"] = opt_g.lr, opt_z.lr
        history.append(row)
        if row["fallback_rate"] > cfg.fallback_warn_rate:
            message = f"epoch {epoch}: perturbation fallback rate {row['fallback_rate']:.2f}"
            warnings.append(message)
            logger.warning(message)
        logger.debug(f"{desc} epoch {epoch}: {row}")
        sched_g.step()
        sched_z.step(row["final"])
    return history, warnings


def generate(
    g_net: GeneratorNet,
    latents: LatentBatch,
    t: TeacherNet,
    q: QuantNet,
    cfg: GenerationConfig,
    seed: int = 0,
) -> SynthDataset:
    """``cfg.gen_epochs`` passes of final-loss descent on Z and G with theta_Q frozen.

    Args:
        g_net: Warmed-up generator, updated in place
        latents: Latent minibatches, updated in place
        t: Full-precision net supplying BN statistics and targets
        q: Quantized net whose gradients the images should match
        cfg: Loss weights, step sizes and epoch count
        seed: Seeds the perturbation stream

    Returns:
        Rendered images labeled by ``t``, with the per-epoch loss history

    Raises:
        DivergenceError: A loss turned non-finite
    """
    rng = rng_stream(seed, "perturbation")

    def step_loss(z: Tensor, k: int):
        terms = final_loss(t, q, g_net, z, cfg.lambda1, cfg.lambda2, cfg.zeta, cfg.nu, rng)
        values = {"bn": terms.bn, "diverse": terms.diverse, "grad": terms.grad}
        values["fallbacks"] = terms.fallback_count
        return terms.total, values

    history, warnings = _run_generation(g_net, latents, cfg, step_loss, "Generation")
    mode = "sadag" if (cfg.lambda1 or cfg.lambda2) else "bn-only"
    return _emit(g_net, latents, t, cfg, seed, history, warnings, mode)


def generate_bn_only(
    g_net: GeneratorNet,
    latents: LatentBatch,
    t: TeacherNet,
    cfg: GenerationConfig,
    seed: int = 0,
) -> SynthDataset:
    """Baseline generation driven by the BN loss alone."""

    def step_loss(z: Tensor, k: int):
        loss = bn_loss(t, g_net(z))
        return loss, {"bn": loss.item()}

    history, warnings = _run_generation(g_net, latents, cfg, step_loss, "BN-only generation")
    return _emit(g_net, latents, t, cfg, seed, history, warnings, "bn-only")


def render(g_net: GeneratorNet, latents: LatentBatch) -> np.ndarray:
    """G(Z), evaluated with the same minibatching used during optimization."""
    with no_grad():
        return np.concatenate([g_net(Tensor(z.data)).data for z in latents.chunks], axis=0)


def _emit(g_net, latents, t, cfg, seed, history, warnings, mode) -> SynthDataset:
    images = render(g_net, latents)
    provenance = Provenance(
        seed=seed,
        config_hash=cfg.config_hash(),
        warmup_only=cfg.gen_epochs == 0,
        mode=mode,
        warnings=warnings,
    )
    return SynthDataset(images, t.predict(images), provenance, history)


def synthesize(
    t: TeacherNet,
    q: Optional[QuantNet],
    cfg: GenerationConfig,
    seed: int,
    bn_only: bool = False,
) -> SynthDataset:
    """
    Initialize G and Z from ``seed``, warm up, generate, and record the warm-up drift.

    Args:
        t: Full-precision net
        q: Quantized net; ``None`` falls back to BN-only generation
        cfg: Generation settings
        seed: Root seed; generator, latents and perturbations use derived streams
        bn_only: Skip the diversity and gradient-matching terms

    Returns:
        The synthetic dataset with its provenance
    """
    g_net = GeneratorNet.initialize(derived_seed(seed, "generator"), t.input_shape)
    latents = LatentBatch.sample(cfg.num_images, cfg.batch_gen, derived_seed(seed, "latents"))
    logger.info(
        f"Synthesizing {cfg.num_images} images: {cfg.warmup_iters} warm-up steps, "
        f"{cfg.gen_epochs} epochs, lambda1={cfg.lambda1}, lambda2={cfg.lambda2}"
    )
    warmup(g_net, latents, t, cfg)
    warm_images = render(g_net, latents)
    if bn_only or q is None or not (cfg.lambda1 or cfg.lambda2):
        ds = generate_bn_only(g_net, latents, t, cfg, seed)
    else:
        ds = generate(g_net, latents, t, q, cfg, seed)
    ds.provenance.drift = float(np.mean(np.abs(ds.images - warm_images)))
    logger.info(f"Synthetic set ready: drift from warm-up {ds.provenance.drift:.4f}")
    return ds


# -- persistence ---------------------------------------------------------------------------------


def _plain(row: dict[str, Any]) -> dict[str, Any]:
    return {k: v.item() if isinstance(v, np.generic) else v for k, v in row.items()}


def emit_dataset(ds: SynthDataset, path: Union[str, Path]) -> Path:
    history = [_plain(row) for row in ds.history]
    metadata = {"kind": "synthetic", "provenance": ds.provenance.to_dict(), "history": history}
    return write_dataset(path, ds.images, ds.labels, metadata)


def load_synth_dataset(path: Union[str, Path]) -> SynthDataset:
    images, labels, metadata = read_dataset(path)
    provenance = Provenance.from_dict(metadata.get("provenance", {"seed": 0, "config_hash": ""}))
    return SynthDataset(images, labels, provenance, list(metadata.get("history", [])))
