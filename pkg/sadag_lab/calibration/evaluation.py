"""Accuracy, reconstruction and sharpness reports for calibrated nets."""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Optional, Sequence, Union

import numpy as np

from ..autodiff import Tensor, no_grad
from ..datasets import LabeledDataset
from ..errors import ZeroGradientError
from ..losses.reconstruction import SharpnessProbe, reconstruction_loss, sam_epsilon
from ..nets.teacher import TeacherNet
from ..quant.quantnet import QuantNet

logger = logging.getLogger(__name__)

Net = Union[TeacherNet, QuantNet]


@dataclass
class EvalReport:
    """Top-1 on a labeled set plus per-sample reconstruction loss and sharpness at ``rho``."""

    top1: float
    recon: float
    sharpness: SharpnessProbe
    num_samples: int
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.top1 <= 1.0:
            raise ValueError(f"top-1 must lie in [0, 1], got {self.top1}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["sharpness"] = self.sharpness.sharpness
        data["rho"] = self.sharpness.rho
        return data


def _flat_probe(rho: float, value: float) -> SharpnessProbe:
    return SharpnessProbe(rho=rho, base_loss=value, perturbed_loss=value, epsilon_norm=0.0)


def _probes(q: QuantNet, t: TeacherNet, images: np.ndarray, radii: Sequence[float]):
    x = Tensor(images)
    theta = q.effective_parameters(hard=True)
    with no_grad():
        base = reconstruction_loss(q, t, x, reduction="mean", params=theta).item()
    try:
        direction = sam_epsilon(q, t, x, 1.0)
    except ZeroGradientError:
        logger.debug("Reconstruction gradient is zero; sharpness is flat at every radius")
        return [_flat_probe(rho, base) for rho in radii]
    probes = []
    for rho in radii:
        if rho == 0:
            probes.append(_flat_probe(0.0, base))
            continue
        shifted = {k: Tensor(v.data + rho * direction[k]) for k, v in theta.items()}
        with no_grad():
            perturbed = reconstruction_loss(q, t, x, reduction="mean", params=shifted).item()
        probes.append(SharpnessProbe(rho, base, perturbed, epsilon_norm=rho))
    return probes


def evaluate(
    net: Net,
    dataset: LabeledDataset,
    rho: float = 0.05,
    teacher: Optional[TeacherNet] = None,
    eval_samples: Optional[int] = None,
    seed: int = 0,
    config_hash: str = "",
) -> EvalReport:
    """Top-1 over the whole set; reconstruction and sharpness on its first ``eval_samples``.

    A quantized net is compared with its own teacher unless ``teacher`` is given. A
    full-precision net is its own reference, so its reconstruction loss and sharpness are 0.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if rho < 0:
        raise ValueError(f"radius must be non-negative, got {rho}")
    top1 = float(np.mean(net.predict(dataset.images) == dataset.labels))
    count = len(dataset) if eval_samples is None else min(eval_samples, len(dataset))
    if isinstance(net, QuantNet):
        net.warn_if_uncalibrated()
        reference = teacher if teacher is not None else net.teacher
        probe = _probes(net, reference, dataset.images[:count], [rho])[0]
    else:
        probe = _flat_probe(rho, 0.0)
    report = EvalReport(
        top1=top1,
        recon=probe.base_loss,
        sharpness=probe,
        num_samples=len(dataset),
        seed=seed,
        config_hash=config_hash,
    )
    logger.info(
        f"Evaluation: top-1 {top1:.4f}, L_R {report.recon:.6g}, "
        f"sharpness@{rho} {probe.sharpness:.6g}"
    )
    return report


def measure_sharpness_curve(
    q: QuantNet, t: TeacherNet, X_val: Union[LabeledDataset, np.ndarray], radii: Sequence[float]
) -> list[SharpnessProbe]:
    """One probe per radius, all along the same normalized ascent direction."""
    radii = [float(r) for r in radii]
    if not radii:
        raise ValueError("no radii given")
    if any(r < 0 for r in radii) or radii != sorted(radii):
        raise ValueError(f"radii must be non-negative and ascending, got {radii}")
    images = X_val.images if isinstance(X_val, LabeledDataset) else np.asarray(X_val, dtype=float)
    if images.shape[0] == 0:
        raise ValueError("cannot probe sharpness on an empty set")
    probes = _probes(q, t, images, radii)
    drops = [
        f"{a.rho}->{b.rho}" for a, b in zip(probes, probes[1:]) if b.sharpness < a.sharpness
    ]
    if drops:
        logger.info(f"Sharpness is not monotone in the radius at {drops}")
    return probes
