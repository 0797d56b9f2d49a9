"""Post-training calibration of a quantized net against its teacher."""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np
from tqdm import tqdm

from ..autodiff import Tensor, grad, no_grad, ops
from ..datasets import LabeledDataset
from ..errors import ConfigError, NonFiniteError
from ..losses.reconstruction import reconstruction_loss, teacher_activations
from ..nets.optim import Adam
from ..nets.teacher import TeacherNet
from ..quant.quantizers import ROUND_REG_WEIGHT, BetaSchedule
from ..quant.quantnet import QuantNet
from ..seeding import rng_stream

logger = logging.getLogger(__name__)


@dataclass
class CalibConfig:
    calib_iters: int = 500
    alpha: float = 0.01
    batch_cal: int = 32
    rho_eval: float = 0.05
    finetune_weights: bool = False
    tune_act_ranges: bool = True
    round_weight: float = ROUND_REG_WEIGHT
    beta_start: float = 20.0
    beta_end: float = 2.0
    progress: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        if self.calib_iters < 1:
            raise ConfigError("need at least one iteration", key="calib_iters")
        if self.alpha < 0:
            raise ConfigError("step size must be non-negative", key="alpha")
        if self.batch_cal < 1:
            raise ConfigError("batch size must be positive", key="batch_cal")
        if self.rho_eval < 0:
            raise ConfigError("radius must be non-negative", key="rho_eval")


def _images(X: Union[LabeledDataset, np.ndarray]) -> np.ndarray:
    return X.images if isinstance(X, LabeledDataset) else np.asarray(X, dtype=np.float64)


def calibrate(
    q: QuantNet,
    t: TeacherNet,
    X: Union[LabeledDataset, np.ndarray],
    cfg: CalibConfig,
    seed: int = 0,
    trace: Optional[list[dict[str, Any]]] = None,
) -> QuantNet:
    """
    Calibrate a quantized net on a set of images.

    Adam with step size ``cfg.alpha`` descends the soft-rounded reconstruction loss plus the
    annealed rounding regularizer. Activation ranges still unset are initialized min-max from
    the first minibatch. Rounding logits are always trained, activation ranges unless
    ``cfg.tune_act_ranges`` is off, latent weights only with ``cfg.finetune_weights``. With a
    zero step size none of them move. ``q`` is updated in place and its integer codes are
    refreshed from the final rounding decisions.

    Args:
        q: Quantized net to calibrate
        t: Its full-precision teacher (read only)
        X: Calibration images, or a labeled dataset whose labels are ignored
        cfg: Iterations, step size, batch size and regularizer schedule
        seed: Seed of the minibatch sampling stream
        trace: Optional list that receives one ``{step, recon, reg, beta}`` row per iteration

    Returns:
        ``q`` itself

    Raises:
        ValueError: If ``X`` holds no images
        NonFiniteError: If the loss stops being finite; the message names the iteration
    """
    images = _images(X)
    if images.shape[0] == 0:
        raise ValueError("calibration set is empty")
    rng = rng_stream(seed, "calibration")
    batch = min(cfg.batch_cal, images.shape[0])
    for quantizer in q.quantizers():
        quantizer.codes = None

    first = images[np.sort(rng.choice(images.shape[0], size=batch, replace=False))]
    q.observe_activation_ranges(Tensor(first))

    params = list(q.rounding_logits())
    if cfg.tune_act_ranges:
        params += q.activation_range_params()
    if cfg.finetune_weights:
        weights = q.latent_weights()
        for w in weights:
            w.requires_grad = True
        params += weights
    if not params:
        logger.info("Every layer is full precision; nothing to calibrate")
        return q

    optimizer = Adam(params, lr=cfg.alpha)
    betas = BetaSchedule(cfg.calib_iters, cfg.beta_start, cfg.beta_end)
    logger.info(
        f"Calibrating {len(params)} tensors for {cfg.calib_iters} iterations "
        f"on {images.shape[0]} images (batch {batch}, alpha {cfg.alpha})"
    )
    try:
        for step in tqdm(range(cfg.calib_iters), desc="Calibrating", disable=not cfg.progress):
            xb = first if step == 0 else images[rng.choice(images.shape[0], batch, replace=False)]
            x = Tensor(xb)
            with no_grad():
                fp = teacher_activations(t, x)
            recon = reconstruction_loss(q, t, x, hard=False, fp_activations=fp)
            beta = betas(step)
            reg = q.round_regularizer(beta)
            loss = ops.add(recon, ops.scale(reg, cfg.round_weight))
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"calibration loss became non-finite at iteration {step}")
            optimizer.step(grad(loss, params))
            q.sync_activation_ranges()
            if trace is not None:
                trace.append({"step": step, "recon": recon.item(), "reg": reg.item(), "beta": beta})
            logger.debug(f"Calibration step {step}: L_R {recon.item():.6f}, reg {reg.item():.4f}")
    finally:
        q.sync_activation_ranges(release=True)
        if cfg.finetune_weights:
            for w in q.latent_weights():
                w.requires_grad = False
    q.freeze()
    return q
