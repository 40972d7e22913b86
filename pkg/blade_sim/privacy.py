"""
Local differential privacy for uploaded model deltas.

Clipping bounds the L2 sensitivity, the Gaussian/Laplace mechanisms add
calibrated noise, and the adaptive schedule lowers the noise power once test
accuracy stops improving.
"""
import logging
import math
from typing import Dict, List, Sequence

import numpy as np

from .blade_schemas import PrivacyConfig
from .mlcore import ParamVector, as_param_vector

logger = logging.getLogger(__name__)

PLATEAU_TOLERANCE = 1e-4


def clip(params: ParamVector, C: float) -> ParamVector:
    """Scale `params` down to L2 norm C; shorter vectors pass through untouched"""
    if C <= 0:
        raise ValueError("clip norm must be > 0")
    norm = float(np.linalg.norm(params))
    if norm <= C:
        return params
    return as_param_vector(params * (C / norm))


def calibrate_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Gaussian mechanism: sigma = sensitivity * sqrt(2 ln(1.25/delta)) / epsilon"""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if sensitivity < 0:
        raise ValueError("sensitivity must be >= 0")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def calibrate_laplace(epsilon: float, sensitivity: float) -> float:
    """Laplace mechanism scale b = sensitivity / epsilon"""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    return sensitivity / epsilon


def perturb(params: ParamVector, sigma: float, mechanism: str = "gaussian",
            seed: int = 0) -> ParamVector:
    """Add i.i.d. noise; `sigma` is the Gaussian std or the Laplace scale"""
    if sigma < 0:
        raise ValueError("noise scale must be >= 0")
    if sigma == 0:
        return params
    rng = np.random.default_rng(seed)
    if mechanism == "gaussian":
        noise = rng.normal(0.0, sigma, size=params.shape[0])
    elif mechanism == "laplace":
        noise = rng.laplace(0.0, sigma, size=params.shape[0])
    else:
        raise ValueError(f"Unknown noise mechanism: {mechanism}")
    return as_param_vector(params + noise)


def _stalled(history: Sequence[float], index: int, tolerance: float) -> bool:
    return index == 0 or history[index] <= history[index - 1] + tolerance


def adaptive_sigma(history: Sequence[float], sigma_current: float, rate: float,
                   patience: int, tolerance: float = PLATEAU_TOLERANCE) -> float:
    """Return rate * sigma once the last `patience` rounds brought no improvement.

    A round improves only if its accuracy beats the previous round by more
    than `tolerance`; the first recorded round never counts as an improvement.
    """
    if not 0 < rate < 1:
        raise ValueError(f"decay rate must lie in (0, 1), got {rate}")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    n = len(history)
    if n < patience:
        return sigma_current
    if all(_stalled(history, i, tolerance) for i in range(n - patience, n)):
        return rate * sigma_current
    return sigma_current


class NoiseSchedule:
    """Per-round noise scales for every client under one privacy config.

    The decay factor is shared by all clients; it is driven by the public
    test accuracy, which every node observes identically.
    """

    def __init__(self, cfg: PrivacyConfig):
        self.cfg = cfg
        self.factor = 1.0
        self.decays = 0
        self._window: List[float] = []
        self._base: Dict[int, float] = {}

    def epsilon_for(self, client_id: int) -> float:
        return self.cfg.client_epsilons.get(client_id, self.cfg.epsilon)

    def base_scale(self, client_id: int) -> float:
        if client_id not in self._base:
            eps = self.epsilon_for(client_id)
            if self.cfg.mechanism == "laplace":
                scale = self.cfg.laplace_scale or calibrate_laplace(eps, self.cfg.clip_norm)
            else:
                scale = calibrate_sigma(eps, self.cfg.delta, self.cfg.clip_norm)
            self._base[client_id] = scale
        return self._base[client_id]

    def scale_for(self, client_id: int) -> float:
        if not self.cfg.enabled:
            return 0.0
        return self.base_scale(client_id) * self.factor

    @property
    def sigma(self) -> float:
        """Scale in force for the task-wide epsilon"""
        if not self.cfg.enabled:
            return 0.0
        return self.base_scale(-1) * self.factor

    def observe(self, accuracy: float) -> float:
        """Record a round's test accuracy; returns the factor for the next round"""
        if self.cfg.decay.kind != "adaptive":
            return self.factor
        self._window.append(accuracy)
        decay = self.cfg.decay
        updated = adaptive_sigma(self._window, self.factor, decay.rate,
                                 decay.patience, decay.tolerance)
        if updated < self.factor:
            self.factor = updated
            self.decays += 1
            self._window = []
            logger.debug(f"Noise decayed to factor {self.factor:.4f} after {self.decays} plateaus")
        return self.factor


def privatize_delta(delta: ParamVector, cfg: PrivacyConfig, scale: float,
                    seed: int) -> ParamVector:
    """clip then perturb, as applied to every honest upload"""
    if not cfg.enabled:
        return delta
    return perturb(clip(delta, cfg.clip_norm), scale, cfg.mechanism, seed)
