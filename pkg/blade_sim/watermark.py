"""
PN-sequence watermarking of uploaded updates and correlation-based copy detection.

Every client embeds its own window of a maximal-length LFSR sequence into the
update it broadcasts. A client later scans the pool with its own chips: a
correlation peak near the expected embedding amplitude means someone else
uploaded a copy of its update.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Tuple, Union

import numpy as np

from .blade_schemas import WatermarkConfig
from .exceptions import LfsrError
from .mlcore import ParamVector, as_param_vector
from .seeding import rng_for

logger = logging.getLogger(__name__)

# Primitive polynomial taps (Fibonacci form), one per degree
PRIMITIVE_TAPS = {
    3: (3, 2),
    4: (4, 3),
    5: (5, 3),
    6: (6, 5),
    7: (7, 6),
    8: (8, 6, 5, 4),
    9: (9, 5),
    10: (10, 7),
    11: (11, 9),
    12: (12, 6, 4, 1),
    13: (13, 4, 3, 1),
    14: (14, 5, 3, 1),
    15: (15, 14),
    16: (16, 15, 13, 4),
    17: (17, 14),
    18: (18, 11),
    19: (19, 6, 2, 1),
    20: (20, 17),
}


def taps_mask(taps: Iterable[int]) -> int:
    """Bitmask with bit t-1 set for every tap t"""
    mask = 0
    for t in taps:
        mask |= 1 << (t - 1)
    return mask


def _state_mask(degree: int, mask: int) -> int:
    """Tap t reads state bit (degree - t)"""
    out = 0
    for t in range(1, degree + 1):
        if mask & (1 << (t - 1)):
            out |= 1 << (degree - t)
    return out


def _check_lfsr(degree: int, mask: int, seed_state: int) -> None:
    if degree < 2:
        raise LfsrError(f"LFSR degree must be >= 2, got {degree}", code="BAD_TAPS")
    if not mask & (1 << (degree - 1)) or mask >> degree:
        raise LfsrError(f"taps {mask:#x} do not describe a degree-{degree} polynomial",
                        code="BAD_TAPS")
    if seed_state == 0:
        raise LfsrError("LFSR seed state must be non-zero (all-zero lockup)", code="ZERO_SEED")
    if seed_state >> degree:
        raise LfsrError(f"seed state {seed_state:#x} wider than {degree} bits", code="BAD_TAPS")


def _lfsr_bits(degree: int, mask: int, seed_state: int, length: int) -> np.ndarray:
    smask = _state_mask(degree, mask)
    top = degree - 1
    state = seed_state
    bits = np.empty(length, dtype=np.int8)
    for i in range(length):
        bits[i] = state & 1
        feedback = (state & smask).bit_count() & 1
        state = (state >> 1) | (feedback << top)
    return bits


@dataclass(frozen=True)
class PnSequence:
    chips: np.ndarray
    degree: int
    taps: int
    seed_state: int

    @property
    def length(self) -> int:
        return self.chips.shape[0]

    @property
    def period(self) -> int:
        return (1 << self.degree) - 1


def gen_pn(degree: int, taps: Union[int, Iterable[int], None] = None, seed_state: int = 1,
           length: int = None) -> PnSequence:
    """Fibonacci LFSR output mapped 0 -> +1, 1 -> -1 (one full period by default)"""
    if taps is None:
        if degree not in PRIMITIVE_TAPS:
            raise LfsrError(f"No shipped taps for degree {degree}", code="BAD_TAPS")
        taps = PRIMITIVE_TAPS[degree]
    mask = taps if isinstance(taps, int) else taps_mask(taps)
    _check_lfsr(degree, mask, seed_state)
    if degree in PRIMITIVE_TAPS and mask != taps_mask(PRIMITIVE_TAPS[degree]):
        logger.warning(f"Taps {mask:#x} are not the shipped primitive taps for degree {degree}")

    period = (1 << degree) - 1
    length = period if length is None else length
    if not 0 < length <= period:
        raise LfsrError(f"length must lie in [1, {period}], got {length}", code="BAD_TAPS")

    chips = (1 - 2 * _lfsr_bits(degree, mask, seed_state, length)).astype(np.int8)
    chips.flags.writeable = False
    return PnSequence(chips=chips, degree=degree, taps=mask, seed_state=seed_state)


def lfsr_period(degree: int, taps: Union[int, Iterable[int]], seed_state: int = 1) -> int:
    """Brute-force state walk: steps until the seed state recurs"""
    mask = taps if isinstance(taps, int) else taps_mask(taps)
    _check_lfsr(degree, mask, seed_state)
    smask = _state_mask(degree, mask)
    state, steps = seed_state, 0
    while True:
        feedback = (state & smask).bit_count() & 1
        state = (state >> 1) | (feedback << (degree - 1))
        steps += 1
        if state == seed_state:
            return steps


@lru_cache(maxsize=8)
def base_sequence(degree: int, seed_state: int = 1) -> PnSequence:
    return gen_pn(degree, seed_state=seed_state)


def client_sequence(base: PnSequence, client_id: int, use_len: int) -> np.ndarray:
    """The client's cyclic window of `use_len` chips, starting at client_id * use_len"""
    if use_len > base.length:
        raise LfsrError(f"use_len {use_len} exceeds sequence length {base.length}",
                        code="BAD_TAPS")
    start = (client_id * use_len) % base.length
    idx = (start + np.arange(use_len)) % base.length
    chips = base.chips[idx]
    chips.flags.writeable = False
    return chips


def sequence_for(cfg: WatermarkConfig, client_id: int, dim: int) -> np.ndarray:
    base = base_sequence(cfg.degree, cfg.seed_state)
    return client_sequence(base, client_id, effective_use_len(cfg, dim))


def effective_use_len(cfg: WatermarkConfig, dim: int) -> int:
    return min(cfg.use_len, dim, (1 << cfg.degree) - 1)


def _as_chips(pn) -> np.ndarray:
    return pn.chips if isinstance(pn, PnSequence) else np.asarray(pn)


def embed_amplitude(signal_power: float, snr_db: float) -> float:
    """alpha = sqrt(P_s / 10^(snr/10))"""
    if signal_power <= 0:
        return 0.0
    return math.sqrt(signal_power / 10.0 ** (snr_db / 10.0))


def embed(params: ParamVector, pn, cfg: WatermarkConfig) -> ParamVector:
    """Add alpha * chips to the first use_len coordinates"""
    chips = _as_chips(pn)
    use_len = min(cfg.use_len, params.shape[0], chips.shape[0])
    prefix = params[:use_len]
    alpha = embed_amplitude(float(np.mean(prefix ** 2)), cfg.snr_db)
    if alpha == 0.0:
        return params
    out = np.array(params, copy=True)
    out[:use_len] += alpha * chips[:use_len]
    return as_param_vector(out)


def correlate(params: ParamVector, pn, use_len: int) -> Tuple[float, float]:
    """(sum(params * chips) / use_len, mean received power over the prefix)"""
    chips = _as_chips(pn)
    if use_len < 1 or use_len > params.shape[0] or use_len > chips.shape[0]:
        raise ValueError(f"use_len {use_len} out of range")
    prefix = np.asarray(params[:use_len], dtype=np.float64)
    statistic = float(prefix @ chips[:use_len].astype(np.float64)) / use_len
    return statistic, float(np.mean(prefix ** 2))


def expected_amplitude(received_power: float, snr_db: float) -> float:
    """Embedding amplitude implied by a watermarked vector's received power"""
    return math.sqrt(max(received_power, 0.0) / (1.0 + 10.0 ** (snr_db / 10.0)))


def decide(statistic: float, received_power: float, use_len: int,
           cfg: WatermarkConfig) -> bool:
    """True (detected) iff the correlation exceeds gamma times the expected amplitude"""
    if use_len < 1:
        raise ValueError("use_len must be >= 1")
    threshold = cfg.gamma * expected_amplitude(received_power, cfg.snr_db)
    return statistic > threshold


def detect(params: ParamVector, pn, cfg: WatermarkConfig) -> bool:
    chips = _as_chips(pn)
    use_len = min(cfg.use_len, params.shape[0], chips.shape[0])
    statistic, power = correlate(params, chips, use_len)
    return decide(statistic, power, use_len, cfg)


def detection_rates(snr_db: float, gamma: float, trials: int = 500, use_len: int = 25400,
                    degree: int = 15, seed: int = 0, chunk: int = 100) -> Tuple[float, float]:
    """Monte-Carlo (true positive rate, false alarm rate) on random N(0,1) vectors"""
    chips = base_sequence(degree).chips[:use_len].astype(np.float64)
    cfg = WatermarkConfig(snr_db=snr_db, gamma=gamma, use_len=use_len, degree=degree)
    rng = rng_for(seed, "pn-trials", snr_db)
    hits = false_alarms = 0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        clean = rng.normal(0.0, 1.0, size=(n, use_len))
        alphas = np.sqrt(np.mean(clean ** 2, axis=1) / 10.0 ** (snr_db / 10.0))
        marked = clean + alphas[:, None] * chips
        for batch, is_marked in ((marked, True), (clean, False)):
            stats = batch @ chips / use_len
            powers = np.mean(batch ** 2, axis=1)
            threshold = cfg.gamma * np.sqrt(powers / (1.0 + 10.0 ** (snr_db / 10.0)))
            count = int(np.sum(stats > threshold))
            if is_marked:
                hits += count
            else:
                false_alarms += count
        done += n
    return hits / trials, false_alarms / trials
