"""The forward (masking) process and the token-level denoising loss."""

import logging
import math

import numpy as np

from editdiff.types import CorruptionConfig, CorruptionError, MaskedSequence, Sequence, Vocab
from editdiff.utils import make_rng

logger = logging.getLogger(__name__)

# log(p) is clamped at log(PROB_FLOOR) so a zero on the true token stays finite
PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


def corrupt(x0: Sequence, cfg: CorruptionConfig, vocab: Vocab) -> MaskedSequence:
    """Independently replace each generated token with MASK with probability t.

    The prompt is never touched. The same (x0, cfg) always yields the same
    output, since the Bernoulli draws come from a stream seeded by cfg.
    """
    if {vocab.mask_id, vocab.del_id}.intersection(x0.tokens):
        raise CorruptionError("Cannot corrupt a sequence holding MASK or DEL")
    region = np.asarray(x0.region, dtype=np.int64)
    flags = make_rng(cfg.rng_seed).random(len(region)) < cfg.noise_level
    corrupted = np.where(flags, vocab.mask_id, region)
    logger.debug(
        f"Masked {int(flags.sum())}/{len(region)} positions at t={cfg.noise_level}"
    )
    return MaskedSequence(
        x0.with_region(corrupted.tolist()), tuple(bool(f) for f in flags)
    )


def denoising_loss(
    pred: np.ndarray,
    x0: Sequence,
    xt: MaskedSequence,
    t: float,
    log_floor: float = LOG_FLOOR,
) -> float:
    """Masked-token cross-entropy, normalized by t times the region length.

    'pred' holds one probability row per masked position of 'xt', in position
    order. The region length L excludes the prompt.
    """
    if not 0.0 < t <= 1.0:
        raise CorruptionError(f"Noise level must lie in (0, 1], got {t}")
    if len(x0) != len(xt.tokens) or x0.prompt_len != xt.prompt_len:
        raise CorruptionError("x0 and xt differ in shape")
    positions = xt.masked_positions
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[0] != len(positions):
        raise CorruptionError(
            f"Expected {len(positions)} prediction rows, got {pred.shape[:1]}"
        )
    if positions and not np.allclose(pred.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise CorruptionError("Prediction rows must each sum to 1")
    true_ids = np.asarray([x0.tokens[i] for i in positions], dtype=np.int64)
    if np.any(true_ids >= pred.shape[1]):
        raise CorruptionError("Prediction rows are narrower than the vocabulary")
    picked = pred[np.arange(len(positions)), true_ids]
    tiny = np.finfo(np.float64).tiny
    log_probs = np.maximum(np.log(np.maximum(picked, tiny)), log_floor)
    length = len(x0.region)
    if length == 0:
        raise CorruptionError("Generated region is empty")
    return float(-log_probs.sum() / (t * length))
