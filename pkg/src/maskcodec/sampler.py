"""Iterative unmasking generation, one codebook layer at a time.

Starting from an all-masked grid, each codebook layer gets a stage of
steps. A step runs the guidance passes, proposes a token for every still
masked frame of the target layer (top-k then top-p truncated sampling),
scores each proposal by its combined log-softmax probability, picks the
cosine-scheduled number of positions by Gumbel-perturbed confidence, and
commits them. Committed tokens are never revisited.

All randomness is keyed by (seed, stage, step, purpose), so a run is a
pure function of its config.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .conditioning import ConditionBundle
from .grid import LayeredMask, MaskedGrid, TokenGrid
from .guidance import GuidanceWeights, combine, run_passes
from .schedules import DEFAULT_STEPS_PER_LAYER_9, StepBudget, unmask_counts

__all__ = [
    "SamplerConfig",
    "default_step_budget",
    "step_rng",
    "select_positions",
    "truncated_distribution",
    "sample_token",
    "generate",
]

# rng purpose tags
RNG_PROPOSAL = 0
RNG_SELECT = 1


@dataclass(frozen=True)
class SamplerConfig:
    step_budget: StepBudget
    top_k: int = 35
    top_p: float = 0.9
    seed: int = 0
    weights: GuidanceWeights = GuidanceWeights()
    pitch_conditioned: bool = False

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


def default_step_budget(num_codebooks: int) -> StepBudget:
    """Reference budget: the canonical 9-layer split, truncated or padded."""
    base = DEFAULT_STEPS_PER_LAYER_9
    if num_codebooks <= len(base):
        return StepBudget(base[:num_codebooks])
    return StepBudget(base + (1,) * (num_codebooks - len(base)))


def step_rng(seed: int, stage: int, step: int, tag: int) -> np.random.Generator:
    """Independent generator for one (stage, step, purpose) slot."""
    return np.random.default_rng(np.random.SeedSequence([seed, stage, step, tag]))


def select_positions(confidences, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of the `count` highest Gumbel-perturbed confidences.

    By the Gumbel-max identity this samples positions without replacement
    with probabilities softmax(confidences). When count equals the number
    of candidates every index is returned and no noise is drawn.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    n = conf.size
    if count > n:
        raise ValueError(f"cannot select {count} of {n} masked positions")
    if count == 0:
        return np.empty(0, dtype=np.int64)
    if count == n:
        return np.arange(n, dtype=np.int64)
    perturbed = conf + rng.gumbel(size=n)
    order = np.argsort(-perturbed, kind="stable")
    return np.sort(order[:count])


def truncated_distribution(logits, top_k: int, top_p: float):
    """Support ids and probabilities after top-k then top-p truncation.

    Keeps the k highest-logit classes (ties broken by lower id), then the
    smallest descending-probability prefix with cumulative mass >= top_p,
    renormalized.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise FloatingPointError("non-finite logits")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    k = min(top_k, z.size)
    order = np.argsort(-z, kind="stable")[:k]
    zz = z[order] - z[order].max()
    probs = np.exp(zz)
    probs /= probs.sum()
    cum = np.cumsum(probs)
    n_keep = min(int(np.searchsorted(cum, top_p, side="left")) + 1, k)
    ids = order[:n_keep]
    kept = probs[:n_keep]
    return ids, kept / kept.sum()


def sample_token(logits, top_k: int, top_p: float, rng: np.random.Generator) -> int:
    """Draw one token id from the truncated softmax via a single uniform."""
    ids, probs = truncated_distribution(logits, top_k, top_p)
    u = rng.random()
    j = min(int(np.searchsorted(np.cumsum(probs), u, side="right")), ids.size - 1)
    return int(ids[j])


def _log_softmax_rows(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=1, keepdims=True)
    z = rows - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def generate(
    bundle: ConditionBundle,
    num_frames: int,
    cfg: SamplerConfig,
    model,
) -> TokenGrid:
    """Unmask a T x C grid stage by stage; bit-reproducible given cfg.seed.

    Within stage c the layers below c are fully committed, layers above
    stay fully masked, and positions of layer c are committed in
    cosine-scheduled batches. Proposals for unselected positions are
    discarded and redrawn at the next step with the updated context.
    """
    C = model.cfg.num_codebooks
    K = model.cfg.vocab_size
    steps_per_layer = cfg.step_budget.steps_per_layer
    if len(steps_per_layer) != C:
        raise ValueError(
            f"step budget covers {len(steps_per_layer)} layers, model has {C}"
        )
    if num_frames < 1:
        raise ValueError(f"num_frames must be positive, got {num_frames}")
    if bundle.prompt_grid.vocab_size != K:
        raise ValueError(
            f"prompt vocab {bundle.prompt_grid.vocab_size} != model vocab {K}"
        )
    if cfg.pitch_conditioned:
        if bundle.pitch is None:
            raise ValueError("pitch-conditioned sampling needs a pitch contour")
        if len(bundle.pitch) != num_frames:
            raise ValueError(
                f"pitch length {len(bundle.pitch)} != source frames {num_frames}"
            )
    elif bundle.pitch is not None:
        bundle = replace(bundle, pitch=None)

    rate = bundle.prompt_grid.frame_rate_hz
    tokens = np.full((num_frames, C), K, dtype=np.int64)
    for c in range(C):
        masked = np.ones(num_frames, dtype=bool)
        counts = unmask_counts(num_frames, steps_per_layer[c])
        for s, n_unmask in enumerate(counts):
            if n_unmask == 0:
                continue
            keep = np.zeros((num_frames, C), dtype=np.int64)
            keep[:, :c] = 1
            keep[:, c] = ~masked
            # loop state satisfies the grid invariants by construction
            state = MaskedGrid._trusted(
                tokens.copy(), LayeredMask._trusted(keep, c), K, rate)
            quad = run_passes(model, bundle, state, cfg.weights)
            layer_logits = combine(quad, cfg.weights)[:, c, :]

            midx = np.flatnonzero(masked)
            prop_rng = step_rng(cfg.seed, c, s, RNG_PROPOSAL)
            proposals = np.empty(midx.size, dtype=np.int64)
            for i, t in enumerate(midx):
                proposals[i] = sample_token(layer_logits[t], cfg.top_k, cfg.top_p, prop_rng)
            # confidence = combined (untruncated) log-softmax of the proposal
            logp = _log_softmax_rows(layer_logits[midx])
            conf = logp[np.arange(midx.size), proposals]
            chosen = select_positions(conf, n_unmask, step_rng(cfg.seed, c, s, RNG_SELECT))
            commit = midx[chosen]
            tokens[commit, c] = proposals[chosen]
            masked[commit] = False
    return TokenGrid(tokens=tokens, vocab_size=K, frame_rate_hz=rate)
