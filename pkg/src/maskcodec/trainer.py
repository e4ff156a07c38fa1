"""Masked-token training: per-sample mask draws, condition dropout, AdamW.

Each sample in a batch draws its own masking timestep, target codebook
layer, condition-drop mode, and linguistic path (discrete vs continuous),
all from a generator keyed by (seed, step, sample slot). The batch loss
pools cross-entropy over every masked target-layer position, so samples
with more masked frames weigh proportionally more.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import net
from .conditioning import (
    ConditionBundle,
    DropFlags,
    assemble_backward,
    assemble_input,
    channel_zero_mask,
    sample_condition_drop,
)
from .grid import LayeredMask, TokenGrid, apply_mask
from .schedules import draw_training_mask
from .synth import Sample

__all__ = [
    "TrainConfig",
    "TrainResult",
    "masked_loss",
    "masked_loss_terms",
    "AdamWState",
    "adamw_init",
    "adamw_step",
    "train_step",
    "train",
    "evaluate_masked_accuracy",
]

# AdamW constants; decay is decoupled and applied to every parameter
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01

_EVAL_TAG = 0xE7A1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    learning_rate: float = 2e-4
    seed: int = 0
    drop_ratios: tuple[float, float, float, float] = (6 / 11, 2 / 11, 2 / 11, 1 / 11)
    continuous_ling_prob: float = 0.5
    spec_augment_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        ratios = tuple(float(r) for r in self.drop_ratios)
        if len(ratios) != 4 or any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ValueError(f"drop_ratios must be four probabilities, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"drop_ratios must sum to 1, got {sum(ratios)}")
        object.__setattr__(self, "drop_ratios", ratios)
        for name in ("continuous_ling_prob", "spec_augment_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def masked_loss(logits: np.ndarray, targets: TokenGrid, mask: LayeredMask):
    """Mean cross-entropy over masked target-layer positions.

    Returns (loss, count); an empty masked set reports (0.0, 0) by
    convention. Positions off the target layer and unmasked positions
    contribute nothing, so perturbing them cannot change the value.
    """
    total, count, _ = masked_loss_terms(logits, targets, mask, want_grad=False)
    return (total / count if count else 0.0), count


def masked_loss_terms(
    logits: np.ndarray, targets: TokenGrid, mask: LayeredMask, want_grad: bool = True
):
    """Summed masked cross-entropy, its count, and d(sum)/d(logits)."""
    T, C = targets.tokens.shape
    if logits.shape[:2] != (T, C):
        raise ValueError(f"logits shape {logits.shape[:2]} != grid shape {(T, C)}")
    if mask.keep.shape != (T, C):
        raise ValueError(f"mask shape {mask.keep.shape} != grid shape {(T, C)}")
    c = mask.target_layer
    t_idx = np.flatnonzero(mask.keep[:, c] == 0)
    if t_idx.size == 0:
        return 0.0, 0, (np.zeros_like(logits) if want_grad else None)
    rows = logits[t_idx, c, :]
    m = rows.max(axis=1, keepdims=True)
    z = rows - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + m
    tgt = targets.tokens[t_idx, c]
    picked = rows[np.arange(t_idx.size), tgt]
    total = float((lse[:, 0] - picked).sum())
    if not want_grad:
        return total, int(t_idx.size), None
    drows = np.exp(rows - lse)
    drows[np.arange(t_idx.size), tgt] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[t_idx, c, :] = drows
    return total, int(t_idx.size), dlogits


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamWState:
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_init(params: dict) -> AdamWState:
    return AdamWState(
        step_count=0,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float) -> None:
    """One decoupled-weight-decay update, in place, in param-name order."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for k in sorted(params):
        g = grads[k]
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params[k] -= lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + WEIGHT_DECAY * params[k])


# --- the step ----------------------------------------------------------------


def _sample_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, slot]))


def _bundle_for(sample: Sample, flags: DropFlags, use_continuous: bool) -> ConditionBundle:
    return ConditionBundle(
        prompt_grid=sample.prompt_grid,
        ling=sample.ling_cont if use_continuous else sample.ling,
        pitch=sample.pitch,
        prompt_ling=sample.prompt_ling_cont if use_continuous else sample.prompt_ling,
        prompt_pitch=sample.prompt_pitch,
        drop_flags=flags,
    )


def train_step(model: net.Model, batch: list[Sample], opt: AdamWState,
               cfg: TrainConfig, step_index: int) -> float:
    """One pooled-batch update; returns the batch loss.

    Per-sample randomness comes from (seed, step, slot)-keyed generators
    consumed in a fixed order (mask draw, drop mode, linguistic path,
    channel zeroing, forward dropout), so the whole step is reproducible
    and independent of any batch-parallel execution order.
    """
    mcfg = model.cfg
    d = mcfg.d_model
    tables = model.tables
    per_sample = []
    total_count = 0
    total_loss = 0.0
    for slot, sample in enumerate(batch):
        g = _sample_rng(cfg.seed, step_index, slot)
        draw = draw_training_mask(sample.grid.num_frames, mcfg.num_codebooks, g)
        flags = sample_condition_drop(g, cfg.drop_ratios)
        use_continuous = g.random() < cfg.continuous_ling_prob
        ch_mask = channel_zero_mask(d, cfg.spec_augment_fraction, g)

        mask = LayeredMask.from_keep_row(draw.keep_row, draw.target_layer, mcfg.num_codebooks)
        masked = apply_mask(sample.grid, mask)
        bundle = _bundle_for(sample, flags, use_continuous)
        X, a_cache = assemble_input(bundle, masked, tables, d, want_cache=True)
        X[:, ch_mask] = 0.0
        logits, f_cache = net.forward(
            model.params, mcfg, X, sample.prompt_grid.num_frames,
            train_mode=True, rng=g, want_cache=True,
        )
        loss_sum, count, dlogits = masked_loss_terms(logits, sample.grid, mask)
        total_loss += loss_sum
        total_count += count
        per_sample.append((count, dlogits, f_cache, a_cache, ch_mask))

    if total_count == 0:
        return 0.0  # nothing was masked anywhere; skip the update
    loss = total_loss / total_count
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss at step {step_index}")

    grad_acc: dict = {k: np.zeros_like(v) for k, v in model.params.items()}
    for count, dlogits, f_cache, a_cache, ch_mask in per_sample:
        if count == 0:
            continue
        grads, dX = net.backward(model.params, mcfg, f_cache, dlogits / total_count)
        dX[:, ch_mask] = 0.0
        net.merge_table_grads(grads, assemble_backward(dX, a_cache, tables), mcfg)
        for k in grad_acc:
            grad_acc[k] += grads[k]
    adamw_step(model.params, grad_acc, opt, cfg.learning_rate)
    return loss


# --- the loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    steps_run: int
    losses: list[float]
    evals: list[tuple[int, float]]

    @property
    def final_accuracy(self):
        return self.evals[-1][1] if self.evals else None


def train(
    model: net.Model,
    dataset: list[Sample],
    cfg: TrainConfig,
    heldout: list[Sample] | None = None,
    accuracy_target: float | None = None,
    eval_every: int = 250,
    history_path=None,
    checkpoint_every: int = 0,
    checkpoint_fn=None,
    log=None,
) -> TrainResult:
    """Run cfg.steps updates (early stop at accuracy_target if given).

    The held-out accuracy is measured with full conditioning on the
    discrete linguistic path. History rows are (step, loss, accuracy),
    accuracy blank except on eval steps. checkpoint_fn(step, model) fires
    every checkpoint_every steps when both are given.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    opt = adamw_init(model.params)
    losses: list[float] = []
    evals: list[tuple[int, float]] = []
    rows: list[tuple] = []
    steps_run = 0
    for step in range(cfg.steps):
        bidx = _sample_rng(cfg.seed, step, 0xBA7C).integers(0, len(dataset), size=cfg.batch_size)
        batch = [dataset[i] for i in bidx]
        loss = train_step(model, batch, opt, cfg, step)
        losses.append(loss)
        steps_run = step + 1
        acc = None
        if heldout and eval_every > 0 and steps_run % eval_every == 0:
            acc = evaluate_masked_accuracy(model, heldout, seed=cfg.seed)
            evals.append((steps_run, acc))
            if log:
                log(f"step {steps_run}: loss {loss:.4f}, heldout accuracy {acc:.4f}")
        rows.append((steps_run, loss, acc))
        if checkpoint_fn and checkpoint_every > 0 and steps_run % checkpoint_every == 0:
            checkpoint_fn(steps_run, model)
        if acc is not None and accuracy_target is not None and acc >= accuracy_target:
            break
    if history_path is not None:
        _write_history(history_path, rows)
    return TrainResult(steps_run=steps_run, losses=losses, evals=evals)


def _write_history(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "heldout_accuracy"])
        for step, loss, acc in rows:
            w.writerow([step, f"{loss:.8f}", "" if acc is None else f"{acc:.6f}"])


def evaluate_masked_accuracy(
    model: net.Model, samples: list[Sample], seed: int = 0, draws_per_sample: int = 2
) -> float:
    """Top-1 accuracy at masked target-layer positions, fully conditioned."""
    correct = 0
    total = 0
    for i, sample in enumerate(samples):
        for r in range(draws_per_sample):
            g = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_TAG, i, r]))
            draw = draw_training_mask(sample.grid.num_frames, model.cfg.num_codebooks, g)
            mask = LayeredMask.from_keep_row(
                draw.keep_row, draw.target_layer, model.cfg.num_codebooks
            )
            positions = np.flatnonzero(mask.keep[:, draw.target_layer] == 0)
            if positions.size == 0:
                continue
            masked = apply_mask(sample.grid, mask)
            bundle = _bundle_for(sample, DropFlags(), use_continuous=False)
            logits = model.logits(bundle, masked)
            pred = logits[positions, draw.target_layer, :].argmax(axis=1)
            correct += int((pred == sample.grid.tokens[positions, draw.target_layer]).sum())
            total += positions.size
    return correct / total if total else 0.0
