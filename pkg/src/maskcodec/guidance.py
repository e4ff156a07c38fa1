"""Triple classifier-free guidance over speaker, pitch and linguistics.

The combined logit is anchored at the linguistic-only pass, not the
unconditional one:

    out = ling + w_all*(full - ling) + w_spk*(spk - ling) + w_ling*(ling - null)

where full = (prompt, ling, pitch), spk = (prompt, ling), ling = (ling)
and null = (nothing). Passes whose coefficient is zero are never run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import MODE_FLAGS, ConditionBundle

__all__ = [
    "GuidanceWeights",
    "LogitQuadruple",
    "combine",
    "required_passes",
    "run_passes",
    "PRESETS",
]

# (w_all, w_spk, w_ling) presets; "all" assumes a pitch contour is supplied
PRESETS = {
    "all": (1.5, 1.0, 1.0),
    "spk": (0.0, 2.0, 0.5),
    "accent": (0.0, 2.5, 0.5),
}


@dataclass(frozen=True)
class GuidanceWeights:
    w_all: float = 0.0
    w_spk: float = 0.0
    w_ling: float = 0.0

    def __post_init__(self):
        vals = (self.w_all, self.w_spk, self.w_ling)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"guidance weights must be finite, got {vals}")

    @classmethod
    def preset(cls, name: str) -> "GuidanceWeights":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
        return cls(*PRESETS[name])


@dataclass(frozen=True)
class LogitQuadruple:
    """The four conditional logit tensors (aliasing between slots is fine)."""

    full: np.ndarray
    spk: np.ndarray
    ling: np.ndarray
    null: np.ndarray

    def __post_init__(self):
        shape = self.ling.shape
        for name in ("full", "spk", "null"):
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"logit shape mismatch: {name} {got} vs ling {shape}")


def combine(q: LogitQuadruple, w: GuidanceWeights) -> np.ndarray:
    """Guided logits; zero-coefficient terms are skipped, never read.

    Short-circuits keep the advertised exact identities: w=(0,0,0) returns
    q.ling itself-wise and w=(1,0,0) returns q.full bitwise, which plain
    ling + 1.0*(full - ling) would miss in floating point.
    """
    w_all, w_spk, w_ling = w.w_all, w.w_spk, w.w_ling
    if w_spk == 0.0 and w_ling == 0.0:
        if w_all == 0.0:
            return q.ling.copy()
        if w_all == 1.0:
            return q.full.copy()
    out = q.ling.astype(np.float64, copy=True)
    if w_all != 0.0:
        out += w_all * (q.full - q.ling)
    if w_spk != 0.0:
        out += w_spk * (q.spk - q.ling)
    if w_ling != 0.0:
        out += w_ling * (q.ling - q.null)
    return out


def required_passes(pitch_present: bool, w: GuidanceWeights) -> list[str]:
    """Minimal condition configurations whose logits combine() will read.

    Without a pitch contour the full configuration collapses to spk, so
    the full slot is served by the spk pass (aliased, not recomputed).
    """
    passes = ["ling"]
    if w.w_all != 0.0:
        passes.append("spk" if not pitch_present else "full")
    if w.w_spk != 0.0 and "spk" not in passes:
        passes.append("spk")
    if w.w_ling != 0.0:
        passes.append("null")
    order = {"full": 0, "spk": 1, "ling": 2, "null": 3}
    return sorted(set(passes), key=order.__getitem__)


def run_passes(
    model,
    bundle: ConditionBundle,
    acoustic,
    w: GuidanceWeights,
) -> LogitQuadruple:
    """Evaluate the needed conditioning configurations and fill all slots.

    Unneeded slots alias the ling tensor so shapes agree; combine() never
    multiplies them by a nonzero coefficient. A bundle without pitch makes
    the full slot alias the spk pass.
    """
    pitch_present = bundle.pitch is not None
    needed = required_passes(pitch_present, w)
    # pass names follow the logit slots; the drop-flag table keys the full
    # configuration as "all"
    flag_mode = {"full": "all", "spk": "spk", "ling": "ling", "null": "null"}
    logits: dict[str, np.ndarray] = {}
    for name in needed:
        logits[name] = model.logits(bundle.with_flags(MODE_FLAGS[flag_mode[name]]), acoustic)
    ling = logits["ling"]
    spk = logits.get("spk", ling)
    full = logits.get("full", spk if not pitch_present else ling)
    return LogitQuadruple(
        full=full, spk=spk, ling=ling, null=logits.get("null", ling)
    )
