"""Acoustic token grids and the layered keep/mask structure.

A grid is a T x C integer matrix: T frames at a fixed frame rate, C
residual-codebook layers per frame, entries in [0, K-1]. Masking is
layered: for a target layer c, every layer below c stays visible, every
layer above c is fully hidden, and layer c itself is partially hidden.
Hidden entries are represented by the sentinel id K (each codebook layer
has its own mask token), never by zeroing, since 0 is a legal token id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TokenGrid",
    "LayeredMask",
    "MaskedGrid",
    "apply_mask",
    "masked_positions",
    "load_token_grid",
    "save_token_grid",
]


def _frozen_int_matrix(a, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TokenGrid:
    """A T x C grid of codebook token ids, frame-major.

    tokens[t, c] is the id emitted by codebook layer c at frame t.
    """

    tokens: np.ndarray
    vocab_size: int
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        arr = _frozen_int_matrix(self.tokens, "tokens")
        object.__setattr__(self, "tokens", arr)
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.frame_rate_hz <= 0:
            raise ValueError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        if arr.min() < 0 or arr.max() >= self.vocab_size:
            raise ValueError(
                f"token ids must lie in [0, {self.vocab_size - 1}], "
                f"found range [{arr.min()}, {arr.max()}]"
            )

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_codebooks(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class LayeredMask:
    """Binary keep matrix (1 = visible) obeying the layered rule.

    Layers below ``target_layer`` are all ones, layers above are all
    zeros; only the target layer may mix.
    """

    keep: np.ndarray
    target_layer: int

    def __post_init__(self):
        arr = _frozen_int_matrix(self.keep, "keep")
        object.__setattr__(self, "keep", arr)
        T, C = arr.shape
        c = self.target_layer
        if not 0 <= c < C:
            raise ValueError(f"target_layer {c} out of range for C={C}")
        if not ((arr == 0) | (arr == 1)).all():
            raise ValueError("keep entries must be 0 or 1")
        if c > 0 and not (arr[:, :c] == 1).all():
            raise ValueError(f"layers below target layer {c} must be fully kept")
        if c < C - 1 and not (arr[:, c + 1:] == 0).all():
            raise ValueError(f"layers above target layer {c} must be fully masked")

    @classmethod
    def from_keep_row(cls, keep_row, target_layer: int, num_codebooks: int) -> "LayeredMask":
        """Build the full keep matrix from the target layer's keep vector."""
        row = np.asarray(keep_row, dtype=np.int64)
        if row.ndim != 1 or row.size < 1:
            raise ValueError("keep_row must be a non-empty vector")
        keep = np.zeros((row.size, num_codebooks), dtype=np.int64)
        keep[:, :target_layer] = 1
        keep[:, target_layer] = row
        return cls(keep=keep, target_layer=target_layer)

    @classmethod
    def _trusted(cls, keep: np.ndarray, target_layer: int) -> "LayeredMask":
        # sampler hot loop only: caller guarantees the layered invariant
        obj = object.__new__(cls)
        keep.setflags(write=False)
        object.__setattr__(obj, "keep", keep)
        object.__setattr__(obj, "target_layer", target_layer)
        return obj

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep.shape


@dataclass(frozen=True)
class MaskedGrid:
    """A token grid with hidden entries replaced by the sentinel id K."""

    tokens: np.ndarray
    mask: LayeredMask
    vocab_size: int
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        arr = _frozen_int_matrix(self.tokens, "tokens")
        object.__setattr__(self, "tokens", arr)
        K = self.vocab_size
        keep = self.mask.keep
        if arr.shape != keep.shape:
            raise ValueError(f"tokens shape {arr.shape} != mask shape {keep.shape}")
        hidden = keep == 0
        if not (arr[hidden] == K).all():
            raise ValueError("masked entries must hold the sentinel id K")
        vis = arr[~hidden]
        if vis.size and (vis.min() < 0 or vis.max() >= K):
            raise ValueError("visible entries must be real token ids in [0, K-1]")

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_codebooks(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def _trusted(cls, tokens: np.ndarray, mask: LayeredMask, vocab_size: int,
                 frame_rate_hz: float) -> "MaskedGrid":
        # sampler hot loop only: caller guarantees sentinels match the mask
        obj = object.__new__(cls)
        tokens.setflags(write=False)
        object.__setattr__(obj, "tokens", tokens)
        object.__setattr__(obj, "mask", mask)
        object.__setattr__(obj, "vocab_size", vocab_size)
        object.__setattr__(obj, "frame_rate_hz", frame_rate_hz)
        return obj


def apply_mask(grid: TokenGrid, mask: LayeredMask) -> MaskedGrid:
    """Hide grid entries according to the layered mask.

    Entries with keep = 0 are replaced by the sentinel id K; the input
    grid is left untouched.
    """
    if grid.tokens.shape != mask.keep.shape:
        raise ValueError(
            f"grid shape {grid.tokens.shape} does not match mask shape {mask.keep.shape}"
        )
    tokens = np.where(mask.keep == 1, grid.tokens, grid.vocab_size)
    return MaskedGrid(
        tokens=tokens,
        mask=mask,
        vocab_size=grid.vocab_size,
        frame_rate_hz=grid.frame_rate_hz,
    )


def masked_positions(mask: LayeredMask) -> list[tuple[int, int]]:
    """Positions (t, c) hidden on the target layer, in ascending frame order.

    Layers above the target layer are also hidden in the input but are
    excluded here: they are not prediction targets.
    """
    c = mask.target_layer
    frames = np.flatnonzero(mask.keep[:, c] == 0)
    return [(int(t), c) for t in frames]


# --- file format -----------------------------------------------------------
#
# {"frame_rate_hz": 50.0, "vocab_size": 16, "num_codebooks": 3,
#  "tokens": [[...C ints...], ...T rows...]}

def save_token_grid(path, grid: TokenGrid) -> None:
    doc = {
        "frame_rate_hz": grid.frame_rate_hz,
        "vocab_size": grid.vocab_size,
        "num_codebooks": grid.num_codebooks,
        "tokens": grid.tokens.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_token_grid(path) -> TokenGrid:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    missing = {"frame_rate_hz", "vocab_size", "num_codebooks", "tokens"} - set(doc)
    if missing:
        raise ValueError(f"token grid file missing keys: {sorted(missing)}")
    tokens = np.asarray(doc["tokens"], dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != int(doc["num_codebooks"]):
        raise ValueError(
            f"tokens must be T x {doc['num_codebooks']}, got shape {tokens.shape}"
        )
    # TokenGrid validation rejects out-of-range ids.
    return TokenGrid(
        tokens=tokens,
        vocab_size=int(doc["vocab_size"]),
        frame_rate_hz=float(doc["frame_rate_hz"]),
    )
