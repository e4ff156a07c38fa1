"""Per-frame conditioning: pitch, linguistics, speaker prompt, dropout.

Every conditioning channel is rendered as a d-dimensional vector per
frame and summed column-wise with the acoustic token embeddings. A
dropped channel contributes its own learned mask vector instead, so the
four guidance configurations (all / spk / ling / null) share one input
shape. The speaker prompt is a fully visible token-grid prefix; its own
linguistic and pitch conditions ride along on the prompt frames when
available.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .grid import MaskedGrid, TokenGrid

__all__ = [
    "PitchContour",
    "LinguisticSequence",
    "DropFlags",
    "ConditionBundle",
    "MODE_FLAGS",
    "EmbeddingTables",
    "pitch_embedding",
    "embed_pitch_contour",
    "upsample_linguistic",
    "sample_condition_drop",
    "assemble_input",
    "assemble_backward",
    "channel_zero_mask",
    "spec_augment_channels",
    "load_pitch_contour",
    "save_pitch_contour",
    "load_linguistic",
    "save_linguistic",
    "DEFAULT_DROP_RATIOS",
]

# all-conditioned : spk-conditioned : ling-conditioned : null-conditioned
DEFAULT_DROP_RATIOS = (6.0, 2.0, 2.0, 1.0)


@dataclass(frozen=True)
class PitchContour:
    """Fundamental-frequency track, one value per frame; 0 Hz = unvoiced."""

    f0_hz: np.ndarray
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        f = np.ascontiguousarray(self.f0_hz, dtype=np.float64)
        if f.ndim != 1 or f.size < 1:
            raise ValueError("f0_hz must be a non-empty vector")
        if (f < 0).any():
            raise ValueError("f0 values must be non-negative")
        f.setflags(write=False)
        object.__setattr__(self, "f0_hz", f)

    def __len__(self) -> int:
        return self.f0_hz.size


@dataclass(frozen=True)
class LinguisticSequence:
    """Slow-rate linguistic units, discrete token ids or continuous rows.

    ``frame_times`` holds each segment's start time in seconds; segments
    hold until the next start (nominal rate 8.33 Hz, one segment per
    0.12 s).
    """

    mode: str
    frame_times: np.ndarray
    tokens: np.ndarray | None = None
    vectors: np.ndarray | None = None
    vocab_size: int | None = None

    def __post_init__(self):
        if self.mode not in ("discrete", "continuous"):
            raise ValueError(f"mode must be 'discrete' or 'continuous', got {self.mode!r}")
        times = np.ascontiguousarray(self.frame_times, dtype=np.float64)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("frame_times must be a non-empty vector")
        if (np.diff(times) <= 0).any():
            raise ValueError("frame_times must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "frame_times", times)
        if self.mode == "discrete":
            if self.tokens is None or self.vectors is not None:
                raise ValueError("discrete mode populates tokens only")
            toks = np.ascontiguousarray(self.tokens, dtype=np.int64)
            if toks.shape != times.shape:
                raise ValueError("one token per segment required")
            if self.vocab_size is not None and (
                toks.min() < 0 or toks.max() >= self.vocab_size
            ):
                raise ValueError(f"token ids must lie in [0, {self.vocab_size - 1}]")
            toks.setflags(write=False)
            object.__setattr__(self, "tokens", toks)
        else:
            if self.vectors is None or self.tokens is not None:
                raise ValueError("continuous mode populates vectors only")
            vecs = np.ascontiguousarray(self.vectors, dtype=np.float64)
            if vecs.ndim != 2 or vecs.shape[0] != times.size:
                raise ValueError("one vector row per segment required")
            vecs.setflags(write=False)
            object.__setattr__(self, "vectors", vecs)

    def __len__(self) -> int:
        return self.frame_times.size


@dataclass(frozen=True)
class DropFlags:
    """Which conditioning channels are replaced by their mask vectors."""

    speaker: bool = False
    ling: bool = False
    pitch: bool = False

    @property
    def mode(self) -> str:
        for name, flags in MODE_FLAGS.items():
            if flags == self:
                return name
        return "custom"


MODE_FLAGS = {
    "all": DropFlags(False, False, False),
    "spk": DropFlags(False, False, True),
    "ling": DropFlags(True, False, True),
    "null": DropFlags(True, True, True),
}


@dataclass(frozen=True)
class ConditionBundle:
    """Everything conditioning a generation or training pass.

    ``pitch`` may be None (pitch-unconditioned operation). The prompt's
    own linguistic/pitch tracks are optional; absent tracks contribute
    the corresponding mask vectors on the prompt frames.
    """

    prompt_grid: TokenGrid
    ling: LinguisticSequence
    pitch: PitchContour | None = None
    prompt_ling: LinguisticSequence | None = None
    prompt_pitch: PitchContour | None = None
    drop_flags: DropFlags = DropFlags()

    def with_flags(self, flags: DropFlags) -> "ConditionBundle":
        return replace(self, drop_flags=flags)


def pitch_embedding(f: float, d: int) -> np.ndarray:
    """Sinusoidal embedding of one frequency, sine block then cosine block.

    Entry i is sin(log(1+f) / 10000^(2i/d)) for i < d/2 and the matching
    cosine for i >= d/2; the two blocks are concatenated, not interleaved.
    The 1 Hz offset inside the log keeps f = 0 (unvoiced) well defined.
    """
    if f < 0:
        raise ValueError(f"frequency must be non-negative, got {f}")
    if d <= 0 or d % 2 != 0:
        raise ValueError(f"embedding dimension must be a positive even integer, got {d}")
    half = d // 2
    divisors = np.power(10000.0, 2.0 * np.arange(half) / d)
    angle = math.log1p(f) / divisors
    return np.concatenate([np.sin(angle), np.cos(angle)])


def embed_pitch_contour(contour: PitchContour, d: int) -> np.ndarray:
    """Framewise pitch embedding, shape (T, d)."""
    if d <= 0 or d % 2 != 0:
        raise ValueError(f"embedding dimension must be a positive even integer, got {d}")
    half = d // 2
    divisors = np.power(10000.0, 2.0 * np.arange(half) / d)
    angle = np.log1p(contour.f0_hz)[:, None] / divisors[None, :]
    return np.concatenate([np.sin(angle), np.cos(angle)], axis=1)


def upsample_linguistic(
    seq: LinguisticSequence, target_frames: int, target_rate: float
) -> np.ndarray:
    """Align a slow-rate sequence to the model frame grid by hold.

    Target frame t (at time t / target_rate) takes the segment with the
    latest start time not exceeding it. Returns ids (T,) in discrete mode
    or rows (T, D) in continuous mode.
    """
    if target_frames < 1:
        raise ValueError(f"target_frames must be positive, got {target_frames}")
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    times = np.arange(target_frames, dtype=np.float64) / target_rate
    idx = np.searchsorted(seq.frame_times, times, side="right") - 1
    idx = np.clip(idx, 0, len(seq) - 1)
    if seq.mode == "discrete":
        return seq.tokens[idx]
    return seq.vectors[idx]


def sample_condition_drop(
    rng: np.random.Generator, ratios: tuple[float, float, float, float] = DEFAULT_DROP_RATIOS
) -> DropFlags:
    """Draw one of the four conditioning configurations.

    Ratios order is (all, spk, ling, null); the default 6:2:2:1 keeps all
    conditions a bit more than half the time.
    """
    p = np.asarray(ratios, dtype=np.float64)
    if p.shape != (4,) or (p < 0).any() or p.sum() <= 0:
        raise ValueError(f"ratios must be four non-negative numbers, got {ratios}")
    mode = ("all", "spk", "ling", "null")[int(rng.choice(4, p=p / p.sum()))]
    return MODE_FLAGS[mode]


# --- input assembly ---------------------------------------------------------


@dataclass
class EmbeddingTables:
    """Learned tables consumed by assembly; views into the model params.

    ``tok[c]`` has K+1 rows, the last being layer c's mask embedding.
    The continuous linguistic path is a linear map, a LayerNorm, and a
    second linear map.
    """

    tok: list[np.ndarray]
    ling: np.ndarray
    ling_mask: np.ndarray
    pitch_mask: np.ndarray
    cont_w1: np.ndarray
    cont_b1: np.ndarray
    cont_ln_g: np.ndarray
    cont_ln_b: np.ndarray
    cont_w2: np.ndarray
    cont_b2: np.ndarray

    @property
    def d_model(self) -> int:
        return self.ling.shape[1]


_LN_EPS = 1e-5


def _cont_project(U: np.ndarray, tables: EmbeddingTables):
    """Continuous-path projection: linear, LayerNorm, linear (with cache)."""
    h = U @ tables.cont_w1 + tables.cont_b1
    mu = h.mean(axis=1, keepdims=True)
    xc = h - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    g = xhat * tables.cont_ln_g + tables.cont_ln_b
    y = g @ tables.cont_w2 + tables.cont_b2
    cache = {"U": U, "xhat": xhat, "inv": inv, "g": g}
    return y, cache


def _cont_project_backward(dY: np.ndarray, cache: dict, tables: EmbeddingTables):
    U, xhat, inv, g = cache["U"], cache["xhat"], cache["inv"], cache["g"]
    grads = {
        "cont_w2": g.T @ dY,
        "cont_b2": dY.sum(axis=0),
    }
    dg = dY @ tables.cont_w2.T
    grads["cont_ln_g"] = (dg * xhat).sum(axis=0)
    grads["cont_ln_b"] = dg.sum(axis=0)
    dxhat = dg * tables.cont_ln_g
    # LayerNorm backward over the feature axis
    dmean = dxhat.mean(axis=1, keepdims=True)
    dcov = (dxhat * xhat).mean(axis=1, keepdims=True)
    dh = (dxhat - dmean - xhat * dcov) * inv
    grads["cont_w1"] = U.T @ dh
    grads["cont_b1"] = dh.sum(axis=0)
    return grads


def _ling_rows(
    seq: LinguisticSequence | None,
    dropped: bool,
    num_frames: int,
    frame_rate: float,
    tables: EmbeddingTables,
):
    """Linguistic channel for one frame block: (rows, cache-part)."""
    d = tables.d_model
    if dropped or seq is None:
        rows = np.broadcast_to(tables.ling_mask, (num_frames, d))
        return rows, {"kind": "mask"}
    if seq.mode == "discrete":
        ids = upsample_linguistic(seq, num_frames, frame_rate)
        if ids.max() >= tables.ling.shape[0]:
            raise ValueError(
                f"linguistic id {ids.max()} outside table of {tables.ling.shape[0]} rows"
            )
        return tables.ling[ids], {"kind": "table", "ids": ids}
    U = upsample_linguistic(seq, num_frames, frame_rate)
    if U.shape[1] != tables.cont_w1.shape[0]:
        raise ValueError(
            f"continuous linguistic width {U.shape[1]} != projection input "
            f"{tables.cont_w1.shape[0]}"
        )
    rows, cont_cache = _cont_project(U, tables)
    return rows, {"kind": "cont", "cache": cont_cache}


def _pitch_rows(
    contour: PitchContour | None,
    dropped: bool,
    num_frames: int,
    tables: EmbeddingTables,
):
    d = tables.d_model
    if dropped or contour is None:
        rows = np.broadcast_to(tables.pitch_mask, (num_frames, d))
        return rows, True
    if len(contour) != num_frames:
        raise ValueError(
            f"pitch contour length {len(contour)} != frame count {num_frames}"
        )
    return embed_pitch_contour(contour, d), False


def assemble_input(
    bundle: ConditionBundle,
    acoustic: MaskedGrid,
    tables: EmbeddingTables,
    d: int,
    want_cache: bool = False,
):
    """Column-wise sum of all conditioning channels, prompt frames first.

    Each frame's vector is the sum of the C acoustic token embeddings
    (sentinel id K selects a layer's mask embedding), the linguistic
    embedding, and the pitch embedding. Dropped channels contribute their
    mask vectors; a dropped speaker masks every channel on the prompt
    frames. Output shape is (T_prompt + T_source, d).
    """
    if tables.d_model != d:
        raise ValueError(f"tables are {tables.d_model}-dimensional, expected {d}")
    C = acoustic.num_codebooks
    if bundle.prompt_grid.num_codebooks != C:
        raise ValueError(
            f"prompt has {bundle.prompt_grid.num_codebooks} codebooks, source has {C}"
        )
    if len(tables.tok) != C:
        raise ValueError(f"{len(tables.tok)} token tables for {C} codebooks")
    Tp = bundle.prompt_grid.num_frames
    Ts = acoustic.num_frames
    rate = acoustic.frame_rate_hz
    flags = bundle.drop_flags
    K = acoustic.vocab_size

    # Acoustic token ids per frame block; mask row K stands in where hidden.
    if flags.speaker:
        prompt_ids = np.full((Tp, C), K, dtype=np.int64)
    else:
        prompt_ids = bundle.prompt_grid.tokens
    tok_ids = np.concatenate([prompt_ids, acoustic.tokens], axis=0)

    X = np.zeros((Tp + Ts, d), dtype=np.float64)
    for c in range(C):
        X += tables.tok[c][tok_ids[:, c]]

    p_ling, p_ling_cache = _ling_rows(bundle.prompt_ling, flags.speaker, Tp, rate, tables)
    s_ling, s_ling_cache = _ling_rows(bundle.ling, flags.ling, Ts, rate, tables)
    X[:Tp] += p_ling
    X[Tp:] += s_ling

    p_pitch, p_pitch_masked = _pitch_rows(bundle.prompt_pitch, flags.speaker, Tp, tables)
    s_pitch, s_pitch_masked = _pitch_rows(bundle.pitch, flags.pitch, Ts, tables)
    X[:Tp] += p_pitch
    X[Tp:] += s_pitch

    if not want_cache:
        return X
    cache = {
        "T_prompt": Tp,
        "T_total": Tp + Ts,
        "C": C,
        "num_tok_rows": [t.shape[0] for t in tables.tok],
        "tok_ids": tok_ids,
        "ling": ((0, Tp, p_ling_cache), (Tp, Tp + Ts, s_ling_cache)),
        "pitch_mask_rows": (p_pitch_masked, s_pitch_masked),
    }
    return X, cache


def assemble_backward(dX: np.ndarray, cache: dict, tables: EmbeddingTables) -> dict:
    """Gradients of the assembled input w.r.t. every learned table.

    Returns arrays keyed like EmbeddingTables fields ("tok" is a per-layer
    list). The sinusoidal pitch embedding has no parameters.
    """
    Tp = cache["T_prompt"]
    grads: dict = {
        "tok": [np.zeros((n, dX.shape[1])) for n in cache["num_tok_rows"]],
        "ling": np.zeros_like(tables.ling),
        "ling_mask": np.zeros_like(tables.ling_mask),
        "pitch_mask": np.zeros_like(tables.pitch_mask),
    }
    for key in ("cont_w1", "cont_b1", "cont_ln_g", "cont_ln_b", "cont_w2", "cont_b2"):
        grads[key] = np.zeros_like(getattr(tables, key))

    tok_ids = cache["tok_ids"]
    for c in range(cache["C"]):
        np.add.at(grads["tok"][c], tok_ids[:, c], dX)

    for lo, hi, part in cache["ling"]:
        dpart = dX[lo:hi]
        if part["kind"] == "mask":
            grads["ling_mask"] += dpart.sum(axis=0)
        elif part["kind"] == "table":
            np.add.at(grads["ling"], part["ids"], dpart)
        else:
            for key, g in _cont_project_backward(dpart, part["cache"], tables).items():
                grads[key] += g

    p_masked, s_masked = cache["pitch_mask_rows"]
    if p_masked and Tp > 0:
        grads["pitch_mask"] += dX[:Tp].sum(axis=0)
    if s_masked:
        grads["pitch_mask"] += dX[Tp:].sum(axis=0)
    return grads


def channel_zero_mask(d: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean vector marking floor(fraction * d) channels for zeroing."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    n = int(math.floor(fraction * d))
    mask = np.zeros(d, dtype=bool)
    if n > 0:
        mask[rng.choice(d, size=n, replace=False)] = True
    return mask


def spec_augment_channels(x: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Zero a random subset of channels across all frames (training only)."""
    mask = channel_zero_mask(x.shape[1], fraction, rng)
    out = x.copy()
    out[:, mask] = 0.0
    return out


# --- file formats -----------------------------------------------------------
#
# pitch:      {"frame_rate_hz": 50.0, "f0_hz": [...]}
# linguistic: {"mode": "discrete", "tokens": [...], "frame_times": [...],
#              "vocab_size": 8}
#          or {"mode": "continuous", "vectors": [[...]], "frame_times": [...]}

def save_pitch_contour(path, contour: PitchContour) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"frame_rate_hz": contour.frame_rate_hz, "f0_hz": contour.f0_hz.tolist()}, fh
        )
        fh.write("\n")


def load_pitch_contour(path) -> PitchContour:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    missing = {"frame_rate_hz", "f0_hz"} - set(doc)
    if missing:
        raise ValueError(f"pitch file missing keys: {sorted(missing)}")
    return PitchContour(
        f0_hz=np.asarray(doc["f0_hz"], dtype=np.float64),
        frame_rate_hz=float(doc["frame_rate_hz"]),
    )


def save_linguistic(path, seq: LinguisticSequence) -> None:
    doc: dict = {"mode": seq.mode, "frame_times": seq.frame_times.tolist()}
    if seq.mode == "discrete":
        doc["tokens"] = seq.tokens.tolist()
        if seq.vocab_size is not None:
            doc["vocab_size"] = seq.vocab_size
    else:
        doc["vectors"] = seq.vectors.tolist()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_linguistic(path) -> LinguisticSequence:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "mode" not in doc or "frame_times" not in doc:
        raise ValueError("linguistic file needs 'mode' and 'frame_times'")
    times = np.asarray(doc["frame_times"], dtype=np.float64)
    if doc["mode"] == "discrete":
        if "tokens" not in doc:
            raise ValueError("discrete linguistic file needs 'tokens'")
        return LinguisticSequence(
            mode="discrete",
            frame_times=times,
            tokens=np.asarray(doc["tokens"], dtype=np.int64),
            vocab_size=int(doc["vocab_size"]) if "vocab_size" in doc else None,
        )
    if doc["mode"] == "continuous":
        if "vectors" not in doc:
            raise ValueError("continuous linguistic file needs 'vectors'")
        return LinguisticSequence(
            mode="continuous",
            frame_times=times,
            vectors=np.asarray(doc["vectors"], dtype=np.float64),
        )
    raise ValueError(f"unknown linguistic mode {doc['mode']!r}")
