"""Verification instruments: FPC, an exact sampler oracle, CFG probes.

The oracle re-derives the sampler's per-step distribution from first
principles (its own truncation arithmetic, Plackett-Luce enumeration of
Gumbel top-count selection, exhaustive proposal products) so agreement
with Monte-Carlo runs of the real sampler is a genuine two-route check.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

from .conditioning import (
    ConditionBundle,
    LinguisticSequence,
    PitchContour,
    upsample_linguistic,
)
from .grid import LayeredMask, MaskedGrid, TokenGrid
from .guidance import GuidanceWeights
from .sampler import SamplerConfig, generate
from .schedules import StepBudget, unmask_counts
from .synth import Sample, World

__all__ = [
    "UndefinedMetricError",
    "OracleInstanceError",
    "FpcReport",
    "fpc",
    "brute_force_step_oracle",
    "brute_force_trajectory_distribution",
    "TableModel",
    "random_logits_table",
    "monte_carlo_distribution",
    "total_variation",
    "ProbeSetting",
    "ProbeResult",
    "cfg_probe",
    "write_probe_csv",
    "PROBE_CSV_HEADER",
]


_PROBE_TAG = 0xBE


class UndefinedMetricError(ValueError):
    """The metric has no value on these inputs (too little voiced overlap)."""


class OracleInstanceError(ValueError):
    """The exact oracle refuses instances too large to enumerate."""


# --- F0 Pearson correlation ---------------------------------------------------


@dataclass(frozen=True)
class FpcReport:
    fpc: float
    voiced_frames_used: int


def fpc(a: PitchContour, b: PitchContour) -> FpcReport:
    """Pearson correlation of log(1+f) over mutually voiced frames.

    Frames where either contour is 0 Hz (unvoiced) are excluded. Needs at
    least two shared voiced frames and nonzero variance on both sides.
    """
    if len(a) != len(b):
        raise ValueError(f"contour lengths differ: {len(a)} vs {len(b)}")
    both = (a.f0_hz > 0) & (b.f0_hz > 0)
    n = int(both.sum())
    if n < 2:
        raise UndefinedMetricError(f"need >= 2 mutually voiced frames, have {n}")
    x = np.log1p(a.f0_hz[both])
    y = np.log1p(b.f0_hz[both])
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float((xc * xc).sum()))
    sy = math.sqrt(float((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("zero variance in a contour over the voiced overlap")
    r = float((xc * yc).sum()) / (sx * sy)
    return FpcReport(fpc=max(-1.0, min(1.0, r)), voiced_frames_used=n)


# --- exact sampler oracle -----------------------------------------------------
#
# States are tuples of layer-0 token ids with the sentinel K at masked
# positions; the logits table maps each state to its (T, K) combined
# logits for the target layer.


def _oracle_truncated(logits_row, top_k: int, top_p: float):
    """Independent top-k/top-p derivation (scalar math, no numpy)."""
    vals = [float(v) for v in logits_row]
    order = sorted(range(len(vals)), key=lambda i: (-vals[i], i))[:top_k]
    m = max(vals[i] for i in order)
    ws = [math.exp(vals[i] - m) for i in order]
    z = sum(ws)
    probs = [w / z for w in ws]
    acc = 0.0
    keep = len(order)
    for j, p in enumerate(probs):
        acc += p
        if acc >= top_p:
            keep = j + 1
            break
    kept = probs[:keep]
    z2 = sum(kept)
    return [(order[j], kept[j] / z2) for j in range(keep)]


def _selection_distribution(confs, count: int):
    """Gumbel top-count == Plackett-Luce draws without replacement."""
    n = len(confs)
    if count >= n:
        return {frozenset(range(n)): 1.0}
    if count == 0:
        return {frozenset(): 1.0}
    m = max(confs)
    w = [math.exp(c - m) for c in confs]
    dist: dict = defaultdict(float)
    for perm in itertools.permutations(range(n), count):
        p = 1.0
        denom = sum(w)
        for i in perm:
            p *= w[i] / denom
            denom -= w[i]
        dist[frozenset(perm)] += p
    return dict(dist)


def brute_force_step_oracle(
    logits_table: dict, state: MaskedGrid, cfg: SamplerConfig, count: int
) -> dict:
    """Exact next-state distribution for one sampler step.

    Enumerates every (proposal combination, selected position set) pair:
    proposals follow the truncated softmax independently per masked
    position, selection follows the Gumbel-max law over combined
    log-softmax confidences, and the selected proposals are committed.
    Returns {next-state tuple: probability}.
    """
    count = int(count)  # itertools.permutations rejects numpy ints
    T, C = state.tokens.shape
    K = state.vocab_size
    if C != 1:
        raise OracleInstanceError(f"oracle enumerates single-codebook grids only, C={C}")
    if T * K > 64:
        raise OracleInstanceError(f"instance too large: T*K = {T * K} > 64")
    key = tuple(int(v) for v in state.tokens[:, 0])
    logits = np.asarray(logits_table[key], dtype=np.float64)
    masked = [t for t in range(T) if key[t] == K]
    if count > len(masked):
        raise ValueError(f"cannot commit {count} of {len(masked)} masked positions")

    supports = [_oracle_truncated(logits[t], cfg.top_k, cfg.top_p) for t in masked]
    log_z = []
    for t in masked:
        m = float(logits[t].max())
        log_z.append(m + math.log(sum(math.exp(float(v) - m) for v in logits[t])))

    out: dict = defaultdict(float)
    for combo in itertools.product(*supports):
        p_prop = 1.0
        for _, p in combo:
            p_prop *= p
        confs = [float(logits[masked[i]][tok]) - log_z[i] for i, (tok, _) in enumerate(combo)]
        for sel, p_sel in _selection_distribution(confs, count).items():
            nxt = list(key)
            for i in sel:
                nxt[masked[i]] = combo[i][0]
            out[tuple(nxt)] += p_prop * p_sel
    return dict(out)


def _state_grid(key, K: int, frame_rate_hz: float = 50.0) -> MaskedGrid:
    tokens = np.asarray(key, dtype=np.int64)[:, None]
    keep_row = (tokens[:, 0] != K).astype(np.int64)
    mask = LayeredMask.from_keep_row(keep_row, 0, 1)
    return MaskedGrid(tokens=tokens, mask=mask, vocab_size=K, frame_rate_hz=frame_rate_hz)


def brute_force_trajectory_distribution(
    logits_table: dict, num_frames: int, cfg: SamplerConfig, vocab_size: int
) -> dict:
    """Exact distribution over fully unmasked grids after a whole stage."""
    if len(cfg.step_budget.steps_per_layer) != 1:
        raise OracleInstanceError("trajectory oracle handles a single codebook layer")
    K = vocab_size
    counts = unmask_counts(num_frames, cfg.step_budget.steps_per_layer[0])
    dist = {tuple([K] * num_frames): 1.0}
    for count in counts:
        if count == 0:
            continue
        nxt: dict = defaultdict(float)
        for key, p in dist.items():
            step = brute_force_step_oracle(logits_table, _state_grid(key, K), cfg, count)
            for key2, p2 in step.items():
                nxt[key2] += p * p2
        dist = dict(nxt)
    return dist


class TableModel:
    """Frozen lookup-table model: state -> (T, C, K) logits.

    Stands in for the network in sampler verification; the logits depend
    on the visible tokens exactly as a deterministic net's would, while
    staying enumerable. Conditioning flags are ignored.
    """

    @dataclass(frozen=True)
    class _Cfg:
        num_codebooks: int
        vocab_size: int

    def __init__(self, table: dict, vocab_size: int):
        self.table = table
        self.cfg = TableModel._Cfg(num_codebooks=1, vocab_size=vocab_size)

    def logits(self, bundle, acoustic: MaskedGrid, train_mode: bool = False, rng=None):
        key = tuple(int(v) for v in acoustic.tokens[:, 0])
        return np.asarray(self.table[key], dtype=np.float64)[:, None, :]


def random_logits_table(num_frames: int, vocab_size: int, seed: int, scale: float = 2.0) -> dict:
    """State-dependent random logits for every enumerable masked state."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AB1E]))
    table = {}
    for key in itertools.product(range(vocab_size + 1), repeat=num_frames):
        table[key] = rng.normal(0.0, scale, size=(num_frames, vocab_size))
    return table


def monte_carlo_distribution(
    table: dict, num_frames: int, cfg: SamplerConfig, vocab_size: int, runs: int,
    prompt_token: int = 0,
) -> dict:
    """Empirical distribution of real sampler outputs over seeded runs."""
    model = TableModel(table, vocab_size)
    prompt = TokenGrid(
        tokens=np.full((1, 1), prompt_token, dtype=np.int64), vocab_size=vocab_size
    )
    ling = LinguisticSequence(
        mode="discrete",
        frame_times=np.array([0.0]),
        tokens=np.array([0]),
        vocab_size=1,
    )
    bundle = ConditionBundle(prompt_grid=prompt, ling=ling)
    counts: dict = defaultdict(int)
    for i in range(runs):
        out = generate(bundle, num_frames, replace(cfg, seed=i), model)
        counts[tuple(int(v) for v in out.tokens[:, 0])] += 1
    return {k: v / runs for k, v in counts.items()}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


# --- CFG behavioral probe -----------------------------------------------------


@dataclass(frozen=True)
class ProbeSetting:
    name: str
    weights: GuidanceWeights
    pitch_conditioned: bool = False


@dataclass
class ProbeResult:
    """Per-generation consistency rates for one guidance setting.

    speaker/ling rates are fractions of frames whose most-consistent
    decoded triple matches the prompt speaker / the true linguistic
    token; fpc_values holds the defined FPC scores of decoded pitch
    against the source contour.
    """

    setting: ProbeSetting
    speaker_rates: np.ndarray
    ling_rates: np.ndarray
    fpc_values: np.ndarray
    n_generations: int

    @property
    def speaker_rate(self) -> float:
        return float(self.speaker_rates.mean())

    @property
    def ling_rate(self) -> float:
        return float(self.ling_rates.mean())

    @property
    def fpc_mean(self) -> float:
        return float(self.fpc_values.mean()) if self.fpc_values.size else float("nan")


def _probe_seed(seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])


def cfg_probe(
    model,
    world: World,
    settings: list[ProbeSetting],
    n_generations: int = 64,
    source_frames: int = 48,
    prompt_frames: int = 30,
    budget: StepBudget | None = None,
    top_k: int = 35,
    top_p: float = 0.9,
    seed: int = 0,
) -> list[ProbeResult]:
    """Generate with each guidance setting and score condition adherence.

    All settings see the same source/prompt material (paired comparison).
    Decoding inverts the world's mixing per frame by exhaustive search
    over (ling, speaker, bucket) triples.
    """
    samples = [
        world.sample(
            np.random.default_rng(
                np.random.SeedSequence([world.spec.seed, _PROBE_TAG, seed, i])
            ),
            source_frames,
            prompt_frames,
        )
        for i in range(n_generations)
    ]
    if budget is None:
        C = world.spec.num_codebooks
        budget = StepBudget(tuple(max(1, 8 // (2 ** c)) for c in range(C)))

    results = []
    for j, setting in enumerate(settings):
        spk_rates = np.empty(n_generations)
        ling_rates = np.empty(n_generations)
        fpc_vals = []
        for i, sample in enumerate(samples):
            bundle = ConditionBundle(
                prompt_grid=sample.prompt_grid,
                ling=sample.ling,
                pitch=sample.pitch if setting.pitch_conditioned else None,
                prompt_ling=sample.prompt_ling,
                prompt_pitch=sample.prompt_pitch,
            )
            scfg = SamplerConfig(
                step_budget=budget, top_k=top_k, top_p=top_p,
                seed=_probe_seed(seed, i, j), weights=setting.weights,
                pitch_conditioned=setting.pitch_conditioned,
            )
            out = generate(bundle, source_frames, scfg, model)
            l_hat, s_hat, b_hat = world.decode_grid(out.tokens)
            true_l = upsample_linguistic(sample.ling, source_frames, world.spec.frame_rate_hz)
            spk_rates[i] = float((s_hat == sample.speaker).mean())
            ling_rates[i] = float((l_hat == true_l).mean())
            decoded = PitchContour(
                f0_hz=world.bucket_center_hz(b_hat), frame_rate_hz=world.spec.frame_rate_hz
            )
            try:
                fpc_vals.append(fpc(decoded, sample.pitch).fpc)
            except UndefinedMetricError:
                pass
        results.append(
            ProbeResult(
                setting=setting,
                speaker_rates=spk_rates,
                ling_rates=ling_rates,
                fpc_values=np.asarray(fpc_vals, dtype=np.float64),
                n_generations=n_generations,
            )
        )
    return results


PROBE_CSV_HEADER = [
    "name", "w_all", "w_spk", "w_ling", "pitch_conditioned",
    "n_generations", "speaker_rate", "ling_rate", "fpc_mean", "fpc_count",
]


def write_probe_csv(path, results: list[ProbeResult]) -> None:
    """One row per setting; fpc_mean is blank when never defined."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROBE_CSV_HEADER)
        for r in results:
            s = r.setting
            fm = "" if r.fpc_values.size == 0 else f"{r.fpc_mean:.6f}"
            w.writerow([
                s.name, s.weights.w_all, s.weights.w_spk, s.weights.w_ling,
                int(s.pitch_conditioned), r.n_generations,
                f"{r.speaker_rate:.6f}", f"{r.ling_rate:.6f}", fm, r.fpc_values.size,
            ])
