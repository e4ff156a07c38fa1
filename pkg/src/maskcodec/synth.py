"""Deterministic synthetic codec universe for training and probes.

Acoustic token at frame t, layer c is

    (a_c * ling(t) + b_c * speaker + d_c * pitch_bucket(t) + c) mod K

with per-layer mixers (a_c, b_c, d_c) drawn once from the world seed
among the multiplicative units mod K, so every factor is invertible and
each condition carries separable information. There is no audio anywhere;
the point is a world where masked-token training and the guidance probes
have a known ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conditioning import LinguisticSequence, PitchContour, upsample_linguistic
from .grid import TokenGrid

__all__ = [
    "WorldSpec",
    "Sample",
    "World",
    "generate_sample",
    "make_dataset",
    "PITCH_LOG_LO",
    "PITCH_LOG_HI",
]

# pitch buckets quantize log(1+f) uniformly over this range
PITCH_LOG_LO = math.log(51.0)
PITCH_LOG_HI = math.log(401.0)

_MIXER_TAG = 0x5EED
_SAMPLE_TAG = 0x5A


@dataclass(frozen=True)
class WorldSpec:
    vocab_size: int = 16
    num_codebooks: int = 3
    ling_vocab: int = 8
    n_speakers: int = 8
    pitch_buckets: int = 4
    d_ling: int = 16
    seed: int = 0
    frame_rate_hz: float = 50.0
    segment_seconds: float = 0.12
    voiced_prob: float = 0.8
    cont_noise: float = 0.1

    def __post_init__(self):
        if self.n_speakers >= self.vocab_size:
            raise ValueError(
                f"need vocab_size > n_speakers, got {self.vocab_size} <= {self.n_speakers}"
            )
        counts = (self.num_codebooks, self.ling_vocab, self.pitch_buckets, self.d_ling)
        if any(n < 1 for n in counts):
            raise ValueError("all world counts must be >= 1")
        if not 0.0 <= self.voiced_prob <= 1.0:
            raise ValueError(f"voiced_prob must lie in [0,1], got {self.voiced_prob}")

    @property
    def segment_frames(self) -> int:
        return int(round(self.segment_seconds * self.frame_rate_hz))


@dataclass(frozen=True)
class Sample:
    """One utterance: source grid + conditions, plus a same-speaker prompt.

    ling is the discrete linguistic track; ling_cont is its continuous
    twin (table rows plus generation noise) over the same segments.
    """

    grid: TokenGrid
    ling: LinguisticSequence
    ling_cont: LinguisticSequence
    pitch: PitchContour
    speaker: int
    prompt_grid: TokenGrid
    prompt_ling: LinguisticSequence
    prompt_ling_cont: LinguisticSequence
    prompt_pitch: PitchContour


class World:
    """Mixers, linguistic table, and samplers derived from one seed."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _MIXER_TAG]))
        K = spec.vocab_size
        units = np.array([x for x in range(1, K) if math.gcd(x, K) == 1], dtype=np.int64)
        C = spec.num_codebooks
        self.mix_a = rng.choice(units, size=C)
        self.mix_b = rng.choice(units, size=C)
        self.mix_d = rng.choice(units, size=C)
        self.ling_table = rng.normal(0.0, 1.0, size=(spec.ling_vocab, spec.d_ling))
        self._decode_cube = None

    # --- deterministic pieces ------------------------------------------

    def bucket_of(self, f0_hz: np.ndarray) -> np.ndarray:
        """Quantize log(1+f) uniformly over the bucket range; clips outside."""
        B = self.spec.pitch_buckets
        z = np.log1p(np.asarray(f0_hz, dtype=np.float64))
        idx = np.floor((z - PITCH_LOG_LO) / (PITCH_LOG_HI - PITCH_LOG_LO) * B)
        return np.clip(idx, 0, B - 1).astype(np.int64)

    def bucket_center_hz(self, idx) -> np.ndarray:
        """Representative frequency (bucket midpoint in the log domain)."""
        B = self.spec.pitch_buckets
        width = (PITCH_LOG_HI - PITCH_LOG_LO) / B
        z = PITCH_LOG_LO + (np.asarray(idx, dtype=np.float64) + 0.5) * width
        return np.expm1(z)

    def expected_tokens(self, ling_50, speaker: int, buckets) -> np.ndarray:
        """Ground-truth (T, C) acoustic grid for given per-frame conditions."""
        l = np.asarray(ling_50, dtype=np.int64)[:, None]
        beta = np.asarray(buckets, dtype=np.int64)[:, None]
        c = np.arange(self.spec.num_codebooks, dtype=np.int64)[None, :]
        raw = self.mix_a * l + self.mix_b * int(speaker) + self.mix_d * beta + c
        return raw % self.spec.vocab_size

    def decode_grid(self, tokens: np.ndarray):
        """Most-consistent (ling, speaker, bucket) per frame.

        For each frame, counts how many codebook layers agree with each
        candidate triple and returns the per-frame argmax (first triple in
        (ling, speaker, bucket) index order on ties).
        """
        if self._decode_cube is None:
            sp = self.spec
            l = np.arange(sp.ling_vocab)[:, None, None, None]
            s = np.arange(sp.n_speakers)[None, :, None, None]
            b = np.arange(sp.pitch_buckets)[None, None, :, None]
            c = np.arange(sp.num_codebooks)[None, None, None, :]
            cube = (self.mix_a * l + self.mix_b * s + self.mix_d * b + c) % sp.vocab_size
            self._decode_cube = cube.reshape(-1, sp.num_codebooks)
        matches = (self._decode_cube[None, :, :] == np.asarray(tokens)[:, None, :]).sum(axis=2)
        flat = matches.argmax(axis=1)
        sp = self.spec
        l_hat, rest = np.divmod(flat, sp.n_speakers * sp.pitch_buckets)
        s_hat, b_hat = np.divmod(rest, sp.pitch_buckets)
        return l_hat, s_hat, b_hat

    # --- sampling --------------------------------------------------------

    def _ling_pair(self, n_segments: int, rng: np.random.Generator):
        sp = self.spec
        tokens = rng.integers(0, sp.ling_vocab, size=n_segments)
        times = np.arange(n_segments, dtype=np.float64) * sp.segment_seconds
        vectors = self.ling_table[tokens] + rng.normal(
            0.0, sp.cont_noise, size=(n_segments, sp.d_ling)
        )
        discrete = LinguisticSequence(
            mode="discrete", frame_times=times, tokens=tokens, vocab_size=sp.ling_vocab
        )
        continuous = LinguisticSequence(mode="continuous", frame_times=times, vectors=vectors)
        return discrete, continuous

    def _pitch(self, seq: LinguisticSequence, num_frames: int, rng) -> PitchContour:
        """Piecewise-constant contour on the segment grid; 0 Hz = unvoiced."""
        sp = self.spec
        n = len(seq)
        voiced = rng.random(n) < sp.voiced_prob
        f_seg = np.where(
            voiced, np.exp(rng.uniform(math.log(55.0), math.log(390.0), size=n)), 0.0
        )
        index_seq = LinguisticSequence(
            mode="discrete",
            frame_times=seq.frame_times,
            tokens=np.arange(n),
            vocab_size=n,
        )
        # same hold alignment as the model input path
        seg_of_frame = upsample_linguistic(index_seq, num_frames, sp.frame_rate_hz)
        return PitchContour(f0_hz=f_seg[seg_of_frame], frame_rate_hz=sp.frame_rate_hz)

    def _utterance(self, speaker: int, num_frames: int, rng):
        sp = self.spec
        n_segments = math.ceil(num_frames / sp.segment_frames)
        ling_d, ling_c = self._ling_pair(n_segments, rng)
        pitch = self._pitch(ling_d, num_frames, rng)
        ling_50 = upsample_linguistic(ling_d, num_frames, sp.frame_rate_hz)
        tokens = self.expected_tokens(ling_50, speaker, self.bucket_of(pitch.f0_hz))
        grid = TokenGrid(tokens=tokens, vocab_size=sp.vocab_size, frame_rate_hz=sp.frame_rate_hz)
        return grid, ling_d, ling_c, pitch

    def sample(
        self, rng: np.random.Generator, source_frames: int = 512, prompt_frames: int = 150
    ) -> Sample:
        """Draw one speaker and two same-speaker utterances (source, prompt)."""
        if source_frames < 1 or prompt_frames < 1:
            raise ValueError("source_frames and prompt_frames must be positive")
        speaker = int(rng.integers(0, self.spec.n_speakers))
        grid, ling_d, ling_c, pitch = self._utterance(speaker, source_frames, rng)
        p_grid, p_ling_d, p_ling_c, p_pitch = self._utterance(speaker, prompt_frames, rng)
        return Sample(
            grid=grid, ling=ling_d, ling_cont=ling_c, pitch=pitch, speaker=speaker,
            prompt_grid=p_grid, prompt_ling=p_ling_d, prompt_ling_cont=p_ling_c,
            prompt_pitch=p_pitch,
        )

    def sample_at(
        self, index: int, source_frames: int = 512, prompt_frames: int = 150
    ) -> Sample:
        """Sample keyed by (world seed, index); parallel-safe reproducibility."""
        rng = np.random.default_rng(
            np.random.SeedSequence([self.spec.seed, _SAMPLE_TAG, index])
        )
        return self.sample(rng, source_frames, prompt_frames)


def generate_sample(
    spec: WorldSpec,
    rng: np.random.Generator,
    source_frames: int = 512,
    prompt_frames: int = 150,
) -> Sample:
    """One-shot convenience wrapper; rebuilds the world from its spec."""
    return World(spec).sample(rng, source_frames, prompt_frames)


def make_dataset(
    world: World,
    count: int,
    source_frames: int = 512,
    prompt_frames: int = 150,
    start_index: int = 0,
) -> list[Sample]:
    return [
        world.sample_at(start_index + i, source_frames, prompt_frames)
        for i in range(count)
    ]
