"""Synthetic world tests.

The world's token rule is (a_c*l + b_c*s + d_c*beta + c) mod K with unit
mixers, so conditions are exactly recoverable; tests below verify the
rule by independent modular arithmetic and the decode by construction.
"""

import math

import numpy as np
import pytest

from maskcodec.conditioning import upsample_linguistic
from maskcodec.synth import (
    PITCH_LOG_HI,
    PITCH_LOG_LO,
    Sample,
    World,
    WorldSpec,
    generate_sample,
    make_dataset,
)


@pytest.fixture(scope="module")
def world():
    return World(WorldSpec())


class TestWorldSpec:
    def test_desk_defaults(self):
        sp = WorldSpec()
        assert (sp.vocab_size, sp.num_codebooks, sp.ling_vocab) == (16, 3, 8)
        assert (sp.n_speakers, sp.pitch_buckets, sp.d_ling) == (8, 4, 16)
        assert sp.segment_frames == 6  # 0.12 s at 50 Hz

    def test_rejects_speaker_overflow(self):
        with pytest.raises(ValueError):
            WorldSpec(vocab_size=8, n_speakers=8)

    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            WorldSpec(voiced_prob=1.5)


class TestMixers:
    def test_mixers_are_units_mod_k(self, world):
        K = world.spec.vocab_size
        for mix in (world.mix_a, world.mix_b, world.mix_d):
            assert mix.shape == (3,)
            for m in mix:
                assert 1 <= m < K and math.gcd(int(m), K) == 1

    def test_world_rebuild_is_identical(self):
        a, b = World(WorldSpec()), World(WorldSpec())
        np.testing.assert_array_equal(a.mix_a, b.mix_a)
        np.testing.assert_array_equal(a.ling_table, b.ling_table)

    def test_seed_changes_world(self):
        a, b = World(WorldSpec()), World(WorldSpec(seed=1))
        assert (
            not np.array_equal(a.mix_a, b.mix_a)
            or not np.array_equal(a.mix_b, b.mix_b)
            or not np.array_equal(a.ling_table, b.ling_table)
        )


class TestBuckets:
    def test_quantization_law(self, world):
        """Bucket = floor of the log1p position scaled over the range."""
        B = world.spec.pitch_buckets
        for f in (55.0, 80.0, 120.0, 200.0, 389.0):
            z = math.log1p(f)
            want = math.floor((z - PITCH_LOG_LO) / (PITCH_LOG_HI - PITCH_LOG_LO) * B)
            assert world.bucket_of(np.array([f]))[0] == want

    def test_clipping_at_edges(self, world):
        got = world.bucket_of(np.array([0.0, 10.0, 1000.0]))
        np.testing.assert_array_equal(got, [0, 0, world.spec.pitch_buckets - 1])

    def test_centers_round_trip(self, world):
        B = world.spec.pitch_buckets
        centers = world.bucket_center_hz(np.arange(B))
        np.testing.assert_array_equal(world.bucket_of(centers), np.arange(B))
        assert (np.diff(centers) > 0).all()


class TestExpectedTokens:
    def test_matches_modular_rule(self, world):
        rng = np.random.default_rng(0)
        sp = world.spec
        l = rng.integers(0, sp.ling_vocab, size=20)
        beta = rng.integers(0, sp.pitch_buckets, size=20)
        s = 5
        got = world.expected_tokens(l, s, beta)
        for t in range(20):
            for c in range(sp.num_codebooks):
                want = (
                    int(world.mix_a[c]) * int(l[t])
                    + int(world.mix_b[c]) * s
                    + int(world.mix_d[c]) * int(beta[t])
                    + c
                ) % sp.vocab_size
                assert got[t, c] == want

    def test_speakers_always_distinguishable(self, world):
        """Unit mixers mean two speakers never share a grid row."""
        l = np.zeros(4, dtype=np.int64)
        beta = np.zeros(4, dtype=np.int64)
        rows = [world.expected_tokens(l, s, beta)[0] for s in range(world.spec.n_speakers)]
        as_tuples = {tuple(r) for r in rows}
        assert len(as_tuples) == world.spec.n_speakers


class TestDecodeGrid:
    def test_exact_recovery_on_clean_grids(self, world):
        rng = np.random.default_rng(1)
        sp = world.spec
        l = rng.integers(0, sp.ling_vocab, size=30)
        beta = rng.integers(0, sp.pitch_buckets, size=30)
        s = 3
        tokens = world.expected_tokens(l, s, beta)
        l_hat, s_hat, b_hat = world.decode_grid(tokens)
        np.testing.assert_array_equal(l_hat, l)
        np.testing.assert_array_equal(s_hat, s)
        np.testing.assert_array_equal(b_hat, beta)

    def test_decode_all_speakers(self, world):
        sp = world.spec
        l = np.arange(sp.ling_vocab) % sp.ling_vocab
        beta = np.arange(sp.ling_vocab) % sp.pitch_buckets
        for s in range(sp.n_speakers):
            _, s_hat, _ = world.decode_grid(world.expected_tokens(l, s, beta))
            assert (s_hat == s).all()

    def test_decode_tolerates_one_corrupt_layer(self, world):
        """With 3 layers, corrupting one leaves a 2-of-3 majority."""
        sp = world.spec
        l = np.full(10, 2, dtype=np.int64)
        beta = np.full(10, 1, dtype=np.int64)
        tokens = world.expected_tokens(l, 4, beta).copy()
        tokens[:, 2] = (tokens[:, 2] + 1) % sp.vocab_size
        l_hat, s_hat, b_hat = world.decode_grid(tokens)
        np.testing.assert_array_equal(l_hat, l)
        assert (s_hat == 4).all()
        np.testing.assert_array_equal(b_hat, beta)


class TestSampling:
    def test_sample_shapes(self, world):
        s = world.sample_at(0, source_frames=48, prompt_frames=30)
        assert isinstance(s, Sample)
        assert s.grid.tokens.shape == (48, 3)
        assert s.prompt_grid.tokens.shape == (30, 3)
        assert len(s.pitch) == 48
        assert len(s.prompt_pitch) == 30
        assert s.ling.mode == "discrete" and s.ling_cont.mode == "continuous"
        # segments cover the source at 6 frames per segment
        assert len(s.ling) == math.ceil(48 / 6)

    def test_sample_at_reproducible(self, world):
        a = world.sample_at(17, source_frames=24, prompt_frames=12)
        b = world.sample_at(17, source_frames=24, prompt_frames=12)
        np.testing.assert_array_equal(a.grid.tokens, b.grid.tokens)
        np.testing.assert_array_equal(a.pitch.f0_hz, b.pitch.f0_hz)
        assert a.speaker == b.speaker
        c = world.sample_at(18, source_frames=24, prompt_frames=12)
        assert not np.array_equal(a.grid.tokens, c.grid.tokens)

    def test_grid_consistent_with_conditions(self, world):
        """The emitted grid equals the rule applied to the emitted conditions."""
        s = world.sample_at(5, source_frames=48, prompt_frames=30)
        ling_50 = upsample_linguistic(s.ling, 48, world.spec.frame_rate_hz)
        want = world.expected_tokens(ling_50, s.speaker, world.bucket_of(s.pitch.f0_hz))
        np.testing.assert_array_equal(s.grid.tokens, want)

    def test_prompt_shares_speaker(self, world):
        for i in range(6):
            s = world.sample_at(i, source_frames=12, prompt_frames=12)
            _, s_src, _ = world.decode_grid(s.grid.tokens)
            _, s_pr, _ = world.decode_grid(s.prompt_grid.tokens)
            assert (s_src == s.speaker).all()
            assert (s_pr == s.speaker).all()

    def test_continuous_ling_near_table(self, world):
        s = world.sample_at(3, source_frames=24, prompt_frames=12)
        rows = world.ling_table[s.ling.tokens]
        err = np.abs(s.ling_cont.vectors - rows)
        assert err.max() < 0.1 * 6  # noise sd 0.1, 6 sigma
        assert err.max() > 0.0

    def test_pitch_piecewise_constant_on_segments(self, world):
        s = world.sample_at(9, source_frames=48, prompt_frames=12)
        f = s.pitch.f0_hz
        seg = world.spec.segment_frames
        for k in range(len(f) // seg):
            block = f[k * seg:(k + 1) * seg]
            assert (block == block[0]).all()

    def test_voiced_values_in_range(self, world):
        s = world.sample_at(21, source_frames=200, prompt_frames=12)
        voiced = s.pitch.f0_hz[s.pitch.f0_hz > 0]
        assert voiced.size > 0
        assert voiced.min() >= 55.0 and voiced.max() <= 390.0

    def test_rejects_empty_frames(self, world):
        with pytest.raises(ValueError):
            world.sample(np.random.default_rng(0), source_frames=0, prompt_frames=5)


class TestDatasetHelpers:
    def test_make_dataset_indices(self, world):
        ds = make_dataset(world, 3, source_frames=12, prompt_frames=6, start_index=40)
        want = [world.sample_at(40 + i, 12, 6) for i in range(3)]
        for got, exp in zip(ds, want):
            np.testing.assert_array_equal(got.grid.tokens, exp.grid.tokens)

    def test_generate_sample_wrapper(self):
        spec = WorldSpec(seed=2)
        a = generate_sample(spec, np.random.default_rng(5), 12, 6)
        b = generate_sample(spec, np.random.default_rng(5), 12, 6)
        np.testing.assert_array_equal(a.grid.tokens, b.grid.tokens)
