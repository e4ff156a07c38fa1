"""Acceptance gate: twelve numbered checks with pinned tolerances.

Each check prints one verdict line (through the capture plug, so it is
visible in normal pytest output) and enforces its own wall-clock limit.
The two trained-model checks (09, 10) share a single training run that
is built on first use.
"""

import contextlib
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import scipy.stats
from threadpoolctl import threadpool_limits

from maskcodec.cli import EXIT_OK, main
from maskcodec.conditioning import pitch_embedding, sample_condition_drop
from maskcodec.evaluation import (
    ProbeSetting,
    brute_force_trajectory_distribution,
    cfg_probe,
    monte_carlo_distribution,
    random_logits_table,
    total_variation,
)
from maskcodec.grid import LayeredMask, TokenGrid, apply_mask, masked_positions
from maskcodec.guidance import GuidanceWeights, LogitQuadruple, combine
from maskcodec.net import Model, ModelConfig, backward, forward
from maskcodec.sampler import SamplerConfig, select_positions
from maskcodec.schedules import (
    StepBudget,
    draw_training_mask,
    keep_probability,
    layer_distribution,
    unmask_counts,
)
from maskcodec.synth import World, WorldSpec, make_dataset
from maskcodec.trainer import TrainConfig, masked_loss, masked_loss_terms, train


@contextlib.contextmanager
def criterion(capsys, number: int, name: str, limit_s: float):
    t0 = time.monotonic()
    try:
        yield
    except BaseException:
        with capsys.disabled():
            print(f"ACCEPTANCE {number:02d} {name}: FAIL", flush=True)
        raise
    elapsed = time.monotonic() - t0
    ok = elapsed < limit_s
    with capsys.disabled():
        print(
            f"ACCEPTANCE {number:02d} {name}: {'PASS' if ok else 'FAIL'}"
            f" ({elapsed:.1f}s / limit {limit_s:.0f}s)",
            flush=True,
        )
    assert ok, f"runtime {elapsed:.1f}s exceeds the {limit_s:.0f}s budget"


# --- shared trained model (built once, used by 09 and 10) ---------------------

_TRAINED: dict = {}


def trained_setup():
    """Train the desk-scale model on the default synthetic world once."""
    if _TRAINED:
        return _TRAINED
    world = World(WorldSpec())
    train_set = make_dataset(world, 320, source_frames=48, prompt_frames=30)
    held = make_dataset(world, 16, source_frames=48, prompt_frames=30,
                        start_index=100000)
    model = Model.init(ModelConfig(), seed=0)
    cfg = TrainConfig(batch_size=8, steps=20000, learning_rate=1e-3, seed=0)
    t0 = time.monotonic()
    with threadpool_limits(limits=1):
        result = train(model, train_set, cfg, heldout=held,
                       accuracy_target=0.90, eval_every=250)
    _TRAINED.update(
        world=world, model=model, heldout=held, result=result,
        wall=time.monotonic() - t0,
    )
    return _TRAINED


# --- 01: pitch embedding ------------------------------------------------------


def test_c01_pitch_embedding_exactness(capsys):
    with criterion(capsys, 1, "pitch embedding exactness", 1.0):
        np.testing.assert_array_equal(pitch_embedding(0.0, 4), [0.0, 0.0, 1.0, 1.0])
        f = math.e - 1.0  # log1p(f) = 1 exactly up to float rounding
        np.testing.assert_allclose(
            pitch_embedding(f, 2), [0.8414709848, 0.5403023059], atol=1e-9)
        np.testing.assert_allclose(
            pitch_embedding(f, 4),
            [0.8414709848, 0.0099998333, 0.5403023059, 0.9999500004], atol=1e-9)

        rng = np.random.default_rng(0xACC1)
        for _ in range(1000):
            freq = float(rng.uniform(0.0, 600.0))
            d = 2 * int(rng.integers(1, 65))
            got = pitch_embedding(freq, d)
            half = d // 2
            want = np.empty(d)
            for i in range(half):
                angle = math.log1p(freq) / 10000.0 ** (2.0 * i / d)
                want[i] = math.sin(angle)
                want[half + i] = math.cos(angle)
            assert np.max(np.abs(got - want)) < 1e-9


# --- 02: schedule laws --------------------------------------------------------


def test_c02_schedule_laws(capsys):
    with criterion(capsys, 2, "mask schedule laws", 5.0):
        assert keep_probability(0.0) == 1.0
        assert keep_probability(1.0) == 0.0
        for C in range(2, 17):
            p = layer_distribution(C)
            assert abs(p.sum() - 1.0) <= 1e-12
            assert np.all(np.diff(p) < 0)
            assert np.all(p > 0)
        for total in range(0, 1001):
            for steps in range(1, 65):
                counts = unmask_counts(total, steps)
                assert counts.sum() == total
                assert counts.min() >= 0


# --- 03: layered mask structure -------------------------------------------------


def test_c03_layered_mask_structure(capsys):
    with criterion(capsys, 3, "layered mask structure", 5.0):
        rng = np.random.default_rng(0xACC3)
        K = 5
        for _ in range(10000):
            T = int(rng.integers(1, 13))
            C = int(rng.integers(2, 7))
            draw = draw_training_mask(T, C, rng)
            c = draw.target_layer
            mask = LayeredMask.from_keep_row(draw.keep_row, c, C)
            keep = mask.keep
            assert keep.shape == (T, C)
            assert np.all(keep[:, :c] == 1)
            assert np.all(keep[:, c + 1:] == 0)
            assert np.array_equal(keep[:, c], draw.keep_row)

            grid = TokenGrid(tokens=rng.integers(0, K, size=(T, C)), vocab_size=K)
            masked = apply_mask(grid, mask)
            want_sentinel = np.zeros((T, C), dtype=bool)
            want_sentinel[:, c + 1:] = True
            want_sentinel[:, c] = keep[:, c] == 0
            assert np.array_equal(masked.tokens == K, want_sentinel)
            assert np.array_equal(
                masked.tokens[~want_sentinel], grid.tokens[~want_sentinel])
            assert masked_positions(mask) == [
                (int(t), c) for t in np.flatnonzero(keep[:, c] == 0)]


# --- 04: guidance combination algebra -------------------------------------------


def test_c04_guidance_combination_algebra(capsys):
    with criterion(capsys, 4, "guidance combination algebra", 5.0):
        rng = np.random.default_rng(0xACC4)

        def quad(shape):
            return LogitQuadruple(
                full=rng.normal(size=shape), spk=rng.normal(size=shape),
                ling=rng.normal(size=shape), null=rng.normal(size=shape))

        one = np.ones((1, 1, 1))
        scalar = LogitQuadruple(full=2.0 * one, spk=1.5 * one, ling=1.0 * one,
                                null=0.5 * one)
        got = combine(scalar, GuidanceWeights(1.5, 1.0, 1.0))
        assert abs(float(got[0, 0, 0]) - 3.5) < 1e-12

        q = quad((5, 3, 7))
        np.testing.assert_array_equal(combine(q, GuidanceWeights(0.0, 0.0, 0.0)), q.ling)
        np.testing.assert_array_equal(combine(q, GuidanceWeights(1.0, 0.0, 0.0)), q.full)
        z = rng.normal(size=(4, 2, 6))
        same = LogitQuadruple(full=z, spk=z.copy(), ling=z.copy(), null=z.copy())
        np.testing.assert_array_equal(
            combine(same, GuidanceWeights(-0.7, 2.3, 1.1)), z)

        # per-row constant shift moves the output by that constant only
        w = GuidanceWeights(1.5, 1.0, 1.0)
        shift = rng.normal(size=(5, 3, 1))
        shifted = LogitQuadruple(full=q.full + shift, spk=q.spk + shift,
                                 ling=q.ling + shift, null=q.null + shift)
        base = combine(q, w)
        moved = combine(shifted, w)
        np.testing.assert_allclose(moved, base + shift, atol=1e-9)
        assert np.array_equal(np.argmax(moved, axis=-1), np.argmax(base, axis=-1))

        for _ in range(100):
            q = quad((4, 3, 6))
            w1 = GuidanceWeights(*rng.uniform(-2, 2, size=3))
            w2 = GuidanceWeights(*rng.uniform(-2, 2, size=3))
            a, b = rng.uniform(-2, 2, size=2)
            mixed = GuidanceWeights(
                a * w1.w_all + b * w2.w_all,
                a * w1.w_spk + b * w2.w_spk,
                a * w1.w_ling + b * w2.w_ling)
            lhs = combine(q, mixed)
            rhs = (a * combine(q, w1) + b * combine(q, w2)
                   - (a + b - 1.0) * q.ling)
            assert np.max(np.abs(lhs - rhs)) < 1e-9


# --- 05: loss exclusivity -------------------------------------------------------


def test_c05_loss_reads_only_masked_rows(capsys):
    with criterion(capsys, 5, "loss exclusivity on masked rows", 10.0):
        rng = np.random.default_rng(0xACC5)
        for _ in range(100):
            T = int(rng.integers(2, 11))
            C = int(rng.integers(2, 5))
            K = int(rng.integers(2, 9))
            draw = draw_training_mask(T, C, rng)
            c = draw.target_layer
            mask = LayeredMask.from_keep_row(draw.keep_row, c, C)
            tokens = rng.integers(0, K, size=(T, C))
            grid = TokenGrid(tokens=tokens, vocab_size=K)
            logits = rng.normal(size=(T, C, K))

            base_mean, base_count = masked_loss(logits, grid, mask)
            _, _, base_grad = masked_loss_terms(logits, grid, mask)

            target_rows = np.zeros((T, C, K), dtype=bool)
            target_rows[mask.keep[:, c] == 0, c, :] = True
            assert np.all(base_grad[~target_rows] == 0.0)

            # randomize every logit and target outside the masked rows
            logits2 = logits + np.where(target_rows, 0.0, rng.normal(size=(T, C, K)))
            tokens2 = tokens.copy()
            untouched = np.zeros((T, C), dtype=bool)
            untouched[mask.keep[:, c] == 0, c] = True
            scrambled = rng.integers(0, K, size=(T, C))
            tokens2[~untouched] = scrambled[~untouched]
            grid2 = TokenGrid(tokens=tokens2, vocab_size=K)

            mean2, count2 = masked_loss(logits2, grid2, mask)
            _, _, grad2 = masked_loss_terms(logits2, grid2, mask)
            assert mean2 == base_mean
            assert count2 == base_count
            # all-kept draws have no masked rows; np.all over empty is the right vacuous truth
            assert np.all(np.abs(grad2[target_rows] - base_grad[target_rows]) <= 1e-12)
            assert np.all(grad2[~target_rows] == 0.0)


# --- 06: network gradients vs finite differences --------------------------------


def test_c06_network_gradients_finite_difference(capsys):
    with criterion(capsys, 6, "network gradients vs finite differences", 60.0):
        cfg = ModelConfig(layers=2, heads=2, d_model=32, d_ffn=128,
                          num_codebooks=2, vocab_size=8, ling_vocab=4, d_ling=8)
        model = Model.init(cfg, seed=1)
        # the 0.02-scale init leaves many gradients near fp cancellation;
        # x5 keeps them healthy without saturating the attention softmax
        for k in model.params:
            model.params[k] = model.params[k] * 5.0
        rng = np.random.default_rng(0xACC6)
        X = rng.normal(size=(8, cfg.d_model))
        W = rng.normal(size=(5, cfg.num_codebooks, cfg.vocab_size))
        logits, cache = forward(model.params, cfg, X, 3, want_cache=True)
        grads, _ = backward(model.params, cfg, cache, W.copy())

        coords = []
        for name in sorted(model.params):
            g = grads[name].reshape(-1)
            for idx in np.flatnonzero(np.abs(g) >= 1e-3):
                coords.append((name, int(idx)))
        assert len(coords) >= 50
        picks = rng.choice(len(coords), size=50, replace=False)

        eps = 1e-5
        for pick in picks:
            name, idx = coords[int(pick)]
            flat = model.params[name].reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float((forward(model.params, cfg, X, 3) * W).sum())
            flat[idx] = orig - eps
            dn = float((forward(model.params, cfg, X, 3) * W).sum())
            flat[idx] = orig
            fd = (up - dn) / (2.0 * eps)
            g = float(grads[name].reshape(-1)[idx])
            rel = abs(fd - g) / max(abs(fd), abs(g))
            assert rel < 1e-4, (name, idx, fd, g, rel)


# --- 07: sampler vs exact enumeration -------------------------------------------


def test_c07_sampler_matches_exact_oracle(capsys):
    with criterion(capsys, 7, "sampler vs exact enumeration oracle", 120.0):
        table = random_logits_table(2, 3, seed=0)
        cfg = SamplerConfig(
            step_budget=StepBudget((2,)), top_k=35, top_p=0.9, seed=0,
            weights=GuidanceWeights(0.0, 0.0, 0.0), pitch_conditioned=False)
        exact = brute_force_trajectory_distribution(table, 2, cfg, vocab_size=3)
        empirical = monte_carlo_distribution(table, 2, cfg, vocab_size=3,
                                             runs=200000)
        tv = total_variation(exact, empirical)
        assert tv <= 0.01, f"total variation {tv:.5f}"


# --- 08: Gumbel selection law ----------------------------------------------------


def test_c08_gumbel_selection_frequencies(capsys):
    with criterion(capsys, 8, "Gumbel selection law", 30.0):
        rng = np.random.default_rng(0xACC8)
        conf = np.array([0.0, -10.0])
        hits = 0
        for _ in range(200000):
            hits += int(select_positions(conf, 1, rng)[0] == 0)
        target = 1.0 / (1.0 + math.exp(-10.0))
        assert abs(hits / 200000.0 - target) <= 0.0005

        conf = np.array([0.3, -0.5])
        hits = 0
        for _ in range(200000):
            hits += int(select_positions(conf, 1, rng)[0] == 0)
        target = 1.0 / (1.0 + math.exp(-0.8))
        assert abs(hits / 200000.0 - target) <= 0.005


# --- 09: desk-scale training ------------------------------------------------------


def test_c09_training_reaches_heldout_accuracy(capsys):
    with criterion(capsys, 9, "desk-scale training accuracy", 600.0):
        setup = trained_setup()
        result = setup["result"]
        assert setup["wall"] <= 600.0, f"training took {setup['wall']:.0f}s"
        assert result.steps_run <= 20000
        assert result.final_accuracy is not None
        assert result.final_accuracy >= 0.90, (
            f"held-out accuracy {result.final_accuracy:.4f} after "
            f"{result.steps_run} steps")


# --- 10: guidance steers behavior --------------------------------------------------


def test_c10_guidance_direction(capsys):
    with criterion(capsys, 10, "guidance direction on trained model", 600.0):
        setup = trained_setup()
        settings = [
            ProbeSetting("spk2", GuidanceWeights(0.0, 2.0, 0.5)),
            ProbeSetting("spk0", GuidanceWeights(0.0, 0.0, 0.5)),
            ProbeSetting("all-pitch", GuidanceWeights(1.5, 1.0, 1.0),
                         pitch_conditioned=True),
            ProbeSetting("all-nopitch", GuidanceWeights(1.5, 1.0, 1.0),
                         pitch_conditioned=False),
        ]
        n = 256  # paired over arms: 512 generations per contrast
        assert 2 * n >= 500
        with threadpool_limits(limits=1):
            results = cfg_probe(setup["model"], setup["world"], settings,
                                n_generations=n, source_frames=48,
                                prompt_frames=30, seed=0)
        by = {r.setting.name: r for r in results}

        spk_hi, spk_lo = by["spk2"].speaker_rates, by["spk0"].speaker_rates
        assert spk_hi.mean() > spk_lo.mean()
        w = scipy.stats.wilcoxon(spk_hi, spk_lo, alternative="greater")
        assert w.pvalue < 0.01, f"speaker contrast p={w.pvalue:.3e}"

        fpc_on = by["all-pitch"].fpc_values
        fpc_off = by["all-nopitch"].fpc_values
        assert fpc_on.size > 0 and fpc_off.size > 0
        assert fpc_on.mean() > fpc_off.mean()
        u = scipy.stats.mannwhitneyu(fpc_on, fpc_off, alternative="greater")
        assert u.pvalue < 0.01, f"pitch contrast p={u.pvalue:.3e}"


# --- 11: conversion determinism -----------------------------------------------------


def test_c11_convert_byte_identical(capsys, tmp_path):
    with criterion(capsys, 11, "conversion determinism", 60.0):
        data = tmp_path / "data"
        rc = main(["make-synth-data", "--out", str(data), "--count", "1",
                   "--source-frames", "24", "--prompt-frames", "12"])
        assert rc == EXIT_OK
        ckpt = tmp_path / "model.npz"
        Model.init(ModelConfig(layers=1, heads=2, d_model=32, d_ffn=64,
                               num_codebooks=3, vocab_size=16, ling_vocab=8,
                               d_ling=16), seed=0).save(ckpt)

        outs = []
        for tag, threads in (("a", "1"), ("b", "1"), ("c", "4")):
            out = tmp_path / f"out_{tag}.grid.json"
            env = dict(
                os.environ, OMP_NUM_THREADS=threads,
                OPENBLAS_NUM_THREADS=threads, MKL_NUM_THREADS=threads)
            proc = subprocess.run(
                [sys.executable, "-m", "maskcodec", "convert",
                 "--checkpoint", str(ckpt),
                 "--ling", str(data / "sample_0000.ling.json"),
                 "--prompt", str(data / "sample_0000.prompt_grid.json"),
                 "--out", str(out),
                 "--mode", "spk", "--seed", "11", "--steps-per-layer", "2,1,1"],
                capture_output=True, text=True, env=env)
            assert proc.returncode == 0, proc.stderr
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]  # same thread count, two runs
        assert outs[0] == outs[2]  # different thread count
        hashes = {
            json.loads((tmp_path / f"out_{t}.grid.json.manifest.json").read_text())
            ["config_hash"] for t in ("a", "b", "c")}
        assert len(hashes) == 1


# --- 12: condition-drop and layer frequencies ---------------------------------------


def test_c12_drop_and_layer_frequencies(capsys):
    with criterion(capsys, 12, "condition-drop and layer frequencies", 30.0):
        rng = np.random.default_rng(0xACC12)
        modes = {"all": 0, "spk": 0, "ling": 0, "null": 0}
        for _ in range(110000):
            modes[sample_condition_drop(rng).mode] += 1
        observed = np.array([modes["all"], modes["spk"], modes["ling"], modes["null"]])
        expected = 110000.0 * np.array([6.0, 2.0, 2.0, 1.0]) / 11.0
        stat = scipy.stats.chisquare(observed, expected)
        assert stat.pvalue > 0.01, f"drop-mode chi-square p={stat.pvalue:.4f}"

        layers = np.zeros(3, dtype=np.int64)
        for _ in range(110000):
            layers[draw_training_mask(4, 3, rng).target_layer] += 1
        expected = 110000.0 * layer_distribution(3)
        stat = scipy.stats.chisquare(layers, expected)
        assert stat.pvalue > 0.01, f"layer chi-square p={stat.pvalue:.4f}"
