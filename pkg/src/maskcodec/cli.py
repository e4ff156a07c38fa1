"""Command-line surface: train, convert, eval, make-synth-data.

Exit codes: 0 success, 2 usage/config problems, 3 numeric failures
(diverged training, undefined metrics, oracle mismatch). Every command
that writes artifacts also writes a manifest with the config hash, seed
and library versions needed to re-run bit-identically. BLAS pools are
pinned to one thread so outputs do not depend on the host's core count.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .conditioning import (
    ConditionBundle,
    load_linguistic,
    load_pitch_contour,
    save_linguistic,
    save_pitch_contour,
)
from .evaluation import (
    OracleInstanceError,
    ProbeSetting,
    UndefinedMetricError,
    brute_force_trajectory_distribution,
    cfg_probe,
    fpc,
    monte_carlo_distribution,
    random_logits_table,
    total_variation,
    write_probe_csv,
)
from .grid import load_token_grid, save_token_grid
from .guidance import PRESETS, GuidanceWeights
from .net import Model, ModelConfig
from .sampler import SamplerConfig, default_step_budget, generate
from .schedules import StepBudget
from .synth import Sample, World, WorldSpec
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


# --- helpers -----------------------------------------------------------------


def _err(msg) -> None:
    print(f"maskcodec: error: {msg}", file=sys.stderr)


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _section(doc: dict, name: str, cls):
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = set(raw) - _fields(cls)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    if "drop_ratios" in raw:
        raw = dict(raw, drop_ratios=tuple(raw["drop_ratios"]))
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{name}' section: {e}") from e


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(path, command: str, seed, settings: dict, outputs: list[str]) -> None:
    blob = json.dumps(settings, sort_keys=True, default=str).encode("utf-8")
    _write_json(path, {
        "command": command,
        "seed": seed,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "settings": settings,
        "outputs": sorted(str(o) for o in outputs),
        "versions": {
            "maskcodec": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": "%d.%d.%d" % sys.version_info[:3],
        },
    })


def _parse_budget(text: str | None, num_codebooks: int) -> StepBudget:
    if text is None:
        return default_step_budget(num_codebooks)
    try:
        steps = tuple(int(x) for x in text.split(","))
        budget = StepBudget(steps)
    except ValueError as e:
        raise ConfigError(f"bad --steps-per-layer {text!r}: {e}") from e
    if len(steps) != num_codebooks:
        raise ConfigError(
            f"--steps-per-layer lists {len(steps)} layers, model has {num_codebooks}"
        )
    return budget


# --- make-synth-data ---------------------------------------------------------


_SAMPLE_PARTS = (
    "grid", "ling", "ling_cont", "pitch",
    "prompt_grid", "prompt_ling", "prompt_ling_cont", "prompt_pitch",
)


def _write_sample(out_dir: Path, index: int, sample: Sample) -> list[str]:
    stem = f"sample_{index:04d}"
    paths = {part: out_dir / f"{stem}.{part}.json" for part in _SAMPLE_PARTS}
    save_token_grid(paths["grid"], sample.grid)
    save_linguistic(paths["ling"], sample.ling)
    save_linguistic(paths["ling_cont"], sample.ling_cont)
    save_pitch_contour(paths["pitch"], sample.pitch)
    save_token_grid(paths["prompt_grid"], sample.prompt_grid)
    save_linguistic(paths["prompt_ling"], sample.prompt_ling)
    save_linguistic(paths["prompt_ling_cont"], sample.prompt_ling_cont)
    save_pitch_contour(paths["prompt_pitch"], sample.prompt_pitch)
    meta = out_dir / f"{stem}.meta.json"
    _write_json(meta, {"index": index, "speaker": sample.speaker})
    return [str(p) for p in paths.values()] + [str(meta)]


def _load_sample(data_dir: Path, stem: str) -> Sample:
    def p(part):
        path = data_dir / f"{stem}.{part}.json"
        if not path.exists():
            raise ConfigError(f"missing dataset file: {path}")
        return path

    with open(p("meta"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return Sample(
        grid=load_token_grid(p("grid")),
        ling=load_linguistic(p("ling")),
        ling_cont=load_linguistic(p("ling_cont")),
        pitch=load_pitch_contour(p("pitch")),
        speaker=int(meta["speaker"]),
        prompt_grid=load_token_grid(p("prompt_grid")),
        prompt_ling=load_linguistic(p("prompt_ling")),
        prompt_ling_cont=load_linguistic(p("prompt_ling_cont")),
        prompt_pitch=load_pitch_contour(p("prompt_pitch")),
    )


def _load_dataset(data_dir: Path):
    if not data_dir.is_dir():
        raise ConfigError(f"data directory not found: {data_dir}")
    stems = sorted(p.name[: -len(".grid.json")] for p in data_dir.glob("sample_*.grid.json"))
    if not stems:
        raise ConfigError(f"no sample_*.grid.json files in {data_dir}")
    return [_load_sample(data_dir, stem) for stem in stems]


def _load_world(path: Path) -> World:
    if not path.exists():
        raise ConfigError(f"world file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    _check_keys(doc, _fields(WorldSpec), str(path))
    try:
        return World(WorldSpec(**doc))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid world spec {path}: {e}") from e


def cmd_make_synth_data(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = WorldSpec(
        vocab_size=args.vocab_size,
        num_codebooks=args.num_codebooks,
        ling_vocab=args.ling_vocab,
        n_speakers=args.n_speakers,
        pitch_buckets=args.pitch_buckets,
        d_ling=args.d_ling,
        seed=args.seed,
    )
    world = World(spec)
    outputs = []
    for i in range(args.count):
        sample = world.sample_at(i, args.source_frames, args.prompt_frames)
        outputs.extend(_write_sample(out_dir, i, sample))
    world_path = out_dir / "world.json"
    _write_json(world_path, dataclasses.asdict(spec))
    outputs.append(str(world_path))
    _manifest(
        out_dir / "manifest.json", "make-synth-data", args.seed,
        {"spec": dataclasses.asdict(spec), "count": args.count,
         "source_frames": args.source_frames, "prompt_frames": args.prompt_frames},
        outputs,
    )
    print(f"wrote {args.count} samples to {out_dir}")
    return EXIT_OK


# --- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ConfigError(f"config file not found: {cfg_path}")
    with open(cfg_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    _check_keys(doc, {"model", "train", "data", "out", "run"}, str(cfg_path))
    model_cfg: ModelConfig = _section(doc, "model", ModelConfig)
    train_cfg: TrainConfig = _section(doc, "train", TrainConfig)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)

    data = doc.get("data", {})
    _check_keys(data, {"dir", "heldout"}, "'data'")
    if "dir" not in data:
        raise ConfigError("config needs data.dir")
    heldout_count = int(data.get("heldout", 8))
    out = doc.get("out", {})
    _check_keys(out, {"dir"}, "'out'")
    if "dir" not in out:
        raise ConfigError("config needs out.dir")
    run = doc.get("run", {})
    _check_keys(run, {"checkpoint_every", "eval_every", "accuracy_target"}, "'run'")

    dataset = _load_dataset(Path(data["dir"]))
    if heldout_count >= len(dataset):
        raise ConfigError(
            f"heldout={heldout_count} does not leave training data (have {len(dataset)})"
        )
    heldout = dataset[len(dataset) - heldout_count:] if heldout_count else None
    trainset = dataset[: len(dataset) - heldout_count]
    _check_model_against_data(model_cfg, trainset[0])

    out_dir = Path(out["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model = Model.init(model_cfg, seed=train_cfg.seed)
    ckpt_path = out_dir / "model.npz"

    def checkpoint_fn(step, m):
        m.save(out_dir / f"model.step{step:06d}.npz")

    result = train(
        model, trainset, train_cfg,
        heldout=heldout,
        accuracy_target=run.get("accuracy_target"),
        eval_every=int(run.get("eval_every", 250)),
        history_path=out_dir / "loss.csv",
        checkpoint_every=int(run.get("checkpoint_every", 0)),
        checkpoint_fn=checkpoint_fn,
        log=print,
    )
    if train_cfg.steps == 0:
        # still produce the initial checkpoint and an empty history
        with open(out_dir / "loss.csv", "w", encoding="utf-8") as fh:
            fh.write("step,loss,heldout_accuracy\n")
    model.save(ckpt_path)
    _manifest(
        out_dir / "manifest.json", "train", train_cfg.seed,
        {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg),
         "data": data, "run": run, "steps_run": result.steps_run},
        [str(ckpt_path), str(out_dir / "loss.csv")],
    )
    acc = result.final_accuracy
    print(
        f"trained {result.steps_run} steps"
        + (f", heldout accuracy {acc:.4f}" if acc is not None else "")
    )
    return EXIT_OK


def _check_model_against_data(cfg: ModelConfig, sample: Sample) -> None:
    if sample.grid.vocab_size != cfg.vocab_size:
        raise ConfigError(
            f"model vocab {cfg.vocab_size} != data vocab {sample.grid.vocab_size}"
        )
    if sample.grid.num_codebooks != cfg.num_codebooks:
        raise ConfigError(
            f"model has {cfg.num_codebooks} codebooks, data has {sample.grid.num_codebooks}"
        )
    if sample.ling.vocab_size is not None and sample.ling.vocab_size > cfg.ling_vocab:
        raise ConfigError(
            f"model ling vocab {cfg.ling_vocab} < data ling vocab {sample.ling.vocab_size}"
        )
    if sample.ling_cont.vectors.shape[1] != cfg.d_ling:
        raise ConfigError(
            f"model d_ling {cfg.d_ling} != data vector width {sample.ling_cont.vectors.shape[1]}"
        )


# --- convert -----------------------------------------------------------------


def _resolve_weights(args, preset_name: str | None) -> GuidanceWeights:
    base = PRESETS.get(preset_name, (0.0, 0.0, 0.0)) if preset_name else (0.0, 0.0, 0.0)
    return GuidanceWeights(
        w_all=base[0] if args.w_all is None else args.w_all,
        w_spk=base[1] if args.w_spk is None else args.w_spk,
        w_ling=base[2] if args.w_ling is None else args.w_ling,
    )


def _source_frames_from_ling(ling, frame_rate_hz: float) -> int:
    """Length heuristic when no pitch file pins the frame count: extend the
    last segment by the typical segment duration."""
    times = ling.frame_times
    delta = float(np.median(np.diff(times))) if len(times) > 1 else 0.12
    return int(round((times[-1] + delta) * frame_rate_hz))


def cmd_convert(args) -> int:
    model = Model.load(args.checkpoint)
    C, K = model.cfg.num_codebooks, model.cfg.vocab_size
    ling = load_linguistic(args.ling)
    pitch = load_pitch_contour(args.pitch) if args.pitch else None
    prompt = load_token_grid(args.prompt)
    if prompt.vocab_size != K or prompt.num_codebooks != C:
        raise ConfigError(
            f"prompt grid ({prompt.vocab_size} ids x {prompt.num_codebooks} layers) "
            f"does not match checkpoint ({K} x {C})"
        )
    prompt_ling = load_linguistic(args.prompt_ling) if args.prompt_ling else None
    prompt_pitch = load_pitch_contour(args.prompt_pitch) if args.prompt_pitch else None

    if args.mode == "all":
        if pitch is None:
            raise ConfigError("--mode all needs a --pitch contour")
        if ling.mode != "continuous":
            raise ConfigError("--mode all expects a continuous-mode linguistic file")
        pitch_conditioned = True
    elif args.mode == "spk":
        if ling.mode != "discrete":
            raise ConfigError("--mode spk expects a discrete-mode linguistic file")
        pitch_conditioned = False
    else:
        pitch_conditioned = pitch is not None
    weights = _resolve_weights(args, args.mode)

    frames = args.frames
    if frames is None:
        frames = len(pitch) if pitch is not None else _source_frames_from_ling(
            ling, prompt.frame_rate_hz
        )
    budget = _parse_budget(args.steps_per_layer, C)
    scfg = SamplerConfig(
        step_budget=budget, top_k=args.top_k, top_p=args.top_p,
        seed=args.seed, weights=weights, pitch_conditioned=pitch_conditioned,
    )
    bundle = ConditionBundle(
        prompt_grid=prompt, ling=ling, pitch=pitch,
        prompt_ling=prompt_ling, prompt_pitch=prompt_pitch,
    )
    out_grid = generate(bundle, frames, scfg, model)
    save_token_grid(args.out, out_grid)
    _manifest(
        Path(str(args.out) + ".manifest.json"), "convert", args.seed,
        {
            "checkpoint": str(args.checkpoint), "ling": str(args.ling),
            "pitch": str(args.pitch) if args.pitch else None,
            "prompt": str(args.prompt),
            "prompt_ling": str(args.prompt_ling) if args.prompt_ling else None,
            "prompt_pitch": str(args.prompt_pitch) if args.prompt_pitch else None,
            "mode": args.mode, "frames": frames,
            "weights": {"w_all": weights.w_all, "w_spk": weights.w_spk,
                        "w_ling": weights.w_ling},
            "top_k": args.top_k, "top_p": args.top_p,
            "steps_per_layer": list(budget.steps_per_layer),
            "pitch_conditioned": pitch_conditioned,
        },
        [str(args.out)],
    )
    print(f"wrote {frames}x{C} token grid to {args.out}")
    return EXIT_OK


# --- eval --------------------------------------------------------------------


def cmd_eval_fpc(args) -> int:
    report = fpc(load_pitch_contour(args.a), load_pitch_contour(args.b))
    print(f"fpc={report.fpc:.6f} voiced_frames_used={report.voiced_frames_used}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("fpc,voiced_frames_used\n")
            fh.write(f"{report.fpc:.6f},{report.voiced_frames_used}\n")
        _manifest(
            Path(str(args.out) + ".manifest.json"), "eval fpc", None,
            {"a": str(args.a), "b": str(args.b)}, [str(args.out)],
        )
    return EXIT_OK


def cmd_eval_oracle(args) -> int:
    if args.frames * args.vocab > 64:
        raise ConfigError(f"instance too large: frames*vocab = {args.frames * args.vocab} > 64")
    table = random_logits_table(args.frames, args.vocab, args.seed)
    cfg = SamplerConfig(
        step_budget=StepBudget((args.steps,)), top_k=args.top_k, top_p=args.top_p,
        seed=0, weights=GuidanceWeights(),
    )
    exact = brute_force_trajectory_distribution(table, args.frames, cfg, args.vocab)
    empirical = monte_carlo_distribution(table, args.frames, cfg, args.vocab, args.runs)
    tv = total_variation(exact, empirical)
    print(f"total_variation={tv:.6f} over {len(exact)} exact states, {args.runs} runs")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("state,p_exact,p_empirical\n")
            for key in sorted(set(exact) | set(empirical)):
                state = "|".join(str(v) for v in key)
                fh.write(f"{state},{exact.get(key, 0.0):.8f},{empirical.get(key, 0.0):.8f}\n")
        _manifest(
            Path(str(args.out) + ".manifest.json"), "eval oracle", args.seed,
            {"frames": args.frames, "vocab": args.vocab, "steps": args.steps,
             "runs": args.runs, "top_k": args.top_k, "top_p": args.top_p,
             "tolerance": args.tol, "total_variation": tv},
            [str(args.out)],
        )
    if tv > args.tol:
        _err(f"total variation {tv:.6f} exceeds tolerance {args.tol}")
        return EXIT_NUMERIC
    return EXIT_OK


_PROBE_SWEEP = (
    ("ling", (0.0, 0.0, 0.0), False),
    ("spk", (0.0, 2.0, 0.5), False),
    ("accent", (0.0, 2.5, 0.5), False),
    ("all", (1.5, 1.0, 1.0), True),
)


def cmd_eval_cfg_probe(args) -> int:
    model = Model.load(args.checkpoint)
    world = _load_world(Path(args.world))
    sp = world.spec
    if (sp.vocab_size, sp.num_codebooks) != (model.cfg.vocab_size, model.cfg.num_codebooks):
        raise ConfigError(
            f"world ({sp.vocab_size} ids x {sp.num_codebooks} layers) does not match "
            f"checkpoint ({model.cfg.vocab_size} x {model.cfg.num_codebooks})"
        )
    settings = [
        ProbeSetting(name, GuidanceWeights(*w), pitch_conditioned=p)
        for name, w, p in _PROBE_SWEEP
    ]
    budget = (
        _parse_budget(args.steps_per_layer, sp.num_codebooks)
        if args.steps_per_layer else None
    )
    results = cfg_probe(
        model, world, settings,
        n_generations=args.n_generations,
        source_frames=args.source_frames,
        prompt_frames=args.prompt_frames,
        budget=budget,
        seed=args.seed,
    )
    write_probe_csv(args.out, results)
    for r in results:
        fm = f"{r.fpc_mean:.3f}" if r.fpc_values.size else "n/a"
        print(
            f"{r.setting.name}: speaker_rate={r.speaker_rate:.3f} "
            f"ling_rate={r.ling_rate:.3f} fpc={fm}"
        )
    _manifest(
        Path(str(args.out) + ".manifest.json"), "eval cfg-probe", args.seed,
        {"checkpoint": str(args.checkpoint), "world": str(args.world),
         "n_generations": args.n_generations, "source_frames": args.source_frames,
         "prompt_frames": args.prompt_frames,
         "settings": [list(s) for s in _PROBE_SWEEP]},
        [str(args.out)],
    )
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="maskcodec",
        description="Masked codec token modeling: train, convert, evaluate.",
    )
    p.add_argument("--version", action="version", version=f"maskcodec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config file")
    t.add_argument("config", help="JSON config with model/train/data/out sections")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("convert", help="generate a token grid from conditions")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--ling", required=True, help="source linguistic JSON file")
    c.add_argument("--pitch", default=None, help="source pitch JSON file")
    c.add_argument("--prompt", required=True, help="speaker prompt token-grid file")
    c.add_argument("--prompt-ling", default=None, help="prompt linguistic file")
    c.add_argument("--prompt-pitch", default=None, help="prompt pitch file")
    c.add_argument("--out", required=True, help="output token-grid file")
    c.add_argument("--mode", choices=("all", "spk"), default=None,
                   help="weight preset: all=(1.5,1,1) with pitch, spk=(0,2,0.5) without")
    c.add_argument("--w-all", type=float, default=None)
    c.add_argument("--w-spk", type=float, default=None)
    c.add_argument("--w-ling", type=float, default=None)
    c.add_argument("--top-k", type=int, default=35)
    c.add_argument("--top-p", type=float, default=0.9)
    c.add_argument("--steps-per-layer", default=None, help="comma-separated per-layer steps")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--frames", type=int, default=None,
                   help="source frame count (default: pitch length, else inferred)")
    c.set_defaults(func=cmd_convert)

    e = sub.add_parser("eval", help="evaluation instruments")
    esub = e.add_subparsers(dest="eval_command", required=True)

    f = esub.add_parser("fpc", help="pitch-contour correlation between two files")
    f.add_argument("--a", required=True)
    f.add_argument("--b", required=True)
    f.add_argument("--out", default=None, help="optional CSV output")
    f.set_defaults(func=cmd_eval_fpc)

    o = esub.add_parser("oracle", help="sampler vs exact-enumeration agreement")
    o.add_argument("--frames", type=int, default=2)
    o.add_argument("--vocab", type=int, default=3)
    o.add_argument("--steps", type=int, default=2)
    o.add_argument("--runs", type=int, default=200000)
    o.add_argument("--top-k", type=int, default=35)
    o.add_argument("--top-p", type=float, default=0.9)
    o.add_argument("--tol", type=float, default=0.01)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default=None, help="optional CSV of both distributions")
    o.set_defaults(func=cmd_eval_oracle)

    g = esub.add_parser("cfg-probe", help="condition-consistency rates per guidance setting")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--world", required=True, help="world.json from make-synth-data")
    g.add_argument("--out", required=True, help="CSV output path")
    g.add_argument("--n-generations", type=int, default=48)
    g.add_argument("--source-frames", type=int, default=48)
    g.add_argument("--prompt-frames", type=int, default=30)
    g.add_argument("--steps-per-layer", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_eval_cfg_probe)

    m = sub.add_parser("make-synth-data", help="write a synthetic dataset directory")
    m.add_argument("--out", required=True)
    m.add_argument("--count", type=int, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--source-frames", type=int, default=512)
    m.add_argument("--prompt-frames", type=int, default=150)
    m.add_argument("--vocab-size", type=int, default=16)
    m.add_argument("--num-codebooks", type=int, default=3)
    m.add_argument("--ling-vocab", type=int, default=8)
    m.add_argument("--n-speakers", type=int, default=8)
    m.add_argument("--pitch-buckets", type=int, default=4)
    m.add_argument("--d-ling", type=int, default=16)
    m.set_defaults(func=cmd_make_synth_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        # single-threaded BLAS keeps outputs identical across machines/cores
        with threadpool_limits(limits=1):
            return args.func(args)
    except (UndefinedMetricError, FloatingPointError) as e:
        _err(e)
        return EXIT_NUMERIC
    except (ConfigError, OracleInstanceError, FileNotFoundError, NotADirectoryError,
            IsADirectoryError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        _err(e)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
