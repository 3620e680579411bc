"""Command-line entry point: ``rlplace <subcommand> [options]``.

Every subcommand writes into ``<out>/<subcommand>-<hash>/`` where ``hash``
is derived from the fully resolved configuration (including the SHA-256 of
every input file). ``config.json`` in that directory reproduces the run.
Failures print one JSON line ``{"error": ..., "message": ...}`` on stderr
and exit with status 2.
"""

import argparse
import hashlib
import json
import os
import sys
import time

from . import __version__
from .evaluation import evaluate_placement
from .exceptions import ParameterError, RLPlaceError, RLPlaceIOError
from .lidar import SweepCache, write_cloud
from .optimizer import (DEFAULT_BUDGET, PerceptionScorer, brute_force_select, check_budget,
                        coverage_density_select, default_frames, greedy_select, random_select,
                        submodularity_audit)
from .perception import (PerceptionPredictor, XhatConfig, ability_for_placement, build_mask,
                         build_training_samples, extract_features, load_model, predict_ability,
                         save_model, surrogate_confidence)
from .report import (EvalRecord, emit_report, selection_result, write_grid_csv, write_json,
                     write_loss_csv, write_pgm, write_trace_csv)
from .scene import SceneParams, generate_scene, load_scenario, save_scenario

METHODS = ("greedy", "brute", "random", "covdens")
SCORERS = ("fused", "noisyor")


def _sha256(path):
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 16), b""):
                h.update(block)
    except OSError as exc:
        raise RLPlaceIOError(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_dir(args, config, inputs=()):
    """Create the content-addressed run directory and write ``config.json``."""
    resolved = dict(config, command=args.command, version=__version__,
                    inputs={name: _sha256(path) for name, path in inputs})
    path = os.path.join(args.out, f"{args.command}-{config_hash(resolved)}")
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise RLPlaceIOError(f"cannot create {path}: {exc}") from exc
    write_json(os.path.join(path, "config.json"), resolved)
    return path


def _int_list(text):
    if text is None or text == "":
        return None
    return [int(t) for t in str(text).split(",") if t.strip()]


def _frames(scenario, text, fallback):
    frames = _int_list(text)
    if frames is None:
        frames = list(fallback(len(scenario.frames)))
    for f in frames:
        scenario.frame(f)
    return sorted(set(frames))


def _xhat(args):
    return XhatConfig(args.xhat, tuple(_int_list(args.fusion_frames) or ()))


def _train_model(scenario, args, cache):
    samples = build_training_samples(scenario, args.samples, args.seed, cache=cache,
                                     xhat=_xhat(args))
    X = [extract_features(x, scenario.grid) for x, _ in samples]
    y = [c for _, c in samples]
    est = PerceptionPredictor(args.gamma, args.threshold, args.lr, args.epochs, args.seed)
    est.fit(X, y)
    return est, samples


def _model_or_train(scenario, args, cache):
    if args.model:
        return load_model(args.model)
    return _train_model(scenario, args, cache)[0].model_


def _select(scenario, args, model, cache, frames):
    """Run one selector; returns (placement, trace or None, score or None)."""
    ids = scenario.mount_ids
    if args.method == "random":
        placement = random_select(ids, args.m, args.seed)
        trace = None
    elif args.method == "covdens":
        placement = coverage_density_select(scenario, ids, args.m, frames=frames, cache=cache)
        trace = None
    else:
        if args.method == "brute":
            check_budget(len(ids), args.m, args.budget)
        scorer = PerceptionScorer(scenario, model, args.scorer, frames, cache=cache,
                                  xhat=_xhat(args)).prepare()
        if args.method == "greedy":
            placement, trace = greedy_select(scenario, ids, args.m, scorer)
        else:
            placement, trace = brute_force_select(scenario, ids, args.m, scorer,
                                                  args.budget), None
        return placement, trace, scorer(placement)
    return placement, trace, None


def _common_config(args, *names):
    return {n: getattr(args, n) for n in names}


# -- subcommands -------------------------------------------------------------

def cmd_gen_scene(args):
    params = SceneParams(n_mounts=args.n_mounts, n_vehicles=args.n_vehicles,
                         n_frames=args.n_frames, occluder_count=args.occluders)
    out = run_dir(args, {"seed": args.seed, "params": params.to_dict()})
    save_scenario(generate_scene(args.seed, params), os.path.join(out, "scenario.json"))
    return out


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    frames = _frames(scenario, args.frames, lambda n: range(n))
    mounts = _int_list(args.mounts) or scenario.mount_ids
    out = run_dir(args, {"frames": frames, "mounts": mounts},
                  [("scenario", args.scenario)])
    cache = SweepCache(scenario)
    cache.warm(frames, mounts)
    for f in frames:
        for mid in mounts:
            write_cloud(os.path.join(out, f"frame{f:04d}_mount{mid:03d}.rlpc"), cache.sweep(f, mid))
    return out


def cmd_train(args):
    scenario = load_scenario(args.scenario)
    cfg = _common_config(args, "seed", "gamma", "threshold", "lr", "epochs", "samples",
                         "xhat", "fusion_frames")
    out = run_dir(args, cfg, [("scenario", args.scenario)])
    est, samples = _train_model(scenario, args, SweepCache(scenario))
    save_model(est.model_, os.path.join(out, "model.json"))
    write_loss_csv(os.path.join(out, "loss.csv"), est.loss_history_)
    xhat, conf = samples[0]
    ability = predict_ability(est.model_, extract_features(xhat, scenario.grid))
    for name, grid_map in (("ability", ability), ("confidence", conf),
                           ("mask", build_mask(conf, args.threshold))):
        write_grid_csv(os.path.join(out, f"sample0_{name}.csv"), grid_map)
        write_pgm(os.path.join(out, f"sample0_{name}.pgm"), grid_map)
    return out


def cmd_optimize(args):
    scenario = load_scenario(args.scenario)
    frames = _frames(scenario, args.frames, default_frames)
    cfg = _common_config(args, "m", "method", "scorer", "seed", "budget", "gamma", "threshold",
                         "lr", "epochs", "samples", "xhat", "fusion_frames")
    cfg["frames"] = frames
    inputs = [("scenario", args.scenario)] + ([("model", args.model)] if args.model else [])
    n = len(scenario.mount_ids)
    if not 1 <= args.m <= n:
        raise ParameterError(f"M must satisfy 1 <= M <= {n}, got {args.m}")
    if args.method == "brute":
        check_budget(n, args.m, args.budget)
    out = run_dir(args, cfg, inputs)
    cache = SweepCache(scenario)
    model = None
    if args.method in ("greedy", "brute"):
        model = _model_or_train(scenario, args, cache)
    placement, trace, score = _select(scenario, args, model, cache, frames)
    write_json(os.path.join(out, "result.json"),
               selection_result(args.method, placement, score, args.scorer, frames, args.seed))
    if trace is not None:
        write_trace_csv(os.path.join(out, "trace.csv"), trace)
    if model is not None:
        ability = ability_for_placement(scenario, frames[0], placement, model, args.scorer,
                                        cache=cache, xhat=_xhat(args))
        write_grid_csv(os.path.join(out, "ability.csv"), ability)
        write_pgm(os.path.join(out, "ability.pgm"), ability)
    return out


def _placement_arg(args):
    if args.result:
        try:
            with open(args.result, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise RLPlaceIOError(f"cannot read result {args.result}: {exc}") from exc
        return [int(p) for p in doc["placement"]], doc.get("method", "given"), doc.get("seed", 0)
    return _int_list(args.placement) or [], "given", args.seed


def cmd_eval(args):
    scenario = load_scenario(args.scenario)
    placement, method, seed = _placement_arg(args)
    frames = _frames(scenario, args.frames, lambda n: range(n))
    out = run_dir(args, {"placement": placement, "frames": frames, "fusion": args.fusion},
                  [("scenario", args.scenario)])
    t0 = time.perf_counter()
    res = evaluate_placement(scenario, placement, frames, mode=args.fusion)
    runtime_ms = 1000.0 * (time.perf_counter() - t0)
    rec = EvalRecord.from_result(method, len(placement), seed, res, len(frames), runtime_ms)
    write_json(os.path.join(out, "eval.json"), dict(res.as_dict(), placement=placement,
                                                    method=method, M=len(placement), seed=seed,
                                                    frames=frames))
    emit_report([rec], out)
    return out


def cmd_audit(args):
    scenario = load_scenario(args.scenario)
    frames = _frames(scenario, args.frames, default_frames)
    cfg = _common_config(args, "scorer", "seed", "n_samples", "xhat", "fusion_frames")
    cfg["frames"] = frames
    out = run_dir(args, cfg, [("scenario", args.scenario), ("model", args.model)])
    scorer = PerceptionScorer(scenario, load_model(args.model), args.scorer, frames,
                              xhat=_xhat(args)).prepare()
    audit = submodularity_audit(scorer, scenario.mount_ids, args.n_samples, args.seed)
    write_json(os.path.join(out, "audit.json"), dict(audit, scorer_mode=args.scorer))
    return out


def _load_eval(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise RLPlaceIOError(f"cannot read {path}: {exc}") from exc
    return EvalRecord(doc["method"], doc["M"], doc["seed"], doc["ap_03"], doc["ap_05"],
                      doc["ap_07"], len(doc["frames"]))


def cmd_report(args):
    out = run_dir(args, {}, [(f"eval{k}", p) for k, p in enumerate(args.inputs)])
    emit_report([_load_eval(p) for p in args.inputs], out)
    return out


def cmd_run(args):
    """gen-scene, train, optimize every method for every M, evaluate, report."""
    ms = _int_list(args.ms) or [2, 3, 4]
    random_seeds = _int_list(args.random_seeds) or [0, 1, 2]
    cfg = _common_config(args, "seed", "n_mounts", "n_vehicles", "n_frames", "occluders",
                         "scorer", "budget", "gamma", "threshold", "lr", "epochs", "samples",
                         "xhat", "fusion_frames", "frames", "eval_frames", "methods")
    cfg.update(ms=ms, random_seeds=random_seeds)
    out = run_dir(args, cfg)
    scenario = generate_scene(args.seed, SceneParams(
        n_mounts=args.n_mounts, n_vehicles=args.n_vehicles, n_frames=args.n_frames,
        occluder_count=args.occluders))
    save_scenario(scenario, os.path.join(out, "scenario.json"))
    cache = SweepCache(scenario)
    est, _ = _train_model(scenario, args, cache)
    model = est.model_
    save_model(model, os.path.join(out, "model.json"))
    frames = _frames(scenario, args.frames, default_frames)
    eval_frames = _frames(scenario, args.eval_frames, lambda n: range(n))
    methods = [m for m in args.methods.split(",") if m]
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise ParameterError(f"unknown methods {unknown}")
    records, selections = [], []
    for m in ms:
        for method in methods:
            seeds = random_seeds if method == "random" else [args.seed]
            for seed in seeds:
                sub = argparse.Namespace(**vars(args))
                sub.m, sub.method, sub.seed = m, method, seed
                if method == "brute":
                    try:
                        check_budget(len(scenario.mount_ids), m, args.budget)
                    except RLPlaceError:
                        continue
                t0 = time.perf_counter()
                placement, trace, score = _select(scenario, sub, model, cache, frames)
                res = evaluate_placement(scenario, placement, eval_frames, cache=cache)
                runtime_ms = 1000.0 * (time.perf_counter() - t0)
                tag = f"{method}_m{m}_s{seed}"
                selections.append(selection_result(method, placement, score, args.scorer,
                                                   frames, seed))
                if trace is not None:
                    write_trace_csv(os.path.join(out, f"trace_{tag}.csv"), trace)
                if method == "greedy":
                    ability = ability_for_placement(scenario, frames[0], placement, model,
                                                    args.scorer, cache=cache, xhat=_xhat(args))
                    write_grid_csv(os.path.join(out, f"ability_{tag}.csv"), ability)
                    write_pgm(os.path.join(out, f"ability_{tag}.pgm"), ability)
                    conf = surrogate_confidence(scenario, frames[0], placement, cache=cache)
                    write_pgm(os.path.join(out, f"confidence_{tag}.pgm"), conf)
                records.append(EvalRecord.from_result(method, m, seed, res, len(eval_frames),
                                                      runtime_ms))
    write_json(os.path.join(out, "selections.json"), selections)
    emit_report(records, out)
    return out


# -- parser ------------------------------------------------------------------

def _add_scene_args(p):
    d = SceneParams()
    p.add_argument("--n-mounts", type=int, default=d.n_mounts)
    p.add_argument("--n-vehicles", type=int, default=d.n_vehicles)
    p.add_argument("--n-frames", type=int, default=d.n_frames)
    p.add_argument("--occluders", type=int, default=d.occluder_count)


def _add_train_args(p):
    p.add_argument("--gamma", type=float, default=0.1, help="smoothness weight")
    p.add_argument("--threshold", type=float, default=0.2, help="supervision-mask threshold")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--samples", type=int, default=32, help="training samples to draw")
    p.add_argument("--xhat", choices=("strip", "selective"), default="strip")
    p.add_argument("--fusion-frames", default="", help="frames for --xhat selective, e.g. 0,5,10")


def build_parser():
    parser = argparse.ArgumentParser(prog="rlplace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="parent directory for run outputs")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = command("gen-scene", cmd_gen_scene, "generate a scenario JSON")
    _add_scene_args(p)

    p = command("simulate", cmd_simulate, "cast sweeps to RLPC files")
    p.add_argument("--scenario", required=True)
    p.add_argument("--frames", help="comma-separated frame indices (default: all)")
    p.add_argument("--mounts", help="comma-separated mount ids (default: all)")

    p = command("train", cmd_train, "train the perception predictor")
    p.add_argument("--scenario", required=True)
    _add_train_args(p)

    p = command("optimize", cmd_optimize, "select a placement")
    p.add_argument("--scenario", required=True)
    p.add_argument("--model", help="model JSON (trained on the scenario when omitted)")
    p.add_argument("--m", type=int, required=True, help="number of LiDARs")
    p.add_argument("--method", choices=METHODS, default="greedy")
    p.add_argument("--scorer", choices=SCORERS, default="fused")
    p.add_argument("--frames", help="scoring frames (default: 5 evenly spaced)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    _add_train_args(p)

    p = command("eval", cmd_eval, "proxy AP of a placement")
    p.add_argument("--scenario", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--placement", help="comma-separated mount ids, ego first")
    group.add_argument("--result", help="result.json written by optimize")
    p.add_argument("--frames", help="evaluation frames (default: all)")
    p.add_argument("--fusion", choices=("early", "late"), default="early")

    p = command("audit", cmd_audit, "submodularity audit of a scorer")
    p.add_argument("--scenario", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--scorer", choices=SCORERS, default="fused")
    p.add_argument("--frames")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--xhat", choices=("strip", "selective"), default="strip")
    p.add_argument("--fusion-frames", default="")

    p = command("report", cmd_report, "merge eval.json files into a report")
    p.add_argument("inputs", nargs="+", help="eval.json files")

    p = command("run", cmd_run, "end-to-end pipeline on a generated scenario")
    _add_scene_args(p)
    _add_train_args(p)
    p.add_argument("--m", dest="ms", default="2,3,4", help="comma-separated M values")
    p.add_argument("--methods", default="random,covdens,greedy,brute")
    p.add_argument("--random-seeds", default="0,1,2")
    p.add_argument("--scorer", choices=SCORERS, default="fused")
    p.add_argument("--frames", help="scoring frames (default: 5 evenly spaced)")
    p.add_argument("--eval-frames", help="evaluation frames (default: all)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        out = args.func(args)
    except (RLPlaceError, OSError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
