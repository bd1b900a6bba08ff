"""Command-line entry point: ``groupprompt <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O or dataset error,
4 missing init checkpoint, 5 training divergence, 6 incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import PHASES, RunConfig, load_config
from .data import Dataset, generate_dataset, load_dataset, read_annotations, save_dataset
from .errors import (CheckpointError, DatasetError, DivergenceError, GenerationError,
                     GroupPromptError, ParameterError)
from .metrics import EvalReport, evaluate, welch_t_test

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INIT, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4, 5, 6


class MissingInit(GroupPromptError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _parse_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ParameterError(f"--values must be comma-separated integers, got {text!r}") from exc
    if not values or any(v < 1 for v in values):
        raise ParameterError("--values needs at least one positive integer")
    return values


def _load_init(path):
    if path is None:
        raise MissingInit("prompt-tune requires --init pointing at a pretune checkpoint")
    if not (Path(path) / "index.json").exists():
        raise MissingInit(f"init checkpoint {path} not found")
    return ckpt_io.load(path)


def _check_compatible(model, data: Dataset) -> None:
    cfg = model.cfg
    if (data.config.height, data.config.width) != (cfg.height, cfg.width):
        raise CheckpointError(f"model expects {cfg.height}x{cfg.width} scenes, dataset has "
                              f"{data.config.height}x{data.config.width}")
    if data.config.num_classes != cfg.num_classes:
        raise CheckpointError(f"model has {cfg.num_classes} classes, dataset {data.config.num_classes}")


def _run_phase(run: RunConfig, phase: str, data: Dataset, init, out: Path | None, quiet=False):
    from .plotting import plot_loss
    from .train import build_model, checkpoint_meta, train, write_log

    model = build_model(run, phase, init)
    _check_compatible(model, data)
    echo = None if quiet else (lambda r: _log(json.dumps(r, sort_keys=True)))
    result = train(model, data.scenes, run, phase, on_epoch=echo)
    if out is not None:
        ckpt_io.save(out, model, checkpoint_meta(run, phase, result))
        write_log(out / "train_log.jsonl", result.log)
        if result.log:
            plot_loss(result.log, out / "loss.png")
    return result


# subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run = load_config(args.config)
    cfg = replace(run.scene, seed=args.seed) if args.seed is not None else run.scene
    scenes = generate_dataset(cfg, args.scenes, cfg.seed)
    save_dataset(args.out, cfg, scenes)
    counts = np.zeros(cfg.num_classes, dtype=int)
    for s in scenes:
        for n in s.nuclei:
            counts[n.class_id - 1] += 1
    total = int(counts.sum())
    print(f"scenes={len(scenes)} instances={total}")
    for k, c in enumerate(counts, start=1):
        print(f"class {k}: {c} ({c / total if total else 0.0:.3f})")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config)
    if args.steps is not None:
        key = "pretune" if args.phase == "pretune" else "prompt_tune"
        run = replace(run, **{key: replace(run.optim_for(args.phase), steps=args.steps)})
    init = _load_init(args.init) if args.phase == "prompt-tune" else None
    if args.phase == "pretune" and args.init:
        _log("note: --init is ignored for pretune")
    data = load_dataset(args.data)
    result = _run_phase(run, args.phase, data, init, Path(args.out), quiet=args.quiet)
    print(f"tuned_params={result.tuned_params} total_params={result.total_params} "
          f"ratio={result.ratio:.4f}")
    return EXIT_OK


def _predictions_from_file(path, data: Dataset):
    by_id = dict(read_annotations(path))
    return [by_id.get(s.scene_id, []) for s in data.scenes]


def _model_predictions(ckpt_path, data: Dataset):
    from .train import model_from_checkpoint, predict_scenes

    if not (Path(ckpt_path) / "index.json").exists():
        raise FileNotFoundError(f"checkpoint {ckpt_path} not found")
    ck = ckpt_io.load(ckpt_path)
    model = model_from_checkpoint(ck)
    _check_compatible(model, data)
    return model, ck, predict_scenes(model, data.scenes)


def _radius(args, ck=None) -> float:
    if args.radius is not None:
        return args.radius
    if ck is not None and "run" in ck.meta:
        return float(ck.meta["run"].get("eval_radius", 3.0))
    return RunConfig().eval_radius


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    ck = None
    if args.predictions:
        preds = _predictions_from_file(args.predictions, data)
    else:
        _, ck, preds = _model_predictions(args.ckpt, data)
    if args.save_predictions:
        lines = [json.dumps({"scene_id": s.scene_id, "nuclei": [n.to_dict() for n in p]})
                 for s, p in zip(data.scenes, preds)]
        Path(args.save_predictions).write_text("".join(line + "\n" for line in lines))
    report = evaluate(preds, [s.nuclei for s in data.scenes], _radius(args, ck), data.config.num_classes)
    _write_json(report.to_dict(), args.out)
    if args.out:
        print(f"F_d={report.f_d:.4f} mean_F_c={report.mean_f_c:.4f} "
              + " ".join(f"F_c{k}={v:.4f}" for k, v in enumerate(report.f_c, start=1)))
    return EXIT_OK


def format_table(rows: list[dict]) -> str:
    head = ["G", "F_d", "mean_F_c", "tuned", "total"]
    body = [[str(r["groups"]), f"{r['f_d']:.4f}", f"{r['mean_f_c']:.4f}",
             str(r["tuned_params"]), str(r["total_params"])] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in [head] + body]
    return "\n".join(lines) + "\n"


def cmd_ablate_groups(args) -> int:
    from .plotting import plot_ablation
    from .train import predict_scenes

    values = _parse_values(args.values)
    run = load_config(args.config)
    if args.steps is not None:
        run = replace(run, prompt_tune=replace(run.prompt_tune, steps=args.steps))
    init = _load_init(args.init)
    train_data = load_dataset(args.data)
    test_data = load_dataset(args.test) if args.test else train_data
    radius = args.radius if args.radius is not None else run.eval_radius
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for g in values:
        grun = replace(run, model=replace(run.model, num_groups=g))
        _log(f"G={g}: prompt-tune")
        res = _run_phase(grun, "prompt-tune", train_data, init, None, quiet=args.quiet)
        preds = predict_scenes(res.model, test_data.scenes)
        rep = evaluate(preds, [s.nuclei for s in test_data.scenes], radius, test_data.config.num_classes)
        rows.append({"groups": g, "f_d": rep.f_d, "mean_f_c": rep.mean_f_c, "f_c": rep.f_c,
                     "tuned_params": res.tuned_params, "total_params": res.total_params})
    table = format_table(rows)
    (out / "ablation.json").write_text(json.dumps({"radius": radius, "rows": rows}, indent=2) + "\n")
    (out / "ablation.txt").write_text(table)
    plot_ablation(rows, out / "ablation.png")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_inspect_groups(args) -> int:
    from . import tensor as T
    from .plotting import plot_group_histogram
    from .train import model_from_checkpoint

    data = load_dataset(args.data)
    if not (Path(args.ckpt) / "index.json").exists():
        raise FileNotFoundError(f"checkpoint {args.ckpt} not found")
    model = model_from_checkpoint(ckpt_io.load(args.ckpt))
    _check_compatible(model, data)
    if model.cfg.head != "gtc":
        raise ParameterError("inspect-groups needs a checkpoint with the grouping head")
    scenes = {s.scene_id: s for s in data.scenes}
    if args.scene not in scenes:
        raise ParameterError(f"scene {args.scene} not in dataset")
    with T.no_grad():
        out = model(scenes[args.scene].image[None], train=False)
    q_group, g_class = model.heads[-1].assignments()
    groups = model.cfg.num_groups
    hist = np.bincount(q_group[0], minlength=groups)
    pts = out.sides[-1].points.value[0] * np.array([model.cfg.width, model.cfg.height])
    dump = {
        "scene_id": args.scene,
        "layer": out.sides[-1].layer,
        "num_queries": int(q_group.shape[1]),
        "num_groups": groups,
        "query_group": q_group[0].tolist(),
        "group_class": g_class[0].tolist(),
        "group_histogram": hist.tolist(),
        "query_class": np.argmax(out.scores[-1].value[0], axis=-1).tolist(),
        "query_points": np.round(pts, 4).tolist(),
    }
    _write_json(dump, args.out)
    if args.out:
        plot_group_histogram(hist.tolist(), Path(args.out).with_suffix(".png"))
    return EXIT_OK


def cmd_overlay(args) -> int:
    from .overlay import overlay_svg

    data = load_dataset(args.data)
    ck = None
    if args.predictions:
        preds = _predictions_from_file(args.predictions, data)
    elif args.ckpt:
        _, ck, preds = _model_predictions(args.ckpt, data)
    else:
        preds = [[] for _ in data.scenes]
    radius = _radius(args, ck)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chosen = set(args.scenes) if args.scenes else None
    written = 0
    for s, p in zip(data.scenes, preds):
        if chosen is not None and s.scene_id not in chosen:
            continue
        (out / f"{s.scene_id:04d}.svg").write_text(overlay_svg(s.image, s.nuclei, p, radius))
        written += 1
    print(f"wrote {written} overlays to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = EvalReport.from_json(Path(args.a).read_text())
    b = EvalReport.from_json(Path(args.b).read_text())
    res = welch_t_test(a.per_image_f_d, b.per_image_f_d)
    _write_json({"t": res.t, "p": res.p, "df": res.df,
                 "mean_a": float(np.mean(a.per_image_f_d)),
                 "mean_b": float(np.mean(b.per_image_f_d))}, args.out)
    return EXIT_OK


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groupprompt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--config", help="run config JSON (its 'scene' section is used)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, help="overrides the scene seed of the config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", choices=PHASES, required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--init", help="pretune checkpoint (prompt-tune only)")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--steps", type=int, help="override the phase's step count")
    t.add_argument("--quiet", action="store_true", help="no per-epoch log on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="F-scores of a checkpoint or a predictions file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--predictions", help="JSONL in the annotation format")
    e.add_argument("--data", required=True)
    e.add_argument("--radius", type=float, help="matching radius in pixels")
    e.add_argument("--out", help="report path (stdout if omitted)")
    e.add_argument("--save-predictions", help="also write the predictions as JSONL")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate-groups", help="prompt-tune and evaluate per group count")
    a.add_argument("--values", default="8,16,32,64,128")
    a.add_argument("--config")
    a.add_argument("--data", required=True, help="training dataset")
    a.add_argument("--test", help="evaluation dataset (defaults to --data)")
    a.add_argument("--init", help="pretune checkpoint")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--steps", type=int, help="override prompt-tune steps")
    a.add_argument("--radius", type=float)
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate_groups)

    i = sub.add_parser("inspect-groups", help="dump query-to-group assignments")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--scene", type=int, default=0)
    i.add_argument("--out", help="JSON path (stdout if omitted); a histogram PNG goes alongside")
    i.set_defaults(func=cmd_inspect_groups)

    o = sub.add_parser("overlay", help="SVG overlays of ground truth and predictions")
    osrc = o.add_mutually_exclusive_group()
    osrc.add_argument("--ckpt")
    osrc.add_argument("--predictions")
    o.add_argument("--data", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--radius", type=float)
    o.add_argument("--scenes", type=int, nargs="*", help="scene ids (default all)")
    o.set_defaults(func=cmd_overlay)

    c = sub.add_parser("compare", help="Welch t-test on per-image F_d of two reports")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingInit as exc:
        _log(f"error: {exc}")
        return EXIT_INIT
    except DivergenceError as exc:
        _log(f"error: training diverged: {exc}")
        return EXIT_DIVERGED
    except CheckpointError as exc:
        _log(f"error: incompatible checkpoint: {exc}")
        return EXIT_CHECKPOINT
    except (DatasetError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_IO
    except (ParameterError, GenerationError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
