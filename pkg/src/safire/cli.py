"""Command-line entry point: gen, pretrain, train, infer, eval, robustness, gradcheck.

Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numerical failure.
Settings resolve as flag > JSON config file > built-in default.
"""
from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradcheck as gc
from .core import FormatError, read_image_png, read_mask_png, read_prediction, relabel_partition, write_mask_png, write_prediction
from .inference import InferOptions, infer
from .metrics import (TRANSFORMS, ari, permuted_f1_best, permuted_f1_fixed, permuted_miou,
                      robustness_report, unperturbed_score, write_report_csv)
from .net import NumericalError, read_checkpoint, write_checkpoint
from .synth import PostProcessConfig, SynthConfig, generate_dataset
from .trainer import (PRETRAIN_DEFAULTS, TRAIN_DEFAULTS, ConfigError, TrainConfig, config_json, pretrain,
                      train, train_plain, write_log_csv)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOL = 1e-4
METRICS = {"f1_fixed": permuted_f1_fixed, "f1_best": permuted_f1_best, "pmiou": permuted_miou, "ari": ari}

# built-in defaults per subcommand, overridable by --config then by flags
DEFAULTS = {
    "gen": {"n": 100, "size": 256, "sources": "2", "strong": False},
    "pretrain": {"epochs": PRETRAIN_DEFAULTS["epochs"], "lr": PRETRAIN_DEFAULTS["lr"]},
    "train": {"epochs": TRAIN_DEFAULTS["epochs"], "lr": TRAIN_DEFAULTS["lr"], "plain": False},
    "infer": {"mode": "binary", "m": None, "cluster": "kmeans", "grid": 16, "eps": 0.3, "min_pts": 3},
    "eval": {"metric": "f1_fixed"},
    "robustness": {"transform": "blur", "levels": "0,0.5,1,2"},
    "gradcheck": {"coords": 100, "eps": 1e-4, "size": 32},
}
TRAIN_KEYS = {"momentum", "batch_size", "pairs_per_image", "tau", "c_max", "lambda_conf",
              "normalize_embeddings", "augment"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting, and suggests the closest known option."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_usage()}")


def _unknown_flags(parser: argparse.ArgumentParser, extras: list[str]) -> str:
    known = [s for a in parser._actions for s in a.option_strings]
    lines = [f"{parser.prog}: error: unrecognized arguments: {' '.join(extras)}"]
    for b in extras:
        if b.startswith("-"):
            close = difflib.get_close_matches(b.split("=")[0], known, n=1)
            if close:
                lines.append(f"did you mean {close[0]!r} instead of {b!r}?")
    return "\n".join(lines) + "\n\n" + parser.format_usage()


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="master random seed (default 0)")
    p.add_argument("--config", type=Path, help="JSON file of settings; flags take precedence")
    p.add_argument("--jobs", type=int, help="parallel workers where supported (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="safire", description="Source-region partitioning toolkit for forgery localization.")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--size", type=int, help="square image side, multiple of 8")
    p.add_argument("--sources", help="sources per image, N or LO-HI")
    p.add_argument("--strong", action="store_true", default=None, help="well-separated noise signatures")
    _common(p)

    for name, hlp in (("pretrain", "pretrain the encoder"), ("train", "train decoder and confidence head")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--data", type=Path, required=True, help="dataset directory from gen")
        p.add_argument("--out", type=Path, required=True, help="checkpoint to write")
        p.add_argument("--epochs", type=int, help="epoch count")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--log", type=Path, help="per-epoch CSV log")
        p.add_argument("--resume", type=Path, help="resume from a checkpoint written by this command")
        p.add_argument("--no-augment", action="store_true", default=None, help="disable post-processing augmentation")
        if name == "train":
            p.add_argument("--init", type=Path, help="pretrained checkpoint")
            p.add_argument("--plain", action="store_true", default=None,
                           help="train the unprompted binary baseline instead")
        _common(p)

    p = sub.add_parser("infer", help="grid-prompt inference on images")
    p.add_argument("--ckpt", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--image", "--input", dest="input", type=Path, required=True,
                   help="image PNG or directory of PNGs")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--mode", choices=["binary", "multi"], help="binary heatmap or multi-source partition")
    p.add_argument("--m", type=int, help="cluster count for kmeans in multi mode")
    p.add_argument("--cluster", choices=["kmeans", "dbscan"], help="clustering method")
    p.add_argument("--grid", type=int, help="prompt grid side (default 16)")
    p.add_argument("--eps", type=float, help="DBSCAN radius on normalised features")
    p.add_argument("--min-pts", dest="min_pts", type=int, help="DBSCAN core threshold")
    _common(p)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True, help="directory written by infer")
    p.add_argument("--gt", type=Path, required=True, help="directory of ground-truth PNG masks")
    p.add_argument("--metric", choices=sorted(METRICS), help="metric (default f1_fixed)")
    p.add_argument("--out", type=Path, required=True, help="CSV report")
    _common(p)

    p = sub.add_parser("robustness", help="binary F1 under a perturbation sweep")
    p.add_argument("--ckpt", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen")
    p.add_argument("--transform", choices=TRANSFORMS, help="perturbation")
    p.add_argument("--levels", help="comma-separated perturbation levels")
    p.add_argument("--out", type=Path, required=True, help="CSV report")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--coords", type=int, help="coordinates probed per loss (default 100)")
    p.add_argument("--eps", type=float, help="finite-difference step (default 1e-4)")
    p.add_argument("--size", type=int, help="toy image side")
    _common(p)
    return ap


def _settings(args) -> dict:
    """Merge defaults, config file and explicit flags."""
    merged = {"seed": 0, "jobs": 1, **DEFAULTS.get(args.cmd, {})}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"{args.config}: config file not found")
        except json.JSONDecodeError as e:
            raise DataError(f"{args.config}: invalid JSON ({e})")
        if not isinstance(cfg, dict):
            raise DataError(f"{args.config}: expected a JSON object")
        allowed = set(merged) | {"seed", "jobs"} | (TRAIN_KEYS if args.cmd in ("pretrain", "train") else set())
        unknown = set(cfg) - allowed
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)} for {args.cmd}")
        merged.update(cfg)
    for k, v in vars(args).items():
        if k not in ("cmd", "config", "verbose") and v is not None:
            merged[k] = v
    return merged


def _train_config(s: dict) -> TrainConfig:
    d = {k: s[k] for k in TRAIN_KEYS if k in s}
    d.update(epochs=s["epochs"], lr=s["lr"])
    if s.get("no_augment"):
        d["augment"] = PostProcessConfig.disabled()
    return TrainConfig.from_dict(d)


def cmd_gen(s):
    src = str(s["sources"])
    n_sources = tuple(int(v) for v in src.split("-")) if "-" in src else int(src)
    cfg = SynthConfig.strong() if s["strong"] else SynthConfig()
    generate_dataset(s["out"], int(s["n"]), s["seed"], size=int(s["size"]), n_sources=n_sources, cfg=cfg)
    print(f"wrote {s['n']} samples to {s['out']}")


def cmd_pretrain(s):
    cfg = _train_config(s)
    params, logs = pretrain(cfg, s["data"], s["seed"], resume=s.get("resume"), state_path=s["out"])
    if s.get("log"):
        write_log_csv(s["log"], logs)
    Path(str(s["out"]) + ".json").write_text(config_json(cfg))
    print(f"pretrained {len(logs)} epochs, final loss {logs[-1].loss:.5f}" if logs else "nothing to do")


def cmd_train(s):
    cfg = _train_config(s)
    pre = None
    if s.get("init") is not None:
        pre, _ = read_checkpoint(s["init"])
    if s.get("plain"):
        if pre is None:
            raise ConfigError("--plain needs --init")
        params, logs = train_plain(cfg, s["data"], pre, s["seed"])
        write_checkpoint(s["out"], params)
    else:
        params, logs = train(cfg, s["data"], pre, s["seed"], resume=s.get("resume"), state_path=s["out"])
    if s.get("log"):
        write_log_csv(s["log"], logs)
    Path(str(s["out"]) + ".json").write_text(config_json(cfg))
    print(f"trained {len(logs)} epochs, final loss {logs[-1].loss:.5f}" if logs else "nothing to do")


def _infer_one(task):
    params, path, out, opts = task
    img = read_image_png(path)
    res = infer(params, img, opts)
    stem = Path(path).stem
    if res.heatmap is not None:
        write_prediction(res.heatmap, out / f"{stem}.safr")
        Image.fromarray(np.round(res.heatmap * 255).astype(np.uint8), mode="L").save(out / f"{stem}_heatmap.png")
        write_mask_png(relabel_partition(res.heatmap > 0.5), out / f"{stem}_partition.png", kind="partition")
    else:
        write_prediction(res.soft, out / f"{stem}.safr")
        write_mask_png(res.partition, out / f"{stem}_partition.png", kind="partition")
    (out / f"{stem}.json").write_text(json.dumps(res.sidecar()))
    return stem, res.m


def cmd_infer(s):
    params, _ = read_checkpoint(s["ckpt"])
    src = Path(s["input"])
    paths = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not paths:
        raise DataError(f"{src}: no PNG images")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    opts = InferOptions(grid=s["grid"], mode=s["mode"], m=s["m"], cluster=s["cluster"],
                        eps=s["eps"], min_pts=s["min_pts"], seed=s["seed"])
    tasks = [(params, p, out, opts) for p in paths]
    if s["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=s["jobs"]) as ex:
            done = list(ex.map(_infer_one, tasks))
    else:
        done = [_infer_one(t) for t in tasks]
    print(f"inferred {len(done)} images into {out}")


def _read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        kind = "partition" if im.mode == "P" else "binary"
    return read_mask_png(path, kind=kind)


def cmd_eval(s):
    fn = METRICS[s["metric"]]
    gt_paths = sorted(Path(s["gt"]).glob("*.png"))
    if not gt_paths:
        raise DataError(f"{s['gt']}: no ground-truth PNGs")
    rows = []
    for gp in gt_paths:
        stem = gp.stem
        if s["metric"].startswith("f1"):
            pp = Path(s["pred"]) / f"{stem}.safr"
            if not pp.exists():
                raise DataError(f"{pp}: prediction missing")
            x = read_prediction(pp)
            y = read_mask_png(gp)
        else:
            pp = Path(s["pred"]) / f"{stem}_partition.png"
            if not pp.exists():
                raise DataError(f"{pp}: prediction missing")
            x = read_mask_png(pp, kind="partition")
            y = _read_labels(gp)
        if x.shape != y.shape:
            raise DataError(f"{stem}: prediction shape {x.shape} does not match ground truth {y.shape}")
        rows.append((stem, fn(y, x)))
    mean = float(np.mean([r[1] for r in rows]))
    lines = ["image,score"] + [f"{n},{v!r}" for n, v in rows] + [f"mean,{mean!r}"]
    Path(s["out"]).write_text("\n".join(lines) + "\n")
    print(f"{s['metric']} mean {mean:.4f} over {len(rows)} images")


def cmd_robustness(s):
    params, _ = read_checkpoint(s["ckpt"])
    try:
        levels = [float(v) for v in str(s["levels"]).split(",")]
    except ValueError:
        raise UsageError(f"--levels: expected comma-separated numbers, got {s['levels']!r}")
    rows = robustness_report(params, s["data"], s["transform"], levels, seed=s["seed"], jobs=s["jobs"])
    write_report_csv(s["out"], rows)
    base = unperturbed_score(params, s["data"], seed=s["seed"], jobs=s["jobs"])
    print(f"unperturbed {base:.4f}")
    for r in rows:
        print(f"{r.transform} {r.level:g}: {r.score:.4f} ({r.n_images} images)")


def cmd_gradcheck(s):
    results = gc.run(seed=s["seed"], n_coords=int(s["coords"]), eps=float(s["eps"]), size=int(s["size"]))
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"{r.mode}: loss {r.loss:.6f} max relative error {r.max_rel_error:.3e} over {r.n_coords} coords")
    print(f"max relative error {worst:.3e}")
    if not worst < GRAD_TOL:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {GRAD_TOL}")


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "robustness": cmd_robustness, "gradcheck": cmd_gradcheck}


def _subparser(ap: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for a in ap._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[name]
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(ap.format_help())
        args, extras = ap.parse_known_args(argv)
        if args.cmd is None:
            raise UsageError(ap.format_help())
        if extras:
            raise UsageError(_unknown_flags(_subparser(ap, args.cmd), extras))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        COMMANDS[args.cmd](_settings(args))
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ConfigError, FileNotFoundError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
