"""Command-line entry point: ``aetlab train | eval | report | rerun``.

Every command writes ``manifest.json`` into its output directory before
anything else; ``aetlab rerun`` replays a command from that file alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import train as tr
from .config import DEFAULTS, RunConfig, paper_scale, tomllib
from .errors import AetError, ConfigError, InputError
from .report import MANIFEST, build_report, run_label

log = logging.getLogger("aetlab")

TRAIN_LAYOUT = {"metrics": "metrics.jsonl", "checkpoint": "checkpoint.bin"}
EVAL_LAYOUT = {"table": "errors.csv", "summary": "summary.json"}


def code_hash() -> str:
    """Git-style tree hash over the package sources."""
    root = Path(__file__).parent
    lines = []
    for p in sorted(root.glob("*.py")):
        blob = p.read_bytes()
        digest = hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()
        lines.append(f"{digest} {p.name}\n")
    return hashlib.sha1("".join(lines).encode()).hexdigest()


def write_manifest(out: Path, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {"version": __version__, "code_hash": code_hash()} | payload
    (out / MANIFEST).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def read_manifest(path: Path) -> dict:
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None


def parse_set(items) -> dict:
    """``section.key=value`` overrides; values use TOML syntax."""
    out: dict = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def _apply_sets(cfg: RunConfig, sets: dict) -> RunConfig:
    for section, kv in sets.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        cfg = cfg.override(section, **kv)
    return cfg


# train ----------------------------------------------------------------------------------------


def resolve_train_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    t = {k: v for k, v in (("mode", args.mode), ("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    if t:
        cfg = cfg.override("train", **t)
    if args.paper_scale:
        cfg = paper_scale(cfg)
    o = {k: v for k, v in (("entmin_weight", args.entmin), ("lam", args.lam)) if v is not None}
    if o:
        cfg = cfg.override("objectives", **o)
    return _apply_sets(cfg, parse_set(args.set))


def execute_train(values: dict, out: Path) -> tr.TrainResult:
    cfg = RunConfig.from_dict(values)
    write_manifest(out, {"command": "train", "config": cfg.values, "seed": cfg.values["train"]["seed"],
                         "layout": TRAIN_LAYOUT})
    train_ds, _ = cfg.datasets()
    res = tr.run(cfg.train(), cfg.net(), train_ds, out_dir=out)
    print(f"trained {run_label(cfg.values)} seed {cfg.values['train']['seed']}: "
          f"{len(res.metrics)} steps, final loss {res.metrics[-1]['total']:.4f}" if res.metrics else
          "trained 0 epochs")
    print(f"wrote {out / TRAIN_LAYOUT['checkpoint']} and {out / TRAIN_LAYOUT['metrics']}")
    return res


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    t = cfg.values["train"]
    out = Path(args.out) if args.out else Path("runs") / f"{run_label(cfg.values)}-seed{t['seed']}"
    execute_train(cfg.values, out)
    return 0


# eval -----------------------------------------------------------------------------------------


def _probe_cfg(e: dict, head: str, seed: int) -> ev.ProbeConfig:
    return ev.ProbeConfig(head=head, hidden=e["probe_hidden"], epochs=e["probe_epochs"], lr=e["probe_lr"], seed=seed)


def execute_eval(spec: dict, out: Path) -> list[dict]:
    """Run one evaluation protocol described by an eval manifest body."""
    cfg = RunConfig.from_dict(spec["config"])
    write_manifest(out, spec | {"command": "eval", "layout": EVAL_LAYOUT})
    expected = replace(cfg.net(), **cfg.train().decoder_settings())
    model, meta = ev.load_model(spec["checkpoint"], expected=expected)
    e, seed, protocol = cfg.values["eval"], spec["seed"], spec["protocol"]
    train_ds, test_ds = cfg.datasets()
    feat_rng = np.random.default_rng([seed, 0])
    rows: list[dict] = []
    if protocol == "classify":
        err = ev.classifier_error(model, test_ds, e["n_samples"], feat_rng)
        rows.append({"protocol": "classifier", "setting": "label-head", "seed": seed, "error_rate": err})
    else:
        train_bank = ev.extract_features(model, train_ds, e["n_samples"], feat_rng, source=spec["checkpoint"])
        test_bank = ev.extract_features(model, test_ds, e["n_samples"], feat_rng, source=spec["checkpoint"])
        if protocol == "knn":
            for k in e["k"]:
                rows.append({"protocol": "knn", "setting": f"k={k}", "seed": seed,
                             "error_rate": ev.knn_error(train_bank, test_bank, k)})
        elif protocol == "probe":
            err = ev.probe_train(train_bank, test_bank, _probe_cfg(e, e["head"], seed))
            rows.append({"protocol": f"probe-{e['head']}", "setting": "all", "seed": seed, "error_rate": err})
        elif protocol == "few-label":
            table = ev.few_label_protocol(train_bank, test_bank, e["per_class"], np.random.default_rng([seed, 1]),
                                          e["repetitions"], _probe_cfg(e, e["head"], seed))
            rows += [{"protocol": f"few-label-{e['head']}", "seed": seed} | r for r in table]
        else:
            raise ConfigError(f"unknown eval protocol {protocol!r}")
    ev.write_csv(out / EVAL_LAYOUT["table"], rows)
    ev.write_json(out / EVAL_LAYOUT["summary"], {"checkpoint": spec["checkpoint"], "run_label": spec["run_label"],
                                                 "checkpoint_epoch": meta.get("epoch"), "rows": rows})
    for r in rows:
        print(f"{r['protocol']} {r['setting']} seed {seed}: error {r['error_rate']:.4f}")
    return rows


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    run_man = read_manifest(run_dir / MANIFEST)
    if run_man.get("command") != "train":
        raise InputError(f"{run_dir / MANIFEST} does not describe a training run")
    ckpt = run_dir / run_man["layout"]["checkpoint"]
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict(run_man["config"])
    e = {}
    if getattr(args, "k", None):
        e["k"] = args.k
    if getattr(args, "head", None):
        e["head"] = args.head
    if getattr(args, "per_class", None):
        e["per_class"] = args.per_class
    if args.n_samples is not None:
        e["n_samples"] = args.n_samples
    if e:
        cfg = cfg.override("eval", **e)
    cfg = _apply_sets(cfg, parse_set(args.set))
    seed = args.seed if args.seed is not None else run_man["seed"]
    out = Path(args.out) if args.out else run_dir / f"eval-{args.protocol}"
    spec = {"protocol": args.protocol, "checkpoint": str(ckpt.resolve()), "run_label": run_label(run_man["config"]),
            "seed": seed, "config": cfg.values}
    execute_eval(spec, out)
    return 0


# report / rerun -------------------------------------------------------------------------------


def cmd_report(args) -> int:
    for r in args.runs:
        if not Path(r).is_dir():
            raise InputError(f"not a directory: {r}")
    written = build_report(args.runs, args.out)
    for p in written.values():
        print(f"wrote {p}")
    return 0


def cmd_rerun(args) -> int:
    path = Path(args.manifest)
    man = read_manifest(path)
    out = Path(args.out) if args.out else path.parent
    if man.get("code_hash") != code_hash():
        log.warning("manifest was written by different code (%s); results may differ", man.get("code_hash"))
    if man.get("command") == "train":
        execute_train(man["config"], out)
    elif man.get("command") == "eval":
        keys = ("protocol", "checkpoint", "run_label", "seed", "config")
        execute_eval({k: man[k] for k in keys}, out)
    else:
        raise InputError(f"{path}: unknown command {man.get('command')!r}")
    return 0


# parser ---------------------------------------------------------------------------------------


def _positive_ints(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aetlab", description="Autoencoding-transformation representation learning.")
    p.add_argument("--version", action="version", version=f"aetlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    t.add_argument("--config", help="TOML config file (defaults if omitted)")
    t.add_argument("--mode", choices=tr.MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--paper-scale", action="store_true", help="use the original full-scale hyper-parameters")
    t.add_argument("--entmin", type=float, help="entropy-minimization weight (0 disables)")
    t.add_argument("--lambda", dest="lam", type=float, help="weight of the label term in sat mode")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    t.add_argument("--out", help="output directory (default runs/<mode>-seed<seed>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run on frozen features")
    esub = e.add_subparsers(dest="protocol", required=True)
    for name, helptext in (("knn", "K-nearest-neighbour error"), ("probe", "probe classifier error"),
                           ("few-label", "probe error with few labels per class"),
                           ("classify", "error of the run's own label head")):
        q = esub.add_parser(name, help=helptext)
        q.add_argument("run", help="training output directory")
        q.add_argument("--config", help="config to check the checkpoint against (default: the run's)")
        q.add_argument("--seed", type=int, help="evaluation seed (default: the run's)")
        q.add_argument("--n-samples", type=int, help="representation samples averaged per image")
        q.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        q.add_argument("--out", help="output directory (default <run>/eval-<protocol>)")
        if name == "knn":
            q.add_argument("--k", type=_positive_ints, help="comma-separated K values (default 3,5,10,15,20)")
        if name in ("probe", "few-label"):
            q.add_argument("--head", choices=("linear", "nonlinear"))
        if name == "few-label":
            q.add_argument("--per-class", type=_positive_ints, help="comma-separated labeled counts per class")
        q.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarize runs as markdown, CSV and SVG")
    r.add_argument("runs", nargs="+", help="directories searched recursively for manifests")
    r.add_argument("--out", default="report", help="output directory")
    r.set_defaults(func=cmd_report)

    rr = sub.add_parser("rerun", help="replay a command from its manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", help="output directory (default: the manifest's directory)")
    rr.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AetError as exc:
        print(f"aetlab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"aetlab: error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
