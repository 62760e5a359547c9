"""Batch command line: analyze, train, evaluate, recommend.

Exit codes: 0 success, 2 usage/config error, 3 data/model mismatch,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .autodiff import NonFiniteError, load_checkpoint, save_checkpoint
from .data import EmptyDatasetError, ParseError, chronological_split, load_interactions
from .graphs import build_item_evolution_graph
from .recommender import TGODE, Example, TrainConfig, TrainingError, train_tgode, variant

log = logging.getLogger("tgode")

EXTRA_KEYS = {"data", "format", "out", "time_col", "variant"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---- config ---------------------------------------------------------------

def _coerce(name: str, raw: str):
    kinds = {f.name: type(f.default) for f in fields(TrainConfig)}
    kind = kinds.get(name)
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise CliError(2, f"config key {name!r}: expected a boolean, got {raw!r}")
    if kind in (int, float):
        try:
            return kind(raw)
        except ValueError:
            raise CliError(2, f"config key {name!r}: expected {kind.__name__}, got {raw!r}") from None
    if name == "time_col":
        return int(raw)
    return raw


def read_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError(2, f"config file not found: {path}")
    allowed = set(TrainConfig.field_names()) | EXTRA_KEYS
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(2, f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise CliError(2, f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


# ---- checkpoint -----------------------------------------------------------

_PREFIXES = (
    ("generator.time_codec.", "codec/c_t."),
    ("encoder.phi.", "codec/phi."),
    ("ode.g.", "codec/g."),
    ("generator.", "diffusion/"),
    ("ode.", "ode/"),
    ("", "rec/"),
)


def _ckpt_name(name: str) -> str:
    for src, dst in _PREFIXES:
        if name.startswith(src):
            return dst + name[len(src):]
    raise AssertionError(name)


def model_tensors(model: TGODE, num_users: int) -> dict[str, np.ndarray]:
    out = {_ckpt_name(k): v for k, v in model.state_dict().items() if not k.startswith("cs_")}
    cfg = model.cfg
    for f in fields(TrainConfig):
        out[f"meta/config/{f.name}"] = np.array([float(getattr(cfg, f.name))])
    out["meta/item_vocab_size"] = np.array([float(model.num_items)])
    out["meta/user_vocab_size"] = np.array([float(num_users)])
    return out


def model_from_tensors(tensors: dict[str, np.ndarray]) -> TGODE:
    kinds = {f.name: type(f.default) for f in fields(TrainConfig)}
    cfg_kwargs = {}
    for name, kind in kinds.items():
        value = float(tensors[f"meta/config/{name}"][0])
        cfg_kwargs[name] = bool(value) if kind is bool else kind(value)
    cfg = TrainConfig(**cfg_kwargs)
    model = TGODE(int(tensors["meta/item_vocab_size"][0]), cfg).to(cfg.dtype)
    lookup = {_ckpt_name(k): k for k in model.state_dict() if not k.startswith("cs_")}
    state = {lookup[k]: torch.from_numpy(v).to(cfg.dtype) for k, v in tensors.items() if k in lookup}
    missing = set(lookup.values()) - set(state)
    if missing:
        raise CliError(3, f"checkpoint is missing tensors: {sorted(missing)[:5]}")
    model.load_state_dict(state, strict=False)
    return model


def load_model(path: str | Path) -> tuple[TGODE, dict]:
    path = Path(path)
    if not path.is_file():
        raise CliError(2, f"checkpoint not found: {path}")
    try:
        tensors = load_checkpoint(path)
    except ValueError as exc:
        raise CliError(3, str(exc)) from None
    return model_from_tensors(tensors), tensors


# ---- commands -------------------------------------------------------------

def _load_data(path, fmt, time_col=2):
    path = Path(path)
    if not path.is_file():
        raise CliError(2, f"data file not found: {path}")
    try:
        return load_interactions(path, fmt, time_col=time_col)
    except (ParseError, EmptyDatasetError) as exc:
        raise CliError(3, f"{path}: {exc}") from None


def cmd_analyze(args) -> int:
    d = _load_data(args.data, args.format, args.time_col)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        report = evaluation.analyze(d, slice_days=args.slice_days)
        evaluation.write_distribution_csv(report.interval_histogram, out / "intervals.csv")
        evaluation.write_distribution_csv(report.emergence, out / "emergence.csv")
        (out / "analysis.json").write_text(report.to_json() + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(2, f"cannot write to {out}: {exc}") from None
    print(report.to_json())
    return 0


def _train_settings(args) -> tuple[dict, TrainConfig]:
    settings = read_config(args.config) if args.config else {}
    for key in ("data", "format", "out", "time_col"):
        if getattr(args, key, None) is not None:
            settings[key] = getattr(args, key)
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    settings.update(overrides)
    chosen = [v for v in ("base", "no_diff", "no_ode", "no_cs") if getattr(args, v, False)]
    if len(chosen) > 1:
        raise CliError(2, "choose at most one ablation flag")
    if chosen:
        settings["variant"] = chosen[0].replace("_", "-")
    for key in ("data", "out"):
        if key not in settings:
            raise CliError(2, f"missing required setting {key!r}")
    cfg_kwargs = {k: v for k, v in settings.items() if k in TrainConfig.field_names()}
    try:
        cfg = TrainConfig(**cfg_kwargs)
        cfg = variant(cfg, settings.get("variant", "full"))
    except ValueError as exc:
        raise CliError(2, str(exc)) from None
    return settings, cfg


def cmd_train(args) -> int:
    settings, cfg = _train_settings(args)
    d = _load_data(settings["data"], settings.get("format", "csv"), settings.get("time_col", 2))
    split = chronological_split(d)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.jsonl"
    with report_path.open("w", encoding="utf-8") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        try:
            model, _ = train_tgode(split, cfg, on_epoch=on_epoch)
        except (TrainingError, NonFiniteError) as exc:
            raise CliError(4, f"numeric failure: {exc}") from None
    save_checkpoint(out / "model.ckpt", model_tensors(model, d.user_vocab_size))
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "report": str(report_path)}))
    return 0


def _model_for_data(args):
    model, tensors = load_model(args.checkpoint)
    d = _load_data(args.data, args.format, args.time_col)
    if d.item_vocab_size != model.num_items:
        raise CliError(3, f"checkpoint has {model.num_items} items but data has {d.item_vocab_size}")
    split = chronological_split(d)
    model.set_item_graph(build_item_evolution_graph(split.train))
    return model, d, split


def cmd_evaluate(args) -> int:
    model, d, split = _model_for_data(args)
    try:
        report = evaluation.evaluate_split(model, split, args.split)
    except NonFiniteError as exc:
        raise CliError(4, f"numeric failure: {exc}") from None
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_recommend(args) -> int:
    model, d, split = _model_for_data(args)
    if args.user not in d.user_ids:
        raise CliError(3, f"unknown user {args.user!r}")
    seq = d.sequence_of(d.user_ids.index(args.user))
    prefix = seq.before_raw(args.time)
    if len(prefix) == 0:
        raise CliError(3, f"user {args.user!r} has no interactions before time {args.time}")
    from .evaluation import target_examples
    from .data import Target

    target = Target(prefix.user_index, -1, args.time, d.normalize(args.time), prefix)
    with torch.no_grad():
        model.eval()
        ex = target_examples(model, [target])[0]
        probs = model([Example(ex.prefix, ex.t_target, -1, ex.edges)])[0].numpy()
    order = evaluation.ranking_from_scores(probs)[: max(0, args.k)]
    for i in order:
        print(f"{d.item_ids[i]}\t{probs[i]:.8g}")
    return 0


# ---- parser ---------------------------------------------------------------

def _data_args(p, required=True):
    p.add_argument("--data", required=required, help="interaction file (user,item,timestamp[,rating])")
    p.add_argument("--format", choices=("csv", "tsv"), default=None if not required else "csv")
    p.add_argument("--time-col", dest="time_col", type=int, default=None if not required else 2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tgode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="interval and emergence analyses")
    _data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--slice-days", dest="slice_days", type=int, default=250)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    _data_args(p, required=False)
    p.add_argument("--out")
    for f in fields(TrainConfig):
        if isinstance(f.default, bool):
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default), default=None)
    p.add_argument("--float32", action="store_const", const=True, default=None)
    for flag in ("base", "no-diff", "no-ode", "no-cs"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="ranking metrics on the valid or test split")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-k items for one user at a time")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)
    p.add_argument("--user", required=True)
    p.add_argument("--time", type=int, required=True, help="target time, seconds since epoch")
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
