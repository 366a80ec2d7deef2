"""Command line: pretrain, eval, adapt, continual, verify, report.

Settings resolve as flags > config file > defaults. Every run writes the
resolved config next to its outputs; feeding that file back reproduces the run.

Exit codes: 0 ok, 1 usage or config error, 2 runtime fault, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import CONDITIONS, SceneSpec, ShiftSpec, generate
from .engine import (AdaptationConfig, METHODS, ablation_configs, accumulated_curve, method_config, round_means,
                     run_continual, run_episode)
from .errors import ConfigError, OCLError
from .experiments import class_ratio_vs_temperature
from .metrics import collapse_detector, confusion_matrix, histogram_entropy, miou, write_table_csv
from .model import SegNetToy, default_descriptor, load_checkpoint, predict, pretrain, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
OUT_ENV = "OCLTTT_OUT"

log = logging.getLogger("oclttt")


@dataclass
class PretrainSettings:
    n_images: int = 200
    data_seed: int = 1000
    epochs: int = 15
    lr: float = 0.05
    batch_size: int = 8


@dataclass
class StreamSettings:
    n_per_condition: int = 50
    rounds: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "ocl"
    tau: float | None = None
    taus: list | None = None
    ablation: bool = False
    out: str | None = None
    checkpoint: str | None = None
    width: int = 16
    conditions: list = field(default_factory=lambda: list(CONDITIONS))
    scene: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    stream: dict = field(default_factory=dict)
    adaptation: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        _checked(SceneSpec, self.scene, "scene")
        _checked(PretrainSettings, self.pretrain, "pretrain")
        _checked(StreamSettings, self.stream, "stream")
        self.adaptation_config()
        self.shifts()

    # typed views
    def scene_spec(self):
        return _checked(SceneSpec, self.scene, "scene")

    def pretrain_settings(self):
        return _checked(PretrainSettings, self.pretrain, "pretrain")

    def stream_settings(self):
        return _checked(StreamSettings, self.stream, "stream")

    def adaptation_config(self):
        base = AdaptationConfig.from_dict({**self.adaptation, "seed": self.seed})
        return method_config(self.method, base, tau=self.tau)

    def descriptor(self):
        return default_descriptor(self.scene_spec().num_classes, self.width)

    def shifts(self):
        out = []
        for c in self.conditions:
            if isinstance(c, str):
                if c not in CONDITIONS:
                    raise ConfigError(f"unknown condition {c!r}; known: {sorted(CONDITIONS)}")
                out.append(CONDITIONS[c])
            else:
                out.append(_checked(ShiftSpec, c, "conditions[]"))
        if not out:
            raise ConfigError("need at least one condition")
        return out

    def resolved(self):
        d = asdict(self)
        d["scene"] = asdict(self.scene_spec())
        d["pretrain"] = asdict(self.pretrain_settings())
        d["stream"] = asdict(self.stream_settings())
        a = asdict(AdaptationConfig.from_dict({**self.adaptation, "seed": self.seed}))
        a.pop("seed")
        d["adaptation"] = a
        return d


def _checked(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


# -- plumbing ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def load_config(args):
    data = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(data)
    for name in ("seed", "method", "tau", "out", "checkpoint"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "ablation", False):
        cfg.ablation = True
    if getattr(args, "taus", None):
        cfg.taus = [float(t) for t in args.taus.split(",")]
    if cfg.out is None:
        cfg.out = os.path.join(os.environ.get(OUT_ENV, "runs"), args.command)
    cfg.validate()
    return cfg


def _prepare_out(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    _write_json(os.path.join(cfg.out, "config.resolved.json"), cfg.resolved())


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _source(cfg):
    if not cfg.checkpoint:
        raise ConfigError("a checkpoint is required (--checkpoint or config key 'checkpoint')")
    if not os.path.exists(cfg.checkpoint):
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    ckpt = load_checkpoint(cfg.checkpoint)
    want = cfg.descriptor()
    if ckpt.descriptor != want:
        raise ConfigError("checkpoint architecture does not match the configured model:\n"
                          f"  checkpoint: {json.dumps(ckpt.descriptor, sort_keys=True)}\n"
                          f"  configured: {json.dumps(want, sort_keys=True)}")
    return ckpt


def _bench_stream(cfg):
    names = [s.label for s in cfg.shifts()]
    spec = cfg.scene_spec()
    n = cfg.stream_settings().n_per_condition
    stream = []
    for k, shift in enumerate(cfg.shifts()):
        stream += generate(spec, shift, n, [cfg.seed, k])
    return names, stream


def _episode_row(label, lg, ref_entropy):
    h = histogram_entropy(lg.pooled_class_ratio())
    flag, at = collapse_detector(lg, ref_entropy)
    return [label, lg.pooled_miou(), h, flag, at]


# -- commands -----------------------------------------------------------------------

def cmd_pretrain(cfg):
    _prepare_out(cfg)
    ps = cfg.pretrain_settings()
    spec = cfg.scene_spec()
    data = generate(spec, None, ps.n_images, ps.data_seed)
    model = SegNetToy(cfg.descriptor(), seed=cfg.seed)
    ckpt = pretrain(model, data, ps.epochs, ps.lr, batch_size=ps.batch_size, seed=cfg.seed,
                    log=lambda msg: log.info("%s", msg))
    path = os.path.join(cfg.out, "checkpoint.ckpt")
    save_checkpoint(ckpt, path)
    metrics = {"source_miou": ckpt.meta.get("source_miou"), "chance_miou": 1.0 / spec.num_classes,
               "epoch_loss": ckpt.meta.get("epoch_loss", []), "param_count": ckpt.param_count()}
    _write_json(os.path.join(cfg.out, "metrics.json"), metrics)
    print(json.dumps({"checkpoint": path, **metrics}, sort_keys=True))
    return EXIT_OK


def evaluate(ckpt, stream):
    """Pooled mIoU of the frozen checkpoint with stored BN statistics."""
    model = SegNetToy.from_checkpoint(ckpt)
    c = ckpt.descriptor["num_classes"]
    cm = np.zeros((c, c), dtype=np.int64)
    for img, lab in stream:
        cm += confusion_matrix(lab, predict(model, img).argmax(-1), c)
    return miou(cm)


def cmd_eval(cfg):
    ckpt = _source(cfg)
    _prepare_out(cfg)
    _, stream = _bench_stream(cfg)
    result = {"miou": evaluate(ckpt, stream), "images": len(stream)}
    _write_json(os.path.join(cfg.out, "eval.json"), result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_adapt(cfg):
    ckpt = _source(cfg)
    _prepare_out(cfg)
    _names, stream = _bench_stream(cfg)
    acfg = cfg.adaptation_config()
    frozen = run_episode(ckpt, stream, method_config("frozen", acfg))
    ref = histogram_entropy(frozen.pooled_class_ratio())
    header = ["method", "pooled_miou", "class_entropy", "collapsed", "collapse_step"]
    if cfg.ablation:
        rows = []
        for label, c in ablation_configs(acfg):
            lg = frozen if not (c.enable_ocl or c.enable_bn_mod or c.enable_restore) else run_episode(ckpt, stream, c)
            lg.write(cfg.out, f"ablation_{label}")
            rows.append(_episode_row(label, lg, ref))
        write_table_csv(os.path.join(cfg.out, "ablation.csv"), header, rows)
    else:
        lg = frozen if cfg.method == "frozen" else run_episode(ckpt, stream, acfg)
        lg.write(cfg.out, "episode")
        _write_curve(os.path.join(cfg.out, "accumulated_miou.csv"), {cfg.method: lg, "frozen": frozen})
        rows = [_episode_row(cfg.method, lg, ref), _episode_row("frozen", frozen, ref)]
        write_table_csv(os.path.join(cfg.out, "comparison.csv"), header, rows)
    if cfg.taus:
        table = class_ratio_vs_temperature(ckpt, stream, cfg.taus, acfg)
        c = ckpt.descriptor["num_classes"]
        write_table_csv(os.path.join(cfg.out, "class_ratio_vs_tau.csv"),
                        ["tau", "entropy", "pooled_miou"] + [f"class_ratio[{k}]" for k in range(c)],
                        [["baseline" if r["tau"] is None else r["tau"], r["entropy"], r["miou"]] + r["ratio"]
                         for r in table])
    _print_rows(header, rows)
    return EXIT_OK


def _write_curve(path, logs):
    curves = {k: accumulated_curve(v) for k, v in logs.items()}
    n = max(len(c) for c in curves.values())
    rows = [[i] + [c[i] if i < len(c) else None for c in curves.values()] for i in range(n)]
    write_table_csv(path, ["step"] + list(curves), rows)


def cmd_continual(cfg):
    ckpt = _source(cfg)
    _prepare_out(cfg)
    ss = cfg.stream_settings()
    spec = cfg.scene_spec()
    streams = [(s.label, generate(spec, s, ss.n_per_condition, [cfg.seed, k])) for k, s in enumerate(cfg.shifts())]
    lg = run_continual(ckpt, streams, ss.rounds, cfg.adaptation_config())
    lg.write(cfg.out, "continual")
    frozen = run_continual(ckpt, streams, 1, method_config("frozen", cfg.adaptation_config()))
    frozen_by_cond = {cond: v for _, cond, v in frozen.segment_table()}
    rows = [[rd, cond, v, frozen_by_cond[cond]] for rd, cond, v in lg.segment_table()]
    write_table_csv(os.path.join(cfg.out, "rounds.csv"), ["round", "condition", "pooled_miou", "frozen_miou"], rows)
    means = round_means(lg)
    write_table_csv(os.path.join(cfg.out, "round_means.csv"), ["round", "mean_miou"], sorted(means.items()))
    print(json.dumps({"round_means": {str(k): v for k, v in means.items()},
                      "frozen_mean": float(np.mean(list(frozen_by_cond.values())))}, sort_keys=True))
    return EXIT_OK


def cmd_verify(args):
    from . import verify

    names = args.suite or list(verify.SUITES)
    unknown = [n for n in names if n not in verify.SUITES]
    if unknown:
        raise ConfigError(f"unknown suites {unknown}; choose from {list(verify.SUITES)}")
    results = [verify.SUITES[n]() for n in names]
    report = {"passed": all(r.passed for r in results), "suites": [r.as_dict() for r in results]}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "verify.json"), report)
    print(json.dumps(report, sort_keys=True, default=float))
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_report(args):
    root = args.out or os.environ.get(OUT_ENV, "runs")
    files = sorted(glob.glob(os.path.join(root, "**", "*_summary.csv"), recursive=True))
    if not files:
        raise ConfigError(f"no episode summaries under {root}")
    rows = []
    for path in files:
        with open(path, newline="") as fh:
            recs = list(csv.DictReader(fh))
        if not recs:
            continue
        last = recs[-1]
        mean_img = float(np.mean([float(r["miou_image"]) for r in recs]))
        rows.append([os.path.relpath(path, root), len(recs), float(last["miou_accumulated"]), mean_img])
    header = ["summary", "images", "final_accumulated_miou", "mean_image_miou"]
    write_table_csv(os.path.join(root, "report.csv"), header, rows)
    _print_rows(header, rows)
    return EXIT_OK


def _print_rows(header, rows):
    print("\t".join(header))
    for r in rows:
        print("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))


# -- entry point ----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="oclttt", description="Output-contrastive test-time training on synthetic segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if checkpoint:
            sp.add_argument("--checkpoint")
            sp.add_argument("--method", choices=METHODS)
            sp.add_argument("--tau", type=float)
        return sp

    common(sub.add_parser("pretrain", help="train the source model"))
    common(sub.add_parser("eval", help="score a frozen checkpoint on the shifted stream"), checkpoint=True)
    ad = common(sub.add_parser("adapt", help="test-time adaptation over the shifted stream"), checkpoint=True)
    ad.add_argument("--ablation", action="store_true", help="run the five-row component ablation")
    ad.add_argument("--taus", help="comma-separated temperatures for the class-ratio table")
    common(sub.add_parser("continual", help="repeated condition rounds without reset"), checkpoint=True)
    v = sub.add_parser("verify", help="run the property suites")
    v.add_argument("--suite", action="append", help="restrict to a suite (repeatable)")
    v.add_argument("--out")
    r = sub.add_parser("report", help="summarise episode logs under an output root")
    r.add_argument("--out")
    return p


COMMANDS = {"pretrain": cmd_pretrain, "eval": cmd_eval, "adapt": cmd_adapt, "continual": cmd_continual}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OCLError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
