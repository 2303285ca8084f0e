"""Command-line experiment harness.

Subcommands: ``run`` (one sequence), ``ablate`` (one ablation axis),
``compare`` (method grid with parameter counts and timing), ``report``
(pretty-print artifacts from an output directory). Configuration is a
flat ``key = value`` file; command-line flags override file values.

Exit codes: 0 success, 2 bad configuration, 3 runtime failure.
"""

import argparse
import itertools
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, fields

from .backbone import get_backbone
from .data import SUITE_ORDER, make_suite, pretrain_spec
from .evaluation import summarize_runs
from .training import METHODS, TrainConfig, run_sequence

ABLATE_AXES = ("k", "rank", "sequence", "gating", "size")
K_GRID = (10, 20, 100, 200)
RANK_GRID = (8, 16, 32)
SIZE_GRID = ("tiny", "base")


class ConfigError(Exception):
    def __init__(self, field_name, message):
        super().__init__("field %r: %s" % (field_name, message))
        self.field_name = field_name


@dataclass
class ExperimentConfig:
    method: str = "ours"
    sequence: str = "generic,finegrained,texture"
    sequences: str = "all"  # compare/ablate: "all" or ;-separated lists
    size: str = "tiny"
    rank: int = 16
    alpha: float = -1.0  # -1 means "use the rank"
    k: int = 10
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    out: str = "runs/out"
    gating: bool = True
    augment: bool = False
    samples_per_class: int = 35
    image_size: int = 16
    prefix_len: int = 8
    timing_reps: int = 1000

    def seq_list(self):
        return [s.strip() for s in self.sequence.split(",") if s.strip()]

    def alpha_or_none(self):
        return None if self.alpha < 0 else self.alpha

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError("method", "%r not in %s" % (self.method, METHODS))
        if self.size not in SIZE_GRID:
            raise ConfigError("size", "%r not in %s" % (self.size, SIZE_GRID))
        if self.rank not in RANK_GRID:
            raise ConfigError("rank", "%r not in %s" % (self.rank, RANK_GRID))
        seq = self.seq_list()
        if not seq:
            raise ConfigError("sequence", "empty")
        bad = [s for s in seq if s not in SUITE_ORDER]
        if bad:
            raise ConfigError("sequence", "unknown domains %s" % bad)
        if len(set(seq)) != len(seq):
            raise ConfigError("sequence", "duplicates in %s" % seq)
        if self.k < 1:
            raise ConfigError("k", "must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class", "must be >= 2")
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError("image_size", "must be a positive multiple of 8")
        if self.prefix_len < 0:
            raise ConfigError("prefix_len", "must be >= 0")
        if self.timing_reps < 1:
            raise ConfigError("timing_reps", "must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed", "must be >= 0")

    def sequences_list(self):
        if self.sequences == "all":
            return [list(p) for p in itertools.permutations(SUITE_ORDER)]
        out = []
        for part in self.sequences.split(";"):
            seq = [s.strip() for s in part.split(",") if s.strip()]
            if seq:
                out.append(seq)
        if not out:
            raise ConfigError("sequences", "no sequences given")
        for seq in out:
            bad = [s for s in seq if s not in SUITE_ORDER]
            if bad:
                raise ConfigError("sequences", "unknown domains %s" % bad)
        return out


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def parse_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError("config", "cannot read %r (%s)" % (path, exc))
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", "line %d is not key = value" % lineno)
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def build_config(file_values, overrides):
    cfg = ExperimentConfig()
    typed = {f.name: f.type for f in fields(ExperimentConfig)}
    for key, raw in file_values.items():
        if key not in typed:
            raise ConfigError(key, "unknown configuration key")
        setattr(cfg, key, _coerce_value(key, typed[key], raw))
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    cfg.validate()
    return cfg


def _coerce_value(key, ftype, raw):
    try:
        if ftype in ("bool", bool):
            word = raw.lower()
            if word not in _BOOL_WORDS:
                raise ValueError("not a boolean: %r" % raw)
            return _BOOL_WORDS[word]
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(key, str(exc))


# ---------------------------------------------------------------------------
# shared run helpers


def _prepare(cfg):
    datasets = make_suite(cfg.seed, cfg.samples_per_class, cfg.image_size)
    return datasets


def _backbone_for(cfg, size=None):
    spec = pretrain_spec(cfg.seed, image_size=cfg.image_size)
    return get_backbone(size or cfg.size, cfg.seed, spec)


def _train_config(cfg):
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        augment=cfg.augment,
    )


def _resolved_method(cfg):
    if cfg.method == "ours" and not cfg.gating:
        return "ours_no_gate"
    return cfg.method


def _run_one(cfg, method, sequence, datasets, backbone, eval_ks=None, out_dir=None,
             rank=None):
    return run_sequence(
        method,
        sequence,
        datasets,
        backbone,
        _train_config(cfg),
        rank=rank if rank is not None else cfg.rank,
        alpha=cfg.alpha_or_none(),
        k=cfg.k,
        eval_ks=eval_ks,
        prefix_len=cfg.prefix_len,
        out_dir=out_dir,
    )


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(cfg):
    datasets = _prepare(cfg)
    backbone = _backbone_for(cfg)
    result = _run_one(
        cfg, _resolved_method(cfg), cfg.seq_list(), datasets, backbone, out_dir=cfg.out
    )
    m = result.metrics[cfg.k]
    print(
        "run %s seq=%s k=%d: acc=%.4f bwt=%s fwt=%s -> %s"
        % (
            result.method,
            ",".join(result.sequence),
            cfg.k,
            m.acc,
            "%.4f" % m.bwt if m.bwt is not None else "n/a",
            "%.4f" % m.fwt if m.fwt is not None else "n/a",
            cfg.out,
        )
    )
    return 0


def _ablate_runs(cfg, axis):
    """Yield (setting, sequence, CLMetrics) for the axis grid."""
    datasets = _prepare(cfg)
    sequences = cfg.sequences_list()
    method = _resolved_method(cfg)
    if axis == "k":
        min_bank = min(len(d[0]) for d in datasets.values())
        too_big = [kk for kk in K_GRID if kk > min_bank]
        if too_big:
            raise ConfigError(
                "samples_per_class",
                "bank of %d rows cannot serve k in %s" % (min_bank, too_big),
            )
        backbone = _backbone_for(cfg)
        for seq in sequences:
            result = _run_one(cfg, method, seq, datasets, backbone, eval_ks=K_GRID)
            for kk in K_GRID:
                yield kk, seq, result.metrics[kk]
    elif axis == "rank":
        backbone = _backbone_for(cfg)
        for rank in RANK_GRID:
            for seq in sequences:
                result = _run_one(cfg, method, seq, datasets, backbone, rank=rank)
                yield rank, seq, result.metrics[cfg.k]
    elif axis == "sequence":
        backbone = _backbone_for(cfg)
        for seq in sequences:
            result = _run_one(cfg, method, seq, datasets, backbone)
            yield ",".join(seq), seq, result.metrics[cfg.k]
    elif axis == "gating":
        backbone = _backbone_for(cfg)
        for setting, m in (("on", "ours"), ("off", "ours_no_gate")):
            for seq in sequences:
                result = _run_one(cfg, m, seq, datasets, backbone)
                yield setting, seq, result.metrics[cfg.k]
    elif axis == "size":
        for size in SIZE_GRID:
            backbone = _backbone_for(cfg, size)
            for seq in sequences:
                result = _run_one(cfg, method, seq, datasets, backbone)
                yield size, seq, result.metrics[cfg.k]
    else:
        raise ConfigError("axis", "%r not in %s" % (axis, ABLATE_AXES))


def cmd_ablate(cfg, axis):
    if axis not in ABLATE_AXES:
        raise ConfigError("axis", "%r not in %s" % (axis, ABLATE_AXES))
    rows = list(_ablate_runs(cfg, axis))
    groups = {}
    for setting, seq, metrics in rows:
        groups.setdefault(setting, []).append(metrics)
    summaries = {s: summarize_runs(ms) for s, ms in groups.items()}
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "ablate_%s.csv" % axis)
    with open(path, "w") as fh:
        fh.write(
            "axis,setting,sequence,acc,bwt,fwt,"
            "acc_mean,acc_std,bwt_mean,bwt_std,fwt_mean,fwt_std\n"
        )
        for setting, seq, m in rows:
            s = summaries[setting]
            fh.write(
                "%s,%s,%s,%s,%s,%s,%s,%s,%s,%s,%s,%s\n"
                % (
                    axis,
                    setting,
                    " ".join(seq),
                    _fmt(m.acc),
                    _fmt(m.bwt),
                    _fmt(m.fwt),
                    _fmt(s["acc"]["mean"]),
                    _fmt(s["acc"]["std"]),
                    _fmt(s["bwt"]["mean"]),
                    _fmt(s["bwt"]["std"]),
                    _fmt(s["fwt"]["mean"]),
                    _fmt(s["fwt"]["std"]),
                )
            )
    for setting in summaries:
        s = summaries[setting]
        print(
            "ablate %s=%s: acc %.4f +/- %.4f"
            % (axis, setting, s["acc"]["mean"], s["acc"]["std"])
        )
    print("wrote %s" % path)
    return 0


def _median_infer_seconds(model, image, reps):
    times = []
    sample = image[None]
    model.features(sample)  # warm once outside the timed region
    for _ in range(reps):
        t0 = time.perf_counter()
        model.features(sample)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_compare(cfg):
    datasets = _prepare(cfg)
    sequences = cfg.sequences_list()
    first_domain = SUITE_ORDER[0]
    probe_image = datasets[first_domain][1].images[0]
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "compare.csv")
    rows = []
    backbone = _backbone_for(cfg)
    for method in METHODS:
        for seq in sequences:
            result = _run_one(cfg, method, seq, datasets, backbone)
            counts = result.model.param_counts()["model"]
            med = _median_infer_seconds(result.model, probe_image, cfg.timing_reps)
            m = result.metrics[cfg.k]
            rows.append(
                (
                    method,
                    " ".join(seq),
                    m.acc,
                    m.bwt,
                    m.fwt,
                    counts["total"],
                    counts["trainable"],
                    med,
                )
            )
            print(
                "compare %s [%s]: acc=%.4f params=%d infer=%.3fms"
                % (method, " ".join(seq), m.acc, counts["total"], med * 1e3)
            )
    with open(path, "w") as fh:
        fh.write(
            "method,sequence,acc,bwt,fwt,params_total,params_trainable,"
            "infer_s_median\n"
        )
        for method, seq, acc, bwt, fwt, total, trainable, med in rows:
            fh.write(
                "%s,%s,%s,%s,%s,%d,%d,%s\n"
                % (method, seq, _fmt(acc), _fmt(bwt), _fmt(fwt), total, trainable,
                   _fmt(med))
            )
    print("wrote %s" % path)
    return 0


def cmd_report(out_dir):
    """Pretty-print whatever artifacts an output directory holds."""
    found = False
    mpath = os.path.join(out_dir, "metrics.json")
    if os.path.exists(mpath):
        found = True
        with open(mpath) as fh:
            m = json.load(fh)
        print("metrics for %s on [%s] (k=%d, rank=%d):" % (
            m["method"], m["sequence"], m["k"], m["rank"]))
        for key in ("acc", "bwt", "fwt"):
            val = m.get(key)
            print("  %-4s %s" % (key, "n/a" if val is None else "%.4f" % val))
    xpath = os.path.join(out_dir, "matrix.csv")
    if os.path.exists(xpath):
        found = True
        with open(xpath) as fh:
            lines = [ln.strip().split(",") for ln in fh.readlines()[1:] if ln.strip()]
        print("accuracy matrix (rows: after stage, cols: domain):")
        stages = sorted({int(r[0]) for r in lines})
        domains = []
        for r in lines:
            if r[1] not in domains:
                domains.append(r[1])
        print("  stage  " + "  ".join("%12s" % d for d in domains))
        for s in stages:
            vals = {r[1]: float(r[2]) for r in lines if int(r[0]) == s}
            cells = ["%12.4f" % vals[d] if d in vals else " " * 12 for d in domains]
            print("  %5d  " % s + "  ".join(cells))
    for name in sorted(os.listdir(out_dir)) if os.path.isdir(out_dir) else []:
        if name.startswith("ablate_") and name.endswith(".csv") or name == "compare.csv":
            found = True
            print("\n%s:" % name)
            with open(os.path.join(out_dir, name)) as fh:
                sys.stdout.write(fh.read())
    if not found:
        print("no artifacts under %r" % out_dir, file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------


def _add_common_flags(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seq", help="comma-separated domain order")
    p.add_argument("--rank", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--no-gate", action="store_true", help="disable feature gating")
    p.add_argument("--size", choices=SIZE_GRID)
    p.add_argument("--epochs", type=int)


def _config_from_args(args):
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "method": args.method,
        "rank": args.rank,
        "k": args.k,
        "seed": args.seed,
        "out": args.out,
        "size": args.size,
        "epochs": args.epochs,
    }
    if args.seq:
        overrides["sequence"] = args.seq
        overrides["sequences"] = args.seq
    if args.no_gate:
        overrides["gating"] = False
    return build_config(file_values, overrides)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cladapt",
        description="Continual-learning experiments with gated multi-domain "
        "LoRA attention and PEFT baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in (
        ("run", "train one domain sequence and write its artifacts"),
        ("ablate", "sweep one ablation axis over sequence permutations"),
        ("compare", "run every method and tabulate metrics, size, latency"),
        ("report", "pretty-print artifacts from an output directory"),
    ):
        p = sub.add_parser(name, help=blurb)
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=ABLATE_AXES)
        if name == "report":
            p.add_argument("--out", default="runs/out")
        else:
            _add_common_flags(p)
    args = parser.parse_args(argv)

    try:
        if args.command == "report":
            return cmd_report(args.out)
        cfg = _config_from_args(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.axis)
        return cmd_compare(cfg)
    except ConfigError as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print("error: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
