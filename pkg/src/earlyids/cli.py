"""Command-line interface: ``earlyids <command> [options]``.

Every command writes its outputs and a ``manifest.json`` (resolved config,
seed, input digests, library versions) into the run directory given by
``--out``. Settings are resolved as defaults < ``--config`` file < flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .augment import AugmentConfig
from .datagen import generate, load_profiles, timing_only_pair
from .dataset import UNLABELED, Dataset, export_jsonl, load_dataset, save_dataset
from .encoding import EncodingKind, additive_pe, fourier_init, positions_for, rope_angles
from .errors import ConfigError, DataError, EarlyIDSError, FormatError
from .evaluator import (
    DEFAULT_TAU_GRID, decide_early, evaluate, tau_sweep, write_report, write_sweep_csv,
)
from .flows import FilterConfig, FlowTable, assemble_flows, calibrate_baseline, filter_packet, preprocess_flow
from .model import ModelConfig, census, load_model, param_count, save_model
from .pcap import PcapStats, read_pcap
from .rng import DEFAULT_SEED
from .trainer import TrainConfig, split_test, the_select, train_final, write_fold_table

log = logging.getLogger("earlyids")

MODEL_FILE = "model.eidm"
TEST_FILE = "test.eids"


# ---------------------------------------------------------------------------
# configuration

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
        doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(doc) - {"seed", "model", "train", "augment", "filter", "flows"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return doc


def _build(cls, section: dict, flags: dict, **fixed):
    names = {f.name for f in fields(cls)}
    merged = {**section, **{k: v for k, v in flags.items() if v is not None}, **fixed}
    unknown = set(merged) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


class RunConfig:
    """Resolved settings for one invocation."""

    def __init__(self, args: argparse.Namespace):
        doc = _read_config(args.config)
        self.command = args.command
        self.seed = args.seed if args.seed is not None else int(doc.get("seed", DEFAULT_SEED))
        self.out = Path(args.out)
        self.jobs = args.jobs
        self.model_section = dict(doc.get("model") or {})
        self.model_flags = {
            "encoding": getattr(args, "encoding", None),
            "time_scale": getattr(args, "time_scale", None),
            "p_drop": getattr(args, "p_drop", None),
        }
        encodings = getattr(args, "encodings", None)
        self.train = _build(TrainConfig, doc.get("train") or {}, {
            "max_epochs": getattr(args, "epochs", None),
            "batch_size": getattr(args, "batch_size", None),
            "lr": getattr(args, "lr", None),
            "patience": getattr(args, "patience", None),
            "folds": getattr(args, "folds", None),
            "tau": getattr(args, "tau", None),
            "online_augment": False if getattr(args, "no_online_augment", False) else None,
            "encodings": tuple(encodings.split(",")) if encodings else None,
            "jobs": args.jobs,
        }, seed=self.seed)
        self.augment = _build(AugmentConfig, doc.get("augment") or {}, {})
        flt = doc.get("filter") or {}
        self.filter_protocols = list(getattr(args, "protocol", None) or flt.get("protocols", []))
        self.filter_endpoints = list(getattr(args, "endpoint", None) or flt.get("endpoints", []))
        self.flows = dict(doc.get("flows") or {})

    def model_base(self, C: int, d: int, N: int, encoding=None) -> ModelConfig:
        flags = dict(self.model_flags)
        if encoding is not None:
            flags["encoding"] = encoding
        return _build(ModelConfig, self.model_section, flags, C=C, d=d, N=N)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        train["encodings"] = [e.value for e in self.train.encodings]
        return {
            "command": self.command,
            "seed": self.seed,
            "jobs": self.jobs,
            "model": {**self.model_section, **{k: v for k, v in self.model_flags.items() if v is not None}},
            "train": train,
            "augment": asdict(self.augment),
            "filter": {"protocols": self.filter_protocols, "endpoints": self.filter_endpoints},
            "flows": self.flows,
        }


def _digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run: RunConfig, argv, inputs=(), outputs=(), extra: Optional[dict] = None) -> None:
    manifest = {
        "argv": list(argv),
        "config": run.to_dict(),
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
        "versions": {"earlyids": __version__, "numpy": np.__version__, "pyyaml": yaml.__version__,
                     "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    (run.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_generate(run: RunConfig, args) -> list:
    if args.profiles:
        ds = generate(load_profiles(args.profiles), run.seed, args.d, args.N)
    else:
        ds = timing_only_pair(run.seed, args.flows_per_class, args.d, args.N)
    path = run.out / args.output
    save_dataset(ds, path)
    summary = {"flows": len(ds), "class_names": ds.class_names,
               "class_counts": ds.class_counts().tolist(), "d": ds.d, "N": ds.N}
    _dump(summary, run.out / "generate.json")
    print(json.dumps(summary))
    return [path]


def _parse_labels(items) -> dict:
    out = {}
    for item in items or ():
        path, sep, name = item.rpartition("=")
        if not sep or not path or not name:
            raise ConfigError(f"--label expects PATH=CLASS, got {item!r}")
        out[str(Path(path))] = name
    return out


def _read_flows(path, rules: FilterConfig, table_args: dict, stats: PcapStats, counts: dict, baseline):
    table = FlowTable(baseline_active=baseline, **table_args)
    kept = []
    for pkt in read_pcap(path, stats):
        counts["read"] += 1
        if not pkt.is_ip:
            counts["unparseable"] += 1
        elif filter_packet(pkt, rules):
            kept.append(pkt)
        else:
            counts["filtered"] += 1
    return list(assemble_flows(kept, table))


def cmd_prepare(run: RunConfig, args) -> list:
    labels = _parse_labels(args.label)
    pcaps = [str(Path(p)) for p in args.pcaps]
    unknown = set(labels) - set(pcaps)
    if unknown:
        raise DataError(f"label keys not among the inputs: {sorted(unknown)}")
    if not args.unlabeled:
        missing = [p for p in pcaps if p not in labels]
        if missing:
            raise DataError(f"no label for {missing}; pass --label PATH=CLASS or --unlabeled")
    class_names = list(dict.fromkeys(labels[p] for p in pcaps if p in labels))
    rules = FilterConfig.parse(run.filter_protocols, run.filter_endpoints)
    table_args = {"N": args.N, "idle_timeout": run.flows.get("idle_timeout", args.idle_timeout),
                  "check_interval": run.flows.get("check_interval", args.check_interval)}
    baseline = run.flows.get("baseline_active", args.baseline)
    if args.calibrate:
        baseline = calibrate_baseline(read_pcap(args.calibrate), table_args["idle_timeout"],
                                      table_args["check_interval"], args.N)
    counts = {"read": 0, "filtered": 0, "unparseable": 0}
    stats = PcapStats()
    samples = []
    for path in pcaps:
        label = class_names.index(labels[path]) if path in labels else UNLABELED
        for flow in _read_flows(path, rules, table_args, stats, counts, baseline):
            samples.append(preprocess_flow(flow, args.d, args.N, label, origin=len(samples)))
    ds = Dataset(class_names, samples, args.d, args.N)
    if not samples:
        log.warning("no flows survived filtering; the dataset is empty")
    out = run.out / args.output
    save_dataset(ds, out)
    outputs = [out]
    if args.jsonl:
        export_jsonl(ds, run.out / "flows.jsonl")
        outputs.append(run.out / "flows.jsonl")
    per_class = {name: int(c) for name, c in zip(class_names, ds.class_counts())} if class_names else {}
    unlabeled = sum(s.label == UNLABELED for s in samples)
    report = {**counts, "truncated_records": stats.truncated, "flows": len(samples),
              "flows_per_class": per_class, "unlabeled_flows": unlabeled, "baseline_active": baseline,
              "empty": not samples}
    _dump(report, run.out / "prepare.json")
    print(json.dumps(report, sort_keys=True))
    return outputs


def _load_labeled(path) -> Dataset:
    ds = load_dataset(path)
    if not len(ds):
        raise DataError(f"{path} holds no flows")
    if any(s.label == UNLABELED for s in ds.samples):
        raise DataError(f"{path} contains unlabeled flows; it can only be used with infer")
    return ds


def cmd_select(run: RunConfig, args) -> list:
    ds = _load_labeled(args.dataset)
    dev, _ = split_test(ds, run.train.test_fraction, run.seed)
    base = run.model_base(ds.C, ds.d, ds.N)
    chosen, table = the_select(dev, run.train, run.augment, base)
    folds_csv = run.out / "folds.csv"
    write_fold_table(table, folds_csv)
    result = {"chosen": chosen.value,
              "mean_val_edl": {r.encoding.value: r.mean for r in table},
              "std_val_edl": {r.encoding.value: r.std for r in table}}
    _dump(result, run.out / "selection.json")
    print(json.dumps(result, sort_keys=True))
    return [folds_csv, run.out / "selection.json"]


def _chosen_encoding(args, run: RunConfig):
    if args.encoding:
        return args.encoding
    if args.selection:
        try:
            return json.loads(Path(args.selection).read_text())["chosen"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read selection {args.selection}: {exc}") from exc
    if "encoding" in run.model_section:
        return run.model_section["encoding"]
    if len(run.train.encodings) == 1:
        return run.train.encodings[0].value
    return EncodingKind.TA_SINUSOIDAL.value


def cmd_train(run: RunConfig, args) -> list:
    ds = _load_labeled(args.dataset)
    dev, test = split_test(ds, run.train.test_fraction, run.seed)
    encoding = _chosen_encoding(args, run)
    base = run.model_base(ds.C, ds.d, ds.N, encoding)
    res = train_final(dev, encoding, run.train, run.augment, base, log_path=run.out / "train_log.jsonl")
    model_path = run.out / MODEL_FILE
    save_model(res.params, res.cfg, ds.class_names, model_path)
    save_dataset(test, run.out / TEST_FILE)
    summary = {"encoding": res.cfg.encoding.value, "best_epoch": res.best_epoch,
               "epochs_run": res.epochs_run, "best_val_edl": res.best_val_edl,
               "parameters": param_count(res.cfg), "dev_flows": len(dev), "test_flows": len(test)}
    _dump(summary, run.out / "train.json")
    print(json.dumps(summary, sort_keys=True))
    return [model_path, run.out / TEST_FILE, run.out / "train.json", run.out / "train_log.jsonl"]


def _model_and_data(args):
    params, cfg, names = load_model(args.model)
    ds = _load_labeled(args.dataset)
    if ds.class_names != names:
        raise DataError(f"dataset classes {ds.class_names} differ from model classes {names}")
    if (ds.d, ds.N) != (cfg.d, cfg.N):
        raise DataError(f"dataset shape d={ds.d}, N={ds.N} does not match the model (d={cfg.d}, N={cfg.N})")
    return params, cfg, ds


def _benign(args, names) -> Optional[int]:
    if args.benign is None:
        return None
    if args.benign not in names:
        raise ConfigError(f"--benign {args.benign!r} is not one of {names}")
    return names.index(args.benign)


def cmd_evaluate(run: RunConfig, args) -> list:
    params, cfg, ds = _model_and_data(args)
    o_values = tuple(int(o) for o in args.erde_o.split(","))
    report = evaluate(params, cfg, ds, run.train.tau, o_values, _benign(args, ds.class_names),
                      include_unreached=not args.exclude_unreached)
    write_report(report, run.out / "report.json", run.out / "report.csv")
    print(json.dumps(report.summary(), sort_keys=True))
    return [run.out / "report.json", run.out / "report.csv"]


def cmd_sweep(run: RunConfig, args) -> list:
    params, cfg, ds = _model_and_data(args)
    taus = tuple(float(t) for t in args.taus.split(",")) if args.taus else DEFAULT_TAU_GRID
    if any(not 0.0 < t <= 1.0 for t in taus):
        raise ConfigError("every tau must lie in (0, 1]")
    reports = tau_sweep(params, cfg, ds, taus, benign=_benign(args, ds.class_names))
    path = run.out / "sweep.csv"
    write_sweep_csv(reports, path)
    print(path.read_text(), end="")
    return [path]


def _infer_sample(args, run: RunConfig, cfg: ModelConfig):
    path = Path(args.input)
    if path.suffix == ".eids":
        ds = load_dataset(path)
        if not 0 <= args.index < len(ds):
            raise DataError(f"--index {args.index} outside 0..{len(ds) - 1}")
        sample = ds.samples[args.index]
        if (ds.d, ds.N) != (cfg.d, cfg.N):
            raise DataError("dataset shape does not match the model")
        return sample
    rules = FilterConfig.parse(run.filter_protocols, run.filter_endpoints)
    counts = {"read": 0, "filtered": 0, "unparseable": 0}
    flows = _read_flows(path, rules, {"N": cfg.N, "idle_timeout": args.idle_timeout},
                        PcapStats(), counts, args.baseline)
    if not 0 <= args.index < len(flows):
        raise DataError(f"{path}: {len(flows)} flows, --index {args.index} out of range")
    return preprocess_flow(flows[args.index], cfg.d, cfg.N)


def cmd_infer(run: RunConfig, args) -> list:
    params, cfg, names = load_model(args.model)
    sample = _infer_sample(args, run, cfg)
    tau = run.train.tau
    dec = decide_early(params, cfg, sample, tau)
    result = {"label": names[dec.predicted], "class_index": dec.predicted,
              "confidence": dec.confidence, "packets_used": dec.packets_used,
              "threshold_met": dec.threshold_met, "tau": tau, "flow_packets": sample.n}
    _dump(result, run.out / "infer.json")
    print(json.dumps(result, sort_keys=True))
    return [run.out / "infer.json"]


def _encoding_table(cfg: ModelConfig, freqs, times) -> tuple[list, np.ndarray]:
    T = np.asarray(times, dtype=np.float64)[None, :]
    pos = positions_for(cfg.encoding, T, cfg.time_scale)[0]
    if cfg.encoding.rotary:
        cos, sin = rope_angles(pos[None, :], cfg.d_h)
        header = [f"cos{i}" for i in range(cos.shape[-1])] + [f"sin{i}" for i in range(sin.shape[-1])]
        return header, np.concatenate([cos[0], sin[0]], axis=-1)
    if cfg.encoding == EncodingKind.NONE:
        return [], np.zeros((len(pos), 0))
    pe = additive_pe(cfg.encoding, pos, cfg.d_m, freqs)
    return [f"pe{i}" for i in range(pe.shape[-1])], pe


def cmd_describe(run: RunConfig, args) -> list:
    params, cfg, names = load_model(args.model)
    per_array = census(params)
    info = {"config": cfg.to_dict(), "class_names": names, "parameters": param_count(cfg),
            "stored_values": per_array["base"] + per_array["encoding"], "arrays": per_array}
    _dump(info, run.out / "describe.json")
    outputs = [run.out / "describe.json"]
    print(f"encoding: {cfg.encoding.value}")
    print(f"classes: {', '.join(names)}")
    print(f"parameters: {info['parameters']}")
    for name, size in per_array.items():
        print(f"  {name:10s} {size}")
    if args.dump_encoding:
        times = [float(t) for t in args.timestamps.split(",")] if args.timestamps else list(range(cfg.N))
        freqs = params.get("pe.freqs", fourier_init(cfg.d_m))
        header, table = _encoding_table(cfg, freqs, times)
        path = run.out / args.dump_encoding
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *header])
            for t, row in zip(times, table):
                w.writerow([repr(t), *(repr(float(v)) for v in row)])
        outputs.append(path)
    return outputs


COMMANDS = {
    "generate": cmd_generate, "prepare": cmd_prepare, "select": cmd_select, "train": cmd_train,
    "evaluate": cmd_evaluate, "sweep": cmd_sweep, "infer": cmd_infer, "describe": cmd_describe,
}


# ---------------------------------------------------------------------------
# argument parsing

def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--encoding", help="positional encoding kind, e.g. ta-rope, sinusoidal")
    g.add_argument("--time-scale", type=float, help="multiplier applied to timestamps (default 1.0)")
    g.add_argument("--p-drop", type=float, help="dropout probability")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, help="maximum epochs (default 200)")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--patience", type=int)
    g.add_argument("--no-online-augment", action="store_true", help="disable per-batch augmentation")


def _filter_flags(p):
    p.add_argument("--protocol", action="append", help="keep only PROTO[:PORT] (repeatable)")
    p.add_argument("--endpoint", action="append", help="keep only [src=|dst=]CIDR (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earlyids", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with seed/model/train/augment/filter/flows sections")
    common.add_argument("--seed", type=int, help=f"run seed (default {DEFAULT_SEED})")
    common.add_argument("--out", default="run", help="run directory (created if missing)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for fold training")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic labeled dataset")
    p.add_argument("--profiles", help="YAML profile file; default is the timing-only pair")
    p.add_argument("--flows-per-class", type=int, default=200)
    p.add_argument("--d", type=int, default=448)
    p.add_argument("--N", type=int, default=30)
    p.add_argument("-o", "--output", default="dataset.eids", help="file name inside the run directory")

    p = sub.add_parser("prepare", parents=[common], help="turn PCAP captures into a prepared dataset")
    p.add_argument("pcaps", nargs="+")
    p.add_argument("--label", action="append", metavar="PATH=CLASS", help="class of every flow in PATH")
    p.add_argument("--unlabeled", action="store_true", help="allow inputs without a label")
    _filter_flags(p)
    p.add_argument("--baseline", type=float, default=100.0, help="benign active-flow baseline")
    p.add_argument("--calibrate", metavar="PCAP", help="measure the baseline from a benign capture")
    p.add_argument("--idle-timeout", type=float, default=64.0)
    p.add_argument("--check-interval", type=float, default=10.0)
    p.add_argument("--d", type=int, default=448)
    p.add_argument("--N", type=int, default=30)
    p.add_argument("--jsonl", action="store_true", help="also write flows.jsonl")
    p.add_argument("-o", "--output", default="dataset.eids")

    p = sub.add_parser("select", parents=[common], help="cross-validate candidate encodings")
    p.add_argument("dataset")
    p.add_argument("--encodings", help="comma-separated candidates (default: the three time-aware kinds)")
    p.add_argument("--folds", type=int)
    p.add_argument("--tau", type=float, help="threshold for per-fold metrics")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("train", parents=[common], help="train the final model on the development split")
    p.add_argument("dataset")
    p.add_argument("--selection", help="selection.json written by select")
    _model_flags(p)
    _train_flags(p)

    for name, helptext in (("evaluate", "early-detection metrics at one threshold"),
                           ("sweep", "metrics over a grid of thresholds")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("dataset")
        p.add_argument("--model", required=True)
        p.add_argument("--benign", help="name of the benign class (default: auto-detect)")
        if name == "evaluate":
            p.add_argument("--tau", type=float)
            p.add_argument("--erde-o", default="5", help="comma-separated ERDE deadlines")
            p.add_argument("--exclude-unreached", action="store_true",
                           help="leave flows that never reach tau out of earliness")
        else:
            p.add_argument("--taus", help="comma-separated thresholds (default: 12-point grid)")

    p = sub.add_parser("infer", parents=[common], help="classify a single flow early")
    p.add_argument("input", help="PCAP file or prepared dataset (.eids)")
    p.add_argument("--model", required=True)
    p.add_argument("--index", type=int, default=0, help="which flow of the input to classify")
    p.add_argument("--tau", type=float)
    p.add_argument("--idle-timeout", type=float, default=64.0)
    p.add_argument("--baseline", type=float, default=100.0)
    _filter_flags(p)

    p = sub.add_parser("describe", parents=[common], help="print a model's configuration and parameter census")
    p.add_argument("--model", required=True)
    p.add_argument("--dump-encoding", metavar="CSV", help="write positional encoding values to CSV")
    p.add_argument("--timestamps", help="comma-separated timestamps for --dump-encoding (default 0..N-1)")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = RunConfig(args)
        run.out.mkdir(parents=True, exist_ok=True)
        inputs = [p for p in (getattr(args, "dataset", None), getattr(args, "model", None),
                              getattr(args, "input", None), getattr(args, "profiles", None),
                              getattr(args, "calibrate", None), *(getattr(args, "pcaps", None) or ()))
                  if p]
        missing = [p for p in inputs if not Path(p).is_file()]
        if missing:
            raise FormatError(f"input not found: {missing}")
        outputs = COMMANDS[args.command](run, args)
        write_manifest(run, argv, inputs, outputs)
    except EarlyIDSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
