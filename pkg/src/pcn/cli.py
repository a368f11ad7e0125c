"""Command-line entry point: ``pcn {gen,train,lowshot,ablate,protos}``.

Exit status is 0 on success, 2 for configuration errors and 1 for runtime
failures. Every output file is written atomically.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

from . import harness
from .config import RunConfig, build_config, dumps_config
from .datagen import atomic_write, load_dataset, save_dataset
from .episodic import build_test_prototypes, dumps_checkpoint, load_checkpoint
from .exceptions import ConfigurationError, PCNError
from .metrics import per_class_csv, report_csv

log = logging.getLogger("pcn")

_COMMAND_HELP = {
    "gen": "generate a synthetic long-tailed dataset",
    "train": "train a PCN, PN or cross-entropy model",
    "lowshot": "evaluate a checkpoint over low-shot folds",
    "ablate": "temperature, alpha or post-hoc clustering ablation",
    "protos": "dump nearest neighbours of prototypes and test responsibilities",
}


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            parser.add_argument(flag, dest=f.name, type=int, default=None, help="64-bit seed")
        else:
            parser.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog="pcn", description="Prototypical clustering networks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMAND_HELP.items():
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name == "ablate":
            p.add_argument("--kind", required=True, choices=["temperature", "alpha", "posthoc"])
    return parser


def _out_path(rc, name):
    return os.path.join(rc.out_dir, name)


def _require(rc, *keys):
    missing = [k for k in keys if not getattr(rc, k)]
    if missing:
        raise ConfigurationError("missing required setting(s): " + ", ".join(missing))


def _load_inputs(rc, need_checkpoint=True):
    _require(rc, "dataset", *(("checkpoint",) if need_checkpoint else ()))
    dataset = load_dataset(rc.dataset)
    if dataset.n_base == 0:
        raise ConfigurationError(f"{rc.dataset} has no base/novel split")
    if not need_checkpoint:
        return dataset, None, None
    net, bank = load_checkpoint(rc.checkpoint, tau=rc.tau_train, alpha=rc.alpha)
    return dataset, net, bank


def cmd_gen(rc):
    out = rc.out or _out_path(rc, "dataset.txt")
    dataset = harness.make_dataset(rc)
    save_dataset(dataset, out)
    meta = {
        "modes_per_class": dataset.meta["modes_per_class"],
        "sizes": [int(s) for s in dataset.class_sizes],
        "base_classes": dataset.base_classes,
        "novel_classes": dataset.novel_classes,
        "seed": rc.seed,
    }
    atomic_write(out + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s (%d examples)", out, len(dataset.y))


def cmd_train(rc):
    dataset, _, _ = _load_inputs(rc, need_checkpoint=False)
    ckpt = rc.checkpoint or _out_path(rc, "model.ckpt")
    if rc.method == "ce":
        net, head, history = harness.train_ce(dataset, rc)
        bank = build_test_prototypes(net, dataset, 1, 1, rc.seed, tau=rc.tau_train)
        rows = ["class_id," + ",".join(f"w{i}" for i in range(head.weight.shape[1])) + ",bias"]
        for c, w, b in zip(head.classes, head.weight, head.bias):
            rows.append(f"{c}," + ",".join("%.17g" % v for v in w) + ",%.17g" % b)
        atomic_write(_out_path(rc, "head.csv"), "\n".join(rows) + "\n")
    else:
        result = harness.train_model(dataset, rc)
        net, bank, history = result.net, result.bank, result.history
    atomic_write(ckpt, dumps_checkpoint(net, bank))
    hist = harness.rows_csv(
        ("epoch", "train_loss", "val_mca"), [(h["epoch"], h["train_loss"], h["val_mca"]) for h in history]
    )
    atomic_write(_out_path(rc, "history.csv"), hist)
    atomic_write(_out_path(rc, "run.cfg"), dumps_config(rc))


def _m_for(rc):
    if rc.method == "pn":
        return 1, 1
    return rc.M_base, rc.M_novel


def cmd_lowshot(rc):
    dataset, net, _ = _load_inputs(rc)
    folds = harness.make_folds(dataset, rc)
    if rc.method == "ce":
        for k in rc.knn_k:
            report = harness.knn_lowshot(net, dataset, folds, k)
            atomic_write(_out_path(rc, f"report_{k}nn.csv"), report_csv(report))
            atomic_write(_out_path(rc, f"per_class_{k}nn.csv"), per_class_csv(report))
        return
    m_base, m_novel = _m_for(rc)
    report = harness.prototype_lowshot(net, dataset, folds, m_base, m_novel, rc.tau_train, rc.seed)
    atomic_write(_out_path(rc, "report.csv"), report_csv(report))
    atomic_write(_out_path(rc, "per_class.csv"), per_class_csv(report))
    if rc.sweep == "shot":
        rows = harness.shot_sweep(net, dataset, rc, rc.method, m_base, m_novel)
        text = harness.rows_csv(("method", "shot", "metric", "mean", "std"), rows)
        atomic_write(_out_path(rc, "sweep_shot.csv"), text)
    elif rc.sweep == "novel":
        rows = harness.novel_count_sweep(net, dataset, rc, rc.method, m_base, m_novel)
        text = harness.rows_csv(("method", "n_novel", "metric", "mean", "std"), rows)
        atomic_write(_out_path(rc, "sweep_novel.csv"), text)


def cmd_ablate(rc, kind):
    if kind == "alpha":
        dataset, _, _ = _load_inputs(rc, need_checkpoint=False)
        rows = harness.alpha_ablation(dataset, rc)
        text = harness.rows_csv(("method", "alpha", "metric", "mean", "std"), rows)
    elif kind == "temperature":
        dataset, net, _ = _load_inputs(rc)
        rows = harness.temperature_sweep(net, dataset, rc)
        text = harness.rows_csv(("delta_tau", "metric", "mean", "std"), rows)
    else:
        dataset, pn_net, _ = _load_inputs(rc)
        pcn_net = None
        if rc.pcn_checkpoint:
            pcn_net, _ = load_checkpoint(rc.pcn_checkpoint, tau=rc.tau_train)
        rows = harness.posthoc_ablation(pn_net, dataset, rc, pcn_net)
        text = harness.rows_csv(("model", "eval_cpc", "metric", "mean", "std"), rows)
    atomic_write(rc.out or _out_path(rc, f"ablate_{kind}.csv"), text)


def cmd_protos(rc):
    dataset, net, _ = _load_inputs(rc)
    protos, resp = harness.prototype_dump(net, dataset, rc)
    atomic_write(_out_path(rc, "prototypes.csv"), protos)
    atomic_write(_out_path(rc, "responsibilities.csv"), resp)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        rc = build_config(args.config, overrides)
        if args.command == "gen":
            cmd_gen(rc)
        elif args.command == "train":
            cmd_train(rc)
        elif args.command == "lowshot":
            cmd_lowshot(rc)
        elif args.command == "ablate":
            cmd_ablate(rc, args.kind)
        elif args.command == "protos":
            cmd_protos(rc)
    except ConfigurationError as exc:
        print(f"pcn {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (PCNError, OSError) as exc:
        print(f"pcn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
