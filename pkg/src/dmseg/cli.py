"""``dmseg`` command line: data generation, distance maps, training, inference, evaluation, comparison.

Every subcommand writes its artifacts under ``--out`` together with a
``manifest.json`` that records the resolved configuration. Config files are
JSON objects whose keys mirror the dataclass fields; flags override them.

Exit codes: 0 success, 1 runtime failure (missing file, bad input, divergence),
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from dmseg import __version__, datagen, distance, metrics, pipeline, plotting
from dmseg.autograd.checkpoint import load_checkpoint, save_checkpoint
from dmseg.errors import DmsegError
from dmseg.losses import DEFAULT_ALPHA, write_loss_csv
from dmseg.volume import Volume, read_rvol, write_rvol

log = logging.getLogger("dmseg")


class MissingInput(Exception):
    def __init__(self, path):
        super().__init__(f"no such file or directory: {path}")
        self.path = path


def _need(path: str) -> str:
    if not os.path.exists(path):
        raise MissingInput(path)
    return path


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    with open(_need(path)) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise DmsegError(f"{path}: config must be a JSON object")
    return data


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(out: str, command: str, config: dict, outputs: list[str], inputs: list[str] = ()) -> None:
    _write_json(os.path.join(out, "manifest.json"), {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {p: _sha256_file(p) for p in inputs if os.path.isfile(p)},
        "outputs": sorted(os.path.basename(p) for p in outputs),
    })


def _load_data(path: str, window) -> pipeline.PreparedData:
    pairs, _ = datagen.read_dataset(_need(path))
    if not pairs:
        raise DmsegError(f"{path}: dataset is empty")
    return pipeline.prepare(pairs, window)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _load_json(args.config)
    cfg.update(_overrides(args, ["shape", "noise_std"]))
    if args.lesions is not None:
        cfg["lesion_count"] = args.lesions
    spec = datagen.PhantomSpec(**cfg)
    pairs = datagen.generate_dataset(spec, args.count, args.seed)
    os.makedirs(args.out, exist_ok=True)
    meta = datagen.write_dataset(args.out, pairs, spec, args.seed)
    _manifest(args.out, "gen-data", {"count": args.count, "seed": args.seed, "phantom_spec": spec.to_dict()},
              ["dataset.json"] + [c[k] for c in meta["cases"] for k in ("image", "mask")])
    print(f"wrote {len(pairs)} phantoms to {args.out} (sha256 {meta['sha256'][:12]})")


def cmd_compute_dm(args) -> None:
    mask = read_rvol(_need(args.mask))
    num_classes = max(2, int(mask.data.max()) + 1, args.class_id + 1)
    dm = distance.distance_map(mask.data, args.class_id, args.variant, num_classes)
    out_dir = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(out_dir, exist_ok=True)
    distance.save_distance_map(args.output, dm, mask.spacing)
    outputs = [args.output, args.output + ".json"]
    if args.figure:
        plotting.distance_map_panel(mask.data, args.figure, args.class_id)
        outputs.append(args.figure)
    print(f"{args.variant} of class {args.class_id} -> {args.output}"
          + (f" ({dm.flag})" if dm.flag else ""))


def cmd_pretrain(args) -> None:
    cfg = pipeline.PretrainConfig.from_dict({**_load_json(args.config),
                                             **_overrides(args, ["epochs", "seed", "lr", "width"])})
    pairs, _ = datagen.read_dataset(_need(args.data))
    masks = [m.data for _, m in pairs]
    if args.split is not None:
        tr, _, _ = pipeline.split_indices(len(masks), args.split)
        masks = [masks[i] for i in tr]
    os.makedirs(args.out, exist_ok=True)
    ckpt, record = pipeline.pretrain_lrnet(masks, args.variant, cfg)
    ckpt_path = os.path.join(args.out, "lrnet.ckpt")
    save_checkpoint(ckpt_path, ckpt)
    _write_json(os.path.join(args.out, "run_record.json"), record.to_dict())
    rows = [(h["epoch"], k, h[k]) for h in record.history for k in ("train_loss", "val_loss") if h.get(k) is not None]
    write_loss_csv(os.path.join(args.out, "losses.csv"), rows)
    plotting.loss_curves(record.history, os.path.join(args.out, "losses.png"), f"LR-Net [{args.variant}]")
    _manifest(args.out, "pretrain-lrnet", {"variant": args.variant, **asdict(cfg)},
              ["lrnet.ckpt", "run_record.json", "losses.csv", "losses.png"], [args.data])
    print(f"LR-Net [{args.variant}] best epoch {record.best_epoch}, held-out reconstruction Dice "
          f"{record.best_val_dice:.4f} -> {ckpt_path}")


def _train_config(args) -> pipeline.TrainConfig:
    d = _load_json(args.config)
    d.update(_overrides(args, ["seed", "epochs", "seg_loss", "dm_variant", "alpha", "lr"]))
    if args.no_lrnet:
        d["use_lrnet"] = False
    if args.unfreeze:
        d["freeze_lrnet"] = False
    return pipeline.TrainConfig.from_dict(d)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    data = _load_data(args.data, cfg.window)
    lr_ckpt = load_checkpoint(_need(args.lrnet)) if args.lrnet else None
    os.makedirs(args.out, exist_ok=True)
    ckpt, record, lr_final = pipeline.train_joint(data, lr_ckpt, cfg)
    save_checkpoint(os.path.join(args.out, "mnet.ckpt"), ckpt)
    outputs = ["mnet.ckpt", "run_record.json", "losses.csv", "losses.png"]
    if lr_final is not None:
        save_checkpoint(os.path.join(args.out, "lrnet_final.ckpt"), lr_final)
        outputs.append("lrnet_final.ckpt")
    _write_json(os.path.join(args.out, "run_record.json"), record.to_dict())
    rows = [(h["epoch"], k, h[k]) for h in record.history for k in ("train_loss", "val_loss")]
    write_loss_csv(os.path.join(args.out, "losses.csv"), rows)
    plotting.loss_curves(record.history, os.path.join(args.out, "losses.png"), cfg.label())
    if record.report:
        rep = metrics.MetricsReport([metrics.CaseMetrics(**c) for c in record.report["per_case"]],
                                    record.report["aggregate"])
        rep.to_csv(os.path.join(args.out, "test_metrics.csv"))
        rep.to_json(os.path.join(args.out, "test_metrics.json"))
        outputs += ["test_metrics.csv", "test_metrics.json"]
    inputs = [args.data] + ([args.lrnet] if args.lrnet else [])
    _manifest(args.out, "train", asdict(cfg), outputs, inputs)
    dc = (record.report or {}).get("aggregate", {}).get("dc_mean", math.nan)
    print(f"{cfg.label()}: best epoch {record.best_epoch}, val Dice {record.best_val_dice:.4f}, test DC {dc:.4f}")


def cmd_infer(args) -> None:
    ckpt = load_checkpoint(_need(args.model))
    image = read_rvol(_need(args.image))
    mask, probs = pipeline.infer(ckpt, image)
    out_dir = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(out_dir, exist_ok=True)
    write_rvol(args.output, Volume(mask, image.spacing))
    if args.probs:
        write_rvol(args.probs, Volume(probs[1].astype(np.float32), image.spacing))
    print(f"{int(mask.sum())} foreground voxels -> {args.output}")


def _pairs_for_eval(pred: str, ref: str) -> list[tuple[str, str, str]]:
    if os.path.isdir(pred) != os.path.isdir(ref):
        raise DmsegError("--pred and --ref must both be files or both be directories")
    if not os.path.isdir(pred):
        return [(os.path.splitext(os.path.basename(ref))[0], pred, ref)]
    names = sorted(n for n in os.listdir(ref) if n.endswith(".rvol"))
    out = []
    for n in names:
        p = os.path.join(pred, n)
        if not os.path.exists(p):
            # datasets name references mask_XXXX; predictions may use pred_XXXX
            p = os.path.join(pred, n.replace("mask_", "pred_"))
        out.append((os.path.splitext(n)[0], _need(p), os.path.join(ref, n)))
    return out


def cmd_evaluate(args) -> None:
    triples = _pairs_for_eval(_need(args.pred), _need(args.ref))
    cases = []
    spacing = None
    for cid, p, r in triples:
        pv, rv = read_rvol(p), read_rvol(r)
        spacing = spacing or rv.spacing
        cases.append((cid, pv.data, rv.data))
    report = metrics.evaluate(cases, spacing or (1.0, 1.0, 1.0))
    os.makedirs(args.out, exist_ok=True)
    report.to_json(os.path.join(args.out, "metrics.json"))
    report.to_csv(os.path.join(args.out, "metrics.csv"))
    _manifest(args.out, "evaluate", {"pred": args.pred, "ref": args.ref, "spacing": list(spacing or ())},
              ["metrics.json", "metrics.csv"], [t[1] for t in triples] + [t[2] for t in triples])
    a = report.aggregate
    print(f"{len(cases)} case(s): DC {a['dc_mean']:.4f}  DG {a['dg']:.4f}  ASSD {a['assd_mean']:.3f} mm")


def load_suite(path: str) -> list[pipeline.TrainConfig]:
    """A suite file is a list of config objects, or ``{"suite": "table1"|"table2", ...}``."""
    with open(_need(path)) as fh:
        spec = json.load(fh)
    if isinstance(spec, list):
        return [pipeline.TrainConfig.from_dict(d) for d in spec]
    common = spec.get("common", {})
    named = spec.get("suite")
    if named == "table1":
        return pipeline.table1_suite(tuple(spec.get("variants", ["nidm"])), spec.get("alpha", DEFAULT_ALPHA), **common)
    if named == "table2":
        return pipeline.table2_suite(spec.get("alpha", DEFAULT_ALPHA), **common)
    rows = spec.get("rows")
    if rows is None:
        raise DmsegError(f"{path}: expected a list of configs or a 'suite'/'rows' entry")
    return [pipeline.TrainConfig.from_dict({**common, **d}) for d in rows]


def cmd_compare(args) -> None:
    suite = load_suite(args.suite)
    if args.seed is not None:
        for cfg in suite:
            cfg.seed = args.seed
    if args.epochs is not None:
        for cfg in suite:
            cfg.epochs = args.epochs
    os.makedirs(args.out, exist_ok=True)
    rows = []
    if suite:
        pre = pipeline.PretrainConfig.from_dict(_load_json(args.pretrain_config))
        data = _load_data(args.data, suite[0].window)
        rows = pipeline.run_comparison(suite, data, pre)
    table = pipeline.comparison_table(rows)
    with open(os.path.join(args.out, "comparison.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=pipeline.COMPARISON_COLUMNS)
        writer.writeheader()
        writer.writerows(table)
    _write_json(os.path.join(args.out, "comparison.json"), {"rows": [asdict(r) for r in rows]})
    outputs = ["comparison.csv", "comparison.json"]
    if table:
        plotting.comparison_bars(table, os.path.join(args.out, "comparison.png"))
        outputs.append("comparison.png")
    _manifest(args.out, "compare", {"suite": [asdict(c) for c in suite]}, outputs,
              [args.suite] + ([args.data] if suite else []))
    failed = sum(r.status != "ok" for r in rows)
    print(f"{len(rows)} row(s), {failed} failed -> {os.path.join(args.out, 'comparison.csv')}")


# -- argument parsing --------------------------------------------------------

def _triple(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return tuple(float(p) for p in parts)


def _pair_int(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected MIN,MAX")
    return tuple(int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmseg", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"dmseg {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic phantoms as RVOL pairs")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=30)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="PhantomSpec JSON")
    g.add_argument("--shape", type=lambda s: tuple(int(v) for v in _triple(s)))
    g.add_argument("--lesions", type=_pair_int, help="lesion count range MIN,MAX")
    g.add_argument("--noise-std", dest="noise_std", type=float)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("compute-dm", help="distance map of one class of a mask")
    c.add_argument("mask")
    c.add_argument("output")
    c.add_argument("--variant", choices=distance.VARIANTS, default="nidm")
    c.add_argument("--class-id", dest="class_id", type=int, default=1)
    c.add_argument("--figure", help="also write a PNG panel of all variants")
    c.set_defaults(func=cmd_compute_dm)

    r = sub.add_parser("pretrain-lrnet", help="fit the LR-Net on ground-truth masks")
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--out", required=True)
    r.add_argument("--variant", default="nidm", choices=sorted(pipeline.LRNET_HEADS))
    r.add_argument("--config", help="PretrainConfig JSON")
    r.add_argument("--split", type=_triple, help="use only the training part of this split")
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--width", type=int)
    r.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train the M-Net, optionally through a pretrained LR-Net")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lrnet", help="LR-Net checkpoint")
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--seg-loss", dest="seg_loss")
    t.add_argument("--dm-variant", dest="dm_variant")
    t.add_argument("--alpha", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-lrnet", dest="no_lrnet", action="store_true")
    t.add_argument("--unfreeze", action="store_true", help="let the LR-Net train too")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment an image with a trained M-Net")
    i.add_argument("--model", required=True)
    i.add_argument("image")
    i.add_argument("output")
    i.add_argument("--probs", help="also write the foreground probability volume")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="score predictions against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("compare", help="train and score a suite of configurations")
    m.add_argument("--suite", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--pretrain-config", dest="pretrain_config")
    m.add_argument("--seed", type=int)
    m.add_argument("--epochs", type=int)
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MissingInput as exc:
        print(f"dmseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DmsegError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"dmseg {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
