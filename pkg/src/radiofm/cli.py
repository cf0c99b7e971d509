"""Command-line entry point: ``radiofm gen|pretrain|finetune|eval|inspect-checkpoint``.

Structural settings live in a JSON config file validated before any work;
flags only carry paths, the seed and verbosity. Exit codes: 0 success,
2 usage or validation error, 3 missing or unreadable artifact, 4 divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .dsp import SpectrogramTransformer, channel_stats
from .errors import ConfigError, DivergenceError, FormatError, ShapeError
from .evaluation import (confusion, overall_accuracy, recon_curve, reconstruct, write_curve_csv,
                         write_pgm_pair)
from .formats import encode_iq, load_checkpoint, read_tensor, write_tensor
from .heads import predict_batched
from .synth import (Manifest, SyntheticRrdConfig, gen_rrd_recording, gen_sd, hsd_dataset,
                    split_of)
from .tensor import ParamSet
from .training import (encode_dataset, finetune_segment, finetune_sense, load_head, load_model,
                       prepare_encoder, pretrain, read_loss_csv, restore_optimizer, save_head,
                       save_model, write_loss_csv)
from .vit import ENCODER_PREFIX, MsmModel, preset

logger = logging.getLogger("radiofm")

OUTPUT_ROOT_ENV = "RADIOFM_OUTPUT_ROOT"

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4

_HW = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}
_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_SEED = {"type": "integer", "minimum": 0}
_OUT = {"type": "string"}
_OPTIM = {
    "steps": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
}


def _schema(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMAS = {
    "gen.rrd": _schema({
        "n_recordings": {"type": "integer", "minimum": 1},
        "duration_ms": {"type": "number", "exclusiveMinimum": 0},
        "burst_density": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "snr_db_range": _RANGE, "fs_range_hz": _RANGE, "fc_range_hz": _RANGE,
        "image_hw": _HW, "write_iq": {"type": "boolean"}, "seed": _SEED, "output_dir": _OUT}),
    "gen.hsd": _schema({
        "n_per_class": {"type": "integer", "minimum": 1},
        "noise": {"type": "number", "minimum": 0},
        "image_hw": _HW, "seed": _SEED, "output_dir": _OUT}),
    "gen.sd": _schema({
        "n": {"type": "integer", "minimum": 1},
        "image_hw": _HW, "occupancy": _RANGE, "level_range": _RANGE,
        "seed": _SEED, "output_dir": _OUT}),
    "pretrain": _schema({
        "manifest": {"type": "string"},
        "preset": {"type": "string"},
        "vit": {"type": "object", "properties": {"img_hw": _HW,
                                                 "patch_size": {"type": "integer", "minimum": 1}},
                "additionalProperties": False},
        "mask_ratio": {"type": "number"},
        **_OPTIM,
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "resume": {"type": "boolean"},
        "split": {"type": ["string", "null"]},
        "seed": _SEED, "output_dir": _OUT}, required=["manifest"]),
    "finetune": _schema({
        "checkpoint": {"type": "string"},
        "manifest": {"type": "string"},
        "alpha": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        **_OPTIM,
        "early_stopping": {"type": "boolean"},
        "seed": _SEED, "output_dir": _OUT}, required=["checkpoint", "manifest"]),
    "eval.recon-curve": _schema({
        "checkpoint": {"type": "string"},
        "manifest": {"type": "string"},
        "ratios": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "pool_size": {"type": "integer", "minimum": 1},
        "split": {"type": ["string", "null"]},
        "max_samples": {"type": "integer", "minimum": 1},
        "dump_grids": {"type": "integer", "minimum": 0},
        "seed": _SEED, "output_dir": _OUT}, required=["checkpoint", "manifest"]),
    "eval.task-metrics": _schema({
        "checkpoint": {"type": "string"},
        "head": {"type": "string"},
        "manifest": {"type": "string"},
        "split": {"type": ["string", "null"]},
        "seed": _SEED, "output_dir": _OUT}, required=["checkpoint", "head", "manifest"]),
}

DEFAULTS = {
    "gen.rrd": {"n_recordings": 8, "duration_ms": 100.0, "burst_density": 0.5,
                "snr_db_range": [15.0, 30.0], "fs_range_hz": [10e6, 60e6],
                "fc_range_hz": [2.4e9, 2.65e9], "image_hw": [224, 224], "write_iq": False,
                "seed": 0},
    "gen.hsd": {"n_per_class": 10, "noise": 0.3, "image_hw": [224, 224], "seed": 0},
    "gen.sd": {"n": 16, "image_hw": [224, 224], "occupancy": [0.4, 0.9],
               "level_range": [4.0, 7.0], "seed": 0},
    "pretrain": {"preset": "vit-tiny", "vit": {}, "mask_ratio": 0.75, "steps": 500,
                 "batch_size": 16, "lr": 1e-3, "weight_decay": 0.05, "checkpoint_every": 0,
                 "resume": False, "split": None, "seed": 0},
    "finetune": {"alpha": 0.1, "steps": 300, "batch_size": 16, "lr": 1e-3, "weight_decay": 0.05,
                 "early_stopping": True, "seed": 0},
    "eval.recon-curve": {"ratios": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], "pool_size": 4,
                         "split": "test", "max_samples": 64, "dump_grids": 0, "seed": 0},
    "eval.task-metrics": {"split": "test", "seed": 0},
}

METRICS_SCHEMA = {
    "type": "object",
    "required": ["task", "accuracy", "per_class_accuracy", "confusion_matrix", "config", "seed"],
    "properties": {
        "task": {"enum": ["sense", "segment"]},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "per_class_accuracy": {"type": "array", "items": {"type": ["number", "null"]}},
        "confusion_matrix": {"type": "array",
                             "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "majority_baseline": {"type": "number"},
        "steps_run": {"type": "integer"},
        "stopped_early": {"type": "boolean"},
        "encoder_sha256": {"type": "string"},
        "config": {"type": "object"},
        "seed": {"type": "integer"},
    },
}


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def load_config(path, key: str, seed: int | None = None) -> dict:
    """Read, schema-check and fill defaults; raises ConfigError on any problem."""
    try:
        doc = json.loads(Path(path).read_text()) if path else {}
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(doc, SCHEMAS[key])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    cfg = copy.deepcopy(DEFAULTS[key])
    cfg.update(doc)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _output_dir(args, cfg: dict, default_name: str) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg.get("output_dir"):
        out = Path(cfg["output_dir"])
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _echo(out: Path, command: str, cfg: dict) -> None:
    _dump_json(out / "config.json", {"command": command, **cfg})


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{p} does not exist")
    return p


def _load_samples(manifest_path, split: str | None = None):
    """(images, labels or masks or None, manifest) for the chosen split."""
    mpath = _require(manifest_path)
    man = Manifest.read(mpath)
    rows = man.select(split)
    if not rows:
        raise ConfigError(f"manifest {mpath} has no samples in split {split!r}")
    base = mpath.parent
    images = np.stack([read_tensor(_require(base / r["path"])) for r in rows]).astype(np.float64)
    if man.kind == "hsd":
        targets = np.array([r["label"] for r in rows], dtype=np.int64)
    elif man.kind == "sd":
        targets = np.stack([read_tensor(_require(base / r["mask"])) for r in rows]).astype(np.int64)
    else:
        targets = None
    return images, targets, man


# ---------------------------------------------------------------------------
# gen


def _sample_row(rel: str, split: str, **extra) -> dict:
    return {"path": rel, "split": split, **extra}


def cmd_gen(args) -> int:
    key = f"gen.{args.kind}"
    cfg = load_config(args.config, key, args.seed)
    out = _output_dir(args, cfg, f"gen-{args.kind}")
    seed = cfg["seed"]
    hw = tuple(cfg["image_hw"])
    (out / "samples").mkdir(exist_ok=True)
    rows: list[dict] = []
    stats: dict = {}
    if args.kind == "rrd":
        rcfg = SyntheticRrdConfig(n_recordings=cfg["n_recordings"], duration_ms=cfg["duration_ms"],
                                  burst_density=cfg["burst_density"],
                                  snr_db_range=tuple(cfg["snr_db_range"]),
                                  fs_range_hz=tuple(cfg["fs_range_hz"]),
                                  fc_range_hz=tuple(cfg["fc_range_hz"]), seed=seed).validate()
        tf = SpectrogramTransformer(resize_shape=hw)
        raw, ids = [], []
        if cfg["write_iq"]:
            (out / "iq").mkdir(exist_ok=True)
        for i in range(rcfg.n_recordings):
            rec = gen_rrd_recording(rcfg, i)
            if cfg["write_iq"]:
                (out / "iq" / f"{rec.source_id}.riq").write_bytes(
                    encode_iq(rec.samples, rec.sample_rate_hz, rec.center_freq_hz))
            stack, sids = tf.images([rec])
            raw.append(stack)
            ids.extend(sids)
        raw = np.concatenate(raw)
        if len(raw) == 0:
            raise ConfigError("recordings are shorter than one slice; nothing to write")
        mu, sigma = channel_stats(raw)
        std = (raw - mu[None, :, None, None]) / sigma[None, :, None, None]
        splits = split_of(len(std), seed)
        for j, img in enumerate(std):
            rel = f"samples/{j:05d}.rsp"
            write_tensor(out / rel, img)
            rows.append(_sample_row(rel, splits[j], source_id=ids[j]))
    elif args.kind == "hsd":
        stack, labels, (mu, sigma) = hsd_dataset(cfg["n_per_class"], seed, cfg["noise"], hw)
        splits = split_of(len(stack), seed)
        for j, (img, lab) in enumerate(zip(stack, labels)):
            rel = f"samples/{j:05d}.rsp"
            write_tensor(out / rel, img)
            rows.append(_sample_row(rel, splits[j], label=int(lab)))
    else:
        samples, (mu, sigma) = gen_sd(cfg["n"], seed, hw, tuple(cfg["occupancy"]),
                                      tuple(cfg["level_range"]))
        (out / "masks").mkdir(exist_ok=True)
        splits = split_of(len(samples), seed)
        for j, s in enumerate(samples):
            rel, mrel = f"samples/{j:05d}.rsp", f"masks/{j:05d}.rsp"
            write_tensor(out / rel, s.spectrogram)
            write_tensor(out / mrel, s.label_mask)
            rows.append(_sample_row(rel, splits[j], mask=mrel))
    stats = {"mean": [float(v) for v in np.ravel(mu)], "std": [float(v) for v in np.ravel(sigma)]}
    echo = {k: v for k, v in cfg.items() if k != "output_dir"}
    Manifest(args.kind, seed, echo, rows, stats).write(out / "manifest.json")
    _echo(out, key, cfg)
    logger.info("wrote %d %s samples to %s", len(rows), args.kind, out)
    print(out / "manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, "pretrain", args.seed)
    gamma = float(cfg["mask_ratio"])
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"mask_ratio must be in (0, 1), got {gamma}")
    out = _output_dir(args, cfg, "pretrain")
    images, _, _ = _load_samples(cfg["manifest"], cfg["split"])
    overrides = dict(cfg["vit"])
    if "img_hw" in overrides:
        overrides["img_hw"] = tuple(overrides["img_hw"])
    overrides.setdefault("img_hw", tuple(images.shape[2:]))
    overrides["in_channels"] = images.shape[1]
    vcfg = preset(cfg["preset"], **overrides)
    seed = cfg["seed"]
    ckpt = out / "checkpoint.rfm"
    model, optimizer, start, trace = MsmModel(vcfg, seed=seed), None, 0, []
    if cfg["resume"] and ckpt.exists():
        model, meta, ostate = load_model(ckpt)
        optimizer = restore_optimizer(model, meta, ostate)
        start = int(meta["step"])
        trace = [row for row in read_loss_csv(out / "loss.csv") if row[0] < start]
        logger.info("resuming from step %d", start)
    _echo(out, "pretrain", cfg)
    every = cfg["checkpoint_every"]

    def on_step(step, result):
        if step % 50 == 0:
            logger.info("step %d loss %.5f", step, result.trace[-1][1])
        if every and (step + 1) % every == 0:
            save_model(ckpt, result.model, result.optimizer, extra={"step": step + 1})
            write_loss_csv(out / "loss.csv", result.trace)

    result = pretrain(model, images, gamma, steps=cfg["steps"], seed=seed,
                      batch_size=cfg["batch_size"], lr=cfg["lr"],
                      weight_decay=cfg["weight_decay"], optimizer=optimizer, start_step=start,
                      trace=trace, on_step=on_step)
    write_loss_csv(out / "loss.csv", result.trace)
    save_model(out / "model.rfm", result.model, result.optimizer, extra={"step": cfg["steps"]})
    print(out / "model.rfm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# finetune


def _metrics(task: str, cm, cfg: dict, extra: dict) -> dict:
    doc = {"task": task, "accuracy": overall_accuracy(cm),
           "per_class_accuracy": [None if np.isnan(a) else a for a in cm.per_class_accuracy()],
           "confusion_matrix": cm.to_list(), "config": {k: v for k, v in cfg.items()
                                                         if k != "output_dir"},
           "seed": cfg["seed"], **extra}
    doc["majority_baseline"] = float(cm.counts.sum(axis=1).max() / cm.counts.sum())
    jsonschema.validate(doc, METRICS_SCHEMA)
    return doc


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, "finetune", args.seed)
    model, _, _ = load_model(_require(cfg["checkpoint"]))
    out = _output_dir(args, cfg, f"finetune-{args.task}")
    images, targets, man = _load_samples(cfg["manifest"])
    want = "hsd" if args.task == "sense" else "sd"
    if man.kind != want:
        raise ConfigError(f"finetune {args.task} needs a {want} manifest, got {man.kind}")
    splits = np.array([r["split"] for r in man.select(None)])
    tr, va, te = (np.flatnonzero(splits == s) for s in ("train", "val", "test"))
    val = (images[va], targets[va]) if cfg["early_stopping"] and len(va) else None
    test_x, test_y = (images[te], targets[te]) if len(te) else (None, None)
    _echo(out, f"finetune.{args.task}", cfg)
    fn = finetune_sense if args.task == "sense" else finetune_segment
    result = fn(model, images[tr], targets[tr], test_x, test_y, alpha=cfg["alpha"],
                steps=cfg["steps"], seed=cfg["seed"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                weight_decay=cfg["weight_decay"], val=val)
    if not result.encoder_unchanged:
        raise RuntimeError("frozen encoder changed during finetuning")
    save_head(out / "head.rfm", result.head,
              extra={"encoder_sha256": result.encoder_digest_after, "task": args.task})
    write_loss_csv(out / "loss.csv", result.trace)
    cm = result.confusion
    if cm is None:
        cm = confusion(_predict(result.head, result.encoder, images[tr], args.task), targets[tr],
                       result.head.n_classes)
    doc = _metrics(args.task, cm, cfg, {"steps_run": len(result.trace),
                                        "stopped_early": result.stopped_early,
                                        "encoder_sha256": result.encoder_digest_after})
    _dump_json(out / "metrics.json", doc)
    print(out / "metrics.json")
    return EXIT_OK


def _predict(head, encoder, images, task: str) -> np.ndarray:
    feats = encode_dataset(encoder, images)
    probs = predict_batched(head, feats, batch_size=8)
    return probs.argmax(axis=1 if task == "sense" else -1)


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    key = f"eval.{args.kind}"
    cfg = load_config(args.config, key, args.seed)
    model, _, _ = load_model(_require(cfg["checkpoint"]))
    out = _output_dir(args, cfg, f"eval-{args.kind}")
    if args.kind == "recon-curve":
        for g in cfg["ratios"]:
            if not 0.0 < g < 1.0:
                raise ConfigError(f"evaluation ratios must be in (0, 1), got {g}")
        images, _, _ = _load_samples(cfg["manifest"], cfg["split"])
        images = images[:cfg["max_samples"]]
        if images.shape[1:] != (model.cfg.in_channels, *model.cfg.img_hw):
            raise ShapeError(f"samples {images.shape[1:]} do not fit the checkpoint")
        _echo(out, key, cfg)
        curve = recon_curve(model, images, cfg["ratios"], cfg["seed"], cfg["pool_size"])
        write_curve_csv(out / "curve.csv", curve)
        if cfg["dump_grids"]:
            (out / "grids").mkdir(exist_ok=True)
            n = min(cfg["dump_grids"], len(images))
            for g in cfg["ratios"]:
                recon, _ = reconstruct(model, images[:n], g, cfg["seed"])
                for j in range(n):
                    write_pgm_pair(out / "grids" / f"g{g:.2f}_{j:03d}", images[j, 0], recon[j, 0],
                                   cfg["pool_size"])
        print(out / "curve.csv")
        return EXIT_OK

    head, hmeta = load_head(_require(cfg["head"]))
    task = hmeta.get("task", "sense" if hmeta["head"] == "sense" else "segment")
    images, targets, _ = _load_samples(cfg["manifest"], cfg["split"])
    encoder = prepare_encoder(model, images.shape[1])
    if hmeta.get("encoder_sha256") not in (None, encoder.params.digest(ENCODER_PREFIX)):
        raise ConfigError("head was trained on a different encoder than this checkpoint")
    _echo(out, key, cfg)
    cm = confusion(_predict(head, encoder, images, task), targets, head.n_classes)
    doc = _metrics(task, cm, cfg, {"encoder_sha256": encoder.params.digest(ENCODER_PREFIX)})
    _dump_json(out / "metrics.json", doc)
    print(out / "metrics.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect-checkpoint


def cmd_inspect(args) -> int:
    entries, meta = load_checkpoint(_require(args.checkpoint))
    total = sum(int(v.size) for v in entries.values())
    groups: dict[str, int] = {}
    for name, v in entries.items():
        top = name.split(".", 1)[0]
        groups[top] = groups.get(top, 0) + int(v.size)
    doc = {"path": str(args.checkpoint), "entries": len(entries), "total_values": total,
           "groups": groups, "config": meta,
           "tensors": [{"name": n, "shape": list(v.shape)} for n, v in entries.items()]}
    if "encoder.patch_embed.weight" in entries:
        enc = {n: v for n, v in entries.items() if n.startswith(ENCODER_PREFIX)}
        doc["encoder_sha256"] = ParamSet(enc).digest(ENCODER_PREFIX)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radiofm", description="Masked spectrogram modeling toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON run config")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("kind", choices=["rrd", "hsd", "sd"])
    common(g)
    g.set_defaults(fn=cmd_gen)

    pt = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(pt, True)
    pt.set_defaults(fn=cmd_pretrain)

    ft = sub.add_parser("finetune", help="train a task head on the frozen encoder")
    ft.add_argument("task", choices=["sense", "segment"])
    common(ft, True)
    ft.set_defaults(fn=cmd_finetune)

    ev = sub.add_parser("eval", help="reconstruction curve or task metrics")
    ev.add_argument("kind", choices=["recon-curve", "task-metrics"])
    common(ev, True)
    ev.set_defaults(fn=cmd_eval)

    ins = sub.add_parser("inspect-checkpoint", help="summarize an RFM1 checkpoint")
    ins.add_argument("checkpoint")
    ins.add_argument("--out", help="also write the summary JSON here")
    ins.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ShapeError, jsonschema.ValidationError) as exc:
        print(f"radiofm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, FormatError) as exc:
        print(f"radiofm: missing or unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"radiofm: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
