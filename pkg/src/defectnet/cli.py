"""Command-line pipeline: gen-data, train, predict, eval, ablate.

Every command is deterministic given its config and seed. Exit codes:
0 success, 1 validation error, 2 runtime failure; errors are emitted to
stderr as single-line JSON. DNET_THREADS bounds ablation worker processes;
each worker pins its BLAS pool to one thread so results do not depend on
the pool size.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, load_run_config
from .losses import ClassStats
from .metrics import ConfusionMatrix
from .model import DefectNet, read_weight_records
from .patches import ProbAccumulator, extract_training_patches, tile_for_inference
from .pngio import load_image, load_labels, save_image, save_labels
from .synth import generate
from .tensor import no_grad
from .trainer import LOSS_KINDS, Trainer, history_line

MANIFEST_NAME = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; usage errors are validation
        raise ConfigError(message)


def _error_json(exc):
    print(
        json.dumps({"error": type(exc).__name__, "message": str(exc)}),
        file=sys.stderr,
        flush=True,
    )


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("no command given; see --help")
        return args.func(args)
    except ConfigError as exc:
        _error_json(exc)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _error_json(exc)
        return 2


def _build_parser():
    parser = _Parser(prog="dnet", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--profile", choices=["desk", "paper"], help="profile preset")
        p.add_argument("--seed", type=int, help="override the run seed")

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, help="override data.scenes")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model on a corpus")
    common(t)
    t.add_argument("--data", required=True, help="corpus directory (from gen-data)")
    t.add_argument("--out", required=True)
    t.add_argument("--loss", choices=list(LOSS_KINDS), help="override train.loss")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.dnet")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict label maps for images")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint or weight file")
    p.add_argument("--image", required=True, nargs="+", help="input PNG image(s)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score predictions against corpus labels")
    common(e)
    e.add_argument("--data", required=True, help="corpus directory with ground truth")
    e.add_argument("--pred", required=True, help="directory of *_pred_labels.png")
    e.add_argument("--out", required=True, help="metrics JSON path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train ce/wce/gdice/hybrid over seeds and compare")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    return parser


def _config_from_args(args, extra_overrides=None):
    overrides = {"seed": getattr(args, "seed", None), "profile": getattr(args, "profile", None)}
    overrides.update(extra_overrides or {})
    return load_run_config(getattr(args, "config", None), overrides)


def _prepare_out_dir(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    overrides = {}
    if args.scenes is not None:
        overrides["data.scenes"] = args.scenes
    cfg = _config_from_args(args, overrides)
    out = _prepare_out_dir(args.out, args.force)
    spec = cfg.scene_spec()
    entries = []
    for i in range(cfg.raw["data"]["scenes"]):
        image, labels = generate(spec, i)
        image_name = f"scene_{i:04d}.png"
        labels_name = f"scene_{i:04d}_labels.png"
        save_image(out / image_name, image)
        save_labels(out / labels_name, labels)
        entries.append({"index": i, "image": image_name, "labels": labels_name})
    manifest = {
        "num_classes": cfg.num_classes,
        "image_size": cfg.raw["data"]["image_size"],
        "scene_spec": {
            "image_size": spec.image_size,
            "num_classes": spec.num_classes,
            "ratios": list(spec.ratios),
            "blob_area_ranges": [list(r) for r in spec.blob_area_ranges],
            "presence": list(spec.presence),
            "noise_sigma": spec.noise_sigma,
            "seed": spec.seed,
        },
        "scenes": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2))
    print(f"wrote {len(entries)} scenes to {out}")
    return 0


def load_manifest(data_dir):
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no corpus manifest at {path}")
    manifest = json.loads(path.read_text())
    return manifest


def split_scene_indices(n_scenes, train_fraction, seed):
    """Deterministic train/eval split shared by every ablation cell."""
    rng = np.random.default_rng([seed, 0xC0FFEE])
    order = rng.permutation(n_scenes)
    n_train = max(1, min(n_scenes - 1, int(round(n_scenes * train_fraction))))
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


# ----------------------------------------------------------------------
# train


def _load_scene(data_dir, entry):
    image = load_image(Path(data_dir) / entry["image"])
    labels = load_labels(Path(data_dir) / entry["labels"])
    return image, labels


def _gather_patches(cfg, manifest, data_dir, indices, patch_manifest_path=None):
    pc = cfg.patch
    patches = []
    lines = []
    for i in indices:
        entry = manifest["scenes"][i]
        image, labels = _load_scene(data_dir, entry)
        for patch in extract_training_patches(
            image,
            labels,
            patch_size=pc["patch_size"],
            stride=pc["train_stride"],
            min_distinct_classes=pc["min_distinct_classes"],
        ):
            patches.append(patch)
            lines.append(json.dumps({"source": entry["image"], "origin": list(patch.origin)}))
    if patch_manifest_path is not None:
        Path(patch_manifest_path).write_text("\n".join(lines) + ("\n" if lines else ""))
    return patches


def _corpus_stats(manifest, data_dir, indices, num_classes) -> ClassStats:
    counts = np.zeros(num_classes, dtype=np.int64)
    for i in indices:
        labels = load_labels(Path(data_dir) / manifest["scenes"][i]["labels"])
        counts += np.bincount(labels.reshape(-1), minlength=num_classes)
    return ClassStats(counts)


def _run_training(cfg, data_dir, out_dir, loss=None, seed=None, resume=False):
    manifest = load_manifest(data_dir)
    if manifest["num_classes"] != cfg.num_classes:
        raise ConfigError("corpus class count does not match the configuration")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx, eval_idx = split_scene_indices(
        len(manifest["scenes"]), cfg.train_fraction, cfg.seed
    )
    (out / "split.json").write_text(
        json.dumps({"train": train_idx, "eval": eval_idx}, sort_keys=True)
    )
    patches = _gather_patches(cfg, manifest, data_dir, train_idx, out / "patches.jsonl")
    if not patches:
        raise ConfigError("no training patches survive the class filter; corpus too small")
    stats = _corpus_stats(manifest, data_dir, train_idx, cfg.num_classes)
    (out / "class_stats.json").write_text(
        json.dumps(
            {"counts": stats.counts.tolist(), "weights": stats.weights.tolist()},
            sort_keys=True,
        )
    )
    train_cfg = cfg.train_config(loss=loss, seed=seed)
    model = DefectNet(cfg.model_config(), seed=train_cfg.seed)
    trainer = Trainer(model, patches, stats, train_cfg, config_hash=cfg.config_hash())
    ckpt = out / "checkpoint.dnet"
    history_path = out / "history.jsonl"
    if resume:
        if not ckpt.exists():
            raise ConfigError(f"no checkpoint to resume at {ckpt}")
        trainer.load_checkpoint(ckpt)
        mode = "a"
    else:
        mode = "w"
    with open(history_path, mode) as fh:
        trainer.run(
            history_sink=lambda row: fh.write(history_line(row) + "\n"),
            checkpoint_path=ckpt,
            diagnostics_path=out / "diverged.json",
        )
    return model, trainer, manifest, eval_idx


def cmd_train(args):
    cfg = _config_from_args(args, {"train.loss": args.loss} if args.loss else None)
    _run_training(cfg, args.data, args.out, resume=args.resume)
    print(f"trained; checkpoint and history in {args.out}")
    return 0


# ----------------------------------------------------------------------
# predict


def load_model_weights(model, path):
    """Accepts both bare weight files and training checkpoints."""
    with open(path, "rb") as fh:
        records = read_weight_records(fh, count=len(model.parameters()))
    model.load_records(records)


def softmax_np(logits):
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def predict_probabilities(model, image, patch_size, overlap):
    """Tile an image, forward each tile, and merge the probability maps."""
    K = model.config.num_classes
    _, H, W = image.shape
    acc = ProbAccumulator(K, H, W)
    with no_grad():
        for tile in tile_for_inference(image, patch_size=patch_size, overlap=overlap):
            x = np.asarray(tile.image, dtype=np.float64) / 255.0
            logits = model.forward(x)
            acc.add(softmax_np(logits.data), tile.origin)
    return acc.finalize()


def cmd_predict(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = DefectNet(cfg.model_config(), seed=cfg.seed)
    load_model_weights(model, args.model)
    pc = cfg.patch
    for image_path in args.image:
        image = load_image(image_path)
        probs, labels = predict_probabilities(
            model, image, pc["patch_size"], pc["infer_overlap"]
        )
        stem = Path(image_path).stem
        save_labels(out / f"{stem}_pred_labels.png", labels)
        np.save(out / f"{stem}_probs.npy", probs)
    print(f"wrote predictions for {len(args.image)} image(s) to {out}")
    return 0


# ----------------------------------------------------------------------
# eval


def cmd_eval(args):
    cfg = _config_from_args(args)
    manifest = load_manifest(args.data)
    pred_dir = Path(args.pred)
    cm = ConfusionMatrix(cfg.num_classes)
    matched = 0
    for entry in manifest["scenes"]:
        stem = Path(entry["image"]).stem
        pred_path = pred_dir / f"{stem}_pred_labels.png"
        if not pred_path.exists():
            continue
        cm.accumulate(load_labels(pred_path), load_labels(Path(args.data) / entry["labels"]))
        matched += 1
    if matched == 0:
        raise ConfigError(f"no predictions in {pred_dir} match corpus scenes")
    report = cm.report(cfg.defect_class_ids)
    report["scenes_evaluated"] = matched
    Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2))
    print(f"evaluated {matched} scene(s); defect-average recall "
          f"{report['defect_average_recall']:.4f}")
    return 0


def evaluate_on_scenes(model, cfg, manifest, data_dir, indices):
    cm = ConfusionMatrix(cfg.num_classes)
    pc = cfg.patch
    for i in indices:
        image, truth = _load_scene(data_dir, manifest["scenes"][i])
        _, labels = predict_probabilities(model, image, pc["patch_size"], pc["infer_overlap"])
        cm.accumulate(labels, truth)
    return cm


# ----------------------------------------------------------------------
# ablate


def _ablate_cell(raw_config, data_dir, run_dir, loss, seed):
    """One (loss, seed) training + evaluation; runs in a worker process."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        cfg = load_run_config(raw_config)
        model, trainer, manifest, eval_idx = _run_training(
            cfg, data_dir, run_dir, loss=loss, seed=seed
        )
        cm = evaluate_on_scenes(model, cfg, manifest, data_dir, eval_idx)
        report = cm.report(cfg.defect_class_ids)
        (Path(run_dir) / "metrics.json").write_text(
            json.dumps(report, sort_keys=True, indent=2)
        )
    return {
        "loss": loss,
        "seed": seed,
        "per_class_recall": report["per_class_recall"],
        "defect_average_recall": report["defect_average_recall"],
    }


def worker_count():
    env = os.environ.get("DNET_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"DNET_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ConfigError("DNET_THREADS must be >= 1")
        return n
    return max(1, min(os.cpu_count() or 1, 4))


def _median_columns(rows):
    """Per-column median, ignoring None entries (absent classes)."""
    cols = list(zip(*rows))
    out = []
    for col in cols:
        vals = [v for v in col if v is not None]
        out.append(float(np.median(vals)) if vals else None)
    return out


def cmd_ablate(args):
    cfg = _config_from_args(args)
    out = _prepare_out_dir(args.out, args.force)
    load_manifest(args.data)  # fail fast if the corpus is missing
    seeds = cfg.ablate_seeds
    cells = [(loss, seed) for loss in LOSS_KINDS for seed in seeds]
    jobs = {}
    results = {}
    with ProcessPoolExecutor(max_workers=min(worker_count(), len(cells))) as pool:
        for loss, seed in cells:
            run_dir = out / "runs" / f"{loss}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            jobs[(loss, seed)] = pool.submit(
                _ablate_cell, cfg.raw, args.data, str(run_dir), loss, seed
            )
        for key, job in jobs.items():
            results[key] = job.result()

    table = []
    for loss in LOSS_KINDS:
        runs = [results[(loss, seed)] for seed in seeds]
        per_class = _median_columns([r["per_class_recall"] for r in runs])
        table.append(
            {
                "loss": loss,
                "per_class_recall_median": per_class,
                "defect_average_recall_median": float(
                    np.median([r["defect_average_recall"] for r in runs])
                ),
                "runs": runs,
            }
        )
    summary = {
        "profile": cfg.profile,
        "seeds": seeds,
        "defect_class_ids": cfg.defect_class_ids,
        "rows": table,
    }
    (out / "ablation.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        K = cfg.num_classes
        writer.writerow(["loss"] + [f"class_{c}" for c in range(K)] + ["defect_average"])
        for row in table:
            cells_out = [
                "" if v is None else f"{v:.6f}" for v in row["per_class_recall_median"]
            ]
            writer.writerow([row["loss"]] + cells_out + [f"{row['defect_average_recall_median']:.6f}"])
    for row in table:
        print(f"{row['loss']:>7}: defect-average recall {row['defect_average_recall_median']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
