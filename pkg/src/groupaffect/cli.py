"""Command-line interface.

Subcommands follow the artifact chain: ``synth`` writes a corpus,
``extract`` writes a feature container per modality, ``codebook`` fits a
vocabulary, ``encode`` turns containers into per-image vectors,
``fuse-train`` and ``predict`` fit and apply the fusion machine, and
``experiment`` runs the whole cross-validated protocol from a TOML config.

Exit codes: 0 success, 1 usage, 2 data error, 3 partial failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .container import ContainerError, read_features, write_features
from .core import ManifestError, ValidationError, accuracy, mae, parse_manifest
from .infa import Encoder, NoDetectionsError, fit_vocabulary, load_vocabulary, save_vocabulary
from .pipeline import (
    ConfigError,
    PipelineConfig,
    encode_sets,
    region_dim,
    run_experiment,
    run_extract,
    write_report,
)
from .rlmkl import (
    FitOptions,
    KernelKind,
    KernelSpec,
    OvoModel,
    Task,
    decision_function,
    fit_rlmkl,
    load_model,
    ovo_fit,
    ovo_predict,
    save_model,
    select_hyperparameters,
)
from .synth import gen_synthetic

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3
ENCODED_FORMAT = 1

log = logging.getLogger("groupaffect")

DATA_ERRORS = (ManifestError, ValidationError, ContainerError, ConfigError, NoDetectionsError, OSError, ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path: str | None) -> PipelineConfig:
    return PipelineConfig.from_toml(path) if path else PipelineConfig()


# ---------------------------------------------------------------------------
# Encoded-vector files
# ---------------------------------------------------------------------------


def save_encoded(path: str | Path, x: np.ndarray, present: np.ndarray, meta: dict) -> None:
    meta = dict(meta, format=ENCODED_FORMAT)
    with open(path, "wb") as fh:
        np.savez(fh, x=x, present=present, meta=np.array(json.dumps(meta, sort_keys=True)))


def load_encoded(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != ENCODED_FORMAT:
            raise ValueError(f"{path}: unsupported encoded-file format {meta.get('format')!r}")
        return data["x"], data["present"].astype(bool), meta


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = gen_synthetic(args.out, args.n, args.seed)
    print(f"wrote {args.n} images and {manifest}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load_config(args.config)
    if args.jobs:
        cfg.jobs = args.jobs
    if args.superpixels:
        cfg.scene_superpixels = args.superpixels
        cfg.validate()
    records = parse_manifest(args.manifest)
    sets, errors = run_extract(records, args.modality, cfg)
    write_features(args.out, args.modality, region_dim(args.modality), sets)
    empty = sum(1 for s in sets if len(s) == 0) - len(errors)
    print(f"{args.modality}: {len(sets)} images, {sum(len(s) for s in sets)} regions, {empty} without detections, {len(errors)} failed")
    for err in errors:
        log.error(err)
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_codebook(args) -> int:
    modality, _, sets = read_features(args.features)
    vocab = fit_vocabulary(sets, args.encoder, args.pca_dim, args.words, args.seed, args.max_rows, modality)
    save_vocabulary(args.out, vocab)
    print(f"{modality.value} {vocab.encoder.value} codebook: PCA {vocab.pca.dim}, {vocab.model.K} words, {vocab.meta['rows']} rows")
    return EXIT_OK


def cmd_encode(args) -> int:
    modality, _, sets = read_features(args.features)
    vocab = load_vocabulary(args.codebook)
    encoder = Encoder(args.encoder)
    kmeans = (Encoder.BOW, Encoder.VLAD)
    if encoder is not vocab.encoder and not (encoder in kmeans and vocab.encoder in kmeans):
        raise ValueError(f"codebook was fit for {vocab.encoder.value}, cannot encode {encoder.value}")
    vocab.encoder = encoder
    x, present = encode_sets(vocab, sets, args.improved)
    save_encoded(args.out, x, present, {"modality": modality.value, "encoder": encoder.value, "improved": bool(args.improved)})
    print(f"{modality.value}: {len(x)} images encoded to dim {x.shape[1]}, {int((~present).sum())} without regions")
    return EXIT_OK


def _stack_encoded(paths) -> tuple[list[np.ndarray], list[np.ndarray], list[str]]:
    mats, masks, mods = [], [], []
    for p in paths:
        x, present, meta = load_encoded(p)
        mats.append(x)
        masks.append(present)
        mods.append(meta.get("modality", "?"))
    if len({len(m) for m in mats}) != 1:
        raise ValueError("encoded files cover different image counts")
    return mats, masks, mods


def cmd_fuse_train(args) -> int:
    mats, masks, mods = _stack_encoded(args.encoded)
    keep = np.logical_and.reduce(masks)
    records = parse_manifest(args.manifest, task="category_ovo" if args.task == "ovo" else None, check_images=False)
    if len(records) != len(mats[0]):
        raise ValueError(f"manifest has {len(records)} records, encoded files have {len(mats[0])}")
    y = np.array([r.label for r in records], dtype=np.float64)
    fills = {}
    if args.missing == "mean_substitute":
        for i, (m, pres) in enumerate(zip(mats, masks)):
            if not pres.any():
                raise ValueError(f"{args.encoded[i]}: no image has this modality")
            fills[f"fill{i}"] = m[pres].mean(axis=0)
            m[~pres] = fills[f"fill{i}"]
        keep = np.ones(len(y), dtype=bool)
    y = y[keep]
    feats = [m[keep] for m in mats]
    kernels = [KernelSpec(KernelKind(args.kernel), args.s)] * len(feats)
    options = FitOptions(whiten_dim=args.whiten_dim, tol=args.smo_tol)
    C, eps = args.C, args.eps
    if C is None or (args.task == "reg" and eps is None):
        task = "regression" if args.task == "reg" else "ovo"
        sel_c, sel_eps = select_hyperparameters(feats, y, task, kernels, folds=args.inner_folds, seed=args.seed, options=options)
        C = sel_c if C is None else C
        eps = sel_eps if eps is None else eps
    if args.task == "reg":
        model = fit_rlmkl(feats, y, Task.REGRESSION, kernels, C, eps, args.seed, options)
    else:
        model = ovo_fit(feats, y.astype(np.int64), kernels, C, args.seed, options)
    save_model(args.out, model, {"modalities": mods, "task": args.task, "missing": args.missing}, fills)
    print(f"trained {args.task} machine on {int(keep.sum())} images ({int((~keep).sum())} dropped), C={C}, eps={eps}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, extra = load_model(args.model)
    mats, masks, mods = _stack_encoded(args.encoded)
    if extra.get("modalities") and extra["modalities"] != mods:
        raise ValueError(f"model expects modalities {extra['modalities']}, got {mods}")
    if extra.get("missing") == "mean_substitute":
        # fill with the training means stored at fuse-train time
        for i, (m, pres) in enumerate(zip(mats, masks)):
            m[~pres] = extra["arrays"][f"fill{i}"]
        keep = np.ones(len(mats[0]), dtype=bool)
    else:
        keep = np.logical_and.reduce(masks)
    idx = np.flatnonzero(keep)
    feats = [m[idx] for m in mats]
    if isinstance(model, OvoModel):
        pred = ovo_predict(model, feats).astype(np.float64)
    else:
        pred = np.clip(decision_function(model, feats), 0.0, 5.0)
    lines = ["index,prediction"] + [f"{i},{p:.6f}" for i, p in zip(idx.tolist(), pred.tolist())]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.manifest:
        records = parse_manifest(args.manifest, check_images=False)
        truth = np.array([records[i].label for i in idx], dtype=np.float64)
        if isinstance(model, OvoModel):
            print(f"accuracy {accuracy(pred, truth):.4f}", file=sys.stderr)
        else:
            print(f"mae {mae(pred, truth):.4f}", file=sys.stderr)
    skipped = len(keep) - len(idx)
    if skipped:
        log.warning("%d images skipped for missing modalities", skipped)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = PipelineConfig.from_toml(args.config)
    if args.jobs:
        cfg.jobs = args.jobs
    out_dir = args.out or cfg.out_dir
    if not out_dir:
        raise UsageError("no output directory: pass --out or set out_dir in the config")
    report = run_experiment(cfg)
    path = write_report(report, out_dir)
    agg = report.aggregate
    singles = ", ".join(f"{m} {v:.4f}" for m, v in agg["single"].items())
    print(f"{report.metric}: {singles}; fusion {agg['fusion']:.4f} -> {path}")
    failed = sum(len(v) for v in report.extraction_errors.values())
    return EXIT_PARTIAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groupaffect", description="Group-level affect estimation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="regional descriptors for one modality")
    s.add_argument("--modality", choices=["face", "body", "scene"], required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="TOML config for extraction parameters")
    s.add_argument("--jobs", type=int)
    s.add_argument("--superpixels", type=int, help="target superpixel count for the scene modality")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("codebook", help="fit PCA and a vocabulary on a feature file")
    s.add_argument("--features", required=True)
    s.add_argument("--pca-dim", type=int, required=True)
    s.add_argument("--words", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--encoder", choices=[e.value for e in Encoder], default="fisher")
    s.add_argument("--max-rows", type=int, default=500_000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_codebook)

    s = sub.add_parser("encode", help="aggregate regions into one vector per image")
    s.add_argument("--features", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--encoder", choices=[e.value for e in Encoder], required=True)
    s.add_argument("--improved", action="store_true", help="power and L2 normalization of Fisher vectors")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("fuse-train", help="train the fusion machine")
    s.add_argument("--task", choices=["reg", "ovo"], required=True)
    s.add_argument("--kernel", choices=[k.value for k in KernelKind], required=True)
    s.add_argument("--s", type=float, default=10.0)
    s.add_argument("--C", type=float)
    s.add_argument("--eps", type=float)
    s.add_argument("--encoded", nargs="+", required=True, help="one encoded file per modality")
    s.add_argument("--manifest", required=True, help="labels, in the same order as the encoded files")
    s.add_argument("--whiten-dim", type=int, default=32)
    s.add_argument("--smo-tol", type=float, default=1e-3)
    s.add_argument("--inner-folds", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--missing", choices=["drop", "mean_substitute"], default="drop",
                   help="images lacking a modality: drop them, or fill with the training mean vector")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse_train)

    s = sub.add_parser("predict", help="apply a trained machine")
    s.add_argument("--model", required=True)
    s.add_argument("--encoded", nargs="+", required=True)
    s.add_argument("--manifest", help="score against these labels")
    s.add_argument("--out", help="CSV output (default: stdout)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("experiment", help="cross-validated evaluation from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="report directory (overrides out_dir)")
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"groupaffect: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"groupaffect: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
