"""``oaknee`` command line: synth, preprocess, describe, texture, train, eval,
importance, noise-sweep and gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal check failure.
Feature files are named after the manifest they were computed from, e.g.
``manifest_train_describe.csv`` for ``manifest_train.csv``.
"""

import argparse
import contextlib
import csv
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import dataio, evaluation, models, pipeline, plotting
from .errors import DataError, OakneeError, ShapeError
from .geometry import LandmarkSet, RoleConfig
from .imaging import STANDARD_SPACING, PATCH_CROP, PATCH_RESCALE

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _stem(manifest):
    return Path(manifest).stem


def _feature_file(inputs, manifest, kind):
    return Path(inputs) / f"{_stem(manifest)}_{kind}.csv"


def _existing(path, what):
    p = Path(path)
    if not p.is_file():
        raise dataio.IoError(f"{what} not found: {p}")
    return p


def _parse_sigmas(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--sigmas must be a comma-separated list of numbers, got {text!r}") from None
    if not values or any(v < 0 or not np.isfinite(v) for v in values):
        raise UsageError("--sigmas needs at least one finite non-negative value")
    return values


def _threads(args):
    from threadpoolctl import threadpool_limits

    if getattr(args, "deterministic", False):
        return threadpool_limits(1)
    if "OAKNEE_THREADS" in os.environ:
        return threadpool_limits(pipeline.worker_count())
    return contextlib.nullcontext()


def _read_table(inputs, manifest, kind):
    return dataio.read_feature_csv(_existing(_feature_file(inputs, manifest, kind), f"{kind} feature file"))


def _feature_columns(tag):
    if tag in pipeline.FEATURE_TAGS:
        return pipeline.FEATURE_TAGS[tag]
    names = []
    for part in tag.split("+"):
        if part not in pipeline.FEATURE_TAGS:
            raise UsageError(f"unknown feature tag {part!r}; choose from {', '.join(pipeline.FEATURE_TAGS)}")
        names += pipeline.FEATURE_TAGS[part]
    return names


def _table_for(inputs, manifest, tag):
    kind = "texture" if all(p in ("lbp", "fd") for p in tag.split("+")) else "describe"
    return _read_table(inputs, manifest, kind)


def _load_patches(inputs, manifest, knee_ids):
    index = _read_roi_index(inputs, manifest)
    missing = [k for k in knee_ids if k not in index]
    if missing:
        raise dataio.ManifestError(f"ROI index lacks knees {missing[:3]}")
    raw = [dataio.read_pgm(index[k]) for k in knee_ids]
    return pipeline.rescaled_patches(raw)


def _read_roi_index(inputs, manifest):
    path = _existing(_feature_file(inputs, manifest, "roi"), "ROI index")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["knee_id", "label", "patch_path"]:
        raise dataio.ParseError("ROI index must start with 'knee_id,label,patch_path'", f"{path}:1")
    return {r[0]: path.parent / r[2] for r in rows[1:] if r}


def network_dataset(inputs, manifest, entries, arch):
    ids = [e.knee_id for e in entries]
    labels = np.array([e.label for e in entries])
    js2 = patches = None
    if arch in ("js2-nn", "combined"):
        js2 = _read_table(inputs, manifest, "describe").subset(ids).select(pipeline.JS2_NAMES)
    if arch in ("cnn", "combined"):
        patches = _load_patches(inputs, manifest, ids)
    return models.Dataset(ids, labels, js2, patches)


def _preprocessing_meta():
    return {"spacing_mm": STANDARD_SPACING, "rescale": PATCH_RESCALE, "crop": PATCH_CROP,
            "train_crop": "random", "eval_crop": "center"}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    from .synth import SynthConfig, synth_generate

    if args.config:
        cfg = SynthConfig.from_json(Path(_existing(args.config, "synth config")).read_text(encoding="utf-8"))
    else:
        cfg = SynthConfig(n_knees=args.n, oa_fraction=args.oa_fraction, seed=args.seed,
                          test_fraction=args.test_fraction)
    train_m, test_m = synth_generate(cfg, args.out)
    print(f"wrote {cfg.n_knees} knees: {train_m} {test_m}")


def cmd_preprocess(args):
    from .imaging import preprocess_knee

    out = dataio.ensure_dir(args.out)
    (out / "images").mkdir(exist_ok=True)
    (out / "points").mkdir(exist_ok=True)
    records = dataio.load_dataset(args.manifest, "test")
    roles = RoleConfig.default()

    def one(rec):
        img, aligned = preprocess_knee(dataio.read_raster(rec), LandmarkSet(rec.points, roles))
        kid = rec.entry.knee_id
        dataio.write_pgm(out / "images" / f"{kid}.pgm", img.pixels)
        dataio.write_points(out / "points" / f"{kid}.pts", aligned.points)
        e = rec.entry
        return dataio.ManifestEntry(f"images/{kid}.pgm", f"points/{kid}.pts", e.knee_id, e.subject_id,
                                    e.side, e.kl_grade, STANDARD_SPACING)

    entries = pipeline.map_ordered(one, records)
    path = out / f"{_stem(args.manifest)}.csv"
    dataio.write_manifest(path, entries)
    print(f"preprocessed {len(entries)} knees -> {path}")


def cmd_describe(args):
    out = dataio.ensure_dir(args.out)
    records = dataio.load_dataset(args.manifest, "test")
    roles = RoleConfig.default()
    rows = pipeline.map_ordered(lambda r: pipeline.describe_record(r, roles), records)
    path = _feature_file(out, args.manifest, "describe")
    dataio.write_feature_csv(path, [r.entry.knee_id for r in records], [r.label for r in records],
                             pipeline.JS2_NAMES + pipeline.JSW_NAMES, np.array(rows).reshape(len(rows), -1))
    print(f"described {len(rows)} knees -> {path}")


def cmd_texture(args):
    out = dataio.ensure_dir(args.out)
    records = dataio.load_dataset(args.manifest, "test")
    roles = RoleConfig.default()
    tags = [t for t in args.features.split(",") if t]
    bad = [t for t in tags if t not in ("lbp", "fd", "roi")]
    if bad:
        raise UsageError(f"texture --features takes lbp, fd and/or roi, got {','.join(bad)}")
    patches = pipeline.map_ordered(lambda r: pipeline.roi_patch(r, roles), records)
    ids = [r.entry.knee_id for r in records]
    labels = [r.label for r in records]
    if "roi" in tags:
        roi_dir = out / f"{_stem(args.manifest)}_roi"
        roi_dir.mkdir(exist_ok=True)
        index = _feature_file(out, args.manifest, "roi")
        with open(index, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["knee_id", "label", "patch_path"])
            for kid, lab, p in zip(ids, labels, patches):
                dataio.write_pgm(roi_dir / f"{kid}.pgm", p.pixels)
                w.writerow([kid, lab, f"{roi_dir.name}/{kid}.pgm"])
        print(f"wrote {len(patches)} ROI patches -> {index}")
    if "lbp" in tags or "fd" in tags:
        feats = pipeline.map_ordered(lambda p: pipeline.texture_features(p), patches)
        values = np.array([np.concatenate([f.lbp_hist, [f.fd]]) for f in feats])
        path = _feature_file(out, args.manifest, "texture")
        dataio.write_feature_csv(path, ids, labels, pipeline.LBP_NAMES + pipeline.FD_NAMES, values)
        print(f"texture features for {len(feats)} knees -> {path}")


def _train_config(args):
    return models.TrainConfig(epochs=args.epochs, batch=args.batch, lr0=args.lr, seed=args.seed,
                              augment=args.augment)


def train_network(arch, inputs, manifest, cfg, val_fraction, log=None):
    entries = dataio.read_manifest(manifest)
    tr = dataio.split_entries(entries, "train", cfg.seed, val_fraction)
    va = dataio.split_entries(entries, "val", cfg.seed, val_fraction)
    train_set = network_dataset(inputs, manifest, tr, arch)
    val_set = network_dataset(inputs, manifest, va, arch)
    model = models.build_network(arch, seed=cfg.seed)
    return models.train(model, train_set, val_set, cfg, log=log)


def cmd_train(args):
    out = dataio.ensure_dir(args.out)
    if args.model == "lr":
        tag = args.features or "js2"
        names = _feature_columns(tag)
        table = _table_for(args.inputs, args.manifest, tag)
        entries = dataio.read_manifest(args.manifest)
        sub = table.subset([e.knee_id for e in entries])
        model = models.train_logistic(sub.select(names), [e.label for e in entries], args.l2)
        trained = models.TrainedModel(model, "lr", {"features": tag, "feature_names": names,
                                                    "l2_lambda": args.l2, "n_train": len(entries)})
        name = f"lr_{tag.replace('+', '-')}"
        history = []
    else:
        if args.features and args.features not in ("js2", "roi", "js2+roi"):
            raise UsageError(f"--features {args.features} does not apply to --model {args.model}")
        cfg = _train_config(args)
        trained, history = train_network(args.model, args.inputs, args.manifest, cfg, args.val_fraction, _log)
        trained.metadata.update({"preprocessing": _preprocessing_meta(), "val_fraction": args.val_fraction,
                                 "features": {"js2-nn": "js2", "cnn": "roi", "combined": "js2+roi"}[args.model]})
        name = args.model
    ckpt = out / f"{name}.ckpt"
    models.save_model(ckpt, trained)
    if history:
        hpath = out / f"{name}_history.csv"
        with open(hpath, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "val_auc"])
            for h in history:
                w.writerow([h["epoch"], repr(h["lr"]), repr(h["train_loss"]), repr(h["val_auc"])])
        plotting.plot_history(history, out / f"{name}_history.svg")
    print(f"checkpoint -> {ckpt}")


def score_checkpoint(trained, inputs, manifest):
    entries = dataio.read_manifest(manifest)
    labels = np.array([e.label for e in entries])
    if trained.arch == "lr":
        names = trained.metadata["feature_names"]
        table = _table_for(inputs, manifest, trained.metadata["features"]).subset([e.knee_id for e in entries])
        return models.predict_scores(trained, table.select(names)), labels
    return models.predict_scores(trained, network_dataset(inputs, manifest, entries, trained.arch)), labels


def cmd_eval(args):
    ckpt = _existing(args.checkpoint, "checkpoint")
    trained = models.load_model(ckpt)
    scores, labels = score_checkpoint(trained, args.inputs, args.manifest)
    result = evaluation.roc_auc(scores, labels)
    out = dataio.ensure_dir(args.out)
    evaluation.write_roc_csv(out / "roc_curve.csv", result)
    plotting.plot_roc(result, out / "roc_curve.svg", title=trained.arch)
    print(f"AUC: {result.auc:.4f}")


def cmd_importance(args):
    out = dataio.ensure_dir(args.out)
    table = _read_table(args.inputs, args.manifest, "describe")
    if args.density_feature not in table.names:
        raise UsageError(f"--density-feature {args.density_feature!r} is not a column of the describe file")
    x = table.select(pipeline.JS2_NAMES)
    report = evaluation.forest_importance(x, table.labels, evaluation.ForestConfig(n_trees=args.trees, seed=args.seed))
    evaluation.write_importance_csv(out / "importance.csv", report, pipeline.JS2_NAMES)
    plotting.plot_importance(report, pipeline.JS2_NAMES, out / "importance.svg")
    stats = evaluation.class_density_stats(table.select([args.density_feature])[:, 0], table.labels)
    evaluation.write_density_csv(out / "density.csv", stats)
    plotting.plot_density(stats, out / "density.svg", args.density_feature)
    top = ", ".join(f"{pipeline.JS2_NAMES[i]}={report.importance[i]:.4f}" for i in report.ranking[:5])
    print(f"top features: {top}")
    print(f"{args.density_feature}: OA mean {stats.mean[1]:.3f} (std {stats.std[1]:.3f}), "
          f"non-OA mean {stats.mean[0]:.3f} (std {stats.std[0]:.3f})")


def noise_train_eval(inputs, train_manifest, test_manifest, cfg, val_fraction, log=None):
    """Closure for :func:`evaluation.noise_sweep` over file-based inputs."""
    entries = dataio.read_manifest(train_manifest)
    tr_e = dataio.split_entries(entries, "train", cfg.seed, val_fraction)
    va_e = dataio.split_entries(entries, "val", cfg.seed, val_fraction)
    te_e = dataio.read_manifest(test_manifest)
    cache = {}

    def data(arch):
        key = "patch" if arch in ("cnn", "combined") else "js2"
        if key not in cache:
            a = "combined" if key == "patch" else "js2-nn"
            cache[key] = (network_dataset(inputs, train_manifest, tr_e, a),
                          network_dataset(inputs, train_manifest, va_e, a),
                          network_dataset(inputs, test_manifest, te_e, a))
        return cache[key]

    return make_noise_job(data, cfg, log)


def make_noise_job(data, cfg, log=None):
    """``data(arch) -> (train, val, test)`` Datasets; returns ``train_eval(tag, sigma, seed)``."""
    def train_eval(tag, sigma, seed):
        tr, va, te = data(tag)
        rng = np.random.default_rng(seed)
        noisy = []
        for d in (tr, va, te):
            js2 = evaluation.perturb_descriptor(d.js2, sigma, rng)
            noisy.append(models.Dataset(d.knee_ids, d.labels, js2, d.patches))
        tr, va, te = noisy
        if tag == "lr":
            m = models.train_logistic(np.concatenate([tr.js2, va.js2]), np.concatenate([tr.labels, va.labels]))
            scores = m.predict_proba(te.js2)
        else:
            trained, _ = models.train(models.build_network(tag, seed=cfg.seed), tr, va, cfg)
            scores = models.predict_scores(trained, te)
        auc = evaluation.roc_auc(scores, te.labels).auc
        if log:
            log(f"sigma {sigma:g} mm  {tag}: AUC {auc:.4f}")
        return auc

    return train_eval


def cmd_noise_sweep(args):
    out = dataio.ensure_dir(args.out)
    sigmas = _parse_sigmas(args.sigmas)
    tags = [t for t in args.model.split(",") if t]
    bad = [t for t in tags if t not in ("lr", "js2-nn", "combined")]
    if bad:
        raise UsageError(f"noise-sweep models must use JS2 (lr, js2-nn, combined), got {','.join(bad)}")
    cfg = _train_config(args)
    job = noise_train_eval(args.inputs, args.manifest, _existing(args.test_manifest, "test manifest"),
                           cfg, args.val_fraction, _log)
    rows = evaluation.noise_sweep(job, sigmas, tags, seed=args.seed)
    evaluation.write_noise_sweep_csv(out / "noise_sweep.csv", rows)
    plotting.plot_noise_sweep(rows, out / "noise_sweep.svg")
    for r in rows:
        print(f"sigma={r.sigma_mm:g}mm model={r.model} AUC={r.auc:.4f}")


def gradcheck_suite(seeds=range(20), log=None):
    """(name, tolerance, seeds, worst error, passed) per layer family."""
    from . import tensornet as tn

    def linear(seed):
        return tn.Linear(7, 4, np.random.default_rng(seed), np.float64), (3, 7)

    def conv(seed):
        return tn.Conv2d(3, 4, np.random.default_rng(seed), np.float64), (2, 5, 5, 3)

    def pool(seed):
        return tn.MaxPool2x2(), (2, 4, 4, 3)

    def bn(seed):
        return tn.BatchNorm2d(3, np.float64), (4, 4, 4, 3)

    def relu(seed):
        return tn.ReLU(), (3, 5)

    def dropout(seed):
        return tn.Dropout(0.5, fixed_seed=seed), (4, 6)

    def composite(seed):
        m = models.TinyCnn(seed=seed, dtype=np.float64, input_grad=True)
        for _, lay in m.named_layers():
            if isinstance(lay, tn.Dropout):
                lay.fixed_seed = seed
        return m, (2, 1, 48, 48)

    suite = [("linear", linear, 1e-6, None), ("conv2d", conv, 1e-5, None), ("maxpool2x2", pool, 1e-5, None),
             ("relu", relu, 1e-5, None), ("dropout", dropout, 1e-5, None), ("batchnorm2d", bn, 1e-4, None),
             ("tiny_cnn", composite, 1e-4, 6)]
    rows = []
    for name, make, tol, cap in suite:
        worst, skipped = 0.0, 0
        for seed in seeds:
            layer, shape = make(seed)
            r = tn.grad_check(layer, shape, tol, seed=seed, max_entries=cap)
            worst = max(worst, r.max_rel_error)
            skipped += r.kink_skipped
        rows.append((name, tol, len(seeds), worst, skipped, worst < tol))
        if log:
            log(f"{name:12s} max rel err {worst:.3e}  tol {tol:.0e}  {'pass' if worst < tol else 'FAIL'}")
    return rows


def cmd_gradcheck(args):
    rows = gradcheck_suite(range(args.seed, args.seed + args.seeds))
    print(f"{'layer':12s} {'seeds':>5s} {'max_rel_err':>12s} {'tolerance':>10s} {'kinks':>6s} result")
    for name, tol, n, worst, skipped, ok in rows:
        print(f"{name:12s} {n:5d} {worst:12.3e} {tol:10.0e} {skipped:6d} {'pass' if ok else 'FAIL'}")
    if not all(r[-1] for r in rows):
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="oaknee", description="Knee OA detection from JS2 landmark geometry and ROI texture.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, manifest=True, out=True, inputs=False):
        if manifest:
            sp.add_argument("--manifest", required=True, help="manifest CSV")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        if inputs:
            sp.add_argument("--inputs", help="directory holding the feature files (default: --out)")
        sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for byte-identical outputs")

    def training(sp):
        sp.add_argument("--epochs", type=int, default=100, help="training epochs (default 100)")
        sp.add_argument("--batch", type=int, default=64, help="mini-batch size (default 64)")
        sp.add_argument("--lr", type=float, default=0.01, help="initial learning rate (default 0.01)")
        sp.add_argument("--val-fraction", type=float, default=0.1,
                        help="fraction of training subjects held out for model selection (default 0.1)")
        sp.add_argument("--augment", action="store_true", help="random rotation/gamma/brightness on patches")

    s = sub.add_parser("synth", help="generate a calibrated synthetic cohort")
    common(s, manifest=False)
    s.add_argument("--n", type=int, default=400, help="number of knees (default 400)")
    s.add_argument("--oa-fraction", type=float, default=0.5, help="fraction of OA knees (default 0.5)")
    s.add_argument("--test-fraction", type=float, default=0.5, help="fraction of subjects in the test cohort")
    s.add_argument("--config", help="SynthConfig JSON (overrides --n/--oa-fraction/--seed)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="normalize, resample and align rasters and landmarks")
    common(s)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("describe", help="JS2, minJSW and fJSW feature table")
    common(s)
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("texture", help="LBP/FD feature table and/or ROI patch files")
    common(s)
    s.add_argument("--features", default="lbp,fd", help="comma list of lbp, fd, roi (default lbp,fd)")
    s.set_defaults(func=cmd_texture)

    s = sub.add_parser("train", help="train a classifier and write a checkpoint")
    common(s, inputs=True)
    s.add_argument("--model", required=True, choices=models.ARCH_TAGS)
    s.add_argument("--features", help="lr feature tag: js2, jsw, minjsw, lbp, fd or a '+' join (default js2)")
    s.add_argument("--l2", type=float, default=1e-3, help="L2 strength for lr (default 1e-3)")
    training(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="test AUC and ROC curve of a checkpoint")
    common(s, inputs=True)
    s.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("importance", help="forest feature importance over JS2 and class densities")
    common(s, inputs=True)
    s.add_argument("--trees", type=int, default=100, help="number of trees (default 100)")
    s.add_argument("--density-feature", default="js2_192", help="column for density.csv (default js2_192)")
    s.set_defaults(func=cmd_importance)

    s = sub.add_parser("noise-sweep", help="retrain and test with Gaussian noise on JS2")
    common(s, inputs=True)
    s.add_argument("--test-manifest", required=True, help="test cohort manifest")
    s.add_argument("--sigmas", default="0,1,3,5", help="noise std list in mm (default 0,1,3,5)")
    s.add_argument("--model", default="js2-nn", help="comma list of lr, js2-nn, combined (default js2-nn)")
    training(s)
    s.set_defaults(func=cmd_noise_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    s.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    s.add_argument("--seeds", type=int, default=20, help="number of seeds per layer (default 20)")
    s.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "inputs", None) is None and hasattr(args, "inputs"):
            args.inputs = args.out
        for name in ("epochs", "batch"):
            if getattr(args, name, 1) < 1:
                raise UsageError(f"--{name} must be positive")
        if hasattr(args, "val_fraction") and not 0 < args.val_fraction < 1:
            raise UsageError("--val-fraction must be in (0, 1)")
        with _threads(args):
            code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return EXIT_USAGE
    except (DataError, ShapeError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    except (OakneeError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
