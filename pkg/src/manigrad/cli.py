"""Command-line driver: ``manigrad <subcommand> ...``.

Every subcommand writes its outputs atomically plus a ``run.json`` (next to
the main output unless ``--run-json`` is given) holding the full argument
set, seeds and format versions.  Failures print one JSON line on stderr and
exit with a code from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import attribution as attr
from .attacks import ROBUSTNESS_HEADER, AttackConfig, evaluate_robustness, targeted_attack, topk_attack
from .data import GENERATORS, Dataset, augment_baselines, baseline_image, gen_shapes
from .errors import FormatError, FormatVersionError
from .experiments import METHODS, Explainer, pick_targets, train_classifier_on_reconstructions
from .geodesic import LatentCurve, SolverOptions, geodesic_ode_residual, geodesic_solve
from .io import (MGM_FORMAT_VERSION, csv_read, csv_write, ntf_read, ntf_write, pgm_write,
                 write_json)
from .metrics import METRICS_HEADER, MetricConfig, infidelity, max_sensitivity, summarize
from .models import (TrainConfig, accuracy, load_classifier, load_vae, predicted_class,
                     save_classifier, train_vae)

log = logging.getLogger("manigrad")

EXIT_CODES = {"ok": 0, "error": 1, "usage": 2, "missing_file": 3, "format_version": 4, "format": 5}
FORMAT_VERSIONS = {"mgm": MGM_FORMAT_VERSION, "ntf": 1, "pgm": "P5"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def threads() -> int:
    try:
        return max(1, int(os.environ.get("MANIGRAD_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    """Order-preserving map over at most MANIGRAD_THREADS workers."""
    n = threads()
    if n == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def _read_image(path, dim=None) -> np.ndarray:
    img = ntf_read(_need(path))
    if dim is not None and img.size != dim:
        raise FormatError(f"{path}: expected {dim} values, got shape {list(img.shape)}")
    return img


def _image_shape(size: int):
    side = int(round(np.sqrt(size)))
    return (side, side) if side * side == size else (size,)


def _write_run(args, outputs: dict, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "run_json")}
    record = {
        "command": args.command,
        "args": cfg,
        "outputs": outputs,
        "formatVersions": FORMAT_VERSIONS,
        "version": __version__,
    }
    if extra:
        record.update(extra)
    path = args.run_json
    if path is None:
        first = next(iter(outputs.values()))
        base = Path(first)
        path = (base if args.command == "gen-data" else base.parent) / "run.json"
    write_json(path, record)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    gen = GENERATORS[args.dataset]
    ds = gen(args.n, classes=args.classes, seed=args.seed)
    ds.save(args.out)
    _write_run(args, {"dataset": args.out}, {"provenance": ds.provenance})


def cmd_train_vae(args):
    ds = Dataset.load(_need(args.data))
    aug = augment_baselines(ds, args.baseline_fraction)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      kl_weight=args.kl_weight, feature_weight=args.feature_weight, seed=args.seed)
    vae, hist = train_vae(aug.inputs, cfg, latent_dim=args.latent)
    rec = vae.reconstruct(ds.inputs)
    vae.meta["recon_mse"] = float(np.mean((rec - ds.inputs) ** 2))
    vae.save(args.out)
    _write_run(args, {"model": args.out}, {"train": asdict(cfg), "history": hist,
                                           "recon_mse": vae.meta["recon_mse"]})


def cmd_train_classifier(args):
    vae = load_vae(_need(args.vae))
    ds = Dataset.load(_need(args.data))
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      seed=args.seed)
    net, recon, hist = train_classifier_on_reconstructions(vae, ds, cfg)
    acc = accuracy(net, recon, ds.labels[ds.class_mask()])
    save_classifier(args.out, net, {"train": asdict(cfg), "train_accuracy": acc})
    _write_run(args, {"model": args.out}, {"history": hist, "train_accuracy": acc})


def cmd_geodesic(args):
    vae = load_vae(_need(args.vae))
    z0 = vae.encode_mean(_read_image(args.from_, vae.data_dim).reshape(-1))
    zT = vae.encode_mean(_read_image(args.to, vae.data_dim).reshape(-1))
    opts = SolverOptions(max_iter=args.max_iter, preconditioner=args.preconditioner)
    encoder = vae.encoder_mean_fn if args.mode == "encoder-approx" else None
    curve, report = geodesic_solve(z0, zT, vae.decoder, T=args.steps, mode=args.mode,
                                   encoder=encoder, options=opts)
    if curve.T >= 8 and args.ode_residual:
        report.ode_residual = geodesic_ode_residual(curve, vae.decoder)
    ntf_write(args.out, curve.points)
    write_json(args.report, report.to_dict())
    _write_run(args, {"curve": args.out, "report": args.report})


def _baseline(spec, dim):
    if spec in ("black", "white"):
        return baseline_image(spec, dim)
    return _read_image(spec, dim).reshape(-1)


def cmd_attribute(args):
    clf = load_classifier(_need(args.clf))
    x = _read_image(args.input, clf.in_dim)
    shape = _image_shape(x.size)
    x = x.reshape(shape)
    baseline = _baseline(args.baseline, x.size).reshape(shape)
    cls = predicted_class(clf, x) if args.cls is None else args.cls
    meta = {"method": args.method, "steps": args.steps, "baseline": args.baseline,
            "seed": args.seed, "class": cls, "curve": args.curve}
    if args.method in ("mig", "eig"):
        if args.vae is None:
            raise UsageError(f"--vae is required for {args.method}")
        vae = load_vae(_need(args.vae))
        ex = Explainer(vae, clf, n_steps=args.steps, image_shape=shape, seed=args.seed)
        ex.baseline = baseline
        ex.z0 = vae.encode_mean(baseline.reshape(-1))
        if args.method == "mig" and args.curve:
            curve = LatentCurve(ntf_read(_need(args.curve)))
            amap = attr.mig(ex.F(x, cls), vae.decoder, curve, args.steps, shape=shape,
                            latent_dim=vae.latent_dim)
        else:
            amap = ex.explain(args.method, x, cls)
    else:
        ex = Explainer(_NoVae(), clf, n_steps=args.steps, image_shape=shape, seed=args.seed,
                       smooth_samples=args.samples, noise_sigma=args.noise_sigma,
                       max_sigma=args.max_sigma)
        ex.baseline = baseline
        amap = ex.explain(args.method, x, cls)
    meta.update({k: v for k, v in amap.meta.items() if k not in meta})
    if "completeness_residual" in amap.meta:
        gap = abs(amap.meta["f_end"] - amap.meta["f_start"])
        meta["completeness_relative"] = amap.meta["completeness_residual"] / gap if gap > 0 else 0.0
    ntf_write(args.out, amap.scores)
    if args.heatmap:
        img = amap.normalized()
        pgm_write(args.heatmap, img if img.ndim == 2 else img.reshape(_image_shape(img.size)))
    meta_path = args.meta or str(Path(args.out).with_suffix(".json"))
    write_json(meta_path, meta)
    _write_run(args, {"map": args.out, "meta": meta_path, "heatmap": args.heatmap})


class _NoVae:
    """Stand-in so Explainer can serve the input-space methods without a VAE."""

    def encode_mean(self, x):
        return None


def _attack_config(args) -> AttackConfig:
    return AttackConfig(epsilon=args.eps, gamma=args.gamma, steps=args.steps, step_size=args.step_size,
                        n_steps=args.path_steps, seed=args.seed)


def cmd_attack(args):
    clf = load_classifier(_need(args.clf))
    x = _read_image(args.input, clf.in_dim)
    baseline = _baseline(args.baseline, x.size).reshape(x.shape)
    cfg = _attack_config(args)
    if args.kind == "targeted":
        if args.target is None:
            raise UsageError("targeted attack needs --target")
        res = targeted_attack(clf, x, _read_image(args.target, clf.in_dim).reshape(x.shape), baseline, cfg)
    else:
        if args.k is None:
            raise UsageError("top-k attack needs --k")
        res = topk_attack(clf, x, args.k, baseline, cfg)
    ntf_write(args.out, res.x_adv)
    write_json(args.report, dict(res.to_dict(), config=asdict(cfg), kind=args.kind))
    _write_run(args, {"adv": args.out, "report": args.report})


def _eval_inputs(cfg, vae, clf):
    spec = cfg.get("inputs", {"count": 20, "seed": 1})
    if isinstance(spec, str):
        X = ntf_read(_need(spec))
        return X.reshape(len(X), -1)
    fresh = gen_shapes(4 * spec["count"], clf.out_dim, seed=spec.get("seed", 1) + 10_000)
    recon = vae.reconstruct(fresh.inputs)
    ok = clf.predict(recon).argmax(axis=1) == fresh.labels
    return recon[np.flatnonzero(ok)[: spec["count"]]]


def cmd_evaluate(args):
    cfg = json.loads(_need(args.config).read_text())
    vae = load_vae(_need(cfg["vae"]))
    clf = load_classifier(_need(cfg["clf"]))
    shape = tuple(cfg.get("image_shape", _image_shape(clf.in_dim)))
    X = _eval_inputs(cfg, vae, clf).reshape((-1,) + shape)
    mcfg = MetricConfig(**{f.name: cfg["metric"][f.name] for f in fields(MetricConfig)
                           if f.name in cfg.get("metric", {})})
    ex = Explainer(vae, clf, n_steps=cfg.get("steps", 32), geodesic_steps=cfg.get("geodesic_steps", 16),
                   baseline=cfg.get("baseline", "black"), image_shape=shape, seed=cfg.get("seed", 0))
    methods = cfg.get("methods", ["ig", "smoothig", "blurig", "eig", "mig"])
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown methods in config: {sorted(unknown)}")

    if args.metric == "ssi":
        acfg = AttackConfig(**cfg.get("attack", {}))
        targets = pick_targets(np.array([predicted_class(clf, x) for x in X]), acfg.seed)

        def attack_one(i):
            c = AttackConfig(**dict(asdict(acfg), seed=acfg.seed + i))
            return targeted_attack(ex.native, X[i], X[targets[i]], ex.baseline, c)

        results = _pmap(attack_one, range(len(X)))
        rows = evaluate_robustness({m: ex.method_fn(m) for m in methods},
                                   [(i, X[i], r) for i, r in enumerate(results)], percentile=mcfg.percentile)
        csv_write(args.out, rows, ROBUSTNESS_HEADER)
        extra = {"attack": asdict(acfg), "attacks": [r.to_dict() for r in results]}
    else:
        h = mcfg.hash()

        def score(i):
            x = X[i]
            cls = predicted_class(ex.native, x)
            out = []
            for m in methods:
                phi = ex.explain(m, x, cls)
                if args.metric == "infd":
                    v, se = infidelity(ex.F(x, cls), phi, x, ex.path_start(m, x), mcfg)
                else:
                    v, se = max_sensitivity(ex.method_fn(m, cls), x, mcfg, reference=phi), 0.0
                out.append({"input_id": i, "method": m, "metric": args.metric, "value": v,
                            "stderr": se, "config_hash": h})
            return out

        rows = [r for rs in _pmap(score, range(len(X))) for r in rs]
        csv_write(args.out, rows, METRICS_HEADER)
        extra = {}
    _write_run(args, {"results": args.out}, dict(extra, config=cfg, metric_config=asdict(mcfg)))


def cmd_report(args):
    src = _need(args.in_)
    if src.suffix == ".json":
        meta = json.loads(src.read_text())
        summary = {"kind": "attribution", **{k: meta[k] for k in sorted(meta)}}
    else:
        rows = csv_read(src)
        if rows and "ssi" in rows[0]:
            rows = [{"metric": "ssi", "method": r["method"], "value": r["ssi"]} for r in rows]
        table = summarize(rows)
        orderings = {}
        for metric, per in table.items():
            ranked = sorted(per, key=lambda m: per[m]["mean"], reverse=(metric == "ssi"))
            orderings[metric] = ranked
        summary = {"kind": "metrics", "summary": table, "orderings": orderings,
                   "better": {m: ("higher" if m == "ssi" else "lower") for m in table}}
    write_json(args.out, summary)
    _write_run(args, {"summary": args.out})


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="manigrad", description="Manifold-aware path attributions on toy data.")
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(func=func)
        sp.add_argument("--run-json", default=None, help="where to write run.json")
        return sp

    g = add("gen-data", cmd_gen_data, help="generate a procedural dataset")
    g.add_argument("--dataset", choices=sorted(GENERATORS), default="shapes")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    d = TrainConfig()
    v = add("train-vae", cmd_train_vae, help="train the VAE")
    v.add_argument("--data", required=True)
    v.add_argument("--latent", type=int, default=8)
    v.add_argument("--epochs", type=int, default=d.epochs)
    v.add_argument("--batch-size", type=int, default=d.batch_size)
    v.add_argument("--lr", type=float, default=d.learning_rate)
    v.add_argument("--kl-weight", type=float, default=d.kl_weight)
    v.add_argument("--feature-weight", type=float, default=d.feature_weight)
    v.add_argument("--baseline-fraction", type=float, default=0.05)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)

    c = add("train-classifier", cmd_train_classifier, help="train the classifier on reconstructions")
    c.add_argument("--vae", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--epochs", type=int, default=50)
    c.add_argument("--batch-size", type=int, default=d.batch_size)
    c.add_argument("--lr", type=float, default=d.learning_rate)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    o = SolverOptions()
    geo = add("geodesic", cmd_geodesic, help="solve a latent geodesic between two images")
    geo.add_argument("--vae", required=True)
    geo.add_argument("--from", dest="from_", required=True)
    geo.add_argument("--to", required=True)
    geo.add_argument("--steps", type=int, default=16)
    geo.add_argument("--mode", choices=("exact", "encoder-approx"), default="exact")
    geo.add_argument("--preconditioner", choices=("gauss-newton", "laplacian", "none"), default=o.preconditioner)
    geo.add_argument("--max-iter", type=int, default=o.max_iter)
    geo.add_argument("--ode-residual", action="store_true")
    geo.add_argument("--out", required=True)
    geo.add_argument("--report", required=True)

    a = add("attribute", cmd_attribute, help="compute an attribution map")
    a.add_argument("--method", choices=METHODS, required=True)
    a.add_argument("--clf", required=True)
    a.add_argument("--vae")
    a.add_argument("--curve")
    a.add_argument("--input", required=True)
    a.add_argument("--baseline", default="black")
    a.add_argument("--steps", type=int, default=32)
    a.add_argument("--class", dest="cls", type=int)
    a.add_argument("--samples", type=int, default=16)
    a.add_argument("--noise-sigma", type=float, default=0.2)
    a.add_argument("--max-sigma", type=float, default=8.0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--heatmap")
    a.add_argument("--meta", help="metadata JSON (default: --out with .json suffix)")

    at = add("attack", cmd_attack, help="attributional attack against IG")
    at.add_argument("--kind", choices=("targeted", "topk"), required=True)
    at.add_argument("--clf", required=True)
    at.add_argument("--input", required=True)
    at.add_argument("--target")
    at.add_argument("--k", type=int)
    at.add_argument("--eps", type=float, default=0.1)
    at.add_argument("--steps", type=int, default=200)
    at.add_argument("--step-size", type=float)
    at.add_argument("--gamma", type=float)
    at.add_argument("--path-steps", type=int, default=16)
    at.add_argument("--baseline", default="black")
    at.add_argument("--seed", type=int, default=0)
    at.add_argument("--out", required=True)
    at.add_argument("--report", required=True)

    e = add("evaluate", cmd_evaluate, help="score explanations (infd, sensmax, ssi)")
    e.add_argument("--metric", choices=("infd", "sensmax", "ssi"), required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)

    r = add("report", cmd_report, help="summarize a results CSV or attribution metadata")
    r.add_argument("--in", dest="in_", required=True)
    r.add_argument("--out", required=True)
    return p


def _fail(kind: str, exc) -> int:
    code = EXIT_CODES[kind]
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        return _fail("usage", exc)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc)
    except FormatVersionError as exc:
        return _fail("format_version", exc)
    except FormatError as exc:
        return _fail("format", exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        return _fail("error", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
