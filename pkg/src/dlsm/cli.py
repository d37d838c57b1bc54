"""Command-line entry point: ``dlsm <verb> [options]``.

Every verb writes into ``--out``, which must not exist (or be empty) unless
``--force`` is given, and leaves a ``manifest.json`` echoing the resolved
configuration and the sha256 of each artifact.

Exit codes: 0 ok, 2 config or input error, 3 missing artifact, 4 numeric
failure, 5 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import plotting
from .config import ConfigError, ExperimentConfig, load_config
from .datasets import DatasetError, LabeledDataset, load_csv, subset_by_class
from .losses import LOSS_KINDS, TrainingDivergedError
from .metrics import ScoreField, prdc
from .models import CheckpointError, MlpSpec, load_checkpoint, save_checkpoint
from .oracle import ParzenOracle, RenormConfig, renormalized_posterior_1d
from .pipeline import (
    TABLE_METHODS,
    RunStore,
    SeedModels,
    ablation_summary,
    build_dataset,
    eval_grid,
    fit_classifier,
    fit_score,
    format_table1,
    make_recorder,
    method_fields,
    run_table1,
    sampler_config,
    train_seed,
    write_ablation_csv,
    write_samples_csv,
    write_trace_csv,
)
from .samplers import GuidanceConfig, Method, ModelBundle, SamplingError, sample_classes

log = logging.getLogger("dlsm")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class MissingArtifact(Exception):
    pass


class OutputExists(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise OutputExists(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExists(f"{out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: ExperimentConfig | None, extra: dict | None = None):
    artifacts = {
        str(p.relative_to(out)): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    doc = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict() if cfg is not None else None,
        "artifacts": artifacts,
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _load_model(path, what: str, expected: MlpSpec | None = None):
    return load_checkpoint(_require(path, what), expected)


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.profile)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _classes(args, dataset: LabeledDataset) -> list[int]:
    if args.cls is None:
        return list(range(dataset.class_count))
    for c in args.cls:
        if not 0 <= c < dataset.class_count:
            raise ConfigError(f"class {c} out of range [0, {dataset.class_count})")
    return sorted(set(args.cls))


def _bundle_from_args(args, method: Method, dataset: LabeledDataset,
                      hidden: tuple[int, ...]) -> ModelBundle:
    """Load what ``method`` needs from --score/--classifier/--class-scores."""
    d, k = dataset.dim, dataset.class_count
    if method is Method.ORACLE:
        return ModelBundle(oracle=ParzenOracle(dataset, 1.0))
    if method is Method.POSTERIOR_SM:
        paths = args.class_scores or []
        if len(paths) != k:
            raise ConfigError(f"posterior_sm needs --class-scores with {k} checkpoints")
        return ModelBundle(class_scores=[_load_model(p, "class score checkpoint",
                                                     MlpSpec.score_model(d, hidden)) for p in paths])
    score = _load_model(args.score, "--score checkpoint", MlpSpec.score_model(d, hidden))
    clf = _load_model(args.classifier, "--classifier checkpoint", MlpSpec.classifier(d, k, hidden))
    return ModelBundle(score, clf)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(v) -> str:
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# verbs


def cmd_train_score(args) -> int:
    cfg = _resolve_config(args)
    dataset = build_dataset(cfg)
    out = prepare_out(args.out, args.force)
    name = "score"
    if args.cls is not None:
        classes = _classes(args, dataset)
        if len(classes) != 1:
            raise ConfigError("train-score takes a single --class")
        dataset, name = subset_by_class(dataset, classes[0]), f"score_c{classes[0]}"
    params, trace = fit_score(cfg, cfg.seed, dataset, name)
    save_checkpoint(params, out / f"{name}.ckpt")
    write_trace_csv(trace, out / f"{name}_trace.csv")
    plotting.loss_trace(trace.iteration, trace.loss, out / f"{name}_trace.png", name)
    write_manifest(out, "train-score", cfg, {"seed": cfg.seed, "model": name})
    print(f"wrote {out / f'{name}.ckpt'} (final loss {trace.loss[-1]:.6g})" if len(trace)
          else f"wrote {out / f'{name}.ckpt'}")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    cfg = _resolve_config(args)
    dataset = build_dataset(cfg)
    kind = args.loss
    score, score_hash = None, None
    if kind != "ce" or args.score is not None:
        score = _load_model(args.score, "--score checkpoint",
                            MlpSpec.score_model(dataset.dim, cfg.model.hidden))
        score_hash = _sha256(Path(args.score))
    out = prepare_out(args.out, args.force)
    recorder = make_recorder(cfg, dataset)
    params, trace, abl = fit_classifier(cfg, cfg.seed, dataset, kind, score, None, recorder)
    name = f"classifier_{kind}"
    save_checkpoint(params, out / f"{name}.ckpt")
    write_trace_csv(trace, out / f"{name}_trace.csv")
    write_ablation_csv(abl, out / f"{name}_ablation.csv")
    plotting.loss_trace(trace.iteration, trace.loss, out / f"{name}_trace.png", name)
    write_manifest(out, "train-classifier", cfg,
                   {"seed": cfg.seed, "loss": kind,
                    "frozen_score_sha256": score_hash})
    print(f"wrote {out / f'{name}.ckpt'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    dataset = build_dataset(cfg)
    method = _method(args.method or cfg.guidance.method)
    alpha = cfg.guidance.alpha if args.alpha is None else args.alpha
    guidance = GuidanceConfig(method, alpha, 0)
    bundle = _bundle_from_args(args, method, dataset, cfg.model.hidden)
    n = args.n or cfg.sampler.n_samples
    classes = _classes(args, dataset)
    out = prepare_out(args.out, args.force)
    pts, labels = sample_classes(sampler_config(cfg, cfg.seed), guidance, bundle,
                                 {c: n for c in classes}, dataset.dim)
    write_samples_csv(pts, labels, out / "samples.csv")
    plotting.samples({method.value: (pts, labels)}, out / "samples.png", cfg.metrics.bounds)
    write_manifest(out, "sample", cfg, {"method": method.value, "alpha": alpha,
                                        "classes": classes, "n_per_class": n})
    print(f"wrote {len(pts)} samples to {out / 'samples.csv'}")
    return EXIT_OK


def cmd_eval_fields(args) -> int:
    cfg = _resolve_config(args)
    dataset = build_dataset(cfg)
    method = _method(args.method or cfg.guidance.method)
    alpha = cfg.guidance.alpha if args.alpha is None else args.alpha
    bundle = _bundle_from_args(args, method, dataset, cfg.model.hidden)
    sigma = cfg.metrics.sigma_eval
    oracle = ParzenOracle(dataset, sigma)
    grid = eval_grid(cfg)
    out = prepare_out(args.out, args.force)
    models = SeedModels(cfg.seed, bundle.score, list(bundle.class_scores),
                        {"ce": bundle.classifier, "total": bundle.classifier})
    report = {"method": method.value, "sigma": sigma, "alpha": alpha,
              "exp_dp": {}, "exp_dl": {}}
    rows, panels = [], []
    for c in _classes(args, dataset):
        post, lik = method_fields(method, models, oracle, grid, c, alpha)
        report["exp_dp"][str(c)] = float(np.mean(np.linalg.norm(post - oracle.posterior_score(grid, c), axis=1)))
        fields = [("posterior", post)]
        if lik is not None:
            report["exp_dl"][str(c)] = float(
                np.mean(np.linalg.norm(lik - oracle.likelihood_score(grid, c), axis=1)))
            fields.append(("likelihood", lik))
        else:
            report["exp_dl"][str(c)] = None
        for kind, vec in fields:
            rows += [[_g(x[0]), _g(x[1]), _g(v[0]), _g(v[1]), _g(sigma), c, kind]
                     for x, v in zip(grid, vec)]
        panels.append((f"{method.value} c{c + 1}", ScoreField(grid, post, sigma, c, "posterior")))
        panels.append((f"oracle c{c + 1}",
                       ScoreField(grid, oracle.posterior_score(grid, c), sigma, c, "posterior")))
    _write_rows(out / "fields.csv", ["x0", "x1", "v0", "v1", "sigma", "class", "kind"], rows)
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    plotting.score_fields(panels, out / "fields.png", dataset.points, dataset.labels)
    write_manifest(out, "eval-fields", cfg)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_eval_prdc(args) -> int:
    real = load_csv(_require(args.real, "--real CSV"))
    gen = load_csv(_require(args.gen, "--gen CSV"))
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    out = prepare_out(args.out, args.force)
    report = {"k": args.k, "per_class": {}}
    for c in sorted(set(real.labels.tolist()) & set(gen.labels.tolist())):
        report["per_class"][str(c)] = prdc(real.points[real.labels == c],
                                           gen.points[gen.labels == c], args.k)
    report["all"] = prdc(real.points, gen.points, args.k)
    (out / "prdc.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "eval-prdc", None, {"real": str(args.real), "gen": str(args.gen),
                                            "inputs": {"real": _sha256(Path(args.real)),
                                                       "gen": _sha256(Path(args.gen))}})
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _seed_list(cfg: ExperimentConfig, args) -> list[int]:
    if args.seeds is None:
        return list(cfg.seeds)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    return [cfg.seed + i for i in range(args.seeds)]


def cmd_table1(args) -> int:
    cfg = _resolve_config(args)
    seeds = _seed_list(cfg, args)
    out = prepare_out(args.out, args.force)
    res = run_table1(cfg, RunStore(out), seeds, with_sampling=not args.no_sampling,
                     progress=lambda msg: log.info(msg))
    text = format_table1(res["median"])
    (out / "table1.json").write_text(json.dumps(res["median"], indent=1, sort_keys=True) + "\n")
    (out / "table1.txt").write_text(text + "\n")
    _table1_figures(cfg, out, seeds[0])
    write_manifest(out, "table1", cfg, {"seeds": seeds})
    print(text)
    return EXIT_OK


def _table1_figures(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    models = train_seed(cfg, seed, RunStore(out))
    dataset = build_dataset(cfg)
    oracle = ParzenOracle(dataset, cfg.metrics.sigma_eval)
    grid = eval_grid(cfg)
    for c in range(dataset.class_count):
        panels = []
        for method in TABLE_METHODS:
            post, _ = method_fields(method, models, oracle, grid, c, cfg.guidance.alpha)
            panels.append((method.value, ScoreField(grid, post, oracle.sigma, c, "posterior")))
        plotting.score_fields(panels, out / f"fields_c{c + 1}.png", dataset.points, dataset.labels)
    sample_panels = {}
    for method in TABLE_METHODS:
        src = out / (f"samples_{method.value}.csv" if method is Method.ORACLE
                     else f"seed-{seed}/samples_{method.value}.csv")
        if src.exists():
            s = load_csv(src)
            sample_panels[method.value] = (s.points, s.labels)
    if sample_panels:
        plotting.samples(sample_panels, out / "samples.png", cfg.metrics.bounds)


def cmd_ablation(args) -> int:
    cfg = _resolve_config(args)
    seeds = _seed_list(cfg, args)
    out = prepare_out(args.out, args.force)
    res = run_table1(cfg, RunStore(out), seeds, with_sampling=False,
                     progress=lambda msg: log.info(msg))
    summary = ablation_summary(res["per_seed"])
    rows = []
    for s in res["per_seed"]:
        for kind, tr in s["ablation"].items():
            rows += [[it, kind, s["seed"], _g(e), _g(c)] for it, e, c in
                     zip(tr["iteration"], tr["score_error"], tr["cross_entropy"])]
    _write_rows(out / "ablation.csv", ["iter", "loss_kind", "seed", "score_error", "cross_entropy"], rows)
    rows = []
    for kind, curves in summary.items():
        se, ce = curves["score_error"], curves["cross_entropy"]
        for i, it in enumerate(se["iteration"]):
            rows.append([int(it), kind, _g(se["mean"][i]), _g(se["lo"][i]), _g(se["hi"][i]),
                         _g(ce["mean"][i]), _g(ce["lo"][i]), _g(ce["hi"][i])])
    _write_rows(out / "ablation_summary.csv",
                ["iter", "loss_kind", "score_error_mean", "score_error_lo", "score_error_hi",
                 "cross_entropy_mean", "cross_entropy_lo", "cross_entropy_hi"], rows)
    plotting.ablation(summary, out / "ablation.png")
    write_manifest(out, "ablation", cfg, {"seeds": seeds})
    for kind, curves in summary.items():
        print(f"{kind:>6}: final score error {curves['score_error']['mean'][-1]:.4f}, "
              f"final cross-entropy {curves['cross_entropy']['mean'][-1]:.4f}")
    return EXIT_OK


def cmd_renorm_demo(args) -> int:
    alphas = args.alphas
    if any(not a > 0 for a in alphas):
        raise ConfigError("alphas must be positive")
    out = prepare_out(args.out, args.force)
    results = {}
    for a in alphas:
        res = renormalized_posterior_1d(RenormConfig(alpha=a, count=args.count))
        results[a] = res
        _write_rows(out / f"renorm_alpha_{a:g}.csv",
                    ["x", "p_prior", "p_post_y1", "p_post_y2", "p_renorm_y1", "p_renorm_y2"],
                    [[_g(v) for v in row] for row in res.rows()])
    plotting.renorm(results, out / "renorm.png")
    variances = {f"{a:g}": [r.variance(i) for i in range(2)] for a, r in results.items()}
    write_manifest(out, "renorm-demo", None, {"alphas": alphas, "variances": variances})
    for a, v in variances.items():
        print(f"alpha={a}: renormalized posterior variances {v[0]:.4f} {v[1]:.4f}")
    return EXIT_OK


def _method(value) -> Method:
    try:
        return Method(str(getattr(value, "value", value)).lower())
    except ValueError:
        raise ConfigError(
            f"unknown method {value!r} (choose from {', '.join(m.value for m in Method)})"
        ) from None


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlsm", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="YAML experiment config")
            sp.add_argument("--profile", choices=("paper", "ci"), help="base profile (default: paper)")
            sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="write into a non-empty --out")
        sp.add_argument("-v", "--verbose", action="store_true")

    def model_args(sp):
        sp.add_argument("--method", help="base, scaling, posterior_sm, ours or oracle")
        sp.add_argument("--alpha", type=float, help="scaling factor for the scaling method")
        sp.add_argument("--score", type=Path, help="prior score checkpoint")
        sp.add_argument("--classifier", type=Path, help="classifier checkpoint")
        sp.add_argument("--class-scores", type=Path, nargs="+", help="per-class score checkpoints")
        sp.add_argument("--class", dest="cls", type=int, action="append", help="class index (repeatable)")

    sp = sub.add_parser("train-score", help="stage 1: fit the prior score model")
    common(sp)
    sp.add_argument("--class", dest="cls", type=int, action="append",
                    help="train on one class only (posterior SM models)")
    sp.set_defaults(fn=cmd_train_score)

    sp = sub.add_parser("train-classifier", help="stage 2: fit a noise-conditioned classifier")
    common(sp)
    sp.add_argument("--loss", choices=LOSS_KINDS, default="total")
    sp.add_argument("--score", type=Path, help="frozen stage-1 checkpoint (needed for dlsm/total)")
    sp.set_defaults(fn=cmd_train_classifier)

    sp = sub.add_parser("sample", help="PC sampling with a conditional score")
    common(sp)
    model_args(sp)
    sp.add_argument("--n", type=int, help="samples per class")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval-fields", help="score fields on the grid and E[D_P] / E[D_L]")
    common(sp)
    model_args(sp)
    sp.set_defaults(fn=cmd_eval_fields)

    sp = sub.add_parser("eval-prdc", help="precision / recall / density / coverage")
    common(sp, config=False)
    sp.add_argument("--real", type=Path, required=True)
    sp.add_argument("--gen", type=Path, required=True)
    sp.add_argument("--k", type=int, default=3)
    sp.set_defaults(fn=cmd_eval_prdc)

    sp = sub.add_parser("table1", help="train everything and tabulate the five methods")
    common(sp)
    sp.add_argument("--seeds", type=int, help="number of seeds starting at --seed")
    sp.add_argument("--no-sampling", action="store_true", help="skip the PC sampling metrics")
    sp.set_defaults(fn=cmd_table1)

    sp = sub.add_parser("ablation", help="score error / cross-entropy traces for ce, dlsm, total")
    common(sp)
    sp.add_argument("--seeds", type=int, help="number of seeds starting at --seed")
    sp.set_defaults(fn=cmd_ablation)

    sp = sub.add_parser("renorm-demo", help="1-D renormalized likelihood demonstration")
    common(sp, config=False)
    sp.add_argument("--alphas", type=float, nargs="+", default=[0.2, 1.0, 5.0])
    sp.add_argument("--count", type=int, default=2001, help="grid points on [-12, 12]")
    sp.set_defaults(fn=cmd_renorm_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergedError, SamplingError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OutputExists, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining argument-range checks in the library raise ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
