"""Two-stage training, score-error and sample-quality evaluation, and the
classifier-objective ablation, with an on-disk cache keyed by config digests.

Layout of a run directory::

    seed-<s>/score.ckpt             stage-1 prior score model
    seed-<s>/score_c<k>.ckpt        per-class score models (posterior SM)
    seed-<s>/classifier_<kind>.ckpt stage-2 classifiers, kind in ce/dlsm/total
    seed-<s>/*_trace.csv            loss traces
    seed-<s>/*_ablation.csv         score error / cross-entropy during training
    seed-<s>/eval.json              per-seed table values
    seed-<s>/samples_<method>.csv   generated points
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .datasets import LabeledDataset, MoonConfig, generate_moons, load_csv, save_csv, subset_by_class
from .losses import LossTrace, TrainConfig, train_classifier, train_score_model
from .metrics import (
    AblationRecorder,
    AblationTrace,
    aggregate_traces,
    prdc,
    score_error_expectation,
    uniform_grid,
)
from .models import CheckpointError, MlpSpec, ModelParams, load_checkpoint, save_checkpoint
from .oracle import ParzenOracle
from .samplers import (
    GuidanceConfig,
    Method,
    ModelBundle,
    SamplerConfig,
    conditional_score,
    likelihood_score_estimate,
    sample_classes,
    score_estimate,
)

log = logging.getLogger(__name__)

CLASSIFIER_KINDS = ("ce", "dlsm", "total")
TABLE_METHODS = (Method.BASE, Method.SCALING, Method.POSTERIOR_SM, Method.OURS, Method.ORACLE)
# which classifier each guided method uses
METHOD_CLASSIFIER = {Method.BASE: "ce", Method.SCALING: "ce", Method.OURS: "total"}


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def build_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.dataset
    if d.csv:
        return load_csv(d.csv)
    return generate_moons(
        MoonConfig(d.samples_per_class, d.noise_std, d.scale_factor, d.seed, d.center)
    )


def heldout_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    """Independent real points for precision/recall; the training set for CSV data."""
    d = cfg.dataset
    if d.csv:
        return load_csv(d.csv)
    return generate_moons(
        MoonConfig(cfg.metrics.real_per_class, d.noise_std, d.scale_factor, d.heldout_seed, d.center)
    )


def eval_grid(cfg: ExperimentConfig) -> np.ndarray:
    m = cfg.metrics
    return uniform_grid(m.bounds, m.count, m.grid_mode, m.grid_seed)


def sampler_config(cfg: ExperimentConfig, seed: int) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(cfg.schedule, s.corrector_snr, s.corrector_steps, seed, s.n_samples,
                         s.step_norm)


# ---------------------------------------------------------------------------
# training with cache


@dataclass
class SeedModels:
    seed: int
    score: ModelParams
    class_scores: list[ModelParams]
    classifiers: dict[str, ModelParams]
    ablation: dict[str, AblationTrace] = field(default_factory=dict)

    def bundle(self, method: Method, oracle: ParzenOracle | None = None) -> ModelBundle:
        clf = self.classifiers.get(METHOD_CLASSIFIER.get(method, ""))
        return ModelBundle(self.score, clf, self.class_scores, oracle)


def write_trace_csv(trace: LossTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "loss", "ce_component", "dlsm_component"])
        for row in trace.rows():
            w.writerow([row[0], *(format(v, ".17g") for v in row[1:])])


def write_ablation_csv(trace: AblationTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "score_error", "cross_entropy"])
        for it, e, c in zip(trace.iteration, trace.score_error, trace.cross_entropy):
            w.writerow([it, format(e, ".17g"), format(c, ".17g")])


def read_ablation_csv(path) -> AblationTrace:
    trace = AblationTrace()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            trace.iteration.append(int(row["iter"]))
            trace.score_error.append(float(row["score_error"]))
            trace.cross_entropy.append(float(row["cross_entropy"]))
    return trace


class RunStore:
    """Checkpoint cache under a run directory; ``None`` root disables caching."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None

    def seed_dir(self, seed: int) -> Path | None:
        if self.root is None:
            return None
        path = self.root / f"seed-{seed}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def load(self, seed: int, name: str, digest: str, spec: MlpSpec) -> ModelParams | None:
        d = self.seed_dir(seed)
        if d is None or not (d / f"{name}.ckpt").exists():
            return None
        try:
            params = load_checkpoint(d / f"{name}.ckpt", expected=spec)
        except CheckpointError:
            return None
        if params.meta.get("config_digest") != digest:
            return None
        return params

    def save(self, seed: int, name: str, params: ModelParams, trace: LossTrace | None,
             ablation: AblationTrace | None = None) -> None:
        d = self.seed_dir(seed)
        if d is None:
            return
        save_checkpoint(params, d / f"{name}.ckpt")
        if trace is not None:
            write_trace_csv(trace, d / f"{name}_trace.csv")
        if ablation is not None:
            write_ablation_csv(ablation, d / f"{name}_ablation.csv")

    def load_ablation(self, seed: int, name: str) -> AblationTrace | None:
        d = self.seed_dir(seed)
        path = None if d is None else d / f"{name}_ablation.csv"
        return read_ablation_csv(path) if path is not None and path.exists() else None


def _model_digest(cfg: ExperimentConfig, seed: int, name: str) -> str:
    doc = cfg.to_dict()
    keys = ("dataset", "schedule", "model", "train", "loss_weights")
    key = {k: doc[k] for k in keys}
    if name.startswith("classifier"):
        # the ablation trace recorded during training depends on these too
        key["ablation"] = doc["ablation"]
        key["grid"] = {k: doc["metrics"][k]
                       for k in ("bounds", "count", "grid_mode", "grid_seed", "sigma_eval")}
    text = json.dumps([key, seed, name], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _train_cfg(base: TrainConfig, seed: int, tag: str) -> TrainConfig:
    return replace(base, seed=derive_seed(seed, tag) % (2**32))


def fit_score(cfg: ExperimentConfig, seed: int, dataset: LabeledDataset, name: str = "score",
              store: RunStore | None = None) -> tuple[ModelParams, LossTrace | None]:
    store = store or RunStore()
    tcfg = _train_cfg(cfg.train.score, seed, name)
    spec = MlpSpec.score_model(dataset.dim, cfg.model.hidden, seed=tcfg.seed)
    digest = _model_digest(cfg, seed, name)
    cached = store.load(seed, name, digest, spec)
    if cached is not None:
        return cached, None
    t0 = time.perf_counter()
    params, trace = train_score_model(dataset, cfg.schedule, tcfg, cfg.loss_weights, spec)
    params.meta["config_digest"] = digest
    log.info("seed %d: trained %s in %.0fs", seed, name, time.perf_counter() - t0)
    store.save(seed, name, params, trace)
    return params, trace


def fit_classifier(cfg: ExperimentConfig, seed: int, dataset: LabeledDataset, kind: str,
                   score: ModelParams | None, store: RunStore | None = None,
                   recorder: AblationRecorder | None = None):
    """Train (or load) one classifier; returns (params, loss trace, ablation trace)."""
    store = store or RunStore()
    name = f"classifier_{kind}"
    tcfg = _train_cfg(cfg.train.classifier, seed, name)
    spec = MlpSpec.classifier(dataset.dim, dataset.class_count, cfg.model.hidden, seed=tcfg.seed)
    digest = _model_digest(cfg, seed, name)
    cached = store.load(seed, name, digest, spec)
    if cached is not None:
        return cached, None, store.load_ablation(seed, name)
    t0 = time.perf_counter()
    params, trace = train_classifier(
        dataset, score, cfg.schedule, tcfg, cfg.loss_weights, kind, spec,
        callback=recorder, callback_every=cfg.ablation.eval_every if recorder else 0,
    )
    params.meta["config_digest"] = digest
    log.info("seed %d: trained %s in %.0fs", seed, name, time.perf_counter() - t0)
    abl = recorder.trace if recorder is not None else None
    store.save(seed, name, params, trace, abl)
    return params, trace, abl


def make_recorder(cfg: ExperimentConfig, dataset: LabeledDataset) -> AblationRecorder:
    oracle = ParzenOracle(dataset, cfg.metrics.sigma_eval)
    return AblationRecorder.from_dataset(
        oracle, eval_grid(cfg), cfg.schedule, cfg.ablation.eval_set_size, cfg.ablation.eval_seed
    )


def train_seed(cfg: ExperimentConfig, seed: int, store: RunStore | None = None,
               kinds=CLASSIFIER_KINDS, class_scores: bool = True) -> SeedModels:
    dataset = build_dataset(cfg)
    score, _ = fit_score(cfg, seed, dataset, "score", store)
    per_class = []
    if class_scores:
        for c in range(dataset.class_count):
            sub = subset_by_class(dataset, c)
            per_class.append(fit_score(cfg, seed, sub, f"score_c{c}", store)[0])
    clfs, abl = {}, {}
    for kind in kinds:
        rec = make_recorder(cfg, dataset)
        params, _, trace = fit_classifier(cfg, seed, dataset, kind, score, store, rec)
        clfs[kind] = params
        if trace is not None:
            abl[kind] = trace
    return SeedModels(seed, score, per_class, clfs, abl)


# ---------------------------------------------------------------------------
# evaluation


def method_fields(method: Method, models: SeedModels, oracle: ParzenOracle, grid: np.ndarray,
                  label: int, alpha: float) -> tuple[np.ndarray, np.ndarray | None]:
    """Estimated posterior score and likelihood-score estimate on the grid."""
    guidance = GuidanceConfig(method, alpha, label)
    post = conditional_score(guidance, models.bundle(method, oracle), grid, oracle.sigma)
    if method is Method.POSTERIOR_SM:
        return post, None
    if method is Method.ORACLE:
        return post, oracle.likelihood_score(grid, label)
    return post, post - score_estimate(models.score, grid, oracle.sigma)


def field_errors(cfg: ExperimentConfig, models: SeedModels, oracle: ParzenOracle,
                 grid: np.ndarray, methods=TABLE_METHODS) -> dict:
    out = {}
    classes = range(oracle.dataset.class_count)
    for method in methods:
        dp, dl = [], []
        for c in classes:
            post, lik = method_fields(method, models, oracle, grid, c, cfg.guidance.alpha)
            dp.append(score_error_expectation(lambda g, y: post, oracle.posterior_score, grid, c))
            if lik is None:
                dl.append(None)
            else:
                dl.append(score_error_expectation(lambda g, y: lik, oracle.likelihood_score, grid, c))
        out[method.value] = {"dp": dp, "dl": dl}
    return out


def classifier_field_errors(models: SeedModels, oracle: ParzenOracle, grid: np.ndarray) -> dict:
    """E[D_P] / E[D_L] for every trained classifier kind (Base-style guidance)."""
    out = {}
    prior = score_estimate(models.score, grid, oracle.sigma)
    for kind, clf in models.classifiers.items():
        dp, dl = [], []
        for c in range(oracle.dataset.class_count):
            lik = likelihood_score_estimate(clf, grid, c, oracle.sigma)
            dp.append(score_error_expectation(lambda g, y: lik + prior, oracle.posterior_score, grid, c))
            dl.append(score_error_expectation(lambda g, y: lik, oracle.likelihood_score, grid, c))
        out[kind] = {"dp": dp, "dl": dl}
    return out


def write_samples_csv(points: np.ndarray, labels: np.ndarray, path) -> None:
    save_csv(LabeledDataset(points, labels, int(labels.max()) + 1), path)


def sample_quality(cfg: ExperimentConfig, models: SeedModels | None, method: Method,
                   dataset: LabeledDataset, real: LabeledDataset, seed: int,
                   out_dir: Path | None = None) -> dict:
    """Per-class precision/recall/density/coverage of PC samples against ``real``."""
    guidance = GuidanceConfig(method, cfg.guidance.alpha, 0)
    oracle = ParzenOracle(dataset, cfg.schedule.sigma_max)
    bundle = models.bundle(method, oracle) if models is not None else ModelBundle(oracle=oracle)
    per_class = {c: cfg.sampler.n_samples for c in range(dataset.class_count)}
    pts, labels = sample_classes(sampler_config(cfg, seed), guidance, bundle, per_class, dataset.dim)
    if out_dir is not None:
        write_samples_csv(pts, labels, out_dir / f"samples_{method.value}.csv")
    res = {}
    for c in range(dataset.class_count):
        res[c] = prdc(real.points[real.labels == c], pts[labels == c], cfg.metrics.k)
    return {key: [res[c][key] for c in sorted(res)] for key in ("precision", "recall", "density", "coverage")}


def evaluate_seed(cfg: ExperimentConfig, seed: int, store: RunStore | None = None,
                  with_sampling: bool = True) -> dict:
    """All Table-1 quantities for one training seed (cached as eval.json)."""
    store = store or RunStore()
    digest = hashlib.sha256(f"{cfg.digest()}:{seed}:{with_sampling}".encode()).hexdigest()
    d = store.seed_dir(seed)
    cache = d / "eval.json" if d is not None else None
    if cache is not None and cache.exists():
        doc = json.loads(cache.read_text())
        if doc.get("digest") == digest:
            return doc
    models = train_seed(cfg, seed, store)
    dataset = build_dataset(cfg)
    oracle = ParzenOracle(dataset, cfg.metrics.sigma_eval)
    grid = eval_grid(cfg)
    doc = {
        "seed": seed,
        "digest": digest,
        "sigma_eval": cfg.metrics.sigma_eval,
        "fields": field_errors(cfg, models, oracle, grid),
        "classifiers": classifier_field_errors(models, oracle, grid),
        "ablation": {k: {"iteration": t.iteration, "score_error": t.score_error,
                         "cross_entropy": t.cross_entropy} for k, t in models.ablation.items()},
    }
    if with_sampling:
        real = heldout_dataset(cfg)
        doc["sampling"] = {}
        for method in TABLE_METHODS:
            if method is Method.ORACLE:
                continue
            t0 = time.perf_counter()
            doc["sampling"][method.value] = sample_quality(cfg, models, method, dataset, real, seed, d)
            log.info("seed %d: sampled %s in %.0fs", seed, method.value, time.perf_counter() - t0)
    if cache is not None:
        cache.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def oracle_sampling(cfg: ExperimentConfig, store: RunStore | None = None) -> dict:
    """Oracle-guided sample quality; independent of training, so run once."""
    store = store or RunStore()
    digest = hashlib.sha256(
        cfg.digest("dataset", "schedule", "sampler", "metrics").encode() + str(cfg.seed).encode()
    ).hexdigest()
    path = store.root / "oracle_sampling.json" if store.root is not None else None
    if path is not None and path.exists():
        doc = json.loads(path.read_text())
        if doc.get("digest") == digest:
            return doc["result"]
    dataset = build_dataset(cfg)
    res = sample_quality(cfg, None, Method.ORACLE, dataset, heldout_dataset(cfg), cfg.seed,
                         store.root)
    if path is not None:
        path.write_text(json.dumps({"digest": digest, "result": res}, indent=1, sort_keys=True))
    return res


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def summarize(per_seed: list[dict], oracle_prdc: dict | None) -> dict:
    """5-seed medians of every per-class table entry."""
    first = per_seed[0]
    out: dict = {"fields": {}, "sampling": {}, "classifiers": {}}
    for method, vals in first["fields"].items():
        out["fields"][method] = {
            key: [_median([s["fields"][method][key][c] for s in per_seed])
                  for c in range(len(vals[key]))]
            for key in ("dp", "dl")
        }
    for kind, vals in first["classifiers"].items():
        out["classifiers"][kind] = {
            key: [_median([s["classifiers"][kind][key][c] for s in per_seed])
                  for c in range(len(vals[key]))]
            for key in ("dp", "dl")
        }
    for method, vals in first.get("sampling", {}).items():
        out["sampling"][method] = {
            key: [_median([s["sampling"][method][key][c] for s in per_seed])
                  for c in range(len(vals[key]))]
            for key in vals
        }
    if oracle_prdc is not None:
        out["sampling"]["oracle"] = oracle_prdc
    return out


def run_table1(cfg: ExperimentConfig, store: RunStore | None = None, seeds=None,
               with_sampling: bool = True,
               progress: Callable[[str], None] | None = None) -> dict:
    store = store or RunStore()
    seeds = list(cfg.seeds if seeds is None else seeds)
    per_seed = []
    for s in seeds:
        t0 = time.perf_counter()
        per_seed.append(evaluate_seed(cfg, s, store, with_sampling))
        if progress:
            progress(f"seed {s} done in {time.perf_counter() - t0:.0f}s")
    oracle_prdc = oracle_sampling(cfg, store) if with_sampling else None
    return {"seeds": seeds, "per_seed": per_seed, "median": summarize(per_seed, oracle_prdc),
            "sigma_eval": cfg.metrics.sigma_eval, "profile": cfg.profile}


def ablation_summary(per_seed: list[dict]) -> dict[str, dict]:
    """Mean and 95% CI per classifier kind from per-seed ablation records."""
    out = {}
    kinds = per_seed[0]["ablation"].keys()
    for kind in kinds:
        traces = [AblationTrace(**s["ablation"][kind]) for s in per_seed]
        out[kind] = {
            "score_error": aggregate_traces(traces, "score_error"),
            "cross_entropy": aggregate_traces(traces, "cross_entropy"),
        }
    return out


def format_table1(summary: dict) -> str:
    """Plain-text rendering of the median table."""
    methods = [m.value for m in TABLE_METHODS]
    head = f"{'':>12}" + "".join(f"{m:>22}" for m in methods)
    lines = [head, f"{'class':>12}" + "".join(f"{'c1':>11}{'c2':>11}" for _ in methods)]

    def fmt(v, digits):
        return f"{'-':>11}" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:>11.{digits}f}"

    for key, label in (("dp", "E[D_P]"), ("dl", "E[D_L]")):
        row = f"{label:>12}"
        for m in methods:
            vals = summary["fields"].get(m, {}).get(key, [None, None])
            row += "".join(fmt(v, 3) for v in vals)
        lines.append(row)
    for key in ("precision", "recall", "density", "coverage"):
        row = f"{key.capitalize():>12}"
        for m in methods:
            vals = summary["sampling"].get(m, {}).get(key, [None, None])
            row += "".join(fmt(v, 2) for v in vals)
        lines.append(row)
    return "\n".join(lines)
