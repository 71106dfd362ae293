"""End-to-end experiment pipeline: init -> train -> score -> search ->
retrain -> report, with each stage consuming only serialized outputs of the
previous ones so a run can restart at any stage."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .concentration import TheoremConfig, deviation_experiment, report_to_json
from .config import ExperimentConfig, save_config
from .data import DatasetStream, gaussian_blobs, load_idx, striped_textures
from .isoinit import InitSpec
from .search import (Constraint, ScoreTable, compute_scores, ranked_from_jsonl,
                     ranked_to_jsonl, search_topk)
from .supernet import (PathSample, SearchSpace, SGD, Supernet, build_supernet,
                       cosine_lr, isometry_report, train_indicators)

log = logging.getLogger("isonas")

STAGES = ("init", "train", "score", "search", "retrain", "report")


class PipelineError(RuntimeError):
    def __init__(self, stage, msg):
        super().__init__(f"[stage {stage}] {msg}")
        self.stage = stage


class DivergenceError(PipelineError):
    def __init__(self, stage, msg):
        super().__init__(stage, msg + " (hint: reduce the learning rate)")


def _init_spec(cfg: ExperimentConfig):
    return InitSpec(scheme=cfg.init.scheme,
                    gain=float(np.sqrt(cfg.init.operating_variance)),
                    seed=cfg.init.seed,
                    weight_variance=cfg.init.weight_variance)


def make_datasets(cfg: ExperimentConfig):
    d = cfg.dataset
    if d.kind == "stripes":
        train = striped_textures(d.train_size, classes=d.classes, size=d.image_size,
                                 noise=d.noise, seed=d.seed)
        test = striped_textures(d.test_size, classes=d.classes, size=d.image_size,
                                noise=d.noise, seed=d.seed + 1)
    elif d.kind == "blobs":
        train = gaussian_blobs(d.train_size, classes=d.classes, size=d.image_size,
                               separation=d.separation, seed=d.seed)
        test = gaussian_blobs(d.test_size, classes=d.classes, size=d.image_size,
                              separation=d.separation, seed=d.seed + 1)
    elif d.kind == "idx":
        images, labels = load_idx(d.image_path, d.label_path)
        cut = len(images) - d.test_size
        train = (images[:cut], labels[:cut])
        test = (images[cut:], labels[cut:])
    else:
        raise PipelineError("init", f"unknown dataset kind {d.kind!r}")
    return train, test


def _load_manifest(run_dir):
    p = Path(run_dir) / "manifest.json"
    if p.exists():
        return json.loads(p.read_text())
    return {"stages": {}}


def _save_manifest(run_dir, manifest):
    (Path(run_dir) / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _mark(run_dir, stage, started, extra=None):
    manifest = _load_manifest(run_dir)
    entry = {"status": "done", "seconds": round(time.time() - started, 3)}
    if extra:
        entry.update(extra)
    manifest["stages"][stage] = entry
    _save_manifest(run_dir, manifest)


def _restore_net(cfg, run_dir, which):
    space = SearchSpace.from_json_dict(json.loads((Path(run_dir) / "space.json").read_text()))
    net = build_supernet(space, _init_spec(cfg), seed=cfg.seed)
    arrays, _ = load_checkpoint(Path(run_dir) / which)
    restore_into(net, arrays)
    return net


def stage_init(cfg: ExperimentConfig, run_dir):
    t0 = time.time()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.resolved.json")
    space = cfg.build_space()
    (run_dir / "space.json").write_text(json.dumps(space.to_json_dict(), indent=2,
                                                   sort_keys=True) + "\n")
    net = build_supernet(space, _init_spec(cfg), seed=cfg.seed)
    save_checkpoint(run_dir / "supernet_init.ckpt", net.named_arrays(),
                    meta={"seed": cfg.seed, "stage": "init"})
    manifest = _load_manifest(run_dir)
    manifest["space_size"] = space.size()
    manifest["seed"] = cfg.seed
    _save_manifest(run_dir, manifest)
    _mark(run_dir, "init", t0, {"frozen_hash": net.frozen_hash()})
    return net


def stage_train(cfg: ExperimentConfig, run_dir):
    t0 = time.time()
    run_dir = Path(run_dir)
    net = _restore_net(cfg, run_dir, "supernet_init.ckpt")
    (train_x, train_y), _ = make_datasets(cfg)
    stream = DatasetStream(train_x, train_y, batch=cfg.train.batch, seed=cfg.seed,
                           augment_crop=cfg.dataset.augment_crop,
                           augment_flip=cfg.dataset.augment_flip)
    before = net.frozen_hash()
    train_indicators(net, stream, cfg.train.epochs, lr=cfg.train.lr,
                     momentum=cfg.train.momentum, seed=cfg.seed,
                     metrics_path=run_dir / "metrics.jsonl")
    after = net.frozen_hash()
    if before != after:
        raise PipelineError("train", "frozen weights changed during indicator training")
    save_checkpoint(run_dir / "supernet_trained.ckpt", net.named_arrays(),
                    meta={"seed": cfg.seed, "stage": "train"})
    _mark(run_dir, "train", t0, {"frozen_hash": after})
    return net


def stage_score(cfg: ExperimentConfig, run_dir):
    t0 = time.time()
    run_dir = Path(run_dir)
    net = _restore_net(cfg, run_dir, "supernet_trained.ckpt")
    table = compute_scores(net)
    (run_dir / "scores.json").write_bytes(table.canonical_bytes())
    _mark(run_dir, "score", t0)
    return table


def _load_scores(run_dir):
    d = json.loads((Path(run_dir) / "scores.json").read_text())
    return ScoreTable(scores=tuple(tuple(r) for r in d["scores"]),
                      layer_weight=tuple(d["layer_weight"]))


def stage_search(cfg: ExperimentConfig, run_dir):
    t0 = time.time()
    run_dir = Path(run_dir)
    space = SearchSpace.from_json_dict(json.loads((run_dir / "space.json").read_text()))
    table = _load_scores(run_dir)
    constraint = Constraint(max_flops=cfg.search.max_flops,
                            max_params=cfg.search.max_params)
    rng = np.random.default_rng([cfg.seed, 4242])
    ranked = search_topk(table, space, constraint, k=cfg.search.k,
                         strategy=cfg.search.strategy, rng=rng)
    ranked_to_jsonl(ranked, run_dir / "ranked.jsonl")
    _mark(run_dir, "search", t0, {"k": len(ranked)})
    return ranked


# ---------------------------------------------------------------------------
# subnet retraining


def evaluate_subnet(net: Supernet, path: PathSample, images, labels, batch=256):
    correct = 0
    for lo in range(0, len(images), batch):
        xb = images[lo:lo + batch]
        logits = net.forward(Tensor(xb), path, training=False)
        correct += int((np.argmax(logits.data, axis=1) == labels[lo:lo + batch]).sum())
    return correct / len(images)


def retrain_subnet(choices, space: SearchSpace, init: InitSpec, train_data,
                   test_data, epochs, batch=64, lr=0.05, momentum=0.9, seed=0):
    """Unfreeze everything and train the chosen subnet from its orthogonal
    initialization; returns (validation accuracy, net)."""
    path = PathSample(choices=tuple(choices))
    net = build_supernet(space, init, seed=seed)
    net.set_all_trainable()
    train_x, train_y = train_data
    stream = DatasetStream(train_x, train_y, batch=batch, seed=seed)
    tensors = net.trainable_tensors()
    opt = SGD(tensors, lr=lr, momentum=momentum)
    total = max(epochs * stream.batches_per_epoch, 1)
    step = 0
    for epoch in range(epochs):
        for xb, yb in stream.epoch(epoch):
            opt.zero_grad()
            logits = net.forward(Tensor(xb), path, training=True)
            loss = ag.cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise DivergenceError("retrain", f"loss diverged at step {step}")
            loss.backward()
            grads = {id(t): t.grad for t in tensors if t.grad is not None}
            opt.step(grads, lr=cosine_lr(lr, step, total))
            step += 1
    test_x, test_y = test_data
    acc = evaluate_subnet(net, path, test_x, test_y)
    return acc, net


def stage_retrain(cfg: ExperimentConfig, run_dir):
    t0 = time.time()
    run_dir = Path(run_dir)
    space = SearchSpace.from_json_dict(json.loads((run_dir / "space.json").read_text()))
    ranked = ranked_from_jsonl(run_dir / "ranked.jsonl")
    train_data, test_data = make_datasets(cfg)
    out_dir = run_dir / "retrained"
    out_dir.mkdir(exist_ok=True)
    results = []
    for rank, r in enumerate(ranked):
        acc, net = retrain_subnet(r.choices, space, _init_spec(cfg), train_data,
                                  test_data, cfg.retrain.epochs,
                                  batch=cfg.retrain.batch, lr=cfg.retrain.lr,
                                  momentum=cfg.retrain.momentum, seed=cfg.seed)
        save_checkpoint(out_dir / f"subnet_{rank}.ckpt", net.named_arrays(),
                        meta={"choices": list(r.choices), "accuracy": acc})
        results.append({"rank": rank, "choices": list(r.choices),
                        "score": r.score, "accuracy": acc})
        log.info("retrained rank %d %s acc=%.4f", rank, r.choices, acc)
    (run_dir / "retrain_results.json").write_text(
        json.dumps(results, indent=2, sort_keys=True) + "\n")
    _mark(run_dir, "retrain", t0, {"count": len(results)})
    return results


# ---------------------------------------------------------------------------
# reports


def emit_reports(run_dir):
    """Write plot-ready CSVs for whatever artifacts exist; skip the rest.

    Returns {"written": [...], "skipped": [...]}; an empty run dir yields an
    empty manifest and a warning, not an error.
    """
    run_dir = Path(run_dir)
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    written, skipped = [], []

    scores_p = run_dir / "scores.json"
    if scores_p.exists():
        table = _load_scores(run_dir)
        p = reports / "score_heatmap.csv"
        with open(p, "w") as fh:
            fh.write("layer,candidate,score,layer_weight\n")
            for li, row in enumerate(table.scores):
                lw = table.layer_weight[li]
                for mi, s in enumerate(row):
                    fh.write(f"{li},{mi},{s},{'' if lw is None else lw}\n")
        written.append(p.name)
    else:
        skipped.append("score_heatmap.csv (no scores.json)")

    rr_p = run_dir / "retrain_results.json"
    if rr_p.exists():
        results = json.loads(rr_p.read_text())
        p = reports / "rank_vs_accuracy.csv"
        with open(p, "w") as fh:
            fh.write("rank,score,accuracy,choices\n")
            for row in results:
                fh.write(f"{row['rank']},{row['score']},{row['accuracy']},"
                         f"\"{row['choices']}\"\n")
        written.append(p.name)
    else:
        skipped.append("rank_vs_accuracy.csv (no retrain_results.json)")

    conc_p = run_dir / "concentration.json"
    if conc_p.exists():
        d = json.loads(conc_p.read_text())
        p = reports / "concentration.csv"
        with open(p, "w") as fh:
            fh.write("N,failure_frequency,delta_bound,R,K\n")
            for nf, ph, dl in zip(d["filter_counts"], d["failure_frequency"],
                                  d["delta_bound"]):
                fh.write(f"{nf},{ph},{dl},{d['r_value']},{d['k_value']}\n")
        written.append(p.name)
    else:
        skipped.append("concentration.csv (no concentration.json)")

    iso_p = run_dir / "isometry.json"
    if iso_p.exists():
        rows = json.loads(iso_p.read_text())
        p = reports / "isometry.csv"
        with open(p, "w") as fh:
            fh.write("template,boundary,phi,phi2,trace_var,passed\n")
            for r in rows:
                fh.write(f"{r['label']},{r['boundary']},{r['phi']},{r['phi2']},"
                         f"{r['trace_var']},{r['passed']}\n")
        written.append(p.name)
    else:
        skipped.append("isometry.csv (no isometry.json)")

    for name in skipped:
        log.warning("report skipped: %s", name)
    manifest = {"written": written, "skipped": skipped}
    (reports / "report_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def stage_report(cfg: ExperimentConfig, run_dir):
    t0 = time.time()
    manifest = emit_reports(run_dir)
    _mark(run_dir, "report", t0, manifest)
    return manifest


# ---------------------------------------------------------------------------
# standalone analyses


def run_isometry_analysis(cfg: ExperimentConfig, run_dir, d=2, n=8, seed=None):
    """Candidate-template isometry report at analysis width w = d * n^2.

    The trained supernet uses zero padding; the verdicts here are computed
    under cyclic boundary conditions (the exact setting of the isometry
    condition) with the zero-padding rows reported alongside as the
    documented divergence.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    space = cfg.build_space()
    templates = []
    seen = set()
    for sl in space.layers:
        for tpl in sl.candidates:
            if tpl not in seen:
                seen.add(tpl)
                templates.append(tpl)
    spec = _init_spec(cfg)
    rows = isometry_report(templates, spec, seed=cfg.seed if seed is None else seed,
                           d=d, n=n)
    payload = [{"label": r.label, "boundary": r.boundary, "phi": r.phi,
                "phi2": r.phi2, "trace_var": r.trace_var, "passed": r.passed}
               for r in rows]
    (run_dir / "isometry.json").write_text(json.dumps(payload, indent=2,
                                                      sort_keys=True) + "\n")
    return rows


def run_theorem_verification(run_dir, seed=0, trials=1000, expectation_samples=100_000,
                             n=8, r=3, d=2, filter_counts=(8, 16, 32, 64, 128)):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = TheoremConfig(n=n, r=r, d=d, filter_counts=tuple(filter_counts),
                        trials=trials, expectation_samples=expectation_samples)
    report = deviation_experiment(cfg, np.random.default_rng(seed))
    report_to_json(report, run_dir / "concentration.json")
    report.write_csv(run_dir / "concentration.csv")
    return report


def run_pipeline(cfg: ExperimentConfig, run_dir, stages=STAGES):
    """Run the requested stages in order; halt on the first failure with a
    stage-tagged error, keeping partial artifacts for inspection."""
    handlers = {"init": stage_init, "train": stage_train, "score": stage_score,
                "search": stage_search, "retrain": stage_retrain,
                "report": stage_report}
    results = {}
    for stage in stages:
        if stage not in handlers:
            raise PipelineError(stage, "unknown stage")
        log.info("stage %s ...", stage)
        try:
            results[stage] = handlers[stage](cfg, run_dir)
        except PipelineError:
            raise
        except Exception as err:
            raise PipelineError(stage, str(err)) from err
    return results
