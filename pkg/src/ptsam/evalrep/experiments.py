"""Few-shot experiment matrix and prompt-count ablation sweeps.

Every (method, train_n, seed) cell is an independent job whose result is
cached as ``cells/<key>.json``; the key hashes everything that determines
the cell, so an interrupted run resumes by skipping cached cells.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import traineng as te
from ..datagen import DataError, DatasetSplit, GenSpec, Sample, generate, split
from ..peft import IE_PAIRS, AdapterConfig, Mode, apply_adapter, count_trainable
from ..samarch import ModelConfig, build_model, checkpoint
from .metrics import evaluate

log = logging.getLogger(__name__)

SUMMARY_HEADER = ("dataset", "shift", "method", "train_n", "seed", "dice")
ABLATION_HEADER = ("kind", "param", "value", "seed", "dice", "std")
ABLATION_VALUES = (0, 1, 2, 4, 8, 16, 32)


@dataclass
class CellResult:
    method: str
    train_n: int
    seed: int
    dice: float | None
    per_image: list[float] = field(default_factory=list)
    error: str | None = None
    wall_clock: float = 0.0
    label: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CellResult":
        return cls(**json.loads(text))


@dataclass
class MatrixConfig:
    methods: Sequence[AdapterConfig]
    train_sizes: Sequence[int] = (16, 32, 64)
    seeds: Sequence[int] = (0, 1, 2)
    corpus: GenSpec = field(default_factory=GenSpec)
    corpus_seed: int = 0
    dataset: str = "synthetic"
    train: te.TrainConfig = field(default_factory=te.TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    base_checkpoint: str | None = None

    @property
    def shift_label(self) -> str:
        return "+".join(self.corpus.shift) if self.corpus.shift else "none"


@dataclass
class _Job:
    key: str
    label: str
    model_cfg: ModelConfig
    base_checkpoint: str | None
    adapter: AdapterConfig
    train_cfg: te.TrainConfig
    train: list[Sample]
    test: list[Sample]
    train_n: int
    seed: int


def _file_digest(path: str | None) -> str:
    if path is None:
        return "random-init"
    payload = Path(str(path) + checkpoint.PAYLOAD_SUFFIX)
    return hashlib.sha256(payload.read_bytes()).hexdigest()


def corpus_digest(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    return h.hexdigest()


def cell_key(model_cfg: ModelConfig, base_digest: str, adapter: AdapterConfig, train_cfg: te.TrainConfig,
             corpus_id: str, corpus_seed: int, train_n: int, seed: int) -> str:
    blob = json.dumps(
        {
            "model": model_cfg.to_dict(),
            "base": base_digest,
            "adapter": adapter.to_text(),
            "train": train_cfg.to_dict(),
            "corpus": corpus_id,
            "corpus_seed": corpus_seed,
            "train_n": train_n,
            "seed": seed,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def run_cell(job: _Job) -> CellResult:
    """Train one adapter from the base weights and score it on the test split."""
    start = time.perf_counter()
    res = CellResult(method=job.adapter.mode.value, train_n=job.train_n, seed=job.seed, dice=None, label=job.label)
    try:
        model = build_model(job.model_cfg, seed=0)
        if job.base_checkpoint is not None:
            checkpoint.load(model.reg, job.base_checkpoint)
        apply_adapter(model, job.adapter, seed=job.seed)
        if count_trainable(model) > 0:
            te.train(model, job.adapter, DatasetSplit(job.train, [], 0, job.seed), job.train_cfg, eval_final=False)
        scores = evaluate(model, job.test)
        res.dice = scores.mean
        res.per_image = [float(v) for v in scores.per_image]
    except (te.TrainingError, DataError, FloatingPointError, ValueError) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        log.warning("cell %s n=%d seed=%d failed: %s", res.method, job.train_n, job.seed, res.error)
    res.wall_clock = time.perf_counter() - start
    return res


def _run_jobs(jobs: list[_Job], out_dir: Path, n_workers: int) -> list[CellResult]:
    cells = out_dir / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    results: dict[str, CellResult] = {}
    todo = []
    for job in jobs:
        path = cells / f"{job.key}.json"
        if path.exists():
            results[job.key] = CellResult.from_json(path.read_text())
        else:
            todo.append(job)
    log.info("%d cells cached, %d to run", len(jobs) - len(todo), len(todo))

    def store(job, res):
        tmp = cells / f"{job.key}.json.tmp"
        tmp.write_text(res.to_json())
        tmp.replace(cells / f"{job.key}.json")
        results[job.key] = res

    if n_workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for job, res in zip(todo, pool.map(run_cell, todo)):
                store(job, res)
    else:
        for job in todo:
            store(job, run_cell(job))
    return [results[j.key] for j in jobs]


def load_corpus(spec: GenSpec, seed: int) -> list[Sample]:
    return generate(spec, seed)


def run_matrix(cfg: MatrixConfig, out_dir: str | Path, jobs: int = 1, corpus: list[Sample] | None = None) -> list[CellResult]:
    """Train and evaluate every (method, train_n, seed) cell and write the
    summary CSV, the rendered table and the derived-view CSV to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg.corpus, cfg.corpus_seed) if corpus is None else corpus
    digest = _file_digest(cfg.base_checkpoint)
    cid = corpus_digest(corpus)
    job_list = []
    for adapter in cfg.methods:
        adapter.validate()
        for n in cfg.train_sizes:
            for seed in cfg.seeds:
                data = split(corpus, n, seed=seed, corpus_seed=cfg.corpus_seed)
                tcfg = dataclasses.replace(cfg.train, seed=seed)
                key = cell_key(cfg.model, digest, adapter, tcfg, cid, cfg.corpus_seed, n, seed)
                job_list.append(_Job(key, adapter.mode.value, cfg.model, cfg.base_checkpoint, adapter, tcfg,
                                     data.train, data.test, n, seed))
    results = _run_jobs(job_list, out_dir, jobs)
    (out_dir / "summary.csv").write_text(summary_csv(results, cfg.dataset, cfg.shift_label))
    (out_dir / "table.txt").write_text(render_table(results, cfg.dataset, cfg.shift_label))
    (out_dir / "derived.csv").write_text(derived_csv(results))
    return results


# ---------------------------------------------------------------- reporting


def _fmt(v: float | None) -> str:
    return "nan" if v is None else f"{v:.6f}"


def summary_csv(results: Sequence[CellResult], dataset: str, shift: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in results:
        w.writerow((dataset, shift, r.method, r.train_n, r.seed, _fmt(r.dice)))
    return buf.getvalue()


def cell_stats(results: Sequence[CellResult]) -> dict[tuple[str, int], tuple[float, float, int]]:
    """(method, train_n) -> (mean, std, n_ok) over seed-level test Dice."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in results:
        groups.setdefault((r.method, r.train_n), [])
        if r.dice is not None:
            groups[(r.method, r.train_n)].append(r.dice)
    out = {}
    for k, vals in groups.items():
        if vals:
            out[k] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
        else:
            out[k] = (math.nan, math.nan, 0)
    return out


def derived_views(results: Sequence[CellResult]) -> list[tuple[str, str, int, float]]:
    """IE-tuning gain (tuned minus frozen encoder) and 64-vs-16 degradation,
    both in Dice fraction, as (view, label, train_n, value) rows."""
    stats = cell_stats(results)
    methods = list(dict.fromkeys(r.method for r in results))
    sizes = sorted({r.train_n for r in results})
    rows = []
    for tuned, frozen in IE_PAIRS.items():
        if tuned.value in methods and frozen.value in methods:
            for n in sizes:
                a, b = stats.get((tuned.value, n)), stats.get((frozen.value, n))
                if a and b:
                    rows.append(("ie_gain", f"{tuned.value}-{frozen.value}", n, a[0] - b[0]))
    if 16 in sizes and 64 in sizes:
        for m in methods:
            lo, hi = stats.get((m, 16)), stats.get((m, 64))
            if lo and hi:
                rows.append(("degradation_64_to_16", m, 16, hi[0] - lo[0]))
    return rows


def derived_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("view", "label", "train_n", "value"))
    for view, label, n, v in derived_views(results):
        w.writerow((view, label, n, f"{v:.6f}"))
    return buf.getvalue()


def render_table(results: Sequence[CellResult], dataset: str, shift: str) -> str:
    """Plain-text table: one row per method, one column per training-set
    size, entries mean +- std of test Dice in percent over seeds."""
    stats = cell_stats(results)
    methods = list(dict.fromkeys(r.method for r in results))
    sizes = sorted({r.train_n for r in results})
    head = ["method"] + [f"n={n}" for n in sizes]
    body = []
    for m in methods:
        row = [m]
        for n in sizes:
            mean, std, k = stats.get((m, n), (math.nan, math.nan, 0))
            row.append("failed" if k == 0 else f"{100 * mean:.1f} +- {100 * std:.1f}")
        body.append(row)
    lines = [f"dataset: {dataset}  shift: {shift}", ""]
    lines += _grid(head, body)
    views = derived_views(results)
    gains = [v for v in views if v[0] == "ie_gain"]
    if gains:
        lines += ["", "IE tuning gain (Dice points, tuned minus frozen encoder)"]
        labels = list(dict.fromkeys(v[1] for v in gains))
        grid = [[lab] + [next((f"{100 * v[3]:+.1f}" for v in gains if v[1] == lab and v[2] == n), "-") for n in sizes]
                for lab in labels]
        lines += _grid(["pair"] + [f"n={n}" for n in sizes], grid)
    drops = [v for v in views if v[0] == "degradation_64_to_16"]
    if drops:
        lines += ["", "Degradation from 64 to 16 images (Dice points)"]
        lines += _grid(["method", "drop"], [[v[1], f"{100 * v[3]:.1f}"] for v in drops])
    errors = [r for r in results if r.error]
    if errors:
        lines += ["", "failed cells:"] + [f"  {r.method} n={r.train_n} seed={r.seed}: {r.error}" for r in errors]
    return "\n".join(lines) + "\n"


def _grid(head: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]


# ---------------------------------------------------------------- ablation


def sweep_adapter(param: str, value: int) -> AdapterConfig:
    """n_md sweep keeps the encoder frozen; n_ie sweep fixes eight decoder
    prompts, with n_ie = 0 meaning decoder prompts only."""
    if param == "n_md":
        return AdapterConfig(mode=Mode.PT_MD, n_md=value)
    if param == "n_ie":
        if value == 0:
            return AdapterConfig(mode=Mode.PT_MD, n_md=8)
        return AdapterConfig(mode=Mode.PT_MD_IE, n_md=8, n_ie=value)
    raise ValueError(f"ablation parameter must be n_md or n_ie, got {param!r}")


def ablation_sweep(
    param: str,
    out_dir: str | Path,
    values: Sequence[int] = ABLATION_VALUES,
    seeds: Sequence[int] = (0, 1, 2),
    train_n: int = 16,
    corpus: GenSpec | None = None,
    corpus_seed: int = 0,
    train: te.TrainConfig | None = None,
    model: ModelConfig | None = None,
    base_checkpoint: str | None = None,
    jobs: int = 1,
    samples: list[Sample] | None = None,
) -> str:
    """Sweep one prompt count and write ``ablation_<param>.csv``; returns the CSV text."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = corpus or GenSpec()
    train = train or te.TrainConfig()
    model = model or ModelConfig()
    samples = load_corpus(corpus, corpus_seed) if samples is None else samples
    digest = _file_digest(base_checkpoint)
    cid = corpus_digest(samples)
    job_list = []
    for v in values:
        adapter = sweep_adapter(param, int(v)).validate()
        for seed in seeds:
            data = split(samples, train_n, seed=seed, corpus_seed=corpus_seed)
            tcfg = dataclasses.replace(train, seed=seed)
            key = cell_key(model, digest, adapter, tcfg, cid, corpus_seed, train_n, seed)
            job_list.append(_Job(key, f"{param}={v}", model, base_checkpoint, adapter, tcfg, data.train, data.test, train_n, seed))
    results = _run_jobs(job_list, out_dir, jobs)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    k = 0
    for v in values:
        vals = []
        for seed in seeds:
            r = results[k]
            k += 1
            w.writerow(("seed", param, v, seed, _fmt(r.dice), ""))
            if r.dice is not None:
                vals.append(r.dice)
        mean = _fmt(float(np.mean(vals))) if vals else "nan"
        std = _fmt(float(np.std(vals))) if vals else "nan"
        w.writerow(("aggregate", param, v, "all", mean, std))
    text = buf.getvalue()
    (out_dir / f"ablation_{param}.csv").write_text(text)
    return text
