"""Experiment driver: multitask pretraining, meta-training, one-shot evaluation,
the fine-tune learning-rate sweep and table emission.

All training entry points take in-memory task lists so tests and the
acceptance suite can run without touching disk; the CLI wraps them with
manifest loading and output files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import yaml

from . import metalearn as ml
from .metalearn import MetaConfig, NonFiniteLoss, separation_loss
from .objective import permuted_si_snri
from .tasnet import ModelConfig, ModelParams, Partition, forward, init_params, load_checkpoint, save_checkpoint
from .taskgen import (
    SpeakerPool,
    SeparationTask,
    generate_tasks,
    read_manifest,
    synth_noise,
    synth_speakers,
    write_manifest,
)

log = logging.getLogger(__name__)

MODES = ("pretrain", "meta_train", "adapt_eval", "sweep_lr", "make_tasks")
ALGOS = ("multitask", "maml", "anil_s", "anil_c")
REGIMES = ("m", "a_s", "a_c")
ALPHA_GRID = (1e-6, 5e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2)
ALGO_PARTITION = {"maml": Partition.WHOLE_MODEL, "anil_s": Partition.SEPARATOR_ONLY, "anil_c": Partition.AUTOENCODER_ONLY}
MODEL_PRESETS = {
    "default": ModelConfig,
    "toy": ModelConfig.toy,
    "tiny": ModelConfig.tiny,
    "full": ModelConfig.full_size,
}

# published SI-SNRi (dB) keyed by (method, pretrain tag, finetune regime)
PUBLISHED_COLUMNS = ("libri", "vctk", "libri_n", "vctk_n")
PUBLISHED_RESULTS = {
    ("multitask", "best", "-"): (8.97, 5.32, 7.00, 4.35),
    ("multitask", "best", "m"): (8.80, 4.90, 6.88, 3.98),
    ("multitask", "best", "a_s"): (9.06, 5.51, 7.54, 4.57),
    ("multitask", "best", "a_c"): (8.99, 5.12, 7.47, 4.56),
    ("multitask", "half", "-"): (8.35, 5.08, 6.37, 4.28),
    ("multitask", "half", "m"): (8.53, 5.16, 6.56, 4.39),
    ("maml", "best", "m"): (9.84, 7.76, 7.56, 5.99),
    ("maml", "half", "m"): (9.55, 7.94, 7.59, 6.38),
    ("maml", "-", "m"): (9.38, 8.62, 7.54, 7.18),
    ("anil_s", "best", "a_s"): (9.67, 7.92, 7.64, 6.17),
    ("anil_s", "-", "a_s"): (9.48, 7.57, 7.53, 6.16),
    ("anil_c", "best", "a_c"): (8.89, 6.52, 7.03, 5.33),
}


def published_value(method: str, pretrain: str, finetune: str, column: str) -> float | None:
    row = PUBLISHED_RESULTS.get((method, pretrain, finetune))
    if row is None or column not in PUBLISHED_COLUMNS:
        return None
    return row[PUBLISHED_COLUMNS.index(column)]


@dataclass
class ExperimentConfig:
    """One run of the harness; mirrors the CLI flags and the structured config file."""

    mode: str = "adapt_eval"
    algo: str = "multitask"
    finetune_regime: str = "m"
    alpha: float = 0.01
    beta: float = 1e-4
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    model: str = "toy"
    meta_grad_mode: str = ml.FIRST_ORDER
    half_fraction: float = 0.5
    train_manifest: str | None = None
    dev_manifest: str | None = None
    test_manifests: list[str] = field(default_factory=list)
    checkpoint: str | None = None
    out_dir: str = "runs"
    noise: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.finetune_regime not in REGIMES + ("none",):
            raise ValueError(f"finetune_regime must be one of {REGIMES + ('none',)}, got {self.finetune_regime!r}")
        if self.model not in MODEL_PRESETS:
            raise ValueError(f"model must be one of {sorted(MODEL_PRESETS)}, got {self.model!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("epochs must be >= 0, batch_size and workers >= 1")
        if isinstance(self.test_manifests, str):
            self.test_manifests = [self.test_manifests]

    @property
    def meta_partition(self) -> Partition:
        """Partition adapted in the inner loop; fixed by the algorithm."""
        if self.algo == "multitask":
            raise ValueError("multitask has no inner loop")
        return ALGO_PARTITION[self.algo]

    def model_config(self) -> ModelConfig:
        return MODEL_PRESETS[self.model]()

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            alpha=self.alpha,
            beta=self.beta,
            batch_size=self.batch_size,
            partition=self.meta_partition,
            meta_grad_mode=self.meta_grad_mode,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        # YAML is a superset of JSON, so one loader covers both
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)


# loss CSV rows are (epoch, split, loss)


def write_loss_csv(rows: Sequence[tuple[int, str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss"])
        for epoch, split, loss in rows:
            w.writerow([epoch, split, repr(float(loss))])


def mean_loss(params: ModelParams, mixtures: Sequence, chunk: int = 16) -> float:
    """Mean uPIT loss over mixtures, evaluated without building a tape."""
    total = 0.0
    for i in range(0, len(mixtures), chunk):
        part = mixtures[i : i + chunk]
        total += separation_loss(params, part).item() * len(part)
    return total / len(mixtures)


def pooled_mixtures(tasks: Iterable[SeparationTask]) -> list:
    return [m for t in tasks for m in t.support + t.query]


@dataclass
class PretrainResult:
    best: ModelParams
    half: ModelParams
    last: ModelParams
    history: list[tuple[int, str, float]]
    best_epoch: int
    initial_train_loss: float
    final_train_loss: float


def run_pretrain(
    cfg: ExperimentConfig,
    train_tasks: Sequence[SeparationTask],
    dev_tasks: Sequence[SeparationTask] = (),
    init: ModelParams | None = None,
) -> PretrainResult:
    """Multitask training over the pooled mixtures of every training task.

    Epoch 0 in the history is the initialization. ``best`` is selected by dev
    loss when dev tasks are given, else by training loss; ``half`` is the model
    after ``round(half_fraction * epochs)`` epochs.
    """
    params = init if init is not None else init_params(cfg.model_config(), cfg.seed)
    pooled = pooled_mixtures(train_tasks)
    if not pooled:
        raise ValueError("no training mixtures")
    dev = pooled_mixtures(dev_tasks)
    rng = np.random.default_rng(cfg.seed)
    opt = ml.Adam(cfg.lr)
    half_epoch = int(round(cfg.half_fraction * cfg.epochs))

    initial = mean_loss(params, pooled)
    history = [(0, "train", initial)]
    select = initial
    if dev:
        select = mean_loss(params, dev)
        history.append((0, "dev", select))
    best, best_epoch, half = params, 0, params
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pooled))
        losses = []
        for step, i in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [pooled[j] for j in order[i : i + cfg.batch_size]]
            try:
                params, value = ml.multitask_step(params, batch, cfg.lr, optimizer=opt)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"pretrain epoch {epoch} step {step}: {exc}") from None
            losses.append(value)
        train_loss = float(np.mean(losses))
        history.append((epoch, "train", train_loss))
        score = train_loss
        if dev:
            score = mean_loss(params, dev)
            history.append((epoch, "dev", score))
        log.info("pretrain epoch %d train %.3f select %.3f", epoch, train_loss, score)
        if score < select:
            best, best_epoch, select = params, epoch, score
        if epoch == half_epoch:
            half = params
    final = mean_loss(params, pooled) if cfg.epochs else initial
    return PretrainResult(best, half, params, history, best_epoch, initial, final)


@dataclass
class MetaTrainResult:
    best: ModelParams
    last: ModelParams
    history: list[tuple[int, str, float]]
    best_epoch: int


def _check_frozen(params: ModelParams, task: SeparationTask, mcfg: MetaConfig) -> None:
    adapted = ml.inner_adapt(params, task.support, mcfg).params
    frozen = [k for k in params if k not in set(ml.partition_tensors(params, mcfg.partition))]
    if not adapted.identical(params, frozen):
        raise AssertionError(f"inner loop moved tensors outside partition {mcfg.partition.value}")


def run_meta_train(
    cfg: ExperimentConfig,
    train_tasks: Sequence[SeparationTask],
    dev_tasks: Sequence[SeparationTask] = (),
    init: ModelParams | None = None,
    loss_fn=separation_loss,
) -> MetaTrainResult:
    """Repeated meta steps over shuffled task batches, selected by dev meta-loss.

    Losses in the history are per task (meta-loss divided by the number of
    tasks). Selection only considers meta-trained epochs, so ``best`` is the
    initialization only when ``epochs`` is 0.
    """
    if not train_tasks:
        raise ValueError("no training tasks")
    mcfg = cfg.meta_config()
    params = init if init is not None else init_params(cfg.model_config(), cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    history: list[tuple[int, str, float]] = []
    if dev_tasks:
        history.append((0, "dev", ml.meta_loss(params, dev_tasks, mcfg, loss_fn)[0] / len(dev_tasks)))
    best, best_epoch, select = params, 0, math.inf
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_tasks))
        total = 0.0
        for step, i in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_tasks[j] for j in order[i : i + cfg.batch_size]]
            if step == 0 and mcfg.partition is not Partition.WHOLE_MODEL and loss_fn is separation_loss:
                _check_frozen(params, batch[0], mcfg)
            try:
                params, value = ml.meta_step(params, batch, mcfg, loss_fn)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"meta-train epoch {epoch} step {step}: {exc}") from None
            total += value
        history.append((epoch, "train", total / len(train_tasks)))
        score = history[-1][2]
        if dev_tasks:
            score = ml.meta_loss(params, dev_tasks, mcfg, loss_fn)[0] / len(dev_tasks)
            history.append((epoch, "dev", score))
        log.info("meta epoch %d train %.3f select %.3f", epoch, history[-2 if dev_tasks else -1][2], score)
        if score < select:
            best, best_epoch, select = params, epoch, score
    return MetaTrainResult(best, params, history, best_epoch)


# evaluation


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    pre: float
    post: float
    regime: str
    alpha: float

    @property
    def delta(self) -> float:
        return self.post - self.pre


@dataclass
class AdaptationReport:
    records: list[TaskRecord]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def mean_pre(self) -> float:
        return float(np.mean([r.pre for r in self.records]))

    @property
    def mean_post(self) -> float:
        return float(np.mean([r.post for r in self.records]))

    @property
    def std_post(self) -> float:
        return float(np.std([r.post for r in self.records]))

    @property
    def mean_delta(self) -> float:
        return float(np.mean([r.delta for r in self.records]))

    def summary(self) -> dict:
        return {
            "tasks": len(self.records),
            "mean_pre": self.mean_pre,
            "mean_post": self.mean_post,
            "std_post": self.std_post,
            "mean_delta": self.mean_delta,
            **self.meta,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_id", "pre", "post", "regime", "alpha"])
        for r in self.records:
            w.writerow([r.task_id, repr(r.pre), repr(r.post), r.regime, repr(r.alpha)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: Mapping | None = None) -> "AdaptationReport":
        rows = csv.DictReader(io.StringIO(text))
        records = [
            TaskRecord(r["task_id"], float(r["pre"]), float(r["post"]), r["regime"], float(r["alpha"])) for r in rows
        ]
        return cls(records, dict(meta or {}))


def query_score(params: ModelParams, task: SeparationTask) -> float:
    """Mean over query mixtures of the source-averaged SI-SNRi after uPIT alignment."""
    lengths = {len(m.mixture) for m in task.query}
    if len(lengths) == 1:
        estimates = forward(params, np.stack([m.mixture for m in task.query])).data
    else:
        estimates = [forward(params, m.mixture).data for m in task.query]
    return float(np.mean([permuted_si_snri(e, m.references, m.mixture) for e, m in zip(estimates, task.query)]))


def _adapt_one(params, task, regime, alpha, pre=None) -> TaskRecord:
    if pre is None:
        pre = query_score(params, task)
    if regime == "none":
        return TaskRecord(task.task_id, pre, pre, regime, alpha)
    adapted = ml.finetune(params, task.support, MetaConfig(alpha=alpha, partition=regime))
    return TaskRecord(task.task_id, pre, query_score(adapted, task), regime, alpha)


def _ordered_map(fn: Callable, items: Sequence, workers: int) -> list:
    # every task clones from the same immutable checkpoint, so threads share nothing mutable;
    # results come back in input order for a deterministic reduction
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_adapt_eval(
    params: ModelParams,
    tasks: Sequence[SeparationTask],
    regime: str = "m",
    alpha: float = 0.01,
    workers: int = 1,
    meta: Mapping | None = None,
    pre_scores: Mapping[str, float] | None = None,
) -> AdaptationReport:
    """One-shot adapt on each task's support mixture, score its query set before and after.

    Regime ``none`` skips adaptation and reports post equal to pre.
    """
    if regime not in REGIMES + ("none",):
        raise ValueError(f"unknown regime {regime!r}")
    for t in tasks:
        if len(t.support) != 1:
            raise ValueError(f"task {t.task_id} is not one-shot: {len(t.support)} support mixtures")
    pre_scores = pre_scores or {}
    records = _ordered_map(lambda t: _adapt_one(params, t, regime, alpha, pre_scores.get(t.task_id)), tasks, workers)
    return AdaptationReport(records, {"regime": regime, "alpha": alpha, **(meta or {})})


@dataclass
class SweepResult:
    rows: list[tuple[str, float, float, float]]
    reports: dict[tuple[str, float], AdaptationReport]
    pre: dict[str, float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["regime", "alpha", "mean_sisnri", "std"])
        for regime, alpha, mean, std in self.rows:
            w.writerow([regime, repr(alpha), repr(mean), repr(std)])
        return buf.getvalue()


def run_lr_sweep(
    params: ModelParams,
    tasks: Sequence[SeparationTask],
    regimes: Sequence[str] = REGIMES,
    alphas: Sequence[float] = ALPHA_GRID,
    workers: int = 1,
) -> SweepResult:
    """Post-adaptation mean SI-SNRi for every (regime, alpha) pair."""
    # pre scores do not depend on the regime or alpha, so compute them once
    pre = dict(zip([t.task_id for t in tasks], _ordered_map(lambda t: query_score(params, t), tasks, workers)))
    rows, reports = [], {}
    for regime in regimes:
        for alpha in alphas:
            rep = run_adapt_eval(params, tasks, regime, alpha, workers, pre_scores=pre)
            reports[(regime, alpha)] = rep
            rows.append((regime, alpha, rep.mean_post, rep.std_post))
    return SweepResult(rows, reports, pre)


# report tables


@dataclass
class TableRow:
    method: str
    pretrain: str
    finetune: str
    values: dict[str, float]

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.method, self.pretrain, self.finetune)


def rows_from_reports(reports: Sequence[AdaptationReport]) -> list[TableRow]:
    """Group reports into table rows keyed by (method, pretrain, finetune); one column per manifest."""
    rows: dict[tuple, TableRow] = {}
    for r in reports:
        finetune = r.meta.get("regime", "-")
        finetune = "-" if finetune == "none" else finetune
        key = (r.meta.get("method", "?"), r.meta.get("pretrain", "-"), finetune)
        row = rows.setdefault(key, TableRow(*key, {}))
        row.values[r.meta.get("column", "test")] = r.mean_post
    return list(rows.values())


def emit_report(
    reports: Sequence[AdaptationReport | TableRow], published_column: str | None = None
) -> tuple[str, str, str]:
    """Render rows as (plain-text table, CSV, JSON).

    With ``published_column`` set, a static ``published:<column>`` column carries the
    published value for matching rows (blank otherwise).
    """
    if not reports:
        raise ValueError("need at least one report")
    rows = [r for r in reports if isinstance(r, TableRow)]
    rows += rows_from_reports([r for r in reports if isinstance(r, AdaptationReport)])
    columns: list[str] = []
    for row in rows:
        columns += [c for c in row.values if c not in columns]
    header = ["method", "p.t.", "f.t.", *columns]
    if published_column:
        header.append(f"published:{published_column}")

    def cells(row: TableRow) -> list[str]:
        out = [row.method, row.pretrain, row.finetune]
        out += [f"{row.values[c]:.2f}" if c in row.values else "" for c in columns]
        if published_column:
            ref = published_value(row.method, row.pretrain, row.finetune, published_column)
            out.append("" if ref is None else f"{ref:.2f}")
        return out

    table = [header] + [cells(r) for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in table) + "\n"

    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table)
    payload = [
        {"method": r.method, "pretrain": r.pretrain, "finetune": r.finetune, "values": {c: round(v, 2) for c, v in r.values.items()}}
        for r in rows
    ]
    if published_column:
        for entry, r in zip(payload, rows):
            entry["published"] = {published_column: published_value(r.method, r.pretrain, r.finetune, published_column)}
    return text, buf.getvalue(), json.dumps(payload, indent=2, sort_keys=True)


def parse_table(text: str) -> list[TableRow]:
    """Inverse of the text table from :func:`emit_report` (published column dropped)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split()
    columns = [c for c in header[3:] if not c.startswith("published:")]
    rows = []
    for ln in lines[1:]:
        parts = ln.split()
        method, pretrain, finetune = parts[:3]
        values = {c: float(v) for c, v in zip(columns, parts[3 : 3 + len(columns)])}
        rows.append(TableRow(method, pretrain, finetune, values))
    return rows


# desk-scale synthetic experiment


@dataclass
class DeskData:
    train: list[SeparationTask]
    dev: list[SeparationTask]
    test: list[SeparationTask]
    test_noisy: list[SeparationTask]


def make_desk_tasks(
    seed: int,
    n_train: int = 12,
    n_dev: int = 4,
    n_test: int = 6,
    duration_s: float = 1.0,
    noisy_test: bool = True,
) -> DeskData:
    """Disjoint synthetic speaker pools for training, development and test.

    Training and dev tasks are clean; the noisy test set reuses the test
    speakers with synthetic noise at 10-15 dB.
    """
    specs = synth_speakers(n_train + n_dev + n_test, seed)
    pools = [
        SpeakerPool.synthetic(specs[:n_train], duration_s=duration_s),
        SpeakerPool.synthetic(specs[n_train : n_train + n_dev], duration_s=duration_s),
        SpeakerPool.synthetic(specs[n_train + n_dev :], duration_s=duration_s),
    ]
    train = generate_tasks(pools[0], seed, role="train")
    dev = generate_tasks(pools[1], seed + 1, role="dev") if n_dev >= 2 else []
    test = generate_tasks(pools[2], seed + 2, role="test")
    noisy = []
    if noisy_test:
        length = int(round(duration_s * 8000))
        profiles = [synth_noise(kind, length, seed + k) for k, kind in enumerate(("white", "pink", "brown"))]
        noisy = generate_tasks(pools[2], seed + 2, role="test", noise=profiles)
    return DeskData(train, dev, test, noisy)


def write_desk_manifests(data: DeskData, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in ("train", "dev", "test", "test_noisy"):
        tasks = getattr(data, name)
        if tasks:
            paths[name] = write_manifest(tasks, out_dir / f"{name}.jsonl")
    return paths


@dataclass
class DeskResult:
    seed: int
    initial_train_loss: float
    final_train_loss: float
    multitask: AdaptationReport
    meta: AdaptationReport
    pretrain_best_epoch: int
    meta_best_epoch: int
    beta: float
    seconds: float
    multitask_params: ModelParams | None = None
    meta_params: ModelParams | None = None
    test_tasks: list = field(default_factory=list)

    @property
    def pretrain_gain_db(self) -> float:
        return self.initial_train_loss - self.final_train_loss

    @property
    def adaptation_gain_db(self) -> float:
        return self.meta.mean_post - self.meta.mean_pre

    @property
    def meta_advantage_db(self) -> float:
        return self.meta.mean_post - self.multitask.mean_post


def run_desk_experiment(
    seed: int,
    pretrain_epochs: int = 8,
    meta_epochs: int = 6,
    betas: Sequence[float] = (1e-4,),
    alpha: float = 0.01,
    duration_s: float = 1.0,
    workers: int = 1,
    meta_grad_mode: str = ml.HESSIAN_VECTOR,
) -> DeskResult:
    """Pretrain, meta-train from the dev-selected pretrained model, and compare both after one-shot adaptation.

    Each outer learning rate in ``betas`` gets its own meta-training run; the
    run and epoch with the lowest dev meta-loss are kept. Both models are
    fine-tuned with the same one step at ``alpha`` on the whole model.
    """
    start = time.perf_counter()
    data = make_desk_tasks(seed, duration_s=duration_s, noisy_test=False)
    pre_cfg = ExperimentConfig(mode="pretrain", algo="multitask", epochs=pretrain_epochs, seed=seed)
    pre = run_pretrain(pre_cfg, data.train, data.dev)

    chosen = None
    for beta in betas:
        mcfg = ExperimentConfig(
            mode="meta_train",
            algo="maml",
            alpha=alpha,
            beta=beta,
            epochs=meta_epochs,
            seed=seed,
            meta_grad_mode=meta_grad_mode,
        )
        res = run_meta_train(mcfg, data.train, data.dev, init=pre.best)
        dev_loss = min(loss for epoch, split, loss in res.history if split == "dev" and epoch > 0)
        if chosen is None or dev_loss < chosen[0]:
            chosen = (dev_loss, beta, res)
    _, beta, meta_res = chosen

    mt = run_adapt_eval(pre.best, data.test, "m", alpha, workers, {"method": "multitask", "pretrain": "best"})
    mm = run_adapt_eval(meta_res.best, data.test, "m", alpha, workers, {"method": "maml", "pretrain": "best"})
    return DeskResult(
        seed,
        pre.initial_train_loss,
        pre.final_train_loss,
        mt,
        mm,
        pre.best_epoch,
        meta_res.best_epoch,
        beta,
        time.perf_counter() - start,
        pre.best,
        meta_res.best,
        data.test,
    )


# file-level wrappers used by the CLI


def load_tasks(path: str | Path | None, what: str) -> list[SeparationTask]:
    if path is None:
        raise ValueError(f"{what} manifest is required")
    return read_manifest(path)


def save_run_header(cfg: ExperimentConfig, out_dir: Path, extra: Mapping | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run.json"
    path.write_text(json.dumps({"config": cfg.to_dict(), **(extra or {})}, indent=2, sort_keys=True))
    return path


def load_params(cfg: ExperimentConfig) -> ModelParams:
    if cfg.checkpoint:
        params, _ = load_checkpoint(cfg.checkpoint)
        return params
    return init_params(cfg.model_config(), cfg.seed)


def save_params(params: ModelParams, path: Path, cfg: ExperimentConfig, **meta) -> Path:
    save_checkpoint(params, path, {"config": cfg.to_dict(), **meta})
    return path
