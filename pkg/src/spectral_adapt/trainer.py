"""Full-graph training loop, multi-run protocol and ablation suite."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .fingerprint import compute_fingerprint, make_projection, node_fingerprints, ProjectionMatrix
from .graph import SparseGraph, SplitAssignment, build_laplacian, make_splits, rescale_laplacian
from .metrics import EvalResult, RunAggregate, best_threshold, evaluate
from .model import (
    GraphInputs,
    ModelConfig,
    as_student,
    as_teacher,
    ema_update,
    forward,
    hypernetwork_names,
    init_params,
    make_inputs,
    teacher_forward,
    to_arrays,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    heads: int = 3
    order: int = 2
    hidden: int = 64
    lr: float = 0.01
    epochs: int = 100
    warmup: int = 5
    lambda_contrast: float = 0.1
    lambda_div: float = 0.05
    tau: float = 0.5
    momentum: float = 0.99
    runs: int = 10
    train_ratio: float = 0.4
    seed: int = 0
    fingerprint_mode: str = "exact"
    fingerprint_scope: str = "graph"
    w: int = 6
    num_probes: int = 64
    lanczos_steps: int = 40
    fixed_filter: bool = False
    single_head: bool = False
    tsc_on: bool = True
    btd_on: bool = True
    pooled: bool = False
    identical_heads: bool = False
    threshold_sweep: bool = False

    def __post_init__(self):
        if self.fingerprint_mode not in ("exact", "stochastic"):
            raise ValueError(f"fingerprint_mode must be 'exact' or 'stochastic', got {self.fingerprint_mode!r}")
        if self.fingerprint_scope not in ("node", "graph"):
            raise ValueError(f"fingerprint_scope must be 'node' or 'graph', got {self.fingerprint_scope!r}")
        for name in ("heads", "hidden", "epochs", "runs", "w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.order < 0 or self.warmup < 0:
            raise ValueError("order and warmup must be non-negative")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if not 0.0 < self.train_ratio < 1.0:
            raise ValueError("train_ratio must lie in (0, 1)")
        if self.tau <= 0 or self.lr <= 0:
            raise ValueError("tau and lr must be positive")

    @property
    def effective_heads(self) -> int:
        return 1 if self.single_head else self.heads

    def model_config(self, in_dim: int) -> ModelConfig:
        return ModelConfig(
            in_dim=in_dim,
            hidden=self.hidden,
            heads=self.effective_heads,
            order=self.order,
            fixed_filter=self.fixed_filter,
            identical_heads=self.identical_heads,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainReport:
    seed: int
    best_epoch: int
    initial_val_auc: float
    validation: EvalResult
    test: EvalResult
    final_test: EvalResult
    log: list[dict] = field(default_factory=list)
    checkpoint: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "initial_val_auc": self.initial_val_auc,
            "validation": self.validation.to_dict(),
            "test": self.test.to_dict(),
            "final_test": self.final_test.to_dict(),
        }


def prepare_inputs(graph: SparseGraph, config: TrainConfig, proj: ProjectionMatrix | None = None):
    """Laplacian, Chebyshev basis and fingerprints for a static graph."""
    if proj is None:
        proj = make_projection(graph.num_features, config.seed)
    lap = build_laplacian(graph)
    lap_r = rescale_laplacian(lap)
    if config.fingerprint_scope == "node":
        fp = node_fingerprints(graph, proj, hops=2, w=config.w)
    else:
        fp = compute_fingerprint(
            graph, proj, config.fingerprint_mode, config.w, config.seed, lap=lap,
            num_probes=config.num_probes, lanczos_steps=config.lanczos_steps,
        ).combined
    return make_inputs(lap_r, graph.features, fp, config.order), proj


def _logits(params, inputs, mcfg) -> np.ndarray:
    return forward(params, inputs, mcfg)["logits"].data


def train_once(
    graph: SparseGraph,
    splits: SplitAssignment,
    config: TrainConfig,
    seed: int,
    inputs: GraphInputs | None = None,
    proj: ProjectionMatrix | None = None,
) -> TrainReport:
    if inputs is None:
        inputs, proj = prepare_inputs(graph, config, proj)
    mcfg = config.model_config(graph.num_features)
    rng = np.random.default_rng(seed)
    student = as_student(init_params(mcfg, rng))
    teacher = as_teacher(to_arrays(student))
    frozen = set(hypernetwork_names()) if config.fixed_filter else set()
    trainable = {k: v for k, v in student.items() if k not in frozen}
    opt = ad.AdamState(lr=config.lr)

    labels = graph.labels
    train_idx, val_idx, test_idx = splits.train, splits.validation, splits.test
    weights = L.class_weights(labels[train_idx])
    use_tsc = config.tsc_on and mcfg.heads > 1

    def assess(params):
        logits = _logits(params, inputs, mcfg)
        thr = None
        if config.threshold_sweep:
            z = logits[val_idx] - logits[val_idx].max(axis=1, keepdims=True)
            probs = np.exp(z[:, 1]) / np.exp(z).sum(axis=1)
            thr = best_threshold(probs, labels[val_idx])
        return (
            evaluate(logits, labels, val_idx, "validation", thr),
            evaluate(logits, labels, test_idx, "test", thr),
        )

    initial_val, _ = assess(student)
    best = None
    log = []
    for epoch in range(config.epochs):
        with ad.Tape() as tape:
            out = forward(student, inputs, mcfg)
            class_loss = L.weighted_cross_entropy(out["logits"], labels, weights, train_idx)
            if use_tsc:
                t_heads = teacher_forward(teacher, inputs, mcfg)["heads"]
                contrast = L.tsc_loss(out["heads"], t_heads, config.tau, config.pooled)
            else:
                contrast = ad.Tensor(0.0)
            corr = L.head_correlation(out["heads"], student)
            diversity = L.barlow_objective(corr)
            parts = L.total_loss(
                class_loss,
                contrast,
                diversity if config.btd_on else diversity.detach(),
                config.lambda_contrast if use_tsc else 0.0,
                config.lambda_div if config.btd_on else 0.0,
                epoch,
                config.warmup,
            )
        if not np.isfinite(parts.total):
            raise FloatingPointError(f"non-finite loss at epoch {epoch} (seed {seed}): {parts.record(epoch)}")
        ad.backward(tape, parts.tensor)
        ad.adam_step(trainable, {k: v.grad for k, v in trainable.items() if v.grad is not None}, opt)
        ema_update(teacher, student, config.momentum)

        val_res, test_res = assess(student)
        rec = parts.record(epoch)
        rec["between_head_corr"] = L.between_head_correlation(corr.data, mcfg.heads) if mcfg.heads > 1 else 0.0
        rec["val_auc"] = val_res.auc
        log.append(rec)
        if best is None or val_res.auc > best[1].auc:
            best = (epoch, val_res, test_res, to_arrays(student), to_arrays(teacher))

    best_epoch, best_val, best_test, best_student, best_teacher = best
    checkpoint = {
        "student": best_student,
        "teacher": best_teacher,
        "projection": proj.matrix.copy() if proj is not None else None,
        "projection_seed": proj.seed if proj is not None else None,
        "config": config.to_dict(),
        "in_dim": graph.num_features,
        "seed": seed,
        "split_seed": splits.seed,
        "train_ratio": splits.train_ratio,
        "final_student": to_arrays(student),
        "final_teacher": to_arrays(teacher),
    }
    return TrainReport(
        seed=seed,
        best_epoch=best_epoch,
        initial_val_auc=initial_val.auc,
        validation=best_val,
        test=best_test,
        final_test=test_res,
        log=log,
        checkpoint=checkpoint,
    )


def run_protocol(graph: SparseGraph, config: TrainConfig, keep_reports: bool = True):
    """``config.runs`` independent runs with seeds ``seed + r`` and fresh splits.

    Returns ``(RunAggregate, reports)``.
    """
    if config.runs < 3:
        raise ValueError("the trimmed-mean protocol needs at least 3 runs")
    inputs, proj = prepare_inputs(graph, config)
    reports = []
    for r in range(config.runs):
        seed = config.seed + r
        splits = make_splits(graph, config.train_ratio, seed)
        rep = train_once(graph, splits, config, seed, inputs=inputs, proj=proj)
        logger.info("run %d seed %d: test AUC %.4f F1 %.4f", r, seed, rep.test.auc, rep.test.f1_macro)
        reports.append(rep if keep_reports else None)
    agg = RunAggregate(runs=[rep.test for rep in reports], seeds=[config.seed + r for r in range(config.runs)])
    return agg, reports


ABLATION_VARIANTS = (
    ("fixed-filter", {"fixed_filter": True, "single_head": True}),
    ("SASF", {"single_head": True}),
    ("SAMF", {"tsc_on": True, "btd_on": True}),
    ("SAMF-TSC-only", {"tsc_on": True, "btd_on": False}),
    ("SAMF-BTD-only", {"tsc_on": False, "btd_on": True}),
    ("SAMF-no-reg", {"tsc_on": False, "btd_on": False}),
)


def ablation_suite(graph: SparseGraph, base_config: TrainConfig):
    """Run every ablation variant; returns ``[(name, config, RunAggregate, reports)]``."""
    base = replace(base_config, fixed_filter=False, single_head=False, tsc_on=True, btd_on=True)
    inputs, proj = prepare_inputs(graph, base)
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        cfg = replace(base, **overrides)
        reports = []
        for r in range(cfg.runs):
            seed = cfg.seed + r
            splits = make_splits(graph, cfg.train_ratio, seed)
            reports.append(train_once(graph, splits, cfg, seed, inputs=inputs, proj=proj))
        agg = RunAggregate(runs=[rep.test for rep in reports], seeds=[cfg.seed + r for r in range(cfg.runs)])
        logger.info("%s: trimmed AUC %.4f F1 %.4f", name, agg.auc, agg.f1_macro)
        rows.append((name, cfg, agg, reports))
    return rows


def format_table(rows) -> str:
    lines = [f"{'variant':<24s} {'AUC':>8s} {'F1-mac':>8s} {'runs':>5s}"]
    lines += [agg.table(name) for name, _, agg, *_ in rows]
    return "\n".join(lines)


_META_KEYS = ("config", "in_dim", "seed", "split_seed", "train_ratio", "projection_seed")


def write_checkpoint(path, checkpoint: dict, extra_meta: dict | None = None) -> None:
    """Persist a training checkpoint (best student/teacher plus projection) as JSON."""
    groups = {
        "student": checkpoint["student"],
        "teacher": checkpoint["teacher"],
        "projection": {"matrix": checkpoint["projection"]},
    }
    meta = {k: checkpoint[k] for k in _META_KEYS}
    meta.update(extra_meta or {})
    ad.save_checkpoint(path, groups, meta)


def read_checkpoint(path) -> dict:
    groups, meta = ad.load_checkpoint(path)
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise ValueError(f"{path}: checkpoint metadata lacks {missing}")
    ckpt = dict(meta)
    ckpt["config"] = TrainConfig.from_dict(meta["config"]).to_dict()
    ckpt["student"] = groups["student"]
    ckpt["teacher"] = groups["teacher"]
    ckpt["projection"] = groups["projection"]["matrix"]
    return ckpt
