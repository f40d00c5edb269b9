"""Joint multi-exit training: per-exit cross-entropy plus graph penalty, Adam, warmup+cosine."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import DataError, Dataset, check_labels
from .graph_reg import SimilarityGraphs, build_graphs, exit_term
from .metrics import MetricsRow
from .multi_exit import MERGE_MODES, ExitPlan, ForwardResult, METModel
from .tensor import Parameter
from .vit import BackboneWeights, ConfigError, ViTConfig, final_norm

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 100
    warmup_epochs: int = 10
    alpha: float = 0.01
    dprime: int = 30
    seed: int = 0
    exits: list[int] | None = None          # layer index per exit; None -> last min(7, L) layers
    merge_mode: str = "residual-once"
    share_token: bool = False
    mask_cross_exit: bool = False
    post_ln_reps: bool = False

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup epochs must be fewer than training epochs")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigError(f"merge mode must be one of {MERGE_MODES}")

    def plan(self, num_layers: int) -> ExitPlan:
        if self.exits is None:
            return ExitPlan.default(num_layers, min(7, num_layers))
        return ExitPlan(tuple(self.exits), num_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam"] = {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS,
                     "weight_decay": "decoupled"}
        return d


@dataclass
class LossReport:
    ce: list[float]
    acc: list[float]
    graph_terms: list[float]       # alpha-scaled term per exit (last exit always 0)
    penalty: float
    total: float
    loss: T.Tensor | None = None


def penalty_reps(out: ForwardResult, model: METModel, post_ln: bool) -> list[T.Tensor]:
    E = len(out.reps)
    reps = [out.reps[e] for e in range(1, E)]
    if post_ln:
        reps = [final_norm(r, model.backbone) for r in reps]
    return reps


def total_loss(out: ForwardResult, labels: np.ndarray, alpha: float,
               graphs: SimilarityGraphs | None = None,
               early_reps: list[T.Tensor] | None = None) -> LossReport:
    """Sum of per-exit mean CE plus alpha * sum over early exits of the graph term.

    Graphs come from the detached last-exit logits unless supplied.
    """
    E = len(out.logits)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = out.logits[E].shape[1]
    check_labels(labels, num_classes)
    ces, accs = [], []
    loss = T.Tensor(0.0)
    for e in range(1, E + 1):
        logits = out.logits[e]
        ce = T.cross_entropy(logits, labels)
        loss = loss + ce
        ces.append(float(ce))
        accs.append(float((logits.data.argmax(axis=1) == labels).mean()))

    terms = [0.0] * E
    penalty = 0.0
    if alpha > 0 and E > 1:
        if graphs is None:
            graphs = build_graphs(T.detach(out.logits[E]).data, labels)
        if early_reps is None:
            early_reps = [out.reps[e] for e in range(1, E)]
        for e, reps in enumerate(early_reps, 1):
            term = exit_term(reps, graphs) * alpha
            terms[e - 1] = float(term)
            loss = loss + term
        penalty = float(sum(terms))
    return LossReport(ces, accs, terms, penalty, float(loss), loss)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0, then half-cosine decay to 0, per optimizer step."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: list[Parameter], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, wd: float = 0.0) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(p.name, np.zeros_like(p.data))
        v = state.v.get(p.name, np.zeros_like(p.data))
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.tensor.data = p.data - lr * (update + wd * p.data)


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for s in range(0, n, size):
        yield idx[s:s + size]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MET_THREADS", "1")))
    except ValueError:
        return 1


def _eval_batch(model: METModel, images, labels, alpha, post_ln):
    with T.no_grad():
        out = model.forward(images)
        early = penalty_reps(out, model, post_ln) if post_ln else None
        rep = total_loss(out, labels, alpha, early_reps=early)
    rep.loss = None
    return len(labels), rep


def _combine(parts: list[tuple[int, LossReport]]) -> LossReport:
    n = sum(k for k, _ in parts)
    E = len(parts[0][1].ce)

    def avg(get):
        return [sum(k * get(r)[e] for k, r in parts) / n for e in range(E)]

    ce = avg(lambda r: r.ce)
    acc = avg(lambda r: r.acc)
    terms = avg(lambda r: r.graph_terms)
    pen = sum(k * r.penalty for k, r in parts) / n
    return LossReport(ce, acc, terms, pen, sum(ce) + pen)


def evaluate(model: METModel, ds: Dataset, alpha: float = 0.0, batch_size: int = 32,
             post_ln: bool = False) -> LossReport:
    """Batch-averaged losses and accuracies; batches fan out over MET_THREADS."""
    batches = list(_batches(len(ds), batch_size))
    work = [(ds.images[b], ds.labels[b]) for b in batches]
    nthreads = _threads()
    if nthreads > 1 and len(work) > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(lambda w: _eval_batch(model, *w, alpha, post_ln), work))
    else:
        parts = [_eval_batch(model, *w, alpha, post_ln) for w in work]
    return _combine(parts)


def report_rows(epoch: int, split: str, rep: LossReport, lr: float) -> list[MetricsRow]:
    rows = [MetricsRow(epoch, split, str(e), rep.ce[e - 1], rep.acc[e - 1],
                       rep.graph_terms[e - 1], rep.total, lr)
            for e in range(1, len(rep.ce) + 1)]
    rows.append(MetricsRow(epoch, split, "all", sum(rep.ce), float(np.mean(rep.acc)),
                           rep.penalty, rep.total, lr))
    return rows


@dataclass
class TrainResult:
    model: METModel
    history: list[MetricsRow]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    steps: int


def train(config: TrainConfig, dataset: Dataset, backbone: BackboneWeights, vit: ViTConfig,
          val: Dataset | None = None, out_dir: str | None = None) -> TrainResult:
    """Train bank and heads on ``dataset``; the backbone stays frozen.

    When ``out_dir`` is given, writes ``final`` and ``best`` checkpoints and
    ``metrics.csv`` there. Best is chosen by mean validation accuracy over
    exits (training accuracy without a validation split).
    """
    from .checkpoint import save_model
    from .metrics import emit_metrics

    if len(dataset) < 1:
        raise DataError("empty training set")
    if dataset.num_classes != vit.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model {vit.num_classes}")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    model = METModel.create(vit, backbone, config.plan(vit.layers), config.dprime,
                            seed=int(seeds[0].generate_state(1)[0]),
                            merge_mode=config.merge_mode, share_token=config.share_token,
                            mask_cross_exit=config.mask_cross_exit)
    shuffle_rng = np.random.default_rng(seeds[1])
    params = model.trainable()
    opt = OptimizerState()

    n = len(dataset)
    per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * per_epoch
    warmup_steps = config.warmup_epochs * per_epoch

    history: list[MetricsRow] = []
    best_score, best_epoch, best_state = -1.0, 0, {}
    step = 0
    for epoch in range(1, config.epochs + 1):
        parts = []
        lr = 0.0
        for idx in _batches(n, config.batch_size, shuffle_rng.permutation(n)):
            lr = lr_at(step, total_steps, warmup_steps, config.lr)
            labels = dataset.labels[idx]
            out = model.forward(dataset.images[idx])
            early = penalty_reps(out, model, True) if config.post_ln_reps else None
            rep = total_loss(out, labels, config.alpha, early_reps=early)
            if not math.isfinite(rep.total):
                raise TrainingDivergence(
                    f"non-finite loss {rep.total} at step {step} (epoch {epoch})")
            grads = T.backward(rep.loss)
            adam_step(params, grads, opt, lr, config.weight_decay)
            rep.loss = None
            parts.append((len(idx), rep))
            step += 1
        train_rep = _combine(parts)
        history.extend(report_rows(epoch, "train", train_rep, lr))
        score = float(np.mean(train_rep.acc))
        if val is not None:
            val_rep = evaluate(model, val, config.alpha, config.batch_size, config.post_ln_reps)
            history.extend(report_rows(epoch, "val", val_rep, lr))
            score = float(np.mean(val_rep.acc))
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = {p.name: p.data.copy() for p in params}
        log.info("epoch %d loss %.4f acc %s", epoch, train_rep.total,
                 " ".join(f"{a:.3f}" for a in train_rep.acc))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        meta = {"train": config.to_dict(), "epoch": config.epochs}
        save_model(model, os.path.join(out_dir, "final"), meta)
        current = {p.name: p.data for p in params}
        for p in params:
            p.tensor.data = best_state[p.name]
        save_model(model, os.path.join(out_dir, "best"), dict(meta, epoch=best_epoch))
        for p in params:
            p.tensor.data = current[p.name]
        emit_metrics(history, os.path.join(out_dir, "metrics.csv"))
    return TrainResult(model, history, best_epoch, best_state, step)
