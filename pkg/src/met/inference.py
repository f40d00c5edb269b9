"""Anytime and budgeted early-exit inference, threshold calibration, MAC accounting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .multi_exit import ExitPlan, METModel
from .vit import ViTConfig

COMPONENTS = ("patch_embed", "attention", "ffn", "adapters", "heads")


class InfeasibleBudget(ValueError):
    pass


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostTable:
    """Cumulative multiply-accumulates per exit (1 MAC counted as 1 FLOP)."""

    macs: list[int]
    breakdown: list[dict[str, int]]

    @property
    def mega(self) -> list[float]:
        return [m / 1e6 for m in self.macs]

    @property
    def giga(self) -> list[float]:
        return [m / 1e9 for m in self.macs]

    def __getitem__(self, e: int) -> float:
        """Mega-MACs of exit ``e`` (1-based)."""
        return self.macs[e - 1] / 1e6

    def __len__(self):
        return len(self.macs)


def layer_macs(cfg: ViTConfig, tokens: int) -> tuple[int, int]:
    """(attention, ffn) MACs of one encoder layer over ``tokens`` rows."""
    d, t = cfg.dim, tokens
    attention = 3 * t * d * d + 2 * t * t * d + t * d * d
    ffn = 2 * cfg.mlp_ratio * t * d * d
    return attention, ffn


def adapter_macs(n: int, rows_down: int, rows_up: int, d: int, dprime: int) -> int:
    return rows_down * (d * dprime + dprime * dprime) + rows_up * (dprime * dprime + dprime * d)


def flops_table(cfg: ViTConfig, plan: ExitPlan, dprime: int | None = None,
                share_token: bool = False) -> CostTable:
    """Matmul-only MACs through layer psi(e) plus head e, per exit.

    Layers before an exit carry every still-live class row, so their
    attention, FFN and adapter costs include the extra tokens. With
    ``share_token`` a single class row is carried throughout.
    """
    n, d = cfg.num_patches, cfg.dim
    patch = n * cfg.patch_dim * d
    head = d * cfg.num_classes
    per_layer = []
    for k in range(1, cfg.layers + 1):
        c = 1 if share_token else max(len(plan.live_at_layer(k)), 1)
        t = n + c
        att, ff = layer_macs(cfg, t)
        ad = 0
        if dprime:
            if k == 1 and not share_token:
                ad += adapter_macs(n, n + 1, t, d, dprime)
            else:
                ad += adapter_macs(n, t, t, d, dprime)
            ad += adapter_macs(n, t, t, d, dprime)
        per_layer.append((att, ff, ad))

    macs, breakdown = [], []
    for e in range(1, plan.num_exits + 1):
        upto = per_layer[:plan.psi(e)]
        parts = {
            "patch_embed": patch,
            "attention": sum(a for a, _, _ in upto),
            "ffn": sum(f for _, f, _ in upto),
            "adapters": sum(x for _, _, x in upto),
            "heads": head,
        }
        breakdown.append(parts)
        macs.append(sum(parts.values()))
    return CostTable(macs, breakdown)


def baseline_macs(cfg: ViTConfig) -> int:
    """Plain ViT: patch embedding, L layers on n+1 tokens, one head."""
    att, ff = layer_macs(cfg, cfg.num_patches + 1)
    return cfg.num_patches * cfg.patch_dim * cfg.dim + cfg.layers * (att + ff) \
        + cfg.dim * cfg.num_classes


# ---------------------------------------------------------------------------
# confidence and static exits


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def confidence(logits) -> float | np.ndarray:
    """Maximum softmax probability of a row (or of every row)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty logit row")
    p = _softmax(z).max(axis=-1)
    return float(p) if np.ndim(p) == 0 else p


def anytime_predict(model: METModel, images: np.ndarray, e: int,
                    costs: CostTable | None = None) -> tuple[np.ndarray, float]:
    """Predict with exit ``e`` only; encoder layers past psi(e) never run."""
    if not 1 <= e <= model.plan.num_exits:
        raise IndexError(f"exit {e} outside 1..{model.plan.num_exits}")
    if costs is None:
        costs = model_costs(model)
    with T.no_grad():
        out = model.forward(images, upto_exit=e, heads="last")
    return out.logits[e].data.argmax(axis=1), costs[e]


def model_costs(model: METModel) -> CostTable:
    return flops_table(model.config, model.plan, model.bank.dprime, model.share_token)


def select_static_exit(accuracies: Sequence[float], costs, mode: str = "best-acc",
                       delta: float = 0.0) -> int:
    """Pick one exit for anytime use; returns a 1-based exit id."""
    acc = np.asarray(accuracies, dtype=np.float64)
    cost = np.asarray(costs.macs if isinstance(costs, CostTable) else costs, dtype=np.float64)
    best = acc.max()
    if mode == "best-acc":
        ok = acc >= best - 1e-12
    elif mode == "cheapest-within-delta":
        ok = acc >= best - delta - 1e-12
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    candidates = np.flatnonzero(ok)
    return int(candidates[np.argmin(cost[candidates])]) + 1


# ---------------------------------------------------------------------------
# budgeted routing


@dataclass
class ThresholdSet:
    values: np.ndarray            # tau_1 .. tau_{E-1}; exit E always accepts

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"thresholds": [float(v) for v in self.values]}


@dataclass
class RoutingResult:
    exits: np.ndarray             # 1-based exit per sample
    confidence: np.ndarray
    cost: np.ndarray              # mega-MACs per sample
    counts: np.ndarray            # samples per exit
    mean_cost: float
    predictions: np.ndarray | None = None
    accuracy: float | None = None

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def to_dict(self) -> dict:
        out = {"counts": self.counts.tolist(), "fractions": self.fractions.tolist(),
               "mean_cost_mmacs": self.mean_cost}
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        return out


def _cost_list(costs) -> np.ndarray:
    if isinstance(costs, CostTable):
        return np.asarray(costs.mega)
    return np.asarray(costs, dtype=np.float64)


def budgeted_route(conf: np.ndarray, thresholds, costs, predictions: np.ndarray | None = None,
                   labels: np.ndarray | None = None) -> RoutingResult:
    """Each sample leaves at the first exit e < E with conf >= tau_e, else at E."""
    conf = np.asarray(conf, dtype=np.float64)
    n, E = conf.shape
    tau = thresholds.values if isinstance(thresholds, ThresholdSet) else np.asarray(thresholds)
    if len(tau) != E - 1:
        raise ValueError(f"{E} exits need {E - 1} thresholds, got {len(tau)}")
    cost = _cost_list(costs)
    exits = np.full(n, E, dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    for e in range(1, E):
        take = pending & (conf[:, e - 1] >= tau[e - 1])
        exits[take] = e
        pending &= ~take
    rows = np.arange(n)
    per_cost = cost[exits - 1]
    counts = np.bincount(exits - 1, minlength=E)
    mean_cost = float(np.dot(counts / n, cost))
    pred = acc = None
    if predictions is not None:
        pred = np.asarray(predictions)[rows, exits - 1]
        if labels is not None:
            acc = float((pred == np.asarray(labels)).mean())
    return RoutingResult(exits, conf[rows, exits - 1], per_cost, counts, mean_cost, pred, acc)


@dataclass
class ConfidenceProfile:
    confidences: np.ndarray       # samples x exits, in [0, 1]
    labels: np.ndarray
    predictions: np.ndarray | None = field(default=None, repr=False)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample", "exit", "confidence", "label"])
            n, E = self.confidences.shape
            for i in range(n):
                for e in range(E):
                    w.writerow([i, e + 1, repr(float(self.confidences[i, e])), int(self.labels[i])])

    @classmethod
    def from_csv(cls, path: str) -> "ConfidenceProfile":
        with open(path, newline="") as f:
            r = csv.DictReader(f)
            if r.fieldnames != ["sample", "exit", "confidence", "label"]:
                raise ValueError(f"unexpected profile header {r.fieldnames}")
            rows = [(int(d["sample"]), int(d["exit"]), float(d["confidence"]), int(d["label"]))
                    for d in r]
        n = max(s for s, *_ in rows) + 1
        E = max(e for _, e, *_ in rows)
        conf = np.full((n, E), np.nan)
        labels = np.zeros(n, dtype=np.int64)
        for s, e, c, lab in rows:
            conf[s, e - 1] = c
            labels[s] = lab
        if np.isnan(conf).any():
            raise ValueError("profile is missing (sample, exit) rows")
        return cls(conf, labels)


def collect_profile(model: METModel, images: np.ndarray, labels: np.ndarray,
                    batch_size: int = 64) -> ConfidenceProfile:
    confs, preds = [], []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out = model.forward(images[s:s + batch_size])
            logits = [out.logits[e].data for e in range(1, model.plan.num_exits + 1)]
            confs.append(np.stack([confidence(z) for z in logits], axis=1))
            preds.append(np.stack([z.argmax(axis=1) for z in logits], axis=1))
    return ConfidenceProfile(np.concatenate(confs), np.asarray(labels), np.concatenate(preds))


def geometric_fractions(q: float, E: int) -> np.ndarray:
    f = np.array([q * (1.0 - q) ** (e - 1) for e in range(1, E)] + [(1.0 - q) ** (E - 1)])
    return f


def calibrate_thresholds(profile: ConfidenceProfile, costs, budget: float,
                         iters: int = 100) -> ThresholdSet:
    """Thresholds whose routing of ``profile`` spends at most ``budget`` mega-MACs on average.

    Exit fractions follow q(1-q)^(e-1) with the remainder at the last exit;
    q is bisected so the expected cost meets the budget, then each tau_e is
    the confidence quantile (from above) that lets the target count leave
    at exit e among the samples still in flight.
    """
    cost = _cost_list(costs)
    conf = np.asarray(profile.confidences, dtype=np.float64)
    n, E = conf.shape
    if len(cost) != E:
        raise ValueError(f"{len(cost)} costs for {E} exits")
    if budget < cost[0]:
        raise InfeasibleBudget(f"budget {budget} below the cost of exit 1 ({cost[0]})")

    def expected(q):
        return float(geometric_fractions(q, E) @ cost)

    if budget >= cost[-1]:
        q = 0.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if expected(mid) <= budget:
                hi = mid
            else:
                lo = mid
        q = hi
    cum = np.cumsum(geometric_fractions(q, E))
    targets = np.minimum(n, np.ceil(n * cum - 1e-9).astype(np.int64))

    tau = np.zeros(E - 1)
    pending = np.ones(n, dtype=bool)
    done = 0
    for e in range(1, E):
        reach = conf[pending, e - 1]
        k = int(targets[e - 1]) - done
        if k >= reach.size:
            tau[e - 1] = 0.0
        elif k <= 0:
            tau[e - 1] = np.nextafter(reach.max(), math.inf)
        else:
            tau[e - 1] = np.sort(reach)[::-1][k - 1]
        take = pending & (conf[:, e - 1] >= tau[e - 1])
        done += int(take.sum())
        pending &= ~take
    return ThresholdSet(tau)
