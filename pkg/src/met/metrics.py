from __future__ import annotations

import csv
from dataclasses import astuple, dataclass

HEADER = ["epoch", "split", "exit", "ce", "acc", "graph_term", "total_loss", "lr"]


@dataclass
class MetricsRow:
    epoch: int
    split: str
    exit: str          # "1".."E" or "all"
    ce: float
    acc: float
    graph_term: float
    total_loss: float
    lr: float


def emit_metrics(history: list[MetricsRow], path: str) -> None:
    if not history:
        raise ValueError("no metrics to write")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HEADER)
        for row in history:
            w.writerow(astuple(row))


def read_metrics(path: str) -> list[MetricsRow]:
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if r.fieldnames != HEADER:
            raise ValueError(f"unexpected metrics header {r.fieldnames}")
        return [MetricsRow(int(d["epoch"]), d["split"], d["exit"], float(d["ce"]), float(d["acc"]),
                           float(d["graph_term"]), float(d["total_loss"]), float(d["lr"]))
                for d in r]
