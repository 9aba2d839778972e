"""Classification and clustering evaluation measures.

Clustering agreement follows Vinh, Epps & Bailey (2010): NMI with the
geometric-mean normalization, AMI with the max normalization and the exact
hypergeometric expected mutual information, and the Hubert-Arabie ARI.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .pointcloud import CLASS_NAMES, NUM_CLASSES


@dataclass
class EvalPair:
    gt_class: np.ndarray
    pred_class: np.ndarray
    gt_instance: np.ndarray
    pred_instance: np.ndarray

    def __post_init__(self):
        self.gt_class = np.asarray(self.gt_class, dtype=np.int64).reshape(-1)
        self.pred_class = np.asarray(self.pred_class, dtype=np.int64).reshape(-1)
        self.gt_instance = np.asarray(self.gt_instance, dtype=np.int64).reshape(-1)
        self.pred_instance = np.asarray(self.pred_instance, dtype=np.int64).reshape(-1)
        n = len(self.gt_class)
        if not (len(self.pred_class) == len(self.gt_instance) == len(self.pred_instance) == n):
            raise ValueError("evaluation arrays differ in length")
        if n == 0:
            raise ValueError("nothing to evaluate")

    def __len__(self):
        return len(self.gt_class)

    @classmethod
    def from_map(cls, gmap) -> "EvalPair":
        n = len(gmap)
        have = (gmap.pred_class[:n] >= 0) & (gmap.instance_id[:n] >= 0)
        return cls(gmap.gt_class[:n][have], gmap.pred_class[:n][have],
                   gmap.gt_instance[:n][have], gmap.instance_id[:n][have])


def iou(ev: EvalPair):
    """Per-class TP / (TP + FP + FN); NaN where a class is in neither labeling."""
    per = np.full(NUM_CLASSES, np.nan)
    for c in range(NUM_CLASSES):
        g = ev.gt_class == c
        p = ev.pred_class == c
        union = np.count_nonzero(g | p)
        if union:
            per[c] = np.count_nonzero(g & p) / union
    return per, float(np.nanmean(per))


def point_accuracy(ev: EvalPair) -> float:
    return float(np.mean(ev.gt_class == ev.pred_class))


def object_accuracy(ev: EvalPair, iou_thresh: float = 0.5) -> float:
    """Fraction of ground-truth instances matched by some predicted cluster
    with point IoU >= ``iou_thresh`` whose majority predicted class equals
    the instance's (majority) ground-truth class."""
    table, gt_ids, pr_ids = contingency(ev.gt_instance, ev.pred_instance)
    gt_sizes = table.sum(axis=1)
    pr_sizes = table.sum(axis=0)
    gi = np.searchsorted(gt_ids, ev.gt_instance)
    pi = np.searchsorted(pr_ids, ev.pred_instance)
    gt_cls = np.zeros((len(gt_ids), NUM_CLASSES), dtype=np.int64)
    np.add.at(gt_cls, (gi, ev.gt_class), 1)
    pr_cls = np.zeros((len(pr_ids), NUM_CLASSES), dtype=np.int64)
    np.add.at(pr_cls, (pi, ev.pred_class), 1)
    gt_major = gt_cls.argmax(axis=1)
    pr_major = pr_cls.argmax(axis=1)
    union = gt_sizes[:, None] + pr_sizes[None, :] - table
    ious = table / union
    ok = (ious >= iou_thresh) & (pr_major[None, :] == gt_major[:, None])
    return float(np.count_nonzero(ok.any(axis=1)) / len(gt_ids))


def contingency(labels_true, labels_pred):
    """Contingency table n_ij with row/column label values (sorted)."""
    u, ui = np.unique(np.asarray(labels_true), return_inverse=True)
    v, vi = np.unique(np.asarray(labels_pred), return_inverse=True)
    table = np.zeros((len(u), len(v)), dtype=np.int64)
    np.add.at(table, (ui.reshape(-1), vi.reshape(-1)), 1)
    return table, u, v


@dataclass
class PairCounts:
    table: np.ndarray
    a: np.ndarray          # row marginals
    b: np.ndarray          # column marginals
    n: int
    sum_comb_nij: float
    sum_comb_a: float
    sum_comb_b: float


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def pair_counting(ev_or_true, labels_pred=None) -> PairCounts:
    if labels_pred is None:
        labels_true, labels_pred = ev_or_true.gt_instance, ev_or_true.pred_instance
    else:
        labels_true = ev_or_true
    table, _, _ = contingency(labels_true, labels_pred)
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    return PairCounts(table, a, b, int(table.sum()), float(_comb2(table).sum()),
                      float(_comb2(a).sum()), float(_comb2(b).sum()))


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _mutual_info(table, n):
    nz = table > 0
    nij = table[nz].astype(np.float64)
    a = table.sum(axis=1).astype(np.float64)
    b = table.sum(axis=0).astype(np.float64)
    rows, cols = np.nonzero(nz)
    return float((nij / n * np.log(n * nij / (a[rows] * b[cols]))).sum())


def expected_mutual_info(a, b, n) -> float:
    """Expected MI of two random partitions with marginals ``a`` and ``b``
    under the permutation (hypergeometric) model."""
    # identical marginals contribute identical terms; group them
    a_vals, a_mult = np.unique(np.asarray(a, dtype=np.int64), return_counts=True)
    b_vals, b_mult = np.unique(np.asarray(b, dtype=np.int64), return_counts=True)
    lg_n = gammaln(n + 1)
    total = 0.0
    for ai, wa in zip(a_vals.tolist(), a_mult.tolist()):
        for bj, wb in zip(b_vals.tolist(), b_mult.tolist()):
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term = nij / n * np.log(n * nij / (ai * bj))
            logp = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                    - lg_n - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                    - gammaln(n - ai - bj + nij + 1))
            total += wa * wb * float((term * np.exp(logp)).sum())
    return total


def _identical_partitions(table) -> bool:
    return table.shape[0] == table.shape[1] and np.count_nonzero(table) == table.shape[0]


def _split(ev_or_true, labels_pred):
    if labels_pred is None:
        return ev_or_true.gt_instance, ev_or_true.pred_instance
    return ev_or_true, labels_pred


def nmi(ev_or_true, labels_pred=None) -> float:
    t, p = _split(ev_or_true, labels_pred)
    table, _, _ = contingency(t, p)
    if _identical_partitions(table):
        return 1.0
    n = table.sum()
    hu = _entropy(table.sum(axis=1), n)
    hv = _entropy(table.sum(axis=0), n)
    if hu == 0.0 or hv == 0.0:
        return 0.0
    return float(np.clip(_mutual_info(table, n) / np.sqrt(hu * hv), 0.0, 1.0))


def ami(ev_or_true, labels_pred=None) -> float:
    t, p = _split(ev_or_true, labels_pred)
    table, _, _ = contingency(t, p)
    n = int(table.sum())
    a, b = table.sum(axis=1), table.sum(axis=0)
    hu, hv = _entropy(a, n), _entropy(b, n)
    if _identical_partitions(table):
        return 1.0
    emi = expected_mutual_info(a, b, n)
    denom = max(hu, hv) - emi
    if abs(denom) < 1e-15:
        return 0.0
    return float((_mutual_info(table, n) - emi) / denom)


def ari(ev_or_true, labels_pred=None) -> float:
    t, p = _split(ev_or_true, labels_pred)
    pc = pair_counting(t, p)
    if pc.n < 2:
        return 1.0
    expected = pc.sum_comb_a * pc.sum_comb_b / (pc.n * (pc.n - 1) / 2.0)
    denom = 0.5 * (pc.sum_comb_a + pc.sum_comb_b) - expected
    if denom == 0.0:
        return 1.0 if _identical_partitions(pc.table) else 0.0
    return float((pc.sum_comb_nij - expected) / denom)


@dataclass
class Report:
    per_class_iou: np.ndarray
    mean_iou: float
    point_acc: float
    object_acc: float
    nmi: float
    ami: float
    ari: float

    SUMMARY = ("meanIOU", "pointAcc", "objAcc", "NMI", "AMI", "ARI")

    def summary(self) -> dict:
        return dict(zip(self.SUMMARY, (self.mean_iou, self.point_acc, self.object_acc,
                                       self.nmi, self.ami, self.ari)))


def evaluate(ev: EvalPair) -> Report:
    per, mean = iou(ev)
    return Report(per, mean, point_accuracy(ev), object_accuracy(ev), nmi(ev), ami(ev), ari(ev))


def write_report(path, report: Report):
    """CSV with one IOU row per class, then the summary row."""
    lines = ["class_id,class_name,iou"]
    for c in range(NUM_CLASSES):
        v = report.per_class_iou[c]
        lines.append(f"{c},{CLASS_NAMES[c]},{'nan' if np.isnan(v) else f'{v:.6f}'}")
    lines.append("")
    lines.append(",".join(Report.SUMMARY))
    lines.append(",".join(f"{v:.6f}" for v in report.summary().values()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> tuple[np.ndarray, dict]:
    blocks = Path(path).read_text(encoding="utf-8").strip().split("\n\n")
    if len(blocks) != 2:
        raise ValueError(f"{path}: malformed metrics report")
    rows = blocks[0].splitlines()[1:]
    per = np.array([float(r.split(",")[2]) for r in rows])
    head, vals = blocks[1].splitlines()
    return per, dict(zip(head.split(","), (float(v) for v in vals.split(","))))
