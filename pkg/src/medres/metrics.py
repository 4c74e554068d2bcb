"""Bipartite ranking metrics for budgeted recommendation.

The headline metric scores the pairwise ordering between a user's
top-beta positives and top-k negatives, beta = min(n_pos, k), so it
tracks ranking quality among exactly the items a k-slot budget puts in
play.  Ties: the win indicator is `>=`, and top selections break score
ties by smallest original index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

TIE_POLICY = "ge-indicator/stable-index-selection"


class DegenerateInstanceError(ValueError):
    """Raised when a metric is undefined (no positives or no negatives)."""


@dataclass(frozen=True)
class RankingInstance:
    """Scores and binary labels for one user, plus the budget k."""

    scores: np.ndarray
    labels: np.ndarray
    k: int

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if s.ndim != 1 or y.shape != s.shape:
            raise ValueError("scores and labels must be equal-length vectors")
        if y.size and not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be binary")
        if self.k < 1:
            raise ValueError("k must be positive")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())

    @property
    def beta(self) -> int:
        return min(self.n_pos, self.k)

    @property
    def degenerate(self) -> bool:
        return self.n_pos == 0 or self.n_neg == 0


def from_rank_labels(labels, k: int) -> RankingInstance:
    """Instance whose scores strictly decrease in the given rank order."""
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.arange(labels.size, 0, -1, dtype=np.float64)
    return RankingInstance(scores, labels, k)


def _top_indices(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` highest scores, ties by smallest index."""
    order = np.argsort(-scores, kind="stable")
    return order[:count]


def _check_defined(inst: RankingInstance):
    if inst.degenerate:
        raise DegenerateInstanceError(
            f"undefined for n_pos={inst.n_pos}, n_neg={inst.n_neg}"
        )


def _pair_wins(inst: RankingInstance):
    """(win count, beta) between top-beta positives and top-k negatives."""
    pos_idx = np.nonzero(inst.labels == 1)[0]
    neg_idx = np.nonzero(inst.labels == 0)[0]
    top_pos = pos_idx[_top_indices(inst.scores[pos_idx], inst.beta)]
    top_neg = neg_idx[_top_indices(inst.scores[neg_idx], inst.k)]
    wins = int((inst.scores[top_pos][:, None] >= inst.scores[top_neg][None, :]).sum())
    return wins, inst.beta

def papk_user(inst: RankingInstance, normalized: bool = False) -> float:
    """Pairwise win rate between top-beta positives and top-k negatives.

    The denominator is beta*k exactly as defined even when fewer than k
    negatives exist; `normalized` switches to beta*min(k, n_neg), which
    is reported separately and never silently substituted.
    """
    _check_defined(inst)
    wins, beta = _pair_wins(inst)
    denom = beta * (min(inst.k, inst.n_neg) if normalized else inst.k)
    return wins / denom


def brute_force_papk(inst: RankingInstance, normalized: bool = False) -> float:
    """Independent reimplementation used as the test oracle.

    Pure-Python selection sort semantics: sort (score desc, index asc),
    take the first beta positives / k negatives, double loop the pairs.
    """
    _check_defined(inst)
    scores = inst.scores.tolist()
    labels = inst.labels.tolist()
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    top_pos, top_neg = [], []
    for i in ranked:
        if labels[i] == 1 and len(top_pos) < inst.beta:
            top_pos.append(i)
        elif labels[i] == 0 and len(top_neg) < inst.k:
            top_neg.append(i)
    wins = 0
    for i in top_pos:
        for j in top_neg:
            if scores[i] >= scores[j]:
                wins += 1
    denom = inst.beta * (min(inst.k, inst.n_neg) if normalized else inst.k)
    return wins / denom


def pauc(inst: RankingInstance, j: int) -> float:
    """Ordering rate between all positives and the top-j negatives.

    Shares the `>=` indicator and the literal n_pos*j denominator so it
    coincides exactly with the budgeted metric whenever n_pos <= k.
    """
    _check_defined(inst)
    if j < 1:
        raise ValueError("top-negative count must be positive")
    pos_idx = np.nonzero(inst.labels == 1)[0]
    neg_idx = np.nonzero(inst.labels == 0)[0]
    top_neg = neg_idx[_top_indices(inst.scores[neg_idx], j)]
    wins = int((inst.scores[pos_idx][:, None] >= inst.scores[top_neg][None, :]).sum())
    return wins / (inst.n_pos * j)


def prec_at_k(inst: RankingInstance) -> float:
    """Positives among the k highest-scored items, divided by k."""
    _check_defined(inst)
    top = _top_indices(inst.scores, inst.k)
    return float(inst.labels[top].sum()) / inst.k


def auc(inst: RankingInstance) -> float:
    """Full pairwise ordering rate; tied pairs count one half."""
    _check_defined(inst)
    pos = inst.scores[inst.labels == 1]
    neg = inst.scores[inst.labels == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float(gt + 0.5 * eq) / (inst.n_pos * inst.n_neg)


# ---------------------------------------------------------------------------
# aggregation across users
# ---------------------------------------------------------------------------


@dataclass
class UserRow:
    user_key: str
    n_pos: int
    n_neg: int
    beta: int
    value: float | None
    skipped: bool


@dataclass
class MetricReport:
    """Aggregate value plus per-user provenance for one metric at one k."""

    metric: str
    k: int
    value: float
    per_user: list = field(default_factory=list)
    tie_policy: str = TIE_POLICY

    def skipped_users(self) -> list:
        return [r.user_key for r in self.per_user if r.skipped]

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric,
            "k": self.k,
            "value": self.value,
            "users": len(self.per_user),
            "skipped_users": len(self.skipped_users()),
            "tie_policy": self.tie_policy,
        }

    def write_per_user_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_key", "n_pos", "n_neg", "beta", "value", "skipped"])
            for r in self.per_user:
                w.writerow([r.user_key, r.n_pos, r.n_neg, r.beta,
                            "" if r.value is None else f"{r.value:.10g}", int(r.skipped)])


def _user_rows(instances, fn) -> list:
    rows = []
    for key, inst in instances:
        if inst.degenerate:
            rows.append(UserRow(key, inst.n_pos, inst.n_neg, inst.beta, None, True))
        else:
            rows.append(UserRow(key, inst.n_pos, inst.n_neg, inst.beta, fn(inst), False))
    return rows


def _require_valid(rows, metric):
    if not any(not r.skipped for r in rows):
        raise DegenerateInstanceError(f"{metric}: every user is degenerate")


def micro_papk(instances, k: int | None = None, normalized: bool = False) -> MetricReport:
    """Unweighted per-user mean; degenerate users are reported, not averaged."""
    instances = list(instances)
    rows = _user_rows(instances, lambda i: papk_user(i, normalized=normalized))
    _require_valid(rows, "micro_papk")
    vals = [r.value for r in rows if not r.skipped]
    kk = k if k is not None else instances[0][1].k
    return MetricReport("micro_papk", kk, float(np.mean(vals)), rows)


def macro_papk(instances, k: int | None = None) -> MetricReport:
    """Pooled pair wins over k * sum of per-user betas.

    Degenerate users contribute to neither numerator nor denominator.
    """
    instances = list(instances)
    rows = _user_rows(instances, papk_user)
    _require_valid(rows, "macro_papk")
    wins_total, beta_total, kk = 0, 0, k if k is not None else instances[0][1].k
    for (key, inst), row in zip(instances, rows):
        if row.skipped:
            continue
        wins, beta = _pair_wins(inst)
        wins_total += wins
        beta_total += beta
    return MetricReport("macro_papk", kk, wins_total / (kk * beta_total), rows)


def mean_metric(instances, fn, metric_name: str, k: int) -> MetricReport:
    """Per-user mean of any instance metric with the same skip rule."""
    rows = _user_rows(list(instances), fn)
    _require_valid(rows, metric_name)
    vals = [r.value for r in rows if not r.skipped]
    return MetricReport(metric_name, k, float(np.mean(vals)), rows)


def standard_reports(instances, k: int, normalized: bool = False) -> dict:
    """The full report set at one k: pAp@k micro/macro, pAUC, prec@k, AUC."""
    instances = list(instances)
    reports = {
        "micro_papk": micro_papk(instances, k=k),
        "macro_papk": macro_papk(instances, k=k),
        "pauc": mean_metric(instances, lambda i: pauc(i, j=k), "pauc", k),
        "prec_at_k": mean_metric(instances, prec_at_k, "prec_at_k", k),
        "auc": mean_metric(instances, auc, "auc", k),
    }
    if normalized:
        rep = micro_papk(instances, k=k, normalized=True)
        rep.metric = "micro_papk_normalized"
        reports["micro_papk_normalized"] = rep
    return reports


def reports_to_json(reports: dict) -> str:
    return json.dumps({name: rep.to_json_dict() for name, rep in sorted(reports.items())},
                      indent=2, sort_keys=True)


def instances_from_scores(scores, labels, user_keys, k: int):
    """Group flat score/label rows by user key into ranking instances."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    groups: dict[str, list] = {}
    for i, key in enumerate(user_keys):
        groups.setdefault(key, []).append(i)
    out = []
    for key, idx in groups.items():
        idx = np.asarray(idx)
        out.append((key, RankingInstance(scores[idx], labels[idx], k)))
    return out
