"""Pixel-level anomaly metrics: AUROC, AUPR (average precision), FPR at a recall
level, and the FPR decomposition over correctly / incorrectly classified normal
pixels.

Anomaly pixels are positives, every other non-ignored pixel is a negative, and
a pixel is flagged when ``score >= threshold``.

:class:`ScoreLabelAccumulator` runs either in exact mode (raw scores kept) or in
histogram mode (fixed bin edges, bounded memory). Both reduce to score groups
sorted in descending order and share one finalizer. :func:`exact_oracle` is a
separate sort-and-sweep implementation used to cross-check them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

DEFAULT_RECALLS = (0.95, 0.85, 0.75)
DEFAULT_BINS = 4096

# category codes for exact-mode storage
_NEG_CORRECT, _NEG_INCORRECT, _POS, _NEG_UNSPLIT = 0, 1, 2, 3


class UndefinedMetricError(ValueError):
    """A metric needs positives and/or negatives that are not present."""


@dataclass
class _Groups:
    """Per score group (descending score) counts."""

    pos: np.ndarray
    neg: np.ndarray
    neg_incorrect: np.ndarray
    neg_correct: np.ndarray
    unsplit: int
    # True when groups are bins of non-zero width (enables within-bin interpolation)
    binned: bool


class ScoreLabelAccumulator:
    """Mergeable store of (score, label[, predicted]) pixels.

    Args:
        anomaly_id: label value counted as positive.
        ignore_id: label value dropped entirely.
        exact: keep raw scores instead of binning them.
        bins: number of histogram bins (histogram mode).
        score_range: ``(lo, hi)`` covering every score that will be added
            (histogram mode; get it from a first min/max pass).
    """

    def __init__(self, anomaly_id: int, ignore_id: int = 255, exact: bool = False,
                 bins: int = DEFAULT_BINS, score_range: tuple[float, float] | None = None):
        self.anomaly_id = anomaly_id
        self.ignore_id = ignore_id
        self.exact = exact
        self.min = np.inf
        self.max = -np.inf
        if exact:
            self._scores: list[np.ndarray] = []
            self._cats: list[np.ndarray] = []
            self.bin_edges = None
        else:
            if score_range is None:
                raise ValueError("histogram mode needs score_range")
            lo, hi = float(score_range[0]), float(score_range[1])
            if not hi >= lo:
                raise ValueError(f"bad score_range {score_range}")
            self.bin_edges = np.linspace(lo, hi, bins + 1)
            self.pos_counts = np.zeros(bins, dtype=np.int64)
            self.neg_counts = np.zeros(bins, dtype=np.int64)
            self.neg_incorrect_counts = np.zeros(bins, dtype=np.int64)
            self.neg_unsplit = 0

    # -- filling ------------------------------------------------------------

    def add(self, scores, labels, predicted=None) -> "ScoreLabelAccumulator":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        if scores.shape != labels.shape:
            raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
        if predicted is not None:
            predicted = np.asarray(predicted)
            if predicted.shape != labels.shape:
                raise ValueError(f"predicted {predicted.shape} and labels {labels.shape} differ")
        keep = labels != self.ignore_id
        s = scores[keep]
        if s.size == 0:
            return self
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        lab = labels[keep]
        pos = lab == self.anomaly_id
        cats = np.full(s.shape, _NEG_UNSPLIT, dtype=np.int8)
        if predicted is not None:
            wrong = predicted[keep] != lab
            cats[~pos & wrong] = _NEG_INCORRECT
            cats[~pos & ~wrong] = _NEG_CORRECT
        cats[pos] = _POS
        self.min = min(self.min, float(s.min()))
        self.max = max(self.max, float(s.max()))
        if self.exact:
            self._scores.append(s)
            self._cats.append(cats)
            return self
        lo, hi = self.bin_edges[0], self.bin_edges[-1]
        if s.min() < lo or s.max() > hi:
            raise ValueError(f"scores [{s.min()}, {s.max()}] outside bin range [{lo}, {hi}]")
        idx = self._bin_index(s)
        b = len(self.pos_counts)
        self.pos_counts += np.bincount(idx[pos], minlength=b)
        self.neg_counts += np.bincount(idx[~pos], minlength=b)
        self.neg_incorrect_counts += np.bincount(idx[cats == _NEG_INCORRECT], minlength=b)
        self.neg_unsplit += int((cats == _NEG_UNSPLIT).sum())
        return self

    def _bin_index(self, s):
        lo, hi = self.bin_edges[0], self.bin_edges[-1]
        b = len(self.bin_edges) - 1
        if hi == lo:
            return np.zeros(s.shape, dtype=np.int64)
        return np.clip(((s - lo) / (hi - lo) * b).astype(np.int64), 0, b - 1)

    def merge(self, other: "ScoreLabelAccumulator") -> "ScoreLabelAccumulator":
        """Return a new accumulator holding both; inputs are left untouched."""
        if self.exact != other.exact or (self.anomaly_id, self.ignore_id) != (other.anomaly_id, other.ignore_id):
            raise ValueError("cannot merge accumulators with different modes or label ids")
        if self.exact:
            out = ScoreLabelAccumulator(self.anomaly_id, self.ignore_id, exact=True)
            out._scores = self._scores + other._scores
            out._cats = self._cats + other._cats
        else:
            if not np.array_equal(self.bin_edges, other.bin_edges):
                raise ValueError("cannot merge histograms with different bin edges")
            out = ScoreLabelAccumulator(self.anomaly_id, self.ignore_id, bins=len(self.pos_counts),
                                        score_range=(self.bin_edges[0], self.bin_edges[-1]))
            out.pos_counts = self.pos_counts + other.pos_counts
            out.neg_counts = self.neg_counts + other.neg_counts
            out.neg_incorrect_counts = self.neg_incorrect_counts + other.neg_incorrect_counts
            out.neg_unsplit = self.neg_unsplit + other.neg_unsplit
        out.min, out.max = min(self.min, other.min), max(self.max, other.max)
        return out

    # -- views --------------------------------------------------------------

    def counts(self) -> dict[str, int]:
        g = self._groups()
        neg = int(g.neg.sum())
        split = g.unsplit == 0
        return {
            "anomaly": int(g.pos.sum()),
            "normal": neg,
            "normal_incorrect": int(g.neg_incorrect.sum()) if split else None,
            "normal_correct": int(g.neg_correct.sum()) if split else None,
        }

    def _groups(self) -> _Groups:
        if self.exact:
            if self._scores:
                s = np.concatenate(self._scores)
                c = np.concatenate(self._cats)
            else:
                s, c = np.zeros(0), np.zeros(0, dtype=np.int8)
            uniq, inv = np.unique(s, return_inverse=True)
            n = len(uniq)

            def count(mask):
                return np.bincount(inv[mask], minlength=n)[::-1].astype(np.int64)

            pos = count(c == _POS)
            inc = count(c == _NEG_INCORRECT)
            cor = count(c == _NEG_CORRECT)
            uns = count(c == _NEG_UNSPLIT)
            return _Groups(pos, inc + cor + uns, inc, cor, int(uns.sum()), binned=False)
        neg = self.neg_counts[::-1]
        inc = self.neg_incorrect_counts[::-1]
        return _Groups(
            pos=self.pos_counts[::-1].copy(),
            neg=neg.copy(),
            neg_incorrect=inc.copy(),
            neg_correct=neg - inc,
            unsplit=self.neg_unsplit,
            binned=self.bin_edges[-1] > self.bin_edges[0],
        )

    def __len__(self) -> int:
        if self.exact:
            return int(sum(len(s) for s in self._scores))
        return int(self.pos_counts.sum() + self.neg_counts.sum())


def accumulate(acc: ScoreLabelAccumulator, scores, labels, predicted=None) -> ScoreLabelAccumulator:
    return acc.add(getattr(scores, "values", scores), labels, predicted)


# ---------------------------------------------------------------------------
# finalizers over descending score groups

def _require(g: _Groups, need_pos=True, need_neg=True):
    p, n = int(g.pos.sum()), int(g.neg.sum())
    if need_pos and p == 0:
        raise UndefinedMetricError("no positive (anomaly) pixels")
    if need_neg and n == 0:
        raise UndefinedMetricError("no negative (normal) pixels")
    return p, n


def auroc(acc: ScoreLabelAccumulator) -> float:
    """P(score_pos > score_neg) + 1/2 P(tie); pixels sharing a bin count as ties."""
    g = acc._groups()
    p, n = _require(g)
    neg_below = n - np.cumsum(g.neg)
    return float(np.sum(g.pos * (neg_below + 0.5 * g.neg)) / (p * n))


def aupr(acc: ScoreLabelAccumulator) -> float:
    """Average precision: sum over thresholds of recall increment times precision."""
    g = acc._groups()
    p, _ = _require(g, need_neg=False)
    tp = np.cumsum(g.pos)
    fp = np.cumsum(g.neg)
    flagged = tp + fp
    step = g.pos > 0
    return float(np.sum(g.pos[step] / p * tp[step] / flagged[step]))


def _threshold_group(g: _Groups, recall: float):
    """Index of the first group reaching ``recall`` and the fraction of it taken."""
    if not 0 < recall <= 1:
        raise ValueError(f"recall level must be in (0, 1], got {recall}")
    p, _ = _require(g)
    tp = np.cumsum(g.pos)
    k = int(np.argmax(tp / p >= recall))
    frac = 1.0
    if g.binned:
        # scores inside a bin are assumed uniform: take just enough of it
        prev = tp[k] - g.pos[k]
        frac = float(np.clip((recall * p - prev) / g.pos[k], 0.0, 1.0))
    return k, frac


def _fp_at(neg: np.ndarray, k: int, frac: float) -> float:
    return float(neg[:k].sum() + frac * neg[k])


def fpr_at_recall(acc: ScoreLabelAccumulator, recall: float = 0.95) -> float:
    g = acc._groups()
    k, frac = _threshold_group(g, recall)
    return float(_fp_at(g.neg, k, frac) / g.neg.sum())


def decomposed_fpr(acc: ScoreLabelAccumulator, recall: float = 0.95) -> tuple[float | None, float | None]:
    """FPR among incorrectly (E) and correctly (C) classified normal pixels at the
    single global threshold of :func:`fpr_at_recall`. An empty subset gives None."""
    g = acc._groups()
    if g.unsplit:
        raise ValueError("accumulator was filled without predicted labels")
    k, frac = _threshold_group(g, recall)
    ne, nc = g.neg_incorrect.sum(), g.neg_correct.sum()
    e = float(_fp_at(g.neg_incorrect, k, frac) / ne) if ne else None
    c = float(_fp_at(g.neg_correct, k, frac) / nc) if nc else None
    return e, c


# ---------------------------------------------------------------------------

def _rkey(r: float) -> str:
    return f"{r:.2f}"


@dataclass
class MetricsReport:
    auroc: float
    aupr: float
    fpr_at: dict[str, float]
    e_fpr_at: dict[str, float | None] = field(default_factory=dict)
    c_fpr_at: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, int | None] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table(self, name: str = "method") -> str:
        """AUPR / FPR95 / AUROC row in percent."""
        fpr95 = self.fpr_at.get(_rkey(0.95))
        lines = [
            f"{'Method':<12}| {'AUPR↑':>7} | {'FPR95↓':>7} | {'AUROC↑':>7}",
            f"{name:<12}| {100 * self.aupr:7.1f} | "
            + (f"{100 * fpr95:7.1f}" if fpr95 is not None else f"{'-':>7}")
            + f" | {100 * self.auroc:7.1f}",
        ]
        if self.e_fpr_at:
            keys = sorted(self.e_fpr_at, reverse=True)
            fmt = lambda v: f"{100 * v:6.1f}" if v is not None else f"{'-':>6}"
            lines.append("  ".join(f"E-FPR{round(float(k) * 100)}" for k in keys) + "  "
                         + "  ".join(f"C-FPR{round(float(k) * 100)}" for k in keys))
            lines.append("  ".join(fmt(self.e_fpr_at[k]) for k in keys) + "  "
                         + "  ".join(fmt(self.c_fpr_at[k]) for k in keys))
        return "\n".join(lines)


def report(acc: ScoreLabelAccumulator, recalls: Sequence[float] = DEFAULT_RECALLS) -> MetricsReport:
    counts = acc.counts()
    out = MetricsReport(
        auroc=auroc(acc),
        aupr=aupr(acc),
        fpr_at={_rkey(r): fpr_at_recall(acc, r) for r in recalls},
        counts=counts,
    )
    if counts["normal_incorrect"] is not None:
        for r in recalls:
            out.e_fpr_at[_rkey(r)], out.c_fpr_at[_rkey(r)] = decomposed_fpr(acc, r)
    return out


def per_image_report(accs: Iterable[ScoreLabelAccumulator], recalls=DEFAULT_RECALLS) -> MetricsReport:
    """Average of per-image metrics over images that have both classes."""
    reps = []
    for a in accs:
        c = a.counts()
        if c["anomaly"] and c["normal"]:
            reps.append(report(a, recalls))
    if not reps:
        raise UndefinedMetricError("no image has both anomaly and normal pixels")
    mean = lambda xs: float(np.mean(xs))
    return MetricsReport(
        auroc=mean([r.auroc for r in reps]),
        aupr=mean([r.aupr for r in reps]),
        fpr_at={k: mean([r.fpr_at[k] for r in reps]) for k in reps[0].fpr_at},
        counts={"images": len(reps)},
    )


def exact_oracle(scores, labels, correct=None, recalls: Sequence[float] = DEFAULT_RECALLS) -> MetricsReport:
    """Reference metrics by explicit sort and full threshold sweep.

    ``labels`` are truthy for positives. ``correct`` optionally marks each
    negative as correctly classified (for the E/C decomposition).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if len(s) > 10**6:
        raise ValueError("exact_oracle is limited to 1e6 pairs")
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise UndefinedMetricError("oracle needs both positives and negatives")

    # Mann-Whitney U from midranks
    ranks = rankdata(s)
    auc = (ranks[y].sum() - P * (P + 1) / 2) / (P * N)

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    block_end = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tps, fps = tp[block_end], fp[block_end]

    ap, prev_recall = 0.0, 0.0
    for t, f in zip(tps, fps):
        rec = t / P
        ap += (rec - prev_recall) * (t / (t + f))
        prev_recall = rec

    rep = MetricsReport(auroc=float(auc), aupr=float(ap), fpr_at={},
                        counts={"anomaly": P, "normal": N, "normal_incorrect": None, "normal_correct": None})
    if correct is not None:
        ok = np.asarray(correct).ravel().astype(bool)
        neg_c = np.cumsum(~y_sorted & ok[order])[block_end]
        neg_e = np.cumsum(~y_sorted & ~ok[order])[block_end]
        nc, ne = int((~y & ok).sum()), int((~y & ~ok).sum())
        rep.counts.update(normal_incorrect=ne, normal_correct=nc)
    for r in recalls:
        k = int(np.argmax(tps / P >= r))
        rep.fpr_at[_rkey(r)] = float(fps[k] / N)
        if correct is not None:
            rep.e_fpr_at[_rkey(r)] = float(neg_e[k] / ne) if ne else None
            rep.c_fpr_at[_rkey(r)] = float(neg_c[k] / nc) if nc else None
    return rep


def histogram_range(score_maps: Iterable[np.ndarray]) -> tuple[float, float]:
    """First pass of the two-pass histogram scheme."""
    lo, hi = np.inf, -np.inf
    for m in score_maps:
        m = getattr(m, "values", m)
        lo, hi = min(lo, float(np.min(m))), max(hi, float(np.max(m)))
    return lo, hi
