"""Seen/unseen accuracy under a calibration-bias sweep, best HM, AUC and diagnostics."""

import csv
import os
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .model import composition_scores, primitive_probs

METRIC_NAMES = ("best_seen", "best_unseen", "best_hm", "auc", "state_acc", "object_acc")


class SweepPoint(NamedTuple):
    bias: float
    seen: Optional[float]
    unseen: Optional[float]


@dataclass(frozen=True)
class BiasSweepResult:
    points: tuple

    def __post_init__(self):
        b = [p.bias for p in self.points]
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("bias values must be strictly increasing")

    @property
    def biases(self):
        return [p.bias for p in self.points]


@dataclass(frozen=True)
class MetricsSummary:
    best_seen: Optional[float]
    best_unseen: Optional[float]
    best_hm: Optional[float]
    auc: Optional[float]
    state_acc: Optional[float]
    object_acc: Optional[float]
    sweep: BiasSweepResult

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}


@dataclass(frozen=True)
class ConditionalConfusion:
    direction: str  # "o->s": rows are objects, columns states; "s->o" the reverse
    use_cpc: bool
    matrix: np.ndarray
    empty_rows: tuple

    def feasible_mass(self, feasibility):
        """Mean over populated rows of the probability put on feasible target classes."""
        f = np.asarray(feasibility, dtype=bool)
        f = f.T if self.direction == "o->s" else f
        rows = [r for r in range(self.matrix.shape[0]) if r not in self.empty_rows]
        return float(np.mean([self.matrix[r, f[r]].sum() for r in rows]))


@dataclass(frozen=True)
class PrimitiveAccuracy:
    state: float
    object: float
    state_uncond: float
    object_uncond: float


def harmonic_mean(s, u):
    if s < 0 or u < 0:
        raise ValueError("harmonic mean of negative accuracy")
    return 0.0 if s + u == 0 else 2 * s * u / (s + u)


# ---------------------------------------------------------------------------
# scoring


def _labeled(dataset, split):
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    if np.any(dataset.states[idx] < 0) or np.any(dataset.objects[idx] < 0):
        raise ValueError(f"split {split!r} has partially labeled records")
    return idx


def score_table(model, dataset, split, space_mask, use_cpc=True):
    """``(scores n x S x O, true states, true objects)`` for one split."""
    idx = _labeled(dataset, split)
    ps, po = primitive_probs(model, dataset.features[idx], use_cpc)
    return composition_scores(ps, po, space_mask), dataset.states[idx], dataset.objects[idx]


def _seen_mask(seen_pairs, shape):
    if isinstance(seen_pairs, np.ndarray):
        return seen_pairs.astype(bool)
    m = np.zeros(shape, dtype=bool)
    for s, o in seen_pairs:
        m[s, o] = True
    return m


def predictions_at_bias(scores, seen_mask, bias):
    """Flat argmax index per record; ties go to the lowest (state, object)."""
    flat = scores.reshape(scores.shape[0], -1)
    unseen = ~seen_mask.ravel() & np.isfinite(flat)
    return np.argmax(np.where(unseen, flat + bias, flat), axis=1)


class _Candidates(NamedTuple):
    seen_val: np.ndarray  # best seen score per record (-inf if none)
    seen_idx: np.ndarray
    unseen_val: np.ndarray  # n x m near-top unseen scores, -inf padded
    unseen_idx: np.ndarray  # matching flat cell indices, ascending per row


# unseen cells further than this below the record's best unseen score can
# never tie with it after adding a bias of magnitude <= 1e3
_TIE_WINDOW = 1e-9


def _candidates(scores, seen_mask):
    """Per-record cells that can win the biased argmax at some bias."""
    flat = scores.reshape(scores.shape[0], -1)
    sm = seen_mask.ravel()
    seen_scores = np.where(sm, flat, -np.inf)
    seen_idx = np.argmax(seen_scores, axis=1)
    seen_val = seen_scores[np.arange(flat.shape[0]), seen_idx]
    unseen_scores = np.where(~sm, flat, -np.inf)
    top = unseen_scores.max(axis=1, keepdims=True)
    near = np.isfinite(unseen_scores) & (unseen_scores >= top - _TIE_WINDOW)
    m = max(1, int(near.sum(axis=1).max()))
    u_val = np.full((flat.shape[0], m), -np.inf)
    u_idx = np.full((flat.shape[0], m), flat.shape[1], dtype=np.int64)
    for r, cols in enumerate(near):
        c = np.flatnonzero(cols)
        u_val[r, :c.size] = unseen_scores[r, c]
        u_idx[r, :c.size] = c
    return _Candidates(seen_val, seen_idx, u_val, u_idx)


def _predict(cand, bias):
    """Same result as ``predictions_at_bias`` on the full table."""
    shifted = np.where(np.isfinite(cand.unseen_val), cand.unseen_val + bias, -np.inf)
    j = np.argmax(shifted, axis=1)
    rows = np.arange(shifted.shape[0])
    u_val, u_idx = shifted[rows, j], cand.unseen_idx[rows, j]
    take_unseen = (u_val > cand.seen_val) | ((u_val == cand.seen_val) & (u_idx < cand.seen_idx))
    return np.where(take_unseen, u_idx, cand.seen_idx)


def _cohort_accuracy(scores, true_s, true_o, seen_mask, bias, cand=None):
    n_o = scores.shape[2]
    pred = predictions_at_bias(scores, seen_mask, bias) if cand is None else _predict(cand, bias)
    correct = pred == true_s * n_o + true_o
    is_seen = seen_mask[true_s, true_o]
    seen = float(correct[is_seen].sum() / is_seen.sum()) if is_seen.any() else None
    unseen = float(correct[~is_seen].sum() / (~is_seen).sum()) if (~is_seen).any() else None
    return seen, unseen


def accuracy_from_scores(scores, true_s, true_o, seen_pairs, bias):
    seen_mask = _seen_mask(seen_pairs, scores.shape[1:])
    seen, unseen = _cohort_accuracy(scores, np.asarray(true_s), np.asarray(true_o), seen_mask, bias)
    if seen is None and unseen is None:
        raise ValueError("no records to evaluate")
    return seen, unseen


def evaluate_at_bias(model, dataset, split, space_mask, seen_pairs, bias, use_cpc=True):
    scores, ts, to = score_table(model, dataset, split, space_mask, use_cpc)
    return accuracy_from_scores(scores, ts, to, seen_pairs, bias)


def bias_grid(scores, seen_mask, n_biases=101):
    """``n_biases`` evenly spaced biases over [-delta, delta] plus 0.

    delta is the largest |best seen score - best unseen score| over records,
    nudged up so both endpoints fully flip every record.
    """
    if n_biases < 2:
        raise ValueError("n_biases must be >= 2")
    flat = scores.reshape(scores.shape[0], -1)
    sm = seen_mask.ravel()
    best_seen = np.where(sm, flat, -np.inf).max(axis=1)
    best_unseen = np.where(~sm, flat, -np.inf).max(axis=1)
    ok = np.isfinite(best_seen) & np.isfinite(best_unseen)
    delta = float(np.abs(best_seen[ok] - best_unseen[ok]).max()) if ok.any() else 0.0
    delta = delta + max(1e-9, 1e-6 * delta)
    return np.unique(np.concatenate([np.linspace(-delta, delta, n_biases), [0.0]]))


def auc_from_points(points):
    """Trapezoidal area under seen accuracy as a function of unseen accuracy.

    Points sharing an unseen value are merged to their mean seen value.
    """
    pts = [(p.unseen, p.seen) for p in points if p.seen is not None and p.unseen is not None]
    if not pts:
        return None
    xs = sorted({u for u, _ in pts})
    ys = [float(np.mean([s for u, s in pts if u == x])) for x in xs]
    area = 0.0
    for i in range(1, len(xs)):
        area += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2
    return area


def summarize_sweep(points, state_acc=None, object_acc=None):
    seen = [p.seen for p in points if p.seen is not None]
    unseen = [p.unseen for p in points if p.unseen is not None]
    hms = [harmonic_mean(p.seen, p.unseen) for p in points if p.seen is not None and p.unseen is not None]
    return MetricsSummary(
        best_seen=max(seen) if seen else None,
        best_unseen=max(unseen) if unseen else None,
        best_hm=max(hms) if hms else None,
        auc=auc_from_points(points),
        state_acc=state_acc,
        object_acc=object_acc,
        sweep=BiasSweepResult(tuple(points)),
    )


def sweep_scores(scores, true_s, true_o, seen_pairs, n_biases=101, biases=None):
    """Bias sweep over a precomputed score table."""
    seen_mask = _seen_mask(seen_pairs, scores.shape[1:])
    true_s, true_o = np.asarray(true_s), np.asarray(true_o)
    if biases is None:
        biases = bias_grid(scores, seen_mask, n_biases)
    cand = _candidates(scores, seen_mask)
    points = [SweepPoint(float(b), *_cohort_accuracy(scores, true_s, true_o, seen_mask, b, cand)) for b in biases]
    if all(p.seen is None and p.unseen is None for p in points):
        raise ValueError("no records to evaluate")
    return summarize_sweep(points)


def sweep_metrics(model, dataset, split, space_mask, seen_pairs, n_biases=101, use_cpc=True):
    scores, ts, to = score_table(model, dataset, split, space_mask, use_cpc)
    summary = sweep_scores(scores, ts, to, seen_pairs, n_biases)
    acc = primitive_accuracy(model, dataset, split)
    return summarize_sweep(list(summary.sweep.points), acc.state, acc.object)


def open_closed_comparison(model, dataset, manifest, split="test", n_biases=101):
    """Open- and closed-world sweeps of one split on a shared bias grid.

    At a fixed bias every open-world hit is also a closed-world hit, so on a
    shared grid the open best HM can never exceed the closed one.
    """
    seen_mask = manifest.seen_mask()
    open_s, ts, to = score_table(model, dataset, split, manifest.space_mask("open", split))
    closed_s = np.where(manifest.space_mask("closed", split), open_s, -np.inf)
    grid = np.union1d(bias_grid(open_s, seen_mask, n_biases), bias_grid(closed_s, seen_mask, n_biases))
    return (sweep_scores(open_s, ts, to, seen_mask, biases=grid),
            sweep_scores(closed_s, ts, to, seen_mask, biases=grid))


# ---------------------------------------------------------------------------
# diagnostics


def primitive_accuracy(model, dataset, split):
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    feats, st, ob = dataset.features[idx], dataset.states[idx], dataset.objects[idx]
    out = []
    for use_cpc in (True, False):
        ps, po = primitive_probs(model, feats, use_cpc)
        s_ok, o_ok = st >= 0, ob >= 0
        out.append(float((ps.argmax(1)[s_ok] == st[s_ok]).mean()) if s_ok.any() else 0.0)
        out.append(float((po.argmax(1)[o_ok] == ob[o_ok]).mean()) if o_ok.any() else 0.0)
    return PrimitiveAccuracy(*out)


def conditional_confusion(model, dataset, split, direction, use_cpc, n_states, n_objects):
    """Mean predicted target distribution per conditioning class."""
    if direction not in ("o->s", "s->o"):
        raise ValueError(f"unknown direction {direction!r}")
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    ps, po = primitive_probs(model, dataset.features[idx], use_cpc)
    if direction == "o->s":
        cond, probs, n_rows = dataset.objects[idx], ps, n_objects
    else:
        cond, probs, n_rows = dataset.states[idx], po, n_states
    n_cols = probs.shape[1]
    matrix = np.full((n_rows, n_cols), 1.0 / n_cols)
    empty = []
    for r in range(n_rows):
        sel = cond == r
        if sel.any():
            matrix[r] = probs[sel].mean(axis=0)
        else:
            empty.append(r)
    return ConditionalConfusion(direction, use_cpc, matrix, tuple(empty))


def benchmark_row(model, dataset, manifest, setting="open", partial=False, n_biases=101):
    """One results-table row: val and test S/U/HM (+AUC unless partial-label)."""
    row = {}
    for split in ("val", "test"):
        m = sweep_metrics(model, dataset, split, manifest.space_mask(setting, split), manifest.seen_pairs,
                          n_biases)
        row[f"{split}_S"], row[f"{split}_U"], row[f"{split}_HM"] = m.best_seen, m.best_unseen, m.best_hm
        if not partial:
            row[f"{split}_AUC"] = m.auc
    return row


# ---------------------------------------------------------------------------
# report files


def _num(x):
    return "" if x is None else repr(float(x))


def _parse(x):
    return None if x == "" else float(x)


def _confusion_name(c):
    return f"confusion_{c.direction.replace('->', '2')}_{'cpc' if c.use_cpc else 'nocpc'}.csv"


def sweep_svg(sweep, size=320, pad=40):
    pts = [p for p in sweep.points if p.seen is not None and p.unseen is not None]
    span = size - 2 * pad

    def xy(u, s):
        return f"{pad + u * span:.2f},{pad + (1 - s) * span:.2f}"

    poly = " ".join(xy(p.unseen, p.seen) for p in sorted(pts, key=lambda p: (p.unseen, -p.seen)))
    lo, hi = pad, pad + span
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{lo}" y1="{hi}" x2="{hi}" y2="{hi}" stroke="black"/>',
        f'<line x1="{lo}" y1="{lo}" x2="{lo}" y2="{hi}" stroke="black"/>',
        f'<text x="{lo}" y="{hi + 16}" font-size="10">0</text>',
        f'<text x="{hi - 6}" y="{hi + 16}" font-size="10">1</text>',
        f'<text x="{lo - 14}" y="{lo + 4}" font-size="10">1</text>',
        f'<text x="{size / 2 - 30}" y="{size - 8}" font-size="11">unseen accuracy</text>',
        f'<text x="12" y="{size / 2 + 30}" font-size="11" transform="rotate(-90 12 {size / 2 + 30})">'
        "seen accuracy</text>",
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{poly}"/>',
        "</svg>",
        "",
    ])


def export_report(summary, confusions, report, path):
    """Write metrics.csv, sweep.csv, confusion CSVs, sweep.svg and summary.md under ``path``."""
    if not summary.sweep.points:
        raise ValueError("empty sweep; nothing written")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name in METRIC_NAMES:
            w.writerow([name, _num(getattr(summary, name))])
    with open(os.path.join(path, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bias", "S", "U", "HM"])
        for p in summary.sweep.points:
            hm = harmonic_mean(p.seen, p.unseen) if p.seen is not None and p.unseen is not None else None
            w.writerow([_num(p.bias), _num(p.seen), _num(p.unseen), _num(hm)])
    for c in confusions:
        with open(os.path.join(path, _confusion_name(c)), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", *range(c.matrix.shape[1]), "empty"])
            for r, row in enumerate(c.matrix):
                w.writerow([r, *(_num(v) for v in row), int(r in c.empty_rows)])
    with open(os.path.join(path, "sweep.svg"), "w") as fh:
        fh.write(sweep_svg(summary.sweep))
    lines = ["# Evaluation summary", "", "| metric | value |", "|---|---|"]
    lines += [f"| {k} | {'n/a' if v is None else f'{v:.4f}'} |" for k, v in summary.as_dict().items()]
    if report is not None:
        reports = report if isinstance(report, (list, tuple)) else [report]
        lines += ["", "## Training", "", "| stage | epochs | stop | best epoch | seconds |", "|---|---|---|---|---|"]
        lines += [f"| {r.stage} | {r.epochs_run} | {r.stop_reason} | {r.best_epoch} | {r.wall_seconds:.2f} |"
                  for r in reports]
    with open(os.path.join(path, "summary.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return BiasSweepResult(tuple(SweepPoint(float(r["bias"]), _parse(r["S"]), _parse(r["U"])) for r in rows))


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return {r["metric"]: _parse(r["value"]) for r in csv.DictReader(fh)}
