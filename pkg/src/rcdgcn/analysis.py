"""Post-hoc interpretation of a trained model.

* factor norms: sum of squared TAB weights per input factor (matrix level)
  and per-node squared norms of each factor's utility contribution (link
  level);
* significant links: row-wise squared norms of the (window-averaged)
  attention matrix, flagged above a nearest-rank percentile;
* incident case records: aligned truth/prediction series around an event.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ConfigError
from .synth import IncidentEvent
from .tab import TabParams


def squared_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * m))


@dataclass
class NormReport:
    per_factor_matrix_norm: dict[str, float]
    per_link_factor_norm: dict[tuple[str, str], float] = field(default_factory=dict)

    def link_total(self, factor: str) -> float:
        return sum(v for (_, f), v in self.per_link_factor_norm.items() if f == factor)


def _factor_rows(params: TabParams, layout, n_states: int):
    """(factor, src block, dst block, input columns) for speed/state and each feature."""
    out = [("speed" if n_states == 1 else "state", params.w_state_src.data, params.w_state_dst.data, None)]
    if layout and params.w_feat_src is None:
        raise ConfigError("factor layout given but the TAB has no feature weights")
    width = 0 if params.w_feat_src is None else params.w_feat_src.shape[0]
    covered = sorted(c for _, cols in layout for c in cols)
    if covered != list(range(width)):
        raise ConfigError(f"factor layout covers columns {covered}, TAB has {width} feature rows")
    for name, cols in layout:
        out.append((name, params.w_feat_src.data[cols], params.w_feat_dst.data[cols], cols))
    return out


def factor_norms(params: TabParams, factor_layout, node_ids=None, x_last=None, z_last=None) -> NormReport:
    """Squared-norm analysis of the TAB weights.

    Matrix level: sum of squares of the factor's source and destination
    weight rows. Link level (needs ``x_last [W, N, P]`` and ``z_last
    [W, N, L']``, the last input step of each window): for node ``k`` the
    squared norm of row ``k`` of ``[inputs_f @ W_src,f | inputs_f @ W_dst,f]``,
    averaged over windows. Summed over nodes this is the squared Frobenius
    norm of the factor's contribution matrix.
    """
    rows = _factor_rows(params, factor_layout, params.w_state_src.shape[0])
    matrix = {name: squared_norm(src) + squared_norm(dst) for name, src, dst, _ in rows}
    per_link = {}
    if x_last is not None:
        for name, src, dst, cols in rows:
            inp = x_last if cols is None else z_last[..., cols]
            contrib = np.concatenate([inp @ src, inp @ dst], axis=-1)  # [W, N, 2 d_e]
            link = np.mean(np.sum(contrib ** 2, axis=-1), axis=0)
            ids = node_ids if node_ids is not None else [str(k) for k in range(link.shape[0])]
            for nid, v in zip(ids, link):
                per_link[(nid, name)] = float(v)
    return NormReport(matrix, per_link)


@dataclass
class SignificantLinks:
    scores: np.ndarray  # per node, sum_j A[k, j]^2
    threshold: float
    flagged: list[str]  # descending score, ties by node order
    node_ids: tuple[str, ...]


def combine_rings(atts, rings: np.ndarray, mode: str = "ring") -> np.ndarray:
    """One row-stochastic ``[N, N]`` matrix from per-ring propagation matrices.

    Shared mode already splits a single distribution over the rings, so the
    rings are summed. In ring mode each non-empty ring row is a distribution
    of its own and the rows are averaged over the rings present.
    """
    total = np.sum(np.stack([np.asarray(a, dtype=np.float64) for a in atts]), axis=0)
    if mode == "shared":
        return total
    present = np.asarray(rings, dtype=bool).any(axis=-1).sum(axis=0)
    return total / present[:, None]


def flag_count(n: int, percentile: float) -> int:
    """Nearest-rank size of the top ``100 - percentile`` percent, at least one."""
    return max(1, math.ceil(round((100.0 - percentile) * n / 100.0, 9)))


def significant_links(att: np.ndarray, node_ids=None, percentile: float = 95.0) -> SignificantLinks:
    """Flag nodes whose attention row norm reaches the nearest-rank threshold.

    The threshold is the ``flag_count``-th largest score; every node tied
    with it is flagged as well.
    """
    att = np.asarray(att, dtype=np.float64)
    n = att.shape[0]
    if att.shape != (n, n):
        raise ValueError(f"attention must be square, got {att.shape}")
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    ids = tuple(node_ids) if node_ids is not None else tuple(str(k) for k in range(n))
    scores = np.array([math.fsum(row) for row in att * att])  # exact, so independent of node order
    k = flag_count(n, percentile)
    threshold = float(np.sort(scores)[::-1][k - 1])
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    flagged = [ids[i] for i in order if scores[i] >= threshold]
    return SignificantLinks(scores, threshold, flagged, ids)


@dataclass
class CaseRecord:
    incident: IncidentEvent
    time: np.ndarray
    truth_mph: np.ndarray
    pred_mph: np.ndarray
    incident_flag: np.ndarray
    pre_mae: float
    during_mae: float
    recovery_mae: float

    def rows(self):
        for t, a, b, f in zip(self.time, self.truth_mph, self.pred_mph, self.incident_flag):
            yield int(t), float(a), float(b), int(f)


def _mae(a: np.ndarray, b: np.ndarray) -> float:
    d = np.abs(a - b)
    d = d[np.isfinite(d)]
    return float(np.mean(d)) if d.size else float("nan")


def extract_case(pred_series, truth_series, incident: IncidentEvent, margin: int,
                 incident_flags=None) -> CaseRecord:
    """Slice ``[start - margin, end + margin)`` of one node's series.

    ``pred_series`` may hold NaN where no prediction exists. ``incident_flags``
    defaults to the event's own span.
    """
    pred = np.asarray(pred_series, dtype=np.float64)
    truth = np.asarray(truth_series, dtype=np.float64)
    lo, hi = incident.start - margin, incident.end + margin
    if margin < 0 or lo < 0 or hi > len(truth) or len(pred) != len(truth):
        raise IndexError(f"incident span {lo}..{hi} outside series of length {len(truth)}")
    t = np.arange(lo, hi)
    if incident_flags is None:
        flags = ((t >= incident.start) & (t < incident.end)).astype(int)
    else:
        flags = np.asarray(incident_flags)[lo:hi].astype(int)
    pre = slice(0, margin)
    during = slice(margin, margin + incident.end - incident.start)
    post = slice(margin + incident.end - incident.start, hi - lo)
    p, y = pred[lo:hi], truth[lo:hi]
    return CaseRecord(incident, t, y, p, flags, _mae(p[pre], y[pre]), _mae(p[during], y[during]),
                      _mae(p[post], y[post]))


# ---------------------------------------------------------------------- CSV


def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def write_matrix_norms(path: str | Path, report: NormReport) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["factor", "norm"])
        for name, v in report.per_factor_matrix_norm.items():
            w.writerow([name, repr(v)])


def write_link_norms(path: str | Path, report: NormReport) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["node_id", "factor", "norm"])
        for (nid, name), v in report.per_link_factor_norm.items():
            w.writerow([nid, name, repr(v)])


def write_significant_links(path: str | Path, sig: SignificantLinks) -> None:
    flagged = set(sig.flagged)
    fh, w = _writer(path)
    with fh:
        w.writerow(["node_id", "score", "flagged"])
        for nid, s in zip(sig.node_ids, sig.scores):
            w.writerow([nid, repr(float(s)), int(nid in flagged)])


def write_case_summary(path: str | Path, cases: list[CaseRecord], node_ids) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["node_id", "start", "end", "open_lane_ratio", "kind", "pre_mae", "during_mae", "recovery_mae"])
        for c in cases:
            ev = c.incident
            w.writerow([node_ids[ev.node], ev.start, ev.end, repr(ev.open_lane_ratio), ev.kind,
                        repr(c.pre_mae), repr(c.during_mae), repr(c.recovery_mae)])


def write_case(path: str | Path, case: CaseRecord) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["time", "truth_mph", "pred_mph", "incident_flag"])
        for t, a, b, f in case.rows():
            w.writerow([t, repr(a), repr(b), f])
