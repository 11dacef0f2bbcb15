"""Detection scores and equal error rate.

Convention at a threshold t: a trial is accepted as bona fide when its
score is >= t.  FAR is the fraction of spoof trials accepted, FRR the
fraction of bona fide trials rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .model import forward, select_layers


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    n_bona: int
    n_spoof: int

    def report(self) -> str:
        return (f"eer={self.eer:.6f} threshold={self.threshold:.6f} "
                f"n_bona={self.n_bona} n_spoof={self.n_spoof}")


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.dtype.kind in "US":
        bona_mask = labels == "bona"
        if not np.all(bona_mask | (labels == "spoof")):
            raise ParameterError("labels must be 'bona' or 'spoof'")
    else:
        bona_mask = labels.astype(bool)
    bona, spoof = scores[bona_mask], scores[~bona_mask]
    if bona.size == 0 or spoof.size == 0:
        raise ParameterError("EER needs at least one bona fide and one spoof trial")
    return bona, spoof


def compute_eer(scores, labels) -> EerResult:
    """EER at the FAR = FRR crossing of the threshold sweep.

    ``labels`` are truthy for bona fide (or the strings 'bona'/'spoof').
    Thresholds run over the sorted unique scores plus -inf/+inf; between the
    two operating points that bracket the crossing the rates are linearly
    interpolated.  The first crossing in increasing threshold wins.
    """
    bona, spoof = _split(scores, labels)
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([bona, spoof])), [np.inf]])
    bona_sorted = np.sort(bona)
    spoof_sorted = np.sort(spoof)
    frr = np.searchsorted(bona_sorted, thr, side="left") / bona.size
    far = 1.0 - np.searchsorted(spoof_sorted, thr, side="left") / spoof.size
    diff = far - frr
    i = int(np.argmax(diff <= 0))   # diff[-1] = -1 guarantees a hit
    if diff[i] == 0:
        return EerResult(float(far[i]), float(thr[i]), bona.size, spoof.size)
    d0, d1 = diff[i - 1], diff[i]
    t = d0 / (d0 - d1)
    eer = far[i - 1] + t * (far[i] - far[i - 1])
    lo, hi = thr[i - 1], thr[i]
    if np.isfinite(lo) and np.isfinite(hi):
        threshold = lo + t * (hi - lo)
    else:
        threshold = lo if np.isfinite(lo) else hi
    return EerResult(float(eer), float(threshold), bona.size, spoof.size)


def eer_oracle(scores, labels) -> EerResult:
    """Brute-force EER in exact rational arithmetic, for cross-checking.

    Counts accepted/rejected trials by direct comparison at every midpoint
    between adjacent distinct scores and at both sentinels, then walks the
    resulting piecewise-linear (FAR, FRR) path to its first intersection
    with FAR = FRR.  Quadratic in the number of trials.
    """
    bona, spoof = _split(scores, labels)
    values = sorted(set(bona.tolist()) | set(spoof.tolist()))
    probes = [-np.inf] + [(a + b) / 2 for a, b in zip(values, values[1:])] + [np.inf]
    nb, ns = len(bona), len(spoof)
    points = []
    for p in probes:
        far = Fraction(sum(1 for s in spoof if s >= p), ns)
        frr = Fraction(sum(1 for s in bona if s < p), nb)
        points.append((far, frr, p))
    for k, (far, frr, p) in enumerate(points):
        if far == frr:
            return EerResult(float(far), float(p), nb, ns)
        if k and far < frr:
            f0, r0, p0 = points[k - 1]
            # solve f0 + t(far - f0) == r0 + t(frr - r0)
            t = (f0 - r0) / ((f0 - r0) - (far - frr))
            eer = f0 + t * (far - f0)
            thr = p0 + float(t) * (p - p0) if np.isfinite(p0) and np.isfinite(p) else (p0 if np.isfinite(p0) else p)
            return EerResult(float(eer), float(thr), nb, ns)
    raise AssertionError("sweep ended without a crossing")


# score files ----------------------------------------------------------------

def write_scores(rows, path) -> None:
    """``trial_id<TAB>score`` per line, six decimals."""
    with open(path, "w", newline="\n") as f:
        for trial_id, score in rows:
            f.write(f"{trial_id}\t{float(score):.6f}\n")


def read_scores(path) -> list[tuple[str, float]]:
    rows, seen = [], set()
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected trial_id<TAB>score")
        if parts[0] in seen:
            raise FormatError(f"{path}:{n}: duplicate trial id {parts[0]!r}")
        seen.add(parts[0])
        try:
            rows.append((parts[0], float(parts[1])))
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: bad score {parts[1]!r}") from exc
    return rows


def eer_from_files(score_rows, entries) -> EerResult:
    """Join scores with manifest labels by trial id."""
    labels = {e.trial_id: e.label for e in entries}
    missing = [t for t, _ in score_rows if t not in labels]
    if missing:
        raise ParameterError(f"no label for trial(s): {', '.join(missing[:5])}")
    return compute_eer([s for _, s in score_rows], [labels[t] for t, _ in score_rows])


def score_stacks(stacks, params, batch_size: int = 32) -> np.ndarray:
    """Eval-mode scores for an array of selected-layer stacks (N, S, T, D)."""
    out = []
    for i in range(0, len(stacks), batch_size):
        out.append(forward(np.asarray(stacks[i:i + batch_size]), params).score)
    return np.concatenate(out) if out else np.zeros(0)


def score_manifest(entries, params, source, batch_size: int = 32) -> list[tuple[str, float]]:
    """Eval-mode score for every entry, in manifest order.

    ``source(trial_id)`` returns the trial's LayerStack.
    """
    rows = []
    for i in range(0, len(entries), batch_size):
        chunk = entries[i:i + batch_size]
        stacks = np.stack([select_layers(source(e.trial_id), params.config.layers) for e in chunk])
        scores = score_stacks(stacks, params, batch_size)
        rows.extend((e.trial_id, float(s)) for e, s in zip(chunk, scores))
    return rows
