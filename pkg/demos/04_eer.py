"""Equal error rate on hand-made score sets.

Higher scores mean "more bona fide". The EER is where the false-acceptance
and false-rejection rates cross, interpolated between neighbouring
thresholds. Ties between classes count against the detector.
"""

from envspoof.evaluation import compute_eer, eer_oracle

cases = {
    "perfectly separated": ([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]),
    "one spoof above a bona": ([0.9, 0.8, 0.3, 0.7, 0.2, 0.1], [1, 1, 1, 0, 0, 0]),
    "all scores tied": ([0.4] * 5, [1, 1, 0, 0, 0]),
    "fully inverted": ([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]),
}
for name, (scores, labels) in cases.items():
    r = compute_eer(scores, labels)
    print(f"{name:24s} {r.report()}   oracle {float(eer_oracle(scores, labels).eer):.6f}")
