"""Writes the six-trial eval fixture and its expected output by direct counting."""
import math

TRIALS = [
    ("spkA-1", "spkA-2", 1, 0.90),
    ("spkA-1", "spkB-1", 0, 0.50),
    ("spkB-1", "spkB-2", 1, 0.40),
    ("spkA-2", "spkC-1", 0, 0.10),
    ("spkC-1", "spkC-2", 1, 0.75),
    ("spkC-1", "spkC-3", 1, 0.60),
]
P_TAR, C_MISS, C_FA = 0.01, 1.0, 1.0


def rates(t):
    tar = [s for _, _, l, s in TRIALS if l == 1]
    non = [s for _, _, l, s in TRIALS if l == 0]
    p_miss = sum(1 for s in tar if s < t) / len(tar)
    p_fa = sum(1 for s in non if s >= t) / len(non)
    return p_miss, p_fa


def sweep():
    ts = [-math.inf] + sorted({s for *_, s in TRIALS}) + [math.inf]
    return [(t,) + rates(t) for t in ts]


def eer(points):
    for j, (t, pm, pf) in enumerate(points):
        d = pm - pf
        if d >= 0:
            if d == 0:
                return pm, t
            t0, pm0, pf0 = points[j - 1]
            d0 = pm0 - pf0
            a = -d0 / (d - d0)
            value = pm0 + a * (pm - pm0)
            if math.isinf(t0):
                return value, t
            if math.isinf(t):
                return value, t0
            return value, t0 + a * (t - t0)
    raise ValueError("no crossing")


def min_dcf(points):
    norm = min(P_TAR * C_MISS, (1 - P_TAR) * C_FA)
    best = None
    for t, pm, pf in points:
        c = (C_MISS * P_TAR * pm + C_FA * (1 - P_TAR) * pf) / norm
        if best is None or c < best[0]:
            best = (c, t)
    return best


if __name__ == "__main__":
    with open("scores.txt", "w") as f:
        for e, t, _, s in TRIALS:
            f.write(f"{e} {t} {s:.6f}\n")
    with open("trials.txt", "w") as f:
        for e, t, l, _ in TRIALS:
            f.write(f"{e} {t} {l}\n")
    pts = sweep()
    ev, et = eer(pts)
    dv, dt = min_dcf(pts)
    with open("expected.txt", "w") as f:
        f.write(f"EER(%) {100 * ev:.4f} threshold {et:.6f}\n")
        f.write(f"minDCF {dv:.4f} threshold {dt:.6f}\n")
