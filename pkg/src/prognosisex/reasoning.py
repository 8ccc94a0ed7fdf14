"""Decision vectors v_c = W2[c] * s and class-specific feature identification."""
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .pgm import write_pgm


class ReasoningError(ValueError):
    pass


def decision_vector(s, head, c):
    """Per-feature contributions to the score of class ``c``; sums to that score."""
    if not 0 <= c < head.n_classes:
        raise IndexError(f"class {c} out of range")
    s = np.asarray(s, dtype=np.float64)
    return head.W2_[c].astype(np.float64) * s


def feature_index(head, n, m):
    if not (0 <= n < head.n_slices and 0 <= m < head.n_features):
        raise IndexError(f"feature ({n}, {m}) outside {head.n_slices}x{head.n_features}")
    return n * head.n_features + m


@dataclass
class CohortReasoning:
    case_ids: list
    V: np.ndarray            # (cases, C, N*M)
    scores: np.ndarray       # (cases, C)
    predicted: np.ndarray    # (cases,)
    labels: np.ndarray | None
    n_slices: int
    n_features: int
    mu_in: np.ndarray = field(init=False)    # (C, N*M), NaN where undefined
    mu_out: np.ndarray = field(init=False)
    count_in: np.ndarray = field(init=False)

    def __post_init__(self):
        self.recompute()

    def recompute(self):
        C = self.V.shape[1]
        self.mu_in = np.full((C, self.V.shape[2]), np.nan)
        self.mu_out = np.full_like(self.mu_in, np.nan)
        self.count_in = np.zeros(C, dtype=int)
        for c in range(C):
            sel = self.predicted == c
            self.count_in[c] = int(sel.sum())
            if sel.any():
                self.mu_in[c] = self.V[sel, c].mean(axis=0)
            if (~sel).any():
                self.mu_out[c] = self.V[~sel, c].mean(axis=0)

    def defined(self, c):
        return bool(np.isfinite(self.mu_in[c]).all() and np.isfinite(self.mu_out[c]).all())

    def specificity(self, c):
        if not self.defined(c):
            raise ReasoningError(
                f"class {c}: statistics undefined ({self.count_in[c]} of {len(self.predicted)} "
                "cases predicted as this class); the cohort needs cases predicted in and out of it")
        return self.mu_in[c] - self.mu_out[c]


def cohort_reasoning(Z, head, case_ids=None, labels=None):
    """Decision vectors for every case and class from (cases, slices, D) latents."""
    Z = np.asarray(Z)
    if Z.ndim != 3 or len(Z) == 0:
        raise ReasoningError("cohort is empty")
    s = head.transform(Z)
    V = np.stack([decision_vector(s, head, c) for c in range(head.n_classes)], axis=1)
    y = head.scores(s)
    ids = list(case_ids) if case_ids is not None else [f"case{i}" for i in range(len(Z))]
    lab = None if labels is None else np.asarray(labels, dtype=int)
    return CohortReasoning(ids, V, y, np.argmax(y, axis=1), lab, head.n_slices, head.n_features)


@dataclass
class ClassSpecificSet:
    c: int
    features: list     # [(n, m)], descending score
    scores: list


def identify_class_specific(cohort, c, rho=0.5):
    """Features with positive in-class contribution whose in/out mean gap is within ``rho`` of the largest."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    sigma = cohort.specificity(c)
    top = sigma.max()
    if not top > 0:
        return ClassSpecificSet(c, [], [])
    keep = np.nonzero((cohort.mu_in[c] > 0) & (sigma > 0) & (sigma >= rho * top))[0]
    keep = sorted(keep, key=lambda k: (-sigma[k], k))
    M = cohort.n_features
    return ClassSpecificSet(c, [(int(k // M), int(k % M)) for k in keep], [float(sigma[k]) for k in keep])


def heatmap_gray(values):
    """Min-max map to 0..255: the smallest value is 0, the largest 255; constant input is 128."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)


def reasoning_columns(cohort):
    C, K = cohort.V.shape[1], cohort.V.shape[2]
    M = cohort.n_features
    return [f"v_c{c}_n{k // M}_m{k % M}" for c in range(C) for k in range(K)]


def emit_reasoning_heatmap(cohort, out_dir):
    """Write reasoning.csv, heatmap.pgm (cases x C*N*M) and one heatmap_c<k>.pgm per class."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"csv": os.path.join(out_dir, "reasoning.csv")}
    flat = cohort.V.reshape(len(cohort.case_ids), -1)
    with open(paths["csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "true", "predicted"] + reasoning_columns(cohort))
        for i, cid in enumerate(cohort.case_ids):
            true = "" if cohort.labels is None else int(cohort.labels[i])
            w.writerow([cid, true, int(cohort.predicted[i])] + [f"{x:.9g}" for x in flat[i]])
    paths["heatmap"] = os.path.join(out_dir, "heatmap.pgm")
    write_pgm(paths["heatmap"], heatmap_gray(flat))
    for c in range(cohort.V.shape[1]):
        paths[f"heatmap_c{c}"] = os.path.join(out_dir, f"heatmap_c{c}.pgm")
        write_pgm(paths[f"heatmap_c{c}"], heatmap_gray(cohort.V[:, c]))
    return paths


def read_reasoning_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    cols = [k for k in rows[0] if k.startswith("v_")]
    return [r["case_id"] for r in rows], np.array([[float(r[k]) for k in cols] for r in rows])


def write_class_specific(sets, cohort, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "n", "m", "score", "mu_in", "mu_out"])
        for cs in sets:
            for (n, m), sc in zip(cs.features, cs.scores):
                k = n * cohort.n_features + m
                w.writerow([cs.c, n, m, f"{sc:.9g}", f"{cohort.mu_in[cs.c, k]:.9g}",
                            f"{cohort.mu_out[cs.c, k]:.9g}"])


def read_class_specific(path):
    with open(path, newline="") as f:
        return [(int(r["class"]), int(r["n"]), int(r["m"]), float(r["score"])) for r in csv.DictReader(f)]
