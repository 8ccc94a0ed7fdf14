"""Latent counterfactuals: move z_n along the unit gradient of one feature.

For the linear first layer the gradient of s_{n,m} with respect to z_n is
the row W1[n, m]. Stepping by alpha along its unit direction, signed by
the decision weight, changes the class contribution by exactly
alpha * |W2[c, n, m]| * ||W1[n, m]||.
"""
import csv
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import FACTOR_NAMES, measure_factors
from .pgm import to_uint8, write_pgm
from .reasoning import decision_vector, feature_index
from .rng import make_rng

DIRECTIONS = ("enhance", "mitigate")
GUTTER = 2


class InertFeatureError(ValueError):
    pass


class VerificationError(RuntimeError):
    pass


@dataclass
class ManipulationSpec:
    case_id: str
    n: int
    m: int
    c: int
    direction: str
    alpha: float

    def validate(self, head):
        feature_index(head, self.n, self.m)
        if not 0 <= self.c < head.n_classes:
            raise IndexError(f"class {self.c} out of range")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"stepsize alpha must be finite and > 0, got {self.alpha}")


def feature_gradient(head, n, m):
    """Closed-form gradient of s_{n,m} with respect to z_n."""
    feature_index(head, n, m)
    return head.W1_[n, m].astype(np.float64)


def feature_gradient_autodiff(head, n, m, z_n=None):
    """Same gradient through the autodiff engine (float64), for cross-checking."""
    feature_index(head, n, m)
    D = head.latent_dim_
    z = T.Tensor(np.zeros(D) if z_n is None else np.asarray(z_n, dtype=np.float64), requires_grad=True)
    W = T.Tensor(head.W1_[n].astype(np.float64))
    s = T.reshape(z, (1, D)) @ T.transpose(W)
    T.backward(s[0, m])
    return z.grad


def _sign(spec):
    return 1.0 if spec.direction == "enhance" else -1.0


def manipulate(z_n, spec, head):
    spec.validate(head)
    g = feature_gradient(head, spec.n, spec.m)
    norm = np.linalg.norm(g)
    w = float(head.W2_[spec.c, feature_index(head, spec.n, spec.m)])
    if norm == 0 or w == 0:
        raise InertFeatureError(f"feature ({spec.n}, {spec.m}) inert for class {spec.c}")
    return np.asarray(z_n, dtype=np.float64) + _sign(spec) * spec.alpha * np.sign(w) * g / norm


def predicted_contribution_change(head, n, m, c, alpha):
    """Magnitude of the contribution change, alpha * |W2[c, nm]| * ||W1[n, m]||."""
    k = feature_index(head, n, m)
    return float(alpha) * abs(float(head.W2_[c, k])) * float(np.linalg.norm(head.W1_[n, m].astype(np.float64)))


def alpha_for_sigma(head, s_cohort, n, m, k_sigma):
    """Stepsize that shifts s_{n,m} by ``k_sigma`` cohort standard deviations."""
    k = feature_index(head, n, m)
    sd = float(np.std(np.asarray(s_cohort)[:, k]))
    return k_sigma * sd / float(np.linalg.norm(head.W1_[n, m].astype(np.float64)))


@dataclass
class Verification:
    z_new: np.ndarray
    v: float
    v_predicted: float
    v_measured: float


def apply_and_verify(Z_case, spec, head, rtol=1e-5):
    """Manipulate slice ``spec.n`` of one case and check the contribution through the head."""
    Z = np.asarray(Z_case, dtype=np.float64)
    if Z.shape != (head.n_slices, head.latent_dim_):
        raise T.ShapeError("case latents", Z.shape, (head.n_slices, head.latent_dim_))
    k = feature_index(head, spec.n, spec.m)
    z_new = manipulate(Z[spec.n], spec, head)
    Z2 = Z.copy()
    Z2[spec.n] = z_new
    v = decision_vector(head.transform(Z)[0], head, spec.c)
    v2 = decision_vector(head.transform(Z2)[0], head, spec.c)
    dv = predicted_contribution_change(head, spec.n, spec.m, spec.c, spec.alpha)
    predicted = v[k] + _sign(spec) * dv
    measured = v2[k]
    if abs((measured - v[k]) - _sign(spec) * dv) > rtol * max(dv, np.finfo(float).tiny):
        raise VerificationError(f"contribution change {measured - v[k]:.6g} != predicted {_sign(spec) * dv:.6g}")
    M = head.n_features
    other = np.ones(len(v), dtype=bool)
    other[spec.n * M:(spec.n + 1) * M] = False
    if not np.array_equal(v[other], v2[other]):
        raise VerificationError("contributions of non-target slices changed")
    return Verification(z_new, float(v[k]), float(predicted), float(measured))


@dataclass
class CounterfactualResult:
    spec: ManipulationSpec
    z: np.ndarray
    z_new: np.ndarray
    v: float
    v_predicted: float
    v_measured: float
    image: np.ndarray            # decoded from z (unclamped)
    counterfactual: np.ndarray   # decoded from z_new, same x_T
    factors: np.ndarray | None = None          # measured on image
    factors_cf: np.ndarray | None = None       # measured on counterfactual

    @property
    def factor_delta(self):
        if self.factors is None:
            return None
        return self.factors_cf - self.factors


def case_stochastic_code(model, case_id, n_slices, seed):
    """One x_T per slice of a case, keyed by case id."""
    rng = make_rng(seed, "x_T", case_id)
    return rng.standard_normal((n_slices, 1, model.image_size, model.image_size)).astype(np.float32)


def generate_counterfactual(Z_case, spec, model, head, x_T, measure=True):
    """Decode slice ``spec.n`` from original and manipulated latents with the same x_T."""
    ver = apply_and_verify(Z_case, spec, head)
    z = np.asarray(Z_case, dtype=np.float64)[spec.n]
    x_T = np.asarray(x_T, dtype=np.float32).reshape(1, 1, model.image_size, model.image_size)
    pair = model.inverse_transform(np.stack([z, ver.z_new]).astype(np.float32), x_T=np.repeat(x_T, 2, axis=0))
    res = CounterfactualResult(spec, z, ver.z_new, ver.v, ver.v_predicted, ver.v_measured, pair[0], pair[1])
    if measure:
        res.factors = measure_factors(np.clip(pair[0], -1, 1)).as_array()
        res.factors_cf = measure_factors(np.clip(pair[1], -1, 1)).as_array()
    return res


def difference_gray(a, b):
    """cf - original, gray = 128 + 63.75 * d clamped to 0..255; zero difference is 128."""
    d = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    return np.clip(np.round(128.0 + 63.75 * d), 0, 255).astype(np.uint8)


def panel(original, enhanced=None, mitigated=None, gutter=GUTTER):
    """original | enhanced | mitigated, separated by black gutters; missing columns are black."""
    h, w = np.asarray(original).shape
    out = np.zeros((h, 3 * w + 2 * gutter), dtype=np.uint8)
    for i, img in enumerate((original, enhanced, mitigated)):
        if img is not None:
            out[:, i * (w + gutter):i * (w + gutter) + w] = to_uint8(img)
    return out


CSV_HEADER = ["case_id", "n", "m", "c", "direction", "alpha", "v", "v_pred", "v_meas"] + \
    [f"d_{k}" for k in FACTOR_NAMES]


def emit_panels(results, out_dir):
    if not results:
        raise ValueError("no counterfactual results to emit")
    os.makedirs(out_dir, exist_ok=True)
    groups = {}
    for r in results:
        s = r.spec
        groups.setdefault((s.case_id, s.n, s.m, s.c), {})[s.direction] = r
    written = []
    for (cid, n, m, c), by_dir in groups.items():
        base = next(iter(by_dir.values()))
        stem = f"{cid}_n{n}_m{m}_c{c}"
        enh, mit = by_dir.get("enhance"), by_dir.get("mitigate")
        p = os.path.join(out_dir, f"panel_{stem}.pgm")
        write_pgm(p, panel(base.image, enh.counterfactual if enh else None, mit.counterfactual if mit else None))
        written.append(p)
        for d, r in by_dir.items():
            p = os.path.join(out_dir, f"diff_{stem}_{d}.pgm")
            write_pgm(p, difference_gray(np.clip(r.image, -1, 1), np.clip(r.counterfactual, -1, 1)))
            written.append(p)
    p = os.path.join(out_dir, "counterfactuals.csv")
    with open(p, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in results:
            s = r.spec
            delta = r.factor_delta
            fd = ["" if delta is None else f"{x:.9g}" for x in (delta if delta is not None else [None] * 3)]
            w.writerow([s.case_id, s.n, s.m, s.c, s.direction, f"{s.alpha:.9g}",
                        f"{r.v:.9g}", f"{r.v_predicted:.9g}", f"{r.v_measured:.9g}"] + fd)
    written.append(p)
    return written
