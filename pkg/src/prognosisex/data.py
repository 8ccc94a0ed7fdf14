"""Synthetic multi-slice cases with planted factors, plus manifest I/O.

Each case is an ordered tuple of N region images (top to bottom). Three
factors are rendered into every slice: lung-field area, soft opacity blobs
and thin bright vessel segments. The class label is a deterministic rule
on the factors of one slice position, so explanations can be scored
against a known answer.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .pgm import ImageFormatError, from_uint8, read_pgm, to_uint8, write_pgm
from .rng import make_rng

FACTOR_NAMES = ("lung_area", "opacity", "vessels")
MANIFEST_HEADER = ["case_id", "label", "split", "slice_idx", "lung_area", "opacity", "vessels"]

LUNG_LEVEL = -0.5
BACKGROUND = -1.0
VESSEL_LEVEL = 0.9
BLOB_GAIN = 0.9


class DataError(ValueError):
    pass


@dataclass
class FactorRanges:
    lung_area: tuple = (0.7, 1.0)
    opacity: tuple = (0.0, 0.8)
    vessels: tuple = (0.0, 0.8)

    def validate(self):
        bounds = {"lung_area": (0.5, 1.0), "opacity": (0.0, 1.0), "vessels": (0.0, 1.0)}
        for name, (lo, hi) in bounds.items():
            a, b = getattr(self, name)
            if not (lo <= a <= b <= hi):
                raise DataError(f"factor range {name}={a, b} outside [{lo}, {hi}]")

    def sample(self, rng):
        return np.array([rng.uniform(*self.lung_area), rng.uniform(*self.opacity),
                         rng.uniform(*self.vessels)])


@dataclass
class SyntheticConfig:
    n_slices: int = 4
    size: int = 16
    n_cases: int = 600
    prior_class1: float = 0.45
    # slice positions (0-based) carrying class-1 / class-0 evidence
    class1_slice: int = 1
    class0_slice: int = 2
    opacity_threshold: float = 0.6
    vessel_threshold: float = 0.5
    area_threshold: float = 0.65
    # fraction of class-1 cases labelled through the small-lung branch of the rule
    area_route_fraction: float = 0.2
    noise_std: float = 0.0
    background: FactorRanges = field(default_factory=FactorRanges)
    class1_evidence: FactorRanges = field(default_factory=lambda: FactorRanges((0.7, 1.0), (0.65, 1.0), (0.55, 1.0)))
    class1_area_route: FactorRanges = field(default_factory=lambda: FactorRanges((0.5, 0.62), (0.0, 0.6), (0.0, 0.5)))
    class0_evidence: FactorRanges = field(default_factory=lambda: FactorRanges((0.7, 1.0), (0.0, 0.75), (0.0, 0.65)))
    # overlapping cues on class0_slice: visible class-0 evidence, but weaker than the rule slice
    class0_marker: FactorRanges = field(default_factory=lambda: FactorRanges((0.7, 1.0), (0.25, 0.75), (0.0, 0.55)))
    class1_marker: FactorRanges = field(default_factory=lambda: FactorRanges((0.7, 1.0), (0.05, 0.65), (0.1, 0.7)))

    def validate(self):
        if self.n_slices < 1 or self.size < 8:
            raise DataError("n_slices must be >= 1 and size >= 8")
        if not 0.0 < self.prior_class1 < 1.0:
            raise DataError("prior_class1 must lie in (0, 1)")
        for k in (self.class1_slice, self.class0_slice):
            if not 0 <= k < self.n_slices:
                raise DataError(f"evidence slice {k} outside 0..{self.n_slices - 1}")
        for r in (self.background, self.class1_evidence, self.class1_area_route,
                  self.class0_evidence, self.class0_marker, self.class1_marker):
            r.validate()


@dataclass
class CaseRecord:
    case_id: str
    slices: np.ndarray          # (N, H, W) in [-1, 1]
    label: int
    factors: np.ndarray | None = None   # (N, 3): lung_area, opacity, vessels


@dataclass
class DatasetManifest:
    root: str
    rows: list                  # one dict per (case, slice), keys as MANIFEST_HEADER plus "path"

    def case_ids(self):
        seen = {}
        for r in self.rows:
            seen.setdefault(r["case_id"], None)
        return list(seen)

    def labels(self):
        out = {}
        for r in self.rows:
            out.setdefault(r["case_id"], int(r["label"]))
        return out

    def subset(self, case_ids, split=None):
        keep = set(case_ids)
        rows = []
        for r in self.rows:
            if r["case_id"] in keep:
                r = dict(r)
                if split is not None:
                    r["split"] = split
                rows.append(r)
        return DatasetManifest(self.root, rows)

    def __len__(self):
        return len(self.case_ids())


def planted_rule(factors, config=None):
    """Label 1 iff the evidence slice shows (opacity AND vessels) or a small lung field."""
    cfg = config or SyntheticConfig()
    area, op, ves = np.asarray(factors)[cfg.class1_slice]
    high = op > cfg.opacity_threshold and ves > cfg.vessel_threshold
    return int(high or area < cfg.area_threshold)


# -- rendering ---------------------------------------------------------------

def _lung_mask(size, region, n_regions, area_scale):
    # region-dependent anatomy: apex and base smaller than the mid lung
    pos = (region + 0.5) / n_regions
    shape = 0.75 + 0.25 * np.sin(np.pi * pos)
    u = size / 16.0
    ry = 6.3 * u * shape * np.sqrt(area_scale)
    rx = 3.0 * u * (0.85 + 0.15 * shape) * np.sqrt(area_scale)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy = size / 2.0
    mask = np.zeros((size, size), dtype=bool)
    for cx in (size * 0.3, size * 0.7):
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask


def render_slice(factors, region, n_regions, size, rng, noise_std=0.0):
    area, opacity, vessels = factors
    mask = _lung_mask(size, region, n_regions, area)
    img = np.full((size, size), BACKGROUND)
    img[mask] = LUNG_LEVEL
    ys, xs = np.nonzero(mask)
    yy, xx = np.mgrid[0:size, 0:size]
    sigma = 2.0 * size / 16.0
    soft = np.zeros((size, size))
    for _ in range(2):
        i = rng.integers(len(ys))
        soft += np.exp(-((yy - ys[i]) ** 2 + (xx - xs[i]) ** 2) / (2 * sigma ** 2))
    img = np.where(mask, img + BLOB_GAIN * opacity * np.minimum(soft, 1.0), img)
    n_lines = int(round(5 * vessels))
    length = 4.0 * size / 16.0
    for _ in range(n_lines):
        i = rng.integers(len(ys))
        theta = rng.uniform(0, np.pi)
        for t in np.linspace(-length / 2, length / 2, int(4 * length)):
            y = int(round(ys[i] + t * np.sin(theta)))
            x = int(round(xs[i] + t * np.cos(theta)))
            if 0 <= y < size and 0 <= x < size and mask[y, x]:
                img[y, x] = VESSEL_LEVEL
    if noise_std > 0:
        img = img + noise_std * rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def _sample_factors(label, config, rng):
    cfg = config
    f = np.stack([cfg.background.sample(rng) for _ in range(cfg.n_slices)])
    if label == 1:
        marker = cfg.class1_marker
        route = cfg.class1_area_route if rng.uniform() < cfg.area_route_fraction else cfg.class1_evidence
        f[cfg.class1_slice] = route.sample(rng)
    else:
        marker = cfg.class0_marker
        while True:
            f[cfg.class1_slice] = cfg.class0_evidence.sample(rng)
            if planted_rule(f, cfg) == 0:
                break
    if cfg.class0_slice != cfg.class1_slice:
        f[cfg.class0_slice] = marker.sample(rng)
    return f


def generate_case(seed, class_label, config=None, case_id="case"):
    cfg = config or SyntheticConfig()
    cfg.validate()
    if class_label not in (0, 1):
        raise DataError(f"class label must be 0 or 1, got {class_label}")
    rng = make_rng(seed, "case", case_id)
    factors = _sample_factors(class_label, cfg, rng)
    slices = np.stack([render_slice(factors[k], k, cfg.n_slices, cfg.size, rng, cfg.noise_std)
                       for k in range(cfg.n_slices)])
    label = planted_rule(factors, cfg)
    assert label == class_label
    return CaseRecord(case_id, slices, label, factors)


def generate_dataset(seed, config=None):
    cfg = config or SyntheticConfig()
    n1 = int(round(cfg.n_cases * cfg.prior_class1))
    positive = set(make_rng(seed, "labels").permutation(cfg.n_cases)[:n1].tolist())
    return [generate_case(seed, int(i in positive), cfg, f"case{i:04d}") for i in range(cfg.n_cases)]


# -- factor oracle -----------------------------------------------------------

@dataclass
class FactorEstimate:
    lung_area: float
    opacity: float
    vessels: float
    degenerate: bool = False

    def as_array(self):
        return np.array([self.lung_area, self.opacity, self.vessels])


def measure_factors(img, lung_threshold=-0.75, ridge_level=0.5, ridge_contrast=0.05):
    """Non-learned factor estimates for one slice.

    lung_area: foreground fraction of the image. vessels: fraction of image
    pixels that are thin bright ridges. opacity:
    mean intensity lift above the lung-field level over non-ridge lung pixels.
    Ridges are pixels brighter than any opacity blob can get that also stand
    out from their 3x3 neighbourhood (white top-hat).
    """
    x = np.asarray(img, dtype=np.float64)
    mask = x > lung_threshold
    n = mask.sum()
    if n == 0:
        return FactorEstimate(0.0, 0.0, 0.0, degenerate=True)
    tophat = ndimage.white_tophat(x, size=3)
    ridge = mask & (x > ridge_level) & (tophat > ridge_contrast)
    soft = mask & ~ridge
    lift = np.clip(x[soft] - LUNG_LEVEL, 0.0, None).mean() / BLOB_GAIN if soft.any() else 0.0
    return FactorEstimate(float(n / x.size), float(min(4.0 * lift, 1.0)),
                          float(ridge.sum() / x.size))


# -- manifests and splits ----------------------------------------------------

def write_dataset(cases, root, split_of=None):
    """Write slices as PGM and a per-slice manifest CSV; returns the manifest."""
    os.makedirs(root, exist_ok=True)
    rows = []
    for case in cases:
        cdir = os.path.join(root, "slices", case.case_id)
        os.makedirs(cdir, exist_ok=True)
        for k, sl in enumerate(case.slices):
            rel = os.path.join("slices", case.case_id, f"{k}.pgm")
            write_pgm(os.path.join(root, rel), to_uint8(sl))
            f = case.factors[k] if case.factors is not None else (None, None, None)
            rows.append({"case_id": case.case_id, "label": case.label,
                         "split": (split_of or {}).get(case.case_id, ""), "slice_idx": k,
                         "lung_area": f[0], "opacity": f[1], "vessels": f[2], "path": rel})
    manifest = DatasetManifest(root, rows)
    write_manifest(manifest, os.path.join(root, "manifest.csv"))
    return manifest


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_manifest(manifest, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_HEADER)
        for r in manifest.rows:
            w.writerow([_fmt(r[k]) for k in MANIFEST_HEADER])


def read_manifest(path):
    root = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        for r in reader:
            r["label"] = int(r["label"])
            r["slice_idx"] = int(r["slice_idx"])
            for k in FACTOR_NAMES:
                r[k] = float(r[k]) if r[k] != "" else None
            r["path"] = os.path.join("slices", r["case_id"], f"{r['slice_idx']}.pgm")
            rows.append(r)
    return DatasetManifest(root, rows)


def load_case(manifest, case_id):
    rows = sorted((r for r in manifest.rows if r["case_id"] == case_id), key=lambda r: r["slice_idx"])
    if not rows:
        raise DataError(f"unknown case {case_id!r}")
    slices = []
    for r in rows:
        p = os.path.join(manifest.root, r["path"])
        if not os.path.exists(p):
            raise DataError(f"case {case_id}: missing slice file {p}")
        slices.append(from_uint8(read_pgm(p)))
    factors = None
    if all(r["lung_area"] is not None for r in rows):
        factors = np.array([[r[k] for k in FACTOR_NAMES] for r in rows])
    return CaseRecord(case_id, np.stack(slices), rows[0]["label"], factors)


def load_cases(manifest):
    return [load_case(manifest, cid) for cid in manifest.case_ids()]


def load_external(directory, labels_csv, classes=(0, 1)):
    """Ingest ``directory/<case_id>/*.pgm`` with labels from a ``case_id,label`` CSV.

    An optional ``slices`` column lists ``;``-separated paths relative to
    ``directory``; otherwise every PGM in the case folder is used in
    name order.
    """
    rows = []
    with open(labels_csv, newline="") as f:
        reader = csv.DictReader(f)
        if not reader.fieldnames or not {"case_id", "label"} <= set(reader.fieldnames):
            raise DataError(f"{labels_csv}: needs case_id and label columns")
        for rec in reader:
            cid = rec["case_id"]
            try:
                label = int(rec["label"])
            except ValueError:
                label = None
            if label not in classes:
                raise DataError(f"case {cid}: unknown label value {rec['label']!r}")
            if rec.get("slices"):
                paths = [p.strip() for p in rec["slices"].split(";") if p.strip()]
            else:
                cdir = os.path.join(directory, cid)
                if not os.path.isdir(cdir):
                    raise DataError(f"case {cid}: missing slice directory {cdir}")
                paths = sorted(os.path.join(cid, p) for p in os.listdir(cdir) if p.endswith(".pgm"))
            if not paths:
                raise DataError(f"case {cid}: no slice files")
            for k, rel in enumerate(paths):
                full = os.path.join(directory, rel)
                if not os.path.exists(full):
                    raise DataError(f"case {cid}: missing slice file {full}")
                try:
                    read_pgm(full)
                except ImageFormatError as exc:
                    raise DataError(f"case {cid}: {exc}") from None
                rows.append({"case_id": cid, "label": label, "split": "", "slice_idx": k,
                             "lung_area": None, "opacity": None, "vessels": None, "path": rel})
    return DatasetManifest(os.path.abspath(directory), rows)


def _allocate(counts, fraction):
    """Largest-remainder apportionment of round(total * fraction) across strata."""
    total = int(round(sum(counts.values()) * fraction))
    raw = {k: v * fraction for k, v in counts.items()}
    alloc = {k: int(np.floor(r)) for k, r in raw.items()}
    rest = total - sum(alloc.values())
    for k in sorted(raw, key=lambda k: (raw[k] - alloc[k], -k), reverse=True)[:rest]:
        alloc[k] += 1
    return alloc


def split_dataset(manifest, test_fraction=0.2, seed=0, val_fraction=0.2):
    """Stratified case-level split into (train, val, test) manifests.

    ``val_fraction`` is taken from what remains after the test split.
    """
    if not 0.0 < test_fraction < 1.0 or not 0.0 <= val_fraction < 1.0:
        raise DataError("fractions must satisfy 0 < test < 1 and 0 <= val < 1")
    labels = manifest.labels()
    by_class = {}
    for cid, y in labels.items():
        by_class.setdefault(y, []).append(cid)
    if len(labels) < 3:
        raise DataError(f"{len(labels)} cases is too few to split")
    rng = make_rng(seed, "split")
    for y in sorted(by_class):
        ids = sorted(by_class[y])
        by_class[y] = [ids[i] for i in rng.permutation(len(ids))]
    n_test = _allocate({y: len(v) for y, v in by_class.items()}, test_fraction)
    test = {y: v[:n_test[y]] for y, v in by_class.items()}
    rest = {y: v[n_test[y]:] for y, v in by_class.items()}
    n_val = _allocate({y: len(v) for y, v in rest.items()}, val_fraction)
    val = {y: v[:n_val[y]] for y, v in rest.items()}
    train = {y: v[n_val[y]:] for y, v in rest.items()}
    flat = [sum(d.values(), []) for d in (train, val, test)]
    if not flat[0] or not flat[2] or (val_fraction > 0 and not flat[1]):
        raise DataError(f"{len(labels)} cases cannot fill every split")
    return tuple(manifest.subset(ids, name) for ids, name in zip(flat, ("train", "val", "test")))
