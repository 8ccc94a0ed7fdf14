"""Pipeline stages. Each stage reads/writes files under a run directory and
records what it produced in ``run_manifest.json``."""
import csv
import json
import os

import numpy as np

from . import checkpoint
from .counterfactual import (DIRECTIONS, ManipulationSpec, alpha_for_sigma, case_stochastic_code,
                             emit_panels, generate_counterfactual)
from .data import (DatasetManifest, generate_dataset, load_cases, read_manifest, split_dataset,
                   write_dataset)
from .diffusion import DiffusionAutoencoder
from .head import PrognosticHead
from .metrics import evaluate as evaluate_metrics
from .pgm import to_uint8, write_pgm
from .reasoning import (cohort_reasoning, emit_reasoning_heatmap, identify_class_specific,
                        read_class_specific, write_class_specific)


class StageError(RuntimeError):
    pass


class MissingInputError(StageError):
    pass


def _require(path):
    if not os.path.exists(path):
        raise MissingInputError(f"missing input: {path}")
    return path


def record(out_dir, stage, cfg, inputs=(), outputs=(), extra=None):
    """Merge one stage entry into the run manifest (no timestamps, relative paths)."""
    path = os.path.join(out_dir, "run_manifest.json")
    manifest = {}
    if os.path.exists(path):
        with open(path) as f:
            manifest = json.load(f)
    entry = {
        "config_hash": cfg.hash(),
        "seed": cfg["seed"],
        "inputs": {os.path.basename(p): checkpoint.file_hash(p) for p in inputs},
        "outputs": {os.path.relpath(p, out_dir): checkpoint.file_hash(p) for p in sorted(outputs)},
    }
    if extra:
        entry.update(extra)
    manifest.setdefault("stages", {})[stage] = entry
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def manifest_path(data):
    """Accept either a data directory or the manifest CSV itself."""
    return data if data.endswith(".csv") else os.path.join(data, "manifest.csv")


def load_data(data):
    return read_manifest(_require(manifest_path(data)))


def _splits(manifest):
    return {r["case_id"]: r["split"] for r in manifest.rows}


def split_of(manifest, split):
    if split == "all":
        return manifest
    ids = sorted({r["case_id"] for r in manifest.rows if r["split"] == split})
    if not ids:
        raise StageError(f"split {split!r} is empty")
    keep = [c for c in manifest.case_ids() if c in set(ids)]
    return manifest.subset(keep)


# -- stages --

def gen_data(cfg, out_dir):
    cases = generate_dataset(cfg["seed"], cfg.synthetic())
    stub = DatasetManifest(out_dir, [{"case_id": c.case_id, "label": c.label} for c in cases])
    parts = split_dataset(stub, cfg["data.test_fraction"], cfg["seed"], cfg["data.val_fraction"])
    assign = {r["case_id"]: r["split"] for p in parts for r in p.rows}
    manifest = write_dataset(cases, out_dir, assign)
    outputs = [os.path.join(out_dir, "manifest.csv")] + [os.path.join(out_dir, r["path"]) for r in manifest.rows]
    record(out_dir, "gen-data", cfg, outputs=outputs)
    return manifest


def _slices(cases):
    return np.concatenate([c.slices for c in cases])


def make_autoencoder(cfg, verbose=False):
    return DiffusionAutoencoder(
        image_size=cfg["data.size"], latent_dim=cfg["ae.latent_dim"], encoder_width=cfg["ae.encoder_width"],
        base_width=cfg["ae.base_width"], n_timesteps=cfg["ae.T"], beta_min=cfg["ae.beta_min"],
        beta_max=cfg["ae.beta_max"], sampling_stride=cfg["ae.stride"], learning_rate=cfg["ae.lr"],
        batch_size=cfg["ae.batch_size"], n_steps=cfg["ae.steps"], random_state=cfg["seed"], verbose=verbose)


def make_head(cfg):
    return PrognosticHead(n_slices=cfg["data.n_slices"], n_features=cfg["head.n_features"],
                          n_classes=cfg["head.n_classes"], learning_rate=cfg["head.lr"],
                          batch_size=cfg["head.batch_size"], epochs=cfg["head.epochs"],
                          random_state=cfg["seed"])


def train_ae(cfg, data_dir, out_dir, verbose=False):
    """Train on train+val slices; test slices stay held out."""
    manifest = load_data(data_dir)
    split = _splits(manifest)
    train = [c for c in load_cases(manifest) if split[c.case_id] != "test"]
    if not train:
        raise StageError("no training cases outside the test split")
    model = make_autoencoder(cfg, verbose).fit(_slices(train))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "ae.pgxc")
    model.save(path)
    hist = os.path.join(out_dir, "ae_loss.csv")
    with open(hist, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows([i + 1, f"{l:.9g}"] for i, l in enumerate(model.loss_history_))
    record(out_dir, "train-ae", cfg, inputs=[manifest_path(data_dir)], outputs=[path, hist])
    return model


def reconstruct(cfg, data_dir, ae_path, out_dir, split="test", case_ids=None):
    model = DiffusionAutoencoder.load(_require(ae_path))
    manifest = split_of(load_data(data_dir), split)
    cases = load_cases(manifest)
    if case_ids:
        cases = [c for c in cases if c.case_id in set(case_ids)]
        if not cases:
            raise StageError(f"none of the requested cases found: {case_ids}")
    os.makedirs(os.path.join(out_dir, "recon"), exist_ok=True)
    outputs, errs = [], []
    table = os.path.join(out_dir, "reconstruction.csv")
    with open(table, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "slice_idx", "l1"])
        for c in cases:
            x_T = stochastic_codes(cfg, model, c.case_id, c.slices)
            rec = model.inverse_transform(model.transform(c.slices), x_T=x_T)
            for k in range(len(c.slices)):
                err = float(np.mean(np.abs(rec[k] - c.slices[k])))
                errs.append(err)
                w.writerow([c.case_id, k, f"{err:.9g}"])
                p = os.path.join(out_dir, "recon", f"{c.case_id}_{k}.pgm")
                write_pgm(p, to_uint8(rec[k]))
                outputs.append(p)
    outputs.append(table)
    record(out_dir, "reconstruct", cfg, inputs=[ae_path], outputs=outputs,
           extra={"mean_l1": float(np.mean(errs))})
    return float(np.mean(errs))


def stochastic_codes(cfg, model, case_id, slices):
    """x_T per slice: seeded noise keyed by case id, or DDIM-inverted from the slices."""
    if cfg["ae.x_T"] == "inverted":
        return model.invert(slices)
    return case_stochastic_code(model, case_id, len(slices), cfg["seed"])


def encode_cases(model, cases):
    return {c.case_id: model.transform(c.slices) for c in cases}


def write_latents(path, latents):
    checkpoint.save(path, {f"z.{cid}": z for cid, z in latents.items()})


def read_latents(path):
    return {k[2:]: v for k, v in checkpoint.load(_require(path)).items() if k.startswith("z.")}


def train_head(cfg, data_dir, ae_path, out_dir):
    model = DiffusionAutoencoder.load(_require(ae_path))
    manifest = load_data(data_dir)
    cases = load_cases(manifest)
    latents = encode_cases(model, cases)
    os.makedirs(out_dir, exist_ok=True)
    lat_path = os.path.join(out_dir, "latents.pgxc")
    write_latents(lat_path, latents)
    split = _splits(manifest)
    by_split = {s: [c for c in cases if split[c.case_id] == s] for s in ("train", "val")}
    if not by_split["train"] or not by_split["val"]:
        raise StageError("train-head needs non-empty train and val splits")

    def stack(cs):
        return np.stack([latents[c.case_id] for c in cs]), np.array([c.label for c in cs])

    Ztr, ytr = stack(by_split["train"])
    Zva, yva = stack(by_split["val"])
    head = make_head(cfg).fit(Ztr, ytr, Zva, yva)
    path = os.path.join(out_dir, "head.pgxc")
    head.save(path)
    hist = os.path.join(out_dir, "head_history.csv")
    with open(hist, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "val_auc"])
        for h in head.history_:
            w.writerow([h["epoch"], f"{h['loss']:.9g}", f"{h['val_auc']:.9g}"])
    record(out_dir, "train-head", cfg, inputs=[ae_path, manifest_path(data_dir)],
           outputs=[path, hist, lat_path], extra={"best_epoch": head.best_epoch_, "best_val_auc": head.best_val_auc_})
    return head


def _cohort_latents(cfg, data_dir, ae_path, latents_path, split):
    manifest = split_of(load_data(data_dir), split)
    if latents_path and os.path.exists(latents_path):
        latents = read_latents(latents_path)
        if all(c in latents for c in manifest.case_ids()):
            return manifest, latents
    model = DiffusionAutoencoder.load(_require(ae_path))
    return manifest, encode_cases(model, load_cases(manifest))


def evaluate(cfg, data_dir, ae_path, head_path, out_dir, split="test", latents_path=None):
    head = PrognosticHead.load(_require(head_path))
    manifest, latents = _cohort_latents(cfg, data_dir, ae_path, latents_path, split)
    ids = manifest.case_ids()
    labels = manifest.labels()
    Z = np.stack([latents[c] for c in ids])
    y = np.array([labels[c] for c in ids])
    p = head.predict_proba(Z)
    report = evaluate_metrics(y, p[:, 1])
    os.makedirs(out_dir, exist_ok=True)
    mpath = os.path.join(out_dir, "metrics.csv")
    row = report.as_row()
    with open(mpath, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "n"] + list(row))
        w.writerow([split, len(ids)] + [f"{v:.9g}" for v in row.values()])
    ppath = os.path.join(out_dir, "predictions.csv")
    with open(ppath, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "label", "p1", "predicted"])
        for cid, yi, pi in zip(ids, y, p[:, 1]):
            w.writerow([cid, int(yi), f"{pi:.9g}", int(pi >= 0.5)])
    record(out_dir, "eval", cfg, inputs=[head_path], outputs=[mpath, ppath])
    return report


def reason(cfg, data_dir, ae_path, head_path, out_dir, split="all", rho=None, latents_path=None):
    rho = cfg["reason.rho"] if rho is None else rho
    head = PrognosticHead.load(_require(head_path))
    manifest, latents = _cohort_latents(cfg, data_dir, ae_path, latents_path, split)
    ids = manifest.case_ids()
    labels = manifest.labels()
    cohort = cohort_reasoning(np.stack([latents[c] for c in ids]), head, ids, [labels[c] for c in ids])
    paths = emit_reasoning_heatmap(cohort, out_dir)
    sets = [identify_class_specific(cohort, c, rho) for c in range(head.n_classes) if cohort.defined(c)]
    cs_path = os.path.join(out_dir, "class_specific.csv")
    write_class_specific(sets, cohort, cs_path)
    record(out_dir, "reason", cfg, inputs=[head_path], outputs=list(paths.values()) + [cs_path],
           extra={"rho": rho})
    return cohort, sets


def counterfactual(cfg, data_dir, ae_path, head_path, out_dir, cls=1, feature=None, auto=False,
                   directions=DIRECTIONS, alpha_sigma=None, case_ids=None, n_cases=5, split="test",
                   reasoning_dir=None, latents_path=None):
    alpha_sigma = cfg["cf.alpha_sigma"] if alpha_sigma is None else alpha_sigma
    model = DiffusionAutoencoder.load(_require(ae_path))
    head = PrognosticHead.load(_require(head_path))
    manifest, latents = _cohort_latents(cfg, data_dir, ae_path, latents_path, split)
    ids = manifest.case_ids()
    s_cohort = head.transform(np.stack([latents[c] for c in ids]))
    if auto:
        cs_path = os.path.join(reasoning_dir or out_dir, "class_specific.csv")
        if os.path.exists(cs_path):
            features = [(n, m) for c, n, m, _ in read_class_specific(cs_path) if c == cls]
        else:
            cohort = cohort_reasoning(np.stack([latents[c] for c in ids]), head, ids)
            features = identify_class_specific(cohort, cls, cfg["reason.rho"]).features
        if not features:
            raise StageError(f"no class-specific features identified for class {cls}")
    elif feature is not None:
        features = [tuple(feature)]
    else:
        raise StageError("give --feature n,m or --auto")
    chosen = list(case_ids) if case_ids else ids[:n_cases]
    missing = [c for c in chosen if c not in latents]
    if missing:
        raise StageError(f"unknown case ids: {missing}")
    cases = {c.case_id: c for c in load_cases(manifest.subset(chosen))}
    cache_dir = os.path.join(out_dir, "cache")
    os.makedirs(cache_dir, exist_ok=True)
    results = []
    outputs = []
    for cid in chosen:
        cache = os.path.join(cache_dir, f"{cid}_seed{cfg['seed']}_{cfg['ae.x_T']}.pgxc")
        if os.path.exists(cache):
            rec = checkpoint.load(cache)
            Z, x_T = rec["z"], rec["x_T"]
        else:
            Z = latents[cid]
            x_T = stochastic_codes(cfg, model, cid, cases[cid].slices)
            checkpoint.save(cache, {"z": Z, "x_T": x_T})
        outputs.append(cache)
        for n, m in features:
            alpha = alpha_for_sigma(head, s_cohort, n, m, alpha_sigma)
            for d in directions:
                spec = ManipulationSpec(cid, n, m, cls, d, alpha)
                results.append(generate_counterfactual(Z, spec, model, head, x_T[n],
                                                        measure=cases[cid].factors is not None))
    outputs += emit_panels(results, out_dir)
    record(out_dir, "counterfactual", cfg, inputs=[ae_path, head_path], outputs=outputs,
           extra={"alpha_sigma": alpha_sigma, "features": [list(f) for f in features], "class": cls})
    return results
