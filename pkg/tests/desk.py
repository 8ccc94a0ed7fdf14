"""Full desk-scale pipeline run shared by the acceptance checks.

Training takes tens of minutes on one core, so the finished run is kept in
``$PROGNOSISEX_ACCEPTANCE_DIR`` (default ``tests/.acceptance``), keyed by the
config hash and a hash of the package sources. Any code or config change
forces a fresh run.
"""
import glob
import hashlib
import json
import os
import time

import prognosisex
from prognosisex import pipeline as P
from prognosisex.config import RunConfig

CACHE = os.environ.get("PROGNOSISEX_ACCEPTANCE_DIR", os.path.join(os.path.dirname(__file__), ".acceptance"))


def source_hash():
    h = hashlib.sha256()
    for p in sorted(glob.glob(os.path.join(os.path.dirname(prognosisex.__file__), "*.py"))):
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def desk_config():
    return RunConfig()


def run(log=print):
    cfg = desk_config()
    key = {"config": cfg.hash(), "source": source_hash()}
    data, out = os.path.join(CACHE, "data"), os.path.join(CACHE, "run")
    stamp = os.path.join(CACHE, "complete.json")
    if os.path.exists(stamp):
        with open(stamp) as f:
            done = json.load(f)
        if done["key"] == key:
            return cfg, data, out, done["seconds"]
    seconds = {}

    def timed(name, fn, *a, **kw):
        t = time.process_time()
        res = fn(*a, **kw)
        seconds[name] = time.process_time() - t
        log(f"[desk] {name}: {seconds[name]:.0f}s CPU")
        return res

    os.makedirs(CACHE, exist_ok=True)
    timed("gen-data", P.gen_data, cfg, data)
    timed("train-ae", P.train_ae, cfg, data, out, verbose=True)
    ae = os.path.join(out, "ae.pgxc")
    timed("reconstruct", P.reconstruct, cfg, data, ae, out, "test")
    timed("train-head", P.train_head, cfg, data, ae, out)
    head, lat = os.path.join(out, "head.pgxc"), os.path.join(out, "latents.pgxc")
    timed("eval", P.evaluate, cfg, data, ae, head, out, "test", lat)
    timed("reason", P.reason, cfg, data, ae, head, out, "all", None, lat)
    with open(stamp, "w") as f:
        json.dump({"key": key, "seconds": seconds}, f, indent=2)
    return cfg, data, out, seconds


if __name__ == "__main__":
    run()
