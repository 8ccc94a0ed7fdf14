"""Flat ``key = value`` run configuration with dotted section prefixes."""
import hashlib

from .data import SyntheticConfig


class ConfigError(ValueError):
    pass


DESK = {
    "seed": 0,
    "data.n_cases": 600,
    "data.size": 16,
    "data.n_slices": 4,
    "data.prior_class1": 0.45,
    "data.test_fraction": 0.2,
    "data.val_fraction": 0.2,
    "ae.latent_dim": 32,
    "ae.encoder_width": 16,
    "ae.base_width": 32,
    "ae.T": 100,
    "ae.beta_min": 1e-3,
    "ae.beta_max": 0.13,
    "ae.stride": 5,
    "ae.lr": 2e-3,
    "ae.batch_size": 64,
    "ae.steps": 1500,
    "ae.x_T": "random",
    "head.n_features": 2,
    "head.n_classes": 2,
    "head.lr": 1e-2,
    "head.batch_size": 8,
    "head.epochs": 70,
    "cf.alpha_sigma": 2.0,
    "reason.rho": 0.5,
}

# Reference scale of the original clinical setup; documented, not expected to run on a desk.
REFERENCE_SCALE = dict(DESK, **{
    "data.size": 256,
    "data.n_cases": 566,
    "ae.latent_dim": 512,
    "ae.lr": 1e-4,
    "ae.batch_size": 64,
    "head.lr": 1e-5,
    "head.batch_size": 8,
    "head.epochs": 70,
})

PROFILES = {"desk": DESK, "paper-ref": REFERENCE_SCALE}


class RunConfig:
    def __init__(self, values=None, profile="desk"):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        self._v = dict(PROFILES[profile])
        for k, v in (values or {}).items():
            self[k] = v
        self.validate()

    def __getitem__(self, key):
        return self._v[key]

    def __setitem__(self, key, value):
        if key not in DESK:
            raise ConfigError(f"unknown config key {key!r}")
        kind = type(DESK[key])
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer")
        try:
            self._v[key] = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None

    def items(self):
        return sorted(self._v.items())

    def validate(self):
        positive = [k for k, v in self._v.items() if k != "seed" and isinstance(v, (int, float))]
        for k in positive:
            if self._v[k] <= 0:
                raise ConfigError(f"{k} must be positive")
        if not self["data.test_fraction"] < 1 or not self["data.val_fraction"] < 1:
            raise ConfigError("split fractions must be < 1")
        if not 0 < self["reason.rho"] <= 1:
            raise ConfigError("reason.rho must lie in (0, 1]")
        if not 0 < self["ae.beta_min"] <= self["ae.beta_max"] < 1:
            raise ConfigError("need 0 < ae.beta_min <= ae.beta_max < 1")
        if self["ae.x_T"] not in ("random", "inverted"):
            raise ConfigError("ae.x_T must be 'random' or 'inverted'")
        if self["data.size"] % 4:
            raise ConfigError("data.size must be divisible by 4")

    def text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def hash(self):
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()

    def synthetic(self):
        return SyntheticConfig(n_slices=self["data.n_slices"], size=self["data.size"],
                               n_cases=self["data.n_cases"], prior_class1=self["data.prior_class1"])


def parse(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load(path=None, profile=None, overrides=None):
    """Profile defaults, then the file, then overrides. An explicit ``profile`` beats the file's."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as f:
            values = parse(f.read())
    profile = profile or values.pop("profile", "desk")
    values.pop("profile", None)
    values.update(overrides or {})
    return RunConfig(values, profile)
