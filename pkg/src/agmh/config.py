"""Run configuration: ``key = value`` files, a profile selector and overrides.

Resolution order is profile defaults, then the file, then command-line
overrides. Every known key is listed in :data:`KEYS`; anything else is rejected.
"""

from dataclasses import dataclass, field, fields, replace

from .errors import AGMHError
from .hashing import TrainConfig
from .synth import RNG_ALGORITHM, SyntheticSpec


class ConfigError(AGMHError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


PROFILES = ("desk", "paper")
VARIANTS = ("base", "adl", "adl_siea")
DESK_BITS = (12, 24, 32, 48)

# synth fields that would collide with training names get their own key
_SYNTH_RENAME = {"channels": "feature_channels"}
_SYNTH_KEYS = {_SYNTH_RENAME.get(f.name, f.name): f.name for f in fields(SyntheticSpec)}
_TRAIN_KEYS = {f.name: f.name for f in fields(TrainConfig)}
_RUN_KEYS = {
    "profile": "desk",
    "variants": None,  # default: the one variant named by the adl/siea switches
    "features": None,
    "out": None,
    "model": None,
    "codes": None,
    "item": None,
    "top_k": 10,
    "precision_k": 10,
    "repeats": 3,
}
KEYS = sorted(set(_SYNTH_KEYS) | set(_TRAIN_KEYS) | set(_RUN_KEYS))


def _parse_bool(key, raw):
    v = raw.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected on|off, got {raw!r}", key)


def _parse_int_list(key, raw):
    try:
        vals = [int(p) for p in str(raw).replace(" ", "").split(",") if p]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}", key) from None
    if not vals:
        raise ConfigError(f"{key}: empty list", key)
    return vals


def _field_type(cls, name):
    for f in fields(cls):
        if f.name == name:
            return f.type if isinstance(f.type, str) else f.type.__name__
    raise KeyError(name)


def _coerce(key, raw):
    if key == "bits":
        return _parse_int_list(key, raw)
    if key == "variants":
        names = [v for v in str(raw).replace(" ", "").split(",") if v]
        for v in names:
            if v not in VARIANTS:
                raise ConfigError(f"variants: unknown variant {v!r} (known: {', '.join(VARIANTS)})", key)
        if not names:
            raise ConfigError("variants: empty list", key)
        return names
    if key == "profile":
        if raw not in PROFILES:
            raise ConfigError(f"profile: expected paper|desk, got {raw!r}", key)
        return raw
    if key in _TRAIN_KEYS:
        kind = _field_type(TrainConfig, key)
    elif key in _SYNTH_KEYS:
        kind = _field_type(SyntheticSpec, _SYNTH_KEYS[key])
    elif key in ("top_k", "precision_k", "repeats", "item"):
        kind = "int"
    else:
        return str(raw)
    try:
        if kind == "bool":
            return _parse_bool(key, raw)
        if kind == "int":
            return int(raw, 0) if isinstance(raw, str) else int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}", key) from None
    return str(raw)


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment. Returns raw string values."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}", key)
        out[key] = value.strip()
    return out


def _profile_defaults(profile):
    tc = TrainConfig.paper() if profile == "paper" else TrainConfig()
    vals = {k: getattr(tc, k) for k in _TRAIN_KEYS}
    vals["bits"] = [tc.bits] if profile == "paper" else list(DESK_BITS)
    spec = SyntheticSpec()
    vals.update({k: getattr(spec, f) for k, f in _SYNTH_KEYS.items() if f != "seed"})
    vals.update(_RUN_KEYS)
    vals["profile"] = profile
    return vals


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, file_values=None, overrides=None):
        """Merge raw string values from a file and overrides over profile defaults."""
        raw = dict(file_values or {})
        raw.update(overrides or {})
        for key in raw:
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}", key)
        profile = _coerce("profile", raw.get("profile", "desk"))
        vals = _profile_defaults(profile)
        for key, v in raw.items():
            vals[key] = _coerce(key, v)
        rc = cls(vals)
        rc.train_config(rc.bits[0]).validate()
        rc.synth_spec().validate()
        return rc

    def __getitem__(self, key):
        return self.values[key]

    @property
    def bits(self):
        return list(self.values["bits"])

    @property
    def variants(self):
        if self.values["variants"]:
            return list(self.values["variants"])
        return [variant_name(self.values["adl"], self.values["siea"])]

    def train_config(self, bits, variant=None):
        kw = {k: self.values[k] for k in _TRAIN_KEYS if k != "bits"}
        cfg = TrainConfig(bits=int(bits), **kw)
        if variant is not None:
            cfg = replace(cfg, **variant_switches(variant))
        return cfg

    def synth_spec(self):
        kw = {f: self.values[k] for k, f in _SYNTH_KEYS.items()}
        return SyntheticSpec(**kw)

    def header(self):
        """Single-line provenance header for reports."""
        items = [f"{k}={_fmt(self.values[k])}" for k in KEYS if self.values.get(k) is not None]
        items.append(f"rng={RNG_ALGORITHM}")
        return "# config: " + "; ".join(items)


def _fmt(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def variant_name(adl, siea):
    if not adl:
        return "base"
    return "adl_siea" if siea else "adl"


def variant_switches(name):
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}", "variants")
    return {"adl": name != "base", "siea": name == "adl_siea"}
