"""Sectioned key-value experiment configuration.

Format::

    # comment
    [section]
    key = value   # trailing comment

Every key is declared in ``KEYS`` with a type, default and one-line doc.
Unknown sections or keys are hard errors, as are malformed lines; all parse
errors carry the offending line number.
"""

import hashlib
import math
from dataclasses import dataclass

from .exceptions import ConfigError

SAMPLER_KINDS = ("aps", "aps1", "standard", "prior")


@dataclass(frozen=True)
class Key:
    kind: str          # int, float, str, bool, list
    default: object
    doc: str
    choices: tuple = None


KEYS = {
    "prior": {
        "n_templates": Key("int", 3, "number of mixture templates R"),
        "rho": Key("float", 0.05, "per-position corruption probability of a template"),
        "seed": Key("int", 0, "seed for random templates when prior.templates is empty"),
        "templates": Key("str", "", "explicit templates: rows separated by ';', tokens by spaces"),
        "weights": Key("str", "", "explicit template weights, space separated (uniform if empty)"),
    },
    "decoder": {
        "grid_h": Key("int", 4, "token grid height"),
        "grid_w": Key("int", 4, "token grid width"),
        "patch": Key("int", 4, "patch side p; image is (grid_h*p, grid_w*p)"),
        "dim": Key("int", 2, "embedding dimension d"),
        "seed": Key("int", 0, "seed of the decoder weight map"),
        "output": Key("str", "linear", "output stage", ("linear", "tanh")),
    },
    "codebook": {
        "size": Key("int", 4, "vocabulary size K (at most 2^d)"),
    },
    "schedule": {
        "kind": Key("str", "cosine", "masking schedule", ("cosine", "linear")),
        "steps": Key("int", 15, "number of reverse steps T"),
    },
    "measure": {
        "op": Key("str", "pixel_mask", "measurement operator",
                  ("identity", "downsample", "gaussian_blur", "conv_kernel", "pixel_mask",
                   "hdr_clip", "feature_cosine")),
        "sigma": Key("float", 0.05, "observation noise std (inf for a flat likelihood)"),
        "loss": Key("str", "l1", "data loss", ("l1", "l2", "cosine")),
        "lambda_p": Key("float", 1e-3, "perceptual loss weight"),
        "lambda_pp": Key("float", 0.0, "prior-preservation weight (1e-4 is the suggested non-zero value)"),
        "factor": Key("int", 2, "downsample factor"),
        "kernel_side": Key("int", 7, "gaussian blur kernel side"),
        "kernel_std": Key("float", 1.5, "gaussian blur kernel std"),
        "kernel_file": Key("str", "", "kernel file for conv_kernel (rows of space-separated reals)"),
        "keep_rate": Key("float", 0.5, "pixel_mask keep probability"),
        "mask_seed": Key("int", 0, "pixel_mask seed"),
        "mask_per_seed": Key("bool", True, "offset the pixel_mask seed by the run seed"),
        "block": Key("int", 4, "pixel_mask block side (patch-level masking when equal to the patch)"),
        "scale": Key("float", 2.0, "hdr_clip gain"),
        "lo": Key("float", -1.0, "hdr_clip lower bound"),
        "hi": Key("float", 1.0, "hdr_clip upper bound"),
        "feature_seed": Key("int", 0, "feature_cosine seed"),
        "feature_dim": Key("int", 16, "feature_cosine feature count"),
        "perceptual_seed": Key("int", 1, "seed of the perceptual feature map"),
        "perceptual_dim": Key("int", 16, "perceptual feature count"),
    },
    "sampler": {
        "kind": Key("list", ("aps",), "comma-separated sampler kinds", SAMPLER_KINDS),
        "steps": Key("int", 0, "alias for schedule.steps when positive"),
        "seed": Key("int", 0, "base seed mixed into every per-run stream"),
        "stochastic_reveal": Key("bool", False, "thin anchors by the reveal probability (exploratory)"),
        "gumbel": Key("float", 0.0, "gumbel noise scale on confidences (exploratory)"),
    },
    "opt": {
        "inner_steps": Key("int", 100, "inner optimization steps M"),
        "lr": Key("float", 1.0, "Adam learning rate"),
        "lr_decay": Key("str", "harmonic", "learning-rate decay", ("none", "harmonic")),
        "adam_beta1": Key("float", 0.9, "Adam beta1"),
        "adam_beta2": Key("float", 0.999, "Adam beta2"),
        "adam_eps": Key("float", 1e-8, "Adam epsilon"),
        "warm_start": Key("bool", False, "initialize from the previous step's optimized logits"),
    },
    "run": {
        "seeds": Key("int", 1, "number of seeds (0..seeds-1)"),
        "parallel": Key("int", 1, "worker processes"),
        "out": Key("str", "out", "output directory"),
        "images": Key("bool", True, "write PGM images"),
        "fit_samples": Key("int", 500, "samples drawn from the configured prior by fit-prior"),
        "fit_iters": Key("int", 200, "EM iterations for fit-prior"),
    },
}

_REFERENCE = {
    "schedule.steps": 15, "opt.inner_steps": 100, "opt.lr": 1.0,
    "measure.lambda_p": 1e-3, "measure.lambda_pp": 0.0, "measure.sigma": 0.05,
}

PRESETS = {
    "paper-defaults": dict(_REFERENCE),
    "toy-inpaint": {
        **_REFERENCE,
        "schedule.steps": 8, "measure.op": "pixel_mask", "measure.keep_rate": 0.5,
        "measure.block": 4, "measure.loss": "l2", "decoder.patch": 4,
        "sampler.kind": ("aps", "aps1", "standard"), "run.seeds": 50,
    },
    "paper-sr4": {**_REFERENCE, "measure.op": "downsample", "measure.factor": 4},
    "paper-gblur": {**_REFERENCE, "measure.op": "gaussian_blur", "measure.kernel_side": 61,
                    "measure.kernel_std": 3.0},
    "paper-inpaint70": {**_REFERENCE, "measure.op": "pixel_mask", "measure.keep_rate": 0.3},
    "paper-hdr": {**_REFERENCE, "measure.op": "hdr_clip", "measure.scale": 2.0,
                  "measure.lo": -1.0, "measure.hi": 1.0},
}


def _coerce(key, spec, raw, lineno=None):
    raw = raw.strip()
    try:
        if spec.kind == "int":
            value = int(raw)
        elif spec.kind == "float":
            value = float(raw)
            if math.isnan(value):
                raise ValueError
        elif spec.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            value = low == "true"
        elif spec.kind == "list":
            value = tuple(v.strip() for v in raw.split(",") if v.strip())
            if not value:
                raise ValueError
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"bad {spec.kind} value {raw!r} for {key}", lineno) from None
    if spec.choices is not None:
        bad = [v for v in (value if spec.kind == "list" else (value,)) if v not in spec.choices]
        if bad:
            raise ConfigError(f"{key}: {bad[0]!r} not in {spec.choices}", lineno)
    return value


def _lookup(key, lineno=None):
    section, _, name = key.partition(".")
    if section not in KEYS:
        raise ConfigError(f"unknown section {section!r}", lineno)
    if name not in KEYS[section]:
        raise ConfigError(f"unknown key {key!r}", lineno)
    return KEYS[section][name]


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """Typed, validated flat view ``{"section.key": value}`` of a configuration."""

    def __init__(self, values=None):
        self._values = {f"{s}.{k}": spec.default for s, keys in KEYS.items() for k, spec in keys.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value, lineno=None):
        spec = _lookup(key, lineno)
        if not isinstance(value, str):
            value = _format(tuple(value) if spec.kind == "list" else value)
        self._values[key] = _coerce(key, spec, value, lineno)

    def __getitem__(self, key):
        _lookup(key)
        return self._values[key]

    def get(self, key):
        return self[key]

    def as_dict(self):
        return dict(self._values)

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def copy(self, **overrides):
        out = Config(self._values)
        for key, value in overrides.items():
            out.set(key.replace("__", "."), value)
        return out

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    @property
    def steps(self):
        return self["sampler.steps"] or self["schedule.steps"]

    @property
    def length(self):
        return self["decoder.grid_h"] * self["decoder.grid_w"]

    def validate(self):
        d, K = self["decoder.dim"], self["codebook.size"]
        if d < 1 or K < 2 or K > 2 ** d:
            raise ConfigError(f"codebook.size={K} needs 2 <= K <= 2^decoder.dim = {2 ** d}")
        for key in ("decoder.grid_h", "decoder.grid_w", "decoder.patch", "prior.n_templates",
                    "run.seeds", "run.parallel"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be positive")
        if self.steps < 1:
            raise ConfigError("schedule.steps must be positive")
        if self["opt.inner_steps"] < 0:
            raise ConfigError("opt.inner_steps must be non-negative")
        if not 0.0 <= self["prior.rho"] < 1.0:
            raise ConfigError("prior.rho must lie in [0, 1)")
        if self["measure.op"] == "conv_kernel" and not self["measure.kernel_file"]:
            raise ConfigError("measure.op = conv_kernel needs measure.kernel_file")
        if self["prior.templates"]:
            rows = parse_templates(self["prior.templates"])
            if any(len(r) != self.length for r in rows):
                raise ConfigError(f"prior.templates rows must have {self.length} tokens")
            if any(t < 0 or t >= K for r in rows for t in r):
                raise ConfigError("prior.templates token out of range")
            if self["prior.weights"] and len(self["prior.weights"].split()) != len(rows):
                raise ConfigError("prior.weights needs one weight per template")
        return self

    def render(self, docs=True):
        """Text that ``parse_config_text`` maps back to an equal Config."""
        lines = []
        for section, keys in KEYS.items():
            lines.append(f"[{section}]")
            for name, spec in keys.items():
                if docs:
                    lines.append(f"# {spec.doc}")
                lines.append(f"{name} = {_format(self._values[section + '.' + name])}")
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.render(docs=False).encode()).hexdigest()


def parse_templates(text):
    return [[int(t) for t in row.split()] for row in text.split(";") if row.strip()]


def parse_config_text(text, base=None):
    cfg = Config(base.as_dict() if base is not None else None)
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise ConfigError(f"malformed section header {body!r}", lineno)
            section = body[1:-1].strip()
            if section not in KEYS:
                raise ConfigError(f"unknown section {section!r}", lineno)
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        name, raw = (part.strip() for part in body.split("=", 1))
        if not name:
            raise ConfigError("empty key", lineno)
        if "." in name:
            key = name
        elif section is None:
            raise ConfigError(f"key {name!r} outside any section", lineno)
        else:
            key = f"{section}.{name}"
        cfg.set(key, raw, lineno)
    return cfg


def parse_config(path, base=None):
    with open(path) as fh:
        text = fh.read()
    try:
        return parse_config_text(text, base)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def preset(name):
    try:
        return Config(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


def load(path=None, preset_name=None):
    """Preset (or defaults) overlaid by an optional file, validated."""
    cfg = preset(preset_name) if preset_name else Config()
    if path:
        cfg = parse_config(path, base=cfg)
    return cfg.validate()
