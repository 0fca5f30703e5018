"""Flat ``key = value`` run configuration with dotted keys.

Every key has a type and a default; unknown keys, malformed values and
out-of-range numbers raise ``ConfigError``.  Lists are comma separated.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | str | bool | ints | strs
    default: Any
    doc: str
    check: Callable[[Any], bool] | None = None
    choices: tuple[str, ...] = ()


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _all_positive(vs):
    return len(vs) > 0 and all(v > 0 for v in vs)


def _folds(vs):
    return len(vs) > 0 and all(0 <= v < 4 for v in vs) and len(set(vs)) == len(vs)


def _unit(v):
    return 0 <= v < 1


METHOD_NAMES = ("vanilla", "tap", "decoder_ft", "full_ft")

KEYS: dict[str, Key] = {
    "data.root": Key("str", "data", "dataset directory (relative paths resolve against the config file)"),
    "data.image_size": Key("int", 32, "square image side in pixels", _positive),
    "data.seed": Key("int", 0, "seed for the sample pool and evaluation episode lists", _non_negative),
    "data.samples_per_class": Key("int", 150, "pooled samples anchored on each class", _positive),
    "data.samples_per_pair": Key("int", 50, "pooled samples for each same-fold class pair", _non_negative),
    "data.folds": Key("ints", [0, 1, 2, 3], "folds to prepare, train and evaluate", _folds),
    "model.variant": Key("str", "conv", "encoder variant", choices=("conv", "attention")),
    "model.channels": Key("int", 32, "conv encoder width C", _positive),
    "model.dim": Key("int", 32, "feature dimension D", _positive),
    "model.blocks": Key("int", 3, "encoder blocks L", _positive),
    "model.patch": Key("int", 4, "attention patch size P", _positive),
    "model.tau": Key("float", 10.0, "initial decoder temperature"),
    "model.seed": Key("int", 0, "weight initialisation seed", _non_negative),
    "meta.dir": Key("str", "checkpoints", "per-fold checkpoint directory"),
    "meta.steps": Key("int", 2000, "meta-training episodes", _non_negative),
    "meta.lr": Key("float", 1e-3, "meta-training Adam learning rate", _positive),
    "meta.ways": Key("ints", [1, 2], "N values cycled during meta-training", _all_positive),
    "meta.shots": Key("int", 2, "K during meta-training", _positive),
    "meta.seed": Key("int", 0, "meta-training episode stream seed", _non_negative),
    "eval.methods": Key("strs", ["vanilla", "decoder_ft", "tap"], "methods to evaluate", choices=METHOD_NAMES),
    "eval.ways": Key("ints", [2], "N values", _all_positive),
    "eval.shots": Key("ints", [5], "K values", _all_positive),
    "eval.episodes": Key("int", 50, "episodes per fold, run and (N, K)", _positive),
    "eval.runs": Key("int", 3, "independent episode draws averaged in the report", _positive),
    "eval.seed": Key("int", 0, "adapter initialisation seed", _non_negative),
    "eval.iterations": Key("int", 8, "adaptation iterations T", _non_negative),
    "eval.workers": Key("int", 1, "episode worker threads", _positive),
    "eval.select": Key("str", "identity", "context selection", choices=("identity", "random_k")),
    "eval.select_j": Key("int", 1, "context size for random_k", _positive),
    "eval.gamma": Key("float", 2.0, "focal loss gamma", _non_negative),
    "eval.weight_mode": Key("str", "inverse_log_frequency", "focal class weighting",
                            choices=("inverse_log_frequency", "uniform")),
    "eval.support_grad": Key("bool", True, "let gradients flow through the context features"),
    "eval.query_presence": Key("str", "all", "query class presence policy", choices=("all", "subset")),
    "eval.adam.beta1": Key("float", 0.9, "Adam beta1", _unit),
    "eval.adam.beta2": Key("float", 0.999, "Adam beta2", _unit),
    "eval.adam.eps": Key("float", 1e-8, "Adam epsilon", _positive),
    "eval.tap.rank": Key("int", 16, "adapter rank r", _positive),
    "eval.tap.alpha": Key("float", 1.0, "adapter scale alpha"),
    "eval.tap.lr": Key("float", 1e-3, "adapter learning rate", _positive),
    "eval.decoder_ft.lr": Key("float", 1e-3, "decoder fine-tuning learning rate", _positive),
    "eval.full_ft.lr": Key("float", 1e-3, "full fine-tuning learning rate (profiling)", _positive),
    "sweep.ranks": Key("ints", [2, 4, 8, 16, 32, 64], "adapter ranks", _all_positive),
    "sweep.iterations": Key("int", 8, "iterations tracked per rank", _non_negative),
    "sweep.episodes": Key("int", 20, "episodes per fold", _positive),
    "sweep.folds": Key("ints", [0], "folds swept", _folds),
    "sweep.ways": Key("int", 2, "N for the sweep", _positive),
    "sweep.shots": Key("int", 5, "K for the sweep", _positive),
    "oneshot.episodes": Key("int", 20, "episodes per fold and shot setting", _positive),
    "oneshot.iterations": Key("int", 8, "iterations tracked", _non_negative),
    "oneshot.ways": Key("int", 1, "N for the study", _positive),
    "oneshot.copies": Key("int", 2, "replication factor for the single support pair", _positive),
    "oneshot.folds": Key("ints", [0, 1, 2, 3], "folds studied", _folds),
    "out.dir": Key("str", "runs", "report directory"),
}


PATH_KEYS = ("data.root", "meta.dir", "out.dir")


def _parse_value(key: str, entry: Key, raw: str):
    raw = raw.strip()
    try:
        if entry.kind == "int":
            value = int(raw)
        elif entry.kind == "float":
            value = float(raw)
        elif entry.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            value = low in ("true", "1", "yes")
        elif entry.kind == "ints":
            value = [int(x) for x in raw.split(",") if x.strip()]
        elif entry.kind == "strs":
            value = [x.strip() for x in raw.split(",") if x.strip()]
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {entry.kind}") from None
    if entry.choices:
        items = value if isinstance(value, list) else [value]
        bad = [v for v in items if v not in entry.choices]
        if bad or not items:
            raise ConfigError(f"{key}: {raw!r} not in {', '.join(entry.choices)}")
    if entry.kind == "float" and value != value:
        raise ConfigError(f"{key}: NaN is not allowed")
    if entry.check is not None and not entry.check(value):
        raise ConfigError(f"{key}: value {raw!r} out of range ({entry.doc})")
    return value


def parse(text: str) -> dict[str, Any]:
    """Parse config text into ``{key: typed value}`` for the keys present."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, KEYS[key], raw)
    return values


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]
    base_dir: Path = Path(".")

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        return self.values[key]

    def path(self, key: str) -> Path:
        p = Path(self[key])
        return p if p.is_absolute() else (self.base_dir / p)

    def with_overrides(self, **overrides) -> "RunConfig":
        vals = dict(self.values)
        for dotted, value in overrides.items():
            key = dotted.replace("__", ".")
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            vals[key] = value
        return RunConfig(vals, self.base_dir)

    def dump(self) -> str:
        """Fully resolved text with absolute paths; loading it from anywhere reproduces ``cfg``."""
        lines = []
        for k in KEYS:
            value = str(self.path(k).resolve()) if k in PATH_KEYS else _format(self.values[k])
            lines.append(f"{k} = {value}\n")
        return "".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {k: self.values[k] for k in KEYS}

    @classmethod
    def from_text(cls, text: str, base_dir: Path | str = ".") -> "RunConfig":
        vals = {k: entry.default for k, entry in KEYS.items()}
        vals.update(parse(text))
        cfg = cls(vals, Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, path.parent.resolve())

    def validate(self) -> None:
        size = self["data.image_size"]
        stride = 2 if self["model.variant"] == "conv" else self["model.patch"]
        if size % stride:
            raise ConfigError(f"data.image_size {size} not divisible by encoder stride {stride}")
        for n in self["eval.ways"] + self["meta.ways"] + [self["sweep.ways"], self["oneshot.ways"]]:
            if n > 3:
                raise ConfigError(f"N={n} exceeds the 3 classes of a fold")


def reference() -> str:
    """Markdown table of every key, its default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for k, entry in KEYS.items():
        extra = f" ({' / '.join(entry.choices)})" if entry.choices else ""
        rows.append(f"| `{k}` | `{_format(entry.default)}` | {entry.doc}{extra} |")
    return "\n".join(rows)
