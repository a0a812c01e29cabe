"""Run configuration: a plain ``key = value`` text format.

Keys are the :class:`~scdl.train.TrainConfig` field names, dataset fields
prefixed with ``data.``, plus ``test_samples``, ``test_seed``, ``data_dir``
and ``seeds`` (comma separated).  Blank lines and ``#`` comments are ignored.
Tuple values are comma separated.
"""
import dataclasses
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SyntheticDatasetSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    test_samples: int = 50
    test_seed: int = 12345
    data_dir: str = ""
    seeds: tuple = (0,)

    def validate(self):
        try:
            self.train.validate()
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.test_samples < 1:
            raise ConfigError("invariant violated: test_samples >= 1")
        if not self.seeds:
            raise ConfigError("invariant violated: at least one seed")

    def with_seed(self, seed):
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed),
                                   seeds=(seed,))

    def test_spec(self):
        return dataclasses.replace(self.data, num_samples=self.test_samples, seed=self.test_seed,
                                   labeled_frac=1.0)


def _parse_value(raw, kind, key):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _kind(f):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    return {"bool": bool, "int": int, "float": float, "tuple": tuple}.get(t, str)


def set_key(cfg, key, raw):
    if key == "seeds":
        try:
            cfg.seeds = tuple(int(v) for v in str(raw).split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"bad value for seeds: {raw!r}") from None
        return
    if key.startswith("data."):
        target, name = cfg.data, key[5:]
    elif key in {f.name for f in fields(RunConfig)} - {"train", "data"}:
        target, name = cfg, key
    else:
        target, name = cfg.train, key
    match = [f for f in fields(target) if f.name == name]
    if not match:
        raise ConfigError(f"unknown config key {key!r}")
    value = raw if not isinstance(raw, str) else _parse_value(raw, _kind(match[0]), key)
    setattr(target, name, value)


def parse(text):
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg


def load(path):
    return parse(Path(path).read_text())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def canonical_text(cfg, include_seed=True):
    """Sorted ``key = value`` lines; the hashed form omits seeds."""
    lines = []
    for f in fields(cfg.train):
        if f.name == "seed" and not include_seed:
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg.train, f.name))}")
    for f in fields(cfg.data):
        lines.append(f"data.{f.name} = {_fmt(getattr(cfg.data, f.name))}")
    lines.append(f"test_samples = {cfg.test_samples}")
    lines.append(f"test_seed = {cfg.test_seed}")
    lines.append(f"data_dir = {cfg.data_dir}")
    if include_seed:
        lines.append(f"seeds = {_fmt(cfg.seeds)}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(cfg):
    return f"{zlib.crc32(canonical_text(cfg, include_seed=False).encode()):08x}"
