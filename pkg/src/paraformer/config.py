"""Flat ``key = value`` run configuration.

One file holds model, training, dataset and output settings; ``#`` starts a
comment. Every key must be known: a typo is an error, never a silent default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import Dataset, load_cifar_binary, load_idx, standardize, synth_clusters
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATASETS = ("synthetic", "idx", "cifar10")


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    train_limit: int = 6000
    test_limit: int = 1000
    full_data: bool = False
    standardize: bool = False
    synth_train: int = 512
    synth_test: int = 256
    synth_noise: float = 0.35
    synth_seed: int = 0

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/latest"


# flat key -> (section, field name)
def _key_table() -> dict[str, tuple[str, str]]:
    table: dict[str, tuple[str, str]] = {}
    for f in dataclasses.fields(ModelConfig):
        table[f.name] = ("model", f.name)
    for f in dataclasses.fields(TrainConfig):
        table["shuffle_seed" if f.name == "seed" else f.name] = ("train", f.name)
    for f in dataclasses.fields(DataConfig):
        table[f.name] = ("data", f.name)
    table["out_dir"] = ("run", "out_dir")
    return table


KEYS = _key_table()

_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _field_type(section: str, name: str) -> str:
    if section == "run":
        return "str"
    for f in dataclasses.fields(_SECTION_TYPES[section]):
        if f.name == name:
            return str(f.type)
    raise KeyError(name)


def _convert(key: str, raw: str, type_name: str):
    raw = raw.strip()
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if type_name.startswith("tuple"):
            if raw.lower() in ("", "none"):
                return None
            return tuple(int(v) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type_name}") from exc
    return raw


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build(pairs: dict[str, str]) -> RunConfig:
    sections: dict[str, dict] = {"model": {}, "train": {}, "data": {}, "run": {}}
    for key, raw in pairs.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        section, name = KEYS[key]
        sections[section][name] = _convert(key, raw, _field_type(section, name))
    return RunConfig(model=ModelConfig(**sections["model"]),
                     train=TrainConfig(**sections["train"]),
                     data=DataConfig(**sections["data"]),
                     out_dir=sections["run"].get("out_dir", RunConfig.out_dir))


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional) and apply ``key=value`` overrides in order."""
    pairs: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        pairs.update(parse_pairs(path.read_text().splitlines(), str(path)))
    pairs.update(parse_pairs(overrides, "--set"))
    return build(pairs)


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, name) in KEYS.items():
        obj = cfg if section == "run" else getattr(cfg, section)
        value = getattr(obj, name)
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).is_file():
            return directory / name
    raise FileNotFoundError(f"{directory / stem}[.gz] not found")


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train and test splits as described by the run config."""
    d, m = cfg.data, cfg.model
    if d.dataset == "synthetic":
        shape = (m.image_height, m.image_width, m.channels)
        train = synth_clusters(d.synth_seed, m.n_classes, d.synth_train, shape, d.synth_noise,
                               "train")
        test = synth_clusters(d.synth_seed, m.n_classes, d.synth_test, shape, d.synth_noise,
                              "test")
    else:
        if not d.data_dir:
            raise FileNotFoundError(f"dataset {d.dataset!r} needs data_dir")
        root = Path(d.data_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"data directory {root} not found")
        train_limit = None if d.full_data else d.train_limit
        test_limit = None if d.full_data else d.test_limit
        if d.dataset == "idx":
            train = load_idx(*(_find(root, s) for s in IDX_FILES["train"]), "train",
                             m.n_classes, train_limit)
            test = load_idx(*(_find(root, s) for s in IDX_FILES["test"]), "test",
                            m.n_classes, test_limit)
        else:
            train = load_cifar_binary(root, "train", m.n_classes, limit=train_limit)
            test = load_cifar_binary(root, "test", m.n_classes, limit=test_limit)
    if d.standardize:
        train, test = standardize(train, test)
    return train, test
