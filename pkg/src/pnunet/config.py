"""Strict JSON run configuration.

One file configures every command. Sections map to the dataclasses
they fill: dataset, trainer, ssim, model, search, gendata; plus the
top-level keys output_dir and weights. Unknown keys are rejected with
their dotted path, as are wrong-typed values, so a typo never silently
falls back to a default. --set overrides use the same dotted paths.
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .baseline import SearchConfig
from .imaging import DatasetSpec, GenDataConfig
from .model import ReconstructorConfig
from .ssim import SsimConfig
from .train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "apply_override"]


class ConfigError(ValueError):
    """Bad configuration; path is the dotted location of the problem."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


_SECTIONS = {
    "dataset": DatasetSpec,
    "trainer": TrainConfig,
    "ssim": SsimConfig,
    "model": ReconstructorConfig,
    "search": SearchConfig,
    "gendata": GenDataConfig,
}
_TOP_SCALARS = ("output_dir", "weights")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one command invocation."""

    dataset: DatasetSpec | None
    trainer: TrainConfig
    ssim: SsimConfig
    model: ReconstructorConfig
    search: SearchConfig
    gendata: GenDataConfig
    output_dir: str | None = None
    weights: str | None = None

    def resolved(self) -> dict:
        """Every field materialized, defaults included; JSON-ready."""
        out = {
            name: (None if getattr(self, name) is None else asdict(getattr(self, name)))
            for name in _SECTIONS
        }
        if out["gendata"] is not None:
            out["gendata"]["kinds"] = list(out["gendata"]["kinds"])
        out["output_dir"] = self.output_dir
        out["weights"] = self.weights
        return out


def _type_ok(value, typ) -> bool:
    if typ is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if typ is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if typ is bool:
        return isinstance(value, bool)
    if typ is str:
        return isinstance(value, str)
    if typ is tuple:
        return isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value)
    return True  # optional[str] and friends: accept str or None


def _build_section(name: str, cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        want = known[key].type
        tname = want if isinstance(want, str) else getattr(want, "__name__", str(want))
        base = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}.get(tname)
        if base is not None and not _type_ok(value, base):
            raise ConfigError(
                f"{name}.{key}", f"expected {base.__name__}, got {type(value).__name__}"
            )
        if tname == "str | None" and not (value is None or isinstance(value, str)):
            raise ConfigError(f"{name}.{key}", "expected string or null")
    kwargs = dict(data)
    if cls is GenDataConfig and "kinds" in kwargs:
        kwargs["kinds"] = tuple(kwargs["kinds"])
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(name, str(exc).replace("__init__() ", "")) from exc


def apply_override(data: dict, assignment: str) -> None:
    """Set one dotted path from a --set key=value string, in place.

    The value is parsed as JSON when possible (numbers, booleans,
    null, arrays), and used verbatim as a string otherwise.
    """
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like section.key=value")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(assignment, "override must look like section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "path passes through a non-section value")
    node[parts[-1]] = value


def parse_config(data: dict, overrides=(), seed: int | None = None) -> RunConfig:
    """Validate a raw config dict and materialize every section.

    overrides are --set strings applied before validation; seed, when
    given, replaces the seed of every section that has one.
    """
    if not isinstance(data, dict):
        raise ConfigError("<root>", "top level must be a JSON object")
    data = json.loads(json.dumps(data))  # deep copy, JSON-clean
    for ov in overrides:
        apply_override(data, ov)
    if seed is not None:
        for section in ("trainer", "model", "search", "gendata"):
            data.setdefault(section, {})["seed"] = int(seed)

    for key in data:
        if key not in _SECTIONS and key not in _TOP_SCALARS:
            raise ConfigError(key, "unknown key")
    for key in _TOP_SCALARS:
        if key in data and not (data[key] is None or isinstance(data[key], str)):
            raise ConfigError(key, f"expected string or null")
    for name in _SECTIONS:
        if name in data and not isinstance(data[name], dict):
            raise ConfigError(name, "section must be a JSON object")

    dataset_raw = data.get("dataset")
    trainer_raw = dict(data.get("trainer", {}))
    model_raw = dict(data.get("model", {}))

    # one patch geometry: an explicit dataset.patch_size flows into the
    # trainer unless the trainer pins its own, in which case they must agree
    if dataset_raw is not None and "patch_size" in dataset_raw:
        if "patch_size" not in trainer_raw:
            trainer_raw["patch_size"] = dataset_raw["patch_size"]
        elif trainer_raw["patch_size"] != dataset_raw["patch_size"]:
            raise ConfigError(
                "trainer.patch_size",
                f"conflicts with dataset.patch_size "
                f"({trainer_raw['patch_size']} vs {dataset_raw['patch_size']})",
            )
    # channel count follows the dataset's grayscale switch unless pinned
    if "in_channels" not in model_raw and dataset_raw is not None:
        gray = dataset_raw.get("grayscale", True)
        if not isinstance(gray, bool):
            raise ConfigError("dataset.grayscale", "expected bool")
        model_raw["in_channels"] = 1 if gray else 3

    return RunConfig(
        dataset=None if dataset_raw is None else _build_section("dataset", DatasetSpec, dataset_raw),
        trainer=_build_section("trainer", TrainConfig, trainer_raw),
        ssim=_build_section("ssim", SsimConfig, data.get("ssim", {})),
        model=_build_section("model", ReconstructorConfig, model_raw),
        search=_build_section("search", SearchConfig, data.get("search", {})),
        gendata=_build_section("gendata", GenDataConfig, data.get("gendata", {})),
        output_dir=data.get("output_dir"),
        weights=data.get("weights"),
    )


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Read a JSON config file (or start empty) and parse strictly."""
    if path is None:
        data = {}
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError("<config>", f"file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<config>", f"invalid JSON: {exc}") from exc
    return parse_config(data, overrides=overrides, seed=seed)
