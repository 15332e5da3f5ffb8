import json
from dataclasses import asdict, fields, replace
from pathlib import Path

from lisco.errors import ConfigError

DTYPES = ("float64", "float32")


class ConfigMixin:
    """JSON-friendly construction and validation shared by the config dataclasses.

    Keys starting with an underscore (e.g. ``_comment``) are ignored.
    """

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        pass

    @classmethod
    def from_dict(cls, data=None, base=None):
        data = {k: v for k, v in dict(data or {}).items() if not k.startswith("_")}
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"Unknown {cls.__name__} keys: {', '.join(unknown)}")
        try:
            return replace(base, **data) if base is not None else cls(**data)
        except TypeError as e:
            raise ConfigError(f"Invalid {cls.__name__}: {e}")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_changes(self, **changes):
        return replace(self, **changes)


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def check_seed(name: str, seed) -> None:
    require(isinstance(seed, int) and 0 <= seed < 2 ** 64, f"{name} must be an unsigned 64-bit integer, got {seed!r}")


def check_dtype(dtype: str) -> None:
    require(dtype in DTYPES, f"dtype must be one of {DTYPES}, got {dtype!r}")


def load_config(config_file) -> dict:
    try:
        with open(config_file, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_file} is not valid JSON: {e}")


def write_config(data: dict, output) -> Path:
    output_path = Path(output)
    with open(output_path, 'w') as f:
        json.dump(data, f, indent=2)
    return output_path
