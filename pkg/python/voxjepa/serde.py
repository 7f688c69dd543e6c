"""
Serialization helpers shared by every config object.

`SerdeAPI` is mixed into dataclasses and provides `to_pydict`/`from_pydict` plus the
`yaml`, `msg_pack` and `json` data formats.  Decoding is strict: unknown keys raise
`ConfigError` naming the dotted path of the offending field.
"""

from __future__ import annotations
import dataclasses
import enum
import json
import types
import typing
from pathlib import Path
from typing import Any, Dict, Union

from typing_extensions import Self

from voxjepa.errors import ConfigError

data_formats = [
    "yaml",
    "msg_pack",
    "json",
]

_SUFFIX_FORMATS = {
    ".json": "json",
    ".yaml": "yaml",
    ".yml": "yaml",
    ".msgpack": "msg_pack",
}


def _encode(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _encode(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, enum.Enum):
        return value.name
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


def _decode(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if tp is Any:
        return value
    if origin is Union or (hasattr(types, "UnionType") and origin is getattr(types, "UnionType")):
        if value is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        errors = []
        for arg in non_none:
            try:
                return _decode(arg, value, path)
            except ConfigError as err:
                errors.append(str(err))
        raise ConfigError(f"`{path}`: value {value!r} matches none of {non_none}: {errors}")
    if isinstance(tp, type) and dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"`{path}`: expected a mapping for {tp.__name__}, got {value!r}")
        return _from_mapping(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        if isinstance(value, tp):
            return value
        try:
            return tp[value]
        except KeyError:
            raise ConfigError(
                f"`{path}`: {value!r} is not one of {[m.name for m in tp]}"
            ) from None
    if origin in (tuple, typing.Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"`{path}`: expected a sequence, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_decode(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"`{path}`: expected {len(args)} items, got {len(value)}")
        return tuple(_decode(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"`{path}`: expected a list, got {value!r}")
        (item_tp,) = args or (Any,)
        return [_decode(item_tp, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (dict, typing.Dict):
        if not isinstance(value, dict):
            raise ConfigError(f"`{path}`: expected a mapping, got {value!r}")
        key_tp, val_tp = args or (Any, Any)
        return {
            _decode(key_tp, k, f"{path}.{k}"): _decode(val_tp, v, f"{path}.{k}")
            for k, v in value.items()
        }
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"`{path}`: expected a bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"`{path}`: expected an int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"`{path}`: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"`{path}`: expected a string, got {value!r}")
        return value
    if tp is Path:
        if not isinstance(value, (str, Path)):
            raise ConfigError(f"`{path}`: expected a path, got {value!r}")
        return Path(value)
    return value


def _from_mapping(cls: type, pydict: Dict[str, Any], path: str) -> Any:
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(pydict) - set(fields))
    if unknown:
        dotted = [f"{path}.{k}" if path else k for k in unknown]
        raise ConfigError(f"unknown field(s) for {cls.__name__}: {dotted}")
    kwargs = {}
    for name, value in pydict.items():
        kwargs[name] = _decode(hints[name], value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {cls.__name__} at `{path or '<root>'}`: {err}") from err


class SerdeAPI:
    """
    Mixin giving dataclasses a pure python dict form and file round trips in the supported
    `data_formats`.
    """

    def to_pydict(self) -> Dict:
        """
        Returns self converted to a pure python dictionary (enums by name, tuples as lists).
        """
        return _encode(self)

    @classmethod
    def from_pydict(cls, pydict: Dict) -> Self:
        """
        Builds an instance from `pydict`, rejecting unknown fields at every nesting level.
        """
        if not isinstance(pydict, dict):
            raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(pydict).__name__}")
        return _from_mapping(cls, pydict, "")

    def to_json(self) -> str:
        return json.dumps(self.to_pydict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, json_str: str) -> Self:
        try:
            pydict = json.loads(json_str)
        except json.JSONDecodeError as err:
            raise ConfigError(f"malformed JSON for {cls.__name__}: {err}") from err
        return cls.from_pydict(pydict)

    def to_yaml(self) -> str:
        import yaml  # type: ignore[import-untyped]

        return yaml.dump(self.to_pydict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, yaml_str: str) -> Self:
        from yaml import load, YAMLError  # type: ignore[import-untyped]

        try:
            from yaml import CLoader as Loader
        except ImportError:
            from yaml import Loader  # type: ignore[assignment]
        try:
            pydict = load(yaml_str, Loader=Loader)
        except YAMLError as err:
            raise ConfigError(f"malformed YAML for {cls.__name__}: {err}") from err
        return cls.from_pydict(pydict)

    def to_msg_pack(self) -> bytes:
        import msgpack  # type: ignore[import-untyped]

        return msgpack.packb(self.to_pydict())

    @classmethod
    def from_msg_pack(cls, msg_pack: bytes) -> Self:
        import msgpack  # type: ignore[import-untyped]

        try:
            pydict = msgpack.unpackb(msg_pack)
        except (ValueError, msgpack.ExtraData) as err:
            raise ConfigError(f"malformed msgpack for {cls.__name__}: {err}") from err
        return cls.from_pydict(pydict)

    def to_str(self, data_fmt: str = "json") -> Union[str, bytes]:
        data_fmt = data_fmt.lower()
        assert data_fmt in data_formats, f"`data_fmt` must be one of {data_formats}"
        match data_fmt:
            case "msg_pack":
                return self.to_msg_pack()
            case "yaml":
                return self.to_yaml()
            case _:
                return self.to_json()

    def to_file(self, filepath: Union[str, Path]) -> None:
        """
        Writes self to `filepath`, choosing the data format from the file suffix.
        """
        filepath = Path(filepath)
        data_fmt = _format_for(filepath)
        content = self.to_str(data_fmt)
        if isinstance(content, bytes):
            filepath.write_bytes(content)
        else:
            filepath.write_text(content)

    @classmethod
    def from_file(cls, filepath: Union[str, Path]) -> Self:
        filepath = Path(filepath)
        if not filepath.exists():
            raise ConfigError(f"config file not found: {filepath}")
        data_fmt = _format_for(filepath)
        match data_fmt:
            case "msg_pack":
                return cls.from_msg_pack(filepath.read_bytes())
            case "yaml":
                return cls.from_yaml(filepath.read_text())
            case _:
                return cls.from_json(filepath.read_text())


def _format_for(filepath: Path) -> str:
    try:
        return _SUFFIX_FORMATS[filepath.suffix.lower()]
    except KeyError:
        raise ConfigError(
            f"unsupported config suffix {filepath.suffix!r} for {filepath}; "
            f"expected one of {sorted(_SUFFIX_FORMATS)}"
        ) from None

