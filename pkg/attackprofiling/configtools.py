"""
Helpers shared by the configuration dataclasses: JSON round trip, hashing
and the flags > file > defaults resolution used by the command line.
"""
import dataclasses
import json
from pathlib import Path

from .errors import ConfigurationError
from .layers import config_hash


class ConfigMixin:
    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError('{}: unknown keys {}'.format(cls.__name__, sorted(unknown)))
        return cls(**d)

    def replace(self, **kargs):
        return dataclasses.replace(self, **kargs)

    def hash(self):
        return config_hash(self.to_dict())


def load_config_file(path, section=None):
    """
    Read a JSON config file. If it holds an object keyed by ``section`` that
    sub-object is returned, otherwise the file is treated as flat.
    """
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            d = json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigurationError('cannot read config file {}: {}'.format(path, e))
    if not isinstance(d, dict):
        raise ConfigurationError('config file {} must hold a JSON object'.format(path))
    if section is not None and isinstance(d.get(section), dict):
        return d[section]
    return d


def resolve_config(cls, file_values=None, flag_values=None):
    """
    Build ``cls`` from defaults, then file values, then flags that are not None.
    """
    values = cls().to_dict()
    names = set(values)
    for source in (file_values or {}, flag_values or {}):
        for k, v in source.items():
            if k in names and v is not None:
                values[k] = v
    return cls.from_dict(values)


def write_sidecar(path, config):
    """Write ``<path>.config.json`` and return the config hash."""
    path = Path(path)
    sidecar = path.with_name(path.name + '.config.json')
    h = config_hash(config)
    with open(sidecar, 'w', encoding='utf-8') as f:
        json.dump({'config': config, 'config_hash': h}, f, indent=4, sort_keys=True)
    return h


def read_sidecar(path):
    path = Path(path)
    sidecar = path.with_name(path.name + '.config.json')
    if not sidecar.exists():
        return None
    with open(sidecar, 'r', encoding='utf-8') as f:
        return json.load(f)
