"""
AID corpus files and their manifest.

Corpus file (little-endian):

    "AID1", u16 version, u64 count, u16 H, u16 W
    count × record: clean_id u32, attack u8, family u8, model u8, norm u8,
                    eps f32, success u8, clean_label u16, adv_label u16,
                    pixels u8 3·H·W (channel-major)

The manifest is a UTF-8 ``key=value`` text file; structured values are
written as JSON.
"""
from collections import OrderedDict
from pathlib import Path
import hashlib
import json
import logging
import struct

import numpy as np
import pandas as pd

from .attacktools import (ATTACK_NAMES, FAMILY_NAMES, NORM_INF, NORM_L2, family_array, k_from_eps)
from .errors import FormatError

logger = logging.getLogger(__name__)

MAGIC = b'AID1'
VERSION = 1
_header = struct.Struct('<4sHQHH')
_norm_names = (NORM_INF, NORM_L2)


def aid_dtype(height=32, width=32):
    """Packed record dtype matching the on-disk layout."""
    return np.dtype([
        ('clean_id', '<u4'),
        ('attack', 'u1'),
        ('family', 'u1'),
        ('model', 'u1'),
        ('norm', 'u1'),
        ('eps', '<f4'),
        ('success', 'u1'),
        ('clean_label', '<u2'),
        ('adv_label', '<u2'),
        ('pixels', 'u1', (3, height, width)),
    ])


AID_DTYPE = aid_dtype()


class AidCorpus:
    """
    Records of one split held as a numpy structured array.
    """

    def __init__(self, records, name=''):
        records = np.asarray(records)
        assert records.dtype.names == AID_DTYPE.names
        self.records = records
        self.name = name

    def __repr__(self):
        txt = 'AidCorpus {}\n'.format(self.name)
        txt += '  {} records, image {}x{}'.format(len(self), self.height, self.width)
        return txt

    def __len__(self):
        return self.records.shape[0]

    @classmethod
    def empty(cls, height=32, width=32, name=''):
        return cls(np.zeros(0, dtype=aid_dtype(height, width)), name=name)

    @property
    def height(self):
        return self.records.dtype['pixels'].shape[1]

    @property
    def width(self):
        return self.records.dtype['pixels'].shape[2]

    @property
    def attacks(self):
        return self.records['attack'].astype(np.int64)

    @property
    def families(self):
        return self.records['family'].astype(np.int64)

    @property
    def models(self):
        return self.records['model'].astype(np.int64)

    @property
    def clean_ids(self):
        return self.records['clean_id'].astype(np.int64)

    def images_float(self, idx=None):
        pixels = self.records['pixels'] if idx is None else self.records['pixels'][idx]
        return pixels.astype(np.float32) / 255.

    def labels(self, task='attack'):
        return self.attacks if task == 'attack' else self.families

    def eps_k(self):
        m = 3 * self.height * self.width
        return np.array([k_from_eps(float(e), _norm_names[n], m)
                         for e, n in zip(self.records['eps'], self.records['norm'])], dtype=np.int64)

    def select(self, idx):
        return AidCorpus(self.records[idx], name=self.name)

    def filter(self, attacks=None, models=None, eps_k_range=None, success=None):
        """
        Subset by attack labels, model ids, inclusive eps level range and
        success flag. None keeps everything.
        """
        mask = np.ones(len(self), dtype=bool)
        if attacks is not None:
            mask &= np.isin(self.attacks, list(attacks))
        if models is not None:
            mask &= np.isin(self.models, list(models))
        if eps_k_range is not None:
            k = self.eps_k()
            mask &= (k >= eps_k_range[0]) & (k <= eps_k_range[1])
        if success is not None:
            mask &= self.records['success'].astype(bool) == success
        return self.select(np.flatnonzero(mask))

    def to_dataframe(self):
        r = self.records
        df = pd.DataFrame({
            'record_id': np.arange(len(self)),
            'clean_id': r['clean_id'].astype(np.int64),
            'attack': r['attack'].astype(np.int64),
            'attack_name': [ATTACK_NAMES[a] for a in r['attack']],
            'family': r['family'].astype(np.int64),
            'family_name': [FAMILY_NAMES[f] for f in r['family']],
            'model': r['model'].astype(np.int64),
            'norm': [_norm_names[n] for n in r['norm']],
            'eps': r['eps'].astype(np.float64),
            'eps_k': self.eps_k() if len(self) else np.zeros(0, dtype=np.int64),
            'success': r['success'].astype(bool),
            'clean_label': r['clean_label'].astype(np.int64),
            'adv_label': r['adv_label'].astype(np.int64),
        })
        return df

    def summary(self):
        """
        Per (attack, model) counts, success rate and mean eps.
        """
        df = self.to_dataframe()
        if df.shape[0] == 0:
            return pd.DataFrame(columns=['attack_name', 'model', 'count', 'success_rate', 'mean_eps', 'mean_eps_k'])
        grouped = df.groupby(['attack', 'model'])
        summary = pd.DataFrame({
            'attack_name': grouped['attack_name'].first(),
            'count': grouped.size(),
            'success_rate': grouped['success'].mean(),
            'mean_eps': grouped['eps'].mean(),
            'mean_eps_k': grouped['eps_k'].mean(),
        })
        return summary.reset_index()

    def check_families(self):
        return bool(np.all(family_array(self.attacks) == self.families))

    def checksum(self):
        return hashlib.sha256(dumps_corpus(self)).hexdigest()

    def save(self, path):
        write_corpus(path, self)

    @classmethod
    def load(cls, path):
        return read_corpus(path)


def concat_corpora(corpora, name=''):
    corpora = [c for c in corpora if len(c)]
    if not corpora:
        return AidCorpus.empty(name=name)
    return AidCorpus(np.concatenate([c.records for c in corpora]), name=name)


def dumps_corpus(corpus):
    header = _header.pack(MAGIC, VERSION, len(corpus), corpus.height, corpus.width)
    return header + corpus.records.tobytes()


def loads_corpus(data, name=''):
    if len(data) < _header.size:
        raise FormatError('truncated header', offset=len(data))
    magic, version, count, height, width = _header.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError('bad magic {!r}'.format(magic), offset=0)
    if version != VERSION:
        raise FormatError('unsupported version {}'.format(version), offset=4)
    dtype = aid_dtype(height, width)
    expected = _header.size + count * dtype.itemsize
    if len(data) < expected:
        complete = (len(data) - _header.size) // dtype.itemsize
        raise FormatError('truncated record {} of {}'.format(complete, count),
                          offset=_header.size + complete * dtype.itemsize)
    if len(data) > expected:
        raise FormatError('trailing bytes after record {}'.format(count), offset=expected)
    records = np.frombuffer(data, dtype=dtype, count=count, offset=_header.size).copy()
    return AidCorpus(records, name=name)


def write_corpus(path, corpus):
    path = Path(path)
    with open(path, 'wb') as f:
        f.write(dumps_corpus(corpus))
    logger.info('wrote %d records to %s', len(corpus), path)


def read_corpus(path):
    path = Path(path)
    return loads_corpus(path.read_bytes(), name=path.stem)


def _is_plain(text):
    if '\n' in text:
        return False
    try:
        json.loads(text)
    except ValueError:
        return True
    return False


class Manifest:
    """
    Ordered key=value description of a generated corpus.
    """

    def __init__(self, items=None):
        self.items = OrderedDict() if items is None else OrderedDict(items)

    def __getitem__(self, key):
        return self.items[key]

    def __setitem__(self, key, value):
        self.items[key] = value

    def __contains__(self, key):
        return key in self.items

    def get(self, key, default=None):
        return self.items.get(key, default)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.items == other.items

    def dumps(self):
        lines = []
        for key, value in self.items.items():
            if isinstance(value, str) and _is_plain(value):
                text = value
            else:
                text = json.dumps(value, sort_keys=True)
            lines.append('{}={}'.format(key, text))
        return '\n'.join(lines) + '\n'

    @classmethod
    def loads(cls, text):
        items = OrderedDict()
        for n, line in enumerate(text.splitlines()):
            if not line.strip() or line.startswith('#'):
                continue
            if '=' not in line:
                raise FormatError('manifest line {} has no "="'.format(n + 1))
            key, text_value = line.split('=', 1)
            try:
                value = json.loads(text_value)
            except ValueError:
                value = text_value
            items[key.strip()] = value
        return cls(items)

    def write(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.dumps())

    @classmethod
    def read(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            return cls.loads(f.read())
