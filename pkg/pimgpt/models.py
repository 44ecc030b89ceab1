"""
pimgpt.models: GPT model dimensions and the model catalog

The catalog of four GPT-2 and four GPT-3 variants lives in `data/catalog.yaml`, each entry
tagged with its source and published parameter count.
"""

import os.path
import logging
import dataclasses
from dataclasses import dataclass

import yaml

from pimgpt.config import ConstraintException, ConfigException

log = logging.getLogger(__name__)

__all__ = 'GptModelConfig', 'model_catalog', 'lookup_model', 'parameter_count', 'CATALOG_FILE'


CATALOG_FILE = os.path.join(os.path.dirname(__file__), 'data', 'catalog.yaml')


@dataclass(frozen=True)
class GptModelConfig(object):
    """
    Decoder-only transformer dimensions.

    :ivar name:       (str) catalog name
    :ivar num_layers: (int) N
    :ivar d_model:    (int) embedding width
    :ivar num_heads:  (int) h
    :ivar d_head:     (int) per-head width, d_k = d_v = d_model / h
    :ivar d_ffn:      (int) FFN hidden width, 4 x d_model
    :ivar vocab_size: (int)
    :ivar max_tokens: (int) context length
    :ivar published:  (float) published parameter count, if any
    :ivar source:     (str) citation for the dimensions
    """
    name: str
    num_layers: int
    d_model: int
    num_heads: int
    d_head: int
    d_ffn: int
    vocab_size: int
    max_tokens: int
    published: float = 0.0
    source: str = ''

    def __post_init__(self):
        for name in ('num_layers', 'd_model', 'num_heads', 'd_head', 'd_ffn', 'vocab_size', 'max_tokens'):
            if getattr(self, name) < 1:
                raise ConstraintException('%s >= 1' % name)
        if self.d_model != self.num_heads * self.d_head:
            raise ConstraintException('d_model = num_heads x d_head',
                                      '%d != %d x %d' % (self.d_model, self.num_heads, self.d_head))
        if self.d_ffn != 4 * self.d_model:
            raise ConstraintException('d_ffn = 4 x d_model', '%d != 4 x %d' % (self.d_ffn, self.d_model))

    @staticmethod
    def build(name, num_layers, d_model, num_heads, vocab_size, max_tokens, **kwargs):
        """Construct a model deriving d_head and d_ffn from d_model."""
        return GptModelConfig(name=name, num_layers=num_layers, d_model=d_model, num_heads=num_heads,
                              d_head=d_model // num_heads, d_ffn=4 * d_model,
                              vocab_size=vocab_size, max_tokens=max_tokens, **kwargs)

    def with_max_tokens(self, max_tokens):
        """Copy of this model with a different context length."""
        return dataclasses.replace(self, max_tokens=max_tokens)

    def __str__(self):
        return self.name


def parameter_count(model):
    """
    Parameter count from dimensions: 12 N d^2 for attention and FFN weights, V d for the (tied)
    token embedding, max_tokens d for learned positions, plus 13 d biases and layernorm terms
    per layer and 2 d for the final layernorm.
    """
    d = model.d_model
    return 12 * model.num_layers * d * d + model.vocab_size * d + model.max_tokens * d \
        + 13 * model.num_layers * d + 2 * d


_catalog = None


def _entry(entry):
    entry = dict(entry)
    try:
        entry['published'] = float(entry.get('published', 0.0))
    except (TypeError, ValueError):
        raise ConfigException('model %s: published count %r is not a number' % (entry.get('name'), entry['published']))
    return entry


def _load():
    global _catalog
    if _catalog is None:
        log.debug("Loading model catalog %s ...", CATALOG_FILE)
        with open(CATALOG_FILE) as f:
            data = yaml.safe_load(f)
        entries = {}
        for group in ('models', 'alternates'):
            entries[group] = [GptModelConfig.build(**_entry(entry)) for entry in data.get(group, ())]
        _catalog = entries
    return _catalog


def model_catalog():
    """The eight catalog models: four GPT-2 and four GPT-3 variants."""
    return list(_load()['models'])


def lookup_model(name):
    """Find a catalog (or alternate) model by case-insensitive name."""
    key = name.lower()
    catalog = _load()
    for model in catalog['models'] + catalog['alternates']:
        if model.name == key:
            return model
    raise ConfigException('unknown model "%s" (known: %s)' %
                          (name, ', '.join(m.name for m in catalog['models'] + catalog['alternates'])))
