"""
pimgpt.numerics.oracle: Wide-precision references and the BF16 error report

References are evaluated in float64 and rounded to BF16 once, so an exact hardware block
would show zero ULP error against them.
"""

import logging

import numpy as np

from pimgpt import numerics
from pimgpt.numerics import bf16_round, bf16_from_bits, ulp_distance

log = logging.getLogger(__name__)

__all__ = 'OperationError', 'normal_bf16', 'error_report', 'format_report', \
          'ref_reciprocal', 'ref_inv_sqrt', 'ref_exp', 'ref_tanh', 'ref_gelu', 'ref_softmax', 'ref_layernorm'


def normal_bf16(positive_only=True):
    """Every normal BF16 value, ascending (positive ones only, by default)."""
    exponents = np.arange(1, 255, dtype=np.uint32)
    mantissas = np.arange(0, 128, dtype=np.uint32)
    bits = (exponents[:, np.newaxis] << 7 | mantissas[np.newaxis, :]).ravel()
    values = np.asarray(bf16_from_bits(bits), dtype=np.float64)
    if positive_only:
        return values
    return np.concatenate([-values[::-1], values])


def ref_reciprocal(x):
    return 1.0 / np.asarray(x, dtype=np.float64)


def ref_inv_sqrt(x):
    return 1.0 / np.sqrt(np.asarray(x, dtype=np.float64))


def ref_exp(x):
    return np.exp(np.asarray(x, dtype=np.float64))


def ref_tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def ref_gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def ref_softmax(x, scale=None):
    x = np.asarray(x, dtype=np.float64)
    if scale is not None:
        x = x * scale
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def ref_layernorm(x, gamma, beta, epsilon=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + epsilon) * gamma + beta


class OperationError(object):
    """
    Error statistics of one block against its reference.

    :ivar name:    (str) operation name
    :ivar cases:   (int) number of outputs compared
    :ivar max_ulp: (int) worst BF16 step distance
    :ivar mean_ulp: (float)
    :ivar max_rel: (float) worst relative error, over outputs with a nonzero reference
    :ivar note:    (str) approximation scheme, for the report
    """

    def __init__(self, name, got, want, note=''):
        got = np.asarray(got, dtype=np.float64).ravel()
        want = np.asarray(want, dtype=np.float64).ravel()
        ulps = np.asarray(ulp_distance(got, bf16_round(want)), dtype=np.int64).ravel()
        nonzero = want != 0
        self.name = name
        self.cases = int(got.size)
        self.max_ulp = int(ulps.max()) if ulps.size else 0
        self.mean_ulp = float(ulps.mean()) if ulps.size else 0.0
        self.max_rel = float(np.max(np.abs(got[nonzero] - want[nonzero]) / np.abs(want[nonzero]))) \
            if np.any(nonzero) else 0.0
        self.note = note

    def as_dict(self):
        return {'operation': self.name, 'cases': self.cases, 'max_ulp': self.max_ulp,
                'mean_ulp': self.mean_ulp, 'max_rel': self.max_rel, 'note': self.note}

    def __repr__(self):
        return '<%s %s max %d ulp>' % (self.__class__.__name__, self.name, self.max_ulp)


def error_report(samples=10000, seed=0):
    """
    Error of every block against its wide reference: reciprocal and inverse square root over
    every positive normal BF16 input, the rest over `samples` random cases.

    :returns: list of :class:`OperationError`
    """
    rng = np.random.default_rng(seed)
    rows = []

    x = normal_bf16()
    # reciprocals of the largest values fall below the normal range
    x_rec = x[x < 2.0 ** 126]
    rows.append(OperationError('nr_reciprocal', numerics.nr_reciprocal(x_rec), ref_reciprocal(x_rec),
                               'seed 48/17 - 32/17 D, 3 Newton-Raphson iterations'))
    rows.append(OperationError('fast_inv_sqrt', numerics.fast_inv_sqrt(x), ref_inv_sqrt(x),
                               'bit-pattern seed 0x5f3759df, 2 Newton iterations'))

    e = bf16_round(rng.uniform(-8.0, 0.0, size=samples))
    rows.append(OperationError('taylor_exp', numerics.taylor_exp(e), ref_exp(e),
                               'range reduction by ln2, 6-term Taylor (our choice)'))

    t = bf16_round(rng.uniform(-4.0, 4.0, size=samples))
    rows.append(OperationError('taylor_tanh', numerics.taylor_tanh(t), ref_tanh(t),
                               '6-term Taylor below 0.5, 1 - 2/(e^2x + 1) above (our choice)'))
    rows.append(OperationError('gelu', numerics.gelu(t), ref_gelu(t), 'tanh form, 0.044715'))

    s = bf16_round(rng.normal(0.0, 2.0, size=(max(samples // 16, 1), 16)))
    rows.append(OperationError('softmax', numerics.softmax(s), ref_softmax(s),
                               'max subtraction, tree-summed denominator'))

    n = max(samples // 768, 1)
    v = bf16_round(rng.normal(0.0, 1.0, size=(n, 768)))
    gamma = bf16_round(1.0 + 0.1 * rng.normal(size=768))
    beta = bf16_round(0.1 * rng.normal(size=768))
    rows.append(OperationError('layernorm', numerics.layernorm(v, gamma, beta),
                               ref_layernorm(v, gamma, beta), 'shifted statistics, fast inverse square root'))
    for row in rows:
        log.debug("%s: %d cases, max %d ulp, mean %.3f ulp, max rel %.3g",
                  row.name, row.cases, row.max_ulp, row.mean_ulp, row.max_rel)
    return rows


def format_report(rows):
    """Fixed-width text table of :func:`error_report` rows."""
    lines = ['%-14s %8s %8s %9s %10s  %s' % ('operation', 'cases', 'max_ulp', 'mean_ulp', 'max_rel', 'scheme')]
    for row in rows:
        lines.append('%-14s %8d %8d %9.4f %10.3e  %s' %
                     (row.name, row.cases, row.max_ulp, row.mean_ulp, row.max_rel, row.note))
    return lines
