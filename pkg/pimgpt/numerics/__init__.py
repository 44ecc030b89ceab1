"""
pimgpt.numerics: Bit-exact BF16 model of the ASIC arithmetic blocks and the PIM MAC datapath

Values are carried as numpy float32 arrays whose contents are always exactly representable in
bfloat16; every operation rounds its results back to BF16 with round-to-nearest-even. The
blocks model fused datapaths: an operation such as ``round(c + a*b)`` forms its result at
double width and rounds once.

All operations accept scalars or arrays and work elementwise; reductions work along the last
axis, so batches of vectors can be processed at once.
"""

import logging

import numpy as np

log = logging.getLogger(__name__)

__all__ = 'Bf16Value', 'ShapeException', \
          'bf16_round', 'bf16_bits', 'bf16_from_bits', 'ulp_distance', \
          'nr_divide', 'nr_reciprocal', 'fast_inv_sqrt', 'taylor_exp', 'taylor_tanh', \
          'tree_sum', 'mac_dot', 'round_splits', 'partial_sum', \
          'softmax', 'layernorm', 'gelu', 'attention_head', 'inv_sqrt_constant', \
          'TREE_WIDTH'


TREE_WIDTH = 16  # inputs per adder tree; matches the MAC unit's 16 multipliers


class ShapeException(Exception):
    """Exception raised when operands are not conformable."""
    pass


#
# Rounding and bit patterns
#

def _ret(a):
    return a[()] if a.ndim == 0 else a


def bf16_round(x):
    """
    Round to the nearest BF16 value, ties to even, via the 32-bit float pattern: wide inputs are
    first converted to float32, then the high 16 bits are kept after rounding on the low 16.
    NaN stays NaN (quieted, sign preserved); overflow rounds to infinity.
    """
    with np.errstate(over='ignore', invalid='ignore'):
        f = np.array(x, dtype=np.float32)
    u = f.view(np.uint32)
    lsb = u & np.uint32(0xFFFF)
    up = (lsb > 0x8000) | ((lsb == 0x8000) & ((u & np.uint32(0x10000)) != 0))
    hi = (u & np.uint32(0xFFFF0000)) + np.where(up, np.uint32(0x10000), np.uint32(0))
    hi = np.where(np.isnan(f), (u & np.uint32(0xFFFF0000)) | np.uint32(0x00400000), hi)
    return _ret(hi.astype(np.uint32).view(np.float32))


def _r(x):
    """bf16_round returned as float64 for further exact arithmetic."""
    return np.asarray(bf16_round(x), dtype=np.float64)


def bf16_bits(x):
    """16-bit patterns of the BF16 roundings of `x`."""
    f = np.array(bf16_round(x), dtype=np.float32)
    return _ret((f.view(np.uint32) >> 16).astype(np.uint16))


def bf16_from_bits(bits):
    """Values of 16-bit BF16 patterns, as float32."""
    b = np.array(bits, dtype=np.uint32)
    return _ret((b << 16).view(np.float32))


def ulp_distance(a, b):
    """Number of BF16 steps between `a` and `b` (both rounded to BF16 first); +0 and -0 coincide."""
    def ordered(v):
        bits = np.array(bf16_bits(v), dtype=np.int64)
        mag = bits & 0x7FFF
        return np.where(bits & 0x8000, -mag, mag)
    return _ret(np.abs(ordered(a) - ordered(b)))


class Bf16Value(object):
    """
    A single BF16 scalar. Interoperates with numpy, so it can be passed to every block.

    :ivar bits: (int) 16-bit pattern: 1 sign, 8 exponent, 7 mantissa bits
    """

    def __init__(self, value=0.0):
        self.bits = int(bf16_bits(value))

    @staticmethod
    def from_bits(bits):
        v = Bf16Value()
        v.bits = int(bits) & 0xFFFF
        return v

    @property
    def value(self):
        return float(bf16_from_bits(self.bits))

    def __float__(self):
        return self.value

    def __array__(self, dtype=None, copy=None):
        return np.array(bf16_from_bits(self.bits), dtype=dtype or np.float32)

    def __eq__(self, other):
        if isinstance(other, Bf16Value):
            return self.bits == other.bits
        return self.value == other

    def __ne__(self, other):
        return not self.__eq__(other)

    def __hash__(self):
        return hash(self.bits)

    def __repr__(self):
        return 'Bf16Value(%r, bits=0x%04X)' % (self.value, self.bits)


def _bf(x):
    """Operand as float64 array of BF16 values."""
    return np.asarray(bf16_round(np.asarray(x, dtype=np.float64)), dtype=np.float64)


#
# Compile-time constants, rounded once
#

_NR_C1 = float(bf16_round(48.0 / 17.0))    # 2.828125
_NR_C2 = float(bf16_round(32.0 / 17.0))    # 1.8828125
_ISQRT_MAGIC = 0x5f3759df

_INV_LN2 = float(bf16_round(1.0 / np.log(2.0)))
_LN2_HI = float(bf16_round(np.log(2.0)))
_LN2_LO = float(bf16_round(np.log(2.0) - _LN2_HI))
_EXP_COEFFS = [float(bf16_round(c)) for c in (1.0, 1.0, 1 / 2.0, 1 / 6.0, 1 / 24.0, 1 / 120.0)]
_TANH_COEFFS = [float(bf16_round(c)) for c in (1.0, -1 / 3.0, 2 / 15.0, -17 / 315.0, 62 / 2835.0, -1382 / 155925.0)]
_TANH_TAYLOR_LIMIT = 0.5
_TANH_SATURATION = 8.0
_GELU_SQRT_2_PI = float(bf16_round(np.sqrt(2.0 / np.pi)))   # 0.796875
_GELU_CUBIC = float(bf16_round(0.044715))
_EXP_LIMIT = 128.0


def inv_sqrt_constant(n):
    """bf16(1/sqrt(n)), the attention scale folded into the softmax preamble."""
    return bf16_round(1.0 / np.sqrt(n))


#
# Division and inverse square root
#

def nr_reciprocal(d):
    """
    Reciprocal by Newton-Raphson: scale d to D' in [0.5, 1) by exponent subtraction, seed
    X = 48/17 - 32/17 D', run exactly three iterations X += X (1 - D' X), scale back.
    """
    d = _bf(d)
    if np.any(d == 0):
        raise ZeroDivisionError('nr_divide: division by zero')
    out = np.empty_like(d)
    finite = np.isfinite(d)
    mant, expo = np.frexp(np.abs(d[finite]))
    x = _r(_NR_C1 - _NR_C2 * mant)
    for _ in range(3):
        err = _r(1.0 - mant * x)
        x = _r(x + _r(x * err))
    out[finite] = np.copysign(np.ldexp(x, -expo), d[finite])
    inf = np.isinf(d)
    out[inf] = np.copysign(0.0, d[inf])
    out[np.isnan(d)] = np.nan
    return bf16_round(out)


def nr_divide(numerator, d):
    """numerator / d as numerator x (Newton-Raphson reciprocal of d). Raises ZeroDivisionError for d = 0."""
    recip = np.asarray(nr_reciprocal(d), dtype=np.float64)
    with np.errstate(invalid='ignore'):
        return bf16_round(_bf(numerator) * recip)


def fast_inv_sqrt(d):
    """
    1/sqrt(d): seed from the bit pattern (pad the BF16 pattern with 16 zero bits,
    L' = 0x5f3759df - (L >> 1), keep the high 16 bits), then exactly two Newton steps
    X (1.5 - D' X X) with D' = d / 2, each written as X + X (0.5 - D' X X).
    """
    d = np.array(bf16_round(d), dtype=np.float32)
    if np.any(~np.isfinite(d)) or np.any(~(d > 0)):
        raise ValueError('fast_inv_sqrt: domain error, input must be positive and finite')
    bits = d.view(np.uint32)
    seed = (np.uint32(_ISQRT_MAGIC) - (bits >> 1)) & np.uint32(0xFFFF0000)
    x = seed.astype(np.uint32).view(np.float32).astype(np.float64)
    half = 0.5 * d.astype(np.float64)
    for _ in range(2):
        err = _r(0.5 - half * x * x)
        x = _r(x + _r(x * err))
    return bf16_round(x)


#
# Transcendentals
#

def taylor_exp(x):
    """
    e^x as 2^k e^r: k = rint(x / ln2), r = x - k ln2 (two-constant reduction, |r| <= ln2/2),
    e^r by the first six Taylor terms in Horner form.
    """
    x = _bf(x)
    clipped = np.clip(np.nan_to_num(x), -_EXP_LIMIT, _EXP_LIMIT)
    k = np.rint(clipped * _INV_LN2)
    r = _r(clipped - k * _LN2_HI - k * _LN2_LO)
    p = np.full_like(r, _EXP_COEFFS[-1])
    for c in reversed(_EXP_COEFFS[:-1]):
        p = _r(c + r * p)
    with np.errstate(over='ignore', invalid='ignore'):
        out = np.ldexp(p, k.astype(np.int64))
    out = np.where(x > _EXP_LIMIT, np.inf, out)
    out = np.where(x < -_EXP_LIMIT, 0.0, out)
    out = np.where(np.isnan(x), np.nan, out)
    return bf16_round(out)


def taylor_tanh(x):
    """
    tanh by a six-term odd Taylor series for |x| <= 0.5, 1 - 2/(e^2|x| + 1) beyond with the
    exp and division blocks, saturating to +-1 from |x| >= 8. tanh(0) = 0 exactly.
    """
    x = _bf(x)
    a = np.abs(x)
    out = np.zeros_like(x)

    small = a <= _TANH_TAYLOR_LIMIT
    if np.any(small):
        z = x[small]
        u = _r(z * z)
        p = np.full_like(z, _TANH_COEFFS[-1])
        for c in reversed(_TANH_COEFFS[:-1]):
            p = _r(c + u * p)
        out[small] = _r(z * p)

    mid = (a > _TANH_TAYLOR_LIMIT) & (a < _TANH_SATURATION)
    if np.any(mid):
        e = np.asarray(taylor_exp(2.0 * a[mid]), dtype=np.float64)
        q = np.asarray(nr_divide(2.0, _r(e + 1.0)), dtype=np.float64)
        out[mid] = np.copysign(_r(1.0 - q), x[mid])

    big = a >= _TANH_SATURATION
    out[big] = np.copysign(1.0, x[big])
    out[np.isnan(x)] = np.nan
    return bf16_round(out)


def gelu(x):
    """GELU in tanh form: x/2 (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))). GELU(0) = 0."""
    x = _bf(x)
    with np.errstate(over='ignore', invalid='ignore'):
        x3 = _r(_r(x * x) * x)
        inner = _r(x + _GELU_CUBIC * x3)
        z = _r(_GELU_SQRT_2_PI * inner)
        t = np.asarray(taylor_tanh(z), dtype=np.float64)
        half = _r(0.5 * x)
        return bf16_round(half + half * t)


#
# Accumulation
#

def tree_sum(x, width=TREE_WIDTH):
    """
    Sum along the last axis the way the adder trees do: chunks of `width` summed pairwise
    (each add rounded), then the chunk sums accumulated sequentially.
    """
    x = _bf(x)
    n = x.shape[-1] if x.ndim else 1
    x = x.reshape(x.shape[:-1] + (n,)) if x.ndim else x.reshape(1)
    if n == 0:
        return bf16_round(np.zeros(x.shape[:-1]))
    nchunks = -(-n // width)
    pad = nchunks * width - n
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    x = x.reshape(x.shape[:-1] + (nchunks, width))
    w = width
    while w > 1:
        x = _r(x[..., 0::2] + x[..., 1::2])
        w //= 2
    chunks = x[..., 0]
    acc = chunks[..., 0]
    for i in range(1, nchunks):
        acc = _r(acc + chunks[..., i])
    return bf16_round(acc)


def partial_sum(parts):
    """Combine partial results in order, as the ASIC does for vectors split across GB rounds."""
    parts = [_bf(p) for p in parts]
    acc = parts[0]
    for p in parts[1:]:
        acc = _r(acc + p)
    return bf16_round(acc)


def round_splits(offset, length, round_elements):
    """Split points (relative to `offset`) where a vector slice crosses GB round boundaries."""
    first = (offset // round_elements + 1) * round_elements
    return [b - offset for b in range(first, offset + length, round_elements)]


def mac_dot(x, w, mac_width=TREE_WIDTH, splits=()):
    """
    Dot products of `x` with the rows of `w` as the PIM MAC computes them: products rounded to
    BF16, chunks of `mac_width` summed by the adder tree, chunk sums accumulated in order. At
    each split point the running result is handed over as a partial sum and the pieces are
    combined in order.

    :param x:      (array) vector of length n
    :param w:      (array) vector or matrix with last axis n
    :param splits: (list of int) indices where the accumulation restarts
    """
    x = _bf(x)
    w = _bf(w)
    if x.ndim != 1 or w.shape[-1] != x.shape[0]:
        raise ShapeException('mac_dot: vector of %s against %s' % (x.shape, w.shape))
    products = _r(w * x)
    bounds = [0] + sorted(set(s for s in splits if 0 < s < x.shape[0])) + [x.shape[0]]
    parts = [tree_sum(products[..., a:b], mac_width) for a, b in zip(bounds[:-1], bounds[1:])]
    return partial_sum(parts)


#
# Composite blocks
#

def softmax(scores, scale=None):
    """
    Softmax along the last axis: optional pre-scale, max subtraction, Taylor exp, tree-summed
    denominator, one Newton-Raphson reciprocal, then a multiply per element.
    """
    x = _bf(scores)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeException('softmax: empty input')
    if scale is not None:
        x = _r(x * float(bf16_round(scale)))
    m = np.max(x, axis=-1, keepdims=True)
    e = np.asarray(taylor_exp(_r(x - m)), dtype=np.float64)
    s = np.asarray(tree_sum(e), dtype=np.float64)
    recip = np.asarray(nr_reciprocal(s), dtype=np.float64)
    return bf16_round(e * recip[..., np.newaxis] if recip.ndim else e * recip)


def layernorm(x, gamma, beta, epsilon=1e-5):
    """
    (x - E[x]) / sqrt(Var[x] + eps) x gamma + beta along the last axis. Statistics accumulate
    values shifted by the first element; 1/n is a compile-time constant and the inverse
    square root comes from :func:`fast_inv_sqrt`.
    """
    x = _bf(x)
    gamma = _bf(gamma)
    beta = _bf(beta)
    if x.ndim == 0 or gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeException('layernorm: x %s, gamma %s, beta %s' % (x.shape, gamma.shape, beta.shape))
    if not epsilon > 0:
        raise ValueError('layernorm: epsilon must be positive')
    n = x.shape[-1]
    inv_n = float(bf16_round(1.0 / n))
    shift = x[..., :1]
    shifted = _r(x - shift)
    mean = _r(np.asarray(tree_sum(shifted), dtype=np.float64)[..., np.newaxis] * inv_n)
    dev = _r(x - shift - mean)
    var = _r(np.asarray(tree_sum(_r(dev * dev)), dtype=np.float64) * inv_n)
    inv = np.asarray(fast_inv_sqrt(_r(var + float(bf16_round(epsilon)))), dtype=np.float64)
    norm = _r(dev * inv[..., np.newaxis] if inv.ndim else dev * inv)
    return bf16_round(beta + norm * gamma)


def attention_head(q, K, V, scale=None, mac_width=TREE_WIDTH, round_elements=None, offset=0):
    """
    One head of scaled dot-product attention for the newest query:
    softmax(q K^T x scale) V, with scale = bf16(1/sqrt(d_k)) unless given.

    :param q:      (array) query, length d_k
    :param K:      (array) t x d_k keys
    :param V:      (array) t x d_v values
    :param round_elements: (int) GB round size; the score vector is cut where it crosses rounds
    :param offset: (int) position of this head's scores in the concatenated score vector
    """
    q = _bf(q)
    K = _bf(K)
    V = _bf(V)
    if q.ndim != 1 or K.ndim != 2 or V.ndim != 2:
        raise ShapeException('attention_head: q %s, K %s, V %s' % (q.shape, K.shape, V.shape))
    if K.shape[1] != q.shape[0] or V.shape[0] != K.shape[0] or K.shape[0] == 0:
        raise ShapeException('attention_head: q %s, K %s, V %s' % (q.shape, K.shape, V.shape))
    if scale is None:
        scale = inv_sqrt_constant(q.shape[0])
    scores = mac_dot(q, K, mac_width)
    weights = softmax(scores, scale)
    splits = round_splits(offset, K.shape[0], round_elements) if round_elements else ()
    return mac_dot(weights, V.T, mac_width, splits)
