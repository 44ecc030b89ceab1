"""
pimgpt.numerics.golden: Reference GPT decoder forward pass composed of the BF16 blocks

This is the functional oracle the compiled instruction stream is checked against: every
vector-matrix product goes through :func:`pimgpt.numerics.mac_dot` with accumulation split
at the same GB-round boundaries the compiler uses, and every nonlinear step uses the ASIC
blocks. Decoding is greedy. The model has no biases and no positional embeddings; the output
projection doubles as the token embedding table.
"""

import logging

import numpy as np

from pimgpt.numerics import bf16_round, mac_dot, round_splits, attention_head, layernorm, gelu, \
    inv_sqrt_constant, ShapeException

log = logging.getLogger(__name__)

__all__ = 'LayerWeights', 'ModelWeights', 'GoldenResult', 'random_weights', 'golden_forward', \
          'residual_add', 'vmm'


LAYER_TENSORS = ('ln1_gamma', 'ln1_beta', 'W_Q', 'W_K', 'W_V', 'W_proj',
                 'ln2_gamma', 'ln2_beta', 'W_ffn1', 'W_ffn2')


class LayerWeights(object):
    """
    One decoder layer's tensors. Weight matrices are in stored orientation: one row per output
    feature (W_Q, W_K, W_V, W_proj are d x d; W_ffn1 is 4d x d; W_ffn2 is d x 4d).
    """

    def __init__(self, **tensors):
        for name in LAYER_TENSORS:
            setattr(self, name, tensors[name])

    def __getitem__(self, name):
        return getattr(self, name)


class ModelWeights(object):
    """
    BF16 weights of a whole model. A container of :class:`LayerWeights`.

    :ivar model:       (:class:`pimgpt.models.GptModelConfig`)
    :ivar layers:      (list of :class:`LayerWeights`)
    :ivar lnf_gamma:   (array) final layernorm scale
    :ivar lnf_beta:    (array) final layernorm shift
    :ivar W_embed_out: (array) vocab x d_model, output projection and embedding table
    """

    def __init__(self, model, layers, lnf_gamma, lnf_beta, W_embed_out):
        self.model = model
        self.layers = layers
        self.lnf_gamma = lnf_gamma
        self.lnf_beta = lnf_beta
        self.W_embed_out = W_embed_out
        d = model.d_model
        expected = {'W_Q': (d, d), 'W_K': (d, d), 'W_V': (d, d), 'W_proj': (d, d),
                    'W_ffn1': (model.d_ffn, d), 'W_ffn2': (d, model.d_ffn)}
        if len(layers) != model.num_layers or W_embed_out.shape != (model.vocab_size, d):
            raise ShapeException('weights do not conform to %s' % model.name)
        for i, layer in enumerate(layers):
            for name, shape in expected.items():
                if layer[name].shape != shape:
                    raise ShapeException('layer %d %s is %s, expected %s' % (i, name, layer[name].shape, shape))

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        for layer in self.layers:
            yield layer

    def __getitem__(self, item):
        return self.layers[item]

    def matrix(self, matrix_id):
        """Stored matrix by mapper id, e.g. "L1.W_ffn2" or "W_embed_out"."""
        if matrix_id == 'W_embed_out':
            return self.W_embed_out
        layer, role = matrix_id.split('.', 1)
        return self.layers[int(layer[1:])][role]


class GoldenResult(object):
    """
    :ivar tokens:        (list of int) input token of each step followed by the final prediction
    :ivar layer_outputs: (list of list of array) residual stream after each layer, per step
    :ivar logits:        (list of array) output-projection result per step
    :ivar keys:          (list of array) per-layer key cache, tokens x d_model
    :ivar values:        (list of array) per-layer value cache, tokens x d_model
    """

    def __init__(self):
        self.tokens = []
        self.layer_outputs = []
        self.logits = []
        self.keys = []
        self.values = []

    @property
    def generated(self):
        return self.tokens[1:]


def random_weights(model, seed=0, scale=1.0):
    """
    Draw BF16 weights: matrices ~ N(0, scale / sqrt(fan_in)), layernorm scales near 1 and
    shifts near 0.
    """
    rng = np.random.default_rng(seed)

    def matrix(rows, cols):
        return bf16_round(rng.normal(0.0, scale / np.sqrt(cols), size=(rows, cols)))

    def affine(n):
        return bf16_round(1.0 + 0.1 * rng.normal(size=n)), bf16_round(0.1 * rng.normal(size=n))

    d, f = model.d_model, model.d_ffn
    layers = []
    for _ in range(model.num_layers):
        g1, b1 = affine(d)
        g2, b2 = affine(d)
        layers.append(LayerWeights(ln1_gamma=g1, ln1_beta=b1, W_Q=matrix(d, d), W_K=matrix(d, d),
                                   W_V=matrix(d, d), W_proj=matrix(d, d), ln2_gamma=g2, ln2_beta=b2,
                                   W_ffn1=matrix(f, d), W_ffn2=matrix(d, f)))
    gf, bf = affine(d)
    return ModelWeights(model, layers, gf, bf, matrix(model.vocab_size, d))


def residual_add(a, b):
    """Elementwise BF16 add on the ASIC adders."""
    return bf16_round(np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64))


def vmm(x, w, mac_width, round_elements):
    """PIM vector-matrix product with partial sums at every GB round boundary."""
    return mac_dot(x, w, mac_width, round_splits(0, len(x), round_elements))


def golden_forward(weights, token_count, cfg=None, start_token=0):
    """
    Greedy decoding of `token_count` steps starting from `start_token`.

    :param weights: (:class:`ModelWeights`)
    :param cfg:     (:class:`pimgpt.config.SystemConfig`) MAC width, GB round size, epsilon
    :returns: (:class:`GoldenResult`)
    """
    if cfg is None:
        from pimgpt.config import SystemConfig
        cfg = SystemConfig()
    model = weights.model
    if not 0 <= token_count <= model.max_tokens:
        raise ValueError('token_count %d outside 0..%d' % (token_count, model.max_tokens))
    mw, R, eps = cfg.pim.mac_width, cfg.round_elements, cfg.numerics.epsilon
    h, dh = model.num_heads, model.d_head
    scale = inv_sqrt_constant(dh)

    result = GoldenResult()
    result.tokens.append(start_token)
    keys = [np.zeros((0, model.d_model), dtype=np.float32) for _ in range(model.num_layers)]
    values = [np.zeros((0, model.d_model), dtype=np.float32) for _ in range(model.num_layers)]

    for step in range(token_count):
        x = np.array(weights.W_embed_out[result.tokens[-1]])
        outputs = []
        for l, layer in enumerate(weights):
            a = layernorm(x, layer.ln1_gamma, layer.ln1_beta, eps)
            q = vmm(a, layer.W_Q, mw, R)
            keys[l] = np.vstack([keys[l], vmm(a, layer.W_K, mw, R)])
            values[l] = np.vstack([values[l], vmm(a, layer.W_V, mw, R)])
            T = step + 1
            heads = []
            for hd in range(h):
                cols = slice(hd * dh, (hd + 1) * dh)
                heads.append(attention_head(q[cols], keys[l][:, cols], values[l][:, cols], scale, mw, R, offset=hd * T))
            attn = np.concatenate(heads)
            x = residual_add(x, vmm(attn, layer.W_proj, mw, R))
            a = layernorm(x, layer.ln2_gamma, layer.ln2_beta, eps)
            hidden = gelu(vmm(a, layer.W_ffn1, mw, R))
            x = residual_add(x, vmm(hidden, layer.W_ffn2, mw, R))
            outputs.append(x)
        a = layernorm(x, weights.lnf_gamma, weights.lnf_beta, eps)
        logits = vmm(a, weights.W_embed_out, mw, R)
        result.layer_outputs.append(outputs)
        result.logits.append(logits)
        result.tokens.append(int(np.argmax(logits)))
        log.debug("golden step %d -> token %d", step, result.tokens[-1])
    result.keys = keys
    result.values = values
    return result
