"""
Dual-stream network: a 1-D CNN over the raw cycle and a GRU over its MFCC
frames, fused by a sigmoid feature mask, plus the single-stream and
no-attention ablation variants.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .nn import layers as L
from .preprocess import CYCLE_LENGTH, scale_waveforms

VARIANTS = ("ConvOnly", "RnnRaw", "RnnMfcc", "DualNoAttention", "Full")
VARIANT_TITLES = {
    "ConvOnly": "Convolution Stream",
    "RnnRaw": "Recurrent Stream with Raw Data",
    "RnnMfcc": "Recurrent Stream with MFCC Feature",
    "DualNoAttention": "Dual Stream Network without Attention",
    "Full": "Proposed Method",
}

# (kernel, filters) for a conv block, or None for a 2x max-pool
DEFAULT_BLOCKS = ((32, 16), None, (16, 32), None, (8, 64), (8, 64), None,
                  (8, 128), (4, 256), None)


@dataclass(frozen=True)
class ConvStreamSpec:
    blocks: tuple = DEFAULT_BLOCKS
    input_length: int = CYCLE_LENGTH
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            None if b is None else tuple(b) for b in self.blocks))

    @property
    def conv_blocks(self):
        return [b for b in self.blocks if b is not None]

    def lengths(self) -> list[int]:
        """Sequence length after each pool, starting with the input length."""
        out = [self.input_length]
        for b in self.blocks:
            if b is None:
                out.append(out[-1] // self.pool)
        return out

    @property
    def flatten_size(self) -> int:
        return self.lengths()[-1] * self.conv_blocks[-1][1]

    def narrowed(self, divisor: int) -> "ConvStreamSpec":
        blocks = tuple(None if b is None else (b[0], max(1, b[1] // divisor))
                       for b in self.blocks)
        return replace(self, blocks=blocks)


@dataclass(frozen=True)
class ModelConfig:
    conv: ConvStreamSpec = field(default_factory=ConvStreamSpec)
    gru_hidden: int = 128
    stream_dim: int = 64
    attention_dim: int = 64
    head_dim: int = 32
    mfcc_coeffs: int = 13
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @classmethod
    def reduced(cls, input_length=100, divisor=8, gru_hidden=8, **kw):
        """Small configuration for finite-difference checks."""
        conv = ConvStreamSpec(input_length=input_length).narrowed(divisor)
        return cls(conv=conv, gru_hidden=gru_hidden, **kw)

    def to_dict(self):
        d = asdict(self)
        d["conv"]["blocks"] = [None if b is None else list(b) for b in self.conv.blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv"] = ConvStreamSpec(**d["conv"])
        return cls(**d)


def _layer_rng(seed, name):
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class DualStreamModel:
    """All learnable layers of one variant.

    Layer initialisation is keyed on ``(seed, layer name)``, so variants built
    from the same seed share identical weights for the layers they have in
    common.
    """

    def __init__(self, variant="Full", config: ModelConfig = ModelConfig(), seed=0,
                 dtype=L.DEFAULT_DTYPE):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        self.variant, self.config, self.seed = variant, config, seed
        self.layers: dict[str, L.Layer] = {}
        c = config
        self.uses_conv = variant in ("ConvOnly", "DualNoAttention", "Full")
        self.uses_rnn = variant != "ConvOnly"
        self.uses_mfcc = variant in ("RnnMfcc", "DualNoAttention", "Full")
        self.uses_attention = variant == "Full"

        def add(name, factory):
            self.layers[name] = factory(_layer_rng(seed, name))

        if self.uses_conv:
            in_ch = 1
            for i, (k, f) in enumerate(c.conv.conv_blocks):
                add(f"conv{i}", lambda r, k=k, f=f, ic=in_ch: L.Conv1d(ic, f, k, r, dtype))
                self.layers[f"bn{i}"] = L.BatchNorm1d(f, c.bn_momentum, c.bn_eps, dtype)
                in_ch = f
            add("conv_fc", lambda r: L.Dense(c.conv.flatten_size, c.stream_dim, r, dtype))
        if self.uses_rnn:
            n_in = c.mfcc_coeffs if self.uses_mfcc else 1
            add("gru", lambda r: L.GRU(n_in, c.gru_hidden, r, dtype))
            add("gru_fc", lambda r: L.Dense(c.gru_hidden, c.stream_dim, r, dtype))
        fused = 2 * c.stream_dim if (self.uses_conv and self.uses_rnn) else c.stream_dim
        if self.uses_attention:
            add("att_down", lambda r: L.Dense(fused, c.attention_dim, r, dtype))
            add("att_up", lambda r: L.Dense(c.attention_dim, fused, r, dtype))
        add("head_hidden", lambda r: L.Dense(fused, c.head_dim, r, dtype))
        add("head_out", lambda r: L.Dense(c.head_dim, 1, r, dtype))

    # -- parameter bookkeeping -------------------------------------------------

    def parameters(self) -> dict:
        """Flat ``layer.param`` -> array mapping (the live arrays)."""
        return {f"{ln}.{pn}": arr for ln, layer in self.layers.items()
                for pn, arr in layer.params.items()}

    def buffers(self) -> dict:
        return {f"{ln}.{bn}": arr for ln, layer in self.layers.items()
                for bn, arr in layer.buffers.items()}

    def state_dict(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def load_state_dict(self, tensors: dict) -> None:
        expected = self.state_dict()
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        if missing or extra:
            raise StateError(f"state mismatch: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for name, arr in tensors.items():
            ln, pn = name.split(".", 1)
            layer = self.layers[ln]
            store = layer.params if pn in layer.params else layer.buffers
            if store[pn].shape != arr.shape:
                raise StateError(f"{name}: shape {arr.shape}, expected {store[pn].shape}")
            store[pn] = np.array(arr, dtype=store[pn].dtype)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def astype(self, dtype):
        for layer in self.layers.values():
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.layers["head_out"].params["weight"].dtype

    def to_checkpoint(self, extra: dict | None = None):
        meta = {"variant": self.variant, "seed": self.seed,
                "model_config": self.config.to_dict(), **(extra or {})}
        return self.state_dict(), meta

    @classmethod
    def from_checkpoint(cls, tensors, metadata):
        model = cls(metadata["variant"], ModelConfig.from_dict(metadata["model_config"]),
                    metadata.get("seed", 0))
        model.load_state_dict(tensors)
        return model

    # -- streams ---------------------------------------------------------------

    def conv_stream_forward(self, x, training=False):
        """(batch, 1, length) scaled cycles -> (batch, stream_dim)."""
        spec = self.config.conv
        if x.ndim != 3 or x.shape[1:] != (1, spec.input_length):
            raise ShapeError(f"conv stream expects (batch, 1, {spec.input_length}), got {x.shape}")
        slope = self.config.leaky_slope
        steps = []
        i = 0
        h = x
        for block in spec.blocks:
            if block is None:
                length = h.shape[-1]
                h, idx = L.maxpool1d(h, spec.pool, spec.pool)
                steps.append(("pool", idx, length))
                continue
            h, c_conv = self.layers[f"conv{i}"].forward(h, training)
            pre, c_bn = self.layers[f"bn{i}"].forward(h, training)
            h = L.leaky_relu(pre, slope)
            steps.append(("block", i, c_conv, c_bn, pre))
            i += 1
        shape = h.shape
        out, c_fc = self.layers["conv_fc"].forward(h.reshape(h.shape[0], -1), training)
        return out, {"steps": steps, "shape": shape, "fc": c_fc}

    def conv_stream_backward(self, cache, dout, grads):
        d, g = self.layers["conv_fc"].backward(cache["fc"], dout)
        grads.update({f"conv_fc.{k}": v for k, v in g.items()})
        d = d.reshape(cache["shape"])
        slope = self.config.leaky_slope
        for step in reversed(cache["steps"]):
            if step[0] == "pool":
                _, idx, length = step
                d = L.maxpool1d_backward(d, idx, length)
                continue
            _, i, c_conv, c_bn, pre = step
            d = L.leaky_relu_backward(pre, d, slope)
            d, g = self.layers[f"bn{i}"].backward(c_bn, d)
            grads.update({f"bn{i}.{k}": v for k, v in g.items()})
            d, g = self.layers[f"conv{i}"].backward(c_conv, d)
            grads.update({f"conv{i}.{k}": v for k, v in g.items()})
        return d

    def recurrent_stream_forward(self, seq, training=False):
        """(batch, time, features) -> (batch, stream_dim) from the last hidden state."""
        _, h_last, c_gru = self.layers["gru"].forward(seq, training=training)
        out, c_fc = self.layers["gru_fc"].forward(h_last, training)
        return out, {"gru": c_gru, "fc": c_fc}

    def recurrent_stream_backward(self, cache, dout, grads):
        d, g = self.layers["gru_fc"].backward(cache["fc"], dout)
        grads.update({f"gru_fc.{k}": v for k, v in g.items()})
        dx, g, _ = self.layers["gru"].backward(cache["gru"], d_final=d)
        grads.update({f"gru.{k}": v for k, v in g.items()})
        return dx

    # -- fusion and head -------------------------------------------------------

    def _head(self, g, training):
        a, c1 = self.layers["head_hidden"].forward(g, training)
        h = L.relu(a)
        logit, c2 = self.layers["head_out"].forward(h, training)
        p = L.sigmoid(logit[:, 0])
        return p, {"hidden": c1, "pre": a, "out": c2, "p": p}

    def _head_backward(self, cache, dp, grads):
        # derivative taken at the BCE clamp so a float32-saturated output still learns
        p = np.clip(cache["p"], L.BCE_CLAMP, 1 - L.BCE_CLAMP)
        dlogit = L.sigmoid_backward(p, dp)[:, None]
        d, g = self.layers["head_out"].backward(cache["out"], dlogit)
        grads.update({f"head_out.{k}": v for k, v in g.items()})
        d = L.relu_backward(cache["pre"], d)
        d, g = self.layers["head_hidden"].backward(cache["hidden"], d)
        grads.update({f"head_hidden.{k}": v for k, v in g.items()})
        return d

    def attention_mask(self, fused, training=False):
        a, c_down = self.layers["att_down"].forward(fused, training)
        r = L.relu(a)
        m_pre, c_up = self.layers["att_up"].forward(r, training)
        m = L.sigmoid(m_pre)
        return m, {"down": c_down, "a": a, "up": c_up, "m": m, "c": fused}

    def attention_fuse(self, f_conv, f_rnn, training=False):
        """Concatenate, gate by the sigmoid mask, classify. Returns probabilities."""
        dim = self.config.stream_dim
        if f_conv.shape[1:] != (dim,) or f_rnn.shape[1:] != (dim,):
            raise ShapeError(f"stream features must both be (batch, {dim})")
        c = np.concatenate([f_conv, f_rnn], axis=1)
        m, c_att = self.attention_mask(c, training)
        p, c_head = self._head(m * c, training)
        return p, {"att": c_att, "head": c_head}

    def _attention_backward(self, cache, dg, grads):
        m, c = cache["m"], cache["c"]
        dc = dg * m
        dm_pre = L.sigmoid_backward(m, dg * c)
        d, g = self.layers["att_up"].backward(cache["up"], dm_pre)
        grads.update({f"att_up.{k}": v for k, v in g.items()})
        d = L.relu_backward(cache["a"], d)
        d, g = self.layers["att_down"].backward(cache["down"], d)
        grads.update({f"att_down.{k}": v for k, v in g.items()})
        return dc + d

    # -- whole model -----------------------------------------------------------

    def forward(self, waves=None, mfccs=None, training=False):
        """P(abnormal) for a batch.

        ``waves`` are fixed-length cycles (batch, length) before conv scaling;
        the conv stream applies ``scale_waveforms`` itself and RnnRaw reads
        them unscaled as (length, 1) sequences. ``mfccs`` are
        (batch, frames, coeffs).
        """
        dt = self.dtype
        if self.uses_conv or self.variant == "RnnRaw":
            if waves is None:
                raise ConfigError(f"variant {self.variant} needs cycle waveforms")
            waves = np.asarray(waves, dtype=dt)
            if waves.ndim == 3 and waves.shape[1] == 1:
                waves = waves[:, 0]
            if waves.ndim != 2:
                raise ShapeError(f"waves must be (batch, length), got {waves.shape}")
        if self.uses_mfcc:
            if mfccs is None:
                raise ConfigError(f"variant {self.variant} needs MFCC features")
            mfccs = np.asarray(mfccs, dtype=dt)
            if mfccs.ndim != 3 or mfccs.shape[2] != self.config.mfcc_coeffs:
                raise ShapeError(f"mfccs must be (batch, frames, {self.config.mfcc_coeffs})")
        cache = {"model": self}
        feats = []
        if self.uses_conv:
            f, cache["conv"] = self.conv_stream_forward(scale_waveforms(waves)[:, None, :],
                                                       training)
            feats.append(f)
        if self.uses_rnn:
            seq = mfccs if self.uses_mfcc else waves[:, :, None]
            f, cache["rnn"] = self.recurrent_stream_forward(seq, training)
            feats.append(f)
        if len(feats) == 2 and feats[0].shape[0] != feats[1].shape[0]:
            raise ShapeError("waves and mfccs disagree on batch size")
        if self.uses_attention:
            p, cache["fuse"] = self.attention_fuse(feats[0], feats[1], training)
        else:
            p, cache["head"] = self._head(np.concatenate(feats, axis=1), training)
        return p, cache

    def backward(self, cache, dp):
        """Gradients of every parameter given dLoss/dP; parameters are not touched."""
        if not isinstance(cache, dict) or cache.get("model") is not self:
            raise StateError("cache does not come from this model's forward pass")
        grads = {}
        if self.uses_attention:
            dg = self._head_backward(cache["fuse"]["head"], dp, grads)
            dfeat = self._attention_backward(cache["fuse"]["att"], dg, grads)
        else:
            dfeat = self._head_backward(cache["head"], dp, grads)
        dim = self.config.stream_dim
        parts = [dfeat[:, :dim], dfeat[:, dim:]] if dfeat.shape[1] == 2 * dim else [dfeat]
        k = 0
        if self.uses_conv:
            self.conv_stream_backward(cache["conv"], parts[k], grads)
            k += 1
        if self.uses_rnn:
            self.recurrent_stream_backward(cache["rnn"], parts[k], grads)
        params = self.parameters()
        return {name: grads[name] for name in params}

    def predict_proba(self, waves=None, mfccs=None, batch_size=64) -> np.ndarray:
        """Eval-mode probabilities, evaluated in chunks."""
        n = len(waves) if waves is not None else len(mfccs)
        out = []
        for s in range(0, n, batch_size):
            w = None if waves is None else waves[s:s + batch_size]
            m = None if mfccs is None else mfccs[s:s + batch_size]
            out.append(self.forward(w, m, training=False)[0])
        return np.concatenate(out) if out else np.zeros(0)


def build_variant(kind: str, seed: int = 0, config: ModelConfig = ModelConfig(),
                  dtype=L.DEFAULT_DTYPE) -> DualStreamModel:
    return DualStreamModel(kind, config, seed, dtype)
