"""
GRU encoder-decoder models for TPSF -> SFD deconvolution.

Two architectures share one implementation:
- teacher (Seq2Seq): two GRU layers in the encoder, the decoder mirrors them
  in reverse order, followed by a linear dense head.
- lite (Seq2SeqLite): one GRU layer in the encoder and one in the decoder.

The decoder consumes the encoder's per-step output sequence; every layer starts
from a zero hidden state. Gate convention: h_t = (1 - z) * h_prev + z * h_cand.
"""

import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np

from src.errors import ConfigError, ShapeError, StaleCacheError
from src.tensor_ops import Tensor

logger = logging.getLogger(__name__)

# Hidden sizes studied in the weight-reduction sweep.
SWEEP_HIDDEN_SIZES = (128, 64, 45, 32, 16)
GATES = ("z", "r", "h")


class ModelKind(Enum):
    """Architecture family."""
    TEACHER = "teacher"
    LITE = "lite"


@dataclass
class ModelConfig:
    """Architecture descriptor shared by training, quantization and persistence."""
    kind: ModelKind
    enc_hidden: List[int]
    seq_len: int
    input_dim: int = 1
    output_dim: int = 1

    @property
    def dec_hidden(self) -> List[int]:
        return list(reversed(self.enc_hidden))

    @property
    def label(self) -> str:
        return "x".join(str(h) for h in self.enc_hidden)

    def validate(self) -> None:
        expected_layers = 2 if self.kind == ModelKind.TEACHER else 1
        if len(self.enc_hidden) != expected_layers:
            raise ConfigError(
                f"{self.kind.value} model needs {expected_layers} encoder layer(s), "
                f"got hidden sizes {self.enc_hidden}")
        for h in self.enc_hidden:
            if not isinstance(h, (int, np.integer)) or h <= 0:
                raise ConfigError(f"Hidden sizes must be positive integers, got {self.enc_hidden}")
            if h not in SWEEP_HIDDEN_SIZES:
                logger.warning(f"Hidden size {h} is outside the studied sweep {SWEEP_HIDDEN_SIZES}")
        if self.seq_len <= 0:
            raise ConfigError(f"seq_len must be positive, got {self.seq_len}")
        if self.input_dim != 1 or self.output_dim != 1:
            raise ConfigError("Only scalar input and output sequences are supported")

    @classmethod
    def from_hidden_spec(cls, spec: str, kind: ModelKind, seq_len: int) -> "ModelConfig":
        """Parse labels like '64x16' or '32'."""
        try:
            hidden = [int(part) for part in spec.lower().replace("×", "x").split("x")]
        except ValueError:
            raise ConfigError(f"Invalid hidden size specification: {spec!r}")
        config = cls(kind=kind, enc_hidden=hidden, seq_len=seq_len)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, object]:
        return {
            "kind": self.kind.value,
            "enc_hidden": list(self.enc_hidden),
            "seq_len": self.seq_len,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelConfig":
        config = cls(kind=ModelKind(data["kind"]),
                     enc_hidden=[int(h) for h in data["enc_hidden"]],
                     seq_len=int(data["seq_len"]),
                     input_dim=int(data.get("input_dim", 1)),
                     output_dim=int(data.get("output_dim", 1)))
        config.validate()
        return config


@dataclass
class GruLayerWeights:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    def tensors(self) -> Dict[str, Tensor]:
        return {
            "W_z": self.W_z, "W_r": self.W_r, "W_h": self.W_h,
            "U_z": self.U_z, "U_r": self.U_r, "U_h": self.U_h,
            "b_z": self.b_z, "b_r": self.b_r, "b_h": self.b_h,
        }

    def validate(self) -> None:
        h, n_in = self.hidden_size, self.input_size
        for gate in GATES:
            W = getattr(self, f"W_{gate}")
            U = getattr(self, f"U_{gate}")
            b = getattr(self, f"b_{gate}")
            if W.shape != (h, n_in) or U.shape != (h, h) or b.shape != (h,):
                raise ShapeError(
                    f"Gate {gate} has inconsistent shapes W{W.shape} U{U.shape} b{b.shape} "
                    f"for hidden {h}, input {n_in}")

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruLayerWeights":
        mats = {f"W_{g}": np.zeros((hidden_size, input_size)) for g in GATES}
        mats.update({f"U_{g}": np.zeros((hidden_size, hidden_size)) for g in GATES})
        mats.update({f"b_{g}": np.zeros(hidden_size) for g in GATES})
        return cls(**mats)


@dataclass
class SeqModel:
    """Weights plus architecture for a teacher or student model."""
    config: ModelConfig
    encoder_layers: List[GruLayerWeights]
    decoder_layers: List[GruLayerWeights]
    dense_W: Tensor
    dense_b: Tensor
    # bumped whenever weights change so stale forward caches are detected
    revision: int = 0

    def parameters(self) -> Dict[str, Tensor]:
        """Named views of every weight tensor (mutating them mutates the model)."""
        params: Dict[str, Tensor] = {}
        for prefix, layers in (("encoder", self.encoder_layers), ("decoder", self.decoder_layers)):
            for i, layer in enumerate(layers):
                for name, tensor in layer.tensors().items():
                    params[f"{prefix}.{i}.{name}"] = tensor
        params["dense.W"] = self.dense_W
        params["dense.b"] = self.dense_b
        return params

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def copy(self) -> "SeqModel":
        return copy.deepcopy(self)

    def bump_revision(self) -> None:
        self.revision += 1

    def validate(self) -> None:
        self.config.validate()
        dims = [self.config.input_dim] + list(self.config.enc_hidden) + list(self.config.dec_hidden)
        layers = self.encoder_layers + self.decoder_layers
        if len(layers) != len(dims) - 1:
            raise ShapeError(f"Expected {len(dims) - 1} GRU layers, found {len(layers)}")
        for layer, n_in, h in zip(layers, dims[:-1], dims[1:]):
            layer.validate()
            if layer.input_size != n_in or layer.hidden_size != h:
                raise ShapeError(
                    f"Layer shape ({layer.input_size}->{layer.hidden_size}) breaks the chain "
                    f"({n_in}->{h})")
        h_last = dims[-1]
        if self.dense_W.shape != (self.config.output_dim, h_last) or self.dense_b.shape != (self.config.output_dim,):
            raise ShapeError(f"Dense head shapes {self.dense_W.shape}/{self.dense_b.shape} do not match hidden {h_last}")

    @classmethod
    def from_parameters(cls, config: ModelConfig, params: Dict[str, Tensor]) -> "SeqModel":
        """Assemble a model from the flat naming used by parameters()."""
        def layer(prefix: str, i: int) -> GruLayerWeights:
            kwargs = {}
            for gate in GATES:
                for kind in ("W", "U", "b"):
                    key = f"{prefix}.{i}.{kind}_{gate}"
                    if key not in params:
                        raise ShapeError(f"Missing tensor {key}")
                    kwargs[f"{kind}_{gate}"] = np.array(params[key], dtype=np.float64)
            return GruLayerWeights(**kwargs)

        model = cls(
            config=config,
            encoder_layers=[layer("encoder", i) for i in range(len(config.enc_hidden))],
            decoder_layers=[layer("decoder", i) for i in range(len(config.dec_hidden))],
            dense_W=np.array(params["dense.W"], dtype=np.float64),
            dense_b=np.array(params["dense.b"], dtype=np.float64),
        )
        model.validate()
        return model


def layer_dims(config: ModelConfig) -> List[Tuple[int, int]]:
    dims = [config.input_dim] + list(config.enc_hidden) + list(config.dec_hidden)
    return list(zip(dims[:-1], dims[1:]))


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed form: each GRU layer has 3h(in + h + 1) weights, the head h_last + 1."""
    total = 0
    for n_in, h in layer_dims(config):
        total += 3 * h * (n_in + h + 1)
    h_last = config.dec_hidden[-1]
    return total + config.output_dim * h_last + config.output_dim


def init_model(config: ModelConfig, seed: int) -> SeqModel:
    """Uniform(-sqrt(1/h), sqrt(1/h)) weights per layer, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)

    def make_layer(n_in: int, h: int) -> GruLayerWeights:
        bound = np.sqrt(1.0 / h)
        mats = {}
        for gate in GATES:
            mats[f"W_{gate}"] = rng.uniform(-bound, bound, size=(h, n_in))
        for gate in GATES:
            mats[f"U_{gate}"] = rng.uniform(-bound, bound, size=(h, h))
        for gate in GATES:
            mats[f"b_{gate}"] = np.zeros(h)
        return GruLayerWeights(**mats)

    dims = layer_dims(config)
    n_enc = len(config.enc_hidden)
    layers = [make_layer(n_in, h) for n_in, h in dims]
    h_last = config.dec_hidden[-1]
    bound = np.sqrt(1.0 / h_last)
    model = SeqModel(
        config=config,
        encoder_layers=layers[:n_enc],
        decoder_layers=layers[n_enc:],
        dense_W=rng.uniform(-bound, bound, size=(config.output_dim, h_last)),
        dense_b=np.zeros(config.output_dim),
    )
    logger.debug(f"Initialized {config.kind.value} {config.label} with {model.parameter_count()} parameters")
    return model


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class QuantHook(Protocol):
    """Transforms weights and activation sites during a forward pass (used for QAT)."""

    def weight(self, name: str, w: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        """Return the transformed weight and a straight-through mask (None means all ones)."""
        ...

    def activation(self, site: str, x: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        """Return the transformed activation and a straight-through mask (None means all ones)."""
        ...


@dataclass
class _StepCache:
    x: Tensor
    h_prev: Tensor
    z: Tensor
    r: Tensor
    h_cand: Tensor
    rh: Tensor
    mask: Optional[Tensor]


@dataclass
class _LayerCache:
    weights: Dict[str, Tensor]
    masks: Dict[str, Tensor] = field(default_factory=dict)
    steps: List[_StepCache] = field(default_factory=list)


@dataclass
class ForwardCache:
    """Activations kept by forward() for backward()."""
    model_id: int
    revision: int
    batched: bool
    seq_len: int
    layers: List[_LayerCache]
    last_hidden: Tensor
    dense_W: Tensor
    dense_mask: Optional[Tensor] = None


def _cell(x: Tensor, h_prev: Tensor, w: Dict[str, Tensor]) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Batched GRU cell; x is (B, in), h_prev is (B, h)."""
    z = sigmoid(x @ w["W_z"].T + h_prev @ w["U_z"].T + w["b_z"])
    r = sigmoid(x @ w["W_r"].T + h_prev @ w["U_r"].T + w["b_r"])
    rh = r * h_prev
    h_cand = np.tanh(x @ w["W_h"].T + rh @ w["U_h"].T + w["b_h"])
    h_t = (1.0 - z) * h_prev + z * h_cand
    return h_t, z, r, h_cand, rh


def gru_step(x_t: Tensor, h_prev: Tensor, w: GruLayerWeights) -> Tensor:
    """Advance one GRU layer by a single time step."""
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)
    h_prev = np.asarray(h_prev, dtype=np.float64).reshape(-1)
    if x_t.shape[0] != w.input_size or h_prev.shape[0] != w.hidden_size:
        raise ShapeError(
            f"gru_step got x {x_t.shape} and h {h_prev.shape} for weights "
            f"expecting input {w.input_size}, hidden {w.hidden_size}")
    h_t, _, _, _, _ = _cell(x_t[None, :], h_prev[None, :], w.tensors())
    return h_t[0]


def _effective_weights(prefix: str, layer: GruLayerWeights,
                       hook: Optional[QuantHook]) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    tensors = layer.tensors()
    if hook is None:
        return tensors, {}
    weights, masks = {}, {}
    for name, t in tensors.items():
        weights[name], mask = hook.weight(f"{prefix}.{name}", t)
        if mask is not None:
            masks[name] = mask
    return weights, masks


def _run_layer(seq: Tensor, weights: Dict[str, Tensor], masks: Dict[str, Tensor], site: str,
               hook: Optional[QuantHook]) -> Tuple[Tensor, _LayerCache]:
    batch, steps, _ = seq.shape
    hidden = weights["U_z"].shape[0]
    h = np.zeros((batch, hidden))
    outputs = np.empty((batch, steps, hidden))
    cache = _LayerCache(weights=weights, masks=masks)
    for t in range(steps):
        x_t = seq[:, t, :]
        h_t, z, r, h_cand, rh = _cell(x_t, h, weights)
        mask = None
        if hook is not None:
            h_t, mask = hook.activation(site, h_t)
        cache.steps.append(_StepCache(x=x_t, h_prev=h, z=z, r=r, h_cand=h_cand, rh=rh, mask=mask))
        outputs[:, t, :] = h_t
        h = h_t
    return outputs, cache


def forward(model: SeqModel, tpsf: Tensor, hook: Optional[QuantHook] = None) -> Tuple[Tensor, ForwardCache]:
    """
    Run the encoder-decoder over one sequence (seq_len,) or a batch (B, seq_len).

    Args:
        model: Model to evaluate
        tpsf: Peak-normalized TPSF(s)
        hook: Optional weight/activation transform (fake quantization)

    Returns:
        Predicted SFD with the same shape as tpsf, and the cache for backward
    """
    x = np.asarray(tpsf, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.config.seq_len:
        raise ShapeError(f"Expected sequences of length {model.config.seq_len}, got shape {np.shape(tpsf)}")

    if hook is not None:
        x, _ = hook.activation("input", x)
    seq = x[:, :, None]

    layer_caches: List[_LayerCache] = []
    for prefix, layers in (("encoder", model.encoder_layers), ("decoder", model.decoder_layers)):
        for i, layer in enumerate(layers):
            weights, masks = _effective_weights(f"{prefix}.{i}", layer, hook)
            seq, cache = _run_layer(seq, weights, masks, f"{prefix}.{i}.h", hook)
            layer_caches.append(cache)

    dense_W, dense_mask = (model.dense_W, None) if hook is None else hook.weight("dense.W", model.dense_W)
    out = seq @ dense_W[0] + model.dense_b[0]
    cache = ForwardCache(model_id=id(model), revision=model.revision, batched=batched,
                         seq_len=model.config.seq_len, layers=layer_caches,
                         last_hidden=seq, dense_W=dense_W, dense_mask=dense_mask)
    return (out if batched else out[0]), cache


def predict(model: SeqModel, tpsf: Tensor, batch_size: int = 512,
            hook: Optional[QuantHook] = None) -> Tensor:
    """Forward pass over many sequences in chunks, without keeping caches."""
    x = np.atleast_2d(np.asarray(tpsf, dtype=np.float64))
    if x.shape[0] == 0:
        return np.zeros((0, model.config.seq_len))
    outputs = [forward(model, x[start:start + batch_size], hook)[0]
               for start in range(0, x.shape[0], batch_size)]
    return np.concatenate(outputs, axis=0)


def _layer_backward(cache: _LayerCache, d_outputs: Tensor, prefix: str,
                    grads: Dict[str, Tensor]) -> Tensor:
    """Backprop-through-time for one layer; returns gradients wrt its input sequence."""
    w = cache.weights
    batch, steps, _ = d_outputs.shape
    n_in = w["W_z"].shape[1]
    d_inputs = np.zeros((batch, steps, n_in))
    g = {name: np.zeros_like(t) for name, t in w.items()}
    dh_next = np.zeros_like(cache.steps[0].h_prev)

    for t in range(steps - 1, -1, -1):
        s = cache.steps[t]
        dh = d_outputs[:, t, :] + dh_next
        if s.mask is not None:
            dh = dh * s.mask

        dz = dh * (s.h_cand - s.h_prev)
        dh_cand = dh * s.z
        dh_prev = dh * (1.0 - s.z)

        da_h = dh_cand * (1.0 - s.h_cand * s.h_cand)
        g["W_h"] += da_h.T @ s.x
        g["U_h"] += da_h.T @ s.rh
        g["b_h"] += da_h.sum(axis=0)
        drh = da_h @ w["U_h"]
        dx = da_h @ w["W_h"]

        dr = drh * s.h_prev
        dh_prev += drh * s.r

        da_r = dr * s.r * (1.0 - s.r)
        da_z = dz * s.z * (1.0 - s.z)
        g["W_z"] += da_z.T @ s.x
        g["U_z"] += da_z.T @ s.h_prev
        g["b_z"] += da_z.sum(axis=0)
        g["W_r"] += da_r.T @ s.x
        g["U_r"] += da_r.T @ s.h_prev
        g["b_r"] += da_r.sum(axis=0)

        dh_prev += da_z @ w["U_z"] + da_r @ w["U_r"]
        dx += da_z @ w["W_z"] + da_r @ w["W_r"]

        d_inputs[:, t, :] = dx
        dh_next = dh_prev

    for name, grad in g.items():
        if name in cache.masks:
            grad = grad * cache.masks[name]
        grads[f"{prefix}.{name}"] = grad
    return d_inputs


def backward(model: SeqModel, cache: ForwardCache, d_out: Tensor) -> Dict[str, Tensor]:
    """
    Exact gradients of a scalar loss given dLoss/dOutput.

    Gradients through fake-quantized weights and activations pass straight through;
    the masks kept by the hook zero the gradient of clamped elements.
    """
    if cache.model_id != id(model) or cache.revision != model.revision:
        raise StaleCacheError("Forward cache was produced by a different model revision")
    d = np.asarray(d_out, dtype=np.float64)
    if not cache.batched:
        d = d[None, :]
    if d.shape != cache.last_hidden.shape[:2]:
        raise ShapeError(f"d_out shape {np.shape(d_out)} does not match forward output {cache.last_hidden.shape[:2]}")

    grads: Dict[str, Tensor] = {
        "dense.W": np.einsum("bt,bth->h", d, cache.last_hidden)[None, :],
        "dense.b": np.array([d.sum()]),
    }
    if cache.dense_mask is not None:
        grads["dense.W"] = grads["dense.W"] * cache.dense_mask
    d_seq = d[:, :, None] * cache.dense_W[0][None, None, :]

    names = [f"encoder.{i}" for i in range(len(model.encoder_layers))]
    names += [f"decoder.{i}" for i in range(len(model.decoder_layers))]
    for prefix, layer_cache in zip(reversed(names), reversed(cache.layers)):
        d_seq = _layer_backward(layer_cache, d_seq, prefix, grads)
    return grads
