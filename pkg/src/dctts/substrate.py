"""Layer set, optimizer and accounting helpers every network here is built on.

All layers work on channels-last tensors ``[..., length, width]`` in float64 and
use torch autograd for the backward pass.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, UsageError

DTYPE = torch.float64

LAYER_KINDS = (
    "linear",
    "embedding",
    "conv1d",
    "depthwise_separable_conv1d",
    "layer_norm",
    "adaptive_layer_norm",
    "multi_head_self_attention",
    "ffn",
    "gelu",
    "relu",
    "softmax",
)


def _check_width(name, x, expected):
    if x.shape[-1] != expected:
        raise ConfigError(
            f"{name}: input shape {tuple(x.shape)} does not match expected "
            f"trailing width {expected} (layer shape {(expected,)})"
        )


def _uniform_fan_in(t, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound)


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        if in_features <= 0 or out_features <= 0:
            raise ConfigError(f"linear widths must be positive, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE)) if bias else None
        _uniform_fan_in(self.weight, in_features)

    def forward(self, x):
        _check_width("linear", x, self.in_features)
        return F.linear(x, self.weight, self.bias)


class Embedding(nn.Module):
    def __init__(self, num_embeddings: int, width: int):
        super().__init__()
        if num_embeddings <= 0 or width <= 0:
            raise ConfigError(f"embedding sizes must be positive, got {num_embeddings}x{width}")
        self.num_embeddings = num_embeddings
        self.width = width
        self.weight = nn.Parameter(torch.empty(num_embeddings, width, dtype=DTYPE))
        with torch.no_grad():
            self.weight.normal_(0.0, 0.02)

    def forward(self, ids):
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.num_embeddings):
            raise ConfigError(
                f"embedding: ids in [{int(ids.min())}, {int(ids.max())}] outside table of "
                f"shape {(self.num_embeddings, self.width)}"
            )
        return F.embedding(ids, self.weight)


class Conv1d(nn.Module):
    """Same-length 1-D convolution over the time axis of ``[B, L, C]`` input."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, groups: int = 1,
                 bias: bool = True):
        super().__init__()
        if kernel_size <= 0 or kernel_size % 2 == 0:
            raise ConfigError(f"conv1d kernel must be a positive odd integer, got {kernel_size}")
        if in_channels % groups or out_channels % groups:
            raise ConfigError(f"conv1d groups={groups} must divide {in_channels} and {out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.groups = groups
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels // groups, kernel_size, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=DTYPE)) if bias else None
        _uniform_fan_in(self.weight, in_channels // groups * kernel_size)

    def forward(self, x):
        _check_width("conv1d", x, self.in_channels)
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        y = F.conv1d(x.transpose(1, 2), self.weight, self.bias,
                     padding=self.kernel_size // 2, groups=self.groups).transpose(1, 2)
        return y.squeeze(0) if squeeze else y


class DepthwiseSeparableConv1d(nn.Module):
    """Depthwise conv followed by a pointwise (1x1) projection."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__()
        self.depthwise = Conv1d(in_channels, in_channels, kernel_size, groups=in_channels)
        self.pointwise = Conv1d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class LayerNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-5, affine: bool = True):
        super().__init__()
        self.width = width
        self.eps = eps
        if affine:
            self.weight = nn.Parameter(torch.ones(width, dtype=DTYPE))
            self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        else:
            self.weight = self.bias = None

    def forward(self, x):
        _check_width("layer_norm", x, self.width)
        return F.layer_norm(x, (self.width,), self.weight, self.bias, self.eps)


class AdaptiveLayerNorm(nn.Module):
    """LayerNorm whose scale and shift come from an auxiliary embedding.

    ``y = LN(x) * (1 + scale) + shift`` with ``[scale | shift] = W silu(aux)``.
    ``aux`` is ``[B, aux_width]`` (one vector per sequence) or broadcastable.
    """

    def __init__(self, width: int, aux_width: int, eps: float = 1e-5):
        super().__init__()
        self.width = width
        self.norm = LayerNorm(width, eps=eps, affine=False)
        self.to_scale_shift = Linear(aux_width, 2 * width)

    def forward(self, x, aux=None):
        if aux is None:
            raise UsageError("adaptive_layer_norm requires an auxiliary (timestep) embedding")
        scale, shift = self.to_scale_shift(F.silu(aux)).chunk(2, dim=-1)
        if x.dim() == 3 and scale.dim() == 2:
            scale, shift = scale.unsqueeze(1), shift.unsqueeze(1)
        return self.norm(x) * (1.0 + scale) + shift


class MultiHeadSelfAttention(nn.Module):
    """Full-context (non-causal) multi-head self-attention."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if heads <= 0 or width % heads:
            raise ConfigError(f"head count {heads} must divide model width {width}")
        self.width = width
        self.heads = heads
        self.q = Linear(width, width)
        self.k = Linear(width, width)
        self.v = Linear(width, width)
        self.out = Linear(width, width)

    def forward(self, x):
        _check_width("multi_head_self_attention", x, self.width)
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, n, _ = x.shape
        dh = self.width // self.heads

        def split(t):
            return t.view(b, n, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, self.width)
        y = self.out(y)
        return y.squeeze(0) if squeeze else y


class FeedForward(nn.Module):
    """Linear -> [depthwise conv] -> GeLU -> Linear.

    With ``conv_kernel > 0`` an extra depthwise convolution sits between the
    expansion and the activation (the text-encoder variant).
    """

    def __init__(self, width: int, hidden: int, conv_kernel: int = 0):
        super().__init__()
        self.width = width
        self.up = Linear(width, hidden)
        self.conv = Conv1d(hidden, hidden, conv_kernel, groups=hidden) if conv_kernel else None
        self.down = Linear(hidden, width)

    def forward(self, x):
        h = self.up(x)
        if self.conv is not None:
            h = self.conv(h)
        return self.down(F.gelu(h))


class GELU(nn.Module):
    def forward(self, x):
        return F.gelu(x)


class ReLU(nn.Module):
    def forward(self, x):
        return F.relu(x)


class Softmax(nn.Module):
    def forward(self, x):
        return torch.softmax(x, dim=-1)


@dataclass
class LayerSpec:
    """Declarative description of one layer (see ``LAYER_KINDS``)."""

    kind: str
    params: Dict[str, int] = field(default_factory=dict)


def build_layer(spec: LayerSpec) -> nn.Module:
    p = dict(spec.params)
    for key, value in p.items():
        if isinstance(value, int) and value <= 0 and key != "bias":
            raise ConfigError(f"{spec.kind}: hyperparameter {key}={value} must be positive")
    kind = spec.kind
    if kind == "linear":
        return Linear(p["in_features"], p["out_features"], bool(p.get("bias", True)))
    if kind == "embedding":
        return Embedding(p["num_embeddings"], p["width"])
    if kind == "conv1d":
        return Conv1d(p["in_channels"], p["out_channels"], p["kernel_size"])
    if kind == "depthwise_separable_conv1d":
        return DepthwiseSeparableConv1d(p["in_channels"], p["out_channels"], p["kernel_size"])
    if kind == "layer_norm":
        return LayerNorm(p["width"])
    if kind == "adaptive_layer_norm":
        return AdaptiveLayerNorm(p["width"], p["aux_width"])
    if kind == "multi_head_self_attention":
        return MultiHeadSelfAttention(p["width"], p["heads"])
    if kind == "ffn":
        return FeedForward(p["width"], p["hidden"], p.get("conv_kernel", 0))
    if kind == "gelu":
        return GELU()
    if kind == "relu":
        return ReLU()
    if kind == "softmax":
        return Softmax()
    raise ConfigError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


def forward(layer: nn.Module, x: torch.Tensor, aux: Optional[torch.Tensor] = None):
    """Apply ``layer``; ``aux`` is only accepted by adaptive layer norm."""
    if isinstance(layer, AdaptiveLayerNorm):
        return layer(x, aux)
    if aux is not None:
        raise UsageError(f"{type(layer).__name__} does not take an auxiliary input")
    return layer(x)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every parameter the scalar ``loss`` depends on."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise UsageError("backward() needs a scalar loss produced by a recorded forward pass")
    if loss.numel() != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


class Adam:
    """torch Adam plus named-state export and NaN guarding."""

    def __init__(self, named_params: Iterable[Tuple[str, nn.Parameter]], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        names = [n for n, _ in self.named]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique")
        self.opt = torch.optim.Adam([p for _, p in self.named], lr=lr, betas=(beta1, beta2), eps=eps)

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=False)

    def set_lr(self, lr: float):
        for group in self.opt.param_groups:
            group["lr"] = lr

    def step(self):
        for name, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        self.opt.step()

    @property
    def steps_taken(self) -> int:
        for _, p in self.named:
            st = self.opt.state.get(p)
            if st:
                return int(st["step"])
        return 0

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        """Moments and step counter keyed by ``opt/<param>/<slot>``."""
        out = {}
        for name, p in self.named:
            st = self.opt.state.get(p)
            if not st:
                continue
            out[f"opt/{name}/exp_avg"] = st["exp_avg"].detach().to(DTYPE)
            out[f"opt/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().to(DTYPE)
            out[f"opt/{name}/step"] = torch.tensor([float(st["step"])], dtype=DTYPE)
        return out

    def load_state_tensors(self, tensors: Dict[str, torch.Tensor]):
        for name, p in self.named:
            key = f"opt/{name}/exp_avg"
            if key not in tensors:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(float(tensors[f"opt/{name}/step"][0])),
                "exp_avg": tensors[key].clone().to(p.dtype).reshape(p.shape),
                "exp_avg_sq": tensors[f"opt/{name}/exp_avg_sq"].clone().to(p.dtype).reshape(p.shape),
            }


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class FlopCounter:
    """Tallies multiply-accumulate work (1 MAC = 2 FLOPs) via forward hooks.

    Activations and normalizations are excluded; attention adds the two
    ``L x L x d`` products (scores and value mixing) on top of its projections,
    which are counted by their own ``Linear`` hooks.
    """

    def __init__(self, *models: nn.Module):
        self.models = models
        self.flops = 0.0
        self._handles = []

    def _hook(self, module, inputs, output):
        if isinstance(module, Linear):
            positions = inputs[0].numel() // module.in_features
            self.flops += 2.0 * module.in_features * module.out_features * positions
        elif isinstance(module, Conv1d):
            positions = output.numel() // module.out_channels
            macs = module.in_channels // module.groups * module.kernel_size * module.out_channels
            self.flops += 2.0 * macs * positions
        elif isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            kh, kw = module.kernel_size
            cin = module.in_channels // module.groups
            if isinstance(module, nn.Conv2d):
                positions = output.numel() // module.out_channels
                self.flops += 2.0 * cin * kh * kw * module.out_channels * positions
            else:
                positions = inputs[0].numel() // module.in_channels
                self.flops += 2.0 * module.in_channels * kh * kw * (module.out_channels // module.groups) * positions
        elif isinstance(module, MultiHeadSelfAttention):
            x = inputs[0]
            n = x.shape[-2]
            batch = x.numel() // (n * module.width)
            self.flops += 2.0 * 2.0 * n * n * module.width * batch

    def __enter__(self):
        for model in self.models:
            for m in model.modules():
                self._handles.append(m.register_forward_hook(self._hook))
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles.clear()


def count_flops(fn: Callable[[], object], *models: nn.Module) -> float:
    """FLOPs executed by ``fn()`` inside ``models`` (raw count)."""
    with FlopCounter(*models) as counter, torch.no_grad():
        fn()
    return counter.flops


def estimate_flops(model: nn.Module, input_length: int) -> float:
    """GFLOPs of one forward pass over a length-``input_length`` input.

    Models expose ``example_inputs(input_length)``; bare layers get a random
    ``[input_length, width]`` tensor (ids for embeddings).
    """
    if input_length <= 0:
        raise ConfigError(f"input_length must be positive, got {input_length}")
    if hasattr(model, "example_inputs"):
        args = model.example_inputs(input_length)
    elif isinstance(model, Linear):
        args = (torch.zeros(input_length, model.in_features, dtype=DTYPE),)
    elif isinstance(model, Embedding):
        args = (torch.zeros(input_length, dtype=torch.long),)
    elif isinstance(model, Conv1d):
        args = (torch.zeros(input_length, model.in_channels, dtype=DTYPE),)
    elif isinstance(model, DepthwiseSeparableConv1d):
        args = (torch.zeros(input_length, model.depthwise.in_channels, dtype=DTYPE),)
    elif isinstance(model, (MultiHeadSelfAttention, FeedForward, LayerNorm)):
        args = (torch.zeros(input_length, model.width, dtype=DTYPE),)
    else:
        raise ConfigError(f"cannot build example inputs for {type(model).__name__}")
    return count_flops(lambda: model(*args), model) / 1e9
