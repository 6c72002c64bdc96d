"""Central finite-difference gradient oracle, independent of autograd."""

from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    a = analytic.detach().reshape(-1).double()
    b = numeric.detach().reshape(-1).double()
    denom = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / denom


@torch.no_grad()
def numeric_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-5,
                     indices: Optional[Sequence[int]] = None) -> torch.Tensor:
    """d fn() / d tensor by central differences, optionally on a subset of flat indices."""
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = torch.zeros(len(idx), dtype=torch.float64)
    for i, j in enumerate(idx):
        orig = flat[j].item()
        flat[j] = orig + h
        up = float(fn())
        flat[j] = orig - h
        down = float(fn())
        flat[j] = orig
        out[i] = (up - down) / (2.0 * h)
    return out


def check_gradients(fn: Callable[[], torch.Tensor], tensors: Dict[str, torch.Tensor],
                    h: float = 1e-5, max_coords: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """Relative error between autograd and central differences for each tensor.

    ``fn`` must be deterministic. With ``max_coords`` only that many randomly
    chosen coordinates per tensor are probed. The extra key ``"all"`` holds
    the error over every probed coordinate at once; it stays meaningful when a
    tensor's true gradient is identically zero (e.g. attention key biases,
    which cancel in the softmax), where the per-tensor ratio only measures
    round-off.
    """
    for t in tensors.values():
        t.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    errors = {}
    all_a, all_n = [], []
    for (name, t), g in zip(tensors.items(), grads):
        if g is None:
            g = torch.zeros_like(t)
        n = t.numel()
        if max_coords is not None and n > max_coords:
            idx = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
        else:
            idx = list(range(n))
        num = numeric_gradient(fn, t, h=h, indices=idx)
        errors[name] = relative_error(g.reshape(-1)[idx], num)
        all_a.append(g.reshape(-1)[idx].detach().double())
        all_n.append(num)
    errors["all"] = relative_error(torch.cat(all_a), torch.cat(all_n))
    return errors


# Small probe configurations, one per layer kind.
LAYER_CASES = {
    "linear": ({"in_features": 5, "out_features": 4}, (6, 5)),
    "embedding": ({"num_embeddings": 7, "width": 4}, (6,)),
    "conv1d": ({"in_channels": 3, "out_channels": 4, "kernel_size": 3}, (7, 3)),
    "depthwise_separable_conv1d": ({"in_channels": 4, "out_channels": 3, "kernel_size": 5}, (7, 4)),
    "layer_norm": ({"width": 6}, (5, 6)),
    "adaptive_layer_norm": ({"width": 6, "aux_width": 3}, (2, 5, 6)),
    "multi_head_self_attention": ({"width": 6, "heads": 2}, (2, 5, 6)),
    "ffn": ({"width": 4, "hidden": 8, "conv_kernel": 3}, (6, 4)),
    "gelu": ({}, (4, 5)),
    "relu": ({}, (4, 5)),
    "softmax": ({}, (4, 5)),
}


def layer_gradient_errors(kind: str, seed: int, h: float = 1e-5) -> Dict[str, float]:
    """Autograd vs central differences for one layer kind, inputs and parameters alike.

    The scalar probed is ``sum(w * layer(x))`` with a fixed random ``w``.
    """
    from .substrate import LayerSpec, build_layer, forward

    params, shape = LAYER_CASES[kind]
    torch.manual_seed(seed)
    layer = build_layer(LayerSpec(kind, params))
    with torch.no_grad():
        for p in layer.parameters():
            # move away from the default init (e.g. LN weight = 1) to a generic point
            p.add_(0.3 * torch.randn_like(p))
    tensors = {f"param:{n}": p for n, p in layer.named_parameters()}
    if kind == "embedding":
        x = torch.randint(0, params["num_embeddings"], shape)
    else:
        x = torch.randn(*shape, dtype=torch.float64, requires_grad=True)
        if kind == "relu":
            # keep inputs clear of the kink so differences stay one-sided-free
            with torch.no_grad():
                x.add_(torch.sign(x) * 0.05)
        tensors["input"] = x
    aux = None
    if kind == "adaptive_layer_norm":
        aux = torch.randn(shape[0], params["aux_width"], dtype=torch.float64, requires_grad=True)
        tensors["aux"] = aux
    out_shape = forward(layer, x, aux).shape
    w = torch.randn(out_shape, dtype=torch.float64)

    def fn():
        return (w * forward(layer, x, aux)).sum()

    return check_gradients(fn, tensors, h=h, seed=seed)
