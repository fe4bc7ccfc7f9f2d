"""Fully-connected estimator networks with an input-derivative contract.

Networks map normalized (x, t) in [0,1]^2 to normalized (density, speed).
Physics residuals need derivatives of the outputs with respect to the
inputs that are themselves differentiable with respect to the weights,
so derivatives are taken with reverse-mode autograd and create_graph.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError

DTYPE = torch.float64

CHECKPOINT_VERSION = 1


@dataclass
class InputGradient:
    """d(output)/d(input) per channel, in normalized units."""

    d_rho_dx: np.ndarray
    d_rho_dt: np.ndarray
    d_v_dx: np.ndarray
    d_v_dt: np.ndarray


class MLP(torch.nn.Module):
    """tanh hidden layers, linear output, float64 throughout."""

    def __init__(self, layer_sizes, activation="tanh"):
        super().__init__()
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ValidationError(f"bad layer sizes {layer_sizes}")
        if activation != "tanh":
            raise ValidationError(f"unsupported activation {activation!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = activation
        self.layers = torch.nn.ModuleList(
            torch.nn.Linear(a, b, dtype=DTYPE)
            for a, b in zip(self.layer_sizes, self.layer_sizes[1:])
        )

    def forward(self, xt):
        h = xt
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        return self.layers[-1](h)


def init_parameters(layer_sizes, seed, activation="tanh") -> MLP:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    net = MLP(layer_sizes, activation)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in net.layers:
            torch.nn.init.xavier_uniform_(layer.weight, generator=gen)
            layer.bias.zero_()
    return net


def _check_finite(net):
    for p in net.parameters():
        if not torch.isfinite(p).all():
            raise ValidationError("network parameters contain non-finite values")


def _as_input_tensor(x, t):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if x.shape != t.shape:
        raise ValidationError("x and t must have the same shape")
    return torch.tensor(np.stack([x, t], axis=1), dtype=DTYPE)


def forward_states(net: MLP, x_norm, t_norm):
    """Evaluate (rho_hat, v_hat) in normalized units at the given points."""
    _check_finite(net)
    xt = _as_input_tensor(x_norm, t_norm)
    with torch.no_grad():
        out = net(xt)
    return out[:, 0].numpy(), out[:, 1].numpy()


def output_gradients(net: MLP, xt: torch.Tensor, create_graph=True):
    """Per-sample input gradients of both output channels.

    xt must be a leaf tensor of shape (N, 2). Returns tensors
    (d_rho, d_v), each (N, 2) ordered [d/dx, d/dt]. With create_graph the
    results stay differentiable with respect to the network parameters.
    """
    if not xt.requires_grad:
        raise ValidationError("xt must have requires_grad set")
    out = net(xt)
    # summing over the batch gives per-sample rows because samples are independent;
    # the first grad call must keep the graph alive for the second channel
    d_rho = torch.autograd.grad(
        out[:, 0].sum(), xt, create_graph=create_graph, retain_graph=True
    )[0]
    d_v = torch.autograd.grad(out[:, 1].sum(), xt, create_graph=create_graph)[0]
    return out, d_rho, d_v


def input_derivatives(net: MLP, x_norm, t_norm) -> InputGradient:
    """Exact network derivatives at the given normalized points."""
    _check_finite(net)
    xt = _as_input_tensor(x_norm, t_norm).requires_grad_(True)
    _, d_rho, d_v = output_gradients(net, xt, create_graph=False)
    d_rho = d_rho.detach().numpy()
    d_v = d_v.detach().numpy()
    return InputGradient(
        d_rho_dx=d_rho[:, 0], d_rho_dt=d_rho[:, 1],
        d_v_dx=d_v[:, 0], d_v_dt=d_v[:, 1],
    )


def save_checkpoint(net: MLP, path):
    """Versioned npz dump; float64 arrays round-trip exactly."""
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "layer_sizes": np.array(net.layer_sizes),
        "activation": np.array(net.activation),
    }
    for i, layer in enumerate(net.layers):
        arrays[f"W{i}"] = layer.weight.detach().numpy()
        arrays[f"b{i}"] = layer.bias.detach().numpy()
    np.savez(path, **arrays)


def load_checkpoint(path) -> MLP:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        sizes = [int(s) for s in data["layer_sizes"]]
        net = MLP(sizes, str(data["activation"]))
        with torch.no_grad():
            for i, layer in enumerate(net.layers):
                layer.weight.copy_(torch.from_numpy(data[f"W{i}"]))
                layer.bias.copy_(torch.from_numpy(data[f"b{i}"]))
    return net
