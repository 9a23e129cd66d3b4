"""2D encoder-decoder segmentation network with competitive dense blocks.

Layout for ``depth`` levels with widths ``filters[0..depth-1]``::

    encoder l:   CDB(in -> f_l) -> 2x2 max-pool (indices kept)
    bottleneck:  CDB(f_{d-1} -> f_{d-1})
    decoder l:   unpool(indices_l) -> max(., encoder_l) -> CDB(f_l -> f_{l-1})
    classifier:  1x1 conv (f_0 -> classes), softmax

A competitive dense block (CDB) runs ``convs_per_block`` units of
conv -> batch-norm -> activation. The first unit maps the input to the block
width; each later unit reads the running state and is merged back into it by
an element-wise maximum (maxout) instead of concatenation. Skip connections
are merged with the unpooled features the same way.

Inputs whose height/width are not multiples of ``2**depth`` are zero-padded
at the bottom/right and the output is cropped back.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int
    num_classes: int
    depth: int = 3
    filters: tuple = (16, 32, 64)
    convs_per_block: int = 3
    kernel_size: int = 5
    seed: int = 0
    activation: str = "prelu"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if len(self.filters) != self.depth or min(self.filters) < 1:
            raise ValidationError(f"need {self.depth} positive filter counts, got {self.filters}")
        if self.in_channels < 1 or self.num_classes < 1 or self.convs_per_block < 1:
            raise ValidationError("channel/class/conv counts must be positive")
        if self.kernel_size % 2 != 1:
            raise ValidationError("kernel size must be odd")
        if self.activation not in ("prelu", "relu"):
            raise ValidationError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**{**d, "filters": tuple(d["filters"])})


def unpool(x: torch.Tensor, indices: torch.Tensor, size) -> torch.Tensor:
    """Place pooled values back at their argmax positions (zeros elsewhere)."""
    n, c = x.shape[:2]
    out = x.new_zeros((n, c, size[0] * size[1]))
    out = out.scatter(2, indices.flatten(2), x.flatten(2))
    return out.view(n, c, size[0], size[1])


def maxout(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Competitive fusion of two equally shaped feature maps."""
    return torch.maximum(a, b)


class CompetitiveDenseBlock(nn.Module):
    def __init__(self, cin: int, cout: int, n: int = 3, k: int = 5, activation: str = "prelu"):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(cin if i == 0 else cout, cout, k, padding=k // 2) for i in range(n)
        )
        self.norms = nn.ModuleList(nn.BatchNorm2d(cout) for _ in range(n))
        if activation == "prelu":
            self.acts = nn.ModuleList(nn.PReLU(cout) for _ in range(n))
        else:
            self.acts = nn.ModuleList(nn.ReLU() for _ in range(n))

    def forward(self, x):
        state = self.acts[0](self.norms[0](self.convs[0](x)))
        for conv, norm, act in zip(self.convs[1:], self.norms[1:], self.acts[1:]):
            state = maxout(state, act(norm(conv(state))))
        return state


class SegNet(nn.Module):
    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        f, n, k, act = spec.filters, spec.convs_per_block, spec.kernel_size, spec.activation
        cins = (spec.in_channels,) + f[:-1]
        self.encoders = nn.ModuleList(
            CompetitiveDenseBlock(cins[lvl], f[lvl], n, k, act) for lvl in range(spec.depth))
        self.bottleneck = CompetitiveDenseBlock(f[-1], f[-1], n, k, act)
        self.decoders = nn.ModuleList(
            CompetitiveDenseBlock(f[lvl], f[lvl - 1] if lvl > 0 else f[0], n, k, act)
            for lvl in range(spec.depth))
        self.classifier = nn.Conv2d(f[0], spec.num_classes, 1)
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(int(self.spec.seed))
        slope = 0.25 if self.spec.activation == "prelu" else 0.0
        gain = np.sqrt(2.0 / (1.0 + slope * slope))
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                with torch.no_grad():
                    mod.weight.normal_(0.0, float(gain / np.sqrt(fan_in)), generator=gen)
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.reset_parameters()
            elif isinstance(mod, nn.PReLU):
                with torch.no_grad():
                    mod.weight.fill_(0.25)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits (N, classes, H, W)."""
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected (N, {self.spec.in_channels}, H, W) input, got "
                             f"{tuple(x.shape)}")
        h, w = x.shape[-2:]
        m = 2 ** self.spec.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        skips, indices = [], []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x, idx = F.max_pool2d(x, 2, return_indices=True)
            indices.append(idx)
        x = self.bottleneck(x)
        for lvl in reversed(range(self.spec.depth)):
            x = unpool(x, indices[lvl], skips[lvl].shape[-2:])
            x = self.decoders[lvl](maxout(x, skips[lvl]))
        logits = self.classifier(x)
        return logits[..., :h, :w]


def init_params(spec: ArchSpec) -> SegNet:
    """A freshly initialised network (deterministic in ``spec.seed``).

    Kernels ~ N(0, gain^2 / fan_in), zero biases, unit norm scales, PReLU slope 0.25.
    """
    return SegNet(spec)


def block_param_count(cin: int, cout: int, n: int, k: int, activation: str = "prelu") -> int:
    per_unit_extra = 2 * cout + (cout if activation == "prelu" else 0)
    first = cin * cout * k * k + cout
    rest = (n - 1) * (cout * cout * k * k + cout)
    return first + rest + n * per_unit_extra


def param_count(spec: ArchSpec) -> int:
    f, n, k, a = spec.filters, spec.convs_per_block, spec.kernel_size, spec.activation
    cins = (spec.in_channels,) + f[:-1]
    total = sum(block_param_count(cins[lvl], f[lvl], n, k, a) for lvl in range(spec.depth))
    total += block_param_count(f[-1], f[-1], n, k, a)
    total += sum(block_param_count(f[lvl], f[lvl - 1] if lvl else f[0], n, k, a)
                 for lvl in range(spec.depth))
    return total + f[0] * spec.num_classes + spec.num_classes


def named_arrays(net: SegNet) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in net.named_parameters()}


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


def forward(net: SegNet, inputs, training: bool = False) -> np.ndarray:
    """Class probabilities (N, classes, H, W) for a numpy batch."""
    was = net.training
    net.train(training)
    try:
        with torch.no_grad():
            x = torch.tensor(np.asarray(inputs), dtype=_dtype(net))
            return torch.softmax(net(x), dim=1).numpy()
    finally:
        net.train(was)


def predict_proba(net: SegNet, inputs, batch_size: int = 32) -> np.ndarray:
    """Inference-mode probabilities, batched to bound memory."""
    outs = [forward(net, inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


def backward(net: SegNet, inputs, loss_grad, training: bool = True) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dprobs.

    ``training=True`` normalises with batch statistics (the training graph);
    ``False`` uses the stored running statistics. Running statistics are
    restored afterwards, so the call has no side effects on ``net``.
    """
    saved = copy.deepcopy({k: v for k, v in net.state_dict().items() if "running" in k
                           or "num_batches" in k})
    was = net.training
    net.train(training)
    try:
        dt = _dtype(net)
        x = torch.tensor(np.asarray(inputs), dtype=dt)
        probs = torch.softmax(net(x), dim=1)
        g = torch.as_tensor(np.asarray(loss_grad), dtype=dt)
        if g.shape != probs.shape:
            raise ShapeError(f"loss gradient shape {tuple(g.shape)} != output {tuple(probs.shape)}")
        params = [p for _, p in net.named_parameters()]
        grads = torch.autograd.grad(probs, params, grad_outputs=g, allow_unused=True)
    finally:
        net.train(was)
        net.load_state_dict(saved, strict=False)
    return {name: (np.zeros(tuple(p.shape)) if gr is None else gr.numpy().copy())
            for (name, p), gr in zip(net.named_parameters(), grads)}
