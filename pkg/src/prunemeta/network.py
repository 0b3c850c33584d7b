"""Mask-aware toy convolutional networks.

A Network is an immutable value: an ordered tuple of conv layers followed by
fully-connected layers, with plain tensors for weights. Forward passes are
functional (parameters in, activations out), so meta-learning can run the same
code path with adapted parameter sets. Channel masks zero a conv layer's
OUTPUT channels; repacking removes those channels physically, together with
the matching input slices of the successor layer.

Conventions baked in here and relied on elsewhere:
  - conv layers use odd square-ish kernels with "same" padding (pad = k // 2),
    an optional stride, ReLU, then an optional average-pool window;
  - the embedding fed to the classifier head is the global average pool (GAP)
    of the last conv layer's output;
  - dropout on a conv layer applies to its output map, dropout on a
    fully-connected layer applies to its input vector; both only fire when an
    explicit torch.Generator is supplied, so plain forwards are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, StructuralError

ChannelMask = dict[str, np.ndarray]


@dataclass(frozen=True)
class Layer:
    """One layer record.

    kind is "conv" or "fc". For conv layers weight is [out, in, kh, kw]; for
    fc layers weight is [out, in] and kernel/stride/pool are ignored.
    """

    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    pool: int = 1
    dropout: float = 0.0
    weight: torch.Tensor = field(repr=False, default=None)
    bias: torch.Tensor = field(repr=False, default=None)


@dataclass(frozen=True)
class Network:
    layers: tuple[Layer, ...]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_channels

    @property
    def dtype(self) -> torch.dtype:
        return self.layers[0].weight.dtype

    def conv_layers(self) -> tuple[Layer, ...]:
        return tuple(l for l in self.layers if l.kind == "conv")

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise StructuralError(f"no layer named {name!r}")


@dataclass(frozen=True)
class ActivationRecord:
    """GAP activations per conv layer, restricted to retained channels.

    pooled maps layer name to a [samples, retained_channels] array; channels
    maps layer name to the retained channel indices those columns refer to.
    """

    pooled: dict[str, np.ndarray]
    channels: dict[str, np.ndarray]
    labels: np.ndarray


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    energy_mj: float


def validate_network(net: Network) -> None:
    names = [l.name for l in net.layers]
    if len(set(names)) != len(names):
        raise StructuralError("layer names must be unique")
    prev_out = None
    seen_fc = False
    for l in net.layers:
        if l.kind not in ("conv", "fc"):
            raise StructuralError(f"layer {l.name}: unknown kind {l.kind!r}")
        if l.kind == "conv" and seen_fc:
            raise StructuralError(f"layer {l.name}: conv after fc is not supported")
        seen_fc = seen_fc or l.kind == "fc"
        if prev_out is not None and l.in_channels != prev_out:
            raise StructuralError(
                f"layer {l.name}: in_channels {l.in_channels} "
                f"!= previous out_channels {prev_out}"
            )
        expect = (
            (l.out_channels, l.in_channels, *l.kernel)
            if l.kind == "conv"
            else (l.out_channels, l.in_channels)
        )
        if tuple(l.weight.shape) != expect:
            raise StructuralError(
                f"layer {l.name}: weight shape {tuple(l.weight.shape)} != {expect}"
            )
        if tuple(l.bias.shape) != (l.out_channels,):
            raise StructuralError(f"layer {l.name}: bias shape mismatch")
        prev_out = l.out_channels


def build_network(
    specs: Sequence[dict],
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> Network:
    """Construct a Network from layer spec dicts with seeded Kaiming init.

    Each spec dict needs name/kind/in_channels/out_channels and may carry
    kernel, stride, pool, dropout. Weights are drawn from a seeded generator
    so construction is reproducible.
    """
    g = torch.Generator().manual_seed(seed)
    layers = []
    for s in specs:
        kind = s["kind"]
        cin, cout = s["in_channels"], s["out_channels"]
        kernel = tuple(s.get("kernel", (3, 3) if kind == "conv" else (1, 1)))
        shape = (cout, cin, *kernel) if kind == "conv" else (cout, cin)
        fan_in = cin * kernel[0] * kernel[1] if kind == "conv" else cin
        std = (2.0 / fan_in) ** 0.5
        w = torch.randn(shape, generator=g, dtype=dtype) * std
        b = torch.zeros(cout, dtype=dtype)
        layers.append(
            Layer(
                name=s["name"],
                kind=kind,
                in_channels=cin,
                out_channels=cout,
                kernel=kernel,
                stride=int(s.get("stride", 1)),
                pool=int(s.get("pool", 1)),
                dropout=float(s.get("dropout", 0.0)),
                weight=w,
                bias=b,
            )
        )
    net = Network(tuple(layers))
    validate_network(net)
    return net


def toy_backbone(
    in_channels: int = 3,
    channels: Sequence[int] = (16, 32, 64),
    num_classes: int = 9,
    head_dropout: float = 0.15,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> Network:
    """Default desk-scale backbone: 3x3 convs with /2 pooling, GAP, fc head."""
    specs = []
    cin = in_channels
    for i, cout in enumerate(channels):
        specs.append(
            dict(
                name=f"conv{i + 1}",
                kind="conv",
                in_channels=cin,
                out_channels=cout,
                kernel=(3, 3),
                pool=2,
            )
        )
        cin = cout
    specs.append(
        dict(
            name="head",
            kind="fc",
            in_channels=cin,
            out_channels=num_classes,
            dropout=head_dropout,
        )
    )
    return build_network(specs, seed=seed, dtype=dtype)


def reference_backbone(num_classes: int = 15) -> Network:
    """Sequential plain-conv stand-in for an 18-layer residual backbone.

    Used only for cost-accounting cross-checks at full scale (never trained
    here); the channel progression 64-128-256-512 lands at ~11.19M parameters.
    """
    specs: list[dict] = []
    cin = 3
    idx = 0
    plan = [  # (width, kernel, first stride, conv count)
        (64, 7, 2, 1),
        (64, 3, 1, 5),
        (128, 3, 2, 1),
        (128, 3, 1, 4),
        (256, 3, 2, 1),
        (256, 3, 1, 3),
        (512, 3, 2, 1),
        (512, 3, 1, 3),
    ]
    for width, k, stride, count in plan:
        for _ in range(count):
            idx += 1
            specs.append(
                dict(
                    name=f"conv{idx}",
                    kind="conv",
                    in_channels=cin,
                    out_channels=width,
                    kernel=(k, k),
                    stride=stride,
                )
            )
            cin = width
            stride = 1
    specs.append(dict(name="head", kind="fc", in_channels=cin, out_channels=num_classes))
    return build_network(specs, seed=0)


# ---------------------------------------------------------------------------
# masks


def full_mask(net: Network) -> ChannelMask:
    return {l.name: np.ones(l.out_channels, dtype=bool) for l in net.conv_layers()}


def validate_mask(net: Network, mask: ChannelMask) -> None:
    for l in net.conv_layers():
        if l.name not in mask:
            raise StructuralError(f"mask missing conv layer {l.name!r}")
        v = np.asarray(mask[l.name], dtype=bool)
        if v.shape != (l.out_channels,):
            raise StructuralError(
                f"mask for {l.name!r} has length {v.shape}, "
                f"layer has {l.out_channels} output channels"
            )
        if not v.any():
            raise StructuralError(f"mask empties layer {l.name!r}")


def compose_masks(prior: ChannelMask, live: ChannelMask) -> ChannelMask:
    """Map a mask over the repacked (live) channels back to original indices.

    prior is original-indexed; live is indexed over prior's retained channels.
    """
    out: ChannelMask = {}
    for name, pv in prior.items():
        pv = np.asarray(pv, dtype=bool)
        lv = np.asarray(live[name], dtype=bool)
        if lv.shape != (int(pv.sum()),):
            raise StructuralError(
                f"live mask for {name!r} has {lv.shape[0]} entries, "
                f"prior retains {int(pv.sum())}"
            )
        merged = np.zeros_like(pv)
        merged[np.flatnonzero(pv)] = lv
        out[name] = merged
    return out


def mask_to_json(mask: ChannelMask) -> str:
    payload = {name: [int(x) for x in np.asarray(v)] for name, v in mask.items()}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def mask_from_json(text: str) -> ChannelMask:
    payload = json.loads(text)
    return {name: np.asarray(v, dtype=bool) for name, v in payload.items()}


# ---------------------------------------------------------------------------
# functional forward


def parameters(net: Network) -> dict[str, dict[str, torch.Tensor]]:
    """Detached copies of all parameters, keyed by layer name."""
    return {
        l.name: {"weight": l.weight.detach().clone(), "bias": l.bias.detach().clone()}
        for l in net.layers
    }


def with_parameters(net: Network, params: Mapping[str, Mapping[str, torch.Tensor]]) -> Network:
    layers = tuple(
        replace(
            l,
            weight=params[l.name]["weight"].detach().clone(),
            bias=params[l.name]["bias"].detach().clone(),
        )
        for l in net.layers
    )
    return Network(layers)


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator) -> torch.Tensor:
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def functional_forward(
    net: Network,
    params: Mapping[str, Mapping[str, torch.Tensor]],
    x: torch.Tensor,
    mask: ChannelMask | None = None,
    dropout_gen: torch.Generator | None = None,
    capture: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, dict[str, torch.Tensor]]:
    """Differentiable forward. Returns (logits, embedding, captured GAP maps).

    Captured maps are full-width (mask applied but columns not dropped);
    callers restrict columns. Dropout fires only when dropout_gen is given.
    """
    if x.ndim != 4:
        raise StructuralError(f"expected [batch, channels, h, w] input, got {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise ConfigError("empty batch")
    pooled: dict[str, torch.Tensor] = {}
    mask_t: dict[str, torch.Tensor] = {}
    if mask is not None:
        for name, v in mask.items():
            mask_t[name] = torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=x.dtype)
    emb = None
    for l in net.layers:
        w, b = params[l.name]["weight"], params[l.name]["bias"]
        if l.kind == "conv":
            if x.shape[1] != l.in_channels:
                raise StructuralError(
                    f"layer {l.name}: input has {x.shape[1]} channels, expected {l.in_channels}"
                )
            pad = (l.kernel[0] // 2, l.kernel[1] // 2)
            x = torch.nn.functional.conv2d(x, w, b, stride=l.stride, padding=pad)
            x = torch.relu(x)
            if l.name in mask_t:
                x = x * mask_t[l.name][None, :, None, None]
            if l.pool > 1:
                x = torch.nn.functional.avg_pool2d(x, l.pool)
            if capture:
                pooled[l.name] = x.mean(dim=(2, 3))
            if dropout_gen is not None and l.dropout > 0:
                x = _dropout(x, l.dropout, dropout_gen)
        else:
            if emb is None:
                emb = x.mean(dim=(2, 3))
                x = emb
            if dropout_gen is not None and l.dropout > 0:
                x = _dropout(x, l.dropout, dropout_gen)
            x = x @ w.T + b
            if l is not net.layers[-1]:
                x = torch.relu(x)
    if emb is None:  # pure-conv network, no head
        emb = x.mean(dim=(2, 3))
        x = emb
    return x, emb, pooled


def forward_with_stats(
    net: Network,
    mask: ChannelMask | None,
    images: np.ndarray | torch.Tensor,
    labels: np.ndarray | Sequence[int] | None = None,
) -> tuple[np.ndarray, ActivationRecord]:
    """Deterministic forward returning logits and GAP activation statistics.

    The ActivationRecord's columns are restricted to the mask's retained
    channels per layer; masked channels contribute zero downstream.
    """
    if mask is None:
        mask = full_mask(net)
    validate_mask(net, mask)
    x = torch.as_tensor(np.asarray(images), dtype=net.dtype)
    with torch.no_grad():
        logits, _, pooled = functional_forward(net, parameters(net), x, mask, capture=True)
    labels_arr = (
        np.asarray(labels, dtype=np.int64) if labels is not None else np.full(x.shape[0], -1)
    )
    rec_pooled, rec_channels = {}, {}
    for name, t in pooled.items():
        keep = np.flatnonzero(np.asarray(mask[name], dtype=bool))
        rec_pooled[name] = t.numpy()[:, keep].astype(np.float64)
        rec_channels[name] = keep
    return logits.numpy(), ActivationRecord(rec_pooled, rec_channels, labels_arr)


# ---------------------------------------------------------------------------
# repack and cost accounting


def repack_network(net: Network, mask: ChannelMask) -> Network:
    """Physically remove masked channels; forwards match the masked net.

    A masked conv channel disappears from the layer's output and from the
    next layer's input slices (for the first fc layer the GAP embedding
    columns are the conv channels, one input feature each).
    """
    validate_mask(net, mask)
    conv_names = [l.name for l in net.conv_layers()]
    keep_in: np.ndarray | None = None
    layers = []
    for l in net.layers:
        if l.kind == "conv":
            keep_out = np.flatnonzero(np.asarray(mask[l.name], dtype=bool))
            w = l.weight[torch.as_tensor(keep_out)]
            if keep_in is not None:
                w = w[:, torch.as_tensor(keep_in)]
            layers.append(
                replace(
                    l,
                    in_channels=w.shape[1],
                    out_channels=len(keep_out),
                    weight=w.clone(),
                    bias=l.bias[torch.as_tensor(keep_out)].clone(),
                )
            )
            keep_in = keep_out
        else:
            w = l.weight
            if keep_in is not None:  # first fc after the conv stack
                w = w[:, torch.as_tensor(keep_in)]
                keep_in = None
            layers.append(replace(l, in_channels=w.shape[1], weight=w.clone(), bias=l.bias.clone()))
    del conv_names
    out = Network(tuple(layers))
    validate_network(out)
    return out


def count_params(net: Network) -> int:
    return sum(l.weight.numel() + l.bias.numel() for l in net.layers)


def params_for_counts(net: Network, counts: Mapping[str, int]) -> int:
    """Parameter count after hypothetically retaining counts[name] channels
    per conv layer (the closed form of repack, without building tensors)."""
    total = 0
    prev = None
    for l in net.layers:
        if l.kind == "conv":
            cout = int(counts[l.name])
            cin = l.in_channels if prev is None else prev
            total += cout * cin * l.kernel[0] * l.kernel[1] + cout
            prev = cout
        else:
            cin = l.in_channels if prev is None else prev
            total += l.out_channels * cin + l.out_channels
            prev = None
    return total


def masked_param_count(net: Network, mask: ChannelMask) -> int:
    counts = {name: int(np.asarray(v, dtype=bool).sum()) for name, v in mask.items()}
    return params_for_counts(net, counts)


def count_cost(
    net: Network,
    input_hw: tuple[int, int],
    e_mac: float = 4.6e-9,
    e_mem: float = 6.4e-7,
) -> CostReport:
    """Parameter, MAC, and modeled-energy accounting.

    MACs for a conv layer are out_ch * in_ch * kh * kw * outH * outW at the
    conv's output resolution. Mem per layer counts weight and bias elements
    plus output activation elements; energy is
    sum(e_mac * MACs + e_mem * Mem) in millijoules per forward pass.
    """
    if e_mac < 0 or e_mem < 0:
        raise ConfigError("energy constants must be non-negative")
    h, w = input_hw
    macs = 0
    mem = 0
    for l in net.layers:
        if l.kind == "conv":
            kh, kw = l.kernel
            h = (h + 2 * (kh // 2) - kh) // l.stride + 1
            w = (w + 2 * (kw // 2) - kw) // l.stride + 1
            layer_macs = l.out_channels * l.in_channels * kh * kw * h * w
            acts = l.out_channels * h * w
            if l.pool > 1:
                h //= l.pool
                w //= l.pool
        else:
            layer_macs = l.out_channels * l.in_channels
            acts = l.out_channels
        macs += layer_macs
        mem += l.weight.numel() + l.bias.numel() + acts
    energy = e_mac * macs + e_mem * mem
    return CostReport(params=count_params(net), macs=int(macs), energy_mj=float(energy))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path) -> None:
    """Self-describing container: layer metadata JSON + flat arrays."""
    meta = {
        "layers": [
            dict(
                name=l.name,
                kind=l.kind,
                in_channels=l.in_channels,
                out_channels=l.out_channels,
                kernel=list(l.kernel),
                stride=l.stride,
                pool=l.pool,
                dropout=l.dropout,
            )
            for l in net.layers
        ],
        "dtype": str(net.dtype).replace("torch.", ""),
    }
    arrays = {}
    for l in net.layers:
        arrays[f"{l.name}.weight"] = l.weight.detach().numpy()
        arrays[f"{l.name}.bias"] = l.bias.detach().numpy()
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> Network:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    dtype = getattr(torch, meta["dtype"])
    layers = []
    for m in meta["layers"]:
        layers.append(
            Layer(
                name=m["name"],
                kind=m["kind"],
                in_channels=m["in_channels"],
                out_channels=m["out_channels"],
                kernel=tuple(m["kernel"]),
                stride=m["stride"],
                pool=m["pool"],
                dropout=m["dropout"],
                weight=torch.as_tensor(data[f"{m['name']}.weight"], dtype=dtype),
                bias=torch.as_tensor(data[f"{m['name']}.bias"], dtype=dtype),
            )
        )
    net = Network(tuple(layers))
    validate_network(net)
    return net
