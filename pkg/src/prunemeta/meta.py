"""Episodic sampling, first-order meta-updates, meta-gradient refinement.

The adaptation head is a prototype classifier on the backbone embedding:
support embeddings define class prototypes, queries are scored by negative
squared distance. Inner adaptation takes one gradient step on the support
loss; the outer update applies the query gradient, taken at the adapted
parameters, directly to the meta-parameters (first-order, no second
derivatives anywhere). Outer gradients also feed a per-channel accumulator
that later sharpens the importance table for the final prune.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, StructuralError
from .network import Network, functional_forward, parameters
from .scoring import ImportanceTable
from .synthdata import Dataset

ACCUMULATE_MODES = ("norms", "signed")


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task with disjoint support and query sets."""

    n_way: int
    k_shot: int
    n_query: int
    class_ids: tuple[int, ...]
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    ident: str = ""


@dataclass(frozen=True)
class MetaState:
    """Meta-parameters plus the running outer-gradient accumulator."""

    params: dict[str, dict[str, torch.Tensor]]
    alpha: float
    beta: float
    g_meta: dict[str, np.ndarray]
    g_signed: dict[str, dict[str, torch.Tensor]] | None
    episodes_seen: int
    accumulate: str = "norms"
    # diagnostics from the most recent outer batch
    last_losses: tuple[float, ...] = ()
    last_accs: tuple[float, ...] = ()

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.accumulate not in ACCUMULATE_MODES:
            raise ConfigError(f"accumulate must be one of {ACCUMULATE_MODES}")
        for name, arr in self.g_meta.items():
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise StructuralError(f"g_meta for {name} must be finite and >= 0")


def init_meta_state(
    net: Network,
    alpha: float = 0.01,
    beta: float = 0.001,
    accumulate: str = "norms",
) -> MetaState:
    state = MetaState(
        params=parameters(net),
        alpha=alpha,
        beta=beta,
        g_meta={l.name: np.zeros(l.out_channels) for l in net.conv_layers()},
        g_signed=None,
        episodes_seen=0,
        accumulate=accumulate,
    )
    state.validate()
    return state


def sample_episode(
    ds: Dataset, n_way: int, k_shot: int, n_query: int, seed
) -> Episode:
    """Draw a stratified N-way episode; support and query never overlap."""
    rng = np.random.default_rng(seed)
    present, counts = np.unique(ds.labels, return_counts=True)
    need = k_shot + n_query
    short = [int(c) for c, n in zip(present, counts) if n < need]
    usable = [int(c) for c, n in zip(present, counts) if n >= need]
    if len(usable) < n_way:
        offender = ds.class_names[short[0]] if short else f"only {len(usable)} classes"
        raise ConfigError(
            f"cannot draw {n_way}-way {k_shot}-shot episode with {n_query} queries: "
            f"insufficient population for {offender}"
        )
    chosen = np.sort(rng.choice(usable, size=n_way, replace=False))
    sup_idx, qry_idx, sup_y, qry_y = [], [], [], []
    for slot, c in enumerate(chosen):
        pool = rng.permutation(ds.class_indices(int(c)))
        sup_idx.append(pool[:k_shot])
        qry_idx.append(pool[k_shot : k_shot + n_query])
        sup_y.append(np.full(k_shot, slot))
        qry_y.append(np.full(n_query, slot))
    sup_idx, qry_idx = np.concatenate(sup_idx), np.concatenate(qry_idx)
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
        class_ids=tuple(int(c) for c in chosen),
        support_x=ds.images[sup_idx],
        support_y=np.concatenate(sup_y),
        query_x=ds.images[qry_idx],
        query_y=np.concatenate(qry_y),
        support_idx=sup_idx,
        query_idx=qry_idx,
        ident=str(seed),
    )


def prototype_logits(
    support_emb: torch.Tensor,
    support_y: torch.Tensor,
    query_emb: torch.Tensor,
    n_way: int,
) -> torch.Tensor:
    protos = torch.stack(
        [support_emb[support_y == c].mean(dim=0) for c in range(n_way)]
    )
    d2 = ((query_emb[:, None, :] - protos[None]) ** 2).sum(dim=2)
    return -d2


def prototype_classify(
    support_emb: np.ndarray,
    support_y: np.ndarray,
    query_emb: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype predictions; exact ties go to the lower class index."""
    n_way = int(np.max(support_y)) + 1
    logits = prototype_logits(
        torch.as_tensor(np.asarray(support_emb), dtype=torch.float64),
        torch.as_tensor(np.asarray(support_y)),
        torch.as_tensor(np.asarray(query_emb), dtype=torch.float64),
        n_way,
    ).numpy()
    return logits.argmax(axis=1), logits


def _episode_tensors(episode: Episode, dtype):
    sx = torch.as_tensor(episode.support_x, dtype=dtype)
    sy = torch.as_tensor(episode.support_y, dtype=torch.long)
    qx = torch.as_tensor(episode.query_x, dtype=dtype)
    qy = torch.as_tensor(episode.query_y, dtype=torch.long)
    return sx, sy, qx, qy


def support_loss(net: Network, params, episode: Episode) -> torch.Tensor:
    sx, sy, _, _ = _episode_tensors(episode, net.dtype)
    _, emb, _ = functional_forward(net, params, sx)
    return F.cross_entropy(prototype_logits(emb, sy, emb, episode.n_way), sy)


def query_loss(net: Network, params, episode: Episode) -> tuple[torch.Tensor, float]:
    sx, sy, qx, qy = _episode_tensors(episode, net.dtype)
    _, emb_s, _ = functional_forward(net, params, sx)
    _, emb_q, _ = functional_forward(net, params, qx)
    logits = prototype_logits(emb_s, sy, emb_q, episode.n_way)
    acc = float((logits.argmax(dim=1) == qy).float().mean())
    return F.cross_entropy(logits, qy), acc


def _grad_enabled(params):
    return {
        name: {k: v.detach().clone().requires_grad_(True) for k, v in group.items()}
        for name, group in params.items()
    }


def _flatten(params):
    names, tensors = [], []
    for name, group in params.items():
        for k, v in group.items():
            names.append((name, k))
            tensors.append(v)
    return names, tensors


def sgd_step(params, grads, lr: float):
    """theta <- theta - lr * grad, entrywise over the parameter tree."""
    return {
        name: {
            k: (v - lr * grads[name][k]).detach()
            for k, v in group.items()
        }
        for name, group in params.items()
    }


def _grads_of(loss: torch.Tensor, params) -> dict:
    names, tensors = _flatten(params)
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    tree: dict = {name: {} for name, _ in names}
    for (name, k), t, g in zip(names, tensors, grads):
        tree[name][k] = torch.zeros_like(t) if g is None else g.detach()
    return tree


def inner_adapt(net: Network, state: MetaState, episode: Episode):
    """One first-order gradient step on the support loss."""
    live = _grad_enabled(state.params)
    loss = support_loss(net, live, episode)
    if not torch.isfinite(loss):
        raise StructuralError(f"non-finite support loss on episode {episode.ident}")
    return sgd_step(live, _grads_of(loss, live), state.alpha)


def _channel_norms(layer_grads: dict[str, torch.Tensor]) -> np.ndarray:
    w = layer_grads["weight"]
    flat = w.reshape(w.shape[0], -1)
    total = (flat**2).sum(dim=1)
    if "bias" in layer_grads:
        total = total + layer_grads["bias"] ** 2
    return torch.sqrt(total).numpy()


def outer_update(net: Network, state: MetaState, episodes) -> MetaState:
    """First-order meta-update over one batch, plus accumulator bookkeeping."""
    if not episodes:
        raise ConfigError("outer_update needs at least one episode")
    conv_names = {l.name for l in net.conv_layers()}
    grad_sum = None
    g_meta = {k: v.copy() for k, v in state.g_meta.items()}
    g_signed = None
    if state.accumulate == "signed" and state.g_signed is not None:
        g_signed = {
            name: {k: v.clone() for k, v in group.items()}
            for name, group in state.g_signed.items()
        }
    losses, accs = [], []
    for episode in episodes:
        theta_task = inner_adapt(net, state, episode)
        live = _grad_enabled(theta_task)
        loss, acc = query_loss(net, live, episode)
        if not torch.isfinite(loss):
            err = StructuralError(f"non-finite query loss on episode {episode.ident}")
            err.snapshot = state
            raise err
        grads = _grads_of(loss, live)
        losses.append(float(loss.detach()))
        accs.append(acc)
        if grad_sum is None:
            grad_sum = grads
        else:
            for name, group in grads.items():
                for k, g in group.items():
                    grad_sum[name][k] = grad_sum[name][k] + g
        for name in conv_names:
            g_meta[name] = g_meta[name] + _channel_norms(grads[name])
        if state.accumulate == "signed":
            if g_signed is None:
                g_signed = {
                    name: {k: torch.zeros_like(v) for k, v in group.items()}
                    for name, group in grads.items()
                    if name in conv_names
                }
            for name in conv_names:
                for k, g in grads[name].items():
                    g_signed[name][k] = g_signed[name][k] + g
    new_params = sgd_step(state.params, grad_sum, state.beta)
    for group in new_params.values():
        for t in group.values():
            if not torch.isfinite(t).all():
                err = StructuralError("non-finite parameters after outer update")
                err.snapshot = state
                raise err
    return replace(
        state,
        params=new_params,
        g_meta=g_meta,
        g_signed=g_signed,
        episodes_seen=state.episodes_seen + len(episodes),
        last_losses=tuple(losses),
        last_accs=tuple(accs),
    )


def signed_channel_norms(state: MetaState) -> dict[str, np.ndarray]:
    """Per-channel L2 of the signed gradient sum (ablation accumulator)."""
    if state.g_signed is None:
        raise StructuralError("state carries no signed accumulator")
    return {name: _channel_norms(group) for name, group in state.g_signed.items()}


def refine_dacis(
    table: ImportanceTable,
    g_meta: dict[str, np.ndarray],
    gamma: float = 0.5,
    mode: str = "scaled",
) -> ImportanceTable:
    """Sharpen combined importance with normalized meta-gradient magnitudes.

    scaled: refined = dacis * (1 + gamma * m) with m min-max normalized per
    layer. product: refined = dacis * m, the raw algorithm-card form kept for
    ablation; it zeroes channels whose meta-gradient never moved.
    """
    if gamma < 0:
        raise ConfigError("gamma must be >= 0")
    if set(g_meta) != set(table.layers):
        raise StructuralError("meta accumulator layers do not match the table")
    refined = {}
    for name in table.layers:
        norms = np.asarray(g_meta[name], dtype=np.float64)
        if norms.shape != table.combined[name].shape:
            raise StructuralError(f"meta accumulator shape mismatch on {name}")
        span = norms.max() - norms.min()
        # a flat accumulator carries no signal, so it must not perturb the
        # ranking (in particular, all-zero G_meta leaves DACIS untouched)
        m = (norms - norms.min()) / span if span > 0 else np.zeros_like(norms)
        if mode == "scaled":
            refined[name] = table.combined[name] * (1.0 + gamma * m)
        elif mode == "product":
            refined[name] = table.combined[name] * m
        else:
            raise ConfigError(f"unknown refine mode {mode!r}")
    return replace(table, refined=refined)


def meta_train(
    net: Network,
    ds: Dataset,
    episodes: int = 2000,
    n_way: int = 5,
    k_shot: int = 5,
    n_query: int = 15,
    meta_batch: int = 4,
    alpha: float = 0.01,
    beta: float = 0.001,
    accumulate: str = "norms",
    seed: int = 0,
    log_path: str | Path | None = None,
) -> tuple[MetaState, list[dict]]:
    """Run the episodic loop; returns final state and per-step log records."""
    state = init_meta_state(net, alpha=alpha, beta=beta, accumulate=accumulate)
    records = []
    handle = open(log_path, "a") if log_path else None
    try:
        step = 0
        while state.episodes_seen < episodes:
            take = min(meta_batch, episodes - state.episodes_seen)
            batch = [
                sample_episode(ds, n_way, k_shot, n_query, [seed, state.episodes_seen + i])
                for i in range(take)
            ]
            state = outer_update(net, state, batch)
            record = {
                "step": step,
                "episodes": [e.ident for e in batch],
                "support_size": int(batch[0].support_y.size),
                "query_loss": round(float(np.mean(state.last_losses)), 6),
                "query_acc": round(float(np.mean(state.last_accs)), 6),
            }
            records.append(record)
            if handle:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
            step += 1
    finally:
        if handle:
            handle.close()
    return state, records
