"""Visibility-masked MSE objective, Adam, and the training loop.

The objective averages squared error over the visible heatmap channels
only; channels flagged invisible contribute nothing to the value or the
gradient. Intermediate supervision sums the same loss over every stack's
prediction plus the attention-refined final prediction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ForwardOutput, Model, save_checkpoint
from .targets import HeatmapStack, LabeledCase, make_target


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 4
    learning_rate: float = 0.00025
    seed: int = 0
    # Eq-fidelity switch: divide by all V channels instead of the visible ones
    strict_denominator: bool = False
    heatmap_radius: int = 10
    heatmap_sigma: float | None = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"train config fields must be positive: {self}")


def _as_batched(pred, target) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize (pred, target) to batched arrays (N,V,H,W) plus (N,V) flags."""
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred))
    if isinstance(target, HeatmapStack):
        tgt = target.maps[None]
        vis = target.visibility[None]
    else:
        tgt, vis = target
        tgt = np.asarray(tgt)
        vis = np.asarray(vis, dtype=bool)
        if tgt.ndim == 3:
            tgt, vis = tgt[None], vis[None]
    if pred.data.ndim == 3:
        pred = ad.reshape(pred, (1,) + pred.shape)
    if pred.data.shape != tgt.shape:
        raise ValueError(f"prediction shape {pred.data.shape} does not match target {tgt.shape}")
    return pred, tgt.astype(pred.dtype, copy=False), vis


def masked_mse(pred, target, strict_denominator: bool = False) -> Tensor:
    """Mean squared error over visible channels (Eq-style sum of MSE).

    Args:
        pred: (V,H,W) or (N,V,H,W) Tensor/array of predicted heatmaps.
        target: a HeatmapStack, or a (maps, visibility) pair with matching
            batch layout.
        strict_denominator: divide by V*N pixels regardless of visibility
            instead of the default V_visible*N.

    Returns:
        Scalar Tensor. Zero visible channels yield exactly 0.0 with zero
        gradients.
    """
    pred, tgt, vis = _as_batched(pred, target)
    n, v, h, w = tgt.shape
    mask = vis.astype(pred.dtype)[:, :, None, None]
    diff = ad.sub(pred, Tensor(tgt))
    sq = ad.mul(diff, diff)
    total = ad.tensor_sum(ad.mul(sq, Tensor(mask)))
    if strict_denominator:
        denom = n * v * h * w
    else:
        denom = int(vis.sum()) * h * w
    factor = 1.0 / denom if denom > 0 else 0.0
    return ad.scale(total, factor)


def loss_terms(output: ForwardOutput, target, strict_denominator: bool = False) -> list[Tensor]:
    """One masked-MSE term per stack prediction plus the final refined one."""
    terms = [masked_mse(h, target, strict_denominator) for h in output.intermediate_heatmaps]
    terms.append(masked_mse(output.final_heatmap, target, strict_denominator))
    return terms


def total_loss(output: ForwardOutput, target, strict_denominator: bool = False) -> Tensor:
    """Sum of the intermediate-supervision terms and the final term."""
    terms = loss_terms(output, target, strict_denominator)
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return loss


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.step"] = np.array([self.step], dtype=np.float32)
        return out

    @classmethod
    def from_arrays(cls, params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> "AdamState":
        state = cls.for_params(params)
        for k in params:
            state.m[k] = arrays[f"adam.m.{k}"].reshape(params[k].data.shape).astype(params[k].dtype)
            state.v[k] = arrays[f"adam.v.{k}"].reshape(params[k].data.shape).astype(params[k].dtype)
        state.step = int(arrays["adam.step"][0])
        return state


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors.

    Gradients default to each parameter's ``.grad``; parameters whose
    gradient is None are skipped. A non-finite gradient aborts with
    diagnostics naming the parameter.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(
                f"adam_step: non-finite gradient for {name!r} ({bad}/{g.size} elements) at step {t}"
            )
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * np.square(g)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data = p.data - lr * update.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    total: float
    terms: list[float]
    val_total: float | None = None


def _prepare_batches(cases: list[LabeledCase], model: Model, cfg: TrainConfig):
    h, w = model.cfg.input_size
    v = model.cfg.num_discs
    images = np.zeros((len(cases), 1, h, w), dtype=model.dtype)
    maps = np.zeros((len(cases), v, h, w), dtype=model.dtype)
    vis = np.zeros((len(cases), v), dtype=bool)
    for i, case in enumerate(cases):
        if case.image.shape != (h, w):
            raise ValueError(
                f"case {i} image shape {case.image.shape} does not match model input {h}x{w}"
            )
        if case.num_discs != v:
            raise ValueError(f"case {i} has {case.num_discs} discs, model expects {v}")
        stack = make_target(case, radius=cfg.heatmap_radius, sigma=cfg.heatmap_sigma)
        images[i, 0] = case.image
        maps[i] = stack.maps
        vis[i] = stack.visibility
    return images, maps, vis


def evaluate_loss(model: Model, cases: list[LabeledCase], cfg: TrainConfig) -> float:
    """Mean total loss over ``cases`` without touching gradients."""
    images, maps, vis = _prepare_batches(cases, model, cfg)
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(cases), cfg.batch_size):
            stop = min(start + cfg.batch_size, len(cases))
            out = model.forward(images[start:stop])
            loss = total_loss(out, (maps[start:stop], vis[start:stop]), cfg.strict_denominator)
            total += loss.item() * (stop - start)
    return total / len(cases)


def train(
    model: Model,
    cases: list[LabeledCase],
    cfg: TrainConfig,
    *,
    val_cases: list[LabeledCase] | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    checkpoint_every: int = 0,
    adam_state: AdamState | None = None,
    start_epoch: int = 0,
    log_fn=None,
) -> tuple[Model, list[EpochRecord]]:
    """Train in place; returns the model and the per-epoch loss curve.

    Deterministic given ``cfg.seed``: each epoch shuffles with its own
    seeded generator, so resumed runs replay the identical batch order.
    """
    cfg.validate()
    if not cases:
        raise ValueError("training dataset is empty")
    images, maps, vis = _prepare_batches(cases, model, cfg)
    state = adam_state if adam_state is not None else AdamState.for_params(model.params)
    curve: list[EpochRecord] = []
    n = len(cases)
    num_terms = model.cfg.num_stacks + 1

    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        term_sums = np.zeros(num_terms)
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out = model.forward(images[idx])
            terms = loss_terms(out, (maps[idx], vis[idx]), cfg.strict_denominator)
            loss = terms[0]
            for t in terms[1:]:
                loss = ad.add(loss, t)
            model.zero_grad()
            loss.backward()
            adam_step(model.params, state, cfg.learning_rate)
            term_sums += np.array([t.item() for t in terms]) * len(idx)
            seen += len(idx)
        term_means = term_sums / seen
        record = EpochRecord(epoch=epoch + 1, total=float(term_means.sum()), terms=[float(x) for x in term_means])
        if val_cases:
            record.val_total = evaluate_loss(model, val_cases, cfg)
        curve.append(record)
        if log_fn is not None:
            log_fn(record)
        if checkpoint_dir is not None and checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(
                model,
                os.path.join(os.fspath(checkpoint_dir), f"epoch_{epoch + 1:04d}"),
                extra_arrays=state.to_arrays(),
                meta={"epoch": epoch + 1},
            )
    if checkpoint_dir is not None:
        save_checkpoint(
            model,
            os.path.join(os.fspath(checkpoint_dir), "final"),
            extra_arrays=state.to_arrays(),
            meta={"epoch": cfg.epochs},
        )
    return model, curve


def curve_to_csv_rows(curve: list[EpochRecord], num_stacks: int) -> list[str]:
    """Render the loss curve as CSV lines (epoch, total, per-stack terms, final)."""
    header = ["epoch", "total"] + [f"stack_{i + 1}" for i in range(num_stacks)] + ["final"]
    rows = [",".join(header)]
    for rec in curve:
        cells = [str(rec.epoch), f"{rec.total:.8f}"] + [f"{t:.8f}" for t in rec.terms]
        if rec.val_total is not None:
            cells.append(f"{rec.val_total:.8f}")
        rows.append(",".join(cells))
    if curve and curve[0].val_total is not None:
        rows[0] += ",val_total"
    return rows
