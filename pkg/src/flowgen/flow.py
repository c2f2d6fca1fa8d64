"""Linear-interpolation flow matching: forward process, loss, sampler, trainer.

The forward process is x_t = t*x_star + (1-t)*eps, whose velocity target is
x_star - eps.  Training regresses the model onto that target; sampling
integrates the learned field from noise (t=0) to image (t=1) with Euler or
Heun steps and optional classifier-free guidance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import Adam, clip_global_norm
from .tensor import Tensor
from .util import ContractError, NonFiniteError


@dataclass
class FlowSample:
    """One draw of the forward process (all arrays share a shape)."""

    x_star: np.ndarray
    eps: np.ndarray
    t: np.ndarray        # [B], one time per sample
    x_t: np.ndarray
    v_target: np.ndarray


def interpolate(x_star: np.ndarray, eps: np.ndarray, t) -> FlowSample:
    """Build the interpolant x_t = t*x_star + (1-t)*eps and its velocity."""
    x_star = np.asarray(x_star, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if x_star.shape != eps.shape:
        raise ContractError(f"interpolate: shapes {x_star.shape} vs {eps.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float32))
    if t_arr.ndim != 1:
        raise ContractError(f"interpolate: t must be scalar or [B], got {t_arr.shape}")
    if t_arr.size == 1 and x_star.ndim > 0:
        t_arr = np.full(x_star.shape[0] if x_star.ndim > 1 else 1, t_arr[0], dtype=np.float32)
    if (t_arr < 0).any() or (t_arr > 1).any():
        raise ContractError(f"interpolate: t outside [0,1]")
    tb = t_arr.reshape((-1,) + (1,) * (x_star.ndim - 1)) if x_star.ndim > 1 else t_arr[0]
    x_t = tb * x_star + (1 - tb) * eps
    return FlowSample(x_star=x_star, eps=eps, t=t_arr, x_t=x_t, v_target=x_star - eps)


def cfm_loss(v_pred: Tensor, v_target: np.ndarray,
             pixel_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared velocity error over real (unpadded) pixels.

    pixel_mask is [B, H, W] with True on real pixels and applies across all
    channels; None means every pixel counts.
    """
    if v_pred.shape != v_target.shape:
        raise ContractError(f"cfm_loss: shapes {v_pred.shape} vs {v_target.shape}")
    diff = T.sub(v_pred, Tensor(np.asarray(v_target, dtype=np.float32)))
    sq = T.mul(diff, diff)
    if pixel_mask is None:
        return T.mean(sq)
    mask = np.asarray(pixel_mask, dtype=bool)
    b, c, h, w = v_pred.shape
    if mask.shape != (b, h, w):
        raise ContractError(f"cfm_loss: pixel mask shape {mask.shape} != {(b, h, w)}")
    weights = np.broadcast_to(mask[:, None, :, :], (b, c, h, w)).astype(np.float32)
    count = float(weights.sum())
    if count == 0:
        raise ContractError("cfm_loss: pixel mask excludes everything")
    return T.scale(T.sum_(T.mul(sq, Tensor(weights))), 1.0 / count)


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 50
    guidance_scale: float = 2.0
    method: str = "euler"
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ContractError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.method not in ("euler", "heun"):
            raise ContractError(f"unknown sampler method {self.method!r}")
        if self.guidance_scale < 0:
            raise ContractError(f"guidance_scale must be >= 0, got {self.guidance_scale}")

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "guidance_scale": self.guidance_scale,
                "method": self.method, "seed": self.seed}


def sample_ode(velocity, shape: tuple[int, ...], cfg: SamplerConfig,
               eps: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Integrate dx/dt = velocity(x, t) from noise at t=0 to t=1.

    ``velocity(x, t) -> array`` receives float32 x of the given shape and a
    scalar t.  Integration state is kept in float64 so step-count choices do
    not leak accumulation error into the result; the output is float32 in
    [-1, 1].
    """
    if eps is None:
        if rng is None:
            raise ContractError("sample_ode: pass eps or rng")
        eps = rng.standard_normal(shape).astype(np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if eps.shape != tuple(shape):
        raise ContractError(f"sample_ode: eps shape {eps.shape} != {tuple(shape)}")
    x = eps.astype(np.float64)
    n = cfg.n_steps
    dt = 1.0 / n
    with T.no_grad():
        for k in range(n):
            t = k * dt
            v = np.asarray(velocity(x.astype(np.float32), t), dtype=np.float64)
            if not np.isfinite(v).all():
                raise NonFiniteError(f"sample_ode: non-finite velocity at t={t}")
            if cfg.method == "euler":
                x = x + dt * v
            else:
                x_pred = x + dt * v
                t2 = min((k + 1) * dt, 1.0)
                v2 = np.asarray(velocity(x_pred.astype(np.float32), t2), dtype=np.float64)
                if not np.isfinite(v2).all():
                    raise NonFiniteError(f"sample_ode: non-finite velocity at t={t2}")
                x = x + 0.5 * dt * (v + v2)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def guided_velocity(model, context_cond: Tensor | np.ndarray, mask_cond: np.ndarray,
                    context_null: Tensor | np.ndarray, mask_null: np.ndarray,
                    guidance_scale: float, pad_mask: np.ndarray | None = None,
                    trained_with_dropout: bool = True):
    """Wrap a velocity model into the guided field
    v = v_null + scale * (v_cond - v_null); scale 0 short-circuits to the
    unconditional branch, scale 1 to the conditional one."""
    scale = float(guidance_scale)
    if scale != 1.0 and not trained_with_dropout:
        warnings.warn("guidance requested but the model was trained without caption "
                      "dropout; proceeding unguided", stacklevel=2)
        scale = 1.0
    ctx_c = context_cond if isinstance(context_cond, Tensor) else Tensor(context_cond)
    ctx_n = context_null if isinstance(context_null, Tensor) else Tensor(context_null)

    def velocity(x: np.ndarray, t: float) -> np.ndarray:
        b = x.shape[0]
        tt = np.full(b, t, dtype=np.float64)
        with T.no_grad():
            if scale == 0.0:
                return model(x, tt, ctx_n, mask_null, pad_mask).data
            if scale == 1.0:
                return model(x, tt, ctx_c, mask_cond, pad_mask).data
            v_c = model(x, tt, ctx_c, mask_cond, pad_mask).data
            v_n = model(x, tt, ctx_n, mask_null, pad_mask).data
            return v_n + np.float32(scale) * (v_c - v_n)

    return velocity


@dataclass
class TrainState:
    """Bookkeeping shared across train steps."""

    step: int = 0
    skip_streak: int = 0
    losses: list = field(default_factory=list)


def train_step(model, text_encoder, batch: dict, optimizer: Adam,
               rng: np.random.Generator, state: TrainState,
               caption_dropout: float = 0.1, clip_norm: float = 1.0,
               max_skips: int = 10) -> float:
    """One flow-matching update; returns the pre-update loss.

    batch: x_star [B,C,H,W] float32, ids [B,L] int, mask [B,L] bool, optional
    pixel_mask [B,H,W] and pad_mask [B,n_patches].  Draws eps, t and caption
    dropout from ``rng``.  A non-finite forward/backward skips the update;
    ``max_skips`` consecutive skips abort the run.
    """
    x_star = batch["x_star"]
    ids, mask = batch["ids"], batch["mask"]
    b = x_star.shape[0]
    eps = rng.standard_normal(x_star.shape).astype(np.float32)
    t = rng.uniform(0.0, 1.0, size=b)
    drop = rng.uniform(0.0, 1.0, size=b) < caption_dropout
    sample = interpolate(x_star, eps, t.astype(np.float32))

    graph = T.ComputeGraph()
    try:
        with T.use_graph(graph):
            enc = text_encoder.encode_tokens(ids, mask)
            # blend the null sequence in even when nothing dropped, so every
            # parameter receives a gradient every step (zero where unused)
            null = text_encoder.null_batch(b)
            keep_w = np.where(drop, 0.0, 1.0).astype(np.float32)[:, None, None]
            drop_w = (1.0 - keep_w)
            l, d = text_encoder.max_len, text_encoder.d_text
            enc = T.add(T.mul(enc, Tensor(np.broadcast_to(keep_w, (b, l, d)).copy())),
                        T.mul(null, Tensor(np.broadcast_to(drop_w, (b, l, d)).copy())))
            ctx_mask = np.where(drop[:, None], True, mask)
            v = model(sample.x_t, t, enc, ctx_mask, batch.get("pad_mask"))
            loss = cfm_loss(v, sample.v_target, batch.get("pixel_mask"))
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NonFiniteError("train_step: non-finite loss")
            T.backward(loss, graph)
    except NonFiniteError:
        optimizer.zero_grad()
        state.skip_streak += 1
        if state.skip_streak >= max_skips:
            raise ContractError(
                f"training aborted: {state.skip_streak} consecutive non-finite steps")
        state.step += 1
        return float("nan")

    state.skip_streak = 0
    clip_global_norm(optimizer.params, clip_norm)
    optimizer.step()
    optimizer.zero_grad()
    state.step += 1
    state.losses.append(loss_val)
    return loss_val
