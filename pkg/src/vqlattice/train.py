"""Training loop: AdamW with a one-cycle learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .loss import nll_gradient
from .model.network import Transducer
from .numerics import SeededRng, linear_anneal

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 3e-3  # peak of the one-cycle schedule
    weight_decay: float = 1e-2
    batch_size: int = 4
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    pct_start: float = 0.25
    div_factor: float = 25.0
    final_div_factor: float = 1e3
    grad_clip: float = 5.0
    temp_start: float = 2.0
    temp_end: float = 0.5
    gumbel_noise: bool = True  # sample codes with Gumbel noise during training
    seed: int = 0


def one_cycle_lr(step: int, total: int, cfg: TrainConfig) -> float:
    """Cosine warm-up to ``cfg.lr`` then cosine decay (OneCycle shape)."""
    if total <= 1:
        return cfg.lr
    initial = cfg.lr / cfg.div_factor
    final = initial / cfg.final_div_factor
    warm = max(1, int(round(cfg.pct_start * total)))
    if step < warm:
        frac, lo, hi = step / warm, initial, cfg.lr
    else:
        frac, lo, hi = (step - warm) / max(1, total - 1 - warm), cfg.lr, final
    return hi + (lo - hi) * (1 + math.cos(math.pi * min(frac, 1.0))) / 2


class AdamW:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k in sorted(self.params):
            p, g = self.params[k], grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr == 0.0:
                continue
            if p.ndim == 2 and not k.endswith("embed"):
                p -= lr * self.cfg.weight_decay * p
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.cfg.eps)


def utterance_loss(model: Transducer, features, labels, rng=None, temperature=1.0, mode=None):
    """NLL and parameter gradients for one utterance.

    vq_lstm models train on the hard straight-through path by default.
    """
    if mode is None:
        mode = "hard" if model.config.variant == "vq_lstm" else "infer"
    grid, tape = model.forward(features, labels, mode=mode, rng=rng, temperature=temperature)
    nll, dgrid = nll_gradient(grid, labels)
    return nll, model.backward(tape, dgrid)


def batch_loss(model: Transducer, utts, rngs=None, temperature=1.0, mode=None):
    """Per-utterance NLLs and the summed gradients for a minibatch."""
    if mode is None:
        mode = "hard" if model.config.variant == "vq_lstm" else "infer"
    grids, tape = model.forward_batch(
        [u.features for u in utts], [u.labels for u in utts], mode=mode, rngs=rngs, temperature=temperature
    )
    nlls, dgrids = [], []
    for grid, utt in zip(grids, utts):
        nll, dgrid = nll_gradient(grid, utt.labels)
        nlls.append(nll)
        dgrids.append(dgrid)
    return nlls, model.backward(tape, dgrids)


def evaluate_nll(model: Transducer, dataset) -> float:
    total = 0.0
    for utt in dataset:
        grid, _ = model.forward(utt.features, utt.labels)
        total += nll_gradient(grid, utt.labels)[0]
    return total / len(dataset)


def train(
    model: Transducer,
    dataset,
    cfg: TrainConfig,
    checkpoint_dir=None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> Tuple[Transducer, List[Tuple[int, float]]]:
    """Train ``model`` in place; returns it with the (epoch, mean nll) curve."""
    rng = SeededRng(cfg.seed)
    opt = AdamW(model.params, cfg)
    n = len(dataset)
    utts = list(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    curve = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.derive(f"shuffle:{epoch}").permutation(n)
        epoch_nll = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            temperature = linear_anneal(cfg.temp_start, cfg.temp_end, step / max(1, total - 1))
            utts_b = [utts[j] for j in batch]
            noise = [rng.derive(f"gumbel:{epoch}:{j}") if cfg.gumbel_noise else None for j in batch]
            nlls, acc = batch_loss(model, utts_b, noise, temperature)
            for utt, nll in zip(utts_b, nlls):
                if not math.isfinite(nll):
                    raise TrainingDiverged(f"non-finite loss on {utt.uid} at epoch {epoch}")
            epoch_nll += sum(nlls)
            scale = 1.0 / len(batch)
            norm = math.sqrt(sum(float((g * g).sum()) for g in acc.values())) * scale
            if cfg.grad_clip and norm > cfg.grad_clip:
                scale *= cfg.grad_clip / norm
            for k in acc:
                acc[k] *= scale
            opt.step(acc, one_cycle_lr(step, total, cfg))
            step += 1
        mean = epoch_nll / n
        curve.append((epoch, mean))
        log.info("epoch %d mean nll %.4f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            model.save(Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt")
    return model, curve


def format_curve(curve) -> str:
    lines = ["epoch\tmean_nll"]
    lines += [f"{e}\t{v:.6f}" for e, v in curve]
    return "\n".join(lines) + "\n"
