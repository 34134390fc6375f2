"""AdamW, the cascaded generator/discriminator training loop and k-fold splits."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffengine as de
from .diffengine import ContractError, Tensor
from .gnn import Discriminator, Generator, Module
from .graphcore import SIGMA_FLOOR, LongitudinalSample, stack
from .losses import (
    LossWeights,
    StageLosses,
    adversarial_loss_d,
    adversarial_loss_g,
    full_loss,
    kl_loss,
    l1_loss,
    stage_total,
    topology_loss,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "stage", "d_loss", "g_adv", "g_l1", "g_kl_or_topo", "g_total")


class NumericError(FloatingPointError):
    pass


class TrainDataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adamw_step(state: AdamWState, params: Sequence[Tensor]) -> None:
    """One AdamW update with decoupled weight decay, in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError(f"optimizer tracks {len(state.m)} parameters, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} (shape {list(p.shape)}) has no gradient")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data -= state.lr * update


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    m: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    folds: int = 3
    sigma_floor: float = SIGMA_FLOOR
    dropout: float = 0.3
    hidden_g: int | None = None
    hidden_d: int | None = None
    skip: bool = True
    chain_backprop: bool = True
    lr_g: float = 0.01
    lr_d: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class Cascade:
    """``m`` generator/discriminator pairs trained jointly; stage ``i`` predicts ``t_{i+1}``."""

    def __init__(self, n_r: int, cfg: TrainConfig, seed: int | None = None):
        seed = cfg.seed if seed is None else seed
        self.cfg = cfg
        self.n_r = n_r
        self.generators = [
            Generator(n_r, cfg.hidden_g, cfg.dropout, cfg.skip, rng=np.random.default_rng([seed, i, 0]))
            for i in range(cfg.m)
        ]
        self.discriminators = [
            Discriminator(n_r, cfg.hidden_d, rng=np.random.default_rng([seed, i, 1])) for i in range(cfg.m)
        ]
        self.opt_g = [self._adamw(cfg.lr_g) for _ in range(cfg.m)]
        self.opt_d = [self._adamw(cfg.lr_d) for _ in range(cfg.m)]
        self.dropout_rng = np.random.default_rng([seed, 1000])

    def _adamw(self, lr: float) -> AdamWState:
        c = self.cfg
        return AdamWState(lr, c.beta1, c.beta2, c.eps, c.weight_decay)

    # -- forward ---------------------------------------------------------
    def roll(self, x0, train: bool = True) -> list[Tensor]:
        """Predicted graphs for ``t_1..t_m`` from ground-truth ``t_0`` (``[B, n, n]``)."""
        prev = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=np.float64))
        preds = []
        for gen in self.generators:
            gen.train(train)
            inp = prev if (self.cfg.chain_backprop or not train) else prev.detach()
            out = gen(inp, rng=self.dropout_rng if train else None)
            preds.append(out)
            prev = out
        return preds

    def predict(self, x0) -> list[np.ndarray]:
        """Eval-mode rollout returning plain arrays; parameters are untouched."""
        return [p.data.copy() for p in self.roll(x0, train=False)]

    # -- updates ---------------------------------------------------------
    def discriminator_step(self, truth: list[Tensor], preds: list[Tensor]) -> list[float]:
        losses = []
        for i, (disc, opt) in enumerate(zip(self.discriminators, self.opt_d)):
            disc.zero_grad()
            real_graph = truth[i + 1]
            fake = preds[i].detach()
            loss = de.mean(adversarial_loss_d(disc(real_graph, real_graph), disc(real_graph, fake)))
            loss.backward()
            adamw_step(opt, disc.parameters())
            disc.zero_grad()
            losses.append(loss.item())
        return losses

    def generator_losses(self, truth: list[Tensor], preds: list[Tensor]) -> list[StageLosses]:
        w = self.cfg.weights
        stages = []
        for i, disc in enumerate(self.discriminators):
            target = truth[i + 1]
            adv = de.mean(adversarial_loss_g(disc(target, preds[i])))
            l1 = l1_loss(preds[i], target)
            if w.variant == "full":
                reg = kl_loss(preds[i], target, self.cfg.sigma_floor)
            elif w.variant == "no_kl_plus_topology":
                reg = topology_loss(preds[i], target)
            else:
                reg = None
            stages.append(StageLosses(adv, l1, reg))
        return stages

    def generator_step(self, truth: list[Tensor], preds: list[Tensor]) -> tuple[list[StageLosses], Tensor]:
        n_s = truth[0].shape[0]
        for disc in self.discriminators:
            disc.set_requires_grad(False)
        try:
            for gen in self.generators:
                gen.zero_grad()
            stages = self.generator_losses(truth, preds)
            total = full_loss(stages, self.cfg.weights, n_s, self.cfg.m)
            total.backward()
        finally:
            for disc in self.discriminators:
                disc.set_requires_grad(True)
        for gen, opt in zip(self.generators, self.opt_g):
            adamw_step(opt, gen.parameters())
        return stages, total

    def epoch(self, truth: list[Tensor]) -> list[dict]:
        preds = self.roll(truth[0], train=True)
        d_losses = self.discriminator_step(truth, preds)
        stages, _ = self.generator_step(truth, preds)
        n_s = truth[0].shape[0]
        rows = []
        for i, st in enumerate(stages):
            reg = float(st.reg.data.sum() / n_s) if st.reg is not None else 0.0
            rows.append(
                {
                    "stage": i + 1,
                    "d_loss": d_losses[i],
                    "g_adv": st.adv.item(),
                    "g_l1": float(st.l1.data.sum() / n_s),
                    "g_kl_or_topo": reg,
                    "g_total": stage_total(st, self.cfg.weights, n_s).item(),
                }
            )
        return rows

    def modules(self) -> list[Module]:
        return [*self.generators, *self.discriminators]


def _truth_tensors(samples: Sequence[LongitudinalSample], m: int) -> list[Tensor]:
    for s in samples:
        if s.timepoints < m + 1:
            raise TrainDataError(f"subject {s.subject_id} has {s.timepoints} timepoints, need {m + 1}")
    return [Tensor(stack([s.graphs[t] for s in samples])) for t in range(m + 1)]


@dataclass
class TrainResult:
    cascade: Cascade
    history: list[dict]


def train_cascade(train_samples: Sequence[LongitudinalSample], cfg: TrainConfig, seed: int | None = None,
                  log_every: int = 0) -> TrainResult:
    """Full-batch training: per epoch one update per discriminator, then one joint generator update."""
    if not train_samples:
        raise TrainDataError("no training subjects")
    truth = _truth_tensors(train_samples, cfg.m)
    cascade = Cascade(train_samples[0].n_r, cfg, seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        for row in cascade.epoch(truth):
            bad = [k for k, v in row.items() if k != "stage" and not math.isfinite(v)]
            if bad:
                raise NumericError(f"non-finite {', '.join(bad)} at epoch {epoch}, stage {row['stage']}")
            history.append({"epoch": epoch, **row})
        if log_every and epoch % log_every == 0:
            log.info("epoch %d: %s", epoch, history[-1])
    return TrainResult(cascade, history)


def kfold_split(n_s: int, folds: int, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Seeded shuffle cut into ``folds`` near-equal test sets; train = the rest."""
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    if folds > n_s:
        raise ConfigError(f"cannot split {n_s} subjects into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n_s)
    out = []
    for test in np.array_split(perm, folds):
        test_set = set(test.tolist())
        out.append(([i for i in range(n_s) if i not in test_set], sorted(test_set)))
    return out


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    cascade: Cascade
    history: list[dict]


def _train_fold(args) -> FoldResult:
    fold, train, test, cfg = args
    result = train_cascade(train, cfg, seed=cfg.seed + fold)
    return FoldResult(fold, [s.subject_id for s in train], [s.subject_id for s in test], result.cascade,
                      result.history)


def cross_validate(samples: Sequence[LongitudinalSample], cfg: TrainConfig, jobs: int = 1) -> list[FoldResult]:
    """Train one cascade per fold with seed ``cfg.seed + fold``."""
    splits = kfold_split(len(samples), cfg.folds, cfg.seed)
    tasks = [(k, [samples[i] for i in tr], [samples[i] for i in te], cfg) for k, (tr, te) in enumerate(splits)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_train_fold, tasks))
    return [_train_fold(t) for t in tasks]


def with_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    return replace(cfg, weights=replace(cfg.weights, variant=variant))
