"""Maximum-likelihood and amortized-inference training loops.

Follows a fixed protocol: Adam, 200 epochs, batch size 100, initial
learning rate 0.01 decayed by 10x after 10 consecutive epochs without a
new best training loss, floored at 1e-6.  The reference loop is
single-threaded and bitwise reproducible for a given seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datasets import DatasetBundle
from .flow import (
    LOG_2PI,
    ResidualFlow,
    build_density_flow,
    build_inference_flow,
    flow_forward,
    flow_forward_np,
    log_prob,
    log_prob_np,
    save_checkpoint,
)
from .graphs import parse_graph


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 100
    lr_init: float = 0.01
    lr_decay_factor: float = 10.0
    patience: int = 10
    lr_min: float = 1e-6
    lip_bound: float = 0.99
    seed: int = 0
    objective: str = "mle"  # or "elbo"
    elbo_samples: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1 or self.elbo_samples < 1:
            raise ValueError("batch_size and elbo_samples must be positive")
        if not (0 < self.lr_min < self.lr_init):
            raise ValueError("need 0 < lr_min < lr_init")
        if self.objective not in ("mle", "elbo"):
            raise ValueError(f"unknown objective {self.objective!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, loss, lr, epoch, batch_index):
        self.loss, self.lr, self.epoch, self.batch_index = loss, lr, epoch, batch_index
        super().__init__(
            f"non-finite loss {loss} at epoch {epoch}, batch {batch_index}, lr {lr}"
        )


class AdamState:
    """Per-parameter first/second moment accumulators with bias correction."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for path, arr in params.items():
            g = grads[path]
            m = self.m.setdefault(path, np.zeros_like(arr))
            v = self.v.setdefault(path, np.zeros_like(arr))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _grads_by_path(tape: ad.Tape, loss: ad.Tensor2,
                   leaves: dict[str, ad.Tensor2]) -> dict[str, np.ndarray]:
    by_tensor = tape.backward(loss)
    return {path: by_tensor.get(leaf, np.zeros(leaf.shape))
            for path, leaf in leaves.items()}


def mle_step(flow: ResidualFlow, batch: np.ndarray, opt: AdamState,
             lr: float) -> float:
    """One Adam update on the mean negative log-likelihood of the batch."""
    leaves = flow.make_leaves()
    with ad.Tape() as tape:
        lp = log_prob(flow, ad.const(batch), leaves=leaves, advance_power=True)
        loss = ad.scale(ad.sum_all(lp), -1.0 / batch.shape[0])
    value = loss.item()
    if not np.isfinite(value):
        return value
    opt.step(flow.parameter_arrays(), _grads_by_path(tape, loss, leaves), lr)
    return value


def elbo_step(flow: ResidualFlow, observed: np.ndarray, oracle: DatasetBundle,
              opt: AdamState, lr: float, rng: np.random.Generator,
              n_samples: int = 1) -> tuple[float, int]:
    """One Adam update on the negative Monte Carlo evidence lower bound.

    Samples eps ~ N(0, I), pushes it through the conditional flow in its
    generative direction (no inversion needed) and scores the result under
    the oracle's exact joint.  Rows where the joint is non-finite (latents
    outside the support) are dropped from the batch mean before taping so
    they cannot poison gradients.  Returns (mean negative ELBO, count of
    masked draws).
    """
    n, d = observed.shape[0], flow.dim
    leaves = flow.make_leaves()
    masked = 0
    with ad.Tape() as tape:
        total = None
        denom = 0.0
        for k in range(n_samples):
            eps = rng.standard_normal((n, d))
            z_np, _ = flow_forward_np(flow, eps, cond=observed)
            joint_np = oracle.joint_logp(oracle.assemble_full(z_np, observed))
            valid = np.isfinite(joint_np)
            masked += int((~valid).sum())
            if not valid.any():
                continue
            eps_k, obs_k = eps[valid], observed[valid]
            base = -0.5 * (eps_k * eps_k).sum(axis=1, keepdims=True) - 0.5 * d * LOG_2PI
            obs_t = ad.const(obs_k)
            z, logdet = flow_forward(flow, ad.const(eps_k), cond=obs_t, leaves=leaves,
                                     advance_power=(k == 0))
            joint = oracle.conditional_joint_taped(z, obs_t)
            elbo_k = ad.add(ad.sub(joint, ad.const(base)), logdet)
            denom += float(valid.sum())
            contrib = ad.sum_all(elbo_k)
            total = contrib if total is None else ad.add(total, contrib)
        if total is None:
            raise TrainingDiverged(np.nan, lr, -1, -1)
        loss = ad.scale(total, -1.0 / denom)
    value = loss.item()
    if not np.isfinite(value):
        return value, masked
    opt.step(flow.parameter_arrays(), _grads_by_path(tape, loss, leaves), lr)
    return value, masked


def lr_schedule(history: list[float], lr: float, patience: int = 10,
                factor: float = 10.0, lr_min: float = 1e-6) -> float:
    """Plateau decay over the per-epoch loss history.

    An epoch improves when its loss is strictly below every earlier epoch's;
    the first epoch only sets the baseline.  After each full `patience` run
    of non-improving epochs the rate divides by `factor`, floored at lr_min.
    """
    streak = 0
    best = np.inf
    for k, value in enumerate(history):
        if k > 0 and value < best:
            streak = 0
        else:
            streak += 1
        best = min(best, value)
    if streak > 0 and streak % patience == 0:
        return max(lr / factor, lr_min)
    return lr


def evaluate_log_prob(flow: ResidualFlow, data: np.ndarray) -> np.ndarray:
    return log_prob_np(flow, data)


def evaluate_elbo(flow: ResidualFlow, bundle: DatasetBundle, observed: np.ndarray,
                  rng: np.random.Generator, n_samples: int = 1) -> np.ndarray:
    """Per-sample Monte Carlo ELBO with fresh base draws."""
    n, d = observed.shape[0], flow.dim
    total = np.zeros((n, 1))
    for _ in range(n_samples):
        eps = rng.standard_normal((n, d))
        z, logdet = flow_forward_np(flow, eps, cond=observed)
        joint = bundle.joint_logp(bundle.assemble_full(z, observed))
        base = -0.5 * (eps * eps).sum(axis=1) - 0.5 * d * LOG_2PI
        total[:, 0] += joint - base + logdet
    return total[:, 0] / n_samples


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    test_metric: float


@dataclass
class TrainResult:
    flow: ResidualFlow
    metrics: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = -np.inf
    diagnostics: dict = field(default_factory=dict)


def train(flow: ResidualFlow, bundle: DatasetBundle, cfg: TrainConfig,
          out_dir: str | None = None, extras: dict | None = None,
          log=None) -> TrainResult:
    """Run the full protocol; returns per-epoch metrics and the best epoch.

    The test metric is mean log-likelihood for mle and mean ELBO for elbo
    (higher is better for both).  Checkpoints, when out_dir is given, are
    written at the best test metric and at completion.
    """
    rng = np.random.default_rng(cfg.seed)
    eval_rng_seed = np.random.SeedSequence([cfg.seed, 0xE7A1]).generate_state(1)[0]
    if cfg.objective == "elbo":
        if not bundle.has_joint:
            raise ValueError("elbo training needs a dataset with an exact joint density")
        train_obs = bundle.observed_columns(bundle.train)
        test_obs = bundle.observed_columns(bundle.test)
    else:
        train_obs = test_obs = None

    opt = AdamState()
    lr = cfg.lr_init
    history: list[float] = []
    result = TrainResult(flow)
    masked_total = 0
    n_train = (train_obs if cfg.objective == "elbo" else bundle.train).shape[0]

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n_train)
        losses, sizes = [], []
        for bi, start in enumerate(range(0, n_train, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            if cfg.objective == "mle":
                value = mle_step(flow, bundle.train[idx], opt, lr)
            else:
                value, masked = elbo_step(flow, train_obs[idx], bundle, opt, lr,
                                          rng, cfg.elbo_samples)
                masked_total += masked
            if not np.isfinite(value):
                raise TrainingDiverged(value, lr, epoch, bi)
            losses.append(value)
            sizes.append(len(idx))
        epoch_loss = float(np.average(losses, weights=sizes))
        history.append(epoch_loss)

        flow.refresh_power()
        if cfg.objective == "mle":
            test_metric = float(evaluate_log_prob(flow, bundle.test).mean())
        else:
            ev_rng = np.random.default_rng([int(eval_rng_seed), epoch])
            test_metric = float(evaluate_elbo(flow, bundle, test_obs, ev_rng,
                                              cfg.elbo_samples).mean())
        result.metrics.append(EpochMetrics(epoch, lr, epoch_loss, test_metric))
        if log is not None:
            log(result.metrics[-1])
        if test_metric > result.best_metric:
            result.best_metric = test_metric
            result.best_epoch = epoch
            if out_dir is not None:
                save_checkpoint(flow, os.path.join(out_dir, "best.json"), extras)
        lr = lr_schedule(history, lr, cfg.patience, cfg.lr_decay_factor, cfg.lr_min)

    flow.refresh_power()
    if out_dir is not None:
        save_checkpoint(flow, os.path.join(out_dir, "final.json"), extras)
        _write_metrics_csv(os.path.join(out_dir, "metrics.csv"), result.metrics)
    result.diagnostics["elbo_masked_samples"] = masked_total
    return result


def _write_metrics_csv(path: str, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,lr,train_loss,test_metric\n")
        for m in metrics:
            fh.write(f"{m.epoch},{m.lr!r},{m.train_loss!r},{m.test_metric!r}\n")


@dataclass(frozen=True)
class Preset:
    """Architecture row: flow depth and hidden width for one benchmark."""

    name: str
    dataset: str
    n_blocks: int
    hidden_width: int
    lip_bound: float = 0.99


PRESETS = {
    "grf-s-arith": Preset("grf-s-arith", "arithmetic-circuit", 8, 125),
    "grf-l-arith": Preset("grf-l-arith", "arithmetic-circuit", 17, 200),
    "grf-s-tree": Preset("grf-s-tree", "tree", 8, 125),
    "grf-l-tree": Preset("grf-l-tree", "tree", 21, 150),
    "grf-s-protein": Preset("grf-s-protein", "protein", 9, 100),
    "grf-l-protein": Preset("grf-l-protein", "protein", 22, 125),
}


def flow_from_preset(preset: Preset, graph_text: str, objective: str,
                     seed: int, lip_bound: float | None = None) -> ResidualFlow:
    graph = parse_graph(graph_text)
    c = lip_bound if lip_bound is not None else preset.lip_bound
    if objective == "elbo":
        return build_inference_flow(graph, preset.n_blocks, preset.hidden_width, c, seed)
    return build_density_flow(graph, preset.n_blocks, preset.hidden_width, c, seed)
