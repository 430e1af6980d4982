"""Training loop composing the MLP backbones with the projection layer.

A model carries two networks: the unconstrained head f and the null-space
component w.  In "caffnet" mode both are pushed through the projection
layer; in "soft" mode the raw f output is emitted and the hinge penalty is
added to the loss; "unconstrained" mode emits the raw output with no
penalty (used by the post-hoc projection ablation).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .constraints import ComboMode, ConstraintProvider, enumerate_combinations, violation_stats
from .layer import (
    BatchSelection,
    LayerConfig,
    SubConstraintTensors,
    backward_batch,
    select_batch,
    select_batch_varying,
)
from .neural import AdamState, Mlp, adam_step
from .rngs import make_rng

MODE_CAFFNET = "caffnet"
MODE_SOFT = "soft"
MODE_UNCONSTRAINED = "unconstrained"

# Residuals above this count as violations in reports; the layer's feas_tol
# slack sits at the same magnitude, so guaranteed-feasible outputs report 0.
REPORT_EPS = 1e-9


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite at epoch {epoch}: {loss}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    seed: int = 0
    lr: float = 1e-4
    penalty_weight: float = 100.0
    layer_mode: str = MODE_CAFFNET
    combo_mode: ComboMode = ComboMode.FULL
    feas_tol: float = 1e-9
    rank_tol: float = 1e-10
    p: float = 2.0
    hidden: tuple[int, ...] = (200, 200, 200)
    out_scale: float = 1.0

    def layer_config(self) -> LayerConfig:
        return LayerConfig(p=self.p, feas_tol=self.feas_tol,
                           rank_tol=self.rank_tol, mode=self.combo_mode)


class ConstrainedModel:
    """f/w network pair plus the constraint provider and layer config."""

    def __init__(self, provider: ConstraintProvider, cfg: TrainConfig):
        self.provider = provider
        self.mode = cfg.layer_mode
        self.layer_cfg = cfg.layer_config()
        rng_f = make_rng(cfg.seed, "init-f")
        rng_w = make_rng(cfg.seed, "init-w")
        self.f_theta = Mlp(provider.n_in, provider.n_out, cfg.hidden, rng_f,
                           out_scale=cfg.out_scale)
        self.w_phi = Mlp(provider.n_in, provider.n_out, cfg.hidden, rng_w,
                         out_scale=cfg.out_scale)
        self.combos = enumerate_combinations(provider.m, provider.n_out, cfg.combo_mode)
        # fixed-A providers get their sub-constraint factorizations cached once
        self.tensors: SubConstraintTensors | None = None
        if provider.constant_a is not None:
            self.tensors = SubConstraintTensors(provider.constant_a, self.combos,
                                                self.layer_cfg.rank_tol)

    def heads(self, x_batch: np.ndarray):
        f, tape_f = self.f_theta.forward(x_batch)
        w, tape_w = self.w_phi.forward(x_batch)
        return f, tape_f, w, tape_w

    def select(self, x_batch: np.ndarray, f: np.ndarray, w: np.ndarray) -> BatchSelection:
        b = self.provider.b_batch(x_batch)
        if self.tensors is not None:
            return select_batch(self.tensors, b, f, w, self.layer_cfg)
        a = np.stack([self.provider.system(x).a_matrix for x in x_batch])
        return select_batch_varying(a, self.combos.combos, b, f, w, self.layer_cfg)

    def predict(self, x_batch: np.ndarray, apply_layer: bool | None = None) -> np.ndarray:
        """Emitted outputs for a batch; the layer is applied per model mode
        unless overridden (the post-hoc ablation forces it on at inference)."""
        x_batch = np.atleast_2d(np.asarray(x_batch, dtype=float))
        f, _ = self.f_theta.forward(x_batch)
        use_layer = self.mode == MODE_CAFFNET if apply_layer is None else apply_layer
        if not use_layer:
            return f
        w, _ = self.w_phi.forward(x_batch)
        return self.select(x_batch, f, w).output

    def residuals(self, x_batch: np.ndarray, y_batch: np.ndarray) -> np.ndarray:
        """max(0, A y - b) rows for each sample."""
        x_batch = np.atleast_2d(np.asarray(x_batch, dtype=float))
        out = np.empty((x_batch.shape[0], self.provider.m))
        if self.provider.constant_a is not None:
            a = self.provider.constant_a
            b = self.provider.b_batch(x_batch)
            out = np.maximum(0.0, y_batch @ a.T - b)
        else:
            for i, x in enumerate(x_batch):
                sys = self.provider.system(x)
                out[i] = np.maximum(0.0, sys.a_matrix @ y_batch[i] - sys.b_vector)
        return out


@dataclass
class TraceRow:
    epoch: int
    loss: float
    max_violation: float
    mean_violation: float


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def final_loss(self) -> float:
        return self.rows[-1].loss if self.rows else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss", "max_violation", "mean_violation"])
            for r in self.rows:
                writer.writerow([r.epoch, repr(r.loss), repr(r.max_violation),
                                 repr(r.mean_violation)])


class Scenario:
    """One experiment definition: data, constraint provider, loss, metrics.

    Subclasses implement training_inputs/loss_and_grad for scenarios whose
    loss is a function of the emitted output, or override run_epoch entirely
    (the closed-loop control scenario does).
    """

    name: str
    provider: ConstraintProvider

    def training_inputs(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def loss_and_grad(self, x_batch: np.ndarray, y_batch: np.ndarray):
        """Mean task loss over the batch and its gradient w.r.t. y."""
        raise NotImplementedError

    def build_model(self, cfg: TrainConfig) -> ConstrainedModel:
        return ConstrainedModel(self.provider, cfg)

    def run_epoch(self, model: ConstrainedModel, opt_f: AdamState, opt_w: AdamState,
                  cfg: TrainConfig, epoch: int, rng: np.random.Generator,
                  inputs: np.ndarray) -> TraceRow:
        n = inputs.shape[0]
        order = rng.permutation(n) if cfg.batch_size < n else np.arange(n)
        loss_sum = 0.0
        resid_all = []
        for start in range(0, n, cfg.batch_size):
            xb = inputs[order[start:start + cfg.batch_size]]
            f, tape_f, w, tape_w = model.heads(xb)
            if model.mode == MODE_CAFFNET:
                sel = model.select(xb, f, w)
                loss, dy = self.loss_and_grad(xb, sel.output)
                gf, gw = backward_batch(sel, dy)
                resid_all.append(sel.residual)
            else:
                loss, gf = self.loss_and_grad(xb, f)
                resid = model.residuals(xb, f)
                if model.mode == MODE_SOFT:
                    pen, dpen = _hinge_penalty(model, xb, f, cfg.penalty_weight, resid)
                    loss += pen
                    gf = gf + dpen
                gw = None
                resid_all.append(resid)
            loss_sum += loss * xb.shape[0]

            gw_f, gb_f, _ = model.f_theta.backward(tape_f, gf)
            adam_step(opt_f, model.f_theta.parameters(), gw_f + gb_f)
            if gw is not None:
                gw_w, gb_w, _ = model.w_phi.backward(tape_w, gw)
                adam_step(opt_w, model.w_phi.parameters(), gw_w + gb_w)

        resid = np.concatenate(resid_all, axis=0)
        stats = violation_stats(resid, REPORT_EPS)
        return TraceRow(epoch=epoch, loss=loss_sum / n,
                        max_violation=stats.max, mean_violation=stats.mean)

    def evaluate(self, model: ConstrainedModel, seed: int) -> dict:
        raise NotImplementedError


def _hinge_penalty(model: ConstrainedModel, xb: np.ndarray, y: np.ndarray,
                   weight: float, resid: np.ndarray):
    """Penalty weight * sum(max(0, A y - b)) per sample, averaged over the
    batch, and its gradient w.r.t. y."""
    s = xb.shape[0]
    pen = weight * float(resid.sum()) / s
    active = resid > 0.0
    if model.provider.constant_a is not None:
        grad = weight * (active @ model.provider.constant_a) / s
    else:
        grad = np.empty_like(y)
        for i, x in enumerate(xb):
            a = model.provider.system(x).a_matrix
            grad[i] = weight * (active[i] @ a) / s
    return pen, grad


def train(model: ConstrainedModel, scenario: Scenario, cfg: TrainConfig) -> TrainTrace:
    """Run the scenario's epochs; deterministic for a fixed (seed, config)."""
    opt_f = AdamState.for_params(model.f_theta.parameters(), lr=cfg.lr)
    opt_w = AdamState.for_params(model.w_phi.parameters(), lr=cfg.lr)
    rng = make_rng(cfg.seed, "train-batches")
    inputs = scenario.training_inputs(cfg.seed)
    trace = TrainTrace()
    for epoch in range(cfg.epochs):
        row = scenario.run_epoch(model, opt_f, opt_w, cfg, epoch, rng, inputs)
        if not np.isfinite(row.loss):
            raise DivergenceError(epoch, row.loss)
        trace.rows.append(row)
    return trace


def mse_and_grad(y: np.ndarray, targets: np.ndarray):
    """Mean squared error over all entries and its gradient w.r.t. y."""
    diff = y - targets
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n
