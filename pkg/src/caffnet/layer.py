"""Closed-form constraint-affine output layer.

Given an unconstrained network output f and a null-space component w, each
sub-constraint (A_g, b_g) selected by an index combination g induces the
candidate

    y_g = f - A_g^+ (A_g f - b_g) + (I - A_g^+ A_g) w

where A_g^+ is the Moore-Penrose pseudoinverse.  Candidates feasible for the
whole system form the selection pool; the layer emits f itself when f is
already feasible, otherwise the feasible candidate closest to f in the
configured p-norm (ties broken by the combination ordering, which sorts
lexicographically with shorter prefixes first).

The math is evaluated in per-length stacks so one batched SVD covers all
combinations of a given cardinality; chunked evaluation over the combination
family gives identical results by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .constraints import (
    ComboMode,
    CombinationSet,
    ConstraintSystem,
    enumerate_combinations,
    violation,
)
from .linalg import DEFAULT_RANK_TOL, as_vector, pinv, pinv_stack

INTERIOR = "interior"
PROJECTED = "projected"


@dataclass(frozen=True)
class LayerConfig:
    """Norm order, tolerances and combination family for the layer."""

    p: float = 2.0
    feas_tol: float = 1e-9
    rank_tol: float = DEFAULT_RANK_TOL
    mode: ComboMode = ComboMode.FULL

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.feas_tol < 0:
            raise ValueError("feas_tol must be >= 0")
        if self.rank_tol <= 0:
            raise ValueError("rank_tol must be > 0")


@dataclass(frozen=True)
class ProjectionCandidate:
    """The candidate for one index combination, with feasibility bookkeeping."""

    gamma: tuple[int, ...]
    y: np.ndarray
    residual: np.ndarray
    feasible: bool
    distance: float


@dataclass(frozen=True)
class SelectionRecord:
    """Outcome of one layer evaluation."""

    branch: str
    output: np.ndarray
    gamma: tuple[int, ...] | None = None
    null_projector: np.ndarray | None = None
    distance: float = 0.0
    candidates: tuple[ProjectionCandidate, ...] | None = None


class EmptyCandidateSetError(RuntimeError):
    """No candidate passed the feasibility filter.

    Signals an infeasible constraint system or a too-tight tolerance; the
    least-violating candidate is attached for diagnostics.
    """

    def __init__(self, least_violating: ProjectionCandidate | None, sample_index: int = 0):
        worst = "no candidates evaluated"
        if least_violating is not None:
            worst = (
                f"best candidate gamma={least_violating.gamma} still violates "
                f"by {float(least_violating.residual.max()):.3e}"
            )
        super().__init__(f"no feasible projection candidate (sample {sample_index}): {worst}")
        self.least_violating = least_violating
        self.sample_index = sample_index


def project_sub(f_theta, w_phi, a_gamma, b_gamma, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Single sub-constraint projection of f with null-space shift w."""
    f = as_vector(f_theta)
    w = as_vector(w_phi)
    a = np.asarray(a_gamma, dtype=float)
    b = as_vector(b_gamma)
    if a.ndim != 2 or a.shape[1] != f.shape[0] or a.shape[0] != b.shape[0] or w.shape != f.shape:
        raise ValueError(
            f"inconsistent dims: A {a.shape}, b {b.shape}, f {f.shape}, w {w.shape}"
        )
    a_pinv = pinv(a, rank_tol)
    null_proj = np.eye(f.shape[0]) - a_pinv @ a
    return f - a_pinv @ (a @ f - b) + null_proj @ w


class SubConstraintTensors:
    """Per-cardinality stacks of sub-constraint data for one A matrix.

    Groups the combination family by length k, gathers the selected rows and
    factors all pseudoinverses of each group in one batched SVD.  Built once
    per A; reused across every (f, w, b) evaluated against it.
    """

    def __init__(self, a_matrix: np.ndarray, combos: CombinationSet | Sequence[tuple[int, ...]],
                 rank_tol: float = DEFAULT_RANK_TOL):
        a = np.asarray(a_matrix, dtype=float)
        combo_list = list(combos)
        m, n = a.shape
        self.a_matrix = a
        self.combos = combo_list
        self.n_out = n
        self.size = len(combo_list)

        by_k: dict[int, list[int]] = {}
        for pos, gamma in enumerate(combo_list):
            by_k.setdefault(len(gamma), []).append(pos)

        # order within a group follows the global combination ordering
        self.groups = []
        self.null_proj = np.empty((self.size, n, n))
        eye = np.eye(n)
        for k in sorted(by_k):
            pos = np.asarray(by_k[k], dtype=int)
            idx0 = np.asarray([combo_list[p] for p in pos], dtype=int) - 1
            a_sub = a[idx0, :]                        # (g, k, n)
            a_pinv = pinv_stack(a_sub, rank_tol)      # (g, n, k)
            nullp = eye[None, :, :] - np.matmul(a_pinv, a_sub)
            self.null_proj[pos] = nullp
            self.groups.append((k, pos, idx0, a_pinv))
        # (size*n, n) view of the projectors for one GEMM against (f + w)
        self._null_flat = self.null_proj.reshape(self.size * n, n)

    def candidate_outputs(self, f: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Candidates for a batch: f, w of shape (S, n), b of shape (S, m).

        Returns Y of shape (S, size, n) in combination order.  Uses the
        algebraic form y = N (f + w) + A_g^+ b_g, which equals the defining
        expression because N f = f - A_g^+ A_g f.
        """
        s = f.shape[0]
        y = ((f + w) @ self._null_flat.T).reshape(s, self.size, self.n_out)
        for k, pos, idx0, a_pinv in self.groups:
            b_sub = b[:, idx0]                                     # (S, g, k)
            # (g, S, k) @ (g, k, n) -> (g, S, n), batched over the group
            part = np.matmul(b_sub.transpose(1, 0, 2), a_pinv.transpose(0, 2, 1))
            y[:, pos, :] += part.transpose(1, 0, 2)
        return y


def batch_candidate_outputs_varying(a: np.ndarray, combos: Sequence[tuple[int, ...]],
                                    f: np.ndarray, w: np.ndarray, b: np.ndarray,
                                    rank_tol: float = DEFAULT_RANK_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Candidates when A differs per sample: a is (S, m, n).

    Returns (Y, N) with Y of shape (S, G, n) and N the null projectors of
    shape (S, G, n, n).  Pseudoinverses are factored per sample, batched by
    combination length.
    """
    combo_list = list(combos)
    s, _, n = a.shape
    g_total = len(combo_list)
    y = np.empty((s, g_total, n))
    nulls = np.empty((s, g_total, n, n))
    by_k: dict[int, list[int]] = {}
    for posn, gamma in enumerate(combo_list):
        by_k.setdefault(len(gamma), []).append(posn)
    eye = np.eye(n)
    fw = (f + w)[:, None, :, None]                                 # (S, 1, n, 1)
    for k in sorted(by_k):
        pos = np.asarray(by_k[k], dtype=int)
        idx0 = np.asarray([combo_list[p] for p in pos], dtype=int) - 1
        a_sub = a[:, idx0, :]                                      # (S, g, k, n)
        a_pinv = pinv_stack(a_sub, rank_tol)                       # (S, g, n, k)
        nullp = eye[None, None, :, :] - np.matmul(a_pinv, a_sub)
        b_sub = b[:, idx0][..., None]                              # (S, g, k, 1)
        # y = N (f + w) + A_g^+ b_g
        y[:, pos, :] = (np.matmul(nullp, fw) + np.matmul(a_pinv, b_sub))[..., 0]
        nulls[:, pos, :, :] = nullp
    return y, nulls


def _distances(y: np.ndarray, f: np.ndarray, p: float) -> np.ndarray:
    diff = y - f[:, None, :]
    if p == 2.0:
        return np.sqrt(np.einsum("sgn,sgn->sg", diff, diff))
    return np.sum(np.abs(diff) ** p, axis=-1) ** (1.0 / p)


@dataclass
class BatchSelection:
    """Vectorized selection result for a batch of samples."""

    output: np.ndarray            # (S, n)
    interior: np.ndarray          # (S,) bool
    gamma_index: np.ndarray       # (S,) position in combo order, -1 when interior
    null_proj: np.ndarray         # (S, n, n); identity rows are unused
    distance: np.ndarray          # (S,)
    residual: np.ndarray          # (S, m) residual max(0, A y - b) of the output
    pinv_rows: np.ndarray | None = None  # (S, n, m) chosen A_g^+ scattered over rows


def _pick_feasible(y: np.ndarray, resid: np.ndarray, dist: np.ndarray,
                   feas_tol: float, combos: Sequence[tuple[int, ...]],
                   sample_ids: np.ndarray) -> np.ndarray:
    """Argmin distance over feasible candidates; first index wins ties."""
    feasible = resid.max(axis=2) <= feas_tol
    masked = np.where(feasible, dist, np.inf)
    choice = np.argmin(masked, axis=1)
    chosen_ok = np.take_along_axis(feasible, choice[:, None], axis=1)[:, 0]
    if not chosen_ok.all():
        sample = int(np.nonzero(~chosen_ok)[0][0])
        least = int(np.argmin(resid[sample].max(axis=1)))
        cand = ProjectionCandidate(
            gamma=tuple(combos[least]),
            y=y[sample, least].copy(),
            residual=np.maximum(0.0, resid[sample, least]),
            feasible=False,
            distance=float(dist[sample, least]),
        )
        raise EmptyCandidateSetError(cand, sample_index=int(sample_ids[sample]))
    return choice


def select_batch(tensors: SubConstraintTensors, b: np.ndarray, f: np.ndarray,
                 w: np.ndarray, cfg: LayerConfig) -> BatchSelection:
    """Layer evaluation for a batch sharing one A matrix.

    b, f, w have shapes (S, m), (S, n), (S, n).  Candidates are only
    evaluated for the samples whose f is infeasible.
    """
    a = tensors.a_matrix
    s, n = f.shape
    f_resid_max = (f @ a.T - b).max(axis=1)
    interior = f_resid_max <= cfg.feas_tol

    output = f.copy()
    gamma_index = np.full(s, -1, dtype=int)
    null_proj = np.broadcast_to(np.eye(n), (s, n, n)).copy()
    distance = np.zeros(s)

    rows = np.nonzero(~interior)[0]
    if rows.size:
        fs, ws, bs = f[rows], w[rows], b[rows]
        y = tensors.candidate_outputs(fs, ws, bs)
        resid = (y.reshape(-1, n) @ a.T).reshape(rows.size, -1, a.shape[0]) - bs[:, None, :]
        dist = _distances(y, fs, cfg.p)
        choice = _pick_feasible(y, resid, dist, cfg.feas_tol, tensors.combos, rows)
        output[rows] = np.take_along_axis(y, choice[:, None, None], axis=1)[:, 0, :]
        gamma_index[rows] = choice
        null_proj[rows] = tensors.null_proj[choice]
        distance[rows] = np.take_along_axis(dist, choice[:, None], axis=1)[:, 0]

    out_resid = np.maximum(0.0, output @ a.T - b)
    return BatchSelection(output=output, interior=interior, gamma_index=gamma_index,
                          null_proj=null_proj, distance=distance, residual=out_resid)


def select_batch_varying(a: np.ndarray, combos: Sequence[tuple[int, ...]],
                         b: np.ndarray, f: np.ndarray, w: np.ndarray,
                         cfg: LayerConfig, want_pinv_rows: bool = False) -> BatchSelection:
    """Layer evaluation when each sample carries its own A: a is (S, m, n).

    `want_pinv_rows` additionally returns the chosen combination's
    pseudoinverse scattered over the full row set, which rollout
    backpropagation uses to route gradients through b.
    """
    combo_list = list(combos)
    s, m, n = a.shape
    f_resid_max = (np.matmul(a, f[:, :, None])[..., 0] - b).max(axis=1)
    interior = f_resid_max <= cfg.feas_tol

    output = f.copy()
    gamma_index = np.full(s, -1, dtype=int)
    null_proj = np.broadcast_to(np.eye(n), (s, n, n)).copy()
    distance = np.zeros(s)
    pinv_rows = np.zeros((s, n, m)) if want_pinv_rows else None

    rows = np.nonzero(~interior)[0]
    if rows.size:
        asub, fs, ws, bs = a[rows], f[rows], w[rows], b[rows]
        y, nulls = batch_candidate_outputs_varying(asub, combo_list, fs, ws, bs, cfg.rank_tol)
        resid = np.matmul(y, asub.transpose(0, 2, 1)) - bs[:, None, :]
        dist = _distances(y, fs, cfg.p)
        choice = _pick_feasible(y, resid, dist, cfg.feas_tol, combo_list, rows)
        output[rows] = np.take_along_axis(y, choice[:, None, None], axis=1)[:, 0, :]
        gamma_index[rows] = choice
        null_proj[rows] = nulls[np.arange(rows.size), choice]
        distance[rows] = np.take_along_axis(dist, choice[:, None], axis=1)[:, 0]
        if want_pinv_rows:
            for i, sample in enumerate(rows):
                gamma = combo_list[choice[i]]
                idx = np.asarray(gamma, dtype=int) - 1
                pinv_rows[sample][:, idx] = pinv(a[sample][idx, :], cfg.rank_tol)

    out_resid = np.maximum(0.0, np.matmul(a, output[:, :, None])[..., 0] - b)
    return BatchSelection(output=output, interior=interior, gamma_index=gamma_index,
                          null_proj=null_proj, distance=distance, residual=out_resid,
                          pinv_rows=pinv_rows)


def candidates(sys: ConstraintSystem, combos: CombinationSet, f_theta, w_phi,
               cfg: LayerConfig | None = None, chunk_size: int | None = None,
               tensors: SubConstraintTensors | None = None) -> list[ProjectionCandidate]:
    """All projection candidates for one system, in combination order.

    With `chunk_size` set, the family is processed chunk by chunk (bounding
    peak memory); results are identical to the unchunked evaluation.
    """
    cfg = cfg or LayerConfig(mode=combos.mode)
    f = as_vector(f_theta)[None, :]
    w = as_vector(w_phi)[None, :]
    b = sys.b_vector[None, :]
    combo_list = tensors.combos if tensors is not None else list(combos)
    if chunk_size is None:
        chunks: Iterable[list[tuple[int, ...]]] = [combo_list]
        prebuilt = tensors
    else:
        chunks = (combo_list[i:i + chunk_size] for i in range(0, len(combo_list), chunk_size))
        prebuilt = None

    out: list[ProjectionCandidate] = []
    for chunk in chunks:
        ten = prebuilt if prebuilt is not None else SubConstraintTensors(sys.a_matrix, chunk, cfg.rank_tol)
        y = ten.candidate_outputs(f, w, b)[0]
        resid = sys.a_matrix @ y.T - sys.b_vector[:, None]   # (m, g)
        dist = _distances(y[None, :, :], f, cfg.p)[0]
        for j, gamma in enumerate(chunk):
            r = resid[:, j]
            out.append(ProjectionCandidate(
                gamma=tuple(gamma),
                y=y[j].copy(),
                residual=np.maximum(0.0, r),
                feasible=bool(r.max() <= cfg.feas_tol),
                distance=float(dist[j]),
            ))
    return out


def forward(sys: ConstraintSystem, combos: CombinationSet, f_theta, w_phi,
            cfg: LayerConfig | None = None, keep_candidates: bool = False,
            tensors: SubConstraintTensors | None = None) -> SelectionRecord:
    """Layer output for one sample.

    Emits f_theta unchanged when it already satisfies the system; otherwise
    the closest feasible candidate, with the null-space projector of the
    chosen combination recorded for the backward pass.
    """
    cfg = cfg or LayerConfig(mode=combos.mode)
    f = as_vector(f_theta)
    f_feasible = float(violation(sys, f).max(initial=0.0)) <= cfg.feas_tol
    if f_feasible and not keep_candidates:
        return SelectionRecord(branch=INTERIOR, output=f.copy())

    cand = candidates(sys, combos, f, w_phi, cfg, tensors=tensors)
    if f_feasible:
        return SelectionRecord(branch=INTERIOR, output=f.copy(), candidates=tuple(cand))

    best: ProjectionCandidate | None = None
    least: ProjectionCandidate | None = None
    for c in cand:
        if least is None or c.residual.max() < least.residual.max():
            least = c
        if c.feasible and (best is None or c.distance < best.distance):
            best = c
    if best is None:
        raise EmptyCandidateSetError(least)

    if best.gamma and len(best.gamma) > 0:
        a_gamma = sys.a_matrix[np.asarray(best.gamma, dtype=int) - 1, :]
        null_proj = np.eye(sys.n_out) - pinv(a_gamma, cfg.rank_tol) @ a_gamma
    else:
        null_proj = np.eye(sys.n_out)
    return SelectionRecord(
        branch=PROJECTED,
        output=best.y.copy(),
        gamma=best.gamma,
        null_projector=null_proj,
        distance=best.distance,
        candidates=tuple(cand) if keep_candidates else None,
    )


def backward(record: SelectionRecord, upstream_grad) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the layer output w.r.t. (f_theta, w_phi).

    The branch and chosen combination are treated as locally constant; the
    constraint data carry no parameter dependence.
    """
    u = as_vector(upstream_grad)
    if record.branch == INTERIOR:
        return u.copy(), np.zeros_like(u)
    g = record.null_projector.T @ u
    return g, g.copy()


def backward_batch(sel: BatchSelection, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched layer gradients: upstream is (S, n)."""
    projected = ~sel.interior
    g_proj = np.einsum("snm,sn->sm", sel.null_proj, upstream)
    grad_f = np.where(projected[:, None], g_proj, upstream)
    grad_w = np.where(projected[:, None], g_proj, 0.0)
    return grad_f, grad_w


def record_to_json(record: SelectionRecord) -> str:
    """Diagnostic dump: branch, chosen combination, candidate table."""
    doc = {
        "branch": record.branch,
        "output": record.output.tolist(),
        "gamma": list(record.gamma) if record.gamma else None,
        "distance": record.distance,
    }
    if record.candidates is not None:
        doc["candidates"] = [
            {
                "gamma": list(c.gamma),
                "distance": c.distance,
                "feasible": c.feasible,
                "max_residual": float(c.residual.max()),
            }
            for c in record.candidates
        ]
    return json.dumps(doc, indent=2)


def layer_tensors(provider, cfg: LayerConfig) -> SubConstraintTensors | None:
    """Factor the sub-constraint pseudoinverses once for a fixed-A provider."""
    a = provider.constant_a
    if a is None:
        return None
    combos = enumerate_combinations(provider.m, provider.n_out, cfg.mode)
    return SubConstraintTensors(a, combos, cfg.rank_tol)
