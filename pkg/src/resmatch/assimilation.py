"""Ensemble smoother with multiple data assimilation.

The update follows the standard multiple-data-assimilation form: every
member is shifted by the cross-covariance gain against an inflated
observation-error covariance,

    m_j <- m_j + C_MD (C_DD + alpha_i C_D)^(-1) (d_obs_j - d_j),

with the constant inflation schedule alpha_i = N_a (so sum 1/alpha = 1) and
per-member observation perturbations d_obs_j = d_obs + sqrt(alpha_i) *
C_D^(1/2) eps_j.  The symmetric solve uses an eigendecomposition with a
truncation floor, which stays well-behaved at small ensemble sizes.

``run_latent_assimilation`` wires the loop against any decode/forward pair:
a generative model's decoder, or the identity parameterization that updates
log-permeability directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ensemble import Ensemble
from .errors import ConfigError, NumericalError


def inflation_schedule(n_a: int) -> list[float]:
    """Constant schedule alpha_i = N_a; the reciprocals sum to one."""
    if n_a < 1:
        raise ConfigError("number of assimilations must be >= 1")
    return [float(n_a)] * n_a


@dataclass(frozen=True)
class MDAConfig:
    n_a: int
    alphas: tuple[float, ...] | None = None
    localization: str = "none"

    def __post_init__(self):
        if self.localization != "none":
            raise ConfigError("localization is reserved; only 'none' is supported")
        alphas = self.alphas if self.alphas is not None else tuple(inflation_schedule(self.n_a))
        object.__setattr__(self, "alphas", tuple(float(a) for a in alphas))
        if len(self.alphas) != self.n_a:
            raise ConfigError(f"{len(self.alphas)} alphas for N_a={self.n_a}")
        if any(a <= 0 for a in self.alphas):
            raise ConfigError("all inflation factors must be positive")
        if self.n_a > 0 and abs(sum(1.0 / a for a in self.alphas) - 1.0) > 1e-10:
            raise ConfigError("inflation factors must satisfy sum(1/alpha) == 1")


@dataclass
class CovPair:
    c_md: np.ndarray     # (N_m, N_d)
    c_dd: np.ndarray     # (N_d, N_d)


def ensemble_covariances(params: np.ndarray | Ensemble, preds: np.ndarray) -> CovPair:
    """Sample covariances about the ensemble means, 1/(N_e - 1) normalized."""
    m = params.members if isinstance(params, Ensemble) else np.asarray(params, dtype=np.float64)
    d = np.asarray(preds, dtype=np.float64)
    if m.ndim != 2 or d.ndim != 2 or m.shape[0] != d.shape[0]:
        raise ConfigError(f"covariance inputs must share N_e: params {m.shape}, preds {d.shape}")
    n_e = m.shape[0]
    if n_e < 2:
        raise ConfigError("covariances need at least 2 members")
    am = m - m.mean(axis=0)
    ad = d - d.mean(axis=0)
    c_md = am.T @ ad / (n_e - 1)
    c_dd = ad.T @ ad / (n_e - 1)
    c_dd = 0.5 * (c_dd + c_dd.T)
    return CovPair(c_md, c_dd)


def _cov_as_matrix(c_d: np.ndarray, n_d: int) -> np.ndarray:
    c_d = np.asarray(c_d, dtype=np.float64)
    if c_d.ndim == 1:
        if c_d.shape != (n_d,):
            raise ConfigError(f"diagonal C_D length {c_d.shape} != N_d {n_d}")
        return np.diag(c_d)
    if c_d.shape != (n_d, n_d):
        raise ConfigError(f"C_D shape {c_d.shape} != ({n_d},{n_d})")
    return c_d


def _cov_sqrt(c_d: np.ndarray) -> np.ndarray:
    if c_d.ndim == 1:
        if np.any(c_d <= 0):
            raise NumericalError("C_D is singular: zero variance channels")
        return np.diag(np.sqrt(c_d))
    vals, vecs = np.linalg.eigh(0.5 * (c_d + c_d.T))
    if vals.min() <= 0:
        raise NumericalError("C_D is singular or indefinite")
    return vecs @ np.diag(np.sqrt(vals)) @ vecs.T


def perturb_observations(d_obs: np.ndarray, c_d: np.ndarray, alpha: float, n_e: int,
                         seed: int) -> np.ndarray:
    """Per-member observations d_obs + sqrt(alpha) C_D^(1/2) eps, eps ~ N(0,I)."""
    d_obs = np.asarray(d_obs, dtype=np.float64)
    root = _cov_sqrt(np.asarray(c_d, dtype=np.float64))
    rng = np.random.default_rng(seed)
    eps = rng.normal(size=(n_e, d_obs.size))
    return d_obs[None, :] + np.sqrt(alpha) * eps @ root.T


def _truncated_solve(mat: np.ndarray, rhs: np.ndarray, floor_ratio: float = 1e-8) -> np.ndarray:
    """Pseudo-inverse solve of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues below floor_ratio * lambda_max are truncated (their inverse set
    to zero), which keeps rank-deficient C_DD from small ensembles harmless.
    """
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    lam_max = vals.max(initial=0.0)
    if lam_max <= 0:
        raise NumericalError("analysis matrix has no positive eigenvalues")
    inv = np.where(vals > floor_ratio * lam_max, 1.0 / np.where(vals > 0, vals, 1.0), 0.0)
    return vecs @ (inv[:, None] * (vecs.T @ rhs))


def analysis_step(params: Ensemble, preds: np.ndarray, d_obs: np.ndarray, c_d: np.ndarray,
                  alpha: float, seed: int, perturb: bool = True) -> Ensemble:
    """One smoother update of the whole ensemble.

    ``perturb=False`` uses the unperturbed observation vector for every member
    (useful for deterministic hand checks).
    """
    preds = np.asarray(preds, dtype=np.float64)
    d_obs = np.asarray(d_obs, dtype=np.float64)
    n_e = params.n_members
    n_d = d_obs.size
    if preds.shape != (n_e, n_d):
        raise ConfigError(f"predictions shape {preds.shape} != ({n_e},{n_d})")
    cov = ensemble_covariances(params, preds)
    c_d_mat = _cov_as_matrix(c_d, n_d)
    if perturb:
        d_pert = perturb_observations(d_obs, c_d, alpha, n_e, seed)
    else:
        d_pert = np.tile(d_obs, (n_e, 1))
    innovations = d_pert - preds                      # (N_e, N_d)
    gain_applied = _truncated_solve(cov.c_dd + alpha * c_d_mat, innovations.T)
    update = cov.c_md @ gain_applied                  # (N_m, N_e)
    if not np.isfinite(update).all():
        raise NumericalError("non-finite ensemble update")
    return Ensemble(params.members + update.T, params.space, params.iteration + 1)


# -- latent-space workflow -------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    mean_dm: float
    rmse_mean: float | None
    spread: float
    balanced_accuracy: float | None = None

    def as_row(self) -> dict:
        return {
            "iteration": self.iteration,
            "mean_dm": self.mean_dm,
            "rmse_mean": "" if self.rmse_mean is None else self.rmse_mean,
            "spread": self.spread,
            "balanced_accuracy": "" if self.balanced_accuracy is None else self.balanced_accuracy,
        }


@dataclass
class AssimilationResult:
    posterior: Ensemble                    # latent (or model) space
    posterior_fields: np.ndarray           # (N_e, ny, nx) decoded model space
    prior_fields: np.ndarray
    records: list[IterationRecord]
    predictions: np.ndarray                # (N_e, N_d) final forward responses
    prior_predictions: np.ndarray


def run_latent_assimilation(
    latents: Ensemble,
    decode_fn: Callable[[np.ndarray], np.ndarray],
    forward_fn: Callable[[np.ndarray, int], np.ndarray],
    d_obs: np.ndarray,
    c_d: np.ndarray,
    config: MDAConfig,
    seed: int,
    m_true: np.ndarray | None = None,
    accuracy_fn: Callable[[np.ndarray], float] | None = None,
) -> AssimilationResult:
    """Iterate decode -> simulate -> update in the given parameter space.

    ``decode_fn`` maps a latent matrix (N_e, N_z) to model fields (N_e, ny, nx)
    in physical units; ``forward_fn`` maps one field to its data vector (the
    member index is passed through for error reporting).  A simulator failure
    aborts the run, naming the member.
    """
    from .metrics import data_mismatch, rmse_ensemble, spread as spread_metric

    ens = latents.copy()
    records: list[IterationRecord] = []

    def forward_all(fields: np.ndarray) -> np.ndarray:
        preds = None
        for j in range(fields.shape[0]):
            try:
                d = forward_fn(fields[j], j)
            except Exception as err:
                raise NumericalError(f"forward model failed on member {j}: {err}") from err
            if preds is None:
                preds = np.empty((fields.shape[0], d.size))
            preds[j] = d
        return preds

    def record(it: int, fields: np.ndarray, preds: np.ndarray) -> None:
        flat = fields.reshape(fields.shape[0], -1)
        dm = float(np.mean([data_mismatch(preds[j], d_obs, c_d) for j in range(preds.shape[0])]))
        sp = spread_metric(flat)
        rmse = None
        if m_true is not None:
            rmse = float(np.mean(rmse_ensemble(flat, m_true.reshape(-1))))
        acc = accuracy_fn(fields) if accuracy_fn is not None else None
        records.append(IterationRecord(it, dm, rmse, sp, acc))

    prior_fields = decode_fn(ens.members)
    prior_preds = forward_all(prior_fields)
    record(0, prior_fields, prior_preds)

    fields, preds = prior_fields, prior_preds
    for i, alpha in enumerate(config.alphas):
        ens = analysis_step(ens, preds, d_obs, c_d, alpha, seed=seed + 7919 * i)
        fields = decode_fn(ens.members)
        preds = forward_all(fields)
        record(i + 1, fields, preds)

    return AssimilationResult(
        posterior=ens,
        posterior_fields=fields,
        prior_fields=prior_fields,
        records=records,
        predictions=preds,
        prior_predictions=prior_preds,
    )


def records_to_csv(records: Sequence[IterationRecord], path) -> None:
    cols = ["iteration", "mean_dm", "rmse_mean", "spread", "balanced_accuracy"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in records:
            row = r.as_row()
            f.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v) -> str:
    if v == "":
        return ""
    if isinstance(v, int):
        return str(v)
    return f"{v:.10g}"
