"""Multi-condition expression simulator with known latent structure.

Samples are ordered individual-major (sample ``i = m * n_conditions + c``).
Expression is ``Y = L C^T + E`` with ``E_g = (G_g kron 1_c) s_g + R_g`` and
``R_g ~ N(0, I kron M_g)``; the condition intercepts ``Z = 1 kron I_c`` are
rotated out before anything is returned.  Ground truth and the oracle rank,
factors and eigenvalues are recorded alongside the data.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .covmodel import CovarianceBasis, CovarianceModelError, orthonormal_complement


class SimulationError(CovarianceModelError):
    pass


@dataclass(frozen=True)
class SimConfig:
    p: int = 2000
    n_individuals: int = 20
    n_conditions: int = 3
    K: int = 10
    pi: tuple = (1.0,) * 8 + (0.19, 0.11)
    tau: tuple = (0.89, 0.83, 0.53, 0.39, 0.35, 0.33, 0.29, 0.24, 0.12, 0.12)
    eqtl_prob: float = 0.2
    eqtl_sd: float = 0.4
    maf_range: tuple = (0.05, 0.5)
    shared_snp_fraction: float = 0.25
    sd_ranges: tuple = ((0.5, 0.9), (0.8, 1.2), (1.1, 1.6))
    corr_ranges: tuple = ((-0.1, 0.3), (0.2, 0.5), (0.45, 0.8))
    seed: int = 0

    def __post_init__(self):
        for name in ("pi", "tau", "maf_range", "sd_ranges", "corr_ranges"):
            val = getattr(self, name)
            object.__setattr__(self, name, _as_tuple(val))
        c = self.n_conditions
        if self.p < 2 or self.n_individuals < 2 or c < 1:
            raise SimulationError("need p >= 2, n_individuals >= 2, n_conditions >= 1")
        if len(self.pi) != self.K or len(self.tau) != self.K:
            raise SimulationError("pi and tau must have length K")
        if any(not 0 < x <= 1 for x in self.pi):
            raise SimulationError("pi_k must lie in (0, 1]")
        if any(x <= 0 for x in self.tau):
            raise SimulationError("tau_k must be positive")
        if len(self.sd_ranges) != c or len(self.corr_ranges) != c * (c - 1) // 2:
            raise SimulationError("need one sd range per condition and one correlation range per pair")
        if not 0 <= self.eqtl_prob <= 1 or self.eqtl_sd < 0:
            raise SimulationError("invalid eQTL effect law")
        lo, hi = self.maf_range
        if not 0 < lo <= hi <= 0.5:
            raise SimulationError("maf_range must lie in (0, 0.5]")
        if not 0 <= self.shared_snp_fraction <= 1:
            raise SimulationError("shared_snp_fraction must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.n_individuals * self.n_conditions

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return _as_lists(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SimulationError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**d)


def _as_tuple(x):
    if isinstance(x, (list, tuple, np.ndarray)):
        return tuple(_as_tuple(v) for v in x)
    return float(x) if isinstance(x, (np.floating,)) else x


def _as_lists(x):
    if isinstance(x, dict):
        return {k: _as_lists(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_as_lists(v) for v in x]
    return x


def load_preset(name: str) -> SimConfig:
    """Bundled configurations: ``desk_scale`` or ``paper_scale``."""
    path = resources.files("falco") / "data" / f"{name}.json"
    if not path.is_file():
        raise SimulationError(f"no preset named {name!r}")
    return SimConfig.from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# design


def condition_basis(c: int) -> np.ndarray:
    """E_11..E_cc followed by E_ij + E_ji (i < j): a basis of c x c symmetric matrices."""
    mats = []
    for i in range(c):
        A = np.zeros((c, c))
        A[i, i] = 1.0
        mats.append(A)
    for i in range(c):
        for j in range(i + 1, c):
            A = np.zeros((c, c))
            A[i, j] = A[j, i] = 1.0
            mats.append(A)
    return np.stack(mats)


def sym_coefficients(M) -> np.ndarray:
    """Coordinates of a symmetric c x c matrix in :func:`condition_basis`."""
    M = np.asarray(M)
    c = M.shape[-1]
    iu = np.triu_indices(c, 1)
    diag = np.diagonal(M, axis1=-2, axis2=-1)
    return np.concatenate([diag, M[..., iu[0], iu[1]]], axis=-1)


def nuisance_design(n_individuals: int, c: int) -> np.ndarray:
    return np.kron(np.ones((n_individuals, 1)), np.eye(c))


def design_basis(n_individuals: int, c: int, c_bound: float = 1e3):
    """Rotated basis Q_Z^T (I kron A_j) Q_Z and the rotation Q_Z.

    Only the condition variances (diagonal coefficients) are constrained to
    be non-negative.
    """
    Q = orthonormal_complement(nuisance_design(n_individuals, c))
    A = condition_basis(c)
    B = np.stack([Q.T @ np.kron(np.eye(n_individuals), a) @ Q for a in A])
    B = 0.5 * (B + np.swapaxes(B, 1, 2))
    cons = np.zeros((c, len(A)))
    cons[np.arange(c), np.arange(c)] = 1.0
    return CovarianceBasis(B, cons, c_bound), Q


# ---------------------------------------------------------------------------
# metrics and oracle


def factor_correlation(a_hat, a) -> float:
    a_hat = np.asarray(a_hat, dtype=float).ravel()
    a = np.asarray(a, dtype=float).ravel()
    na, nb = np.linalg.norm(a_hat), np.linalg.norm(a)
    if na == 0 or nb == 0:
        raise ValueError("factor correlation is undefined for a zero vector")
    return float(min(1.0, abs(a_hat @ a) / (na * nb)))


def _orth(A, label):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[-1] <= 1e-10 * s[0]:
        raise ValueError(f"{label} is rank deficient")
    return U


def subspace_correlation(A_hat, A) -> float:
    """Cosine of the largest principal angle between im(A_hat) and im(A)."""
    U1, U2 = _orth(A_hat, "A_hat"), _orth(A, "A")
    s = np.linalg.svd(U1.T @ U2, compute_uv=False)
    return float(min(1.0, s[min(U1.shape[1], U2.shape[1]) - 1]))


@dataclass(frozen=True, eq=False)
class Oracle:
    lambda_oracle: np.ndarray
    C_oracle: np.ndarray
    L_oracle: np.ndarray


def oracle_quantities(L, C, V_bar, s: int) -> Oracle:
    """Best rank-s approximation of L C^T in the V_bar^{-1/2}-weighted norm.

    Returned in normalized form: n^-1 C^T C = I and L^T L diagonal,
    non-increasing; ``lambda_oracle`` are the eigenvalues of p^-1 L C^T C L^T.
    """
    L = np.asarray(L, dtype=float)
    C = np.asarray(C, dtype=float)
    p, n = L.shape[0], C.shape[0]
    if s == 0:
        return Oracle(np.zeros(0), np.zeros((n, 0)), np.zeros((p, 0)))
    w, U = np.linalg.eigh(V_bar)
    Vh = (U * np.sqrt(w)) @ U.T
    Vih = (U / np.sqrt(w)) @ U.T
    # SVD of L C^T V^-1/2 through the small K x n factor
    Ql, Rl = np.linalg.qr(L)
    Us, sig, Wt = np.linalg.svd(Rl @ C.T @ Vih, full_matrices=False)
    Us, sig, Wt = Us[:, :s], sig[:s], Wt[:s]
    T = Vh @ Wt.T  # n x s, image of the oracle factors
    G = T.T @ T / n
    gw, gU = np.linalg.eigh(G)
    Gh = (gU * np.sqrt(gw)) @ gU.T
    Gih = (gU / np.sqrt(gw)) @ gU.T
    lam, O = np.linalg.eigh(Gh @ np.diag(sig**2) @ Gh)
    lam, O = lam[::-1], O[:, ::-1]
    C_o = T @ Gih @ O
    L_o = (Ql @ Us) * sig @ Gh @ O
    idx = np.argmax(np.abs(C_o), axis=0)
    sign = np.sign(C_o[idx, np.arange(s)])
    sign[sign == 0] = 1.0
    return Oracle(lam * n / p, C_o * sign, L_o * sign)


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True, eq=False)
class SimDataset:
    """Simulated data in rotated coordinates (n = individuals * conditions - conditions)."""

    config: SimConfig
    Y: np.ndarray
    L_true: np.ndarray
    C_true: np.ndarray
    basis: CovarianceBasis
    Q_Z: np.ndarray
    v_true: np.ndarray  # p x b coefficients of V_g (R_g plus genotype variance)
    v_resid: np.ndarray  # p x b coefficients of V(R_g)
    s_true: np.ndarray
    genotypes: np.ndarray  # p x n_individuals
    snp_id: np.ndarray
    maf: np.ndarray
    V_bar: np.ndarray
    delta2: float
    gamma: np.ndarray
    K_oracle: int
    oracle: Oracle = field(repr=False)

    @property
    def p(self) -> int:
        return self.Y.shape[0]

    @property
    def n(self) -> int:
        return self.Y.shape[1]

    def X(self, g) -> np.ndarray:
        """Rotated eQTL design of gene g (n x 1)."""
        x = np.repeat(self.genotypes[g].astype(float), self.config.n_conditions)
        return (self.Q_Z.T @ x)[:, None]

    @property
    def lambda_oracle(self) -> np.ndarray:
        return self.oracle.lambda_oracle

    @property
    def C_oracle(self) -> np.ndarray:
        return self.oracle.C_oracle


def _sample_condition_cov(rng, sd_ranges, corr_ranges, max_tries=1000):
    c = len(sd_ranges)
    lo = np.array([r[0] for r in sd_ranges])
    hi = np.array([r[1] for r in sd_ranges])
    clo = np.array([r[0] for r in corr_ranges])
    chi = np.array([r[1] for r in corr_ranges])
    iu = np.triu_indices(c, 1)
    sd = rng.uniform(lo, hi)
    for _ in range(max_tries):
        R = np.eye(c)
        R[iu] = rng.uniform(clo, chi)
        R[(iu[1], iu[0])] = R[iu]
        if np.linalg.eigvalsh(R)[0] > 1e-6:
            return sd[:, None] * R * sd[None, :]
    raise SimulationError("correlation ranges admit no positive definite matrix")


def _snp_assignment(rng, p, fraction):
    """SNP index per gene: a random ``fraction`` of genes is paired to share one SNP."""
    n_shared = int(round(fraction * p / 2)) * 2
    order = rng.permutation(p)
    snp = np.empty(p, dtype=int)
    shared = order[:n_shared]
    snp[shared] = np.arange(n_shared) // 2
    snp[order[n_shared:]] = n_shared // 2 + np.arange(p - n_shared)
    return snp


def simulate(config: SimConfig) -> SimDataset:
    rng = np.random.default_rng(config.seed)
    p, m, c, K = config.p, config.n_individuals, config.n_conditions, config.K
    n = m * c
    pi = np.asarray(config.pi)
    tau = np.asarray(config.tau)

    L = np.where(rng.random((p, K)) < pi, rng.standard_normal((p, K)) * tau, 0.0)
    C = rng.standard_normal((n, K))

    M = np.stack([_sample_condition_cov(rng, config.sd_ranges, config.corr_ranges)
                  for _ in range(p)])
    basis, Q = design_basis(m, c)
    M_bar = M.mean(axis=0)
    Vm = Q.T @ np.kron(np.eye(m), M_bar) @ Q
    sign, logdet = np.linalg.slogdet(Vm)
    if sign <= 0:
        raise SimulationError("average condition covariance is degenerate")
    M *= np.exp(-logdet / Vm.shape[0])

    snp = _snp_assignment(rng, p, config.shared_snp_fraction)
    n_snp = int(snp.max()) + 1
    maf_snp = rng.uniform(*config.maf_range, size=n_snp)
    geno_snp = rng.binomial(2, maf_snp[:, None], size=(n_snp, m))
    # monomorphic SNPs carry no information and would be filtered in practice
    for _ in range(1000):
        mono = np.flatnonzero(np.ptp(geno_snp, axis=1) == 0)
        if mono.size == 0:
            break
        geno_snp[mono] = rng.binomial(2, maf_snp[mono, None], size=(mono.size, m))
    G = geno_snp[snp]
    maf = maf_snp[snp]
    s = np.where(rng.random(p) < config.eqtl_prob, rng.standard_normal(p) * config.eqtl_sd, 0.0)

    chol = np.linalg.cholesky(M)  # p x c x c
    z = rng.standard_normal((p, m, c))
    R = np.einsum("gij,gmj->gmi", chol, z).reshape(p, n)
    E = np.repeat(G.astype(float), c, axis=1) * s[:, None] + R
    Y = (L @ C.T + E) @ Q
    C_rot = Q.T @ C

    v_resid = sym_coefficients(M)
    v_true = v_resid + (s**2 * 2 * maf * (1 - maf))[:, None]
    v_bar = v_true.mean(axis=0)
    V_bar = np.tensordot(v_bar, basis.bases, axes=1)
    nr = V_bar.shape[0]
    sign, logdet = np.linalg.slogdet(V_bar)
    delta2 = float(np.exp(logdet / nr))
    psi = delta2 * np.trace(np.linalg.inv(V_bar)) / nr
    gamma = np.sort(np.linalg.eigvalsh(nr / p * psi * (L.T @ L)))[::-1]
    K_o = int(np.sum(gamma > delta2))
    oracle = oracle_quantities(L, C_rot, V_bar, K_o)
    return SimDataset(config=config, Y=Y, L_true=L, C_true=C_rot, basis=basis, Q_Z=Q,
                      v_true=v_true, v_resid=v_resid, s_true=s, genotypes=G, snp_id=snp,
                      maf=maf, V_bar=V_bar, delta2=delta2, gamma=gamma, K_oracle=K_o,
                      oracle=oracle)


def replicate_seeds(master_seed: int, n_rep: int) -> list:
    """Per-replicate seeds at fixed offsets from the master seed."""
    return [int(master_seed) + i for i in range(n_rep)]
