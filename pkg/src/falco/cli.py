"""Command-line front end.

Every subcommand takes its parameters from flags, from a JSON run config
(``--config``), or both; explicit flags win.  A run config looks like::

    {"schema_version": 1, "command": "fit", "Y": "data/Y.tsv", "K": 8}

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .cbcv import LeverageError, cbcv_select
from .covmodel import CovarianceModelError, SingularReducedCovariance, assemble_V
from .denoise import Denoiser, SharedShapeDenoiser, bh_qvalues
from .factor import GATE_ALPHA, falco_fit, pca_fit
from .reml import CollinearDesignError, RemlError, RemlOptions
from .simgen import SimConfig, SimulationError, factor_correlation, load_preset, simulate, \
    subspace_correlation

log = logging.getLogger("falco")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


class NumericFailure(Exception):
    pass


_REML_KEYS = {"ftol": 1e-9, "gtol": 1e-6, "max_iter": 500}
_FIT_KEYS = {"Y": None, "basis": None, "K": None, "select_k": False, "final_fit": True,
             "F": 2, "eta": 0.5, "K_max": None, "seed": None, "alpha": GATE_ALPHA,
             "out": None, **_REML_KEYS}

# parameter names and defaults per command ("threads" is accepted everywhere)
DEFAULTS = {
    "simulate": {"preset": "desk_scale", "simulation": {}, "seed": None, "out": None},
    "fit": dict(_FIT_KEYS),
    "select-k": {**_FIT_KEYS, "select_k": True, "final_fit": False},
    "denoise": {"fit": None, "genotypes": None, "map": None, "Y": None, "rotation": None,
                "repeat": 1, "q": 0.05, "baseline": False, "out": None, **_REML_KEYS},
    "metrics": {"fit": None, "truth": None, "Y": None, "pca": False, "out": None},
}
REQUIRED = {
    "simulate": ("seed", "out"),
    "fit": ("Y", "basis", "out"),
    "select-k": ("Y", "basis", "out", "seed"),
    "denoise": ("fit", "genotypes", "map", "out"),
    "metrics": ("fit", "truth", "out"),
}


def resolve_config(command: str, flags: dict, config_path=None) -> dict:
    """Merge defaults, the run-config file and explicit flags; validate."""
    cfg = dict(DEFAULTS[command])
    cfg["threads"] = None
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {config_path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        version = raw.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"run config needs schema_version={SCHEMA_VERSION}, got {version!r}")
        cmd = raw.pop("command", command)
        if cmd != command:
            raise ConfigError(f"run config is for {cmd!r}, not {command!r}")
        unknown = set(raw) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")
        cfg.update(raw)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    if command == "fit" and cfg["select_k"] and cfg["seed"] is None:
        raise ConfigError("--seed is required with --select-k")
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required setting(s): {', '.join(missing)}")
    if command in ("fit", "select-k"):
        if not cfg["select_k"] and cfg["K"] is None:
            raise ConfigError("fit needs --K or --select-k")
        if not cfg["final_fit"] and not cfg["select_k"]:
            raise ConfigError("--no-final-fit only makes sense with --select-k")
    if int(cfg["threads"]) < 1:
        raise ConfigError("--threads must be positive")
    return cfg


def _options(cfg) -> RemlOptions:
    return RemlOptions(ftol=float(cfg["ftol"]), gtol=float(cfg["gtol"]),
                       max_iter=int(cfg["max_iter"]))


def _read_matrix(path, what):
    if not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return io.read_matrix(path)


def _factor_ids(k):
    return [f"f{r + 1}" for r in range(k)]


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg) -> Path:
    try:
        base = load_preset(cfg["preset"]) if cfg["preset"] else SimConfig()
        sim_cfg = SimConfig.from_dict({**base.to_dict(), **cfg["simulation"], "seed": int(cfg["seed"])})
    except (SimulationError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    data = simulate(sim_cfg)
    out = io.ensure_dir(cfg["out"])
    p, n = data.Y.shape
    genes = [f"g{g}" for g in range(p)]
    samples = [f"s{i}" for i in range(n)]
    io.write_matrix(out / "Y.tsv", data.Y, genes, samples)
    io.write_matrix(out / "C.tsv", data.C_true, samples, _factor_ids(sim_cfg.K))
    io.write_matrix(out / "L.tsv", data.L_true, genes, _factor_ids(sim_cfg.K))
    io.write_matrix(out / "C_oracle.tsv", data.C_oracle, samples, _factor_ids(data.K_oracle))
    io.write_matrix(out / "Q_Z.tsv", data.Q_Z, [f"o{i}" for i in range(data.Q_Z.shape[0])], samples)
    io.write_table(out / "s.tsv", ["gene", "s"], [(g, float(v)) for g, v in zip(genes, data.s_true)])
    # one row per distinct SNP, columns are individuals
    n_snp = int(data.snp_id.max()) + 1
    first = np.full(n_snp, -1)
    for g in range(p - 1, -1, -1):
        first[data.snp_id[g]] = g
    io.write_matrix(out / "genotypes.tsv", data.genotypes[first].astype(float),
                    [f"snp{j}" for j in range(n_snp)],
                    [f"ind{m}" for m in range(sim_cfg.n_individuals)])
    io.write_table(out / "gene_snp.tsv", ["gene", "snp"],
                   [(genes[g], f"snp{data.snp_id[g]}") for g in range(p)])
    io.write_basis(out / "basis.json", data.basis)
    io.write_json(out / "truth.json", {
        "K": sim_cfg.K,
        "K_oracle": data.K_oracle,
        "delta2": data.delta2,
        "gamma": data.gamma.tolist(),
        "lambda_oracle": data.lambda_oracle.tolist(),
        "v_bar": data.v_true.mean(axis=0).tolist(),
        "n_conditions": sim_cfg.n_conditions,
    })
    io.write_manifest(out, "simulate", cfg, {"simulation": sim_cfg.to_dict()})
    return out


def _fit_outputs(out, fit, sample_ids, gene_ids):
    k = fit.K
    fids = _factor_ids(k)
    io.write_matrix(out / "C_hat.tsv", fit.C_hat, sample_ids, fids)
    io.write_matrix(out / "L_hat.tsv", fit.L_hat, gene_ids, fids)
    io.write_table(out / "lambda.tsv", ["factor", "lambda_hat", "lambda_naive"],
                   [(f, float(a), float(b)) for f, a, b in zip(fids, fit.lambda_hat, fit.lambda_naive)])
    V = fit.V_hat
    io.write_json(out / "vbar.json", {
        "K": k,
        "theta_hat": fit.theta_hat.tolist(),
        "V_hat": V.tolist(),
        "converged": fit.converged,
        "frozen_at": fit.frozen_at,
    })


def cmd_fit(cfg, command="fit") -> Path:
    Y, gene_ids, sample_ids = _read_matrix(cfg["Y"], "Y")
    try:
        basis = io.read_basis(cfg["basis"])
    except OSError as exc:
        raise ConfigError(f"cannot read basis: {exc}") from None
    if basis.n != Y.shape[1]:
        raise ConfigError(f"Y has {Y.shape[1]} samples, basis is {basis.n} x {basis.n}")
    options = _options(cfg)
    alpha = float(cfg["alpha"])
    out = io.ensure_dir(cfg["out"])
    trace = {"select_k": None, "steps": []}
    K = None if cfg["K"] is None else int(cfg["K"])
    if cfg["select_k"]:
        res = cbcv_select(Y, basis, F=int(cfg["F"]), eta=float(cfg["eta"]), seed=int(cfg["seed"]),
                          K_max=cfg["K_max"], alpha=alpha, options=options,
                          n_jobs=int(cfg["threads"]))
        K = res.K_hat
        cols = ["k"] + [f"fold{f}" for f in range(1, res.F + 1)] + ["total"]
        io.write_table(out / "cbcv.tsv", cols,
                       [[k] + [float(v) for v in res.losses[:, k]] + [float(res.total[k])]
                        for k in range(res.K_max + 1)])
        trace["select_k"] = {"K_hat": K, "K_max": res.K_max, "F": res.F, "eta": res.eta,
                             "seed": int(cfg["seed"]), "losses": res.losses.tolist(),
                             "total": res.total.tolist()}
    if cfg["final_fit"]:
        fit = falco_fit(Y, basis, K, alpha=alpha, options=options)
        _fit_outputs(out, fit, sample_ids, gene_ids)
        io.write_basis(out / "basis.json", basis)
        trace["steps"] = [{
            "k": s.k,
            "gated": s.gated,
            "frozen": s.frozen,
            "reml_updates": len(s.solutions),
            "converged": all(sol.converged for sol in s.solutions),
            "theta": s.theta.tolist(),
            "lambda_hat": s.lambda_hat.tolist(),
            "lambda_naive": s.lambda_naive.tolist(),
        } for s in fit.steps]
        trace["frozen_at"] = fit.frozen_at
    trace["K"] = K
    io.write_json(out / "trace.json", trace)
    io.write_manifest(out, command, cfg)
    return out


def _load_fit_dir(path):
    d = Path(path)
    if not (d / "C_hat.tsv").is_file() or not (d / "manifest.json").is_file():
        raise ConfigError(f"{d} is not a fit directory (C_hat.tsv / manifest.json missing)")
    manifest = json.loads((d / "manifest.json").read_text())
    C_hat, sample_ids, _ = io.read_matrix(d / "C_hat.tsv")
    return d, manifest, C_hat, sample_ids


def _sample_design(geno_row, n, repeat, Q):
    x = np.repeat(geno_row, repeat)
    if Q is not None:
        if Q.shape[0] != x.size:
            raise ConfigError(f"rotation has {Q.shape[0]} rows, genotype expands to {x.size} samples")
        x = Q.T @ x
    if x.size != n:
        raise ConfigError(f"genotype expands to {x.size} samples, Y has {n}")
    return x


def cmd_denoise(cfg) -> Path:
    fit_dir, manifest, C_hat, sample_ids = _load_fit_dir(cfg["fit"])
    y_path = cfg["Y"] or manifest.get("config", {}).get("Y")
    if y_path is None:
        raise ConfigError("cannot locate Y; pass --Y")
    Y, gene_ids, y_samples = _read_matrix(y_path, "Y")
    basis = io.read_basis(fit_dir / "basis.json")
    if Y.shape[1] != basis.n or C_hat.shape[0] != basis.n:
        raise ConfigError("Y, C_hat and basis disagree on the number of samples")
    G, snp_ids, _ = _read_matrix(cfg["genotypes"], "genotype")
    if not Path(cfg["map"]).is_file():
        raise ConfigError(f"gene-SNP map not found: {cfg['map']}")
    cols, rows = io.read_table(cfg["map"])
    if cols[:2] != ["gene", "snp"]:
        raise ConfigError("gene-SNP map needs columns gene, snp")
    gene_index = {g: i for i, g in enumerate(gene_ids)}
    snp_index = {s: j for j, s in enumerate(snp_ids)}
    bad = [r[0] for r in rows if r[0] not in gene_index] + \
        [r[1] for r in rows if r[1] not in snp_index]
    if bad:
        raise ConfigError(f"{len(bad)} unmatched id(s) in gene-SNP map, first: {', '.join(bad[:10])}")
    Q = None
    if cfg["rotation"]:
        Q, _, _ = _read_matrix(cfg["rotation"], "rotation")
    # genes in first-appearance order; several SNPs per gene give a multi-column design
    order, snps = [], {}
    for g, s in ((r[0], r[1]) for r in rows):
        if g not in snps:
            order.append(g)
            snps[g] = []
        snps[g].append(s)
    n = basis.n
    if cfg["baseline"]:
        # PCA factors at the fitted rank with one covariance shape for all genes
        den = SharedShapeDenoiser(Y, pca_fit(Y, C_hat.shape[1]).C_hat, basis, _options(cfg))
    else:
        den = Denoiser(C_hat, basis, _options(cfg))
    tests = []
    for g in order:
        X = np.column_stack([_sample_design(G[snp_index[s]], n, int(cfg["repeat"]), Q)
                             for s in snps[g]])
        tests.append(den.test(Y[gene_index[g]], X, g))
    q = bh_qvalues([t.p_value for t in tests])
    out = io.ensure_dir(cfg["out"])
    io.write_table(out / "results.tsv", ["gene", "s_hat", "wald", "p", "q_value", "flags"],
                   [(t.gene, ",".join(repr(float(v)) for v in t.s_hat), t.wald, t.p_value,
                     float(qv), t.flags) for t, qv in zip(tests, q)])
    n_rej = int(np.sum(q <= float(cfg["q"]))) if len(tests) else 0
    io.write_manifest(out, "denoise", cfg, {"rejected": n_rej, "tested": len(tests)})
    return out


_METRIC_COLS = ["row", "lambda_hat", "lambda_naive", "lambda_oracle", "ratio", "ratio_naive",
                "factor_corr", "pca_factor_corr", "subspace_corr", "pca_subspace_corr",
                "k_fit", "k_oracle"]


def cmd_metrics(cfg) -> Path:
    fit_dir, manifest, C_hat, _ = _load_fit_dir(cfg["fit"])
    truth_dir = Path(cfg["truth"])
    if not (truth_dir / "truth.json").is_file() or not (truth_dir / "C_oracle.tsv").is_file():
        raise ConfigError(f"{truth_dir} has no truth.json / C_oracle.tsv")
    truth = json.loads((truth_dir / "truth.json").read_text())
    C_o, _, _ = io.read_matrix(truth_dir / "C_oracle.tsv")
    lam_o = np.asarray(truth["lambda_oracle"], dtype=float)
    _, lrows = io.read_table(fit_dir / "lambda.tsv")
    lam = np.array([float(r[1]) for r in lrows])
    lam_naive = np.array([float(r[2]) for r in lrows])
    if C_hat.shape[0] != C_o.shape[0]:
        raise ConfigError("fit and truth disagree on the number of samples")
    k_fit, k_o = C_hat.shape[1], C_o.shape[1]
    r = min(k_fit, k_o)
    if k_fit != k_o:
        log.warning("fitted rank %d differs from oracle rank %d; comparing the first %d", k_fit, k_o, r)
    C_pca = None
    if cfg["pca"]:
        y_path = cfg["Y"] or str(truth_dir / "Y.tsv")
        Y, _, _ = _read_matrix(y_path, "Y")
        C_pca = pca_fit(Y, k_fit).C_hat
    nan = float("nan")
    rows = []
    for j in range(r):
        rows.append([f"f{j + 1}", float(lam[j]), float(lam_naive[j]), float(lam_o[j]),
                     float(lam[j] / lam_o[j]), float(lam_naive[j] / lam_o[j]),
                     factor_correlation(C_hat[:, j], C_o[:, j]),
                     factor_correlation(C_pca[:, j], C_o[:, j]) if C_pca is not None else nan,
                     nan, nan, "", ""])
    fc = [row[6] for row in rows]
    pc = [row[7] for row in rows]
    summary = ["summary", nan, nan, nan, nan, nan,
               float(np.mean(fc)) if fc else nan,
               float(np.mean(pc)) if pc and C_pca is not None else nan,
               subspace_correlation(C_hat[:, :r], C_o[:, :r]) if r else nan,
               subspace_correlation(C_pca[:, :r], C_o[:, :r]) if r and C_pca is not None else nan,
               k_fit, k_o]
    out = io.ensure_dir(cfg["out"])
    io.write_table(out / "metrics.tsv", _METRIC_COLS, rows + [summary])
    io.write_manifest(out, "metrics", cfg)
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select-k": lambda cfg: cmd_fit(cfg, "select-k"),
    "denoise": cmd_denoise,
    "metrics": cmd_metrics,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_common(sp):
    sp.add_argument("--config", help="JSON run config")
    sp.add_argument("--threads", type=int, help="worker threads (default: logical cores)")
    sp.add_argument("--out", help="output directory")


def _add_reml(sp):
    sp.add_argument("--ftol", type=float)
    sp.add_argument("--gtol", type=float)
    sp.add_argument("--max-iter", dest="max_iter", type=int)


def _add_fit(sp, select_only=False):
    sp.add_argument("--Y", help="expression matrix TSV (genes x samples)")
    sp.add_argument("--basis", help="covariance basis JSON")
    sp.add_argument("--F", type=int, help="number of row folds")
    sp.add_argument("--eta", type=float)
    sp.add_argument("--K-max", dest="K_max", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--alpha", type=float, help="conditioning threshold for the variance update")
    if not select_only:
        sp.add_argument("--K", type=int)
        sp.add_argument("--select-k", dest="select_k", action="store_const", const=True)
        sp.add_argument("--no-final-fit", dest="final_fit", action="store_const", const=False)
    _add_reml(sp)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="falco", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("simulate", help="simulate a dataset with known truth")
    _add_common(sp)
    sp.add_argument("--preset", help="desk_scale or paper_scale")
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("fit", help="estimate factors and variance multipliers")
    _add_common(sp)
    _add_fit(sp)

    sp = sub.add_parser("select-k", help="choose the number of factors only")
    _add_common(sp)
    _add_fit(sp, select_only=True)

    sp = sub.add_parser("denoise", help="per-gene tests with estimated factors removed")
    _add_common(sp)
    sp.add_argument("--fit", help="fit directory")
    sp.add_argument("--genotypes", help="genotype matrix TSV (SNPs x individuals)")
    sp.add_argument("--map", help="gene-SNP map TSV with columns gene, snp")
    sp.add_argument("--Y", help="expression TSV (default: the one used by the fit)")
    sp.add_argument("--rotation", help="sample rotation TSV applied after expansion")
    sp.add_argument("--repeat", type=int, help="samples per individual (default 1)")
    sp.add_argument("--q", type=float, help="BH level reported in the manifest")
    sp.add_argument("--baseline", action="store_const", const=True,
                    help="use PCA factors and a shared covariance shape instead")
    _add_reml(sp)

    sp = sub.add_parser("metrics", help="compare a fit with simulated truth")
    _add_common(sp)
    sp.add_argument("--fit", help="fit directory")
    sp.add_argument("--truth", help="simulated dataset directory")
    sp.add_argument("--Y", help="expression TSV for the PCA baseline")
    sp.add_argument("--pca", action="store_const", const=True, help="add PCA baseline columns")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve_config(args.command, flags, args.config)
        COMMANDS[args.command](cfg)
    except (SingularReducedCovariance, LeverageError, RemlError, NumericFailure,
            np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"falco {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, io.FormatError, CollinearDesignError, CovarianceModelError,
            OSError, ValueError, KeyError) as exc:
        print(f"falco {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
