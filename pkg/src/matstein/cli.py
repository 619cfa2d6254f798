"""Experiment driver: ``matstein <subcommand> --config <path> [--threads N] [--output <path>]``.

A config is a JSON object ``{"experiment", "params", "output_path", "format"}``.
Every artifact embeds the SHA-256 of the canonical config (``experiment``,
``params`` and ``format``; the output location is excluded) and is
byte-identical across runs. Wall time goes to ``<output>.runinfo.json``.

Exit codes: 0 success, 1 validation failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import (calibrated_family, clt_bound_d3, discrepancy_estimate, rademacher_moments,
                     rademacher_standardized_sums, t_normal_bound)
from .distributions import (MatrixNormalParams, MatrixTParams, SampleBatch, inv_wishart_trace_moments,
                            matrix_t_frobenius_moments, sample_matrix_normal, sample_matrix_t,
                            wishart_batch)
from .errors import MatsteinError, NumericalError, ValidationError
from .estimators import (FlipFlopConfig, StructuredBasis, masked_flipflop, structured_flipflop,
                         weighted_flipflop)
from .matcore import SymPD, as_real_matrix
from .ou import OUConfig, simulate
from .rng import default_rng, resolve_threads
from .solver import QuadratureConfig, solve_stein, stein_residual
from .stein import FunctionMeta, TestFunction, linear, probe_family, quadratic_probe, stein_identity_estimate

EXPERIMENTS = ("sample", "verify_stein", "solve_stein", "ou_simulate", "verify_moments", "estimate",
               "clt_experiment", "t_experiment")
FORMATS = ("json", "csv")
SCHEMA_VERSION = 1


# ---- config handling ------------------------------------------------------------


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(config):
    core = {k: config.get(k) for k in ("experiment", "params", "format")}
    return hashlib.sha256(canonical_json(core).encode("utf-8")).hexdigest()


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    return cfg


def validate_config(cfg, subcommand):
    exp = cfg.setdefault("experiment", subcommand)
    if exp != subcommand:
        raise ValidationError(f"config experiment {exp!r} does not match subcommand {subcommand!r}")
    if exp not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment {exp!r}; expected one of {EXPERIMENTS}")
    fmt = cfg.setdefault("format", "json")
    if fmt not in FORMATS:
        raise ValidationError(f"format must be one of {FORMATS}, got {fmt!r}")
    params = cfg.get("params")
    if not isinstance(params, dict):
        raise ValidationError("config needs a 'params' object")
    return params


class Params:
    """Typed access to the ``params`` table; every error names the failing field."""

    def __init__(self, table, base_dir=None):
        self.t = table
        self.base_dir = Path(base_dir) if base_dir else Path(".")
        self.seeds = {}

    def has(self, key):
        return key in self.t

    def get(self, key, default=None):
        return self.t.get(key, default)

    def need(self, key):
        if key not in self.t:
            raise ValidationError(f"params.{key} is required")
        return self.t[key]

    def seed(self, key="seed"):
        if key not in self.t or self.t[key] is None:
            raise ValidationError(f"seeds mandatory: params.{key} must be an explicit integer")
        v = self.t[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            raise ValidationError(f"seeds mandatory: params.{key} must be a nonnegative integer, got {v!r}")
        self.seeds[key] = v
        return v

    def int(self, key, default=None, minimum=1):
        v = self.need(key) if default is None else self.t.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v) or int(v) < minimum:
            raise ValidationError(f"params.{key} must be an integer >= {minimum}, got {v!r}")
        return int(v)

    def float(self, key, default=None):
        v = self.need(key) if default is None else self.t.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ValidationError(f"params.{key} must be a finite number, got {v!r}")
        return float(v)

    def matrix(self, key, shape=None, default=None):
        v = self.t.get(key)
        if v is None:
            if default is None:
                raise ValidationError(f"params.{key} is required")
            return default
        return as_real_matrix(np.array(v, dtype=float), shape=shape, name=f"params.{key}")

    def sympd(self, key, dim=None):
        v = self.t.get(key)
        if v is None:
            if dim is None:
                raise ValidationError(f"params.{key} is required")
            return SymPD.identity(dim)
        try:
            S = SymPD(np.array(v, dtype=float))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"params.{key}: {exc}") from None
        if dim is not None and S.dim != dim:
            raise ValidationError(f"params.{key} must be {dim}x{dim}, got {S.dim}x{S.dim}")
        return S

    def path(self, key):
        p = Path(self.need(key))
        return p if p.is_absolute() else self.base_dir / p


def _scales(p):
    if p.has("Psi"):
        Psi = p.sympd("Psi")
        nu = Psi.dim
    else:
        nu = p.int("nu")
        Psi = SymPD.identity(nu)
    if p.has("Sigma"):
        Sigma = p.sympd("Sigma")
    else:
        Sigma = SymPD.identity(p.int("d"))
    return Psi, Sigma


def _tolist(a):
    return np.asarray(a).tolist()


# ---- experiments ------------------------------------------------------------------
# Each builder validates its parameters and returns a zero-argument job. All
# validation happens before any computation.


def build_sample(p, threads):
    law = p.get("law", "normal")
    count, seed = p.int("count"), p.seed()
    if law == "normal":
        Psi, Sigma = _scales(p)
        M = p.matrix("M", shape=(Psi.dim, Sigma.dim), default=np.zeros((Psi.dim, Sigma.dim)))
        params = MatrixNormalParams(M, Psi, Sigma)
        return lambda: _batch_result(sample_matrix_normal(params, count, seed, threads), law)
    if law == "t":
        Psi, Sigma = _scales(p)
        params = MatrixTParams(p.float("n_dof"), Psi, Sigma)
        return lambda: _batch_result(sample_matrix_t(params, count, seed, threads), law)
    if law == "wishart":
        dim, alpha = p.int("dim"), p.float("alpha")
        if not alpha > dim - 1:
            raise ValidationError(f"params.alpha must exceed dim - 1, got {alpha}")
        return lambda: _batch_result(SampleBatch(wishart_batch(dim, alpha, count, seed, threads=threads),
                                                 seed), law)
    raise ValidationError(f"params.law must be normal, t or wishart, got {law!r}")


def _batch_result(batch, law):
    return {"json": {"law": law, "count": batch.count, "nu": batch.nu, "d": batch.d,
                     "samples": _tolist(batch.data)},
            "csv": batch.to_csv()}


def build_verify_stein(p, threads):
    Psi, Sigma = _scales(p)
    count, seed = p.int("count"), p.seed()
    size = p.int("probes", 10)
    params = MatrixNormalParams.centered(Psi, Sigma)

    def job():
        batch = sample_matrix_normal(params, count, seed, threads)
        probes = probe_family(Psi.dim, Sigma.dim, Psi, size, default_rng(seed, "probes"))
        rows = []
        for k, f in enumerate(probes):
            r = stein_identity_estimate(batch, f, Psi, Sigma)
            z = r["mean"] / r["se"] if r["se"] > 0 else 0.0
            rows.append({"probe": k, "mean": r["mean"], "se": r["se"], "z": z, "pass_4se": abs(z) <= 4})
        table = [["probe", "mean", "se", "z"]] + [[r["probe"], r["mean"], r["se"], r["z"]] for r in rows]
        return {"json": {"nu": Psi.dim, "d": Sigma.dim, "count": count, "probes": rows}, "csv": table}

    return job


def _test_function(spec, nu, d, Psi):
    """Build ``h`` from ``{"kind": ...}``: linear, tanh_coord or quadratic_probe."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValidationError("params.h must be an object with a 'kind'")
    kind = spec["kind"]
    if kind == "linear":
        return linear(as_real_matrix(np.array(spec["C"], dtype=float), shape=(nu, d), name="h.C"))
    if kind == "tanh_coord":
        i, j = spec.get("i", 0), spec.get("j", 0)
        if not (0 <= i < nu and 0 <= j < d):
            raise ValidationError(f"h index ({i}, {j}) out of range")
        return TestFunction(lambda X: np.tanh(X[..., i, j]),
                            meta=FunctionMeta(holder_alpha=1.0, holder_const=1.0, bounded_sup=2.0),
                            shape=(nu, d), name=f"tanh(X[{i},{j}])")
    if kind == "quadratic_probe":
        W = as_real_matrix(np.array(spec.get("W", np.eye(nu)), dtype=float), shape=(nu, nu), name="h.W")
        U = as_real_matrix(np.array(spec.get("U", np.eye(d)), dtype=float), shape=(d, d), name="h.U")
        f = quadratic_probe(W, U, Psi)
        return f.with_meta(holder_alpha=1.0)
    raise ValidationError(f"unknown h.kind {kind!r}")


def build_solve_stein(p, threads):
    Psi, Sigma = _scales(p)
    nu, d = Psi.dim, Sigma.dim
    seed = p.seed()
    q = p.get("quadrature", {})
    qseed = q.get("seed", seed)
    if not isinstance(qseed, int) or qseed < 0:
        raise ValidationError("seeds mandatory: quadrature.seed must be a nonnegative integer")
    config = QuadratureConfig(t_nodes=q.get("t_nodes", 64), mc_inner=q.get("mc_inner", 4096), seed=qseed,
                              inner=q.get("inner", "sobol"))
    h = _test_function(p.need("h"), nu, d, Psi)
    if p.has("points"):
        X = np.array(p.get("points"), dtype=float).reshape(-1, nu, d)
    else:
        X = default_rng(seed, "cli-points").standard_normal((p.int("count", 5), nu, d))

    def job():
        sol = solve_stein(h, Psi, Sigma, config, threads)
        v, se = sol.value_and_se(X)
        res = np.atleast_1d(stein_residual(sol, X))
        rows = [{"point": k, "value": float(v[k]), "se": float(se[k]), "residual": float(res[k])}
                for k in range(len(X))]
        table = [["point", "value", "se", "residual"]] + [[r["point"], r["value"], r["se"], r["residual"]]
                                                          for r in rows]
        return {"json": {"h": h.name, "h_mean": sol.h_mean, "h_mean_se": sol.h_mean_se,
                         "t_nodes": config.t_nodes, "mc_inner": config.mc_inner, "points": rows},
                "csv": table}

    return job


def build_ou_simulate(p, threads):
    Psi, Sigma = _scales(p)
    X0 = p.matrix("X0", shape=(Psi.dim, Sigma.dim), default=np.zeros((Psi.dim, Sigma.dim)))
    cfg = OUConfig(Psi, Sigma, horizon=p.float("horizon", 1.0), dt=p.float("dt", 1e-3),
                   scheme=p.get("scheme", "euler"), seed=p.seed())
    paths = p.int("paths", 1)
    stride = p.int("stride", 1)

    def job():
        if paths == 1:
            path = simulate(X0, cfg, threads=threads)
            keep = np.arange(0, len(path), stride)
            if keep[-1] != len(path) - 1:
                keep = np.append(keep, len(path) - 1)
            sub = type(path)(path.times[keep], path.states[keep])
            return {"json": {"times": _tolist(sub.times), "states": _tolist(sub.states)}, "csv": sub.to_csv()}
        term = simulate(X0, cfg, paths=paths, keep_path=False, threads=threads).states[0]
        mean = term.mean(0)
        se = term.std(0, ddof=1) / np.sqrt(paths)
        cov = np.cov(term.reshape(paths, -1).T)
        target_cov = -np.expm1(-2 * cfg.horizon) * np.kron(Psi.entries, Sigma.entries)
        rel = float(np.linalg.norm(cov - target_cov) / np.linalg.norm(target_cov))
        out = {"paths": paths, "terminal_mean": _tolist(mean), "terminal_mean_se": _tolist(se),
               "target_mean": _tolist(np.exp(-cfg.horizon) * X0), "terminal_cov_rel_err": rel}
        table = [["entry", "mean", "se", "target"]] + [
            [f"entry_{i + 1}_{j + 1}", mean[i, j], se[i, j], math.exp(-cfg.horizon) * X0[i, j]]
            for i in range(Psi.dim) for j in range(Sigma.dim)]
        return {"json": out, "csv": table}

    return job


def build_verify_moments(p, threads):
    draws, seed = p.int("draws"), p.seed()
    wcases = p.get("wishart", [{"dim": p.get("dim", 2), "alpha": p.get("alpha", 7)}])
    tcases = p.get("matrix_t", [])
    for c in wcases:
        inv_wishart_trace_moments(c["dim"], c["alpha"])
    for c in tcases:
        matrix_t_frobenius_moments(c["nu"], c["d"], c["n_dof"])

    def job():
        rows = []
        for k, c in enumerate(wcases):
            exact = inv_wishart_trace_moments(c["dim"], c["alpha"])
            W = wishart_batch(c["dim"], c["alpha"], draws, seed, "cli-wishart", k, threads=threads)
            Winv = np.linalg.inv(W)
            tr1 = np.trace(Winv, axis1=1, axis2=2)
            samples = {"m1": tr1, "m2tr": np.einsum("kij,kji->k", Winv, Winv), "m1sq": tr1 ** 2}
            for name, val in exact.items():
                rows.append(_moment_row("inv_wishart", {"dim": c["dim"], "alpha": c["alpha"]}, name, val,
                                        samples[name]))
        for k, c in enumerate(tcases):
            exact = matrix_t_frobenius_moments(c["nu"], c["d"], c["n_dof"])
            I_nu, I_d = SymPD.identity(c["nu"]), SymPD.identity(c["d"])
            T = sample_matrix_t(MatrixTParams(c["n_dof"], I_nu, I_d), draws, seed + 7919 * (k + 1), threads)
            r2 = np.einsum("kij,kij->k", T.data, T.data)
            samples = {"m2": r2, "m4": r2 ** 2}
            for name in ("m2", "m4"):
                if name in exact:
                    rows.append(_moment_row("matrix_t", {"nu": c["nu"], "d": c["d"], "n_dof": c["n_dof"]},
                                            name, exact[name], samples[name]))
        table = [["law", "case", "moment", "closed_form", "mc", "se", "z"]] + [
            [r["law"], canonical_json(r["case"]), r["moment"], r["closed_form"], r["mc"], r["se"], r["z"]]
            for r in rows]
        return {"json": {"draws": draws, "moments": rows}, "csv": table}

    return job


def _moment_row(law, case, name, exact, samples):
    mc = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(samples.size))
    z = (mc - exact) / se if se > 0 else 0.0
    return {"law": law, "case": case, "moment": name, "closed_form": float(exact), "mc": mc, "se": se,
            "z": z, "pass_4se": abs(z) <= 4}


def _load_batch(p, threads):
    if p.has("data"):
        path = p.path("data")
        if not path.exists():
            raise ValidationError(f"params.data file {path} does not exist")
        return lambda: SampleBatch.load(path, p.seeds.get("seed", 0))
    Psi, Sigma = p.sympd("true_Psi"), p.sympd("true_Sigma")
    count = p.int("count")
    seed = p.seeds["seed"]
    params = MatrixNormalParams.centered(Psi, Sigma)
    return lambda: sample_matrix_normal(params, count, seed, threads)


def _weight(p, key):
    return None if not p.has(key) else p.matrix(key)


def build_estimate(p, threads):
    seed = p.seed()
    method = p.get("method", "flipflop")
    load = _load_batch(p, threads)
    fcfg = FlipFlopConfig(W=_weight(p, "W"), U=_weight(p, "U"), rescale=p.get("rescale", "trace_sigma_d"),
                          tol=p.float("tol", 1e-8), max_iter=p.int("max_iter", 200),
                          ridge_lambda=p.float("ridge_lambda", 0.0), ridge_tau=p.float("ridge_tau", 1.0))
    if method == "flipflop":
        def job():
            batch = load()
            Psi0 = p.sympd("Psi0", batch.nu)
            res = weighted_flipflop(batch, fcfg, Psi0)
            out = res.to_dict(seed)
            return {"json": out, "csv": _estimate_table(out)}
        return job
    if method == "masked":
        P, Q = p.matrix("P"), p.matrix("Q")

        def job():
            batch = load()
            res = masked_flipflop(batch, P, Q, fcfg)
            out = {"psi_block": res.Psi_block.to_dict(), "sigma_block": res.Sigma_block.to_dict(),
                   "iters": res.iters, "converged": res.converged, "rescale_rule": fcfg.rescale,
                   "seed": seed}
            return {"json": out, "csv": _block_table(res)}
        return job
    if method == "structured":
        b = p.need("basis")
        try:
            basis = StructuredBasis(np.array(b["B"], float), np.array(b["A"], float),
                                    np.array(b["U"], float), np.array(b["W"], float))
        except KeyError as exc:
            raise ValidationError(f"params.basis needs key {exc}") from None

        def job():
            batch = load()
            res, ff = structured_flipflop(batch, basis, rescale=fcfg.rescale, tol=fcfg.tol,
                                          max_iter=fcfg.max_iter)
            out = {"beta_hat": _tolist(res.beta_hat), "alpha_hat": _tolist(res.alpha_hat),
                   "psi": _tolist(ff.Psi_hat.entries), "sigma": _tolist(ff.Sigma_hat.entries),
                   "iters": ff.iters, "converged": ff.converged, "rescale_rule": fcfg.rescale, "seed": seed,
                   "evaluation": "alternating: moment maps evaluated at the previous iterate"}
            return {"json": out, "csv": _estimate_table(out)}
        return job
    raise ValidationError(f"params.method must be flipflop, masked or structured, got {method!r}")


def _estimate_table(out):
    rows = [["factor", "i", "j", "value"]]
    for name in ("psi", "sigma"):
        M = np.asarray(out[name])
        rows += [[name, i + 1, j + 1, M[i, j]] for i in range(M.shape[0]) for j in range(M.shape[1])]
    return rows


def _block_table(res):
    rows = [["factor", "i", "j", "value"]]
    for name, blk in (("psi", res.Psi_block), ("sigma", res.Sigma_block)):
        for a, i in enumerate(blk.indices):
            for b, j in enumerate(blk.indices):
                rows.append([name, i + 1, j + 1, blk.block[a][b]])
    return rows


def _bound_rows(experiment, rows):
    header = ["experiment", "n", "nu", "d", "bound_rhs", "lower_estimate", "se", "max_se"]
    return [header] + [[experiment, r["n"], r["shapes"]["nu"], r["shapes"]["d"], r["bound_rhs"],
                        r["lower_estimate"], r["se"], r["max_se"]] for r in rows]


def build_clt_experiment(p, threads):
    nu, d = p.int("nu", 2), p.int("d", 2)
    ns = p.get("ns", [100, 1000, 10000])
    count, seed = p.int("count", 100000), p.seed()
    size, fseed = p.int("family_size", 32), p.seed("family_seed") if p.has("family_seed") else seed
    h_class = p.get("h_class", "H3")
    if not isinstance(ns, list) or not all(isinstance(n, int) and n >= 1 for n in ns):
        raise ValidationError("params.ns must be a list of positive integers")
    I_nu, I_d = SymPD.identity(nu), SymPD.identity(d)

    def job():
        fam = calibrated_family(h_class, nu, d, size, fseed)
        mom = rademacher_moments(nu, d)
        rows = []
        for k, n in enumerate(ns):
            S = rademacher_standardized_sums(nu, d, n, count, seed)
            Z = sample_matrix_normal(MatrixNormalParams.centered(I_nu, I_d), count, seed + 104729 * (k + 1),
                                     threads)
            r = discrepancy_estimate(S, Z, fam, h_class)
            rows.append({"n": n, "bound_rhs": clt_bound_d3(mom, I_nu, I_d, n), "lower_estimate": r.sup_est,
                         "se": r.sup_se, "max_se": r.max_se, "per_h": r.per_h,
                         "seeds": {"sums": seed, "reference": seed + 104729 * (k + 1), "family": fseed},
                         "shapes": {"nu": nu, "d": d}})
        out = {"h_class": h_class, "rows": rows,
               "note": "lower_estimate is a finite-family lower estimate; only lower <= bound is checked"}
        return {"json": out, "csv": _bound_rows("clt", rows)}

    return job


def build_t_experiment(p, threads):
    Psi, Sigma = _scales(p)
    nu, d = Psi.dim, Sigma.dim
    dofs = p.get("n_dofs", [6, 10, 20, 50])
    count, seed = p.int("count", 100000), p.seed()
    size = p.int("family_size", 32)
    fseed = p.seed("family_seed") if p.has("family_seed") else seed
    if not isinstance(dofs, list) or not all(isinstance(n, (int, float)) and n > 2 for n in dofs):
        raise ValidationError("params.n_dofs must be a list of numbers > 2")

    def job():
        fam = calibrated_family("H1", nu, d, size, fseed)
        Z = sample_matrix_normal(MatrixNormalParams.centered(Psi, Sigma), count, seed, threads)
        rows = []
        for k, n in enumerate(dofs):
            T = sample_matrix_t(MatrixTParams(n, Psi, Sigma), count, seed + 1 + k, threads)
            r = discrepancy_estimate(T, Z, fam, "H1")
            rows.append({"n": n, "bound_rhs": t_normal_bound(n, nu, d, Psi, Sigma), "lower_estimate": r.sup_est,
                         "se": r.sup_se, "max_se": r.max_se, "per_h": r.per_h,
                         "seeds": {"t": seed + 1 + k, "normal": seed, "family": fseed},
                         "shapes": {"nu": nu, "d": d}})
        out = {"h_class": "H1", "rows": rows,
               "note": "lower_estimate is a finite-family lower estimate; only lower <= bound is checked"}
        return {"json": out, "csv": _bound_rows("matrix_t", rows)}

    return job


BUILDERS = {
    "sample": build_sample,
    "verify_stein": build_verify_stein,
    "solve_stein": build_solve_stein,
    "ou_simulate": build_ou_simulate,
    "verify_moments": build_verify_moments,
    "estimate": build_estimate,
    "clt_experiment": build_clt_experiment,
    "t_experiment": build_t_experiment,
}


# ---- artifact writing -----------------------------------------------------------


def provenance(cfg, seeds):
    return {"tool": "matstein", "version": __version__, "schema": SCHEMA_VERSION,
            "config_hash": config_hash(cfg), "seeds": seeds,
            "config": {k: cfg.get(k) for k in ("experiment", "params", "format")}}


def render(result, cfg, seeds):
    prov = provenance(cfg, seeds)
    if cfg["format"] == "json":
        doc = {"experiment": cfg["experiment"], "results": result["json"], "provenance": prov}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"
    body = result["csv"]
    if not isinstance(body, str):
        buf = io.StringIO()
        for row in body:
            buf.write(",".join(_csv_cell(x) for x in row) + "\n")
        body = buf.getvalue()
    head = (f"# tool: matstein {__version__}\n# config_hash: {prov['config_hash']}\n"
            f"# seeds: {canonical_json(seeds)}\n# config: {canonical_json(prov['config'])}\n")
    return head + body


def _csv_cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    s = str(x)
    return '"' + s.replace('"', '""') + '"' if ("," in s or '"' in s) else s


def read_embedded(path):
    """``(config_hash, embedded_config)`` stored in an artifact."""
    text = Path(path).read_text()
    if text.startswith("#"):
        meta = {}
        for line in text.splitlines():
            if not line.startswith("# "):
                break
            key, _, val = line[2:].partition(": ")
            meta[key] = val
        cfg = json.loads(meta["config"]) if "config" in meta else None
        return meta.get("config_hash"), cfg
    doc = json.loads(text)
    prov = doc.get("provenance", {})
    return prov.get("config_hash"), prov.get("config")


def verify_artifact(artifact, cfg=None):
    """Recompute the config hash and compare with the one embedded in ``artifact``."""
    try:
        stored, embedded = read_embedded(artifact)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"cannot read provenance from {artifact}: {exc}") from None
    if stored is None:
        raise ValidationError(f"{artifact} carries no config hash")
    ref = cfg if cfg is not None else embedded
    if ref is None:
        raise ValidationError("no config to verify against")
    ref = dict(ref)
    ref.setdefault("format", "json")
    return stored == config_hash(ref), stored, config_hash(ref)


# ---- entry point ------------------------------------------------------------------


def make_parser():
    ap = argparse.ArgumentParser(prog="matstein", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"matstein {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS + ("verify",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=(name != "verify"))
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--output", default=None)
    return ap


def run(cfg, output=None, threads=None, base_dir=None):
    """Validate and execute one experiment; returns the artifact path."""
    subcommand = cfg.get("experiment")
    params = validate_config(cfg, subcommand)
    out_path = output or cfg.get("output_path")
    if not out_path:
        raise ValidationError("no output path: set output_path in the config or pass --output")
    p = Params(params, base_dir)
    threads = resolve_threads(threads)
    job = BUILDERS[cfg["experiment"]](p, threads)
    t0 = time.perf_counter()
    result = job()
    wall = time.perf_counter() - t0
    text = render(result, cfg, p.seeds)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(text)
    side = out_path.with_name(out_path.name + ".runinfo.json")
    side.write_text(json.dumps({"config_hash": config_hash(cfg), "wall_time_s": wall, "threads": threads,
                                "version": __version__}, indent=1) + "\n")
    return out_path


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        if args.command == "verify":
            if not args.output:
                raise ValidationError("verify needs --output <artifact>")
            cfg = load_config(args.config) if args.config else None
            ok, stored, computed = verify_artifact(args.output, cfg)
            if not ok:
                print(f"config hash mismatch: artifact {stored}, config {computed}", file=sys.stderr)
                return 1
            print(f"ok {stored}")
            return 0
        cfg = load_config(args.config)
        cfg.setdefault("experiment", args.command)
        if cfg["experiment"] != args.command:
            raise ValidationError(f"config experiment {cfg['experiment']!r} does not match subcommand "
                                  f"{args.command!r}")
        path = run(cfg, args.output, args.threads, base_dir=Path(args.config).resolve().parent)
        print(str(path))
        return 0
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (MatsteinError, ValueError, TypeError, KeyError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
