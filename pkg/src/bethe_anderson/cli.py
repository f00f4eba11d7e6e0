"""Command-line interface.

Every subcommand reads an optional JSON config file, applies flag
overrides (flags win), writes CSV files with a schema line and a manifest
echoing the fully resolved configuration.

Exit codes: 0 ok, 2 bad configuration, 3 convergence failure, 4 resource
cap exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import cavity, exact_forms, finite_graphs, phase_diagram, spectral_stats
from .disorder import DisorderSpec
from .errors import ConfigurationError, ConvergenceError, DomainError, SamplingError, SizeError
from .parallel import worker_count
from .rng import RngHandle, derive, float_key

log = logging.getLogger("bethe_anderson")

SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_RESOURCE = 0, 2, 3, 4

_COMMON = {
    "K": 2,
    "disorder": "cauchy",
    "lambda": 0.5,
    "seed": 0,
    "workers": None,
    "out": ".",
    "n_pool": 100_000,
    "burn_in": 200,
    "n_measure": 100,
    "n_paths": 65_536,
    "path_length": 40,
    "etas": "0.1,0.01,0.001",
    "rule": "sqrt",
}

DEFAULTS = {
    "lyapunov": {"E_grid": "-4:4:0.5"},
    "free-energy": {"E": 0.0, "eta": 0.01, "s_grid": "0.1:0.9:0.1", "phi_at_one": False},
    "dos": {"E_grid": "-4:4:0.5"},
    "phase-scan": {"lambda_grid": "0.5:2:0.5", "E_grid": "-4:4:1", "phi_mode": "auto", "cache": ""},
    "spectral-stats": {
        "mode": "tree", "L": 9, "N": 2000, "centers": "0,2.9", "window": 0.25,
        "lambda_grid": "0", "realizations": 200, "participation": True,
    },
    "transport": {
        "mode": "second-moment", "E": 0.0, "eta": 0.01, "distances": "4:16:2",
        "L": 8, "window": "-1,1", "times": "0:20:0.5", "R_values": "0:8:1", "realizations": 20,
    },
    "resonance": {
        "E": 2.9, "eta": 1e-6, "deltas": "0.01,0.02,0.05", "R_values": "6,8,10", "realizations": 1000, "L": None,
    },
    "thresholds": {},
}


# --------------------------------------------------------------------------
# config helpers


def parse_grid(spec) -> list[float]:
    """``"a:b:step"`` (inclusive), ``"x,y,z"``, a number or a list."""
    if isinstance(spec, (int, float)):
        return [float(spec)]
    if isinstance(spec, (list, tuple)):
        return [float(x) for x in spec]
    text = str(spec).strip()
    if not text:
        return []
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"grid {text!r} must be start:stop:step")
        a, b, h = map(float, parts)
        if h <= 0 or b < a:
            raise ConfigurationError(f"grid {text!r} needs step > 0 and stop >= start")
        n = int(math.floor((b - a) / h + 1e-9)) + 1
        return [round(a + i * h, 12) for i in range(n)]
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad grid {text!r}") from exc


def _disorder(value) -> DisorderSpec:
    if isinstance(value, str) and value.lower().endswith(".csv"):
        return DisorderSpec.from_csv(value)
    return DisorderSpec.from_config(value)


def _budget(cfg, rng) -> cavity.McBudget:
    return cavity.McBudget(
        n_pool=int(cfg["n_pool"]), burn_in=int(cfg["burn_in"]), n_measure=int(cfg["n_measure"]),
        n_paths=int(cfg["n_paths"]), path_length=int(cfg["path_length"]), rng=rng,
    )


def _protocol(cfg) -> cavity.EtaProtocol:
    return cavity.EtaProtocol(tuple(parse_grid(cfg["etas"])), cfg["rule"])


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


class CsvOut:
    """CSV file with a schema line; rows are flushed as they arrive."""

    def __init__(self, path: Path, name: str, columns):
        self.path = path
        self.columns = list(columns)
        self.fh = open(path, "w", encoding="utf-8", newline="\n")
        self.fh.write(f"# schema=bethe_anderson.{name} version={SCHEMA_VERSION}\n")
        self.fh.write(",".join(self.columns) + "\n")

    def write(self, row: dict) -> None:
        self.fh.write(",".join(_fmt(row[c]) for c in self.columns) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out: Path, command: str, cfg: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "package_version": _version(),
        "config": cfg,
        "rng": {"master_seed": int(cfg["seed"]), "derivation": "Philox(SeedSequence(master_seed, spawn_key=path))"},
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_lyapunov(cfg, out: Path) -> list[str]:
    dis = _disorder(cfg["disorder"])
    lam, K = float(cfg["lambda"]), int(cfg["K"])
    master = RngHandle(cfg["seed"])
    protocol = _protocol(cfg)
    cols = ["K", "lambda", "E", "L_value", "L_se", "extrapolation_error", "stationary", "exact"]
    with CsvOut(out / "lyapunov.csv", "lyapunov", cols) as csv:
        for E in parse_grid(cfg["E_grid"]):
            mc = _budget(cfg, derive(master, [float_key(lam), float_key(E)]))
            est = cavity.estimate_lyapunov(cavity.CavityParams(K, lam, complex(E, protocol.etas[0]), dis), protocol, mc)
            exact = math.nan
            if lam == 0:
                exact = float(exact_forms.lyapunov_exact_free(K, E + 0j)) if abs(E) != 2 * math.sqrt(K) else math.log(K) / 2
            elif dis.kind == "cauchy":
                exact = float(exact_forms.lyapunov_exact_cauchy(K, lam, E))
            csv.write({"K": K, "lambda": lam, "E": E, "L_value": est.value, "L_se": est.std_error,
                       "extrapolation_error": est.metadata["extrapolation_error"],
                       "stationary": est.metadata["stationary"], "exact": exact})
    return ["lyapunov.csv"]


def cmd_free_energy(cfg, out: Path) -> list[str]:
    dis = _disorder(cfg["disorder"])
    lam, K, E = float(cfg["lambda"]), int(cfg["K"]), float(cfg["E"])
    master = RngHandle(cfg["seed"])
    mc = _budget(cfg, derive(master, [float_key(lam), float_key(E)]))
    params = cavity.CavityParams(K, lam, complex(E, float(cfg["eta"])), dis)
    pool = cavity.sweep(cavity.init_pool(params, mc.n_pool, mc.rng), mc.burn_in)
    cols = ["K", "lambda", "E", "eta", "s", "phi", "phi_se"]
    with CsvOut(out / "free_energy.csv", "free_energy", cols) as csv:
        for i, s in enumerate(parse_grid(cfg["s_grid"])):
            est = cavity.estimate_free_energy(params, s, mc=mc.with_rng(derive(mc.rng, [1, i])), pool=pool)
            csv.write({"K": K, "lambda": lam, "E": E, "eta": params.eta, "s": s, "phi": est.value, "phi_se": est.std_error})
        if cfg["phi_at_one"]:
            protocol = _protocol(cfg)
            est = cavity.estimate_phi_at_one(params.at_eta(protocol.etas[0]), mc.with_rng(derive(mc.rng, [2])), protocol)
            csv.write({"K": K, "lambda": lam, "E": E, "eta": 0.0, "s": 1.0, "phi": est.value, "phi_se": est.std_error})
    return ["free_energy.csv"]


def cmd_dos(cfg, out: Path) -> list[str]:
    dis = _disorder(cfg["disorder"])
    lam, K = float(cfg["lambda"]), int(cfg["K"])
    master = RngHandle(cfg["seed"])
    protocol = _protocol(cfg)
    grid = parse_grid(cfg["E_grid"])
    # mass below the first grid energy (single-site tail for unbounded laws)
    tail = 0.0
    if lam > 0 and dis.support() is None and grid:
        tail = float(dis.cdf((grid[0] + 2 * math.sqrt(K)) / lam))
    cols = ["K", "lambda", "E", "dos_value", "dos_se", "ids", "exact"]
    ids, prev = tail, None
    with CsvOut(out / "dos.csv", "dos", cols) as csv:
        for E in grid:
            mc = _budget(cfg, derive(master, [float_key(lam), float_key(E)]))
            est = cavity.estimate_dos(cavity.CavityParams(K, lam, complex(E, protocol.etas[0]), dis), protocol, mc)
            if prev is not None:
                ids += 0.5 * (E - prev[0]) * (est.value + prev[1])
            prev = (E, est.value)
            exact = float(exact_forms.kesten_mckay_dos(K, E)) if lam == 0 else math.nan
            csv.write({"K": K, "lambda": lam, "E": E, "dos_value": est.value, "dos_se": est.std_error,
                       "ids": ids, "exact": exact})
    return ["dos.csv"]


def cmd_phase_scan(cfg, out: Path) -> list[str]:
    pc = phase_diagram.PhaseConfig(
        K=int(cfg["K"]), disorder=_disorder(cfg["disorder"]), protocol=_protocol(cfg),
        mc=_budget(cfg, RngHandle(cfg["seed"])), phi_mode=cfg["phi_mode"],
    )
    grid = phase_diagram.scan(parse_grid(cfg["lambda_grid"]), parse_grid(cfg["E_grid"]), pc,
                              cache_dir=cfg["cache"] or None, workers=cfg["workers"])
    with CsvOut(out / "phase_grid.csv", "phase_grid", phase_diagram.GRID_COLUMNS) as csv:
        for p in grid:
            csv.write(p.row())
    with CsvOut(out / "mobility_edge.csv", "mobility_edge", ["lambda", "E_edge", "criterion", "along"]) as csv:
        for e in phase_diagram.edge_extract(grid):
            csv.write({"lambda": e.lam, "E_edge": e.E, "criterion": e.criterion, "along": e.along})
    return ["phase_grid.csv", "mobility_edge.csv"]


def cmd_spectral_stats(cfg, out: Path) -> list[str]:
    dis = _disorder(cfg["disorder"])
    rng = RngHandle(cfg["seed"])
    if cfg["mode"] == "tree":
        rows = spectral_stats.poisson_test_truncated_tree(spectral_stats.PoissonTestConfig(
            K=int(cfg["K"]), L=int(cfg["L"]), lam=float(cfg["lambda"]), disorder=dis,
            centers=tuple(parse_grid(cfg["centers"])), window=float(cfg["window"]),
            n_realizations=int(cfg["realizations"]), rng=rng, workers=cfg["workers"],
        ))
        cols = ["K", "lambda", "E", "L", "n_realizations", "mean_r", "se_r", "tv_poisson", "tv_goe",
                "mean_points", "label", "seed"]
    elif cfg["mode"] == "rrg":
        centers = parse_grid(cfg["centers"]) if cfg["centers"] not in ("", "bulk") else [None]
        points = tuple((lam, E) for lam in parse_grid(cfg["lambda_grid"]) for E in centers)
        rows = spectral_stats.rrg_statistics_scan(spectral_stats.RRGScanConfig(
            K=int(cfg["K"]), N=int(cfg["N"]), points=points, disorder=dis,
            n_realizations=int(cfg["realizations"]), window=float(cfg["window"]),
            participation=bool(cfg["participation"]), rng=rng, workers=cfg["workers"],
        ))
        cols = ["K", "lambda", "E", "N", "n_realizations", "mean_r", "se_r", "tv_poisson", "tv_goe",
                "median_pr_fraction", "label", "seed"]
    else:
        raise ConfigurationError(f"unknown spectral-stats mode {cfg['mode']!r}")
    with CsvOut(out / "spectral_stats.csv", "spectral_stats", cols) as csv:
        for r in rows:
            csv.write(r)
    return ["spectral_stats.csv"]


def _tree_ensemble(cfg, dis, lam):
    g = finite_graphs.build_truncated_tree(int(cfg["K"]), int(cfg["L"]), "ball")
    master = RngHandle(cfg["seed"])
    for i in range(int(cfg["realizations"])):
        yield g, finite_graphs.realize(g, dis, lam, derive(master, [i]))


def cmd_transport(cfg, out: Path) -> list[str]:
    dis = _disorder(cfg["disorder"])
    lam, K = float(cfg["lambda"]), int(cfg["K"])
    mode = cfg["mode"]
    if mode == "second-moment":
        E, eta = float(cfg["E"]), float(cfg["eta"])
        mc = _budget(cfg, derive(RngHandle(cfg["seed"]), [float_key(lam), float_key(E)]))
        ests = cavity.estimate_greens_second_moment(
            cavity.CavityParams(K, lam, complex(E, eta), dis), [int(d) for d in parse_grid(cfg["distances"])], mc)
        cols = ["K", "lambda", "E", "eta", "distance", "second_moment", "se", "scaled"]
        with CsvOut(out / "second_moment.csv", "second_moment", cols) as csv:
            for e in ests:
                d = e.metadata["distance"]
                csv.write({"K": K, "lambda": lam, "E": E, "eta": eta, "distance": d, "second_moment": e.value,
                           "se": e.std_error, "scaled": e.value * float(K) ** d})
        return ["second_moment.csv"]
    window = tuple(parse_grid(cfg["window"]))
    if len(window) != 2:
        raise ConfigurationError("window must be 'lo,hi'")
    if mode == "evolve":
        times = np.array(parse_grid(cfg["times"]))
        total = np.zeros(times.size)
        n = 0
        for g, real in _tree_ensemble(cfg, dis, lam):
            total += finite_graphs.evolve_second_moment(g, real, window, times)
            n += 1
        with CsvOut(out / "spreading.csv", "spreading", ["t", "second_moment"]) as csv:
            for t, m in zip(times, total / n):
                csv.write({"t": t, "second_moment": m})
        return ["spreading.csv"]
    if mode == "profile":
        R = [int(r) for r in parse_grid(cfg["R_values"])]
        prof = finite_graphs.dynamical_localization_profile(_tree_ensemble(cfg, dis, lam), window, R)
        with CsvOut(out / "profile.csv", "profile", ["R", "sup_weight"]) as csv:
            for r, v in zip(R, prof):
                csv.write({"R": r, "sup_weight": v})
        return ["profile.csv"]
    raise ConfigurationError(f"unknown transport mode {mode!r}")


def cmd_resonance(cfg, out: Path) -> list[str]:
    dis = _disorder(cfg["disorder"])
    lam, K = float(cfg["lambda"]), int(cfg["K"])
    R = [int(r) for r in parse_grid(cfg["R_values"])]
    deltas = parse_grid(cfg["deltas"])
    tab = finite_graphs.resonance_experiment(
        K, lam, dis, float(cfg["E"]), R, deltas, int(cfg["realizations"]), RngHandle(cfg["seed"]),
        eta=float(cfg["eta"]), depth=None if cfg["L"] is None else int(cfg["L"]),
    )
    cols = ["K", "lambda", "E", "delta", "R", "p_hit", "p_hit_se", "mean_count", "mean_count_se", "n_realizations"]
    with CsvOut(out / "resonance.csv", "resonance", cols) as csv:
        for a, d in enumerate(deltas):
            for b, r in enumerate(R):
                csv.write({"K": K, "lambda": lam, "E": float(cfg["E"]), "delta": d, "R": r,
                           "p_hit": tab.p_hit[a, b], "p_hit_se": tab.p_hit_se[a, b],
                           "mean_count": tab.mean_count[a, b], "mean_count_se": tab.mean_count_se[a, b],
                           "n_realizations": tab.n_realizations})
    return ["resonance.csv"]


def cmd_thresholds(cfg, out: Path) -> list[str]:
    dis = _disorder(cfg["disorder"])
    K, lam = int(cfg["K"]), float(cfg["lambda"])
    th = exact_forms.lambda_thresholds(K, dis)
    edges = exact_forms.spectrum_edges(K, lam, dis)
    bound, s_opt = exact_forms.min_log_fractional_moment_bound(lam, dis.sup_density)
    print(json.dumps({
        "K": K, "disorder": dis.to_config(), "lambda": lam,
        "lambda_min": th.lambda_min, "lambda_c_upper": th.lambda_c_upper, "lambda_c_lower": th.lambda_c_lower,
        "spectrum": edges if isinstance(edges, str) else list(edges),
        "fractional_moment_bound": {"log_value": bound, "s": s_opt, "certifies": bound < -math.log(K)},
    }, indent=2))
    return []


RUNNERS = {
    "lyapunov": cmd_lyapunov,
    "free-energy": cmd_free_energy,
    "dos": cmd_dos,
    "phase-scan": cmd_phase_scan,
    "spectral-stats": cmd_spectral_stats,
    "transport": cmd_transport,
    "resonance": cmd_resonance,
    "thresholds": cmd_thresholds,
}


# --------------------------------------------------------------------------
# argument handling


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bethe-anderson", description="Anderson model on the Bethe lattice.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override it")
        for key, default in {**_COMMON, **DEFAULTS[name]}.items():
            kind = _bool if isinstance(default, bool) else (type(default) if default is not None else str)
            if key in ("workers", "L") and default is None:
                kind = int
            p.add_argument(_flag(key), dest=key, type=kind, default=None)
    return parser


def _join_negative_values(argv: list[str]) -> list[str]:
    """Glue values such as ``-4:4:0.1`` to their flag so argparse accepts them."""
    out = []
    for tok in argv:
        if out and out[-1].startswith("--") and "=" not in out[-1] and tok.startswith("-") and len(tok) > 1 \
                and (tok[1].isdigit() or tok[1] == "."):
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = {**_COMMON, **DEFAULTS[command]}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["workers"] = worker_count(cfg["workers"])
    if int(cfg["K"]) < 2:
        raise ConfigurationError("K must be >= 2")
    if float(cfg["lambda"]) < 0:
        raise ConfigurationError("lambda must be >= 0")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(_join_negative_values(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        _disorder(cfg["disorder"])
        out = Path(cfg["out"])
        if args.command == "thresholds":
            cmd_thresholds(cfg, out)
            return EXIT_OK
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, cfg, [])
        outputs = RUNNERS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, outputs)
    except (ConfigurationError, DomainError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (SizeError, SamplingError, MemoryError) as exc:
        print(f"resource cap exceeded: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
