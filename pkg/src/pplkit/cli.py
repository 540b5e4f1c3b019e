"""Command-line driver: compile programs to graphs, print the
higher-order transforms, run inference, and serve programs over the
wire protocol.

Inference output is JSON lines: one {"value": V, "log_weight": w}
record per sample, then a single {"summary": {...}} line with count,
effective sample size, per-component weighted moments, the evidence
estimate when the algorithm produces one, and wall time. Exit codes:
0 on success, 1 when inference fails at runtime, 2 when the program
does not compile or transform.
"""

from __future__ import annotations

import json
import math
import os
import sys
import time
from dataclasses import dataclass

import click
import numpy as np

from . import controllers, eval_inference, graph_inference
from .distributions import DistributionError, make_rng
from .ep_gaussian import EPError, ep
from .frontend import (
    FrontendError,
    desugar_foppl,
    desugar_hoppl,
    parse,
    print_expr,
)
from .graph_compiler import (
    GraphCompileError,
    compile_factor_graph,
    compile_graph,
    graph_to_json,
)
from .hoppl_runtime import (
    HopplError,
    HopplTCPServer,
    InProcessTransport,
    WireTransport,
    address_hoppl,
    cps_transform,
)
from .target_eval import EvalError, eval_det
from .values import to_wire

COMPILE_EXIT = 2
RUNTIME_EXIT = 1

_EVAL_ALGS = ("lw", "mh-independent", "mh", "smc", "bbvi")
_GRAPH_ALGS = ("gibbs", "hmc", "ep")
_HOPPL_ALGS = ("lw", "mh", "smc")


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        forms = parse(text)
        if path.endswith(".hoppl"):
            return desugar_hoppl(forms)
        if path.endswith(".foppl"):
            return desugar_foppl(forms)
        _fail(COMPILE_EXIT, f"{path}: expected a .foppl or .hoppl file")
    except FrontendError as err:
        _fail(COMPILE_EXIT, f"{path}: {err}")


def _seed_option(seed):
    if seed is not None:
        return seed
    env = os.environ.get("PPL_SEED")
    return int(env) if env else None


@dataclass
class RunSummary:
    count: int
    ess: float
    mean: object
    std: object
    log_z: object
    wall_time_s: float

    def emit(self, extra=None):
        doc = {
            "count": self.count,
            "ess": self.ess,
            "mean": self.mean,
            "std": self.std,
            "log_z": self.log_z,
            "wall_time_s": self.wall_time_s,
        }
        if extra:
            doc.update(extra)
        click.echo(json.dumps({"summary": doc}))


def _numeric_rows(values):
    """Return an (n, d) array when every value is a number or all are
    equal-length numeric vectors; None otherwise."""
    rows = []
    width = None
    for v in values:
        if isinstance(v, (bool, int, float)):
            row = [float(v)]
        elif isinstance(v, list) and all(
            isinstance(x, (bool, int, float)) for x in v
        ):
            row = [float(x) for x in v]
        else:
            return None
        if width is None:
            width = len(row)
        elif width != len(row):
            return None
        rows.append(row)
    return np.asarray(rows) if rows else None


def summarize(samples, log_z, wall) -> RunSummary:
    logw = np.array([s.logW for s in samples], dtype=float)
    shift = logw.max() if len(logw) else 0.0
    w = np.exp(logw - shift)
    total = w.sum()
    ess = float(total * total / np.sum(w * w)) if len(w) else 0.0
    mean = std = None
    rows = _numeric_rows([s.value for s in samples])
    if rows is not None and total > 0:
        probs = w / total
        m = probs @ rows
        var = probs @ (rows - m) ** 2
        mean = [float(x) for x in m]
        std = [float(math.sqrt(max(x, 0.0))) for x in var]
        if rows.shape[1] == 1:
            mean, std = mean[0], std[0]
    return RunSummary(
        count=len(samples),
        ess=ess,
        mean=mean,
        std=std,
        log_z=log_z,
        wall_time_s=wall,
    )


def _emit_samples(samples, burn_in, thin):
    kept = samples[burn_in::thin]
    for s in kept:
        click.echo(
            json.dumps({"value": to_wire(s.value), "log_weight": s.logW})
        )
    return kept


def _log_mean_weight(samples):
    logw = np.array([s.logW for s in samples], dtype=float)
    shift = logw.max()
    if not np.isfinite(shift):
        return -math.inf
    return float(shift + math.log(np.mean(np.exp(logw - shift))))


@click.group()
def main():
    """Probabilistic programs: compile, transform, infer, serve."""


@main.command("compile-graph")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
def cmd_compile_graph(file):
    """Compile a first-order program to its graphical model as JSON."""
    if not file.endswith(".foppl"):
        _fail(COMPILE_EXIT, "graph compilation requires a .foppl file")
    program = _load(file)
    try:
        g, result = compile_graph(program)
    except (GraphCompileError, EvalError, DistributionError) as err:
        _fail(COMPILE_EXIT, str(err))
    click.echo(json.dumps(graph_to_json(g, result), indent=2))


@main.command("transform")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--address", "do_address", is_flag=True, help="addressing pass")
@click.option("--cps", "do_cps", is_flag=True,
              help="continuation pass (implies --address)")
def cmd_transform(file, do_address, do_cps):
    """Print a higher-order program after the chosen passes."""
    program = _load(file)
    if program.lang != "hoppl":
        _fail(COMPILE_EXIT, "transform applies to .hoppl programs")
    try:
        if do_address or do_cps:
            program = address_hoppl(program)
        if do_cps:
            program = cps_transform(program)
    except HopplError as err:
        _fail(COMPILE_EXIT, str(err))
    for name, params, body in program.defs:
        head = " ".join(str(q) for q in params)
        click.echo(f"(defn {name} [{head}]\n  {print_expr(body)})")
    click.echo(print_expr(program.body))


def _run_eval(program, alg, n, seed, systematic, particles):
    if alg == "lw":
        samples = eval_inference.likelihood_weighting(program, n, seed=seed)
        return samples, _log_mean_weight(samples), None
    if alg == "mh-independent":
        chain = eval_inference.independent_mh(program, n, seed=seed)
        return [eval_inference.WeightedSample(v, 0.0) for v in chain], None, None
    if alg == "mh":
        chain = eval_inference.single_site_mh(program, n, seed=seed)
        return [eval_inference.WeightedSample(v, 0.0) for v in chain], None, None
    if alg == "smc":
        samples, log_z = eval_inference.smc(
            program, n, seed=seed, systematic=systematic
        )
        return samples, log_z, None
    result = eval_inference.bbvi(program, n, particles, seed=seed)
    extra = {
        "elbo": result.elbo_trace[-1] if result.elbo_trace else None,
        "proposal": {a: d.wire_spec() for a, d in sorted(result.Q.items())},
    }
    return result.samples, None, extra


def _run_graph(program, alg, n, seed, sweeps, damping):
    if alg == "ep":
        fg = compile_factor_graph(program)
        result = ep(fg, sweeps=sweeps, damping=damping)
        for name in sorted(result.marginals):
            m, v = result.marginals[name]
            click.echo(
                json.dumps({"variable": str(name), "mean": m, "variance": v})
            )
        extra = {"skipped_updates": result.skipped_updates}
        return [], result.logZ, extra
    g, result_expr = compile_graph(program)
    rng = make_rng(seed)
    x0 = graph_inference.initial_trace(g, rng)
    if alg == "gibbs":
        traces = graph_inference.gibbs(
            g, graph_inference.default_proposals(g), x0, n, rng
        )
    else:
        traces = graph_inference.hmc(g, x0, n, rng=rng)
    env0 = graph_inference.observed_values(g)
    samples = []
    for tr in traces:
        env = dict(env0)
        env.update(tr.X)
        samples.append(
            eval_inference.WeightedSample(eval_det(result_expr, env), 0.0)
        )
    return samples, None, None


def _run_controller(program, alg, n, seed, systematic, remote):
    if remote is not None:
        host, _, port = remote.partition(":")
        transport = WireTransport(host or "127.0.0.1", int(port))
    else:
        transport = InProcessTransport(program)
    cfg = controllers.ControllerConfig(
        algorithm=alg,
        count=n,
        seed=seed,
        transport=transport,
        systematic=systematic,
    )
    try:
        if alg == "lw":
            samples = controllers.controller_lw(cfg)
            return samples, _log_mean_weight(samples)
        if alg == "mh":
            return controllers.controller_mh(cfg), None
        return controllers.controller_smc(cfg)
    finally:
        transport.close()


@main.command("run")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--alg", required=True,
              type=click.Choice(sorted(set(_EVAL_ALGS + _GRAPH_ALGS))))
@click.option("--samples", "n", default=1000, show_default=True,
              help="draws, chain steps, particles, or optimizer steps")
@click.option("--seed", type=int, default=None,
              help="rng seed; falls back to PPL_SEED")
@click.option("--burn-in", default=0, show_default=True)
@click.option("--thin", default=1, show_default=True)
@click.option("--systematic", is_flag=True, help="systematic resampling (smc)")
@click.option("--particles", default=100, show_default=True,
              help="runs per optimizer step (bbvi)")
@click.option("--sweeps", default=20, show_default=True, help="ep sweeps")
@click.option("--damping", default=0.8, show_default=True, help="ep damping")
@click.option("--remote", default=None, metavar="HOST:PORT",
              help="drive a running execution server instead of local runs")
def cmd_run(file, alg, n, seed, burn_in, thin, systematic, particles,
            sweeps, damping, remote):
    """Run inference on a program and stream weighted samples."""
    seed = _seed_option(seed)
    if n <= 0:
        _fail(COMPILE_EXIT, "--samples must be positive")
    program = _load(file)
    started = time.time()
    try:
        if program.lang == "hoppl" or remote is not None:
            if alg not in _HOPPL_ALGS:
                _fail(
                    COMPILE_EXIT,
                    f"{alg} needs the first-order language; higher-order "
                    f"programs support {', '.join(_HOPPL_ALGS)}",
                )
            samples, log_z = _run_controller(
                program, alg, n, seed, systematic, remote
            )
            extra = None
        elif alg in _GRAPH_ALGS:
            samples, log_z, extra = _run_graph(
                program, alg, n, seed, sweeps, damping
            )
        else:
            samples, log_z, extra = _run_eval(
                program, alg, n, seed, systematic, particles
            )
    except (
        eval_inference.InferenceError,
        graph_inference.InferenceError,
        controllers.ControllerError,
        EPError,
        EvalError,
        DistributionError,
        HopplError,
    ) as err:
        _fail(RUNTIME_EXIT, str(err))
    except GraphCompileError as err:
        _fail(COMPILE_EXIT, str(err))
    kept = _emit_samples(samples, burn_in, thin)
    summarize(kept, log_z, time.time() - started).emit(extra)


@main.command("serve")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--port", default=4000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def cmd_serve(file, port, host):
    """Serve a program over newline-delimited JSON until interrupted."""
    try:
        with open(file, "r", encoding="utf-8") as fh:
            program = desugar_hoppl(parse(fh.read()))
    except FrontendError as err:
        _fail(COMPILE_EXIT, f"{file}: {err}")
    try:
        server = HopplTCPServer(program, host=host, port=port)
    except (HopplError, OSError) as err:
        _fail(RUNTIME_EXIT, str(err))
    click.echo(f"serving {file} on {host}:{server.port}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


if __name__ == "__main__":
    main()
