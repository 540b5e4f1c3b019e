"""Inference controllers speaking the execution-server message
protocol.

The server runs the program and pauses at sample/observe; the
controller owns all randomness and decides what value each paused
process receives. Likelihood weighting continues with fresh draws,
single-site Metropolis-Hastings replays stored draws, and SMC uses
fork to replicate processes at observe barriers.

All three work over any transport with send(msg) -> dict, so the same
controller drives an in-process table or a TCP connection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import from_wire_spec, log_prob, make_rng, sample
from .eval_inference import WeightedSample, accept_single_site
from .hoppl_runtime import InProcessTransport
from .values import from_wire, to_wire


class ControllerError(Exception):
    """Raised when a run cannot finish; partial holds completed output."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial if partial is not None else []


@dataclass
class ControllerConfig:
    algorithm: str
    count: int
    seed: int | None = None
    transport: object = None
    program: object = None
    systematic: bool = False
    rng: object = field(default=None, repr=False)

    def ready(self):
        if self.count <= 0:
            raise ControllerError("count must be positive")
        transport = self.transport
        if transport is None:
            if self.program is None:
                raise ControllerError("need a transport or a program")
            transport = InProcessTransport(self.program)
        rng = self.rng if self.rng is not None else make_rng(self.seed)
        return transport, rng


def _call(transport, msg, partial):
    try:
        resp = transport.send(msg)
    except Exception as err:
        raise ControllerError(f"transport failure: {err}", partial) from err
    if not isinstance(resp, dict) or "type" not in resp:
        raise ControllerError(f"malformed server response: {resp!r}", partial)
    if resp["type"] == "error":
        raise ControllerError(f"server error: {resp['message']}", partial)
    return resp


# ---------------------------------------------------------------------------
# Likelihood weighting


def controller_lw(cfg: ControllerConfig):
    """Run count independent processes; draw at samples, weight at
    observes, collect returns."""
    transport, rng = cfg.ready()
    out = []
    for l in range(cfg.count):
        pid = f"lw-{l}"
        resp = _call(transport, {"type": "start", "pid": pid}, out)
        log_w = 0.0
        while resp["type"] != "return":
            d = from_wire_spec(resp["dist"])
            if resp["type"] == "sample":
                value = sample(d, rng)
            elif resp["type"] == "observe":
                value = from_wire(resp["value"])
                log_w += log_prob(d, value)
            else:
                raise ControllerError(f"unexpected message {resp['type']}", out)
            resp = _call(
                transport,
                {"type": "continue", "pid": pid, "value": to_wire(value)},
                out,
            )
        out.append(WeightedSample(from_wire(resp["value"]), log_w))
    return out


# ---------------------------------------------------------------------------
# Single-site Metropolis-Hastings


def _mh_run(transport, pid, rng, db, beta, partial):
    """One full execution reusing stored draws except at beta.

    Returns (value, X, logP) where X holds draws by address and logP
    holds per-address log densities for samples and observes alike.
    """
    X, logP = {}, {}
    resp = _call(transport, {"type": "start", "pid": pid}, partial)
    while resp["type"] != "return":
        addr = resp["addr"]
        d = from_wire_spec(resp["dist"])
        if resp["type"] == "sample":
            if addr != beta and addr in db:
                value = db[addr]
            else:
                value = sample(d, rng)
            X[addr] = value
            logP[addr] = log_prob(d, value)
        else:
            value = from_wire(resp["value"])
            logP[addr] = log_prob(d, value)
        resp = _call(
            transport,
            {"type": "continue", "pid": pid, "value": to_wire(value)},
            partial,
        )
    return from_wire(resp["value"]), X, logP


def controller_mh(cfg: ControllerConfig):
    """Single-site Metropolis-Hastings over the message protocol.

    Each step reruns the program from the start, redrawing one chosen
    address and replaying the rest; the first iteration is always
    accepted. Output samples are unweighted.
    """
    transport, rng = cfg.ready()
    out = []
    value, X, logP = None, {}, {}
    for s in range(cfg.count):
        if X:
            addrs = sorted(X)
            beta = addrs[rng.integers(len(addrs))]
        else:
            beta = None
        value_new, X_new, logP_new = _mh_run(
            transport, f"mh-{s}", rng, X, beta, out
        )
        if s == 0:
            accept = True
        elif not X:
            accept = True  # no latent sites: deterministic rerun
        else:
            log_alpha = accept_single_site(beta, X_new, X, logP_new, logP)
            accept = math.log(rng.random()) < log_alpha
        if accept:
            value, X, logP = value_new, X_new, logP_new
        out.append(WeightedSample(value, 0.0))
    return out


# ---------------------------------------------------------------------------
# Sequential Monte Carlo


def _advance(transport, pid, resp, rng, partial):
    """Drive one process to its next observe or its return; samples on
    the way are drawn here."""
    while True:
        if resp["type"] == "return":
            return ("return", pid, from_wire(resp["value"]))
        if resp["type"] == "observe":
            d = from_wire_spec(resp["dist"])
            return ("observe", pid, resp["addr"], d, from_wire(resp["value"]))
        if resp["type"] != "sample":
            raise ControllerError(f"unexpected message {resp['type']}", partial)
        value = sample(from_wire_spec(resp["dist"]), rng)
        resp = _call(
            transport,
            {"type": "continue", "pid": pid, "value": to_wire(value)},
            partial,
        )


def _offspring(rng, log_w, L, systematic):
    shifted = np.asarray(log_w) - max(log_w)
    w = np.exp(shifted)
    probs = w / w.sum()
    if systematic:
        positions = (rng.random() + np.arange(L)) / L
        counts = np.zeros(L, dtype=int)
        edges = np.cumsum(probs)
        j = 0
        for u in positions:
            while u > edges[j]:
                j += 1
            counts[j] += 1
        return counts
    return rng.multinomial(L, probs)


def controller_smc(cfg: ControllerConfig):
    """SMC over the message protocol: every observe is a resampling
    barrier that all processes must reach at the same address.

    Returns (samples, log_z). Offspring replace their parents through
    fork; every parent is killed after the barrier, including parents
    with exactly one offspring where continuing in place would do.
    """
    transport, rng = cfg.ready()
    L = cfg.count
    log_z = 0.0
    states = []
    for l in range(L):
        pid = f"smc-0-{l}"
        resp = _call(transport, {"type": "start", "pid": pid}, [])
        states.append(_advance(transport, pid, resp, rng, []))
    generation = 0
    while True:
        kinds = {s[0] for s in states}
        if kinds == {"return"}:
            break
        if kinds != {"observe"}:
            raise ControllerError(
                "SMC assertion failed: every process must pause at an "
                "observe, but some returned first"
            )
        addrs = {s[2] for s in states}
        if len(addrs) > 1:
            raise ControllerError(
                "SMC assertion failed: processes paused at different "
                f"observe addresses {sorted(addrs)}; observes must not "
                "depend on sampled control flow"
            )
        log_w = [log_prob(d, value) for _, _, _, d, value in states]
        if all(w == -math.inf for w in log_w):
            raise ControllerError("all SMC weights are zero at a barrier")
        shift = max(log_w)
        log_z += shift + math.log(
            sum(math.exp(w - shift) for w in log_w) / L
        )
        counts = _offspring(rng, log_w, L, cfg.systematic)
        generation += 1
        children = []
        child_n = 0
        for (kind, pid, addr, d, value), o in zip(states, counts):
            for _ in range(int(o)):
                new_pid = f"smc-{generation}-{child_n}"
                child_n += 1
                resp = _call(
                    transport,
                    {
                        "type": "fork",
                        "pid": pid,
                        "new_pid": new_pid,
                        "value": to_wire(value),
                    },
                    [],
                )
                children.append(_advance(transport, new_pid, resp, rng, []))
        for kind, pid, addr, d, value in states:
            _call(transport, {"type": "kill", "pid": pid}, [])
        states = children
    samples = [WeightedSample(s[2], 0.0) for s in states]
    return samples, log_z
