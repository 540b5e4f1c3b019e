"""Higher-order program execution: addressing, CPS, and the
interruptible machine behind the message protocol.

The addressing pass threads a call-stack address through the program:
every procedure gains a leading address parameter, every call pushes
a per-call-site identifier, and sample/observe gain an address
argument. The CPS pass then rewrites the program so that every
intermediate step passes its value to an explicit continuation; at
sample/observe the machine surfaces an interrupt carrying that
continuation instead of proceeding. Resuming with a value continues
the run; resuming twice with different process ids forks it, since
continuations close over immutable environments.

The execution server holds a process table mapping process ids to
pending continuations and speaks newline-delimited JSON over a
socket, or the same message dictionaries in process for tests. The
server never draws randomness; controllers supply every sampled
value.
"""

from __future__ import annotations

import json
import socket
import socketserver
from dataclasses import dataclass

from .distributions import Dist
from .frontend import (
    App,
    AppPrim,
    Constant,
    Fn,
    If,
    Observe,
    PRIM_NAMES,
    ProcName,
    Program,
    Quote,
    Sample,
    Variable,
    fresh_symbol,
    parse,
    desugar_hoppl,
)
from .target_eval import EvalError, apply_prim, truthy
from .values import Symbol, from_wire, to_wire

BASE_ADDRESS = "⊤"


class HopplError(Exception):
    pass


def push_address(alpha: str, c) -> str:
    """Append one call-site identifier to an address."""
    return f"{alpha}/{c}"


def address_depth(alpha: str) -> int:
    return alpha.count("/")


# ---------------------------------------------------------------------------
# Addressing transform


class _AddrIds:
    """Per-call-site identifiers: source position when unique,
    deduplicated with a suffix otherwise."""

    def __init__(self):
        self.used = set()
        self.n = 0

    def mint(self, pos):
        self.n += 1
        base = f"{pos[0]}:{pos[1]}" if pos else f"c{self.n}"
        ident = base
        k = 1
        while ident in self.used:
            k += 1
            ident = f"{base}#{k}"
        self.used.add(ident)
        return ident


def address_hoppl(p: Program) -> Program:
    """Thread a call-stack address through a higher-order program."""
    if p.lang != "hoppl":
        raise HopplError("addressing applies to higher-order programs")
    alpha = fresh_symbol("alpha")
    ids = _AddrIds()

    def push_expr(pos):
        return App(
            Variable(Symbol("push-addr")),
            (Variable(alpha), Constant(ids.mint(pos))),
            pos=pos,
        )

    def walk(e):
        match e:
            case Constant() | Variable() | ProcName() | Quote():
                return e
            case If(pred=pr, conseq=c, alt=a, pos=pos):
                return If(walk(pr), walk(c), walk(a), pos=pos)
            case Fn(params=params, body=body, pos=pos):
                return Fn((alpha,) + params, walk(body), pos=pos)
            case App(fn=f, args=args, pos=pos):
                return App(
                    walk(f),
                    (push_expr(pos),) + tuple(walk(a) for a in args),
                    pos=pos,
                )
            case Sample(dist=d, addr=None, pos=pos):
                return Sample(walk(d), addr=push_expr(pos), pos=pos)
            case Observe(dist=d, value=v, addr=None, pos=pos):
                return Observe(walk(d), walk(v), addr=push_expr(pos), pos=pos)
            case Sample() | Observe():
                raise HopplError("program already carries addresses")
        raise HopplError(f"cannot address expression: {e!r}")

    defs = tuple(
        (name, (alpha,) + tuple(params), walk(body))
        for name, params, body in p.defs
    )
    body = Fn((alpha,), walk(p.body))
    return Program(defs=defs, body=body, lang="hoppl@addr")


# ---------------------------------------------------------------------------
# CPS transform


def _cps(e, k, sigma):
    """One continuation-passing step: e evaluated, its value handed to k.

    k is spliced in as an expression (a fn literal or a variable), so
    the result is plain program text again.
    """
    sv = Variable(sigma)
    match e:
        case Constant() | Variable() | ProcName() | Quote():
            return App(k, (sv, e))
        case If(pred=pr, conseq=c, alt=a):
            v = fresh_symbol("v")
            chooser = Fn(
                (sigma, v),
                If(Variable(v), _cps(c, k, sigma), _cps(a, k, sigma)),
            )
            return _cps(pr, chooser, sigma)
        case Fn(params=params, body=body):
            kp = fresh_symbol("k")
            lifted = Fn(params + (kp, sigma), _cps(body, Variable(kp), sigma))
            return App(k, (sv, lifted))
        case App(fn=f, args=args):
            exprs = (f,) + args
            names = [fresh_symbol("v") for _ in exprs]
            out = App(
                Variable(names[0]),
                tuple(Variable(n) for n in names[1:]) + (k, sv),
            )
            for name, sub in zip(reversed(names), reversed(exprs)):
                out = _cps(sub, Fn((sigma, name), out), sigma)
            return out
        case Sample(dist=d, addr=addr):
            va, v = fresh_symbol("v"), fresh_symbol("v")
            hit = App(
                Variable(Symbol("sample*")),
                (Variable(va), Variable(v), k, sv),
            )
            inner = _cps(d, Fn((sigma, v), hit), sigma)
            return _cps(addr, Fn((sigma, va), inner), sigma)
        case Observe(dist=d, value=val, addr=addr):
            va = fresh_symbol("v")
            v1, v2 = fresh_symbol("v"), fresh_symbol("v")
            hit = App(
                Variable(Symbol("observe*")),
                (Variable(va), Variable(v1), Variable(v2), k, sv),
            )
            inner = _cps(val, Fn((sigma, v2), hit), sigma)
            inner = _cps(d, Fn((sigma, v1), inner), sigma)
            return _cps(addr, Fn((sigma, va), inner), sigma)
    raise HopplError(f"cannot transform expression: {e!r}")


def cps_transform(p: Program) -> Program:
    """Rewrite an addressed program into continuation-passing style.

    Every procedure gains trailing continuation and state parameters;
    sample/observe become calls of the interrupt-producing sample* and
    observe*; the top level installs (fn [sigma v] (return v sigma)).
    """
    if p.lang != "hoppl@addr":
        raise HopplError("continuation transform expects an addressed program")
    sigma = fresh_symbol("sigma")

    defs = []
    for name, params, body in p.defs:
        kf = fresh_symbol("k")
        defs.append(
            (name, tuple(params) + (kf, sigma), _cps(body, Variable(kf), sigma))
        )

    if not isinstance(p.body, Fn) or len(p.body.params) != 1:
        raise HopplError("addressed program body must be a one-argument fn")
    alpha = p.body.params[0]
    v = fresh_symbol("v")
    default_k = Fn(
        (sigma, v),
        App(Variable(Symbol("return")), (Variable(v), Variable(sigma))),
    )
    body = Fn((alpha, sigma), _cps(p.body.body, default_k, sigma))
    return Program(defs=tuple(defs), body=body, lang="hoppl@cps")


def transform_hoppl(p: Program, address=True, cps=True) -> Program:
    out = p
    if address and out.lang == "hoppl":
        out = address_hoppl(out)
    if cps and out.lang == "hoppl@addr":
        out = cps_transform(out)
    return out


# ---------------------------------------------------------------------------
# Direct interpreter (for differential testing and quoted code)


class _DirectClosure:
    __slots__ = ("params", "body", "env")

    def __init__(self, params, body, env):
        self.params = params
        self.body = body
        self.env = env

    def __str__(self):
        return f"#<fn of {len(self.params)} arguments>"


def run_direct(p: Program, on_sample=None, on_observe=None):
    """Recursive evaluation of an untransformed higher-order program.

    sample/observe call the given hooks (addr, dist[, value]) and use
    the hook's return value; without hooks they are errors, which
    restricts this evaluator to deterministic programs.
    """
    defs = {name: (params, body) for name, params, body in p.defs}
    return _direct_eval(p.body, {}, defs, on_sample, on_observe)


def _direct_eval(e, env, defs, on_sample, on_observe):
    def ev(x, env):
        return _direct_eval(x, env, defs, on_sample, on_observe)

    match e:
        case Constant(value=v):
            return v
        case Quote(datum=d):
            return d
        case Variable(name=n):
            if n in env:
                return env[n]
            if n in PRIM_NAMES:
                return _PrimVal(n)
            raise EvalError(f"unbound variable {n}", e)
        case ProcName(name=n):
            params, body = defs[n]
            return _DirectClosure(tuple(params), body, None)
        case If(pred=pr, conseq=c, alt=a):
            return ev(c, env) if truthy(ev(pr, env)) else ev(a, env)
        case Fn(params=params, body=body):
            return _DirectClosure(params, body, env)
        case AppPrim(prim=name, args=args):
            return apply_prim(name, [ev(a, env) for a in args], e)
        case App(fn=f, args=args):
            fv = ev(f, env)
            if isinstance(fv, _PrimVal) and fv.name == "eval":
                vals = [ev(a, env) for a in args]
                body2, defs2 = _quoted_program(vals[-1], defs)
                merged = dict(defs2)
                merged.update(defs)
                return _direct_eval(body2, {}, merged, on_sample, on_observe)
            vals = [ev(a, env) for a in args]
            if isinstance(fv, _DirectClosure):
                if len(fv.params) != len(vals):
                    raise EvalError(
                        f"call with {len(vals)} arguments, "
                        f"expected {len(fv.params)}",
                        e,
                    )
                inner = dict(fv.env) if fv.env else {}
                inner.update(zip(fv.params, vals))
                return ev(fv.body, inner)
            if isinstance(fv, _PrimVal):
                return apply_prim(fv.name, vals, e)
            raise EvalError("call of a non-procedure value", e)
        case Sample(dist=d, addr=addr):
            dist = ev(d, env)
            if not isinstance(dist, Dist):
                raise EvalError("sample of a non-distribution value", e)
            if on_sample is None:
                raise EvalError("sample outside an inference run", e)
            return on_sample(ev(addr, env) if addr is not None else None, dist)
        case Observe(dist=d, value=v, addr=addr):
            dist = ev(d, env)
            if not isinstance(dist, Dist):
                raise EvalError("observe of a non-distribution value", e)
            val = ev(v, env)
            if on_observe is None:
                raise EvalError("observe outside an inference run", e)
            a = ev(addr, env) if addr is not None else None
            return on_observe(a, dist, val)
    raise EvalError("not a runnable expression", e)


def _quoted_program(datum, host_defs):
    """Turn quoted data back into a desugared body plus any procedure
    definitions it needs that the host does not already provide."""
    text = _datum_text(datum)
    prog = desugar_hoppl(parse(text))
    defs = {
        name: (params, body)
        for name, params, body in prog.defs
        if name not in host_defs
    }
    return prog.body, defs


def _datum_text(d) -> str:
    if d is None:
        return "nil"
    if d is True:
        return "true"
    if d is False:
        return "false"
    if isinstance(d, Symbol):
        return str(d)
    if isinstance(d, str):
        return json.dumps(d)
    if isinstance(d, (int, float)):
        return repr(d)
    if isinstance(d, list):
        return "(" + " ".join(_datum_text(x) for x in d) + ")"
    raise HopplError(f"quoted datum not renderable: {d!r}")


# ---------------------------------------------------------------------------
# The interruptible machine


class _PrimVal:
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name

    def __str__(self):
        return f"#<primitive {self.name}>"


@dataclass(frozen=True)
class SampleReq:
    pid: object
    addr: str
    dist: Dist
    cont: object


@dataclass(frozen=True)
class ObserveReq:
    pid: object
    addr: str
    dist: Dist
    value: object
    cont: object


@dataclass(frozen=True)
class Return:
    pid: object
    value: object


_SPECIAL = {"sample*", "observe*", "return", "push-addr", "eval"}


class _Closure:
    __slots__ = ("params", "body", "env")

    def __init__(self, params, body, env):
        self.params = params
        self.body = body
        self.env = env

    def __str__(self):
        return f"#<fn of {len(self.params)} arguments>"


class Machine:
    """Trampoline for CPS programs: runs until a value, a return, or a
    sample/observe interrupt. Pure apart from what callers do with the
    interrupts; all state lives in the interrupt's continuation."""

    def __init__(self, program: Program):
        program = transform_hoppl(program)
        if program.lang != "hoppl@cps":
            raise HopplError("machine runs transformed higher-order programs")
        self.program = program
        self.globals = {}
        for name, params, body in program.defs:
            self.globals[name] = _Closure(tuple(params), body, None)
        self.top = _Closure(program.body.params, program.body.body, None)

    # -- trivial expressions -------------------------------------------------
    def _value(self, e, env):
        match e:
            case Constant(value=v):
                return v
            case Quote(datum=d):
                return d
            case Variable(name=n):
                if n in env:
                    return env[n]
                if n in self.globals:
                    return self.globals[n]
                if n in _SPECIAL or n in PRIM_NAMES:
                    return _PrimVal(n)
                raise EvalError(f"unbound variable {n}", e)
            case ProcName(name=n):
                return self.globals[n]
            case Fn(params=params, body=body):
                return _Closure(params, body, env)
        raise HopplError(f"argument is not trivial after the transform: {e!r}")

    def _bind(self, closure, vals, what):
        if len(closure.params) != len(vals):
            raise EvalError(
                f"{what} applied to {len(vals)} values, "
                f"expected {len(closure.params)}",
                None,
            )
        env = dict(closure.env) if closure.env else {}
        env.update(zip(closure.params, vals))
        return closure.body, env

    # -- the trampoline ------------------------------------------------------
    def run(self, expr, env):
        """Step until an interrupt or a bare value."""
        while True:
            match expr:
                case If(pred=p, conseq=c, alt=a):
                    expr = c if truthy(self._value(p, env)) else a
                case App(fn=f, args=args):
                    fv = self._value(f, env)
                    vals = [self._value(a, env) for a in args]
                    step = self._apply(fv, vals)
                    if not isinstance(step, tuple):
                        return step
                    expr, env = step
                case _:
                    return self._value(expr, env)

    def _apply(self, fv, vals):
        """One application: a new (expr, env) state or an interrupt."""
        if isinstance(fv, _Closure):
            return self._bind(fv, vals, "procedure")
        if not isinstance(fv, _PrimVal):
            raise EvalError(f"call of a non-procedure value {fv!r}", None)
        name = fv.name
        if name == "return":
            return Return(pid=vals[1], value=vals[0])
        if name == "sample*":
            addr, dist, k, pid = vals
            if not isinstance(dist, Dist):
                raise EvalError("sample of a non-distribution value", None)
            return SampleReq(pid=pid, addr=addr, dist=dist, cont=k)
        if name == "observe*":
            addr, dist, value, k, pid = vals
            if not isinstance(dist, Dist):
                raise EvalError("observe of a non-distribution value", None)
            return ObserveReq(pid=pid, addr=addr, dist=dist, value=value, cont=k)
        if name == "push-addr":
            alpha, c, k, sigma = vals
            return self._bind(k, [sigma, push_address(alpha, c)], "continuation")
        if name == "eval":
            return self._enter_quoted(vals)
        # ordinary primitive under the machine calling convention:
        # (prim address x1 ... xn continuation state)
        if len(vals) < 3:
            raise EvalError(f"primitive {name} called without continuation", None)
        k, sigma = vals[-2], vals[-1]
        result = apply_prim(name, vals[1:-2])
        return self._bind(k, [sigma, result], "continuation")

    def _enter_quoted(self, vals):
        """Quoted code, transformed on the fly: runs at the eval call's
        address and hands its value to the eval call's continuation."""
        addr, datum, k, sigma = vals
        body, extra_defs = _quoted_program(datum, self.globals)
        if extra_defs:
            mini = Program(
                defs=tuple(
                    (name, params, dbody)
                    for name, (params, dbody) in extra_defs.items()
                ),
                body=Constant(None),
                lang="hoppl",
            )
            for tname, tparams, tbody in transform_hoppl(mini).defs:
                self.globals[tname] = _Closure(tuple(tparams), tbody, None)
        addressed = address_hoppl(Program(defs=(), body=body, lang="hoppl"))
        alpha = addressed.body.params[0]
        sigma2 = fresh_symbol("sigma")
        kvar = fresh_symbol("k")
        expr = _cps(addressed.body.body, Variable(kvar), sigma2)
        return expr, {alpha: addr, kvar: k, sigma2: sigma}

    # -- entry points ---------------------------------------------------------
    def start(self, pid):
        """Begin one execution; returns the first interrupt or value."""
        step = self._apply(self.top, [BASE_ADDRESS, pid])
        return self._finish(step)

    def resume(self, cont, pid, value):
        """Continue (or fork, with a fresh pid) a paused execution."""
        step = self._apply(cont, [pid, value])
        return self._finish(step)

    def _finish(self, step):
        if isinstance(step, tuple):
            return self.run(*step)
        return step


def eval_hoppl(e, env=None, defs=()):
    """Run one transformed expression to a value or an interrupt."""
    m = Machine.__new__(Machine)
    m.globals = {}
    for name, params, body in defs:
        m.globals[name] = _Closure(tuple(params), body, None)
    return m.run(e, dict(env) if env else {})


# ---------------------------------------------------------------------------
# Execution server and transports


class ExecutionServer:
    """Process table over one machine.

    Messages are dictionaries with a "type" field: start, continue,
    fork, kill. sample/observe interrupts answer with the address and
    the distribution's wire form and park the continuation under the
    process id; the controller decides the value and sends it back.
    The server itself never draws a random number.
    """

    def __init__(self, program=None, machine=None):
        if machine is None:
            machine = Machine(program)
        self.machine = machine
        self.table = {}
        self.seen = set()

    @property
    def live_count(self):
        return len(self.table)

    def handle(self, msg) -> dict:
        try:
            return self._dispatch(msg)
        except (EvalError, HopplError) as err:
            pid = msg.get("pid") if isinstance(msg, dict) else None
            self.table.pop(pid, None)
            return _error(f"execution failed: {err}", pid)
        except (KeyError, TypeError, ValueError, AttributeError) as err:
            pid = msg.get("pid") if isinstance(msg, dict) else None
            return _error(f"bad message: {err!r}", pid)

    def _dispatch(self, msg):
        if not isinstance(msg, dict) or "type" not in msg:
            return _error("message must be an object with a type field", None)
        kind = msg["type"]
        if kind == "start":
            pid = msg["pid"]
            if pid in self.seen:
                return _error(f"process id {pid} was already started", pid)
            self.seen.add(pid)
            return self._respond(self.machine.start(pid), pid)
        if kind == "continue":
            pid = msg["pid"]
            if pid not in self.table:
                return _error(f"no paused process {pid}", pid)
            cont = self.table.pop(pid)
            value = from_wire(msg.get("value"))
            return self._respond(self.machine.resume(cont, pid, value), pid)
        if kind == "fork":
            pid, new_pid = msg["pid"], msg["new_pid"]
            if pid not in self.table:
                return _error(f"no paused process {pid}", pid)
            if new_pid in self.seen or new_pid in self.table:
                return _error(f"process id {new_pid} is taken", new_pid)
            self.seen.add(new_pid)
            cont = self.table[pid]  # parent stays paused until killed
            value = from_wire(msg.get("value"))
            return self._respond(self.machine.resume(cont, new_pid, value),
                                 new_pid)
        if kind == "kill":
            pid = msg["pid"]
            if pid not in self.table:
                return _error(f"no paused process {pid}", pid)
            del self.table[pid]
            return {"type": "ok", "pid": pid}
        return _error(f"unknown message type {kind!r}", msg.get("pid"))

    def _respond(self, interrupt, pid):
        match interrupt:
            case SampleReq(addr=addr, dist=dist, cont=cont):
                self.table[pid] = cont
                return {
                    "type": "sample",
                    "pid": pid,
                    "addr": addr,
                    "dist": dist.wire_spec(),
                }
            case ObserveReq(addr=addr, dist=dist, value=value, cont=cont):
                self.table[pid] = cont
                return {
                    "type": "observe",
                    "pid": pid,
                    "addr": addr,
                    "dist": dist.wire_spec(),
                    "value": to_wire(value),
                }
            case Return(value=value):
                return {"type": "return", "pid": pid, "value": to_wire(value)}
        return _error(f"machine produced a bare value {interrupt!r}", pid)


def _error(message, pid):
    out = {"type": "error", "message": message}
    if pid is not None:
        out["pid"] = pid
    return out


class InProcessTransport:
    """Message round trips without a socket; payloads still pass
    through JSON so behavior matches the wire exactly."""

    def __init__(self, program=None, server=None):
        self.server = server if server is not None else ExecutionServer(program)

    def send(self, msg) -> dict:
        wire = json.loads(json.dumps(msg))
        return json.loads(json.dumps(self.server.handle(wire)))

    def close(self):
        pass


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server = ExecutionServer(machine=self.server.machine)
        for raw in self.rfile:
            line = raw.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as err:
                resp = _error(f"request is not valid JSON: {err}", None)
            else:
                resp = server.handle(msg)
            self.wfile.write(json.dumps(resp).encode() + b"\n")
            self.wfile.flush()


class HopplTCPServer(socketserver.ThreadingTCPServer):
    """Newline-delimited JSON endpoint; each connection gets its own
    process table over a shared transformed program."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, program, host="127.0.0.1", port=0):
        self.machine = Machine(program)
        super().__init__((host, port), _LineHandler)

    @property
    def port(self):
        return self.server_address[1]


class WireTransport:
    """Client side of the line protocol."""

    def __init__(self, host, port):
        self.sock = socket.create_connection((host, port))
        self.rfile = self.sock.makefile("rb")

    def send(self, msg) -> dict:
        self.sock.sendall(json.dumps(msg).encode() + b"\n")
        line = self.rfile.readline()
        if not line:
            raise HopplError("server closed the connection")
        return json.loads(line)

    def close(self):
        try:
            self.rfile.close()
        finally:
            self.sock.close()
