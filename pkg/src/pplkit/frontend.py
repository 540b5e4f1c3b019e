"""S-expression reader and desugarers for the two modeling languages.

parse() turns source text into nested list/atom forms with source
positions. desugar_foppl() reduces sugared forms (multi-binding let,
foreach, loop, factor, case) to the eight-form first-order core;
desugar_hoppl() reduces to the higher-order core (fn, general
application, quote) in which let is an immediately-applied fn.

Fresh names render as prefix + "#" + counter. The module-level
fresh_symbol() draws from a process-global allocator that parse() seeds
past any colliding source symbol; the desugarers and the later program
transforms use per-program allocators with the same scheme so their
output is deterministic for a given source text.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field

from .values import Symbol, print_value

# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Constant:
    value: object
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class Variable:
    name: str
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class ProcName:
    # first-class reference to a top-level HOPPL procedure
    name: str
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class Let:
    var: str
    bound: "Expr"
    body: "Expr"
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class If:
    pred: "Expr"
    conseq: "Expr"
    alt: "Expr"
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class AppUser:
    proc: str
    args: tuple
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class AppPrim:
    prim: str
    args: tuple
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class Sample:
    dist: "Expr"
    addr: object = None  # absent before the addressing transforms
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class Observe:
    dist: "Expr"
    value: "Expr"
    addr: object = None
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class Fn:
    params: tuple
    body: "Expr"
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class App:
    fn: "Expr"
    args: tuple
    pos: tuple = field(default=None, compare=False)


@dataclass(frozen=True)
class Quote:
    datum: object
    pos: tuple = field(default=None, compare=False)


Expr = (
    Constant,
    Variable,
    ProcName,
    Let,
    If,
    AppUser,
    AppPrim,
    Sample,
    Observe,
    Fn,
    App,
    Quote,
)


@dataclass(frozen=True)
class Program:
    # defs preserve definition order; FOPPL bodies may only call earlier defs
    defs: tuple  # of (name, params: tuple, body: Expr)
    body: "Expr"
    lang: str  # "foppl" | "hoppl"

    def def_map(self):
        return {name: (params, body) for name, params, body in self.defs}


class FrontendError(Exception):
    def __init__(self, msg, pos=None):
        if pos is not None:
            msg = f"{msg} (line {pos[0]}, column {pos[1]})"
        super().__init__(msg)
        self.pos = pos


class ParseError(FrontendError):
    pass


class DesugarError(FrontendError):
    pass


# ---------------------------------------------------------------------------
# Primitive name registry (implementations live in target_eval)

ARITH_PRIMS = ("+", "-", "*", "/", "sqrt", "exp", "log", "tanh", "abs")
COMPARE_PRIMS = ("=", "<", ">", "<=", ">=")
LOGIC_PRIMS = ("and", "or", "not")
DATA_PRIMS = (
    "vector",
    "hash-map",
    "get",
    "put",
    "first",
    "second",
    "last",
    "rest",
    "nth",
    "append",
    "conj",
    "prepend",
    "remove",
    "empty?",
    "count",
    "range",
    "list",
    "print",
)
MATRIX_PRIMS = ("mat-mul", "mat-add", "mat-transpose", "mat-tanh", "mat-repmat")
INTERNAL_PRIMS = ("case-error", "push-addr", "eval")

DIST_CONSTRUCTORS = (
    "normal",
    "bernoulli",
    "flip",
    "beta",
    "gamma",
    "exponential",
    "poisson",
    "discrete",
    "uniform-discrete",
    "uniform-continuous",
    "uniform",
    "dirichlet",
    "dirac",
    "factor-dist",
)

# log-density primitives produced by the score conversion
DENSITY_PRIMS = (
    "p_norm",
    "p_bern",
    "p_flip",
    "p_beta",
    "p_gamma",
    "p_exp",
    "p_pois",
    "p_disc",
    "p_unif_disc",
    "p_unif_cont",
    "p_unif",
    "p_dirich",
    "p_dirac",
    "p_factor",
)

PRIM_NAMES = frozenset(
    ARITH_PRIMS
    + COMPARE_PRIMS
    + LOGIC_PRIMS
    + DATA_PRIMS
    + MATRIX_PRIMS
    + INTERNAL_PRIMS
    + DIST_CONSTRUCTORS
    + DENSITY_PRIMS
)


# ---------------------------------------------------------------------------
# Fresh symbols


class FreshSymbols:
    """Monotone fresh-name allocator, safe for concurrent callers."""

    _TAGGED = re.compile(r".*#(\d+)$")

    def __init__(self):
        self._next = 1
        self._lock = threading.Lock()

    def reserve(self, symbols):
        """Advance the counter past any prefix#N symbol in the source."""
        with self._lock:
            for s in symbols:
                m = self._TAGGED.match(s)
                if m:
                    self._next = max(self._next, int(m.group(1)) + 1)

    def fresh(self, prefix="v"):
        with self._lock:
            n = self._next
            self._next += 1
        return Symbol(f"{prefix}#{n}")


_GLOBAL_FRESH = FreshSymbols()


def fresh_symbol(prefix="v"):
    return _GLOBAL_FRESH.fresh(prefix)


def _symbols_in(form):
    if isinstance(form, Symbol):
        yield form
    elif isinstance(form, list):
        for sub in form:
            yield from _symbols_in(sub)


def allocator_for(forms):
    """Per-program allocator seeded exactly like the global one."""
    alloc = FreshSymbols()
    for form in forms:
        alloc.reserve(_symbols_in(form))
    return alloc


# ---------------------------------------------------------------------------
# Reader


class SForm(list):
    """A parsed list form; knows where it started."""

    __slots__ = ("pos",)

    def __init__(self, items=(), pos=None):
        super().__init__(items)
        self.pos = pos


_TOKEN = re.compile(
    r"""(?P<ws>[\s,]+)
      | (?P<comment>;[^\n]*)
      | (?P<open>[(\[{])
      | (?P<close>[)\]}])
      | (?P<string>"(?:\\.|[^"\\])*")
      | (?P<atom>[^\s,()\[\]{};"]+)
    """,
    re.VERBOSE,
)

_INT = re.compile(r"[+-]?\d+$")
_FLOAT = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+([eE][+-]?\d+))([eE][+-]?\d+)?$")

_MATCHING = {"(": ")", "[": "]", "{": "}"}
_WRAPPER = {"[": "vector", "{": "hash-map"}


def _classify_atom(text, pos):
    if text == "true":
        return True
    if text == "false":
        return False
    if text == "nil":
        return None
    if _INT.match(text):
        return int(text)
    if _FLOAT.match(text):
        return float(text)
    return Symbol(text)


def _tokens(text):
    line, col = 1, 1
    i = 0
    while i < len(text):
        m = _TOKEN.match(text, i)
        if m is None:
            raise ParseError(f"unreadable character {text[i]!r}", (line, col))
        kind = m.lastgroup
        tok = m.group()
        if kind not in ("ws", "comment"):
            yield kind, tok, (line, col)
        nl = tok.count("\n")
        if nl:
            line += nl
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        i = m.end()


def parse(text):
    """Read source text into a list of top-level forms.

    Atoms classify as int, float, boolean, nil, string, or Symbol;
    [...] reads as (vector ...) and {...} as (hash-map ...).
    """
    stack = [SForm()]
    openers = []
    for kind, tok, pos in _tokens(text):
        if kind == "open":
            form = SForm(pos=pos)
            if tok in _WRAPPER:
                form.append(Symbol(_WRAPPER[tok]))
            stack.append(form)
            openers.append((tok, pos))
        elif kind == "close":
            if not openers:
                raise ParseError(f"unexpected {tok!r}", pos)
            opener, opos = openers.pop()
            if _MATCHING[opener] != tok:
                raise ParseError(
                    f"mismatched delimiter: {opener!r} closed by {tok!r}", pos
                )
            form = stack.pop()
            stack[-1].append(form)
        elif kind == "string":
            raw = tok[1:-1]
            unescaped = raw.encode().decode("unicode_escape")
            stack[-1].append(unescaped)
        else:
            stack[-1].append(_classify_atom(tok, pos))
    if openers:
        opener, opos = openers[-1]
        raise ParseError(f"unbalanced {opener!r}", opos)
    forms = list(stack[0])
    if not forms:
        raise ParseError("empty input")
    _GLOBAL_FRESH.reserve(_symbols_in(forms))
    return forms


# ---------------------------------------------------------------------------
# Shared desugaring helpers


def _pos_of(form):
    return form.pos if isinstance(form, SForm) else None


def _is_call(form, head):
    return (
        isinstance(form, list)
        and len(form) > 0
        and isinstance(form[0], Symbol)
        and form[0] == head
    )


def _binding_pairs(form, what):
    # binding vectors arrive as (vector v1 e1 v2 e2 ...) via the reader
    if not _is_call(form, "vector"):
        raise DesugarError(f"{what} expects a [v e ...] binding vector", _pos_of(form))
    items = list(form[1:])
    if len(items) % 2 != 0:
        raise DesugarError(f"odd number of forms in {what} bindings", _pos_of(form))
    pairs = []
    for i in range(0, len(items), 2):
        name = items[i]
        if not isinstance(name, Symbol):
            raise DesugarError(f"{what} binds a non-symbol: {name!r}", _pos_of(form))
        pairs.append((name, items[i + 1]))
    return pairs


def _param_list(form, what):
    if not _is_call(form, "vector"):
        raise DesugarError(f"{what} expects a [v ...] parameter vector", _pos_of(form))
    params = []
    for p in form[1:]:
        if not isinstance(p, Symbol):
            raise DesugarError(f"{what} parameter is not a symbol: {p!r}", _pos_of(form))
        params.append(p)
    return tuple(params)


def _split_defns(forms, lang):
    defns, rest = [], []
    for form in forms:
        if _is_call(form, "defn"):
            if rest:
                raise DesugarError("defn after the program body", _pos_of(form))
            if len(form) != 4:
                raise DesugarError(
                    "defn expects (defn name [params] body)", _pos_of(form)
                )
            _, name, params, body = form
            if not isinstance(name, Symbol):
                raise DesugarError("defn name must be a symbol", _pos_of(form))
            defns.append((name, _param_list(params, "defn"), body))
        else:
            rest.append(form)
    if len(rest) != 1:
        raise DesugarError(
            f"a {lang} program must end in exactly one expression, found {len(rest)}"
        )
    return defns, rest[0]


def _fold_constant(expr):
    # licensed pre-pass: loop/foreach bounds may be any closed deterministic
    # expression, reduced here before the bound check
    from .target_eval import partial_eval

    return partial_eval(expr)


# ---------------------------------------------------------------------------
# FOPPL desugaring


class _FopplCtx:
    def __init__(self, alloc):
        self.alloc = alloc
        self.known_procs = {}  # name -> arity, in definition order


def desugar_foppl(forms):
    """Reduce sugared FOPPL forms to the eight-form core Program."""
    alloc = allocator_for(forms)
    ctx = _FopplCtx(alloc)
    defns, body_form = _split_defns(forms, "FOPPL")
    out_defs = []
    for name, params, body in defns:
        if name in ctx.known_procs:
            raise DesugarError(f"procedure {name} defined twice")
        # the procedure itself is not yet visible: no recursion
        expr = _f_expr(body, ctx)
        ctx.known_procs[name] = len(params)
        out_defs.append((name, params, expr))
    body = _f_expr(body_form, ctx)
    for name, params, expr in out_defs:
        _check_closed(expr, set(params), f"procedure {name}")
    _check_closed(body, set(), "the program body")
    return Program(defs=tuple(out_defs), body=body, lang="foppl")


def _check_closed(e, bound, where):
    """First-order programs have static scope, so report stray names
    at lowering rather than during a later run."""
    match e:
        case Variable(name=n, pos=pos):
            if n not in bound:
                raise DesugarError(f"unbound symbol {n} in {where}", pos)
        case Let(var=v, bound=b, body=body):
            _check_closed(b, bound, where)
            _check_closed(body, bound | {v}, where)
        case If(pred=p, conseq=c, alt=a):
            for sub in (p, c, a):
                _check_closed(sub, bound, where)
        case Sample(dist=d):
            _check_closed(d, bound, where)
        case Observe(dist=d, value=v):
            _check_closed(d, bound, where)
            _check_closed(v, bound, where)
        case AppPrim(args=args) | AppUser(args=args):
            for a in args:
                _check_closed(a, bound, where)


def _f_body_chain(bodies, ctx, pos):
    exprs = [_f_expr(b, ctx) for b in bodies]
    out = exprs[-1]
    for e in reversed(exprs[:-1]):
        out = Let(ctx.alloc.fresh("_"), e, out, pos=pos)
    return out


def _f_expr(form, ctx):
    pos = _pos_of(form)
    if isinstance(form, Symbol):
        return Variable(form, pos=pos)
    if not isinstance(form, list):
        return Constant(form, pos=pos)
    if len(form) == 0:
        raise DesugarError("empty application ()", pos)
    head = form[0]
    if isinstance(head, Symbol):
        if head == "let":
            if len(form) < 3:
                raise DesugarError("let expects bindings and a body", pos)
            pairs = _binding_pairs(form[1], "let")
            out = _f_body_chain(form[2:], ctx, pos)
            for name, bound in reversed(pairs):
                out = Let(name, _f_expr(bound, ctx), out, pos=pos)
            return out
        if head == "if":
            if len(form) != 4:
                raise DesugarError("if expects (if pred conseq alt)", pos)
            return If(
                _f_expr(form[1], ctx),
                _f_expr(form[2], ctx),
                _f_expr(form[3], ctx),
                pos=pos,
            )
        if head == "sample":
            if len(form) != 2:
                raise DesugarError("sample expects one argument", pos)
            return Sample(_f_expr(form[1], ctx), pos=pos)
        if head == "observe":
            if len(form) != 3:
                raise DesugarError("observe expects two arguments", pos)
            return Observe(_f_expr(form[1], ctx), _f_expr(form[2], ctx), pos=pos)
        if head == "factor":
            if len(form) != 2:
                raise DesugarError("factor expects one argument", pos)
            return Observe(
                AppPrim("factor-dist", (_f_expr(form[1], ctx),), pos=pos),
                Constant(None),
                pos=pos,
            )
        if head == "foreach":
            return _f_foreach(form, ctx)
        if head == "loop":
            return _f_loop(form, ctx)
        if head == "case":
            return _f_case(form, ctx)
        if head in ("fn", "defn", "quote", "eval"):
            raise DesugarError(f"{head} is not part of the first-order language", pos)
        if len(form) >= 1 and head in ctx.known_procs:
            if len(form) - 1 != ctx.known_procs[head]:
                raise DesugarError(
                    f"{head} expects {ctx.known_procs[head]} arguments", pos
                )
            return AppUser(head, tuple(_f_expr(a, ctx) for a in form[1:]), pos=pos)
        if head in PRIM_NAMES:
            return AppPrim(head, tuple(_f_expr(a, ctx) for a in form[1:]), pos=pos)
        raise DesugarError(
            f"unknown procedure {head} (defined later, recursive, or misspelled?)", pos
        )
    raise DesugarError(
        "operator must be a procedure or primitive name in the first-order language",
        pos,
    )


def _constant_int(form, ctx, what):
    folded = _fold_constant(_f_expr(form, ctx))
    if isinstance(folded, Constant) and isinstance(folded.value, int):
        return folded.value
    raise DesugarError(f"{what} bound must be a constant integer", _pos_of(form))


def _f_foreach(form, ctx):
    pos = _pos_of(form)
    if len(form) < 4:
        raise DesugarError("foreach expects (foreach c [v e ...] body...)", pos)
    c = _constant_int(form[1], ctx, "foreach")
    pairs = _binding_pairs(form[2], "foreach")
    elements = []
    for i in range(c):
        out = _f_body_chain(form[3:], ctx, pos)
        for name, seq in reversed(pairs):
            getter = AppPrim(
                "get", (_f_expr(seq, ctx), Constant(i)), pos=pos
            )
            out = Let(name, getter, out, pos=pos)
        elements.append(out)
    return AppPrim("vector", tuple(elements), pos=pos)


def _f_loop(form, ctx):
    pos = _pos_of(form)
    if len(form) < 4:
        raise DesugarError("loop expects (loop c e f e1 ... en)", pos)
    c = _constant_int(form[1], ctx, "loop")
    init = _f_expr(form[2], ctx)
    fname = form[3]
    if not isinstance(fname, Symbol):
        raise DesugarError("loop expects a procedure name", pos)
    extra = [_f_expr(a, ctx) for a in form[4:]]
    bound_names = [ctx.alloc.fresh("a") for _ in extra]

    def call(i, acc):
        args = (Constant(i), acc) + tuple(Variable(n) for n in bound_names)
        if fname in ctx.known_procs:
            return AppUser(fname, args, pos=pos)
        if fname in PRIM_NAMES:
            return AppPrim(fname, args, pos=pos)
        raise DesugarError(f"unknown procedure {fname} in loop", pos)

    if c == 0:
        out = init
    else:
        acc_names = [ctx.alloc.fresh("v") for _ in range(c)]
        out = Variable(acc_names[-1])
        for i in reversed(range(c)):
            acc = init if i == 0 else Variable(acc_names[i - 1])
            out = Let(acc_names[i], call(i, acc), out, pos=pos)
    for name, bound in reversed(list(zip(bound_names, extra))):
        out = Let(name, bound, out, pos=pos)
    return out


def _f_case(form, ctx):
    pos = _pos_of(form)
    if len(form) < 4:
        raise DesugarError("case expects a scrutinee and clauses", pos)
    clauses = form[2:]
    default = None
    if len(clauses) % 2 == 1:
        default = clauses[-1]
        clauses = clauses[:-1]
    scrut_name = ctx.alloc.fresh("case")
    if default is None:
        out = AppPrim("case-error", (Variable(scrut_name),), pos=pos)
    else:
        out = _f_expr(default, ctx)
    for i in reversed(range(0, len(clauses), 2)):
        test = _f_expr(clauses[i], ctx)
        branch = _f_expr(clauses[i + 1], ctx)
        out = If(
            AppPrim("=", (Variable(scrut_name), test), pos=pos), branch, out, pos=pos
        )
    return Let(scrut_name, _f_expr(form[1], ctx), out, pos=pos)


# ---------------------------------------------------------------------------
# HOPPL desugaring

_LOOP_HELPER = "loop-helper"

# recursion idioms shipped with every HOPPL program
_PRELUDE_SRC = """
(defn map [f values]
  (if (empty? values)
    values
    (prepend (map f (rest values)) (f (first values)))))
(defn reduce [f x values]
  (if (empty? values)
    x
    (reduce f (f x (first values)) (rest values))))
(defn repeatedly [n f]
  (if (<= n 0)
    []
    (append (repeatedly (- n 1) f) (f))))
(defn loop-helper [i c v g]
  (if (= i c)
    v
    (let [vp (g i v)]
      (loop-helper (+ i 1) c vp g))))
nil
"""


class _HopplCtx:
    def __init__(self, alloc, defnames):
        self.alloc = alloc
        self.defnames = defnames


def desugar_hoppl(forms):
    """Reduce sugared HOPPL forms to the higher-order core Program."""
    prelude_forms = parse(_PRELUDE_SRC)
    prelude_defns, _ = _split_defns(prelude_forms, "HOPPL")
    alloc = allocator_for(forms)
    defns, body_form = _split_defns(forms, "HOPPL")
    user_names = {name for name, _, _ in defns}
    all_defns = [d for d in prelude_defns if d[0] not in user_names] + defns
    defnames = {name for name, _, _ in all_defns}
    ctx = _HopplCtx(alloc, defnames)
    out_defs = []
    for name, params, body in all_defns:
        out_defs.append((name, params, _h_expr(body, ctx, frozenset(params))))
    body = _h_expr(body_form, ctx, frozenset())
    return Program(defs=tuple(out_defs), body=body, lang="hoppl")


def _h_body_chain(bodies, ctx, bound, pos):
    if len(bodies) == 1:
        return _h_expr(bodies[0], ctx, bound)
    name = ctx.alloc.fresh("_")
    first = _h_expr(bodies[0], ctx, bound)
    rest = _h_body_chain(bodies[1:], ctx, bound | {name}, pos)
    return App(Fn((name,), rest, pos=pos), (first,), pos=pos)


def _h_expr(form, ctx, bound):
    pos = _pos_of(form)
    if isinstance(form, Symbol):
        if form in bound:
            return Variable(form, pos=pos)
        if form in ctx.defnames:
            return ProcName(form, pos=pos)
        if form in PRIM_NAMES:
            return Variable(form, pos=pos)
        raise DesugarError(f"unbound symbol {form}", pos)
    if not isinstance(form, list):
        return Constant(form, pos=pos)
    if len(form) == 0:
        raise DesugarError("empty application ()", pos)
    head = form[0]
    if isinstance(head, Symbol):
        if head == "let" and "let" not in bound:
            if len(form) < 3:
                raise DesugarError("let expects bindings and a body", pos)
            pairs = _binding_pairs(form[1], "let")
            names = [n for n, _ in pairs]
            inner_bound = bound | set(names)
            out = _h_body_chain(form[2:], ctx, inner_bound, pos)
            for i in reversed(range(len(pairs))):
                name, bexpr = pairs[i]
                b = _h_expr(bexpr, ctx, bound | set(names[:i]))
                out = App(Fn((name,), out, pos=pos), (b,), pos=pos)
            return out
        if head == "if" and "if" not in bound:
            if len(form) != 4:
                raise DesugarError("if expects (if pred conseq alt)", pos)
            return If(
                _h_expr(form[1], ctx, bound),
                _h_expr(form[2], ctx, bound),
                _h_expr(form[3], ctx, bound),
                pos=pos,
            )
        if head == "fn" and "fn" not in bound:
            if len(form) < 3:
                raise DesugarError("fn expects parameters and a body", pos)
            params = _param_list(form[1], "fn")
            body = _h_body_chain(form[2:], ctx, bound | set(params), pos)
            return Fn(params, body, pos=pos)
        if head == "sample" and "sample" not in bound:
            if len(form) != 2:
                raise DesugarError("sample expects one argument", pos)
            return Sample(_h_expr(form[1], ctx, bound), pos=pos)
        if head == "observe" and "observe" not in bound:
            if len(form) != 3:
                raise DesugarError("observe expects two arguments", pos)
            return Observe(
                _h_expr(form[1], ctx, bound),
                _h_expr(form[2], ctx, bound),
                pos=pos,
            )
        if head == "factor" and "factor" not in bound:
            if len(form) != 2:
                raise DesugarError("factor expects one argument", pos)
            return Observe(
                App(Variable("factor-dist"), (_h_expr(form[1], ctx, bound),), pos=pos),
                Constant(None),
                pos=pos,
            )
        if head == "quote" and "quote" not in bound:
            if len(form) != 2:
                raise DesugarError("quote expects one argument", pos)
            return Quote(_strip_positions(form[1]), pos=pos)
        if head == "case" and "case" not in bound:
            return _h_case(form, ctx, bound, pos)
        if head == "loop" and "loop" not in bound:
            return _h_loop(form, ctx, bound, pos)
        if head == "foreach" and "foreach" not in bound:
            return _h_foreach(form, ctx, bound, pos)
        if head == "defn":
            raise DesugarError("defn only appears at the top level", pos)
    fn = _h_expr(head, ctx, bound)
    return App(fn, tuple(_h_expr(a, ctx, bound) for a in form[1:]), pos=pos)


def _h_case(form, ctx, bound, pos):
    if len(form) < 4:
        raise DesugarError("case expects a scrutinee and clauses", pos)
    clauses = list(form[2:])
    default = None
    if len(clauses) % 2 == 1:
        default = clauses.pop()
    scrut = ctx.alloc.fresh("case")
    inner = (
        SForm([Symbol("case-error"), scrut], pos=pos)
        if default is None
        else default
    )
    for i in reversed(range(0, len(clauses), 2)):
        inner = SForm(
            [
                Symbol("if"),
                SForm([Symbol("="), scrut, clauses[i]], pos=pos),
                clauses[i + 1],
                inner,
            ],
            pos=pos,
        )
    rewritten = SForm(
        [Symbol("let"), SForm([Symbol("vector"), scrut, form[1]], pos=pos), inner],
        pos=pos,
    )
    return _h_expr(rewritten, ctx, bound)


def _h_loop(form, ctx, bound, pos):
    # (loop c e f e1 ... en) rewrites to a loop-helper recursion; the
    # loop sugar expands before let sugar by construction here
    if len(form) < 4:
        raise DesugarError("loop expects (loop c e f e1 ... en)", pos)
    c_form, init_form, f_form = form[1], form[2], form[3]
    extras = list(form[4:])
    bound_c = ctx.alloc.fresh("bound")
    init = ctx.alloc.fresh("init")
    extra_names = [ctx.alloc.fresh("a") for _ in extras]
    g = ctx.alloc.fresh("g")
    i_var, w_var = ctx.alloc.fresh("i"), ctx.alloc.fresh("w")
    bindings = [bound_c, c_form, init, init_form]
    for name, e in zip(extra_names, extras):
        bindings.extend([name, e])
    g_fn = SForm(
        [
            Symbol("fn"),
            SForm([Symbol("vector"), i_var, w_var], pos=pos),
            SForm([f_form, i_var, w_var, *extra_names], pos=pos),
        ],
        pos=pos,
    )
    bindings.extend([g, g_fn])
    rewritten = SForm(
        [
            Symbol("let"),
            SForm([Symbol("vector"), *bindings], pos=pos),
            SForm([Symbol(_LOOP_HELPER), 0, bound_c, init, g], pos=pos),
        ],
        pos=pos,
    )
    return _h_expr(rewritten, ctx, bound)


def _h_foreach(form, ctx, bound, pos):
    if len(form) < 4:
        raise DesugarError("foreach expects (foreach c [v e ...] body...)", pos)
    folded = _fold_constant(_h_expr(form[1], ctx, bound))
    if not (isinstance(folded, Constant) and isinstance(folded.value, int)):
        raise DesugarError("foreach bound must be a constant integer", pos)
    pairs = _binding_pairs(form[2], "foreach")
    elements = []
    for i in range(folded.value):
        bindings = []
        for name, seq in pairs:
            bindings.extend([name, SForm([Symbol("get"), seq, i], pos=pos)])
        elements.append(
            SForm(
                [Symbol("let"), SForm([Symbol("vector"), *bindings], pos=pos)]
                + list(form[3:]),
                pos=pos,
            )
        )
    return _h_expr(SForm([Symbol("vector"), *elements], pos=pos), ctx, bound)


def _strip_positions(form):
    if isinstance(form, list):
        return [_strip_positions(x) for x in form]
    return form


# ---------------------------------------------------------------------------
# Printer


def print_expr(e) -> str:
    match e:
        case Constant(value=v):
            return print_value(v)
        case Variable(name=n) | ProcName(name=n):
            return str(n)
        case Let(var=v, bound=b, body=body):
            return f"(let [{v} {print_expr(b)}] {print_expr(body)})"
        case If(pred=p, conseq=c, alt=a):
            return f"(if {print_expr(p)} {print_expr(c)} {print_expr(a)})"
        case AppUser(proc=f, args=args) | AppPrim(prim=f, args=args):
            return _print_call(f, args)
        case Sample(dist=d, addr=None):
            return f"(sample {print_expr(d)})"
        case Sample(dist=d, addr=a):
            return f"(sample {_print_addr(a)} {print_expr(d)})"
        case Observe(dist=d, value=v, addr=None):
            return f"(observe {print_expr(d)} {print_expr(v)})"
        case Observe(dist=d, value=v, addr=a):
            return f"(observe {_print_addr(a)} {print_expr(d)} {print_expr(v)})"
        case Fn(params=ps, body=b):
            return f"(fn [{' '.join(ps)}] {print_expr(b)})"
        case App(fn=f, args=args):
            inner = " ".join([print_expr(f)] + [print_expr(a) for a in args])
            return f"({inner})"
        case Quote(datum=d):
            return f"(quote {_print_datum(d)})"
    raise TypeError(f"not an Expr: {e!r}")


def _print_call(f, args):
    if not args:
        return f"({f})"
    return f"({f} " + " ".join(print_expr(a) for a in args) + ")"


def _print_addr(a):
    if isinstance(a, str):
        return str(a)
    return print_expr(a)


def _print_datum(d):
    if isinstance(d, list):
        return "(" + " ".join(_print_datum(x) for x in d) + ")"
    return print_value(d)


def print_program(p: Program) -> str:
    lines = []
    for name, params, body in p.defs:
        lines.append(f"(defn {name} [{' '.join(params)}] {print_expr(body)})")
    lines.append(print_expr(p.body))
    return "\n".join(lines)
