"""Rule-file parsing and validation.

A rule file is YAML with three top-level sections::

    kernels:
      laplace:
        declaration: void laplace5(float n, float e, float s, float w, float c, float *o);
        inputs: |
          n : q?[j?-1][i?]
          c : q?[j?][i?]
        outputs: |
          o : laplace(q?[j?][i?])
    globals:
      inputs: |
        float g_cell[j?][i?] => cell[j?][i?]
      outputs: |
        laplace(cell[j][i]) => float g_out[j][i]
    config:
      loop-order: [j, i]
      ranges: {j: [1, 9], i: [1, 9, 1]}

Names ending in ``?`` are inference variables.  A subscript is always an
iteration variable plus an optional integer displacement.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from itertools import combinations

import yaml

from .errors import Diagnostic, SpecError

BACKENDS = ("c99", "cxx")
_NAME = r"[A-Za-z_][A-Za-z0-9_]*"


@dataclass(frozen=True)
class OffsetExpr:
    iter_var: str
    displacement: int = 0
    free: bool = True

    def __str__(self) -> str:
        s = self.iter_var + ("?" if self.free else "")
        if self.displacement > 0:
            s += f"+{self.displacement}"
        elif self.displacement < 0:
            s += f"{self.displacement}"
        return s


@dataclass(frozen=True)
class TermPattern:
    identifier: str
    ident_free: bool = False
    tags: tuple[str, ...] = ()
    subscripts: tuple[OffsetExpr, ...] = ()

    @property
    def dims(self) -> tuple[str, ...]:
        return tuple(s.iter_var for s in self.subscripts)

    @property
    def rank(self) -> int:
        return len(self.subscripts)

    @property
    def free_vars(self) -> frozenset[str]:
        names = {s.iter_var + "?" for s in self.subscripts if s.free}
        if self.ident_free:
            names.add(self.identifier + "?")
        return frozenset(names)

    def __str__(self) -> str:
        s = self.identifier + ("?" if self.ident_free else "")
        s += "".join(f"[{sub}]" for sub in self.subscripts)
        for tag in reversed(self.tags):
            s = f"{tag}({s})"
        return s


@dataclass(frozen=True)
class Param:
    name: str
    text: str
    ctype: str
    passing: str  # "value" | "pointer" | "reference"


@dataclass(frozen=True)
class Declaration:
    text: str
    function: str
    params: tuple[Param, ...]

    def param(self, name: str) -> Param:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


@dataclass
class KernelRule:
    name: str
    declaration: Declaration
    inputs: dict[str, TermPattern]
    outputs: dict[str, TermPattern]
    associative: bool = False
    accumulator: str | None = None
    body: dict[str, str] | None = None
    line: int | None = field(default=None, compare=False)

    @property
    def params(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.declaration.params)


@dataclass(frozen=True)
class ExternalBuffer:
    ctype: str
    name: str
    subscripts: tuple[OffsetExpr, ...]

    @property
    def dims(self) -> tuple[str, ...]:
        return tuple(s.iter_var for s in self.subscripts)

    def __str__(self) -> str:
        return f"{self.ctype} {self.name}" + "".join(f"[{s}]" for s in self.subscripts)


@dataclass
class Axiom:
    buffer: ExternalBuffer
    term: TermPattern
    line: int | None = field(default=None, compare=False)


@dataclass
class Goal:
    term: TermPattern
    buffer: ExternalBuffer
    line: int | None = field(default=None, compare=False)


@dataclass
class RuleSet:
    kernels: list[KernelRule]
    axioms: list[Axiom]
    goals: list[Goal]
    loop_order: tuple[str, ...]
    ranges: dict[str, tuple[int, int, int]]
    aliases: frozenset[tuple[str, str]] = frozenset()
    vector_length: int = 1
    backend: str = "c99"
    name: str = "kernel"

    def kernel(self, name: str) -> KernelRule:
        for k in self.kernels:
            if k.name == name:
                return k
        raise KeyError(name)

    def rank_of(self, var: str) -> int:
        """Global rank of an iteration variable (innermost is 0)."""
        return len(self.loop_order) - 1 - self.loop_order.index(var)

    def trips(self, var: str) -> int:
        lo, hi, st = self.ranges[var]
        return (hi - lo) // st

    def external(self, name: str) -> ExternalBuffer:
        for ax in self.axioms:
            if ax.buffer.name == name:
                return ax.buffer
        for g in self.goals:
            if g.buffer.name == name:
                return g.buffer
        raise KeyError(name)

    def aliased(self, a: str, b: str) -> bool:
        return a == b or (a, b) in self.aliases or (b, a) in self.aliases


# -- term syntax -----------------------------------------------------------

_SUB_RE = re.compile(rf"^\s*({_NAME})(\?)?\s*(?:([+-])\s*(\d+))?\s*$")
_IDENT_RE = re.compile(rf"^\s*({_NAME})(\?)?\s*((?:\[[^\[\]]*\]\s*)*)$")
_TAG_RE = re.compile(rf"^\s*({_NAME})\s*\((.*)\)\s*$", re.S)
_EXT_RE = re.compile(rf"^\s*(.*?)\b({_NAME})\s*((?:\[[^\[\]]*\]\s*)*)$")


def _parse_subscript(text: str, line: int | None, *, allow_free: bool = True,
                     allow_bound: bool = True) -> OffsetExpr:
    m = _SUB_RE.match(text)
    if not m:
        raise SpecError(
            f"non-affine or malformed subscript '[{text.strip()}]' "
            "(only 'var', 'var+N' and 'var-N' are supported)",
            [Diagnostic(f"non-affine subscript '[{text.strip()}]'", line)],
        )
    var, q, sign, num = m.groups()
    disp = int(num) if num else 0
    if sign == "-":
        disp = -disp
    free = q == "?"
    if free and not allow_free:
        raise SpecError(f"inference variable '{var}?' not allowed here",
                        [Diagnostic(f"inference variable '{var}?' not allowed here", line)])
    if not free and not allow_bound:
        raise SpecError(f"subscript '{var}' must be an inference variable ('{var}?')",
                        [Diagnostic(f"subscript '{var}' must be an inference variable", line)])
    return OffsetExpr(var, disp, free)


def _split_subscripts(text: str) -> list[str]:
    return re.findall(r"\[([^\[\]]*)\]", text)


def parse_term(text: str, line: int | None = None, *, allow_free: bool = True,
               allow_bound: bool = True) -> TermPattern:
    """Parse ``tag(ident?[j?-1][i?])`` style term text."""
    tags: list[str] = []
    rest = text.strip()
    while True:
        m = _TAG_RE.match(rest)
        if not m:
            break
        tags.append(m.group(1))
        rest = m.group(2)
    m = _IDENT_RE.match(rest)
    if not m:
        raise SpecError(f"cannot parse term '{text.strip()}'",
                        [Diagnostic(f"cannot parse term '{text.strip()}'", line)])
    ident, q, subs = m.groups()
    if q and not allow_free:
        raise SpecError(f"inference variable '{ident}?' not allowed in '{text.strip()}'",
                        [Diagnostic("inference variable not allowed here", line)])
    subscripts = tuple(_parse_subscript(s, line, allow_free=allow_free, allow_bound=allow_bound)
                       for s in _split_subscripts(subs))
    dims = [s.iter_var for s in subscripts]
    if len(set(dims)) != len(dims):
        raise SpecError(f"iteration variable repeated in '{text.strip()}'",
                        [Diagnostic(f"iteration variable repeated in '{text.strip()}'", line)])
    return TermPattern(ident, q == "?", tuple(tags), subscripts)


def parse_external(text: str, line: int | None = None, *, allow_free: bool = True) -> ExternalBuffer:
    m = _EXT_RE.match(text)
    if not m or not m.group(1).strip():
        raise SpecError(f"external buffer needs a type and a name: '{text.strip()}'",
                        [Diagnostic(f"malformed external buffer '{text.strip()}'", line)])
    ctype, name, subs = m.groups()
    subscripts = tuple(_parse_subscript(s, line, allow_free=allow_free, allow_bound=not allow_free)
                       for s in _split_subscripts(subs))
    return ExternalBuffer(" ".join(ctype.split()), name, subscripts)


def parse_declaration(text: str, line: int | None = None) -> Declaration:
    text = " ".join(text.split())
    m = re.match(rf"^(.*?)\b({_NAME})\s*\((.*)\)\s*;?\s*$", text)
    if not m:
        raise SpecError(f"cannot parse declaration '{text}'",
                        [Diagnostic(f"cannot parse declaration '{text}'", line)])
    params = []
    body = m.group(3).strip()
    for raw in ([p.strip() for p in body.split(",")] if body and body != "void" else []):
        pm = re.match(rf"^(.*?)({_NAME})\s*(\[\s*\])?$", raw)
        if not pm or not pm.group(1).strip():
            raise SpecError(f"cannot parse parameter '{raw}'",
                            [Diagnostic(f"cannot parse parameter '{raw}'", line)])
        prefix = pm.group(1)
        passing = "pointer" if "*" in prefix or pm.group(3) else "reference" if "&" in prefix else "value"
        ctype = " ".join(w for w in prefix.replace("*", " ").replace("&", " ").split()
                         if w not in ("const", "restrict", "volatile"))
        params.append(Param(pm.group(2), raw, ctype, passing))
    return Declaration(text, m.group(2), tuple(params))


# -- YAML walking with positions ------------------------------------------

def _line(node) -> int:
    return node.start_mark.line + 1


def _mapping(node, what: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, yaml.MappingNode):
        raise SpecError(f"'{what}' must be a mapping",
                        [Diagnostic(f"'{what}' must be a mapping", _line(node))])
    out = {}
    for k, v in node.value:
        out[k.value] = v
    return out


def _value(node):
    return yaml.constructor.SafeConstructor().construct_object(node, deep=True)


def _entries(node) -> list[tuple[str, int]]:
    """Lines of a block string (or items of a list) with their source lines."""
    if node is None:
        return []
    if isinstance(node, yaml.SequenceNode):
        return [(str(v.value), _line(v)) for v in node.value]
    if isinstance(node, yaml.ScalarNode):
        first = _line(node) + (1 if node.style in ("|", ">") else 0)
        out = []
        for n, text in enumerate(node.value.splitlines()):
            text = text.split("#", 1)[0].strip()
            if text:
                out.append((text, first + n))
        return out
    raise SpecError("expected a block string or a list", [Diagnostic("expected a block string or list", _line(node))])


def _binding_list(node, what: str) -> dict[str, tuple[TermPattern, int]]:
    out: dict[str, tuple[TermPattern, int]] = {}
    for text, line in _entries(node):
        if ":" not in text:
            raise SpecError(f"{what} entry must be 'param : term'",
                            [Diagnostic(f"{what} entry must be 'param : term': '{text}'", line)])
        name, term = text.split(":", 1)
        name = name.strip()
        if name in out:
            raise SpecError(f"parameter '{name}' bound twice", [Diagnostic(f"parameter '{name}' bound twice", line)])
        out[name] = (parse_term(term, line, allow_bound=False), line)
    return out


def parse_spec(text: str, name: str | None = None) -> RuleSet:
    """Parse rule-file text into a :class:`RuleSet`; raises :class:`SpecError`."""
    try:
        root = yaml.compose(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        diag = Diagnostic(f"syntax error: {exc.problem}",
                          mark.line + 1 if mark else None, mark.column + 1 if mark else None)
        raise SpecError(str(diag), [diag]) from None
    top = _mapping(root, "top level")
    for key in top:
        if key not in ("kernels", "globals", "config"):
            raise SpecError(f"unknown top-level key '{key}'", [Diagnostic(f"unknown top-level key '{key}'", 1)])

    config = _mapping(top.get("config"), "config")
    cfg = {k: _value(v) for k, v in config.items()}
    known = {"loop-order", "ranges", "aliases", "vector-length", "backend", "name"}
    for key in cfg:
        if key not in known:
            raise SpecError(f"unknown config key '{key}'",
                            [Diagnostic(f"unknown config key '{key}'", _line(config[key]))])
    loop_order = tuple(str(v) for v in (cfg.get("loop-order") or []))
    cfg_line = _line(top["config"]) if "config" in top else None
    if len(set(loop_order)) != len(loop_order):
        raise SpecError("duplicate iteration variable in loop-order",
                        [Diagnostic("duplicate iteration variable in loop-order", cfg_line)])
    ranges: dict[str, tuple[int, int, int]] = {}
    for var, rng in (cfg.get("ranges") or {}).items():
        if not isinstance(rng, list) or len(rng) not in (2, 3) or not all(isinstance(x, int) for x in rng):
            raise SpecError(f"range for '{var}' must be [lo, hi] or [lo, hi, stride]",
                            [Diagnostic(f"bad range for '{var}'", cfg_line)])
        lo, hi, st = (rng + [1])[:3]
        if st <= 0:
            raise SpecError(f"stride of '{var}' must be positive",
                            [Diagnostic(f"stride of '{var}' must be positive", cfg_line)])
        if hi <= lo or (hi - lo) % st:
            raise SpecError(f"range of '{var}' must be a positive multiple of its stride",
                            [Diagnostic(f"bad range extent for '{var}'", cfg_line)])
        ranges[var] = (lo, hi, st)
    for var in loop_order:
        if var not in ranges:
            raise SpecError(f"no range for iteration variable '{var}'",
                            [Diagnostic(f"no range for iteration variable '{var}'", cfg_line)])
    for var in ranges:
        if var not in loop_order:
            raise SpecError(f"range given for unknown iteration variable '{var}'",
                            [Diagnostic(f"unknown iteration variable '{var}'", cfg_line)])
    aliases = set()
    for pair in cfg.get("aliases") or []:
        if not isinstance(pair, list) or len(pair) != 2:
            raise SpecError("aliases must be pairs [input, output]", [Diagnostic("malformed alias", cfg_line)])
        aliases.add((str(pair[0]), str(pair[1])))
    vl = cfg.get("vector-length", 1)
    if not isinstance(vl, int) or vl < 1:
        raise SpecError("vector-length must be a positive integer", [Diagnostic("bad vector-length", cfg_line)])
    backend = cfg.get("backend", "c99")
    if backend not in BACKENDS:
        raise SpecError(f"unsupported backend '{backend}'", [Diagnostic(f"unsupported backend '{backend}'", cfg_line)])

    kernels: list[KernelRule] = []
    kernel_nodes = top.get("kernels")
    if kernel_nodes is not None and not (isinstance(kernel_nodes, yaml.ScalarNode) and kernel_nodes.value in ("", "~", "null")):
        seen = set()
        if not isinstance(kernel_nodes, yaml.MappingNode):
            raise SpecError("'kernels' must be a mapping", [Diagnostic("'kernels' must be a mapping", _line(kernel_nodes))])
        for knode, vnode in kernel_nodes.value:
            kname, kline = knode.value, _line(knode)
            if kname in seen:
                raise SpecError(f"duplicate kernel name '{kname}'", [Diagnostic(f"duplicate kernel name '{kname}'", kline)])
            seen.add(kname)
            kernels.append(_parse_kernel(kname, _mapping(vnode, kname), kline))

    globs = _mapping(top.get("globals"), "globals")
    axioms = []
    for text, line in _entries(globs.get("inputs")):
        if "=>" not in text:
            raise SpecError("global input must be 'type buf[...] => term'", [Diagnostic("missing '=>'", line)])
        lhs, rhs = text.split("=>", 1)
        axioms.append(Axiom(parse_external(lhs, line), parse_term(rhs, line, allow_bound=False), line))
    goals = []
    for text, line in _entries(globs.get("outputs")):
        if "=>" not in text:
            raise SpecError("global output must be 'term => type buf[...]'", [Diagnostic("missing '=>'", line)])
        lhs, rhs = text.split("=>", 1)
        term = parse_term(lhs, line, allow_free=False)
        if any(s.displacement for s in term.subscripts):
            raise SpecError("goals must be requested at zero offset",
                            [Diagnostic(f"goal '{term}' has a non-zero offset", line)])
        goals.append(Goal(term, parse_external(rhs, line, allow_free=False), line))
    if not goals:
        raise SpecError("no goals declared", [Diagnostic("no goals declared", 1)])

    rs = RuleSet(kernels, axioms, goals, loop_order, ranges, frozenset(aliases), vl, backend,
                 str(cfg.get("name") or name or "kernel"))
    _check_vars_and_ranks(rs)
    return rs


def _parse_kernel(name: str, fields: dict, line: int) -> KernelRule:
    for key in fields:
        if key not in ("declaration", "inputs", "outputs", "associative", "accumulator", "body"):
            raise SpecError(f"unknown key '{key}' in kernel '{name}'",
                            [Diagnostic(f"unknown key '{key}' in kernel '{name}'", _line(fields[key]))])
    if "declaration" not in fields:
        raise SpecError(f"kernel '{name}' has no declaration", [Diagnostic(f"kernel '{name}' has no declaration", line)])
    decl = parse_declaration(str(fields["declaration"].value), _line(fields["declaration"]))
    inputs = _binding_list(fields.get("inputs"), "input")
    outputs = _binding_list(fields.get("outputs"), "output")
    for pname, (_, pline) in {**inputs, **outputs}.items():
        if pname not in {p.name for p in decl.params}:
            raise SpecError(f"kernel '{name}': '{pname}' is not a declared parameter",
                            [Diagnostic(f"'{pname}' is not a parameter of {decl.function}", pline)])
    for p in decl.params:
        n = (p.name in inputs) + (p.name in outputs)
        if n != 1:
            msg = (f"kernel '{name}': parameter '{p.name}' must appear in exactly one of inputs/outputs")
            raise SpecError(msg, [Diagnostic(msg, line)])
    body = None
    if "body" in fields:
        raw = _value(fields["body"])
        if not isinstance(raw, dict):
            raise SpecError(f"kernel '{name}': body must map outputs to expressions",
                            [Diagnostic("body must be a mapping", _line(fields["body"]))])
        body = {str(k): str(v) for k, v in raw.items()}
    assoc = bool(_value(fields["associative"])) if "associative" in fields else False
    acc = str(_value(fields["accumulator"])) if "accumulator" in fields else None
    if acc is not None and acc not in inputs:
        raise SpecError(f"kernel '{name}': accumulator '{acc}' is not an input",
                        [Diagnostic(f"accumulator '{acc}' is not an input", line)])
    if assoc and (acc is None or len(outputs) != 1):
        raise SpecError(f"kernel '{name}': associative kernels need one output and an accumulator input",
                        [Diagnostic("associative kernel needs 'accumulator' and exactly one output", line)])
    return KernelRule(name, decl, {k: v[0] for k, v in inputs.items()},
                      {k: v[0] for k, v in outputs.items()}, assoc, acc, body, line)


def _check_vars_and_ranks(rs: RuleSet) -> None:
    order = set(rs.loop_order)
    ranks: dict[tuple, tuple[int, int | None]] = {}

    def check(pat: TermPattern, line):
        for s in pat.subscripts:
            if s.iter_var not in order:
                raise SpecError(f"unknown iteration variable '{s.iter_var}' in '{pat}'",
                                [Diagnostic(f"unknown iteration variable '{s.iter_var}'", line)])
            lo, hi, st = rs.ranges[s.iter_var]
            if s.displacement % st:
                raise SpecError(f"displacement in '{pat}' is not a multiple of the stride of '{s.iter_var}'",
                                [Diagnostic("displacement not a multiple of stride", line)])
        if pat.ident_free:
            return
        key = (pat.identifier, pat.tags)
        if key in ranks and ranks[key][0] != pat.rank:
            raise SpecError(f"rank mismatch on '{pat}' (expected {ranks[key][0]} subscripts)",
                            [Diagnostic(f"rank mismatch on '{pat}'", line)])
        ranks.setdefault(key, (pat.rank, line))

    for k in rs.kernels:
        for pat in [*k.inputs.values(), *k.outputs.values()]:
            check(pat, k.line)
    for ax in rs.axioms:
        check(ax.term, ax.line)
        check(TermPattern(ax.buffer.name, False, ("<ext>",), ax.buffer.subscripts), ax.line)
        if {s.iter_var for s in ax.buffer.subscripts} != {s.iter_var for s in ax.term.subscripts}:
            raise SpecError(f"axiom '{ax.buffer}' must use the same iteration variables on both sides",
                            [Diagnostic("axiom dimension mismatch", ax.line)])
    for g in rs.goals:
        check(g.term, g.line)
        check(TermPattern(g.buffer.name, False, ("<ext>",), g.buffer.subscripts), g.line)
        if set(g.buffer.dims) != set(g.term.dims):
            raise SpecError(f"goal buffer '{g.buffer}' must use the same iteration variables as its term",
                            [Diagnostic("goal dimension mismatch", g.line)])


def _may_overlap(a: TermPattern, b: TermPattern) -> bool:
    if a.tags != b.tags or a.rank != b.rank or a.dims != b.dims:
        return False
    return a.ident_free or b.ident_free or a.identifier == b.identifier


def validate_rules(rs: RuleSet) -> list[Diagnostic]:
    """Semantic checks that do not stop parsing; returns diagnostics."""
    diags: list[Diagnostic] = []
    order = set(rs.loop_order)
    for k in rs.kernels:
        if not k.outputs:
            diags.append(Diagnostic(f"kernel '{k.name}' has no outputs", k.line))
        in_vars = set().union(*[p.free_vars for p in k.inputs.values()]) if k.inputs else set()
        out_vars = set().union(*[p.free_vars for p in k.outputs.values()]) if k.outputs else set()
        for v in sorted(out_vars - in_vars):
            if v[:-1] not in order:
                diags.append(Diagnostic(f"unbound variable '{v}' in outputs of kernel '{k.name}'", k.line))
        for pat in k.inputs.values():
            if pat.ident_free and pat.identifier + "?" not in out_vars:
                diags.append(Diagnostic(
                    f"unbound variable '{pat.identifier}?' in inputs of kernel '{k.name}'", k.line))
        if k.associative:
            acc_pat = k.inputs[k.accumulator]
            (out_pat,) = k.outputs.values()
            if acc_pat.dims != out_pat.dims:
                diags.append(Diagnostic(
                    f"accumulator of '{k.name}' must have the same dimensions as its output", k.line))
    outs = [(k, p) for k in rs.kernels for p in k.outputs.values()]
    for (k1, p1), (k2, p2) in combinations(outs, 2):
        if _may_overlap(p1, p2):
            diags.append(Diagnostic(
                f"multiple producers: '{p1}' ({k1.name}) and '{p2}' ({k2.name})", k2.line))
    return diags


# -- pretty printing ---------------------------------------------------------

def _scalar(text: str) -> str:
    out = yaml.safe_dump(text, width=1 << 20).strip()
    return out[:-3].strip() if out.endswith("\n...") else out


def format_spec(rs: RuleSet) -> str:
    """Render a rule set back to rule-file text (parse(format(rs)) == rs)."""
    out = []
    if rs.kernels:
        out.append("kernels:")
        for k in rs.kernels:
            out.append(f"  {k.name}:")
            out.append(f"    declaration: {_scalar(k.declaration.text)}")
            for key, pats in (("inputs", k.inputs), ("outputs", k.outputs)):
                if pats:
                    out.append(f"    {key}: |")
                    out.extend(f"      {p} : {t}" for p, t in pats.items())
            if k.associative:
                out.append("    associative: true")
            if k.accumulator:
                out.append(f"    accumulator: {k.accumulator}")
            if k.body:
                out.append("    body:")
                out.extend(f"      {p}: {_scalar(e)}" for p, e in k.body.items())
    else:
        out.append("kernels: {}")
    out.append("globals:")
    if rs.axioms:
        out.append("  inputs: |")
        out.extend(f"    {a.buffer} => {a.term}" for a in rs.axioms)
    out.append("  outputs: |")
    out.extend(f"    {g.term} => {g.buffer}" for g in rs.goals)
    out.append("config:")
    out.append(f"  name: {rs.name}")
    out.append(f"  loop-order: [{', '.join(rs.loop_order)}]")
    out.append("  ranges:")
    out.extend(f"    {v}: [{lo}, {hi}, {st}]" for v, (lo, hi, st) in rs.ranges.items())
    if rs.aliases:
        out.append("  aliases: [" + ", ".join(f"[{a}, {b}]" for a, b in sorted(rs.aliases)) + "]")
    out.append(f"  vector-length: {rs.vector_length}")
    out.append(f"  backend: {rs.backend}")
    return "\n".join(out) + "\n"
