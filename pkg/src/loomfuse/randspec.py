"""Random rule files for property tests: small stencil DAGs with reductions and broadcasts."""
from __future__ import annotations

import random

DIMSETS = {2: ("j", "i"), 1: ("i",), 0: ()}


def _sub(dims, offs):
    out = []
    for d, o in zip(dims, offs):
        out.append(f"[{d}?{'+' if o > 0 else '-' if o < 0 else ''}{abs(o) if o else ''}]")
    return "".join(out)


def _term(name, dims, offs=None):
    return name + _sub(dims, offs or (0,) * len(dims))


def random_spec(seed: int, max_kernels: int = 6) -> str:
    """Return rule-file text for a random, well-formed program."""
    rng = random.Random(seed)
    rank = rng.choice((1, 2, 2))
    order = DIMSETS[rank]
    strides = {d: (2 if rng.random() < 0.15 else 1) for d in order}
    ranges = {}
    for d in order:
        lo = rng.randint(0, 3)
        trips = rng.randint(1, 6)
        ranges[d] = (lo, lo + trips * strides[d], strides[d])

    vars_: list[tuple[str, tuple]] = []  # (name, dims)
    kernels = []
    n_inputs = rng.randint(1, 2)
    for k in range(n_inputs):
        dims = order if k == 0 or rank == 1 else rng.choice((order, ("j",)))
        vars_.append((f"x{k}", dims))
    axioms = list(vars_)

    def pick_offsets(dims):
        return tuple(rng.choice((-1, 0, 0, 1)) * strides[d] for d in dims)

    budget = rng.randint(1, max_kernels)
    n = 0
    while len(kernels) < budget:
        roll = rng.random()
        full = [v for v in vars_ if v[1] == order]
        if roll < 0.2 and len(kernels) + 2 <= budget and full:
            # reduction: init + associative accumulation over the innermost (or all) dims
            src = rng.choice(full)
            dims = ("j",) if rank == 2 and rng.random() < 0.5 else ()
            s0, s = f"s{n}init", f"s{n}"
            kernels.append(dict(name=f"init{n}", ins=[], out=(s0, dims), assoc=False,
                                body="0.5"))
            kernels.append(dict(name=f"acc{n}", ins=[("acc", s0, dims, (0,) * len(dims)),
                                                     ("x", src[0], src[1], pick_offsets(src[1]))],
                                out=(s, dims), assoc=True, body="acc + 0.25 * x"))
            vars_.append((s, dims))
            n += 1
            continue
        out_dims = order
        k_in = rng.randint(1, 3)
        ins = []
        for p in range(k_in):
            src = rng.choice(vars_)
            if roll > 0.8 and len(src[1]) < len(order):
                out_dims = order  # broadcast a lower-rank value back up
            if not set(src[1]) <= set(out_dims):
                continue
            ins.append((f"a{p}", src[0], src[1], pick_offsets(src[1])))
        if not ins:
            continue
        out = f"v{n}"
        coeffs = [rng.choice(("0.5", "0.25", "1.5", "-0.75")) for _ in ins]
        body = " + ".join(f"{c} * {a[0]}" for c, a in zip(coeffs, ins)) + " + 0.125"
        kernels.append(dict(name=f"k{n}", ins=ins, out=(out, out_dims), assoc=False, body=body))
        vars_.append((out, out_dims))
        n += 1

    produced = [v for v in vars_ if v not in axioms]
    goals = [produced[-1]]
    if len(produced) > 1 and rng.random() < 0.4:
        other = rng.choice(produced[:-1])
        if other != goals[0]:
            goals.append(other)

    lines = [f"# random program {seed}", "kernels:"]
    for k in kernels:
        params = [f"double {p}" for p, *_ in k["ins"]] + ["double *out"]
        lines += [f"  {k['name']}:",
                  f"    declaration: void {k['name']}({', '.join(params)});"]
        if k["ins"]:
            lines.append("    inputs: |")
            for p, name, dims, offs in k["ins"]:
                lines.append(f"      {p} : {_term(name, dims, offs)}")
        lines += ["    outputs: |", f"      out : {_term(*k['out'])}"]
        if k["assoc"]:
            lines += ["    associative: true", "    accumulator: acc"]
        lines += ["    body:", f"      out: {k['body']}"]
    lines += ["globals:", "  inputs: |"]
    for name, dims in axioms:
        sub = "".join(f"[{d}?]" for d in dims)
        lines.append(f"    double g_{name}{sub} => {name}{sub}")
    lines.append("  outputs: |")
    for name, dims in goals:
        sub = "".join(f"[{d}]" for d in dims)
        lines.append(f"    {name}{sub} => double g_out_{name}{sub}")
    lines += ["config:", f"  name: rand{seed}", f"  loop-order: [{', '.join(order)}]", "  ranges:"]
    for d, (lo, hi, st) in ranges.items():
        lines.append(f"    {d}: [{lo}, {hi}, {st}]" if st != 1 else f"    {d}: [{lo}, {hi}]")
    return "\n".join(lines) + "\n"
