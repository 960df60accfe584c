"""Small rule-file builders shared by the tests."""

LAPLACE3 = """
kernels:
  lap:
    declaration: void lap3(double w, double c, double e, double *o);
    inputs: |
      w : q?[i?-1]
      c : q?[i?]
      e : q?[i?+1]
    outputs: |
      o : lap(q?[i?])
    body:
      o: c + 0.5 * (w - 2.0 * c + e)
globals:
  inputs: |
    double g_in[i?] => u[i?]
  outputs: |
    lap(u[i]) => double g_out[i]
config:
  name: lap3
  loop-order: [i]
  ranges:
    i: [1, 11]
"""


def chain(n, offsets=(-1, 0, 1), trips=8, name="chain"):
    """A 1-D chain of n stencil kernels, each reading the previous stage."""
    lines = ["kernels:"]
    prev = "x"
    for k in range(n):
        params = [f"a{p}" for p in range(len(offsets))]
        lines += [f"  k{k}:",
                  f"    declaration: void k{k}({', '.join('double ' + p for p in params)}, double *o);",
                  "    inputs: |"]
        for p, o in zip(params, offsets):
            sub = f"i?{'+' if o > 0 else '-'}{abs(o)}" if o else "i?"
            lines.append(f"      {p} : {prev}[{sub}]")
        lines += ["    outputs: |", f"      o : v{k}[i?]",
                  "    body:", "      o: " + " + ".join(f"0.5 * {p}" for p in params)]
        prev = f"v{k}"
    lines += ["globals:", "  inputs: |", "    double g_x[i?] => x[i?]",
              "  outputs: |", f"    {prev}[i] => double g_y[i]",
              "config:", f"  name: {name}", "  loop-order: [i]", "  ranges:", f"    i: [2, {2 + trips}]"]
    return "\n".join(lines) + "\n"


def norm_chain(tag):
    """A reduce-then-broadcast chain over input ``tag``, as kernel text."""
    return f"""  acc_{tag}_init:
    declaration: void acc_{tag}_init(double *s);
    outputs: |
      s : s0({tag})
    body:
      s: 0.0
  acc_{tag}:
    declaration: void acc_{tag}(double a, double x, double *s);
    inputs: |
      a : s0({tag})
      x : {tag}[j?][i?]
    outputs: |
      s : s1({tag})
    associative: true
    accumulator: a
    body:
      s: a + x
  scale_{tag}:
    declaration: void scale_{tag}(double x, double s, double *o);
    inputs: |
      x : {tag}[j?][i?]
      s : s1({tag})
    outputs: |
      o : scaled({tag}[j?][i?])
    body:
      o: x / s
"""


def two_chains(broadcast=True):
    kernels = norm_chain("a") + norm_chain("b")
    if broadcast:
        goals = "    scaled(a[j][i]) => double g_oa[j][i]\n    scaled(b[j][i]) => double g_ob[j][i]\n"
    else:
        kernels = norm_chain("a").split("  scale_a:")[0]
        goals = "    s1(a) => double g_sum\n"
    return ("kernels:\n" + kernels + "globals:\n  inputs: |\n"
            "    double g_a[j?][i?] => a[j?][i?]\n    double g_b[j?][i?] => b[j?][i?]\n"
            "  outputs: |\n" + goals +
            "config:\n  loop-order: [j, i]\n  ranges:\n    j: [0, 3]\n    i: [0, 4]\n")


def independent_pair():
    """Two unrelated pointwise kernels over the same space."""
    return """
kernels:
  ka:
    declaration: void ka(double x, double *o);
    inputs: |
      x : a[j?][i?]
    outputs: |
      o : fa(a[j?][i?])
    body:
      o: x + 1.0
  kb:
    declaration: void kb(double x, double *o);
    inputs: |
      x : b[j?][i?-1]
    outputs: |
      o : fb(b[j?][i?])
    body:
      o: x * 2.0
globals:
  inputs: |
    double g_a[j?][i?] => a[j?][i?]
    double g_b[j?][i?] => b[j?][i?]
  outputs: |
    fa(a[j][i]) => double g_oa[j][i]
    fb(b[j][i]) => double g_ob[j][i]
config:
  loop-order: [j, i]
  ranges:
    j: [0, 3]
    i: [1, 5]
"""
