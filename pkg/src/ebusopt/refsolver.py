"""Reference MILP solver CLI: reads an LP or MPS file, solves with HiGHS.

Runs as a standalone executable (`ebusopt-solve model.lp out.sol`) so the
package's solver bridge can treat it exactly like any other external solver:
model file in, solution file out, status carried in the file header.  The
actual branch-and-bound is HiGHS, reached through scipy.optimize.milp.

Solution files are plain text: `# status/objective/bound` headers followed
by `name value` lines.  Exit code 0 covers every properly diagnosed outcome
(optimal, infeasible, time limit); nonzero means the model could not be
read or the solver itself failed.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

from .lpformat import (LpFormatError, ParsedModel, read_lp, read_mps,
                       write_solution_text)

_STATUS = {
    0: "optimal",
    1: "iteration-limit",
    2: "infeasible",
    3: "unbounded",
    4: "error",
}


def load_model(path: str) -> ParsedModel:
    if path.endswith(".mps"):
        return read_mps(path)
    if path.endswith(".lp"):
        return read_lp(path)
    # sniff: MPS starts with NAME/ROWS
    with open(path) as fh:
        head = fh.read(400).lstrip()
    if head.upper().startswith(("NAME", "ROWS", "*")):
        return read_mps(path)
    return read_lp(path)


def solve_parsed(model: ParsedModel, time_limit: float | None = None,
                 relax: bool = False, mip_gap: float = 1e-9):
    """Returns (status, values, objective, bound)."""
    names = model.variables
    index = {n: i for i, n in enumerate(names)}
    n = len(names)
    c = np.zeros(n)
    for var, coef in model.objective.items():
        c[index[var]] = coef
    if not model.minimize:
        c = -c

    rows_lb, rows_ub, data, ri, ci = [], [], [], [], []
    for r, (_, coeffs, sense, rhs) in enumerate(model.rows):
        for var, coef in coeffs.items():
            ri.append(r)
            ci.append(index[var])
            data.append(coef)
        if sense == "<=":
            rows_lb.append(-np.inf)
            rows_ub.append(rhs)
        elif sense == ">=":
            rows_lb.append(rhs)
            rows_ub.append(np.inf)
        else:
            rows_lb.append(rhs)
            rows_ub.append(rhs)

    lb = np.array([model.lower[v] for v in names], dtype=float)
    ub = np.array([model.upper[v] for v in names], dtype=float)
    integrality = np.zeros(n)
    if not relax:
        for var in model.integers:
            integrality[index[var]] = 1

    options = {"mip_rel_gap": mip_gap}
    if time_limit is not None:
        if time_limit <= 0:
            return "time-limit", {}, None, None
        options["time_limit"] = float(time_limit)

    constraints = []
    if model.rows:
        a = sparse.csr_matrix((data, (ri, ci)), shape=(len(model.rows), n))
        constraints = [LinearConstraint(a, np.array(rows_lb), np.array(rows_ub))]

    res = milp(c=c, constraints=constraints, integrality=integrality,
               bounds=Bounds(lb, ub), options=options)

    status = _STATUS.get(res.status, "error")
    if status == "iteration-limit":
        status = "time-limit" if res.x is not None else "time-limit"
    values = {}
    objective = None
    bound = None
    if res.x is not None:
        sign = 1.0 if model.minimize else -1.0
        values = {names[i]: float(res.x[i]) for i in range(n)}
        objective = sign * float(res.fun)
        if status == "time-limit":
            status = "feasible"
    dual = getattr(res, "mip_dual_bound", None)
    if dual is not None and math.isfinite(dual):
        bound = (1.0 if model.minimize else -1.0) * float(dual)
    elif objective is not None and status == "optimal":
        bound = objective
    if res.x is None and status not in ("infeasible", "unbounded"):
        status = "time-limit" if time_limit is not None else status
    return status, values, objective, bound


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ebusopt-solve",
        description="solve an LP/MPS model file with HiGHS and write a "
                    "plain-text solution file")
    parser.add_argument("model")
    parser.add_argument("solution")
    parser.add_argument("--time-limit", type=float, default=None)
    parser.add_argument("--threads", type=int, default=1,
                        help="accepted for command-template compatibility")
    parser.add_argument("--relax", action="store_true",
                        help="solve the LP relaxation of the integrality")
    parser.add_argument("--mip-gap", type=float, default=1e-9)
    args = parser.parse_args(argv)

    try:
        model = load_model(args.model)
    except (OSError, LpFormatError) as exc:
        print(f"ebusopt-solve: cannot read model: {exc}", file=sys.stderr)
        return 2
    try:
        status, values, objective, bound = solve_parsed(
            model, time_limit=args.time_limit, relax=args.relax,
            mip_gap=args.mip_gap)
    except Exception as exc:  # solver-internal failure
        print(f"ebusopt-solve: solver failure: {exc}", file=sys.stderr)
        return 3
    write_solution_text(args.solution, values, status, objective, bound)
    print(f"ebusopt-solve: status={status}"
          + (f" objective={objective:.9g}" if objective is not None else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
