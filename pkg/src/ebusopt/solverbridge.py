"""Subprocess bridge to an external MILP solver.

The solver is described by a command template with placeholders {model},
{solution}, {timelimit}, and {threads}; anything that reads a model file and
writes a solution file one of the bundled parsers understands can be plugged
in.  The default template runs the bundled HiGHS-backed reference solver in
a fresh interpreter.  Each solve owns one subprocess and kills it on
timeout, keeping whatever incumbent made it into the solution file.
"""

from __future__ import annotations

import os
import shlex
import subprocess
import sys
from typing import Optional

from .lpformat import LpFormatError, RawSolution, parse_solution_file

SOLVER_ENV_VAR = "EBUSOPT_SOLVER_CMD"

DEFAULT_SOLVER_CMD = (
    "{python} -m ebusopt.refsolver {model} {solution} "
    "--time-limit {timelimit} --threads {threads}"
)

_TIMEOUT_GRACE_S = 30.0


class SolverError(RuntimeError):
    """The external solver could not be run or produced unusable output."""

    def __init__(self, message: str, command: str = "", output: str = ""):
        super().__init__(message)
        self.command = command
        self.output = output


def resolve_solver_command(template: Optional[str] = None) -> str:
    cmd = template or os.environ.get(SOLVER_ENV_VAR) or DEFAULT_SOLVER_CMD
    return cmd.replace("{python}", sys.executable)


def solve_external(model_path, command_template: Optional[str] = None,
                   time_limit: Optional[float] = None, threads: int = 1,
                   solution_path=None) -> RawSolution:
    """Run the solver command on a model file and parse its solution file.

    A nonzero exit or unparseable output raises SolverError carrying the
    captured diagnostics; a wall-clock timeout (time limit plus grace) kills
    the subprocess and returns status "time-limit" with the best incumbent
    found in the solution file, if any.
    """
    model_path = str(model_path)
    if solution_path is None:
        solution_path = model_path.rsplit(".", 1)[0] + ".sol"
    solution_path = str(solution_path)
    if os.path.exists(solution_path):
        os.unlink(solution_path)

    template = resolve_solver_command(command_template)
    command = template.format(model=shlex.quote(model_path),
                              solution=shlex.quote(solution_path),
                              timelimit=_fmt_limit(time_limit),
                              threads=threads)
    argv = shlex.split(command)
    wall_limit = None if time_limit is None else time_limit + _TIMEOUT_GRACE_S
    try:
        proc = subprocess.run(argv, capture_output=True, text=True,
                              timeout=wall_limit)
    except FileNotFoundError as exc:
        raise SolverError(f"solver executable not found: {exc}",
                          command=command) from exc
    except subprocess.TimeoutExpired as exc:
        out = (exc.stdout or "") + (exc.stderr or "")
        if os.path.exists(solution_path):
            try:
                sol = parse_solution_file(solution_path)
                sol.status = "time-limit"
                sol.command = command
                sol.solver_output = out[-4000:]
                return sol
            except LpFormatError:
                pass
        return RawSolution(values={}, status="time-limit", command=command,
                           solver_output=out[-4000:])

    output = (proc.stdout or "") + (proc.stderr or "")
    if proc.returncode != 0:
        raise SolverError(
            f"solver exited with code {proc.returncode}",
            command=command, output=output[-4000:])
    if not os.path.exists(solution_path):
        raise SolverError("solver wrote no solution file",
                          command=command, output=output[-4000:])
    try:
        sol = parse_solution_file(solution_path)
    except LpFormatError as exc:
        raise SolverError(f"cannot parse solution file: {exc}",
                          command=command, output=output[-4000:]) from exc
    sol.command = command
    sol.solver_output = output[-4000:]
    return sol


def _fmt_limit(time_limit: Optional[float]) -> str:
    if time_limit is None:
        return "1000000"
    return format(float(time_limit), ".6g")
