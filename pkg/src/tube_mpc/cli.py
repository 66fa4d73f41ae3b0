# Copyright 2022 [PT BOOKBOT INDONESIA](https://bookbot.id/)

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Command line entry point `tube-mpc`.

Subcommands: generate, design, run, sweep and verify. Solver tolerances are read
from the TUBE_MPC_* environment variables.
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple
import argparse
import logging
import sys

from src.config import GAMMA_RULE, HORIZON, HORIZON_METHOD, INSTANCES, N_W, SIM_STEPS, SWEEP_SIZES
from src.tube_mpc.artifacts import (
    load_json,
    load_params,
    load_problem,
    save_json,
    save_params,
    save_problem,
)
from src.tube_mpc.bench import (
    BenchmarkSpec,
    ClosedLoopTrace,
    Instance,
    Truth,
    generate_instance,
    simulate,
    soc_scaling_slope,
    sweep,
    sweep_metadata,
    verify_trace,
)
from src.tube_mpc.conic import SolverSettings
from src.tube_mpc.controller import ControllerConfig
from src.tube_mpc.errors import TubeMPCError
from src.tube_mpc.run_log import RunLog
from src.tube_mpc.terminal import design_terminal

logger = logging.getLogger(__name__)


def parse_size(text: str) -> Tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"Size must be n_x,n_u,n_theta, got {text!r}")
    return parts[0], parts[1], parts[2]


def parse_sizes(text: str) -> List[Tuple[int, int, int]]:
    return [parse_size(chunk) for chunk in text.split(";") if chunk.strip()]


def controller_config(args: argparse.Namespace) -> ControllerConfig:
    return ControllerConfig(
        gamma_rule=args.gamma_rule,
        horizon_method=args.horizon_method,
        online_terminal_refresh=getattr(args, "online_refresh", False),
        solver=SolverSettings.from_env(),
    )


def cmd_generate(args: argparse.Namespace) -> int:
    n_w = args.n_w if args.n_w is not None else min(N_W, args.size[0])
    spec = BenchmarkSpec.for_size(args.size, n_w=n_w, N=args.horizon, seed=args.seed)
    instance = generate_instance(spec, config=controller_config(args))
    extra = {"truth": instance.truth.to_dict(), "seed": args.seed, "redraws": instance.redraws}
    path = save_problem(instance.pd, args.output, extra)
    print(f"File {path} successfully created and saved.")
    return 0


def cmd_design(args: argparse.Namespace) -> int:
    loaded = load_problem(args.problem)
    if loaded is None:
        print(f"Problem file {args.problem} not found.")
        return 1
    pd, _ = loaded
    config = controller_config(args)
    params = design_terminal(
        pd, gamma_rule=config.gamma_rule, method=config.horizon_method, settings=config.solver
    )
    path = save_params(params, args.output)
    print(f"File {path} successfully created and saved.")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    loaded = load_problem(args.problem)
    if loaded is None:
        print(f"Problem file {args.problem} not found.")
        return 1
    pd, extra = loaded
    if "truth" not in extra:
        print(f"Problem file {args.problem} has no plant truth to simulate against.")
        return 1
    config = controller_config(args)
    if args.params:
        params = load_params(args.params)
        if params is None:
            print(f"Parameter file {args.params} not found.")
            return 1
    else:
        params = design_terminal(
            pd, gamma_rule=config.gamma_rule, method=config.horizon_method, settings=config.solver
        )
    seed = args.seed if args.seed is not None else int(extra.get("seed", 0))
    instance = Instance(pd, Truth.from_dict(extra["truth"]), params, seed)
    log = RunLog(args.log, run_id=f"{Path(args.problem).stem}-{seed}") if args.log else None
    trace = simulate(instance, config, args.steps, log=log)
    path = save_json(trace.to_dict(), args.output)
    print(f"File {path} successfully created and saved.")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = controller_config(args)
    specs = [
        BenchmarkSpec.for_size(size, N=args.horizon, T=args.steps, seed=args.seed, instances=args.instances)
        for size in args.sizes
    ]
    raw, summary = sweep(specs, config, args.workers)
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    summary.to_csv(output, index=False)
    raw.to_csv(output.with_suffix(".instances.csv"), index=False)
    meta = sweep_metadata(specs, config)
    # slope of the SOC count in n_theta among sizes sharing n_x and n_u
    for (n_x, n_u), group in summary.groupby(["n_x", "n_u"]):
        if group["n_theta"].nunique() > 1:
            slope = soc_scaling_slope(group["n_theta"], group["n_soc_blocks"])
            meta.setdefault("soc_slopes", []).append({"n_x": int(n_x), "n_u": int(n_u), "slope": slope})
    save_json(meta, output.with_suffix(".meta.json"))
    print(f"File {output} successfully created and saved.")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    data = load_json(args.trace)
    if data is None:
        print(f"Trace file {args.trace} not found.")
        return 1
    problems = verify_trace(ClosedLoopTrace.from_dict(data))
    for problem in problems:
        print(problem)
    print(f"{len(problems)} violations in {args.trace}.")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tube-mpc", description="Robust adaptive tube MPC with ellipsoidal tubes."
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    parser.add_argument("--gamma-rule", choices=["lemma", "algorithm"], default=GAMMA_RULE)
    parser.add_argument("--horizon-method", choices=["socp", "recursion"], default=HORIZON_METHOD)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Draw a random benchmark problem")
    p.add_argument("--size", type=parse_size, required=True, help="n_x,n_u,n_theta")
    p.add_argument("--n-w", type=int, default=None)
    p.add_argument("--horizon", type=int, default=HORIZON)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("design", help="Offline terminal design")
    p.add_argument("problem")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("run", help="Closed-loop simulation")
    p.add_argument("problem")
    p.add_argument("--params", default=None)
    p.add_argument("--steps", type=int, default=SIM_STEPS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", default=None, help="JSON-lines step log")
    p.add_argument("--online-refresh", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="Dimension sweep to CSV")
    p.add_argument("--sizes", type=parse_sizes, default=SWEEP_SIZES, help='e.g. "2,1,2;4,2,2"')
    p.add_argument("--instances", type=int, default=INSTANCES)
    p.add_argument("--steps", type=int, default=SIM_STEPS)
    p.add_argument("--horizon", type=int, default=HORIZON)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="Re-check the invariants of a trace")
    p.add_argument("trace")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TubeMPCError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
