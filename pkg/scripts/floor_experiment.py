"""Error floor of biased sparse-gradient SGD on the block-quadratic objective.

For each seed and probe sparsity K, prints the plateau optimality gap, the
exact squared bias at the optimum with its lower/upper bounds, and the gap
reached when the undrawn blocks are filled with scaled population gradients.

    python3 scripts/floor_experiment.py --experts 4 --seeds 0,1,2,3,4
"""

import argparse

from ubsmoe import biaslab


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--experts", type=int, default=4)
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--imbalanced", action="store_true")
    args = ap.parse_args()

    ks = [k for k in (1, 2, 4, 8, 16) if k <= args.experts]
    print(f"{'seed':>4} {'K':>3} {'plateau':>10} {'with_pg':>10} {'lower':>9} {'bias_sq':>9} {'upper':>9}")
    for seed in (int(s) for s in args.seeds.split(",")):
        obj = biaslab.floor_objective(args.experts, args.dim, seed)
        floors = biaslab.run_floor_experiment(obj, ks, args.steps, seed, imbalanced=args.imbalanced)
        for k in ks:
            probe = biaslab.with_probe_sparsity(obj, k, args.imbalanced)
            rep = biaslab.bias_report(probe, probe.optimum())
            _, with_pg = biaslab.pg_floor_comparison(obj, k, args.steps, seed)
            print(f"{seed:>4} {k:>3} {floors[k]['plateau_gap']:>10.3e} {with_pg:>10.3e} "
                  f"{rep.lower[1]:>9.3e} {rep.client_bias_sq[1]:>9.3e} {rep.upper[1]:>9.3e}")


if __name__ == "__main__":
    main()
