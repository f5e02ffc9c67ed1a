"""Run one acceptance experiment and print its summary.

    python3 scripts/run_experiment.py karman --kw '{"viscosity": 4e-4}'
"""

import argparse
import json
import time

import numpy as np

from pfm_fsi import experiments as E

QUIET = {"free_acceleration", "buffer_resummation", "flow_map_fidelity"}
NAMES = ["free_acceleration", "buffer_resummation", "flow_map_fidelity", "karman", "sedimentation",
         "ablation", "leapfrog_energy", "swimmer", "flag_compare"]


def scalars(d):
    if isinstance(d, dict):
        return {k: scalars(v) for k, v in d.items() if not isinstance(v, np.ndarray)}
    return d


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("name", choices=NAMES)
    ap.add_argument("--kw", default="{}", help="JSON keyword arguments for the experiment")
    args = ap.parse_args()
    kw = json.loads(args.kw)
    if args.name not in QUIET:
        kw.setdefault("progress", lambda msg: print(msg, flush=True))
    start = time.time()
    out = getattr(E, args.name)(**kw)
    print(json.dumps(scalars(out), indent=1, default=str))
    print(f"wall {time.time() - start:.1f} s")


if __name__ == "__main__":
    main()
