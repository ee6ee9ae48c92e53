"""Regenerate the bundled two-area IEEE 39-bus fixture.

Starts from MATPOWER's case39 (bundled under treegrid/data/matpower), adds the
two control areas, tightens three line limits, dispatches generation with a
unit-cost DC OPF on the tree-connected network and attaches swing-equation
parameters.  Run from the repository root:

    python3 scripts/build_ieee39.py [output.json]
"""

from __future__ import annotations

import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from treegrid.case_io import bundled_path, document_to_grid, import_matpower, write_case
from treegrid.experiment import dc_opf

OUT = Path(__file__).resolve().parents[1] / "src" / "treegrid" / "data" / "cases" / "ieee39.json"

# buses of the small area; everything else is area 1
AREA2 = (2, 25, 26, 28, 29, 30, 37, 38)
TIE_OFF = ((1, 2), (26, 27))
# pu limits replacing case39's rateA.  (2,3) must carry the whole interchange
# once the other tie lines are open; (5,8) and (8,9) are the only supply paths
# to buses 7 and 8 after (6,7) trips, so their sum sets the need to shed there.
LIMITS = {(2, 3): 9.0, (5, 8): 5.5, (8, 9): 1.5}
# machine inertia constants H (s) of the New England system on a 100 MVA base
H = {30: 42.0, 31: 30.3, 32: 35.8, 33: 28.6, 34: 26.0, 35: 34.8, 36: 26.4,
     37: 24.3, 38: 34.5, 39: 500.0}
OMEGA0 = 2 * np.pi * 60
LOAD_INERTIA = 0.01
GEN_DAMPING = 1.0
LOAD_DAMPING = 1.0
ALPHA_LOAD = 1.0


def build():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        grid = document_to_grid(import_matpower(bundled_path("case39"), name="ieee39"))
    lines = list(grid.lines)
    for (a, b), lim in LIMITS.items():
        k = grid.find_line(a, b)
        lines[k] = replace(lines[k], limit=lim)
    grid = grid.with_lines(lines)

    off = {grid.find_line(a, b) for a, b in TIE_OFF}
    tree = grid.with_lines(
        [replace(ln, in_service=False) if k in off else ln for k, ln in enumerate(grid.lines)]
    )
    pg = dc_opf(tree).pg
    # alpha_G in proportion to capacity, normalised to 1 pu for the mean unit
    cap = np.array([b.pg_max for b in grid.buses])
    mean_cap = cap[cap > 0].mean()

    buses = []
    for j, b in enumerate(grid.buses):
        gen = b.id in H
        buses.append(replace(
            b,
            pg=round(float(pg[j]), 10),
            inertia=2 * H[b.id] / OMEGA0 if gen else LOAD_INERTIA,
            damping=GEN_DAMPING if gen else LOAD_DAMPING,
            alpha=round(b.pg_max / mean_cap, 10) if gen else 1.0,
            alpha_load=ALPHA_LOAD,
            area=2 if b.id in AREA2 else 1,
            gen_cost=1.0,
        ))
    meta = {
        "source": "MATPOWER case39 (New England 39-bus), DC model",
        "adaptations": [
            "line limits (2,3)=9.0, (5,8)=5.5, (8,9)=1.5 pu; other limits from rateA",
            "generation dispatched by unit-cost DC OPF with (1,2) and (26,27) open",
            "inertia M = 2H/(2*pi*60) from the New England machine H values; "
            f"load buses M={LOAD_INERTIA}",
            f"damping {GEN_DAMPING} (generators) / {LOAD_DAMPING} (loads); "
            f"alpha_G = pg_max / mean capacity; alpha_L = {ALPHA_LOAD}",
        ],
        "generator": "scripts/build_ieee39.py",
        "partition": {
            "area_of": {str(b.id): b.area for b in buses},
            "switched_off": [list(t) for t in TIE_OFF],
        },
    }
    return replace(grid, buses=tuple(buses), name="ieee39", metadata=meta)


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else OUT
    write_case(build(), out)
    print(f"wrote {out}")
