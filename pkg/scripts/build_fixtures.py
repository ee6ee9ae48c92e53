"""Regenerate the small bundled fixtures (two_bus, triangle, cascade4, six_bus).

    python3 scripts/build_fixtures.py [output_dir]
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

from treegrid.case_io import write_case
from treegrid.experiment import dc_opf
from treegrid.network import Bus, GridCase, Line
from treegrid.partition import Partition, keep_largest_flow

OUT = Path(__file__).resolve().parents[1] / "src" / "treegrid" / "data" / "cases"


def two_bus() -> GridCase:
    buses = (Bus(1, pg=1.0, pg_max=2.0, area=1), Bus(2, pd=1.0, area=1))
    return GridCase(buses, (Line(1, 2, 1.0, 2.0),), name="two_bus")


def triangle() -> GridCase:
    # p = [1, -1, 0]; flows 2/3 on (1,2) and 1/3 around through bus 3
    buses = (Bus(1, pg=1.0, pg_max=2.0), Bus(2, pd=1.0), Bus(3))
    lines = (Line(1, 2, 1.0, 1.0), Line(1, 3, 1.0, 1.0), Line(3, 2, 1.0, 1.0))
    return GridCase(buses, lines, name="triangle")


def cascade4() -> GridCase:
    # ring 1-2-3-4-1 with chord (1,3), 2 pu from bus 1 to bus 3.  Losing the
    # chord puts 1 pu on (3,4) (limit 0.9); after (3,4) trips everything flows
    # through bus 2, which has room, so the cascade ends at stage 2.
    buses = (Bus(1, pg=2.0, pg_max=3.0), Bus(2), Bus(3, pd=2.0), Bus(4))
    lines = (
        Line(1, 2, 1.0, 2.5),
        Line(2, 3, 1.0, 2.5),
        Line(3, 4, 1.0, 0.9),
        Line(4, 1, 1.0, 1.5),
        Line(1, 3, 1.0, 1.5),
    )
    return GridCase(buses, lines, name="cascade4")


def six_bus() -> GridCase:
    buses = (
        Bus(1, pg_max=3.0, area=1),
        Bus(2, pd=0.5, pg_max=1.5, area=1),
        Bus(3, pd=1.0, area=1),
        Bus(4, pd=0.3, pg_max=2.0, area=2),
        Bus(5, pd=1.2, area=2),
        Bus(6, pd=0.8, area=2),
    )
    lines = (
        Line(1, 2, 10.0, 1.5),
        Line(1, 3, 10.0, 1.5),
        Line(2, 3, 10.0, 1.0),
        Line(4, 5, 10.0, 1.2),
        Line(4, 6, 10.0, 1.0),
        Line(5, 6, 10.0, 0.8),
        Line(3, 4, 5.0, 1.5),
        Line(2, 5, 5.0, 1.5),
    )
    grid = GridCase(buses, lines, name="six_bus")
    pg = dc_opf(grid).pg
    grid = replace(grid, buses=tuple(replace(b, pg=round(float(v), 10)) for b, v in zip(grid.buses, pg)))
    part = Partition.from_grid(grid)
    part = part.with_switching(keep_largest_flow(grid.topology(), grid.injections, part))
    return replace(grid, metadata={"partition": part.to_dict()})


BUILDERS = {"two_bus": two_bus, "triangle": triangle, "cascade4": cascade4, "six_bus": six_bus}


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else OUT
    out.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        write_case(build(), out / f"{name}.json")
        print(f"wrote {out / name}.json")
