#!/usr/bin/env python3
"""Generate the committed CVSS v3.0 golden file with an independent scorer.

This script intentionally does not import the medgate package.  It is a
second, standalone transcription of the v3.0 equations (table-driven, with
Decimal-based one-decimal ceilings), validated below against widely published
scores for well-known vector shapes before any golden value is emitted.

Output format: one "vector<TAB>base<TAB>temporal<TAB>environmental" per line.

Usage: python tools/gen_cvss_golden.py > tests/data/cvss_golden.tsv
"""

import random
import sys
from decimal import ROUND_CEILING, ROUND_HALF_EVEN, Decimal

W = {
    "AV": {"N": 0.85, "A": 0.62, "L": 0.55, "P": 0.2},
    "AC": {"L": 0.77, "H": 0.44},
    "PR_U": {"N": 0.85, "L": 0.62, "H": 0.27},
    "PR_C": {"N": 0.85, "L": 0.68, "H": 0.5},
    "UI": {"N": 0.85, "R": 0.62},
    "CIA": {"H": 0.56, "L": 0.22, "N": 0.0},
    "E": {"X": 1.0, "U": 0.91, "P": 0.94, "F": 0.97, "H": 1.0},
    "RL": {"X": 1.0, "O": 0.95, "T": 0.96, "W": 0.97, "U": 1.0},
    "RC": {"X": 1.0, "U": 0.92, "R": 0.96, "C": 1.0},
    "REQ": {"X": 1.0, "H": 1.5, "M": 1.0, "L": 0.5},
}


def ceil1(value):
    # One-decimal ceiling with binary-float drift below 5e-6 discarded first,
    # so 5.0 * 0.92 == 4.6000000000000005 rounds as the exact product 4.6.
    scaled = (Decimal(repr(value)) * 100000).quantize(Decimal("1"), rounding=ROUND_HALF_EVEN)
    return float((scaled / Decimal(10000)).quantize(Decimal("1"), rounding=ROUND_CEILING) / 10)


def parse(vec):
    metrics = dict(part.split(":") for part in vec.split("/")[1:])
    for m in ("E", "RL", "RC", "CR", "IR", "AR", "MAV", "MAC", "MPR", "MUI", "MS", "MC", "MI", "MA"):
        metrics.setdefault(m, "X")
    return metrics


def score(vec):
    m = parse(vec)

    iscb = 1.0 - (1.0 - W["CIA"][m["C"]]) * (1.0 - W["CIA"][m["I"]]) * (1.0 - W["CIA"][m["A"]])
    if m["S"] == "U":
        impact = 6.42 * iscb
    else:
        impact = 7.52 * (iscb - 0.029) - 3.25 * (iscb - 0.02) ** 15
    prw = W["PR_U" if m["S"] == "U" else "PR_C"][m["PR"]]
    expl = 8.22 * W["AV"][m["AV"]] * W["AC"][m["AC"]] * prw * W["UI"][m["UI"]]
    if impact <= 0:
        base = 0.0
    elif m["S"] == "U":
        base = ceil1(min(impact + expl, 10.0))
    else:
        base = ceil1(min(1.08 * (impact + expl), 10.0))

    tmult = W["E"][m["E"]] * W["RL"][m["RL"]] * W["RC"][m["RC"]]
    temporal = ceil1(base * tmult)

    eff = {k: (m["M" + k] if m["M" + k] != "X" else m[k]) for k in ("AV", "AC", "PR", "UI", "S", "C", "I", "A")}
    iscm = min(
        1.0
        - (1.0 - W["CIA"][eff["C"]] * W["REQ"][m["CR"]])
        * (1.0 - W["CIA"][eff["I"]] * W["REQ"][m["IR"]])
        * (1.0 - W["CIA"][eff["A"]] * W["REQ"][m["AR"]]),
        0.915,
    )
    if eff["S"] == "U":
        mimpact = 6.42 * iscm
    else:
        mimpact = 7.52 * (iscm - 0.029) - 3.25 * (iscm - 0.02) ** 15
    mprw = W["PR_U" if eff["S"] == "U" else "PR_C"][eff["PR"]]
    mexpl = 8.22 * W["AV"][eff["AV"]] * W["AC"][eff["AC"]] * mprw * W["UI"][eff["UI"]]
    if mimpact <= 0:
        env = 0.0
    elif eff["S"] == "U":
        env = ceil1(ceil1(min(mimpact + mexpl, 10.0)) * tmult)
    else:
        env = ceil1(ceil1(min(1.08 * (mimpact + mexpl), 10.0)) * tmult)

    return base, temporal, env


# Published scores for well-known vector shapes (wormable RCE, local privesc,
# reflected XSS, plain info disclosure, ...).  Abort rather than emit a golden
# file if any of these disagree.
ANCHORS = [
    ("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H", 9.8),
    ("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:C/C:H/I:H/A:H", 10.0),
    ("CVSS:3.0/AV:L/AC:L/PR:L/UI:N/S:U/C:H/I:H/A:H", 7.8),
    ("CVSS:3.0/AV:N/AC:L/PR:N/UI:R/S:C/C:L/I:L/A:N", 6.1),
    ("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:N/A:N", 7.5),
    ("CVSS:3.0/AV:N/AC:H/PR:N/UI:N/S:U/C:H/I:H/A:H", 8.1),
    ("CVSS:3.0/AV:N/AC:L/PR:L/UI:N/S:U/C:H/I:H/A:H", 8.8),
    ("CVSS:3.0/AV:N/AC:L/PR:N/UI:R/S:U/C:H/I:H/A:H", 8.8),
    ("CVSS:3.0/AV:L/AC:H/PR:N/UI:R/S:U/C:H/I:H/A:H", 7.0),
    ("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:N/I:N/A:N", 0.0),
    ("CVSS:3.0/AV:P/AC:L/PR:N/UI:N/S:U/C:N/I:N/A:N", 0.0),
]


def check_anchors():
    for vec, expected in ANCHORS:
        got = score(vec)[0]
        if got != expected:
            raise SystemExit(f"anchor mismatch for {vec}: got {got}, expected {expected}")


def random_vector(rng):
    parts = ["CVSS:3.0"]
    choices = {
        "AV": "NALP",
        "AC": "LH",
        "PR": "NLH",
        "UI": "NR",
        "S": "UC",
        "C": "HLN",
        "I": "HLN",
        "A": "HLN",
    }
    for name, values in choices.items():
        parts.append(f"{name}:{rng.choice(values)}")
    optional = {
        "E": "UPFH",
        "RL": "OTWU",
        "RC": "URC",
        "CR": "HML",
        "IR": "HML",
        "AR": "HML",
        "MAV": "NALP",
        "MAC": "LH",
        "MPR": "NLH",
        "MUI": "NR",
        "MS": "UC",
        "MC": "HLN",
        "MI": "HLN",
        "MA": "HLN",
    }
    for name, values in optional.items():
        value = rng.choice("X" * 2 + values)  # X twice as likely as any group
        if value != "X":
            parts.append(f"{name}:{value}")
    return "/".join(parts)


def main():
    check_anchors()
    rng = random.Random(20260810)
    lines = []
    for _ in range(200):
        vec = random_vector(rng)
        base, temporal, env = score(vec)
        lines.append(f"{vec}\t{base}\t{temporal}\t{env}")
    sys.stdout.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
